"""
The COSFormer network.

Patch embeddings are projected into model space by Expert Consultation (a
generalist matrix plus router-weighted per-task experts), encoded by a stack
of Nystrom self-attention layers and read out either by an autoregressive
word decoder (the default) or by a cumulative linear classification head.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Protocol, Union

import numpy as np

from .errors import ContractViolation
from .numerics import (
    ArrayLike,
    Parameter,
    Tensor,
    as_tensor,
    concat,
    exp,
    layer_norm,
    mean,
    named_rng,
    no_grad,
    pinv_newton_schulz,
    relu,
    softmax_rows,
    sum_,
    transpose,
)
from .tasks import TaskSpec
from .vocabulary import BOS, BOS_TOKEN, EOS, EOS_TOKEN, Vocabulary

logger = logging.getLogger(__name__)

EC_FORMS = ("softmax", "literal")
HEAD_KINDS = ("decoder", "linear")


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    d_f: int = 16
    d_model: int = 32
    d_text: int = 16
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_landmarks: int = 8
    pinv_iters: int = 6
    ffn_mult: int = 4
    ec_form: str = "softmax"
    expert_consultation: bool = True
    head: str = "decoder"
    max_decode_len: int = 8
    max_positions: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ContractViolation(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.ec_form not in EC_FORMS:
            raise ContractViolation(f"ec_form must be one of {EC_FORMS}, got {self.ec_form}")
        if self.head not in HEAD_KINDS:
            raise ContractViolation(f"head must be one of {HEAD_KINDS}, got {self.head}")
        if min(self.d_f, self.d_model, self.d_text, self.n_landmarks, self.pinv_iters) < 1:
            raise ContractViolation("model dimensions and iteration counts must be >= 1")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ContractViolation("layer counts must be >= 0")
        if self.max_decode_len < 1:
            raise ContractViolation("max_decode_len must be >= 1")

    @classmethod
    def published(cls, **overrides: Any) -> "ModelConfig":
        """Published model width; everything else as the desk defaults."""
        return cls(**{"d_model": 512, "n_heads": 8, **overrides})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**data)


class TextEncoder(Protocol):
    """Frozen word-embedding provider for the decoder input."""

    d_text: int

    def embed_word(self, word: str) -> np.ndarray: ...


def _normal(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


# ---------------------------------------------------------------------------
# Expert Consultation
# ---------------------------------------------------------------------------


class ExpertCommittee:
    """Generalist projection, per-task experts and the two-layer router.

    The router's second layer is stored as one (d_h, 1) column per expert so
    that it can be frozen together with its expert.
    """

    def __init__(self, d_f: int, d_model: int, d_hidden: int, rng: np.random.Generator):
        self.d_f = d_f
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.general = Parameter(_normal(rng, d_f, (d_f, d_model)), "ec.general")
        self.fc1_weight = Parameter(_normal(rng, d_f, (d_f, d_hidden)), "ec.router.fc1.weight")
        self.fc1_bias = Parameter(np.zeros(d_hidden), "ec.router.fc1.bias")
        self.experts: list[Parameter] = []
        self.router_rows: list[Parameter] = []
        self.router_biases: list[Parameter] = []

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def add_expert(self, rng: np.random.Generator) -> int:
        """Append a zero expert and a small random router row; return its index."""
        index = self.num_experts
        self.experts.append(Parameter(np.zeros((self.d_f, self.d_model)), f"ec.expert.{index}"))
        self.router_rows.append(
            Parameter(rng.uniform(-1e-2, 1e-2, size=(self.d_hidden, 1)), f"ec.router.fc2.{index}")
        )
        self.router_biases.append(Parameter(np.zeros(1), f"ec.router.fc2_bias.{index}"))
        return index

    def freeze_before(self, task_id: int) -> None:
        for i in range(self.num_experts):
            frozen = i < task_id
            self.experts[i].frozen = frozen
            self.router_rows[i].frozen = frozen
            self.router_biases[i].frozen = frozen

    def router_logits(self, z: Tensor) -> Tensor:
        """Per-patch task logits, shape (N, num_experts)."""
        if self.num_experts == 0:
            raise ContractViolation("router has no experts")
        hidden = relu(z @ self.fc1_weight + self.fc1_bias)
        columns = [hidden @ row + bias for row, bias in zip(self.router_rows, self.router_biases)]
        return concat(columns, axis=1) if len(columns) > 1 else columns[0]

    def parameters(self) -> list[Parameter]:
        params = [self.general, self.fc1_weight, self.fc1_bias]
        for trio in zip(self.experts, self.router_rows, self.router_biases):
            params.extend(trio)
        return params


def patch_task_weights(
    router_logits: Tensor,
    target_task: Optional[int],
    gamma: float,
    form: str = "softmax",
) -> Tensor:
    """Per-patch distribution over tasks leaning towards the target task."""
    n_tasks = router_logits.shape[1]
    if target_task is not None and not 0 <= target_task < n_tasks:
        raise ContractViolation(f"target task {target_task} out of range for {n_tasks} experts")
    if target_task is None:
        return softmax_rows(router_logits)
    scale = np.ones(n_tasks)
    scale[target_task] = gamma
    scaled = router_logits * Tensor(scale)
    if form == "softmax":
        return softmax_rows(scaled)
    # literal form: the scaled target logit enters the denominator unexponentiated
    others = np.ones(n_tasks)
    others[target_task] = 0.0
    denominator = sum_(exp(router_logits) * Tensor(others), axis=1, keepdims=True)
    denominator = denominator + scaled[:, target_task : target_task + 1]
    return exp(scaled) / denominator


def expert_weights(
    router_logits: Tensor,
    target_task: Optional[int],
    gamma: float,
    beta: float,
    form: str = "softmax",
) -> Tensor:
    """Average the per-patch weights over patches and shift the target entry.

    Without a target task the call behaves as gamma=1, beta=0.
    """
    per_patch = patch_task_weights(router_logits, target_task, gamma, form)
    averaged = mean(per_patch, axis=0)
    if target_task is None or beta == 0.0:
        return averaged
    shift = np.zeros(router_logits.shape[1])
    shift[target_task] = beta
    return averaged + Tensor(shift)


def ec_weights(
    committee: ExpertCommittee,
    z: ArrayLike,
    target_task: Optional[int],
    gamma: float,
    beta: float,
    form: str = "softmax",
) -> Tensor:
    """Task weights w-bar for a bag of patch embeddings (N x d_f)."""
    return expert_weights(committee.router_logits(as_tensor(z)), target_task, gamma, beta, form)


def consult(committee: ExpertCommittee, w_bar: Optional[ArrayLike]) -> Tensor:
    """theta_EC = theta_general + sum_i w_i theta_i."""
    if committee.num_experts == 0:
        return committee.general
    if w_bar is None:
        raise ContractViolation("consult needs weights when experts exist")
    weights = as_tensor(w_bar)
    if weights.shape != (committee.num_experts,):
        raise ContractViolation(
            f"consult got {weights.shape} weights for {committee.num_experts} experts"
        )
    theta = committee.general
    for i, expert in enumerate(committee.experts):
        theta = theta + expert * weights[i]
    return theta


def ec_project(
    committee: ExpertCommittee,
    z: ArrayLike,
    target_task: Optional[int],
    gamma: float,
    beta: float,
    form: str = "softmax",
) -> Tensor:
    """z' = z . theta_EC for one bag."""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractViolation(f"ec_project needs a non-empty N x d_f bag, got {z.shape}")
    if z.shape[1] != committee.d_f:
        raise ContractViolation(f"bag has d_f={z.shape[1]}, committee expects {committee.d_f}")
    if committee.num_experts == 0:
        return z @ committee.general
    w_bar = ec_weights(committee, z, target_task, gamma, beta, form)
    return z @ consult(committee, w_bar)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def exact_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for a single head."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ContractViolation(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    scores = (q @ transpose(k)) * (1.0 / math.sqrt(q.shape[1]))
    mask = None
    if causal:
        mask = np.triu(np.ones((q.shape[0], k.shape[0]), dtype=bool), k=1)
    return softmax_rows(scores, mask) @ v


def segment_means(n: int, m: int) -> np.ndarray:
    """(m x n) averaging matrix over m contiguous segments.

    The remainder of n / m goes to the leading segments.
    """
    base, extra = divmod(n, m)
    pool = np.zeros((m, n))
    start = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        pool[i, start : start + size] = 1.0 / size
        start += size
    return pool


def nystrom_attention(
    q: Tensor, k: Tensor, v: Tensor, n_landmarks: int, pinv_iters: int = 6
) -> Tensor:
    """Landmark approximation of softmax attention for a single head.

    With as many landmarks as tokens the exact kernel is used instead.
    """
    n = q.shape[0]
    if n_landmarks < 1:
        raise ContractViolation("n_landmarks must be >= 1")
    if n_landmarks > n:
        logger.debug("clamping %d landmarks to sequence length %d", n_landmarks, n)
    m = min(n_landmarks, n)
    if m == n:
        return exact_attention(q, k, v)
    pool = Tensor(segment_means(n, m))
    q_land = pool @ q
    k_land = pool @ k
    scale = 1.0 / math.sqrt(q.shape[1])
    kernel_1 = softmax_rows((q @ transpose(k_land)) * scale)
    kernel_2 = softmax_rows((q_land @ transpose(k_land)) * scale)
    kernel_3 = softmax_rows((q_land @ transpose(k)) * scale)
    return (kernel_1 @ pinv_newton_schulz(kernel_2, pinv_iters)) @ (kernel_3 @ v)


class MultiHeadAttention:
    """Query/key/value/output projections around per-head exact attention."""

    def __init__(self, prefix: str, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Parameter(_normal(rng, d_model, (d_model, d_model)), f"{prefix}.wq")
        self.wk = Parameter(_normal(rng, d_model, (d_model, d_model)), f"{prefix}.wk")
        self.wv = Parameter(_normal(rng, d_model, (d_model, d_model)), f"{prefix}.wv")
        self.wo = Parameter(_normal(rng, d_model, (d_model, d_model)), f"{prefix}.wo")

    def _heads(self, x_q: Tensor, x_kv: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        q, k, v = x_q @ self.wq, x_kv @ self.wk, x_kv @ self.wv
        heads = []
        for h in range(self.n_heads):
            cols = slice(h * self.d_head, (h + 1) * self.d_head)
            heads.append((q[:, cols], k[:, cols], v[:, cols]))
        return heads

    def _merge(self, outputs: list[Tensor]) -> Tensor:
        merged = concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]
        return merged @ self.wo

    def __call__(self, x_q: Tensor, x_kv: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        return self._merge(
            [exact_attention(q, k, v, causal) for q, k, v in self._heads(x_q, x_kv)]
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


class NystromSelfAttention(MultiHeadAttention):
    """Multi-head self-attention with the landmark approximation per head."""

    def __init__(
        self,
        prefix: str,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        n_landmarks: int = 8,
        pinv_iters: int = 6,
    ):
        super().__init__(prefix, d_model, n_heads, rng)
        self.n_landmarks = n_landmarks
        self.pinv_iters = pinv_iters

    def __call__(self, x_q: Tensor, x_kv: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        if x_kv is not None or causal:
            raise ContractViolation("Nystrom attention is non-causal self-attention only")
        return self._merge(
            [
                nystrom_attention(q, k, v, self.n_landmarks, self.pinv_iters)
                for q, k, v in self._heads(x_q, x_q)
            ]
        )


# ---------------------------------------------------------------------------
# Encoder and decoder stacks
# ---------------------------------------------------------------------------


class EncoderLayer:
    def __init__(self, index: int, config: ModelConfig, rng: np.random.Generator):
        prefix = f"encoder.{index}"
        self.eps = config.ln_eps
        self.attention = NystromSelfAttention(
            f"{prefix}.attn",
            config.d_model,
            config.n_heads,
            rng,
            config.n_landmarks,
            config.pinv_iters,
        )
        self.norm_gain = Parameter(np.ones(config.d_model), f"{prefix}.norm.gain")
        self.norm_bias = Parameter(np.zeros(config.d_model), f"{prefix}.norm.bias")

    def __call__(self, z: Tensor) -> Tensor:
        return z + layer_norm(self.attention(z), self.norm_gain, self.norm_bias, self.eps)

    def parameters(self) -> list[Parameter]:
        return self.attention.parameters() + [self.norm_gain, self.norm_bias]


class EncoderStack:
    """N_e layers of z <- z + Norm(NA(z)); shape preserving."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.layers = [EncoderLayer(i, config, rng) for i in range(config.n_encoder_layers)]

    def __call__(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer(z)
        return z

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class DecoderLayer:
    def __init__(self, index: int, config: ModelConfig, rng: np.random.Generator):
        prefix = f"decoder.{index}"
        d, hidden = config.d_model, config.ffn_mult * config.d_model
        self.eps = config.ln_eps
        self.self_attention = MultiHeadAttention(f"{prefix}.self_attn", d, config.n_heads, rng)
        self.cross_attention = MultiHeadAttention(f"{prefix}.cross_attn", d, config.n_heads, rng)
        self.norm1_gain = Parameter(np.ones(d), f"{prefix}.norm1.gain")
        self.norm1_bias = Parameter(np.zeros(d), f"{prefix}.norm1.bias")
        self.norm2_gain = Parameter(np.ones(d), f"{prefix}.norm2.gain")
        self.norm2_bias = Parameter(np.zeros(d), f"{prefix}.norm2.bias")
        self.ffn_w1 = Parameter(_normal(rng, d, (d, hidden)), f"{prefix}.ffn.w1")
        self.ffn_b1 = Parameter(np.zeros(hidden), f"{prefix}.ffn.b1")
        self.ffn_w2 = Parameter(_normal(rng, hidden, (hidden, d)), f"{prefix}.ffn.w2")
        self.ffn_b2 = Parameter(np.zeros(d), f"{prefix}.ffn.b2")

    def __call__(self, h: Tensor, memory: Tensor) -> Tensor:
        h = h + layer_norm(
            self.self_attention(h, causal=True), self.norm1_gain, self.norm1_bias, self.eps
        )
        c = h + layer_norm(
            self.cross_attention(h, memory), self.norm2_gain, self.norm2_bias, self.eps
        )
        return relu(c @ self.ffn_w1 + self.ffn_b1) @ self.ffn_w2 + self.ffn_b2

    def parameters(self) -> list[Parameter]:
        return (
            self.self_attention.parameters()
            + self.cross_attention.parameters()
            + [self.norm1_gain, self.norm1_bias, self.norm2_gain, self.norm2_bias]
            + [self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]
        )


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


class DecoderStack:
    """Word-embedding input, N_d decoder layers and a growing output head."""

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        special_embeddings: np.ndarray,
    ):
        d = config.d_model
        self.word_table = np.array(special_embeddings, dtype=np.float64)
        self.input_weight = Parameter(
            _normal(rng, config.d_text, (config.d_text, d)), "decoder.input.weight"
        )
        self.input_bias = Parameter(np.zeros(d), "decoder.input.bias")
        self.positions = sinusoidal_positions(config.max_positions, d)
        self.layers = [DecoderLayer(i, config, rng) for i in range(config.n_decoder_layers)]
        n_words = len(self.word_table)
        self.head_weight = Parameter(_normal(rng, d, (n_words, d)), "head.weight")
        self.head_bias = Parameter(np.zeros(n_words), "head.bias")

    @property
    def vocab_size(self) -> int:
        return len(self.word_table)

    def append_words(self, embeddings: np.ndarray, rng: np.random.Generator) -> None:
        """Grow the frozen word table and the output head; old rows are kept bitwise."""
        if len(embeddings) == 0:
            return
        d = self.head_weight.shape[1]
        self.word_table = np.vstack([self.word_table, embeddings])
        new_rows = _normal(rng, d, (len(embeddings), d))
        self.head_weight.assign(np.vstack([self.head_weight.data, new_rows]))
        self.head_bias.assign(np.concatenate([self.head_bias.data, np.zeros(len(embeddings))]))

    def hidden(self, memory: Tensor, prefix: Sequence[int]) -> Tensor:
        if len(prefix) == 0:
            raise ContractViolation("decoder prefix is empty")
        if prefix[0] != BOS:
            raise ContractViolation("decoder prefix must start with BOS")
        if len(prefix) > len(self.positions):
            raise ContractViolation(f"prefix longer than {len(self.positions)} positions")
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ContractViolation(f"prefix has ids outside vocabulary of {self.vocab_size}")
        words = Tensor(self.word_table[ids])
        h = words @ self.input_weight + self.input_bias + Tensor(self.positions[: len(ids)])
        for layer in self.layers:
            h = layer(h, memory)
        return h

    def logits(self, memory: Tensor, prefix: Sequence[int]) -> Tensor:
        """Next-token logits for every prefix position, shape (L, N_voc)."""
        return self.hidden(memory, prefix) @ transpose(self.head_weight) + self.head_bias

    def parameters(self) -> list[Parameter]:
        params = [self.input_weight, self.input_bias]
        params.extend(p for layer in self.layers for p in layer.parameters())
        return params + [self.head_weight, self.head_bias]


class LinearHead:
    """Mean-pooled memory to cumulative class logits; grows by class rows."""

    def __init__(self, d_model: int):
        self.weight = Parameter(np.zeros((0, d_model)), "linear_head.weight")
        self.bias = Parameter(np.zeros(0), "linear_head.bias")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def append_classes(self, count: int, rng: np.random.Generator) -> None:
        d = self.weight.shape[1]
        self.weight.assign(np.vstack([self.weight.data, _normal(rng, d, (count, d))]))
        self.bias.assign(np.concatenate([self.bias.data, np.zeros(count)]))

    def pooled(self, memory: Tensor) -> Tensor:
        return mean(memory, axis=0, keepdims=True)

    def __call__(self, memory: Tensor) -> Tensor:
        return self.pooled(memory) @ transpose(self.weight) + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# The full model
# ---------------------------------------------------------------------------


@dataclass
class DecodeResult:
    """Decoded word ids (without BOS/EOS) and whether EOS was never reached."""

    tokens: tuple[int, ...]
    truncated: bool = False
    steps: list[np.ndarray] = field(default_factory=list, repr=False)


class COSFormer:
    """Expert Consultation, Nystrom encoder and decoder or linear head."""

    def __init__(self, config: ModelConfig, text_encoder: TextEncoder, seed: int = 0):
        if text_encoder.d_text != config.d_text:
            raise ContractViolation(
                f"text encoder d_text={text_encoder.d_text} != model d_text={config.d_text}"
            )
        self.config = config
        self.text_encoder = text_encoder
        self.rng = named_rng(seed, "init")
        self.vocab = Vocabulary()
        self.tasks: list[TaskSpec] = []
        self.committee = ExpertCommittee(config.d_f, config.d_model, config.d_model, self.rng)
        self.encoder = EncoderStack(config, self.rng)
        specials = np.stack(
            [text_encoder.embed_word(BOS_TOKEN), text_encoder.embed_word(EOS_TOKEN)]
        )
        self.decoder = DecoderStack(config, self.rng, specials)
        self.linear_head = LinearHead(config.d_model)

    @property
    def uses_decoder(self) -> bool:
        return self.config.head == "decoder"

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = self.committee.parameters() + self.encoder.parameters()
        if self.uses_decoder:
            return params + self.decoder.parameters()
        return params + self.linear_head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            assert p.name is not None
            named[p.name] = p
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractViolation(f"state is missing parameters: {sorted(missing)}")
        for name, param in params.items():
            if state[name].shape != param.data.shape:
                raise ContractViolation(f"shape mismatch for {name}")
            param.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- growth -----------------------------------------------------------

    def add_task(self, task: TaskSpec) -> list[int]:
        """Grow experts, router, vocabulary and heads for a new task."""
        if task.task_id != self.num_tasks:
            raise ContractViolation(
                f"task id {task.task_id} does not follow the {self.num_tasks} registered tasks"
            )
        new_ids = self.vocab.register_task(task)
        embeddings = np.array(
            [self.text_encoder.embed_word(self.vocab.words[i]) for i in new_ids]
        ).reshape(len(new_ids), self.config.d_text)
        self.decoder.append_words(embeddings, self.rng)
        self.linear_head.append_classes(task.num_classes, self.rng)
        if self.config.expert_consultation:
            self.committee.add_expert(self.rng)
        self.tasks.append(task)
        return new_ids

    # -- forward pieces ---------------------------------------------------

    def ec_target(self, task_id: Optional[int], use_task: bool = True) -> Optional[int]:
        """Target handed to Expert Consultation (None means gamma=1, beta=0)."""
        if task_id is None or not use_task or not self.config.expert_consultation:
            return None
        return task_id

    def project(
        self,
        patches: ArrayLike,
        target_task: Optional[int],
        gamma: float = 1.0,
        beta: float = 0.0,
    ) -> Tensor:
        return ec_project(
            self.committee, patches, target_task, gamma, beta, self.config.ec_form
        )

    def encode(self, z_prime: Tensor) -> Tensor:
        return self.encoder(z_prime)

    def memory(
        self,
        patches: ArrayLike,
        target_task: Optional[int],
        gamma: float = 1.0,
        beta: float = 0.0,
    ) -> Tensor:
        return self.encode(self.project(patches, target_task, gamma, beta))

    def decode_logits(self, memory: Tensor, prefix: Sequence[int]) -> Tensor:
        return self.decoder.logits(memory, prefix)

    def decode_step(self, memory: Tensor, prefix: Sequence[int]) -> Tensor:
        """Logits of the token following ``prefix``, shape (N_voc,)."""
        logits = self.decode_logits(memory, prefix)
        return logits[len(prefix) - 1]

    def sample_logits(self, memory: Tensor, task_id: int, class_id: int) -> Tensor:
        """Teacher-forced logits for every target step of a labelled bag."""
        if self.uses_decoder:
            label = self.vocab.label(task_id, class_id)
            return self.decode_logits(memory, (BOS,) + label)
        return self.linear_head(memory)

    def sample_targets(self, task_id: int, class_id: int) -> list[int]:
        if self.uses_decoder:
            return list(self.vocab.label(task_id, class_id)) + [EOS]
        return [self.vocab.global_class(task_id, class_id)]

    def embedding(self, memory: Tensor) -> np.ndarray:
        """Vector consumed by the classification head at the first step."""
        with no_grad():
            if self.uses_decoder:
                return self.decoder.hidden(memory, (BOS,)).data[0].copy()
            return self.linear_head.pooled(memory).data[0].copy()


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def mask_woi(logits: np.ndarray, woi: Union[set[int], frozenset[int]]) -> np.ndarray:
    """Keep Words-of-Interest and EOS, set everything else to -inf."""
    if not woi:
        raise ContractViolation("empty Words-of-Interest set")
    keep = np.zeros(len(logits), dtype=bool)
    keep[list(woi)] = True
    keep[EOS] = True
    return np.where(keep, logits, -np.inf)


def greedy_decode(
    model: COSFormer,
    memory: Tensor,
    task_id: Optional[int] = None,
    max_len: Optional[int] = None,
) -> DecodeResult:
    """Argmax decoding from BOS; ``task_id`` enables the WoI mask.

    ``max_len`` bounds the whole sequence including BOS.
    """
    max_len = model.config.max_decode_len if max_len is None else max_len
    if max_len < 1:
        raise ContractViolation("max_len must be >= 1")
    woi = model.vocab.words_of_interest(task_id) if task_id is not None else None
    prefix = [BOS]
    steps: list[np.ndarray] = []
    with no_grad():
        while len(prefix) < max_len:
            logits = model.decode_step(memory, prefix).data.copy()
            if woi is not None:
                logits = mask_woi(logits, woi)
            logits[BOS] = -np.inf
            steps.append(logits)
            token = int(np.argmax(logits))
            if token == EOS:
                return DecodeResult(tuple(prefix[1:]), truncated=False, steps=steps)
            prefix.append(token)
    return DecodeResult(tuple(prefix[1:]), truncated=True, steps=steps)


def classify_decoded(
    decoded: Union[DecodeResult, Sequence[int]], truth: Sequence[int]
) -> bool:
    """Exact label-sequence match; truncated decodes are never correct."""
    if len(truth) == 0:
        raise ContractViolation("ground-truth label is empty")
    if isinstance(decoded, DecodeResult):
        if decoded.truncated:
            return False
        decoded = decoded.tokens
    return tuple(decoded) == tuple(truth)


def predict_class(model: COSFormer, memory: Tensor, task_id: Optional[int] = None) -> int:
    """Linear-head prediction; a task id restricts argmax to its class range."""
    with no_grad():
        logits = model.linear_head(memory).data[0]
    if task_id is None:
        return int(np.argmax(logits))
    allowed = model.vocab.class_range(task_id)
    return allowed[int(np.argmax(logits[allowed]))]

