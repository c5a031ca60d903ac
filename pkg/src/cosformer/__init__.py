"""
COSFormer - continual learning of slide-level classification tasks.

Bags of patch embeddings are projected by Expert Consultation, encoded with
Nystrom attention and decoded word by word into class labels. Tasks arrive
one at a time; past experts freeze and a text-guided rehearsal buffer keeps
earlier tasks alive.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .clustering import chamfer_distance, cluster_slides, kmeans, kmedoids
from .continual import (
    BufferEntry,
    BufferStrategy,
    EarlyStopping,
    RehearsalBuffer,
    SequenceResult,
    TrainConfig,
    evaluate_bags,
    freeze_past_experts,
    importance_scores,
    past_to_present_loss,
    register_task,
    run_sequence,
    select_representatives,
    snapshot_logits,
    train_task,
)
from .errors import (
    ContractViolation,
    CosformerError,
    FormatError,
    GenerationFault,
    NumericFault,
    UsageError,
)
from .harness import ExperimentConfig, evaluate_run, report_run, run_experiment
from .metrics import AccuracyMatrix, Metrics, RunReport, compute_metrics, silhouette
from .model import (
    COSFormer,
    DecodeResult,
    ExpertCommittee,
    ModelConfig,
    classify_decoded,
    consult,
    ec_project,
    ec_weights,
    exact_attention,
    expert_weights,
    greedy_decode,
    mask_woi,
    nystrom_attention,
)
from .numerics import Parameter, Tensor, named_rng, no_grad, pinv_newton_schulz
from .optim import Adam, AdamState, adam_step
from .synthdata import (
    BagRecord,
    Stream,
    StreamConfig,
    TextStub,
    make_stream,
    read_bags,
    write_bags,
)
from .tasks import ClassSpec, Scenario, TaskSpec
from .vocabulary import Vocabulary

__version__ = "0.1.0"

__all__ = [
    # Model
    "COSFormer",
    "ModelConfig",
    "ExpertCommittee",
    "DecodeResult",
    "ec_weights",
    "expert_weights",
    "consult",
    "ec_project",
    "exact_attention",
    "nystrom_attention",
    "mask_woi",
    "greedy_decode",
    "classify_decoded",
    # Numerics
    "Tensor",
    "Parameter",
    "no_grad",
    "named_rng",
    "pinv_newton_schulz",
    "Adam",
    "AdamState",
    "adam_step",
    # Tasks and data
    "Scenario",
    "ClassSpec",
    "TaskSpec",
    "Vocabulary",
    "StreamConfig",
    "Stream",
    "BagRecord",
    "TextStub",
    "make_stream",
    "write_bags",
    "read_bags",
    # Continual training
    "TrainConfig",
    "BufferStrategy",
    "BufferEntry",
    "RehearsalBuffer",
    "EarlyStopping",
    "SequenceResult",
    "register_task",
    "freeze_past_experts",
    "importance_scores",
    "select_representatives",
    "snapshot_logits",
    "past_to_present_loss",
    "train_task",
    "evaluate_bags",
    "run_sequence",
    "cluster_slides",
    "kmeans",
    "kmedoids",
    "chamfer_distance",
    # Metrics and harness
    "AccuracyMatrix",
    "Metrics",
    "RunReport",
    "compute_metrics",
    "silhouette",
    "ExperimentConfig",
    "run_experiment",
    "evaluate_run",
    "report_run",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    # Errors
    "CosformerError",
    "ContractViolation",
    "NumericFault",
    "GenerationFault",
    "FormatError",
    "UsageError",
]
