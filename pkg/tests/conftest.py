"""
Shared fixtures: a tiny synthetic stream and a small model that trains in
well under a second per epoch.
"""

import pytest
from support import (
    WordHashEncoder,
    make_task,
    small_model_config,
    small_stream_config,
)

from cosformer import COSFormer, TextStub, make_stream


@pytest.fixture
def stream():
    return make_stream(small_stream_config())


@pytest.fixture
def text_stub(stream):
    return TextStub.from_stream(stream)


@pytest.fixture
def encoder():
    return WordHashEncoder()


@pytest.fixture
def model(encoder):
    return COSFormer(small_model_config(), encoder, seed=7)


@pytest.fixture
def two_task_model(model):
    model.add_task(
        make_task(0, [("lung", "adenocarcinoma"), ("lung", "squamous", "carcinoma")])
    )
    model.add_task(make_task(1, [("ductal", "carcinoma"), ("lobular", "carcinoma")]))
    return model
