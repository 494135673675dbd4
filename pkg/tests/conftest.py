"""
Shared fixtures: a tiny vocabulary/config for gradient checks and the
bundled interaction logs.
"""

from pathlib import Path

import numpy as np
import pytest

from bmlp.core.encoding import Vocab, extract_aux, make_hetero
from bmlp.core.model import HyperParams, TrainingInstance

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
FIXTURE_DIR = FIXTURES / "mini"

# (item, behavior) with click=1, fav=2, buy=3
TINY_HISTORY = [(1, 1), (2, 1), (2, 2), (3, 1), (1, 3), (4, 1), (5, 2)]


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture
def behavior_fixture_dir() -> Path:
    return FIXTURES / "behavior"


@pytest.fixture
def tiny_vocab() -> Vocab:
    return Vocab(
        items=[f"i{k}" for k in range(10)],
        behaviors=["click", "fav", "buy"],
        target_behavior=3,
    )


@pytest.fixture
def tiny_hyper() -> HyperParams:
    return HyperParams(
        d=4, heads=2, blocks=1, seq_len=8, aux_len=3,
        dropout_rate=0.0, weight_decay=0.0, batch_size=4, seed=3,
    )


@pytest.fixture
def make_instance(tiny_vocab):
    def build(hyper, history=TINY_HISTORY, target=4, user="u1"):
        return TrainingInstance(
            hetero=make_hetero(history, hyper.seq_len, target, user),
            aux=extract_aux(history, hyper.aux_len, tiny_vocab),
            target_item=target,
            user=user,
            position=len(history),
        )
    return build


@pytest.fixture
def tiny_instance(make_instance, tiny_hyper):
    return make_instance(tiny_hyper)


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(1234)
