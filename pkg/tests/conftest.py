import numpy as np
import pytest
import torch

from grec.backbone import ModelConfig, OptimConfig
from grec.catalog import SyntheticWorldConfig
from grec.eval import ExperimentConfig, new_model, prepare


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(n_enc_layers=1, n_dec_layers=1, d_hidden=8, d_ffn=16, n_heads=2, sid_depth=2,
                sid_vocab=4, short_len=3, igr_k=2, long_window=6, profile_dim=5, instr_dim=8,
                d_side=4, d_align=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_experiment(**kw) -> ExperimentConfig:
    world = SyntheticWorldConfig(n_items=60, n_users=10, n_days=3, events_per_user=12,
                                 branching=(3, 2, 2), dim=8, taste_dim=2)
    base = dict(world=world, sid_depth=2, sid_width=4, model=tiny_model_config(),
                pretrain=OptimConfig(steps=5, batch_size=16, log_every=0), n_eval=None, beam_width=4,
                n_synthetic=20, rl_eval=10, rl_real_days=1)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_prep():
    return prepare(tiny_experiment())


@pytest.fixture
def tiny_model(tiny_prep):
    return new_model(tiny_prep, seed=0)


@pytest.fixture
def tiny_model64(tiny_prep):
    return new_model(tiny_prep, seed=0).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
