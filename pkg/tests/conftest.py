import numpy as np
import pytest
import torch

from meme.model import HeadConfig, MemeModel, ModalitySpec
from meme.objective import ObjectiveConfig

torch.set_num_threads(1)


def make_model(latent_dim=2, s_dim=3, t_dim=3, hidden=(4,), n_pseudo=5, seed=0, likelihood="laplace",
               scale=0.5, dtype="float64"):
    """Tiny double-precision model used across the oracle tests."""
    return MemeModel(
        ModalitySpec("s", (s_dim,), likelihood=likelihood, likelihood_scale=scale),
        ModalitySpec("t", (t_dim,), likelihood=likelihood, likelihood_scale=scale),
        latent_dim, HeadConfig(hidden=hidden), n_pseudo, seed=seed, dtype=dtype,
    )


def payloads(n, dim, seed):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((n, dim)))


@pytest.fixture
def tiny():
    return make_model()


@pytest.fixture
def cfg():
    return ObjectiveConfig(mc_samples=4, classifier_weight=10.0, pseudo_count=5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
