import numpy as np
import pytest
import torch

from onegan.core import HyperParams, LossWeights, RunConfig


def tiny_hp(**kw) -> HyperParams:
    base = dict(
        N_P=2, N_C=4, d_z=8, d_c=4, d_p=4, d_bg=4, H=32, channel_scale=1 / 16,
        batch_size=4, total_iters=10, phase1_iters=2, real_recon_delay=1, encoder_warmup_iters=1,
    )
    base.update(kw)
    return HyperParams(**base)


@pytest.fixture
def hp():
    return tiny_hp()


@pytest.fixture
def cfg():
    return RunConfig(hp=tiny_hp(), weights=LossWeights(), seed=3, hflip=False)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def rand_images(n, hp, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, hp.H, hp.H, generator=g) * 2 - 1


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
