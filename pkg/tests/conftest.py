import numpy as np
import pytest
import torch

from imtda.synth_domains import DomainSpec, build_domain_dataset
from imtda.trainer import HyperParams

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_domains():
    """Source + fog + noise with a handful of images each."""
    src = build_domain_dataset(DomainSpec("source", seed=11), n_train=8, n_eval=6)
    fog = build_domain_dataset(DomainSpec("fog", seed=12), n_train=8, n_eval=6)
    noise = build_domain_dataset(DomainSpec("noise", seed=13), n_train=8, n_eval=6)
    return src, fog, noise


@pytest.fixture
def tiny_hyper():
    return HyperParams(iters_per_phase=6, pretrain_iters=8, dtm_iters=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line for the terminal summary."""
    lines = request.config.stash[ACCEPTANCE]

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        lines.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
