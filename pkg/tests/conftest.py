import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adrmx.data import CompositeBatch  # noqa: E402
from adrmx.model import AdrmxConfig, AdrmxParams  # noqa: E402


# filled by test_acceptance.report(), echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_batch(n_per_domain=4, num_domains=3, num_classes=2, d_in=5, seed=0):
    rng = np.random.default_rng(seed)
    b = n_per_domain * num_domains
    labels = np.tile(np.arange(n_per_domain) % num_classes, num_domains)
    domains = np.repeat(np.arange(num_domains), n_per_domain)
    return CompositeBatch(rng.standard_normal((b, d_in)), labels, domains, domains.copy())


@pytest.fixture
def small_config():
    return AdrmxConfig(d_in=5, num_classes=2, num_domains=3, latent_dim=8, encoder_hidden=(10,),
                       disc_hidden=(9, 9))


@pytest.fixture
def small_params(small_config):
    return AdrmxParams(small_config, seed=0)


@pytest.fixture
def batch():
    return make_batch()
