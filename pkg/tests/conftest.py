import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from seqvis.envsim import EnvConfig, ToyReasoner, generate_tasks  # noqa: E402
from seqvis.numerics import RngStream  # noqa: E402
from seqvis.policy import PolicyParams  # noqa: E402
from seqvis.regions import build_region_bank  # noqa: E402
from seqvis.saliency import PatchGrid  # noqa: E402

settings.register_profile("seqvis", deadline=None, max_examples=60)
settings.load_profile("seqvis")


@pytest.fixture(scope="session")
def env_config():
    return EnvConfig()


@pytest.fixture(scope="session")
def reasoner(env_config):
    return ToyReasoner.from_seed(0, env_config)


@pytest.fixture(scope="session")
def small_tasks(env_config, reasoner):
    return generate_tasks(11, 40, env_config, reasoner)


@pytest.fixture(scope="session")
def small_banks(small_tasks):
    return [build_region_bank(t.grid) for t in small_tasks]


@pytest.fixture
def params(env_config):
    return PolicyParams.initialize(env_config.d_l, env_config.d_v, RngStream(3, "params"))


def grid_from_raw(values):
    """A grid whose cosine saliency reproduces ``values`` up to min-max scaling.

    Each patch embedding is ``(v, sqrt(1 - v^2))`` against the query ``(1, 0)``,
    so cosine similarity equals ``v`` for ``v`` in [0, 1].
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    emb = np.stack([v, np.sqrt(1.0 - v**2)], axis=-1)
    return PatchGrid(emb, emb.copy(), np.array([1.0, 0.0]))


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Log one acceptance outcome; all lines are repeated in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
