from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from metaqr.assembly import assemble_dense
from metaqr.geometry import ArrayLayout
from metaqr.logging_utils import EVENT_LOGGER
from metaqr.parallel import WORKERS_ENV
from metaqr.pipeline import build_problem
from metaqr.scenario import Scenario
from metaqr.settings_store import DEFAULT_SCENARIO


def make_scenario(output_dir: Path, **overrides) -> Scenario:
    settings = {**DEFAULT_SCENARIO, "output_dir": str(output_dir), **overrides}
    return Scenario.from_settings(settings, workers=int(settings["workers"]))


class KernelBlocks:
    """Synthetic symmetric Z: a Helmholtz kernel between small point clouds, one per atom."""

    def __init__(self, layout: ArrayLayout, per_atom: int = 6, k: float = 1.0, coupling: float = 1.0,
                 diagonal=None, seed: int = 0):
        rng = np.random.default_rng(seed)
        offsets = rng.uniform(-0.3, 0.3, size=(per_atom, 3)) * layout.sphere_radius
        self.points = [center + offsets for center in layout.centers]
        self.k = k
        self.coupling = coupling
        self.per_atom = per_atom
        self.n_atoms = layout.atom_count
        if diagonal is None:
            a = rng.normal(size=(per_atom, per_atom)) + 1j * rng.normal(size=(per_atom, per_atom))
            diagonal = np.eye(per_atom) + 0.05 / math.sqrt(per_atom) * (a + a.T)
        self.diagonal = diagonal
        self.calls = 0

    def __call__(self, i: int, j: int) -> np.ndarray:
        self.calls += 1
        if i == j:
            return self.diagonal
        r = cdist(self.points[i], self.points[j])
        return self.coupling * np.exp(-1j * self.k * r) / (4.0 * math.pi * r)

    def dense(self) -> np.ndarray:
        return np.block([[self(i, j) for j in range(self.n_atoms)] for i in range(self.n_atoms)])


@pytest.fixture(autouse=True)
def _clean_worker_env(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)


@pytest.fixture
def scenario_factory(tmp_path):
    def _make(**overrides) -> Scenario:
        output_dir = overrides.pop("output_dir", tmp_path / "run")
        return make_scenario(output_dir, **overrides)

    return _make


@pytest.fixture
def kernel_blocks():
    return KernelBlocks


@pytest.fixture(scope="session")
def eight_atoms(tmp_path_factory):
    """Default 8-atom gold array with every block memoised, plus its dense Z."""
    scenario = make_scenario(tmp_path_factory.mktemp("eight"), qr_eps=1e-6, rel_tol=1e-8)
    problem = build_problem(scenario, keep_blocks=True)
    dense = assemble_dense(problem.assembler, scenario.dense_cap)
    return problem, dense


@pytest.fixture
def isolated_logging():
    """setup_logging replaces the root handlers; drop and close whatever it installed."""
    root = logging.getLogger()
    events = logging.getLogger(EVENT_LOGGER)
    level, propagate = root.level, events.propagate
    yield
    for logger in (root, events):
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()
    root.setLevel(level)
    events.propagate = propagate
    logging.captureWarnings(False)
