import numpy as np
import pytest

from layergrasp.config import config_from_document
from layergrasp.core import Observation
from layergrasp.simenv import execute_slip, make_scenario, reset
from layergrasp.harness import AnnotatedSlipPlanner

SMALL_RUN = {
    'episodes': 8,
    'eval_episodes': 6,
    'num_envs': 1,
    'deterministic': True,
    'seeds': [0],
    'log_every': 4,
    'sac': {'batch_size': 4, 'buffer_size': 64, 'learning_starts': 4, 'hidden': 16, 'gradient_steps': 1},
    'slip': {'planner': 'annotated', 'samples': 12, 'epochs': 1, 'max_steps': 3, 'batch_size': 2},
}


def small_document(tmp_path, **overrides):
    document = dict(SMALL_RUN, output_root=str(tmp_path / 'runs'))
    document.update(overrides)
    return document


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def default_config():
    return config_from_document({})


@pytest.fixture
def small_config(tmp_path):
    return config_from_document(small_document(tmp_path))


@pytest.fixture
def printer_state(default_config):
    return reset(make_scenario(default_config.sim, 'printer_book'), 3, default_config.sim)


@pytest.fixture
def observation(default_config, printer_state):
    """A reading after an annotated slip on the printer stack"""
    planner = AnnotatedSlipPlanner(default_config.sim)
    return execute_slip(printer_state, planner.plan(printer_state), default_config.sim)


def random_observation(rng: np.random.Generator) -> Observation:
    return Observation(
        vis=0.5 + 0.001 * rng.standard_normal((40, 40)),
        ind=0.1 * rng.standard_normal((25, 25, 3)),
        thu=0.1 * rng.standard_normal((25, 25, 3)),
        pro=rng.standard_normal(6),
    )
