"""
Shared test fixtures and configuration for the Fast-Slow Homogenizer tests.
"""

import json

import numpy as np
import pytest

from src.fastslow_homogenizer.model import builtin_model
from src.fastslow_homogenizer.systems import initial_slow_state, run_homogenized, run_second_order

# Energy of the test model at its initial data: 1/2 |p*|^2 + V(y*) + 1/2 |u*|^2
TEST_MODEL_ENERGY = 8.25125


@pytest.fixture(scope="session")
def test_model():
    """Two slow and two fast degrees of freedom with position-dependent frequencies."""
    return builtin_model("test")


@pytest.fixture(scope="session")
def constant_model():
    """Frequencies independent of y: every correction vanishes."""
    return builtin_model("constant")


@pytest.fixture(scope="session")
def single_model():
    """One fast channel."""
    return builtin_model("single")


@pytest.fixture(scope="session")
def ratio_model():
    """omega_2 = 2 omega_1 everywhere."""
    return builtin_model("ratio")


@pytest.fixture(scope="session")
def slow_start(test_model):
    """Initial slow state of the test model and its thetabar2 constants."""
    return initial_slow_state(test_model)


@pytest.fixture(scope="session")
def homog_trajectory(test_model):
    """Homogenized run over [0, 1] with dt = 1/1024, sampled every 16 steps."""
    return run_homogenized(test_model, 1.0 / 1024, 1.0, output_stride=16)


@pytest.fixture(scope="session")
def second_trajectory(test_model):
    """Second-order run over [0, 0.25] at eps = 0.125 with dt = 1/1024."""
    return run_second_order(test_model, 0.125, 1.0 / 1024, 0.25, output_stride=16)


@pytest.fixture
def model_config():
    """A valid JSON model config equivalent to the test model."""
    return {
        "name": "inline",
        "n": 2,
        "r": 2,
        "V": "0.5*y1^4 + 0.5*y2^4",
        "omega": ["4 + (y1*y2)^2", "2 + sin(y1)"],
        "y_star": [1.0, -0.5],
        "p_star": [1.0, 1.2],
        "u_star": [3.0, 2.0],
        "T": 1.0,
    }


@pytest.fixture
def collapsing_model_config():
    """A model whose only frequency, 1.5 - y1, reaches zero partway through [0, 2]."""
    return {
        "name": "collapsing",
        "n": 1,
        "r": 1,
        "V": "0",
        "omega": ["1.5 - y1"],
        "y_star": [0.0],
        "p_star": [1.0],
        "u_star": [1.0],
        "T": 2.0,
    }


@pytest.fixture
def model_config_file(tmp_path, model_config):
    """The inline config written to a temporary JSON file."""
    path = tmp_path / "model.json"
    path.write_text(json.dumps(model_config))
    return path


@pytest.fixture
def mock_env_vars(monkeypatch):
    """Mock environment variables for testing."""
    monkeypatch.setenv("FASTSLOW_FP_TOL", "1e-12")
    monkeypatch.setenv("FASTSLOW_FP_MAX_ITERS", "50")
    monkeypatch.setenv("FASTSLOW_PLATEAU_FACTOR", "2.0")
    monkeypatch.setenv("FASTSLOW_MAX_WORKERS", "3")
    monkeypatch.setenv("FASTSLOW_LOG_LEVEL", "debug")
    monkeypatch.setenv("FASTSLOW_API_PORT", "9001")


@pytest.fixture
def rng_free_state():
    """A fixed non-trivial full state for transform tests."""
    return {
        "y": np.array([0.9, -0.4]),
        "ydot": np.array([0.7, 1.1]),
        "z": np.array([0.02, -0.015]),
        "zdot": np.array([-1.3, 2.2]),
    }
