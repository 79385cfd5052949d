"""
Unit tests for the config module.
"""

import importlib
import logging
import os
from pathlib import Path
from unittest.mock import patch

import pytest


@pytest.fixture
def fresh_config():
    """Reload the config module and restore the defaults afterwards."""
    from src.fastslow_homogenizer import config

    yield lambda: importlib.reload(config)
    with patch.dict(os.environ, {}, clear=True):
        importlib.reload(config)


class TestConfig:
    """Test configuration loading and environment variable handling."""

    def test_default_values(self, fresh_config):
        """Test that default configuration values are set correctly."""
        with patch.dict(os.environ, {}, clear=True):
            config = fresh_config()

            assert config.FP_TOL == 1e-13
            assert config.FP_MAX_ITERS == 100
            assert config.OMEGA_FLOOR == 1e-6
            assert config.RESONANCE_FACTOR == 1e-3
            assert config.PLATEAU_FACTOR == 1.5
            assert config.GRID_BASE == 2
            assert config.GRID_DECADES == 4.0
            assert config.NOISE_FLOOR == 1e-10
            assert config.LOG_LEVEL == "INFO"
            assert config.API_HOST == "127.0.0.1"
            assert config.API_PORT == 8090
            assert config.OUTPUT_DIR == Path("results")
            assert config.MAX_WORKERS >= 1

    def test_environment_variable_override(self, fresh_config, mock_env_vars):
        """Test that environment variables override default values."""
        config = fresh_config()

        assert config.FP_TOL == 1e-12
        assert config.FP_MAX_ITERS == 50
        assert config.PLATEAU_FACTOR == 2.0
        assert config.MAX_WORKERS == 3
        assert config.LOG_LEVEL == "DEBUG"
        assert config.API_PORT == 9001

    def test_unparsable_number_falls_back_with_warning(self, fresh_config, caplog):
        """Test that a malformed numeric setting keeps the default and logs a warning."""
        caplog.set_level(logging.WARNING)
        with patch.dict(os.environ, {"FASTSLOW_FP_TOL": "tiny", "FASTSLOW_FP_MAX_ITERS": "1.5"}, clear=True):
            config = fresh_config()

            assert config.FP_TOL == 1e-13
            assert config.FP_MAX_ITERS == 100
        assert "FASTSLOW_FP_TOL='tiny' is not a number" in caplog.text
        assert "FASTSLOW_FP_MAX_ITERS='1.5' is not an integer" in caplog.text

    def test_non_positive_workers_run_sequentially(self, fresh_config, caplog):
        """Test that a worker count below one is replaced by one."""
        caplog.set_level(logging.WARNING)
        with patch.dict(os.environ, {"FASTSLOW_MAX_WORKERS": "0"}, clear=True):
            config = fresh_config()

            assert config.MAX_WORKERS == 1
        assert "running sequentially" in caplog.text

    def test_empty_value_uses_default(self, fresh_config):
        """Test that an empty variable counts as unset."""
        with patch.dict(os.environ, {"FASTSLOW_GRID_BASE": "  "}, clear=True):
            config = fresh_config()

            assert config.GRID_BASE == 2

    def test_builtin_prefix(self):
        """Test the prefix that marks compiled-in model references."""
        from src.fastslow_homogenizer.config import BUILTIN_PREFIX

        assert BUILTIN_PREFIX == "builtin:"

    def test_env_example_documents_every_setting(self):
        """Test that .env.example lists every FASTSLOW_ variable read by the config module."""
        root = Path(__file__).resolve().parent.parent
        example = (root / ".env.example").read_text()
        source = (root / "src" / "fastslow_homogenizer" / "config.py").read_text()

        import re

        for name in set(re.findall(r'"(FASTSLOW_[A-Z_]+)"', source)):
            assert name in example
