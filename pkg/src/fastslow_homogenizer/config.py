"""
Configuration settings for the fast-slow homogenizer.

This module handles loading environment variables from .env files
and provides the numerical defaults used by the integrator, the
experiment harness, the CLI and the HTTP service.
"""

import os
import logging
from pathlib import Path
from dotenv import load_dotenv

# Setup logging
logger = logging.getLogger(__name__)

# Determine the location of the .env file
# First check if .env exists in the current directory
env_path = Path('.env')
if not env_path.exists():
    # If not, check if it exists in the parent directory
    parent_env_path = Path('../.env')
    if parent_env_path.exists():
        env_path = parent_env_path
    else:
        # Finally look for a project-local settings directory
        local_env_path = Path('fastslow/.env')
        if local_env_path.exists():
            env_path = local_env_path

# Load environment variables from .env file
load_dotenv(dotenv_path=env_path)
logger.info(f"Loaded environment variables from {env_path.absolute() if env_path.exists() else 'environment'}")


def _float_setting(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"{name}={raw!r} is not a number, using default {default}")
        return default


def _int_setting(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"{name}={raw!r} is not an integer, using default {default}")
        return default


# Integrator configuration
FP_TOL = _float_setting("FASTSLOW_FP_TOL", 1e-13)
FP_MAX_ITERS = _int_setting("FASTSLOW_FP_MAX_ITERS", 100)

# Model configuration
OMEGA_FLOOR = _float_setting("FASTSLOW_OMEGA_FLOOR", 1e-6)
RESONANCE_FACTOR = _float_setting("FASTSLOW_RESONANCE_FACTOR", 1e-3)

# Experiment harness configuration
PLATEAU_FACTOR = _float_setting("FASTSLOW_PLATEAU_FACTOR", 1.5)
GRID_BASE = _int_setting("FASTSLOW_GRID_BASE", 2)
GRID_DECADES = _float_setting("FASTSLOW_GRID_DECADES", 4.0)
NOISE_FLOOR = _float_setting("FASTSLOW_NOISE_FLOOR", 1e-10)
MAX_WORKERS = _int_setting("FASTSLOW_MAX_WORKERS", os.cpu_count() or 1)
if MAX_WORKERS < 1:
    logger.warning(f"FASTSLOW_MAX_WORKERS={MAX_WORKERS} is not positive, running sequentially")
    MAX_WORKERS = 1

# Output configuration
LOG_LEVEL = os.getenv("FASTSLOW_LOG_LEVEL", "INFO").upper()
OUTPUT_DIR = Path(os.getenv("FASTSLOW_OUTPUT_DIR", "results"))

# Service configuration
API_HOST = os.getenv("FASTSLOW_API_HOST", "127.0.0.1")
API_PORT = _int_setting("FASTSLOW_API_PORT", 8090)

# Model references starting with this prefix name a compiled-in model
BUILTIN_PREFIX = "builtin:"
