#!/usr/bin/env python3
"""
Centralized configuration for WarpSR
"""

import os
from pathlib import Path
from typing import Any, Dict

import yaml
from dotenv import load_dotenv

from exceptions import ConfigError

# Load environment variables
load_dotenv()

# Base directories
PROJECT_ROOT = Path(__file__).parent.parent
LOGS_DIR = PROJECT_ROOT / "logs"

# Environment overrides
LOG_LEVEL = os.getenv('WARPSR_LOG_LEVEL', 'INFO').upper()
PRECISION = os.getenv('WARPSR_PRECISION', 'float32')
CHECK_FINITE = os.getenv('WARPSR_CHECK_FINITE', '0').lower() in ('1', 'true', 'yes')
THREADS = int(os.getenv('WARPSR_THREADS', '1'))

# Logging settings
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = LOGS_DIR / "run.log"

# Degradation protocol
HR_SIZE = 128
LR_SIZE = 16
BLUR_SIGMA = 2.4
MAX_MOTION = 0.3  # normalized units, safety limit for synthetic motion
DEFAULT_PROFILE = 'tiny'

# TPS
CONTROL_POINTS_PER_SIDE = 8
TPS_REGULARIZATION = 1e-8

# ADAM
ADAM_LR = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BATCH_SIZE = 10

# Perceptual loss weights
LAMBDA_LFW = 1e3
LAMBDA_YTF = 1e5
DEFAULT_LOSS_MODE = 'pixel+pool3+pool4'
FEATURE_NET_SEED = 1234

# Evaluation
PSNR_CAP_DB = 99.0
TRACK_FRAME_CAP = 100
NOT_AVAILABLE = 'n/a'

# Gradient checking
GRADCHECK_EPS = 1e-4
GRADCHECK_TOLERANCE = 1e-3

# CSV export settings
HISTORY_FIELDS = ['epoch', 'mean_loss', 'wall_time_s']
REPORT_FIELDS = ['variant', 'eer_pct', 'psnr_db', 'l2_pool3', 'l2_pool4', 'l2_fc7']
MANIFEST_FIELDS = ['sample_id', 'identity', 'track_id', 'lr_frames', 'hr_path', 'warp_path']

# Run config keys and their types
RUN_CONFIG_KEYS = {
    'profile': str,
    'variant': str,
    'frames': int,
    'feature_channels': int,
    'loss_mode': str,
    'lambda_pool3': float,
    'lambda_pool4': float,
    'lambda_fc7': float,
    'lr': float,
    'epochs': int,
    'batch_size': int,
    'seed': int,
    'threads': int,
    'checkpoint_every': int,
    'freeze_warp': bool,
    'pretrained_warp': str,
    'feature_net_weights': str,
    'feature_net_seed': int,
}


def load_run_config(path: Path) -> Dict[str, Any]:
    """
    Load a flat YAML run config

    Args:
        path: Path to the config file

    Returns:
        Mapping of validated keys to typed values

    Raises:
        ConfigError: On unknown keys, nested values or bad types
    """
    config_file = Path(path)
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_file}")

    with open(config_file, 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f) or {}

    if not isinstance(raw, dict):
        raise ConfigError(f"Config {config_file} must be a flat key: value mapping")

    parsed = {}
    for key, value in raw.items():
        if key not in RUN_CONFIG_KEYS:
            raise ConfigError(f"Unknown config key '{key}' in {config_file}")
        if isinstance(value, (dict, list)):
            raise ConfigError(f"Config key '{key}' must be a scalar, got {type(value).__name__}")
        if value is None:
            continue
        expected = RUN_CONFIG_KEYS[key]
        try:
            parsed[key] = value if isinstance(value, expected) else expected(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Config key '{key}': cannot convert {value!r} to {expected.__name__}") from e
    return parsed
