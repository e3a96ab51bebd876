import copy
import hashlib
import json
import logging
import os
import subprocess
from dataclasses import dataclass
from typing import Any, Dict, Optional

import torch

from config import defaults
from .errors import ConfigError
from .maml import MamlConfig
from .timeutil import format_datetime, parse_datetime, utc_now
from .trainer import TrainConfig

# Configure logging
logger = logging.getLogger(__name__)

SECTIONS = ('data', 'train', 'maml', 'eval')


def load_config_file(path: str) -> Dict[str, Any]:
    """Load one JSON configuration file with proper error handling"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"Configuration file not found: {str(e)}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in configuration file {path}: {str(e)}")
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration file {path} must hold a JSON object")
    return data


def merge_config(base: Dict[str, Any], overrides: Dict[str, Any], source: str) -> Dict[str, Any]:
    """Copy of base with overrides applied; keys absent from base are rejected, None values skipped"""
    merged = copy.deepcopy(base)
    for section, values in overrides.items():
        if section not in merged:
            raise ConfigError(f"Unknown config section '{section}' in {source}")
        if not isinstance(values, dict):
            raise ConfigError(f"Config section '{section}' in {source} must be an object")
        for key, value in values.items():
            if key not in merged[section]:
                raise ConfigError(f"Unknown config key '{section}.{key}' in {source}")
            if value is not None:
                merged[section][key] = copy.deepcopy(value)
    return merged


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def config_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form"""
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def build_id() -> str:
    """`git describe --always --dirty` of the source tree, or "unknown" outside a work tree"""
    try:
        result = subprocess.run(['git', 'describe', '--always', '--dirty'], cwd=defaults.BASE_DIR,
                                capture_output=True, text=True, timeout=10, check=True)
        return result.stdout.strip() or 'unknown'
    except (OSError, subprocess.SubprocessError):
        return 'unknown'


@dataclass
class RunConfig:
    """Resolved run configuration: sections data, train, maml and eval"""
    data: Dict[str, Any]
    train: Dict[str, Any]
    maml: Dict[str, Any]
    eval: Dict[str, Any]

    @classmethod
    def load(cls, config_path: Optional[str] = None, full_scale: bool = False,
             overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Resolve the configuration

        Precedence, lowest first: config/default_run.json, the user's --config file,
        config/full_scale.json when full_scale is set, then command-line overrides.
        """
        resolved = load_config_file(defaults.DEFAULT_RUN_FILE)
        missing = [section for section in SECTIONS if section not in resolved]
        if missing or set(resolved) != set(SECTIONS):
            raise ConfigError(f"Default configuration must have exactly the sections {list(SECTIONS)}")
        if config_path:
            resolved = merge_config(resolved, load_config_file(config_path), config_path)
        if full_scale:
            resolved = merge_config(resolved, load_config_file(defaults.FULL_SCALE_FILE), 'full scale')
        if overrides:
            resolved = merge_config(resolved, overrides, 'command line')
        return cls(**{section: resolved[section] for section in SECTIONS})

    def to_dict(self) -> Dict[str, Any]:
        return {section: copy.deepcopy(getattr(self, section)) for section in SECTIONS}

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def maml_config(self) -> MamlConfig:
        return MamlConfig.from_dict(self.maml)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def make_manifest(run_config: RunConfig, command: str) -> Dict[str, Any]:
    return {
        'command': command,
        'config': run_config.to_dict(),
        'config_hash': run_config.hash,
        'created_at': format_datetime(utc_now()),
        'build_id': build_id(),
    }


def read_manifest(path: str) -> Dict[str, Any]:
    """Load a run manifest and check its hash against its config"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error reading manifest {path}: {str(e)}")
        raise
    if config_hash(manifest.get('config')) != manifest.get('config_hash'):
        raise ConfigError(f"Manifest {path} does not match its config hash")
    if parse_datetime(manifest.get('created_at')) is None:
        raise ConfigError(f"Manifest {path} has no valid created_at timestamp")
    return manifest


def resolve_threads(flag: Optional[int]) -> int:
    """--threads, else the UNLIMITD_THREADS environment variable, else the machine's parallelism"""
    if flag is not None:
        value, source = flag, '--threads'
    elif os.environ.get(defaults.THREADS_ENV_VAR):
        value, source = os.environ[defaults.THREADS_ENV_VAR], defaults.THREADS_ENV_VAR
    else:
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source} must be an integer, got '{value}'")
    if threads < 1:
        raise ConfigError(f"{source} must be positive, got {threads}")
    return threads


def apply_threads(threads: int) -> None:
    torch.set_num_threads(threads)
    logger.debug(f"Using {threads} threads")
