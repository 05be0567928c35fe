"""
Environment and config-file loading.

Values are layered: model defaults < config file < QWALK_* environment
variables < CLI flags. The environment is loaded from a .env file when one is
present, falling back to the process environment.
"""

import os
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

ENV_PREFIX = "QWALK_"
DEBUG_VAR = f"{ENV_PREFIX}DEBUG"

# QWALK_* variables that map onto config keys
ENV_KEYS = {f"{ENV_PREFIX}{name}": key for name, key in (("SEED", "seed"), ("NOISE", "noise"), ("OUT_DIR", "output_dir"))}


def load_environment() -> None:
    """
    Load environment variables from a .env file if present.
    Call once at the start of the CLI.
    """
    if os.path.exists("../.env"):
        load_dotenv(dotenv_path="../.env")
        print("[CONFIG] ✅ Loaded .env from parent directory")
    elif os.path.exists(".env"):
        load_dotenv()
        print("[CONFIG] ✅ Loaded .env from current directory")
    elif debug_enabled():
        print("DEBUG: [CONFIG] No .env file found - using system environment variables")


def debug_enabled() -> bool:
    return os.getenv(DEBUG_VAR, "0").strip().lower() in ("1", "true", "yes", "on")


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse a flat `key = value` file ('#' starts a comment).

    Keys are case-insensitive and returned lower-case. Keys without a value
    are rejected instead of silently becoming None.
    """
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"Config file not found: {source}")
    try:
        raw = dotenv_values(dotenv_path=source)
    except OSError as e:
        raise ConfigError(f"Could not read config file {source}: {e}") from e

    values: Dict[str, str] = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"{source}: key '{key}' has no value (expected 'key = value')")
        values[key.strip().lower()] = value.strip()
    print(f"[CONFIG] Loaded {len(values)} settings from {source}")
    return values


def environment_overrides(environ: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """QWALK_* variables translated to config keys."""
    env = os.environ if environ is None else environ
    unknown = sorted(var for var in env if var.startswith(ENV_PREFIX) and var not in ENV_KEYS and var != DEBUG_VAR)
    if unknown:
        print(f"[CONFIG] ⚠️  Ignoring unknown {ENV_PREFIX}* variables: {', '.join(unknown)}")
    return {key: env[var].strip() for var, key in ENV_KEYS.items() if env.get(var)}


def source_date_epoch() -> Optional[int]:
    """Pinned timestamp for reproducible manifests (SOURCE_DATE_EPOCH convention)."""
    value = os.getenv("SOURCE_DATE_EPOCH")
    if not value:
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"SOURCE_DATE_EPOCH must be an integer, got {value!r}") from e
