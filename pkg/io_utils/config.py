import os
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from dotenv import dotenv_values, load_dotenv

from pipeline.NUTSSampler import SamplerConfig
from pipeline.Simulator import CALIBRATED, SimConfig
from pipeline.errors import ConfigError

# Load environment variables from a .env file if present so local runs pick up defaults.
load_dotenv()

ENV_DEFAULTS = {
    "SPARSEMETA_SEED": "20201",
    "SPARSEMETA_OUTPUT_DIR": "./output",
    "SPARSEMETA_WORKERS": "1",
    "SPARSEMETA_LOG_LEVEL": "INFO",
}


def _het_sd(text: str) -> Union[float, str]:
    if text.strip().lower() == CALIBRATED:
        return CALIBRATED
    return float(text)


def parse_float_list(text: str) -> List[float]:
    values = [float(part) for part in text.split(",") if part.strip()]
    if not values:
        raise ValueError(text)
    return values


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


SAMPLER_SCHEMA: Dict[str, Callable[[str], object]] = {
    "chains": int,
    "warmup": int,
    "samples": int,
    "target_accept": float,
    "max_tree_depth": int,
    "seed": int,
    "rhat_threshold": float,
    "workers": int,
    "step_size": float,
}

SIMULATION_SCHEMA: Dict[str, Callable[[str], object]] = {
    "n_meta": int,
    "studies_min": int,
    "studies_max": int,
    "units_min": int,
    "units_max": int,
    "p_min": int,
    "p_max": int,
    "density": float,
    "het_sd": _het_sd,
    "target_i2": float,
    "seed": int,
    "calibrate": _bool,
}

FIT_SCHEMA: Dict[str, Callable[[str], object]] = {
    **SAMPLER_SCHEMA,
    "q": int,
    "q_max": int,
    "level": float,
    "univariate_level": float,
    "projection_seed": int,
    "n_boot": int,
}

# the sweep owns density and het_sd, one value per grid cell
SENSITIVITY_SCHEMA: Dict[str, Callable[[str], object]] = {
    **{k: v for k, v in SIMULATION_SCHEMA.items() if k not in ("density", "het_sd", "target_i2", "calibrate")},
    **FIT_SCHEMA,
    "densities": parse_float_list,
    "het_sds": parse_float_list,
}

_TYPE_NAMES = {int: "integer", float: "number", _het_sd: "number or 'calibrated'", _bool: "boolean",
               parse_float_list: "comma-separated numbers"}


def env_settings() -> Dict[str, object]:
    """
    Defaults taken from the environment.

    Env vars:
      - SPARSEMETA_SEED: master seed
      - SPARSEMETA_OUTPUT_DIR: output root
      - SPARSEMETA_WORKERS: replicate fan-out
      - SPARSEMETA_LOG_LEVEL: logging level name
    """
    raw = {key: os.environ.get(key) or default for key, default in ENV_DEFAULTS.items()}
    try:
        seed = int(raw["SPARSEMETA_SEED"])
        workers = int(raw["SPARSEMETA_WORKERS"])
    except ValueError as e:
        raise ConfigError("environment", f"SPARSEMETA_SEED and SPARSEMETA_WORKERS must be integers ({e})")
    return {
        "seed": seed,
        "output_dir": Path(raw["SPARSEMETA_OUTPUT_DIR"]),
        "workers": workers,
        "log_level": raw["SPARSEMETA_LOG_LEVEL"].upper(),
    }


def parse_values(values: Dict[str, Optional[str]], schema: Dict[str, Callable[[str], object]]) -> Dict[str, object]:
    """Validate raw key/value text against a schema."""
    parsed = {}
    for key, text in values.items():
        field = key.strip().lower()
        if field not in schema:
            raise ConfigError(field, f"unknown key; expected one of {sorted(schema)}")
        kind = schema[field]
        if text is None or not text.strip():
            raise ConfigError(field, f"expected {_TYPE_NAMES.get(kind, kind.__name__)}, got no value")
        try:
            parsed[field] = kind(text.strip())
        except ValueError:
            raise ConfigError(field, f"expected {_TYPE_NAMES.get(kind, kind.__name__)}, got '{text}'")
    return parsed


def load_config(path: Union[str, Path], schema: Dict[str, Callable[[str], object]]) -> Dict[str, object]:
    """
    Read a KEY=value config file and validate every entry.

    Raises:
        FileNotFoundError: if the file does not exist
        ConfigError: for unknown keys and unparsable values
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_values(dotenv_values(path), schema)


def sampler_config(values: Dict[str, object], base: Optional[SamplerConfig] = None) -> SamplerConfig:
    """Overlay parsed values on a SamplerConfig, ignoring keys it does not own."""
    base = base or SamplerConfig()
    updates = {k: v for k, v in values.items() if k in SAMPLER_SCHEMA and v is not None}
    return replace(base, **updates)


def simulation_config(values: Dict[str, object], base: Optional[SimConfig] = None) -> SimConfig:
    base = base or SimConfig()
    updates = {}
    for name in ("n_meta", "density", "het_sd", "target_i2", "seed"):
        if values.get(name) is not None:
            updates[name] = values[name]
    for name, attr in (("studies", "studies_range"), ("units", "units_range"), ("p", "p_range")):
        lo, hi = getattr(base, attr)
        lo = values.get(f"{name}_min") if values.get(f"{name}_min") is not None else lo
        hi = values.get(f"{name}_max") if values.get(f"{name}_max") is not None else hi
        updates[attr] = (int(lo), int(hi))
    return replace(base, **updates)
