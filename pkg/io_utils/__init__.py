"""Helper utilities for configuration, file storage and job tracking."""

# Re-export for convenience
from .config import env_settings, load_config  # noqa: F401
from .storage import (
    read_dataset_csv,
    write_dataset_csv,
    write_json,
    read_json,
    RunManifest,
)  # noqa: F401
