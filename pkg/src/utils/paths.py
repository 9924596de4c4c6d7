from pathlib import Path


def get_base_dir() -> Path:
    """
    Project root: where ``.env``, ``docs/`` and the default ``data/`` live.

    Resolved upward from src/utils/paths.py so it does not depend on the
    current working directory.
    """
    return Path(__file__).resolve().parent.parent.parent


def get_data_dir() -> Path:
    """Default directory for datasets, checkpoints, reports and plots."""
    return get_base_dir() / "data"
