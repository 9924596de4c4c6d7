"""
Configuration management for cktgrid.
Handles CKT_* environment variables and provides sensible defaults.
"""

import os
from pathlib import Path
from typing import Tuple
from dotenv import load_dotenv
import sys

# Add src to python path to allow importing src.utils
src_path = Path(__file__).resolve().parent.parent / "src"
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))
from src.utils.paths import get_base_dir, get_data_dir

# Load environment variables from .env file if it exists
BASE_DIR = get_base_dir()
ENV_FILE = BASE_DIR / ".env"

if ENV_FILE.exists():
    load_dotenv(ENV_FILE)


TOOL_NAME = "cktgrid"
TOOL_VERSION = "0.1.0"
ENV_PREFIX = "CKT_"


def _env(name: str, default: str) -> str:
    return os.getenv(ENV_PREFIX + name, default)


class Config:
    """Resolved defaults for simulation, FoM, workers and output locations."""

    # =========================
    # Run Configuration
    # =========================

    SEED: int = int(_env("SEED", "0"))
    WORKERS: int = int(_env("WORKERS", "1"))
    OUTPUT_DIR: Path = Path(_env("OUTPUT_DIR", str(get_data_dir())))
    LOG_LEVEL: str = _env("LOG_LEVEL", "WARNING").upper()

    # =========================
    # AC Sweep Configuration
    # =========================

    # 1 Hz - 10 GHz at 60 points/decade, crossings refined to 1e-4 relative
    SWEEP_F_START: float = float(_env("SWEEP_F_START", "1.0"))
    SWEEP_F_STOP: float = float(_env("SWEEP_F_STOP", "1e10"))
    SWEEP_PPD: int = int(_env("SWEEP_PPD", "60"))
    BISECT_RTOL: float = float(_env("BISECT_RTOL", "1e-4"))

    # =========================
    # Figure of Merit
    # =========================

    FOM_W_GAIN: float = float(_env("FOM_W_GAIN", "1.0"))
    FOM_W_BW: float = float(_env("FOM_W_BW", "1.0"))
    FOM_W_PM: float = float(_env("FOM_W_PM", "1.0"))
    FOM_PM_TARGET: float = float(_env("FOM_PM_TARGET", "60.0"))

    # Simulations slower than this are logged at WARNING
    SLOW_SIM_MS: float = float(_env("SLOW_SIM_MS", "5"))

    @classmethod
    def validate(cls) -> Tuple[bool, str]:
        """
        Validate configuration settings.

        Returns:
            Tuple of (is_valid, error_message)
        """
        if cls.SWEEP_F_START <= 0 or cls.SWEEP_F_STOP <= 0:
            return False, "Sweep bounds must be positive"
        if cls.SWEEP_F_STOP <= cls.SWEEP_F_START:
            return False, (
                f"Invalid sweep range: {cls.SWEEP_F_START} >= {cls.SWEEP_F_STOP}"
            )
        if cls.SWEEP_PPD < 1:
            return False, "CKT_SWEEP_PPD must be at least 1"
        weights = (cls.FOM_W_GAIN, cls.FOM_W_BW, cls.FOM_W_PM)
        if any(w < 0 for w in weights):
            return False, "FoM weights must be nonnegative"
        if not any(w > 0 for w in weights):
            return False, "At least one FoM weight must be positive"
        if cls.FOM_PM_TARGET <= 0:
            return False, "CKT_FOM_PM_TARGET must be positive"
        if cls.WORKERS < 1:
            return False, f"Invalid CKT_WORKERS: {cls.WORKERS}. Must be >= 1"
        return True, ""

    @classmethod
    def describe(cls) -> str:
        """Get a human-readable description of the resolved simulation setup."""
        return (
            f"sweep {cls.SWEEP_F_START:g}-{cls.SWEEP_F_STOP:g} Hz @ {cls.SWEEP_PPD}/dec, "
            f"FoM w=({cls.FOM_W_GAIN:g},{cls.FOM_W_BW:g},{cls.FOM_W_PM:g}) "
            f"pm_target={cls.FOM_PM_TARGET:g}, workers={cls.WORKERS}"
        )


# Global config instance
config = Config()
