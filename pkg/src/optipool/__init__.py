"""Three-tier (DRAM / NVM / SSD) buffer pool with checksum-based instant restart."""

from .checksum import BACKEND, compute_checksum
from .core import ChecksumPolicy, PageHeader, apply_delta, format_page, seal_page, verify_page
from .engine import CrashState, Engine, EngineConfig
from .errors import OptipoolError
from .harness import OracleState, TrialConfig, TrialReport, run_oracle_enumeration, run_suite, run_trial
from .recovery import PageState, classify_page, restart

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ChecksumPolicy", "CrashState", "Engine", "EngineConfig", "OptipoolError",
    "OracleState", "PageHeader", "PageState", "TrialConfig", "TrialReport", "apply_delta",
    "classify_page", "compute_checksum", "format_page", "restart", "run_oracle_enumeration",
    "run_suite", "run_trial", "seal_page", "verify_page",
]
