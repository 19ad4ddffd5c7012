import os
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


@dataclass(frozen=True)
class Settings:
    """Tunable defaults, read once from the environment (or a .env file)."""

    log_level: str
    neighborhood_size: int
    lns_small_agents: int
    lns_large_agents: int
    lns_edge_iterations: int
    lns_middle_iterations: int
    adaptive_decay: float
    adaptive_min_weight: float
    replan_runs: int
    replan_iterations: int
    malfunction_min: int
    malfunction_max: int
    horizon_buffer: int
    budget_ms: int
    portfolio_share: float


def _int(name, default):
    return int(os.environ.get(name, str(default)))


def _float(name, default):
    return float(os.environ.get(name, str(default)))


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Build the settings object from RAILPLAN_* environment variables.

    Returns:
        Settings: Frozen settings
    """
    malfunction_max = _int("RAILPLAN_MALFUNCTION_MAX", 50)
    return Settings(
        log_level=os.environ.get("RAILPLAN_LOG_LEVEL", "INFO").upper(),
        neighborhood_size=_int("RAILPLAN_NEIGHBORHOOD_SIZE", 8),
        lns_small_agents=_int("RAILPLAN_LNS_SMALL_AGENTS", 15),
        lns_large_agents=_int("RAILPLAN_LNS_LARGE_AGENTS", 200),
        lns_edge_iterations=_int("RAILPLAN_LNS_EDGE_ITERATIONS", 50),
        lns_middle_iterations=_int("RAILPLAN_LNS_MIDDLE_ITERATIONS", 500),
        adaptive_decay=_float("RAILPLAN_ADAPTIVE_DECAY", 0.9),
        adaptive_min_weight=_float("RAILPLAN_ADAPTIVE_MIN_WEIGHT", 0.01),
        replan_runs=_int("RAILPLAN_REPLAN_RUNS", 20),
        replan_iterations=_int("RAILPLAN_REPLAN_ITERATIONS", 20),
        malfunction_min=_int("RAILPLAN_MALFUNCTION_MIN", 10),
        malfunction_max=malfunction_max,
        horizon_buffer=_int("RAILPLAN_HORIZON_BUFFER", malfunction_max),
        budget_ms=_int("RAILPLAN_BUDGET_MS", 60000),
        portfolio_share=_float("RAILPLAN_PORTFOLIO_SHARE", 0.5),
    )
