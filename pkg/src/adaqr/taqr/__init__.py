"""Time-adaptive quantile regression via warm-started simplex pivots."""

from .backend import backend_name, get_kernel
from .solver import (
    DAY_OFFSET_DEFAULT,
    N_INIT_DEFAULT,
    N_WINDOW_DEFAULT,
    BatchResult,
    LevelDiagnostics,
    TaqrRunResult,
    TaqrState,
    batch_solve_full,
    qr_batch_solve,
    run_taqr,
    taqr_step,
    warm_start,
)

__all__ = [
    "DAY_OFFSET_DEFAULT",
    "N_INIT_DEFAULT",
    "N_WINDOW_DEFAULT",
    "BatchResult",
    "LevelDiagnostics",
    "TaqrRunResult",
    "TaqrState",
    "backend_name",
    "batch_solve_full",
    "get_kernel",
    "qr_batch_solve",
    "run_taqr",
    "taqr_step",
    "warm_start",
]
