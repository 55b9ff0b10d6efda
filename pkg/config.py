"""
config.py — shared settings for the block-IR simulator

Every tunable lives here as a module-level constant. Values that differ between
machines (qubit cap, worker threads, default seed, log level) are read from the
environment once at import time; the CLI may overwrite them afterwards with its
own flags, so library code reads them through the module (`config.QUBIT_CAP`)
at call time rather than binding them at import.

Environment
-----------
QBIR_QUBIT_CAP   register size cap (default 30)
QBIR_THREADS     column-parallel workers for matvec_cols (default 1)
QBIR_SEED        default PRNG seed (default 42)
QBIR_LOG_LEVEL   logging level name for the CLI (default WARNING)
"""

import os
import logging

import numpy as np

# ── Environment-driven settings ───────────────────────────────────────────────
QUBIT_CAP    = int(os.environ.get("QBIR_QUBIT_CAP", "30"))
THREADS      = int(os.environ.get("QBIR_THREADS", "1"))
DEFAULT_SEED = int(os.environ.get("QBIR_SEED", "42"))
LOG_LEVEL    = os.environ.get("QBIR_LOG_LEVEL", "WARNING").upper()

# ── Numeric constants ─────────────────────────────────────────────────────────
TOLERANCE        = 1e-10   # operator properties and commutation
NORM_TOLERANCE   = 1e-10
PROPS_MAX_QUBITS = 12      # largest operator densified for property checks
KRYLOV_DIM       = 30
KRYLOV_TOL       = 1e-12
MAX_BITS         = 63
DEFAULT_SHOTS    = 1024
SCRIPT_VERSION   = "0.6.0"

# Column count below which matvec_cols never splits work across threads.
PARALLEL_MIN_COLUMNS = 64

# A kernel call walks the state in 2^CHUNK_QUBITS pieces, split over the
# qubits it does not touch, so its scratch space stays a fraction of a buffer.
CHUNK_QUBITS = 3

# Largest register for which `vqe` also reports the exact ground energy.
VQE_EXACT_MAX_QUBITS = 12


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Seeded PCG64 generator; `None` falls back to DEFAULT_SEED."""
    return np.random.default_rng(DEFAULT_SEED if seed is None else seed)


def split_rng(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Independent child generators, one per parallel task."""
    return rng.spawn(count)


def log_level() -> int:
    level = logging.getLevelName(LOG_LEVEL)
    if not isinstance(level, int):
        logging.warning(f"config: unknown QBIR_LOG_LEVEL '{LOG_LEVEL}', using WARNING")
        return logging.WARNING
    return level
