"""Dense reference helpers shared by the test modules."""

import numpy as np
import pytest

import config

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "H": np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2),
}


def dense_kron(n: int, ops: dict) -> np.ndarray:
    """⊗ of single-qubit matrices; qubit 1 is the least significant factor."""
    out = np.eye(1, dtype=complex)
    for q in range(n, 0, -1):
        out = np.kron(out, ops.get(q, PAULI["I"]))
    return out


def dense_controlled(n: int, target: int, m: np.ndarray, ctrl_locs=(), ctrl_config=()) -> np.ndarray:
    """Single-qubit `m` on `target`, active where every control bit matches."""
    dim = 1 << n
    out = np.zeros((dim, dim), dtype=complex)
    for col in range(dim):
        if all(((col >> (c - 1)) & 1) == v for c, v in zip(ctrl_locs, ctrl_config)):
            bit = (col >> (target - 1)) & 1
            for new in (0, 1):
                row = (col & ~(1 << (target - 1))) | (new << (target - 1))
                out[row, col] += m[new, bit]
        else:
            out[col, col] = 1
    return out


def dense_embed(n: int, u: np.ndarray, locs, ctrl_locs=(), ctrl_config=()) -> np.ndarray:
    """
    2^n matrix of a 2^k gate `u` on `locs` (locs[0] is the gate's least
    significant qubit), identity wherever a control bit does not match.
    """
    dim, k = 1 << n, len(locs)
    idx = np.arange(dim)

    def scatter(r):
        return sum(((r >> j) & 1) << (q - 1) for j, q in enumerate(locs))

    local = sum(((idx >> (q - 1)) & 1) << j for j, q in enumerate(locs))
    base = idx & ~sum(1 << (q - 1) for q in locs)
    hit = np.ones(dim, dtype=bool)
    for c, v in zip(ctrl_locs, ctrl_config):
        hit &= ((idx >> (c - 1)) & 1) == v

    out = np.zeros((dim, dim), dtype=complex)
    out[idx[~hit], idx[~hit]] = 1
    for r in range(1 << k):
        out[base[hit] | scatter(r), idx[hit]] += u[r, local[hit]]
    return out


def dense_expm_herm(h: np.ndarray, t: float) -> np.ndarray:
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * t * w)) @ v.conj().T


def random_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def restore_config(monkeypatch):
    """Tests (and the CLI) may rewrite config; put every setting back afterwards."""
    for name in ("QUBIT_CAP", "THREADS", "LOG_LEVEL", "DEFAULT_SEED"):
        monkeypatch.setattr(config, name, getattr(config, name))
