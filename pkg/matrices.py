"""
matrices.py — specialised operator formats and their promotion rules

Formats
-------
  I  IdentityMat      dim only
  D  DiagonalMat      diagonal vector
  P  PermMat          row i holds vals[i] at column perm[i] (0-based)
  S  SparseMat        scipy.sparse CSC
  M  DenseMat         numpy 2-D array
  O  OuterProductMat  left (d×r) · right (r×d), never materialised

WHY a fixed promotion table:
  Gate matrices stay in the cheapest format that can hold them. The result
  format of mul / kron / add / hadamard is looked up per ordered pair of the
  five tabulated classes, so composing two permutation gates yields a
  permutation and a controlled phase stays diagonal. The table is kept as
  published, including its asymmetric corners (I*I is I but I+I is D).

WHY OuterProduct:
  The reverse-mode engine hands gate adjoints around as |ψ̄⟩⟨ψ| products.
  Multiplying one by anything keeps it factored; every other binary op
  densifies it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

import config
from bitstring import ctrl_mask_array, gather_bits, scatter_bits
from errors import SerializationError, ShapeError, ValidationError

_CPLX = np.complex128


# ── Format classes ────────────────────────────────────────────────────────────
class MatrixRepr:
    tag = "?"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def __matmul__(self, other: MatrixRepr) -> MatrixRepr:
        return mul(self, other)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


@dataclass(frozen=True, eq=False, repr=False)
class IdentityMat(MatrixRepr):
    size: int
    tag = "I"

    @property
    def dim(self) -> int:
        return self.size


@dataclass(frozen=True, eq=False, repr=False)
class DiagonalMat(MatrixRepr):
    diag: np.ndarray
    tag = "D"

    def __post_init__(self):
        object.__setattr__(self, "diag", np.asarray(self.diag, dtype=_CPLX).ravel())

    @property
    def dim(self) -> int:
        return self.diag.shape[0]


@dataclass(frozen=True, eq=False, repr=False)
class PermMat(MatrixRepr):
    perm: np.ndarray
    vals: np.ndarray
    tag = "P"

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64).ravel()
        vals = np.asarray(self.vals, dtype=_CPLX).ravel()
        if perm.shape != vals.shape:
            raise ShapeError(f"perm has {perm.size} entries but vals has {vals.size}")
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValidationError(f"{perm.tolist()} is not a permutation of 0..{perm.size - 1}")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_one_based(cls, perm, vals=None) -> PermMat:
        perm = np.asarray(perm, dtype=np.int64) - 1
        return cls(perm, np.ones(perm.size) if vals is None else vals)

    @property
    def dim(self) -> int:
        return self.perm.shape[0]


@dataclass(frozen=True, eq=False, repr=False)
class SparseMat(MatrixRepr):
    csc: sp.csc_matrix
    tag = "S"

    def __post_init__(self):
        m = sp.csc_matrix(self.csc, dtype=_CPLX)
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"sparse operator must be square, got {m.shape}")
        m.sort_indices()
        object.__setattr__(self, "csc", m)

    @property
    def dim(self) -> int:
        return self.csc.shape[0]


@dataclass(frozen=True, eq=False, repr=False)
class DenseMat(MatrixRepr):
    data: np.ndarray
    tag = "M"

    def __post_init__(self):
        data = np.array(self.data, dtype=_CPLX)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ShapeError(f"dense operator must be square, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False, repr=False)
class OuterProductMat(MatrixRepr):
    """left · right with left d×r and right r×d."""

    left: np.ndarray
    right: np.ndarray
    tag = "O"

    def __post_init__(self):
        left  = np.asarray(self.left, dtype=_CPLX)
        right = np.asarray(self.right, dtype=_CPLX)
        if left.ndim == 1:
            left = left[:, None]
        if right.ndim == 1:
            right = right[None, :]
        if left.shape[1] != right.shape[0] or left.shape[0] != right.shape[1]:
            raise ShapeError(f"outer product factors {left.shape} and {right.shape} do not match")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def dim(self) -> int:
        return self.left.shape[0]

    @property
    def rank(self) -> int:
        return self.left.shape[1]


@dataclass(frozen=True)
class OpProps:
    hermitian: bool | None = None
    unitary:   bool | None = None
    reflexive: bool | None = None


# ── Conversions ───────────────────────────────────────────────────────────────
def format_tag(a: MatrixRepr) -> str:
    return a.tag


def to_dense(a: MatrixRepr) -> np.ndarray:
    if isinstance(a, IdentityMat):
        return np.eye(a.dim, dtype=_CPLX)
    if isinstance(a, DiagonalMat):
        return np.diag(a.diag)
    if isinstance(a, PermMat):
        out = np.zeros((a.dim, a.dim), dtype=_CPLX)
        out[np.arange(a.dim), a.perm] = a.vals
        return out
    if isinstance(a, SparseMat):
        return a.csc.toarray()
    if isinstance(a, DenseMat):
        return a.data.copy()
    if isinstance(a, OuterProductMat):
        return a.left @ a.right
    raise ValidationError(f"unknown matrix format {type(a).__name__}")


def to_sparse(a: MatrixRepr) -> sp.csc_matrix:
    if isinstance(a, IdentityMat):
        return sp.identity(a.dim, dtype=_CPLX, format="csc")
    if isinstance(a, DiagonalMat):
        return sp.diags(a.diag, format="csc", dtype=_CPLX)
    if isinstance(a, PermMat):
        rows = np.arange(a.dim)
        return sp.csc_matrix((a.vals, (rows, a.perm)), shape=(a.dim, a.dim), dtype=_CPLX)
    if isinstance(a, SparseMat):
        return a.csc
    return sp.csc_matrix(to_dense(a))


def diagonal(a: MatrixRepr) -> np.ndarray:
    if isinstance(a, IdentityMat):
        return np.ones(a.dim, dtype=_CPLX)
    if isinstance(a, DiagonalMat):
        return a.diag.copy()
    if isinstance(a, PermMat):
        return np.where(a.perm == np.arange(a.dim), a.vals, 0)
    if isinstance(a, SparseMat):
        return a.csc.diagonal()
    if isinstance(a, DenseMat):
        return np.diag(a.data).copy()
    return np.einsum("ir,ri->i", a.left, a.right)


def nnz(a: MatrixRepr) -> int:
    if isinstance(a, (IdentityMat, DiagonalMat, PermMat)):
        return a.dim
    if isinstance(a, SparseMat):
        return int(a.csc.nnz)
    return int(np.count_nonzero(to_dense(a)))


def _as_diag(a: MatrixRepr) -> np.ndarray:
    return np.ones(a.dim, dtype=_CPLX) if isinstance(a, IdentityMat) else a.diag


def _as_perm(a: MatrixRepr) -> PermMat:
    if isinstance(a, PermMat):
        return a
    return PermMat(np.arange(a.dim), _as_diag(a))


def _check_dims(a: MatrixRepr, b: MatrixRepr, op: str) -> None:
    if a.dim != b.dim:
        raise ShapeError(f"{op}: dimension mismatch {a.dim} vs {b.dim}")


def _dense_result(x) -> DenseMat:
    return DenseMat(np.asarray(x))


# ── Binary operations ─────────────────────────────────────────────────────────
def mul(a: MatrixRepr, b: MatrixRepr) -> MatrixRepr:
    """Matrix product a·b with the result format fixed by the promotion table."""
    _check_dims(a, b, "mul")
    if isinstance(a, OuterProductMat):
        return OuterProductMat(a.left, _apply_right(a.right, b))
    if isinstance(b, OuterProductMat):
        left = b.left.copy()
        matvec_cols(a, left)
        return OuterProductMat(left, b.right)

    if isinstance(a, IdentityMat):
        return b
    if isinstance(b, IdentityMat):
        return a

    if isinstance(a, DiagonalMat) and isinstance(b, DiagonalMat):
        return DiagonalMat(a.diag * b.diag)
    if isinstance(a, (DiagonalMat, PermMat)) and isinstance(b, (DiagonalMat, PermMat)):
        pa, pb = _as_perm(a), _as_perm(b)
        return PermMat(pb.perm[pa.perm], pa.vals * pb.vals[pa.perm])

    if isinstance(a, DenseMat) and isinstance(b, DenseMat):
        return DenseMat(a.data @ b.data)
    if isinstance(a, DenseMat):
        return _dense_result((to_sparse(b).T @ a.data.T).T)
    if isinstance(b, DenseMat):
        return _dense_result(to_sparse(a) @ b.data)
    return SparseMat(to_sparse(a) @ to_sparse(b))


def _apply_right(right: np.ndarray, b: MatrixRepr) -> np.ndarray:
    """right · b for a row block `right` (r×d)."""
    cols = right.conj().T.copy()
    matvec_cols(adjoint_mat(b), cols)
    return cols.conj().T


def kron(a: MatrixRepr, b: MatrixRepr) -> MatrixRepr:
    """Kronecker product; `a` indexes the slower-varying axis."""
    if isinstance(a, OuterProductMat) or isinstance(b, OuterProductMat):
        return DenseMat(np.kron(to_dense(a), to_dense(b)))
    if isinstance(a, IdentityMat) and isinstance(b, IdentityMat):
        return IdentityMat(a.dim * b.dim)
    small = (IdentityMat, DiagonalMat, PermMat)
    if isinstance(a, small) and isinstance(b, small):
        if isinstance(a, PermMat) or isinstance(b, PermMat):
            pa, pb = _as_perm(a), _as_perm(b)
            perm = (pa.perm[:, None] * b.dim + pb.perm[None, :]).ravel()
            vals = (pa.vals[:, None] * pb.vals[None, :]).ravel()
            return PermMat(perm, vals)
        return DiagonalMat(np.kron(_as_diag(a), _as_diag(b)))
    return SparseMat(sp.kron(to_sparse(a), to_sparse(b), format="csc"))


def add(a: MatrixRepr, b: MatrixRepr) -> MatrixRepr:
    _check_dims(a, b, "add")
    if isinstance(a, OuterProductMat) or isinstance(b, OuterProductMat):
        return DenseMat(to_dense(a) + to_dense(b))
    diagonal_like = (IdentityMat, DiagonalMat)
    if isinstance(a, diagonal_like) and isinstance(b, diagonal_like):
        return DiagonalMat(_as_diag(a) + _as_diag(b))
    if isinstance(a, DenseMat) or isinstance(b, DenseMat):
        return DenseMat(to_dense(a) + to_dense(b))
    return SparseMat(to_sparse(a) + to_sparse(b))


_RANK = {"I": 0, "D": 1, "P": 2, "S": 3, "M": 4}


def hadamard(a: MatrixRepr, b: MatrixRepr) -> MatrixRepr:
    """Elementwise product; the result takes the sparser operand's format."""
    _check_dims(a, b, "hadamard")
    if isinstance(a, OuterProductMat) or isinstance(b, OuterProductMat):
        return DenseMat(to_dense(a) * to_dense(b))
    if isinstance(a, IdentityMat) and isinstance(b, IdentityMat):
        return IdentityMat(a.dim)
    lo, hi = (a, b) if _RANK[a.tag] <= _RANK[b.tag] else (b, a)
    if isinstance(lo, (IdentityMat, DiagonalMat)):
        return DiagonalMat(_as_diag(lo) * diagonal(hi))
    if isinstance(lo, PermMat):
        return PermMat(lo.perm, lo.vals * _entries_at(hi, lo.perm))
    if isinstance(lo, SparseMat):
        other = hi.csc if isinstance(hi, SparseMat) else to_dense(hi)
        return SparseMat(sp.csc_matrix(lo.csc.multiply(other)))
    return DenseMat(a.data * b.data)


def _entries_at(a: MatrixRepr, cols: np.ndarray) -> np.ndarray:
    """a[i, cols[i]] for every row i."""
    rows = np.arange(a.dim)
    if isinstance(a, PermMat):
        return np.where(a.perm == cols, a.vals, 0)
    if isinstance(a, SparseMat):
        return np.asarray(a.csc[rows, cols]).ravel().astype(_CPLX)
    return to_dense(a)[rows, cols]


def scale_mat(a: MatrixRepr, c: complex) -> MatrixRepr:
    if isinstance(a, IdentityMat):
        return DiagonalMat(np.full(a.dim, c, dtype=_CPLX))
    if isinstance(a, DiagonalMat):
        return DiagonalMat(c * a.diag)
    if isinstance(a, PermMat):
        return PermMat(a.perm, c * a.vals)
    if isinstance(a, SparseMat):
        return SparseMat(c * a.csc)
    if isinstance(a, DenseMat):
        return DenseMat(c * a.data)
    return OuterProductMat(c * a.left, a.right)


def adjoint_mat(a: MatrixRepr) -> MatrixRepr:
    """Conjugate transpose in the same format."""
    if isinstance(a, IdentityMat):
        return a
    if isinstance(a, DiagonalMat):
        return DiagonalMat(a.diag.conj())
    if isinstance(a, PermMat):
        perm = np.empty_like(a.perm)
        vals = np.empty_like(a.vals)
        perm[a.perm] = np.arange(a.dim)
        vals[a.perm] = a.vals.conj()
        return PermMat(perm, vals)
    if isinstance(a, SparseMat):
        return SparseMat(a.csc.conj().T)
    if isinstance(a, DenseMat):
        return DenseMat(a.data.conj().T)
    return OuterProductMat(a.right.conj().T, a.left.conj().T)


# ── Application to state columns ──────────────────────────────────────────────
def _matvec_block(a: MatrixRepr, buf: np.ndarray) -> None:
    if isinstance(a, IdentityMat):
        return
    if isinstance(a, DiagonalMat):
        buf *= a.diag[:, None]
    elif isinstance(a, PermMat):
        buf[:] = a.vals[:, None] * buf[a.perm]
    elif isinstance(a, SparseMat):
        buf[:] = a.csc @ buf
    elif isinstance(a, DenseMat):
        buf[:] = a.data @ buf
    elif isinstance(a, OuterProductMat):
        buf[:] = a.left @ (a.right @ buf)
    else:
        raise ValidationError(f"unknown matrix format {type(a).__name__}")


def matvec_cols(a: MatrixRepr, buf: np.ndarray) -> np.ndarray:
    """Replace every column of `buf` (dim × ncols) by a·column, in place."""
    if buf.ndim != 2 or buf.shape[0] != a.dim:
        raise ShapeError(f"operator of dim {a.dim} cannot act on buffer of shape {buf.shape}")
    ncols   = buf.shape[1]
    workers = min(config.THREADS, ncols)
    if workers <= 1 or ncols < config.PARALLEL_MIN_COLUMNS:
        _matvec_block(a, buf)
        return buf

    # Column chunks are disjoint, so workers never touch the same memory.
    bounds = np.linspace(0, ncols, workers + 1, dtype=int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        jobs = [
            pool.submit(_matvec_block, a, buf[:, lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
        ]
        for job in jobs:
            job.result()
    return buf


# ── Properties ────────────────────────────────────────────────────────────────
def _max_abs(m) -> float:
    if sp.issparse(m):
        return float(np.abs(m.data).max()) if m.nnz else 0.0
    return float(np.abs(m).max()) if m.size else 0.0


def props(a: MatrixRepr, tol: float = config.TOLERANCE) -> OpProps:
    if isinstance(a, IdentityMat):
        return OpProps(True, True, True)
    if isinstance(a, OuterProductMat):
        d = to_dense(a)
        eye = np.eye(a.dim)
        return OpProps(
            _max_abs(d - d.conj().T) <= tol,
            _max_abs(d.conj().T @ d - eye) <= tol,
            _max_abs(d @ d - eye) <= tol,
        )
    s   = to_sparse(a)
    eye = sp.identity(a.dim, dtype=_CPLX, format="csc")
    return OpProps(
        hermitian=_max_abs(s - s.conj().T) <= tol,
        unitary=_max_abs(s.conj().T @ s - eye) <= tol,
        reflexive=_max_abs(s @ s - eye) <= tol,
    )


def isapprox(a: MatrixRepr, b: MatrixRepr, tol: float = config.TOLERANCE) -> bool:
    _check_dims(a, b, "isapprox")
    return _max_abs(to_sparse(a) - to_sparse(b)) <= tol


# ── Lifting a local operator into the full space ──────────────────────────────
def embed(local: MatrixRepr, n: int, locs, ctrl_locs=(), ctrl_config=()) -> MatrixRepr:
    """
    Lift a 2^k operator acting on 1-based `locs` into the 2^n space, active
    only on basis states where ctrl_match holds (identity elsewhere).
    """
    locs, ctrl_locs, ctrl_config = tuple(locs), tuple(ctrl_locs), tuple(ctrl_config)
    k = len(locs)
    if local.dim != 1 << k:
        raise ShapeError(f"operator of dim {local.dim} cannot act on {k} qubits")
    if not ctrl_locs and locs == tuple(range(1, n + 1)):
        return local
    if isinstance(local, IdentityMat):
        return IdentityMat(1 << n)

    idx = np.arange(1 << n, dtype=np.int64)
    hit = ctrl_mask_array(idx, ctrl_locs, ctrl_config)

    if isinstance(local, (DiagonalMat, PermMat)):
        lr = gather_bits(idx, locs)
        if isinstance(local, DiagonalMat):
            return DiagonalMat(np.where(hit, local.diag[lr], 1))
        perm = np.where(hit, scatter_bits(idx, locs, local.perm[lr]), idx)
        vals = np.where(hit, local.vals[lr], 1)
        return PermMat(perm, vals)

    coo   = to_sparse(local).tocoo()
    bases = idx[hit & (gather_bits(idx, locs) == 0)]
    rows  = scatter_bits(bases[:, None], locs, coo.row[None, :].astype(np.int64)).ravel()
    cols  = scatter_bits(bases[:, None], locs, coo.col[None, :].astype(np.int64)).ravel()
    vals  = np.broadcast_to(coo.data[None, :], (bases.size, coo.nnz)).ravel()
    rest  = idx[~hit]
    out = sp.csc_matrix(
        (np.concatenate([vals, np.ones(rest.size, dtype=_CPLX)]),
         (np.concatenate([rows, rest]), np.concatenate([cols, rest]))),
        shape=(1 << n, 1 << n),
    )
    return SparseMat(out)


# ── COO dump format ───────────────────────────────────────────────────────────
def dump_coo(a: MatrixRepr, fh) -> int:
    """Write `dim <d> format <tag> nnz <k>` then 0-based `row col re im` lines."""
    coo = to_sparse(a).tocoo()
    keep = coo.data != 0
    rows, cols, vals = coo.row[keep], coo.col[keep], coo.data[keep]
    fh.write(f"dim {a.dim} format {a.tag} nnz {vals.size}\n")
    for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
        fh.write(f"{r} {c} {v.real!r} {v.imag!r}\n")
    logging.debug(f"matrices: dumped {vals.size} nonzeros of a {a.dim}-dim {a.tag} operator")
    return int(vals.size)


def load_coo(fh) -> SparseMat:
    header = fh.readline().split()
    if len(header) != 6 or header[0] != "dim" or header[2] != "format" or header[4] != "nnz":
        raise SerializationError(f"bad matrix dump header: {' '.join(header)!r}")
    dim, count = int(header[1]), int(header[5])
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise SerializationError(f"line {lineno}: expected 'row col re im', got {line.strip()!r}")
        rows.append(int(parts[0]))
        cols.append(int(parts[1]))
        vals.append(complex(float(parts[2]), float(parts[3])))
    if len(vals) != count:
        raise SerializationError(f"header promises {count} entries, found {len(vals)}")
    return SparseMat(sp.csc_matrix((np.asarray(vals, dtype=_CPLX), (rows, cols)), shape=(dim, dim)))
