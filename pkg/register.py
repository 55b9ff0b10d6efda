"""
register.py — state storage and the register instruction set

Layout
------
The buffer is a C-ordered complex128 matrix of shape 2^a × (2^r · B):

  rows     the 2^a basis states of the active qubits, little-endian
           (qubit 1 is the least significant row bit)
  columns  env + 2^r · batch; the r environment qubits vary fastest and the
           batch index is always the slowest column index

Every instruction treats environment and batch columns alike, so one gate
kernel call updates all B replicas at once.

WHY one generic kernel:
  `instruct` reshapes the buffer into a rank-(a+1) tensor with one axis per
  active qubit plus the column axis, fixes the control axes by indexing,
  moves the target axes to the front and hands (2^k × rest) blocks to
  `matrices.matvec_cols`. The matrix format (diagonal, permutation, sparse,
  dense) decides the cost, so X, CNOT or a phase never touch a dense matrix.
  The blocks are taken a few at a time, split over the qubits the gate
  leaves alone, so its scratch space is a fraction of the buffer.

WHY count allocations:
  Reverse-mode AD promises a fixed number of full-state buffers regardless
  of circuit depth. Every Register construction (including clones) bumps a
  module counter that tests read through `count_allocations()`. Scratch
  space inside a kernel call is bounded by the chunking above.
"""

from __future__ import annotations

import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

import config
from bitstring import BitStr
from errors import (
    QubitRangeError, RenormalizationError, ResourceError, SerializationError,
    ShapeError, ValidationError,
)
from gates import gate_matrix
from matrices import DenseMat, MatrixRepr, matvec_cols, to_sparse

STATE_MAGIC  = b"QBIRREG1"
_HEADER      = struct.Struct("<III")
_ALLOCATIONS = 0


# ── Register ──────────────────────────────────────────────────────────────────
class Register:
    def __init__(self, state: np.ndarray, nqubits: int, nactive: int | None = None, nbatch: int = 1):
        global _ALLOCATIONS
        nactive = nqubits if nactive is None else nactive
        state = np.ascontiguousarray(state, dtype=np.complex128)
        expected = (1 << nactive, (1 << (nqubits - nactive)) * nbatch)
        if state.shape != expected:
            raise ShapeError(
                f"buffer shape {state.shape} does not match nqubits={nqubits}, "
                f"nactive={nactive}, nbatch={nbatch} (expected {expected})"
            )
        self.state   = state
        self.nqubits = nqubits
        self.nactive = nactive
        self.nbatch  = nbatch
        _ALLOCATIONS += 1

    @property
    def nremain(self) -> int:
        return self.nqubits - self.nactive

    def clone(self) -> Register:
        return Register(self.state.copy(), self.nqubits, self.nactive, self.nbatch)

    def batch_view(self) -> np.ndarray:
        """(2^a, B, 2^r) view of the buffer."""
        return self.state.reshape(1 << self.nactive, self.nbatch, 1 << self.nremain)

    def __repr__(self) -> str:
        return (
            f"Register(nqubits={self.nqubits}, nactive={self.nactive}, "
            f"nbatch={self.nbatch})"
        )


@dataclass
class MeasureOutcome:
    samples: list[BitStr]
    batches: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def values(self) -> list[int]:
        return [s.value for s in self.samples]


class AllocationCounter:
    def __init__(self):
        self.start = _ALLOCATIONS
        self.count = 0

    def update(self) -> int:
        self.count = _ALLOCATIONS - self.start
        return self.count


def allocation_count() -> int:
    return _ALLOCATIONS


@contextmanager
def count_allocations():
    """Count Register buffers created inside the block."""
    counter = AllocationCounter()
    try:
        yield counter
    finally:
        counter.update()


# ── Constructors ──────────────────────────────────────────────────────────────
def _check_size(n: int, nbatch: int) -> None:
    if n < 1:
        raise ValidationError(f"a register needs at least one qubit, got {n}")
    if nbatch < 1:
        raise ValidationError(f"nbatch must be positive, got {nbatch}")
    if n > config.QUBIT_CAP:
        raise ResourceError(f"{n} qubits exceeds the cap of {config.QUBIT_CAP}")


def zero_state(n: int, nbatch: int = 1) -> Register:
    _check_size(n, nbatch)
    state = np.zeros((1 << n, nbatch), dtype=np.complex128)
    state[0, :] = 1
    return Register(state, n, n, nbatch)


def product_state(b: BitStr, nbatch: int = 1) -> Register:
    _check_size(b.nbits, nbatch)
    state = np.zeros((1 << b.nbits, nbatch), dtype=np.complex128)
    state[b.value, :] = 1
    return Register(state, b.nbits, b.nbits, nbatch)


def rand_state(n: int, nbatch: int = 1, seed: int | None = None,
               rng: np.random.Generator | None = None) -> Register:
    _check_size(n, nbatch)
    rng = rng if rng is not None else config.make_rng(seed)
    shape = (1 << n, nbatch)
    state = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    state /= np.linalg.norm(state, axis=0, keepdims=True)
    return Register(state, n, n, nbatch)


def from_vector(vec: np.ndarray, nbatch: int | None = None) -> Register:
    """Wrap a (2^n,) vector or (2^n, B) matrix of amplitudes."""
    vec = np.asarray(vec, dtype=np.complex128)
    if vec.ndim == 1:
        vec = vec[:, None]
    dim = vec.shape[0]
    if dim < 2 or dim & (dim - 1):
        raise ShapeError(f"state length {dim} is not a power of 2")
    n = dim.bit_length() - 1
    _check_size(n, vec.shape[1])
    return Register(vec.copy(), n, n, vec.shape[1] if nbatch is None else nbatch)


# ── Read-out helpers ──────────────────────────────────────────────────────────
def statevec(reg: Register) -> np.ndarray:
    """Full amplitude vector (2^n,) for one batch, (2^n, B) otherwise."""
    if reg.nactive != reg.nqubits:
        raise ValidationError("statevec needs every qubit active; relax the register first")
    return reg.state[:, 0] if reg.nbatch == 1 else reg.state


def norms(reg: Register) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(reg.batch_view()) ** 2, axis=(0, 2)))


def normalize(reg: Register) -> Register:
    n = norms(reg)
    if np.any(n <= np.finfo(float).tiny):
        raise RenormalizationError("cannot normalize a zero state")
    reg.batch_view()[...] /= n[None, :, None]
    return reg


def probabilities(reg: Register) -> np.ndarray:
    """Active-qubit outcome probabilities, shape (2^a, B); environment summed out."""
    return np.sum(np.abs(reg.batch_view()) ** 2, axis=2)


def inner(a: Register, b: Register) -> np.ndarray:
    """⟨a|b⟩ per batch."""
    if a.state.shape != b.state.shape or a.nbatch != b.nbatch:
        raise ShapeError(f"{a!r} and {b!r} have different layouts")
    av, bv = a.batch_view(), b.batch_view()
    return np.array([np.vdot(av[:, j, :], bv[:, j, :]) for j in range(a.nbatch)])


def fidelity(a: Register, b: Register) -> np.ndarray:
    return np.abs(inner(a, b))


# ── Instruction set ───────────────────────────────────────────────────────────
def _check_locs(reg: Register, locs, ctrl_locs) -> None:
    for loc in (*locs, *ctrl_locs):
        if not isinstance(loc, (int, np.integer)) or not 1 <= loc <= reg.nactive:
            raise QubitRangeError(f"qubit {loc} outside 1..{reg.nactive}")
    allq = (*locs, *ctrl_locs)
    if len(set(allq)) != len(allq):
        raise ValidationError(f"overlapping qubit locations {locs} / controls {ctrl_locs}")


def instruct(reg: Register, gate: str | MatrixRepr, locs, ctrl_locs=(), ctrl_config=(),
             params=()) -> Register:
    """
    Apply `gate` to `locs` of every column, on the subspace where the control
    qubits match `ctrl_config` (1 control, 0 inverse control).
    """
    m = gate if isinstance(gate, MatrixRepr) else gate_matrix(gate, *params)
    locs = tuple(locs)
    moved = _local_view(reg, locs, ctrl_locs, ctrl_config)
    if m.dim != 1 << len(locs):
        raise ShapeError(f"{m.dim}-dim gate cannot act on {len(locs)} qubits")
    if m.tag == "I":
        return reg
    for chunk in _chunks(moved, len(locs)):
        block = chunk.reshape(m.dim, -1)
        matvec_cols(m, block)
        if not np.may_share_memory(block, chunk):
            chunk[...] = block.reshape(chunk.shape)
    return reg


def _chunks(moved: np.ndarray, k: int):
    """
    Sub-views of a local view, split over up to CHUNK_QUBITS of the qubit
    axes the gate does not touch. Each keeps all 2^k target rows.
    """
    nsplit = max(0, min(config.CHUNK_QUBITS, moved.ndim - k - 1))
    lead = (slice(None),) * k
    for idx in np.ndindex(*moved.shape[k:k + nsplit]):
        yield moved[lead + idx]


def local_overlap(bra: Register, ket: Register, op, locs, ctrl_locs=(), ctrl_config=()) -> complex:
    """
    Σ over columns of ⟨bra|op|ket⟩ on the slice a gate on `locs` acts on.
    `op` is a 2^k MatrixRepr or a callable mapping (2^k × m) blocks to new blocks.
    """
    locs = tuple(locs)
    if bra.state.shape != ket.state.shape:
        raise ShapeError(f"{bra!r} and {ket!r} have different layouts")
    k = len(locs)
    if isinstance(op, MatrixRepr) and op.dim != 1 << k:
        raise ShapeError(f"{op.dim}-dim operator cannot act on {k} qubits")
    total = 0j
    pieces = zip(
        _chunks(_local_view(bra, locs, ctrl_locs, ctrl_config), k),
        _chunks(_local_view(ket, locs, ctrl_locs, ctrl_config), k),
    )
    for b, v in pieces:
        total += np.vdot(b.reshape(1 << k, -1), _product(op, v.reshape(1 << k, -1)))
    return complex(total)


def _product(op, cols: np.ndarray) -> np.ndarray:
    if not isinstance(op, MatrixRepr):
        return op(cols)
    if isinstance(op, DenseMat):
        return op.data @ cols
    return to_sparse(op) @ cols


def _local_view(reg: Register, locs, ctrl_locs=(), ctrl_config=()) -> np.ndarray:
    """
    View of the buffer as a tensor whose leading axes are the target qubits
    (most significant local bit first), restricted to the control subspace.
    """
    locs, ctrl_locs, ctrl_config = tuple(locs), tuple(ctrl_locs), tuple(ctrl_config)
    _check_locs(reg, locs, ctrl_locs)
    if len(ctrl_locs) != len(ctrl_config):
        raise ValidationError(
            f"{len(ctrl_locs)} control locations but {len(ctrl_config)} configurations"
        )
    if any(c not in (0, 1) for c in ctrl_config):
        raise ValidationError(f"control configuration {ctrl_config} must be 0/1")

    a = reg.nactive
    tensor = reg.state.reshape((2,) * a + (reg.state.shape[1],))
    index: list = [slice(None)] * (a + 1)
    for loc, cfg in zip(ctrl_locs, ctrl_config):
        index[a - loc] = int(cfg)
    sub = tensor[tuple(index)]

    # Axis positions after the control axes were indexed away.
    kept = [ax for ax in range(a + 1) if not isinstance(index[ax], int)]
    src  = [kept.index(a - loc) for loc in reversed(locs)]
    return np.moveaxis(sub, src, range(len(locs)))


def _sample(p: np.ndarray, nshots: int, rng: np.random.Generator) -> np.ndarray:
    total = p.sum()
    if total <= np.finfo(float).tiny:
        raise RenormalizationError("cannot sample from a zero state")
    return rng.choice(p.size, size=nshots, p=p / total)


def measure(reg: Register, nshots: int = 1, rng: np.random.Generator | None = None,
            seed: int | None = None) -> MeasureOutcome:
    """Sample active-qubit strings per batch; the register is left untouched."""
    if nshots < 1:
        raise ValidationError(f"nshots must be at least 1, got {nshots}")
    rng = rng if rng is not None else config.make_rng(seed)
    probs = probabilities(reg)
    samples, batches = [], []
    for b in range(reg.nbatch):
        for value in _sample(probs[:, b], nshots, rng):
            samples.append(BitStr(int(value), reg.nactive))
            batches.append(b)
    logging.debug(f"register: measured {nshots} shots over {reg.nbatch} batch(es)")
    return MeasureOutcome(samples, batches)


def measure_collapse(reg: Register, rng: np.random.Generator | None = None,
                     seed: int | None = None) -> MeasureOutcome:
    """One sample per batch; each batch is projected onto its sample and renormalised."""
    rng = rng if rng is not None else config.make_rng(seed)
    probs = probabilities(reg)
    view = reg.batch_view()
    samples, batches = [], []
    for b in range(reg.nbatch):
        value = int(_sample(probs[:, b], 1, rng)[0])
        weight = probs[value, b] / probs[:, b].sum()
        if weight <= np.finfo(float).tiny:
            raise RenormalizationError(f"batch {b}: outcome {value} has zero probability")
        keep = view[value, b, :] / np.sqrt(probs[value, b])
        view[:, b, :] = 0
        view[value, b, :] = keep
        samples.append(BitStr(value, reg.nactive))
        batches.append(b)
    return MeasureOutcome(samples, batches)


# ── Scoping ───────────────────────────────────────────────────────────────────
def focus(reg: Register, locs) -> Register:
    """
    Activate `locs` in the given order (new qubit k is former qubit locs[k-1]).
    The other active qubits join the environment as its least significant
    bits, so the batch index stays slowest.
    """
    locs = tuple(locs)
    a, m = reg.nactive, len(locs)
    if m == 0:
        raise ValidationError("focus needs at least one qubit")
    _check_locs(reg, locs, ())
    rest = [q for q in range(a, 0, -1) if q not in locs]
    axes = [a - q for q in reversed(locs)] + [a] + [a - q for q in rest]
    if axes == list(range(a + 1)):
        reg.nactive = m
        reg.state = reg.state.reshape(1 << m, -1)
        return reg
    tensor = reg.state.reshape((2,) * a + (reg.state.shape[1],))
    reg.state = np.ascontiguousarray(tensor.transpose(axes)).reshape(1 << m, -1)
    reg.nactive = m
    logging.debug(f"register: focus on {locs}, nactive {m}")
    return reg


def relax(reg: Register, locs, to_nactive: int | None = None) -> Register:
    """Undo `focus(reg, locs)` and restore `to_nactive` active qubits."""
    locs = tuple(locs)
    to_nactive = reg.nqubits if to_nactive is None else to_nactive
    m = len(locs)
    if m != reg.nactive:
        raise ValidationError(f"relax locs {locs} do not match {reg.nactive} active qubits")
    if not m <= to_nactive <= reg.nqubits:
        raise ValidationError(f"to_nactive={to_nactive} outside {m}..{reg.nqubits}")
    if len(set(locs)) != m or any(not 1 <= q <= to_nactive for q in locs):
        raise ValidationError(f"relax locs {locs} are not distinct qubits in 1..{to_nactive}")

    a = to_nactive
    rest = [q for q in range(a, 0, -1) if q not in locs]
    axes = [a - q for q in reversed(locs)] + [a] + [a - q for q in rest]
    ncols = reg.state.shape[1] >> (a - m)
    if axes == list(range(a + 1)):
        reg.state = reg.state.reshape(1 << a, -1)
    else:
        shape = [2] * m + [ncols] + [2] * (a - m)
        tensor = reg.state.reshape(shape)
        reg.state = np.ascontiguousarray(tensor.transpose(np.argsort(axes))).reshape(1 << a, -1)
    reg.nactive = a
    logging.debug(f"register: relax {locs}, nactive {a}")
    return reg


# ── Persistence ───────────────────────────────────────────────────────────────
def save_state(reg: Register, path) -> None:
    """Magic, three LE uint32 (nqubits, nactive, nbatch), then LE complex128 column-major."""
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(_HEADER.pack(reg.nqubits, reg.nactive, reg.nbatch))
        fh.write(reg.state.astype("<c16").tobytes(order="F"))
    logging.info(f"register: saved {reg!r} to {path}")


def load_state(path) -> Register:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(STATE_MAGIC)] != STATE_MAGIC:
        raise SerializationError(f"{path}: not a saved register (bad magic)")
    offset = len(STATE_MAGIC)
    try:
        nqubits, nactive, nbatch = _HEADER.unpack_from(blob, offset)
    except struct.error as exc:
        raise SerializationError(f"{path}: truncated header") from exc
    rows, cols = 1 << nactive, (1 << (nqubits - nactive)) * nbatch
    payload = blob[offset + _HEADER.size:]
    if len(payload) != rows * cols * 16:
        raise SerializationError(
            f"{path}: expected {rows * cols} amplitudes, found {len(payload) // 16}"
        )
    state = np.frombuffer(payload, dtype="<c16").reshape((rows, cols), order="F")
    return Register(state.astype(np.complex128), nqubits, nactive, nbatch)
