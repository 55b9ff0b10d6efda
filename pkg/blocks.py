"""
blocks.py — the block intermediate representation

A circuit is a tree (a DAG when nodes are shared) of Block objects.
Primitive blocks carry a gate; composite blocks arrange children:

  primitive  ConstantGate Rotation Shift Phase TimeEvolution GeneralMatrix
             IdentityGate MeasureNode
  composite  Chain Put Control Kron Repeat Subroutine Add Scale Daggered
             Cached NoParams

Each node answers the same small protocol: `_apply` (act on a register in
place), `_mat` (build its operator in the cheapest matrix format),
`_adjoint` (dagger rule), `own_params`/`set_own_params` and `label` (for
the tree printer). The passes over the tree live at module level: apply,
mat, adjoint_block, parameters, dispatch, block_props, eigenbasis,
gatecount, pretty.

WHY Put goes through instruct for gates but through focus for circuits:
  A gate's matrix is tiny and the generic kernel acts on any set of
  locations. A composite child may be deep, so it is run on a register whose
  active qubits were permuted to the child's view (focus) and then restored
  (relax). Control always instructs with the child's matrix.

WHY parameters deduplicate by identity:
  The same node object may appear several times in one circuit. It owns one
  parameter slot; gradients from each occurrence are summed into that slot.

Conventions: Rotation(Σ, θ) = e^{-iΣθ/2}; Shift(θ) = diag(1, e^{iθ});
Phase(θ) = e^{iθ}·I; TimeEvolution(H, t) = e^{-iHt}.
"""

from __future__ import annotations

import logging
import numbers
from collections import Counter
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

import config
import gates
from errors import (
    QubitRangeError, ShapeError, UndecidableError, UnsupportedError, ValidationError,
)
from matrices import (
    DiagonalMat, DenseMat, IdentityMat, MatrixRepr, OpProps, add as mat_add, adjoint_mat,
    embed, kron as mat_kron, matvec_cols, mul, props as mat_props, scale_mat, to_dense,
    to_sparse,
)
from register import Register, focus, instruct, measure_collapse, relax


# ── Base classes ──────────────────────────────────────────────────────────────
class Block:
    nqubits: int = 0
    kernel: bool = False   # applies as one matrix through instruct
    __array_ufunc__ = None  # numpy scalars defer to Block.__rmul__

    def subblocks(self) -> list[Block]:
        return []

    def chsubblocks(self, children: Sequence[Block]) -> Block:
        if list(children):
            raise ValidationError(f"{type(self).__name__} takes no children")
        return self

    def own_params(self) -> list[float]:
        return []

    def set_own_params(self, values: Sequence[float]) -> None:
        if len(values):
            raise ValidationError(f"{type(self).__name__} has no parameters")

    def label(self) -> str:
        return type(self).__name__

    def _payload(self) -> tuple:
        return ()

    def _mat(self) -> MatrixRepr:
        raise UnsupportedError(f"{type(self).__name__} has no matrix")

    def _apply(self, reg: Register) -> None:
        instruct_all(reg, self._mat())

    def _adjoint(self, memo: dict) -> Block:
        return Daggered(self)

    def _props(self) -> OpProps:
        return OpProps()

    def kernel_matrix(self) -> MatrixRepr | None:
        return self._mat() if self.kernel else None

    # ── operator sugar ───────────────────────────────────────────────────────
    def __mul__(self, other):
        if isinstance(other, Block):
            # Operator product: `other` acts first.
            return Chain(self.nqubits, [other, self])
        if isinstance(other, numbers.Number):
            return Scale(other, self)
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, numbers.Number):
            return Scale(other, self)
        return NotImplemented

    def __add__(self, other):
        if not isinstance(other, Block):
            return NotImplemented
        left = self.children if isinstance(self, Add) else [self]
        return Add(self.nqubits, [*left, other])

    def __neg__(self):
        return Scale(-1, self)

    def __sub__(self, other):
        if not isinstance(other, Block):
            return NotImplemented
        return self + (-other)

    @property
    def H(self) -> Block:
        return adjoint_block(self)

    def __repr__(self) -> str:
        return pretty(self)


class PrimitiveBlock(Block):
    kernel = True


class CompositeBlock(Block):
    pass


# ── Validation helpers ────────────────────────────────────────────────────────
def _as_locs(locs) -> tuple[int, ...]:
    if isinstance(locs, (int, np.integer)):
        return (int(locs),)
    if isinstance(locs, range):
        return tuple(locs)
    return tuple(int(q) for q in locs)


def _check_placement(n: int, locs: tuple[int, ...], child: Block, what: str) -> None:
    for q in locs:
        if not 1 <= q <= n:
            raise QubitRangeError(f"{what}: qubit {q} outside 1..{n}")
    if len(set(locs)) != len(locs):
        raise ValidationError(f"{what}: duplicate locations {locs}")
    if child.nqubits != len(locs):
        raise ShapeError(f"{what}: {child.nqubits}-qubit block placed on {len(locs)} locations {locs}")


def instruct_all(reg: Register, m: MatrixRepr) -> None:
    """Apply a full-width operator to every column (locations 1..nactive in order)."""
    matvec_cols(m, reg.state)


# ── Primitive blocks ──────────────────────────────────────────────────────────
class ConstantGate(PrimitiveBlock):
    def __init__(self, name: str):
        gate = gates.lookup(name)
        self.name    = name
        self.nqubits = gate.nqubits

    @property
    def gate(self) -> gates.GateDef:
        return gates.lookup(self.name)

    def label(self) -> str:
        return f"{self.name} gate"

    def _payload(self):
        return (self.name,)

    def _mat(self):
        return self.gate.matrix

    def _adjoint(self, memo):
        g = self.gate
        if g.dagger is not None:
            return ConstantGate(g.dagger)
        if g.props.hermitian:
            return self
        return Daggered(self)

    def _props(self):
        return self.gate.props


class IdentityGate(PrimitiveBlock):
    kernel = False

    def __init__(self, nqubits: int = 1):
        self.nqubits = nqubits

    def label(self) -> str:
        return "IdentityGate"

    def _payload(self):
        return (self.nqubits,)

    def _mat(self):
        return IdentityMat(1 << self.nqubits)

    def _apply(self, reg):
        return None

    def _adjoint(self, memo):
        return self

    def _props(self):
        return OpProps(True, True, True)


_PAULI_ROTATIONS = {"X": gates.rx_mat, "Y": gates.ry_mat, "Z": gates.rz_mat}


class Rotation(PrimitiveBlock):
    """e^{-iΣθ/2} for a hermitian, reflexive generator Σ."""

    def __init__(self, generator: Block, theta: float):
        if generator.nqubits <= config.PROPS_MAX_QUBITS:
            p = block_props(generator)
            if p.hermitian is False or p.reflexive is False:
                raise ValidationError(
                    f"rotation generator {generator.label()} must be hermitian and reflexive"
                )
        self.generator = generator
        self.theta     = float(theta)
        self.nqubits   = generator.nqubits

    @property
    def pauli(self) -> str | None:
        g = self.generator
        if isinstance(g, ConstantGate) and g.name in _PAULI_ROTATIONS:
            return g.name
        return None

    def own_params(self):
        return [self.theta]

    def set_own_params(self, values):
        (self.theta,) = (float(v) for v in values)

    def label(self) -> str:
        g = self.generator
        name = f"{g.name}Gate" if isinstance(g, ConstantGate) else g.label()
        return f"rot({name}, {self.theta!r})"

    def _payload(self):
        return (self.generator, self.theta)

    def _mat(self):
        if self.pauli is not None:
            return _PAULI_ROTATIONS[self.pauli](self.theta)
        sigma = mat(self.generator)
        c, s = np.cos(self.theta / 2), np.sin(self.theta / 2)
        out = mat_add(scale_mat(IdentityMat(sigma.dim), c), scale_mat(sigma, -1j * s))
        return out if out.tag in ("D", "M") else DenseMat(to_dense(out))

    def _adjoint(self, memo):
        return Rotation(self.generator, -self.theta)

    def _props(self):
        return OpProps(unitary=True)


class Shift(PrimitiveBlock):
    nqubits = 1

    def __init__(self, theta: float):
        self.theta = float(theta)

    def own_params(self):
        return [self.theta]

    def set_own_params(self, values):
        (self.theta,) = (float(v) for v in values)

    def label(self) -> str:
        return f"shift({self.theta!r})"

    def _payload(self):
        return (self.theta,)

    def _mat(self):
        return gates.shift_mat(self.theta)

    def _adjoint(self, memo):
        return Shift(-self.theta)

    def _props(self):
        return OpProps(unitary=True)


class Phase(PrimitiveBlock):
    def __init__(self, theta: float, nqubits: int = 1):
        self.theta   = float(theta)
        self.nqubits = nqubits

    def own_params(self):
        return [self.theta]

    def set_own_params(self, values):
        (self.theta,) = (float(v) for v in values)

    def label(self) -> str:
        return f"phase({self.theta!r})"

    def _payload(self):
        return (self.theta, self.nqubits)

    def _mat(self):
        return gates.phase_mat(self.theta, 1 << self.nqubits)

    def _adjoint(self, memo):
        return Phase(-self.theta, self.nqubits)

    def _props(self):
        return OpProps(unitary=True)


class GeneralMatrix(PrimitiveBlock):
    def __init__(self, m: MatrixRepr, name: str | None = None):
        dim = m.dim
        if dim < 2 or dim & (dim - 1):
            raise ValidationError(f"matrix block of dimension {dim} is not a qubit operator")
        self.matrix  = m
        self.name    = name
        self.nqubits = dim.bit_length() - 1

    def label(self) -> str:
        return self.name or f"matblock({self.matrix.tag}, dim={self.matrix.dim})"

    def _payload(self):
        return (self.matrix, self.name)

    def _mat(self):
        return self.matrix

    def _props(self):
        return mat_props(self.matrix)


class TimeEvolution(PrimitiveBlock):
    """e^{-iHt}; applied with a Lanczos exponential, differentiable in real t."""

    kernel = False

    def __init__(self, hamiltonian: Block, t: complex):
        self.hamiltonian = hamiltonian
        self.t           = complex(t) if complex(t).imag else float(np.real(t))
        self.nqubits     = hamiltonian.nqubits
        self._action     = None

    @property
    def differentiable(self) -> bool:
        return not isinstance(self.t, complex)

    @property
    def action(self):
        """Columns ↦ H·columns, built once per node."""
        if self._action is None:
            self._action = hamiltonian_action(self.hamiltonian)
        return self._action

    def own_params(self):
        return [self.t] if self.differentiable else []

    def set_own_params(self, values):
        if not self.differentiable:
            return super().set_own_params(values)
        (self.t,) = (float(v) for v in values)

    def label(self) -> str:
        return f"Time Evolution Δt = {self.t}, tol = {config.KRYLOV_TOL}"

    def _payload(self):
        return (self.hamiltonian, self.t)

    def _mat(self):
        h = to_dense(mat(self.hamiltonian))
        return DenseMat(scipy.linalg.expm(-1j * self.t * h))

    def _apply(self, reg):
        reg.state[...] = expmv(self.action, reg.state, self.t)

    def _adjoint(self, memo):
        return TimeEvolution(self.hamiltonian, -np.conj(self.t))

    def _props(self):
        return OpProps(unitary=True) if self.differentiable else OpProps()


class MeasureNode(PrimitiveBlock):
    kernel = False

    def __init__(self, nqubits: int, seed: int | None = None):
        self.nqubits      = nqubits
        self.rng          = config.make_rng(seed)
        self.last_outcome = None

    def label(self) -> str:
        return f"Measure({self.nqubits})"

    def _payload(self):
        return (self.nqubits,)

    def _mat(self):
        raise UnsupportedError("a measurement has no matrix representation")

    def _apply(self, reg):
        self.last_outcome = measure_collapse(reg, rng=self.rng)


# ── Composite blocks ──────────────────────────────────────────────────────────
class Chain(CompositeBlock):
    def __init__(self, nqubits: int, children: Iterable[Block] = ()):
        children = list(children)
        for c in children:
            if c.nqubits != nqubits:
                raise ShapeError(f"chain of {nqubits} qubits cannot hold a {c.nqubits}-qubit block")
        self.nqubits  = nqubits
        self.children = children

    def subblocks(self):
        return list(self.children)

    def chsubblocks(self, children):
        return Chain(self.nqubits, children)

    def label(self) -> str:
        return "chain"

    def _mat(self):
        out = IdentityMat(1 << self.nqubits)
        for c in self.children:
            out = mul(mat(c), out)
        return out

    def _apply(self, reg):
        for c in self.children:
            apply(reg, c)

    def _adjoint(self, memo):
        return Chain(self.nqubits, [_adj(c, memo) for c in reversed(self.children)])

    def _props(self):
        kids = [block_props(c, densify=False) for c in self.children]
        if len(kids) == 1:
            return kids[0]
        supports = [occupied_locs(c) for c in self.children]
        if sum(map(len, supports)) == len(set().union(*supports)):
            # Factors on disjoint qubits behave like a kron.
            return _all_props(kids)
        return OpProps(unitary=True if all(k.unitary for k in kids) else None)


def _run_scoped(reg: Register, locs: tuple[int, ...], child: Block) -> None:
    m = child.kernel_matrix()
    if m is not None:
        instruct(reg, m, locs)
        return
    if isinstance(child, IdentityGate):
        return
    prev = reg.nactive
    focus(reg, locs)
    try:
        apply(reg, child)
    finally:
        relax(reg, locs, to_nactive=prev)


class Put(CompositeBlock):
    def __init__(self, nqubits: int, locs, child: Block):
        locs = _as_locs(locs)
        _check_placement(nqubits, locs, child, "put")
        self.nqubits = nqubits
        self.locs    = locs
        self.child   = child

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Put(self.nqubits, self.locs, child)

    def label(self) -> str:
        return f"put on ({', '.join(map(str, self.locs))})"

    def _payload(self):
        return (self.locs,)

    def _mat(self):
        return embed(mat(self.child), self.nqubits, self.locs)

    def _apply(self, reg):
        _run_scoped(reg, self.locs, self.child)

    def _adjoint(self, memo):
        return Put(self.nqubits, self.locs, _adj(self.child, memo))

    def _props(self):
        return block_props(self.child, densify=False)


class Control(CompositeBlock):
    def __init__(self, nqubits: int, ctrl_locs, ctrl_config, locs, child: Block):
        ctrl_locs, locs = _as_locs(ctrl_locs), _as_locs(locs)
        ctrl_config = tuple(int(c) for c in ctrl_config)
        _check_placement(nqubits, locs, child, "control")
        if len(ctrl_locs) != len(ctrl_config):
            raise ValidationError(f"{len(ctrl_locs)} controls but {len(ctrl_config)} configurations")
        if any(c not in (0, 1) for c in ctrl_config):
            raise ValidationError(f"control configuration {ctrl_config} must be 0/1")
        for q in ctrl_locs:
            if not 1 <= q <= nqubits:
                raise QubitRangeError(f"control: qubit {q} outside 1..{nqubits}")
        if len(set(ctrl_locs) | set(locs)) != len(ctrl_locs) + len(locs):
            raise ValidationError(f"control: locations {ctrl_locs} and {locs} overlap")
        self.nqubits     = nqubits
        self.ctrl_locs   = ctrl_locs
        self.ctrl_config = ctrl_config
        self.locs        = locs
        self.child       = child

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Control(self.nqubits, self.ctrl_locs, self.ctrl_config, self.locs, child)

    def label(self) -> str:
        marks = [str(q) if c else f"¬{q}" for q, c in zip(self.ctrl_locs, self.ctrl_config)]
        return f"control({', '.join(marks)})"

    def _payload(self):
        return (self.ctrl_locs, self.ctrl_config, self.locs)

    def _mat(self):
        return embed(mat(self.child), self.nqubits, self.locs, self.ctrl_locs, self.ctrl_config)

    def _apply(self, reg):
        m = self.child.kernel_matrix()
        instruct(reg, m if m is not None else mat(self.child), self.locs,
                 self.ctrl_locs, self.ctrl_config)

    def _adjoint(self, memo):
        return Control(self.nqubits, self.ctrl_locs, self.ctrl_config, self.locs,
                       _adj(self.child, memo))

    def _props(self):
        return block_props(self.child, densify=False)


class Kron(CompositeBlock):
    def __init__(self, nqubits: int, pairs: Iterable[tuple]):
        pairs = [(_as_locs(locs), child) for locs, child in pairs]
        used: set[int] = set()
        for locs, child in pairs:
            _check_placement(nqubits, locs, child, "kron")
            if used & set(locs):
                raise ValidationError(f"kron: location {sorted(used & set(locs))} used twice")
            used |= set(locs)
        self.nqubits = nqubits
        self.pairs   = pairs

    def subblocks(self):
        return [child for _, child in self.pairs]

    def chsubblocks(self, children):
        children = list(children)
        if len(children) != len(self.pairs):
            raise ValidationError(f"kron has {len(self.pairs)} slots, got {len(children)} blocks")
        return Kron(self.nqubits, [(locs, c) for (locs, _), c in zip(self.pairs, children)])

    def label(self) -> str:
        return "kron"

    def _payload(self):
        return tuple(locs for locs, _ in self.pairs)

    def _mat(self):
        out = IdentityMat(1 << self.nqubits)
        for locs, child in self.pairs:
            out = mul(embed(mat(child), self.nqubits, locs), out)
        return out

    def _apply(self, reg):
        for locs, child in self.pairs:
            _run_scoped(reg, locs, child)

    def _adjoint(self, memo):
        return Kron(self.nqubits, [(locs, _adj(c, memo)) for locs, c in self.pairs])

    def _props(self):
        return _all_props([block_props(c, densify=False) for _, c in self.pairs])


class Repeat(CompositeBlock):
    def __init__(self, nqubits: int, child: Block, locs=None):
        raw = range(1, nqubits + 1) if locs is None else locs
        locs = tuple(_as_locs(q) for q in raw)
        used: set[int] = set()
        for group in locs:
            _check_placement(nqubits, group, child, "repeat")
            if used & set(group):
                raise ValidationError(f"repeat: overlapping locations {locs}")
            used |= set(group)
        self.nqubits = nqubits
        self.locs    = locs
        self.child   = child

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Repeat(self.nqubits, child, self.locs)

    def label(self) -> str:
        return f"repeat on ({', '.join(_fmt_locs(g) for g in self.locs)})"

    def _payload(self):
        return (self.locs,)

    def _mat(self):
        inner = mat(self.child)
        out = IdentityMat(1 << self.nqubits)
        for group in self.locs:
            out = mul(embed(inner, self.nqubits, group), out)
        return out

    def _apply(self, reg):
        for group in self.locs:
            _run_scoped(reg, group, self.child)

    def _adjoint(self, memo):
        return Repeat(self.nqubits, _adj(self.child, memo), self.locs)

    def _props(self):
        return block_props(self.child, densify=False)


class Subroutine(CompositeBlock):
    def __init__(self, nqubits: int, child: Block, locs):
        locs = _as_locs(locs)
        _check_placement(nqubits, locs, child, "subroutine")
        self.nqubits = nqubits
        self.child   = child
        self.locs    = locs

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Subroutine(self.nqubits, child, self.locs)

    def label(self) -> str:
        return f"Subroutine: ({', '.join(map(str, self.locs))})"

    def _payload(self):
        return (self.locs,)

    def _mat(self):
        return embed(mat(self.child), self.nqubits, self.locs)

    def _apply(self, reg):
        prev = reg.nactive
        focus(reg, self.locs)
        try:
            apply(reg, self.child)
        finally:
            relax(reg, self.locs, to_nactive=prev)

    def _adjoint(self, memo):
        return Subroutine(self.nqubits, _adj(self.child, memo), self.locs)

    def _props(self):
        return block_props(self.child, densify=False)


class Add(CompositeBlock):
    def __init__(self, nqubits: int, children: Iterable[Block] = ()):
        children = list(children)
        for c in children:
            if c.nqubits != nqubits:
                raise ShapeError(f"sum over {nqubits} qubits cannot hold a {c.nqubits}-qubit term")
        self.nqubits  = nqubits
        self.children = children

    def subblocks(self):
        return list(self.children)

    def chsubblocks(self, children):
        return Add(self.nqubits, children)

    def label(self) -> str:
        return "+"

    def _mat(self):
        if not self.children:
            raise ValidationError("sum of no terms")
        out = mat(self.children[0])
        for c in self.children[1:]:
            out = mat_add(out, mat(c))
        return out

    def _apply(self, reg):
        if not self.children:
            raise ValidationError("sum of no terms")
        # One running accumulator plus one scratch copy per term in turn.
        acc = None
        for c in self.children[:-1]:
            tmp = reg.clone()
            apply(tmp, c)
            if acc is None:
                acc = tmp
            else:
                acc.state += tmp.state
        apply(reg, self.children[-1])
        if acc is not None:
            reg.state += acc.state

    def _adjoint(self, memo):
        return Add(self.nqubits, [_adj(c, memo) for c in self.children])

    def _props(self):
        kids = [block_props(c, densify=False) for c in self.children]
        return OpProps(hermitian=True if kids and all(k.hermitian for k in kids) else None)


class Scale(CompositeBlock):
    def __init__(self, factor: complex, child: Block):
        self.factor  = complex(factor) if complex(factor).imag else float(np.real(factor))
        self.child   = child
        self.nqubits = child.nqubits

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Scale(self.factor, child)

    def label(self) -> str:
        return f"[scale: {self.factor}]"

    def _payload(self):
        return (self.factor,)

    def _mat(self):
        return scale_mat(mat(self.child), self.factor)

    def _apply(self, reg):
        apply(reg, self.child)
        reg.state *= self.factor

    def _adjoint(self, memo):
        return Scale(np.conj(self.factor), _adj(self.child, memo))

    def _props(self):
        p, c = block_props(self.child, densify=False), complex(self.factor)
        return OpProps(
            hermitian=True if p.hermitian and c.imag == 0 else None,
            unitary=True if p.unitary and abs(abs(c) - 1) <= config.TOLERANCE else None,
            reflexive=True if p.reflexive and abs(c * c - 1) <= config.TOLERANCE else None,
        )


class Daggered(CompositeBlock):
    def __init__(self, child: Block):
        self.child   = child
        self.nqubits = child.nqubits

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Daggered(child)

    def label(self) -> str:
        return f"[†]{self.child.label()}"

    def _mat(self):
        return adjoint_mat(mat(self.child))

    def kernel_matrix(self):
        m = self.child.kernel_matrix()
        return adjoint_mat(m) if m is not None else None

    def _apply(self, reg):
        inverse = self.child._adjoint({})
        if isinstance(inverse, Daggered):
            instruct_all(reg, adjoint_mat(mat(self.child)))
        else:
            apply(reg, inverse)

    def _adjoint(self, memo):
        return self.child

    def _props(self):
        return block_props(self.child, densify=False)


class Cached(CompositeBlock):
    """Memoises the child's matrix; `dispatch` below it clears the memo."""

    def __init__(self, child: Block):
        self.child   = child
        self.nqubits = child.nqubits
        self._memo: MatrixRepr | None = None

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return Cached(child)

    def label(self) -> str:
        return f"[cached]{self.child.label()}"

    def cached_mat(self) -> MatrixRepr:
        if self._memo is None:
            self._memo = mat(self.child)
            logging.info(
                f"blocks: cached {self.nqubits}-qubit operator "
                f"(format {self._memo.tag})"
            )
        return self._memo

    def invalidate(self) -> None:
        self._memo = None

    def kernel_matrix(self):
        return self.cached_mat()

    def _mat(self):
        return self.cached_mat()

    def _apply(self, reg):
        instruct_all(reg, self.cached_mat())

    def _adjoint(self, memo):
        return Daggered(self)

    def _props(self):
        return block_props(self.child, densify=False)


class NoParams(CompositeBlock):
    def __init__(self, child: Block):
        self.child   = child
        self.nqubits = child.nqubits

    def subblocks(self):
        return [self.child]

    def chsubblocks(self, children):
        (child,) = children
        return NoParams(child)

    def label(self) -> str:
        return f"[no params]{self.child.label()}"

    def kernel_matrix(self):
        return self.child.kernel_matrix()

    def _mat(self):
        return mat(self.child)

    def _apply(self, reg):
        apply(reg, self.child)

    def _adjoint(self, memo):
        return NoParams(_adj(self.child, memo))

    def _props(self):
        return block_props(self.child, densify=False)


def _fmt_locs(locs: tuple[int, ...]) -> str:
    return str(locs[0]) if len(locs) == 1 else f"({', '.join(map(str, locs))})"


# ── Constructors ──────────────────────────────────────────────────────────────
X, Y, Z, H = (ConstantGate(name) for name in ("X", "Y", "Z", "H"))
I2, S, T   = ConstantGate("I2"), ConstantGate("S"), ConstantGate("T")
SWAP       = ConstantGate("SWAP")


def _flatten_blocks(blocks) -> list[Block]:
    out = []
    for b in blocks:
        if isinstance(b, Block):
            out.append(b)
        else:
            out.extend(_flatten_blocks(b))
    return out


def chain(*args) -> Chain:
    """chain(n, b1, b2, ...) or chain(b1, b2, ...); iterables of blocks are spliced in."""
    if args and isinstance(args[0], (int, np.integer)):
        n, blocks = int(args[0]), _flatten_blocks(args[1:])
    else:
        blocks = _flatten_blocks(args)
        if not blocks:
            raise ValidationError("chain() needs a qubit count or at least one block")
        n = blocks[0].nqubits
    return Chain(n, blocks)


def put(n: int, locs, block: Block) -> Put:
    return Put(n, locs, block)


def _split_controls(ctrl) -> tuple[tuple[int, ...], tuple[int, ...]]:
    ctrl = _as_locs(ctrl)
    return tuple(abs(q) for q in ctrl), tuple(0 if q < 0 else 1 for q in ctrl)


def control(n: int, ctrl, locs, block: Block) -> Control:
    """Negative control locations mean inverse control (active on |0⟩)."""
    ctrl_locs, ctrl_config = _split_controls(ctrl)
    return Control(n, ctrl_locs, ctrl_config, locs, block)


def cnot(n: int, ctrl, target) -> Control:
    return control(n, ctrl, target, ConstantGate("X"))


def kron(n: int, *pairs) -> Kron:
    return Kron(n, pairs)


def repeat(n: int, block: Block, locs=None) -> Repeat:
    return Repeat(n, block, locs)


def subroutine(n: int, block: Block, locs) -> Subroutine:
    return Subroutine(n, block, locs)


def add(*blocks: Block, nqubits: int | None = None) -> Add:
    blocks = _flatten_blocks(blocks)
    if nqubits is None:
        if not blocks:
            raise ValidationError("add() needs nqubits or at least one block")
        nqubits = blocks[0].nqubits
    return Add(nqubits, blocks)


def scale(factor: complex, block: Block) -> Scale:
    return Scale(factor, block)


def dagger(block: Block) -> Daggered:
    return Daggered(block)


def cache(block: Block) -> Cached:
    return Cached(block)


def noparams(block: Block) -> NoParams:
    return NoParams(block)


def matblock(m: MatrixRepr | np.ndarray, name: str | None = None) -> GeneralMatrix:
    if not isinstance(m, MatrixRepr):
        m = DenseMat(m)
    return GeneralMatrix(m, name)


def rot(generator: Block, theta: float = 0.0) -> Rotation:
    return Rotation(generator, theta)


def Rx(theta: float = 0.0) -> Rotation:
    return Rotation(ConstantGate("X"), theta)


def Ry(theta: float = 0.0) -> Rotation:
    return Rotation(ConstantGate("Y"), theta)


def Rz(theta: float = 0.0) -> Rotation:
    return Rotation(ConstantGate("Z"), theta)


def shift(theta: float = 0.0) -> Shift:
    return Shift(theta)


def phase(theta: float = 0.0, nqubits: int = 1) -> Phase:
    return Phase(theta, nqubits)


def igate(nqubits: int = 1) -> IdentityGate:
    return IdentityGate(nqubits)


def measure_node(nqubits: int, seed: int | None = None) -> MeasureNode:
    return MeasureNode(nqubits, seed)


def unitary_channel(*_args, **_kwargs):
    raise UnsupportedError("unitary channels (noisy simulation) are not supported")


def define_const_gate(name: str, m: MatrixRepr | np.ndarray) -> ConstantGate:
    """Register `m` under `name` and return the gate block; usable in instruct by name."""
    if not isinstance(m, MatrixRepr):
        m = DenseMat(m)
    gates.register_gate(name, m)
    return ConstantGate(name)


def time_evolve(h: Block, t: complex, check_hermitian: bool = True) -> TimeEvolution:
    if check_hermitian:
        try:
            herm = block_props(h).hermitian
        except UndecidableError:
            herm = None
        if herm is False:
            raise ValidationError("time evolution needs a hermitian Hamiltonian")
        if herm is None:
            logging.warning(f"blocks: hermiticity of the {h.nqubits}-qubit Hamiltonian not checked")
    return TimeEvolution(h, t)


# ── Core passes ───────────────────────────────────────────────────────────────
def apply(reg: Register, b: Block) -> Register:
    """Apply `b` to the active qubits of `reg`, in place."""
    if b.nqubits != reg.nactive:
        raise ShapeError(f"{b.nqubits}-qubit block applied to a register with {reg.nactive} active qubits")
    b._apply(reg)
    return reg


def mat(b: Block) -> MatrixRepr:
    return b._mat()


def _adj(b: Block, memo: dict) -> Block:
    key = id(b)
    if key not in memo:
        memo[key] = b._adjoint(memo)
    return memo[key]


def adjoint_block(b: Block) -> Block:
    """Dagger of a block; nodes shared in `b` stay shared in the result."""
    return _adj(b, {})


def subblocks(b: Block) -> list[Block]:
    return b.subblocks()


def chsubblocks(b: Block, children: Sequence[Block]) -> Block:
    children = list(children)
    old = b.subblocks()
    if len(children) != len(old):
        raise ValidationError(f"{type(b).__name__} has {len(old)} children, got {len(children)}")
    for o, c in zip(old, children):
        if o.nqubits != c.nqubits:
            raise ValidationError(f"replacement child has {c.nqubits} qubits, expected {o.nqubits}")
    return b.chsubblocks(children)


# ── Parameters ────────────────────────────────────────────────────────────────
def param_nodes(b: Block) -> list[Block]:
    """Distinct parameterised nodes in depth-first order."""
    seen: set[int] = set()
    out: list[Block] = []
    stack = [b]
    while stack:
        node = stack.pop()
        if isinstance(node, NoParams):
            continue
        if node.own_params():
            if id(node) not in seen:
                seen.add(id(node))
                out.append(node)
            continue
        stack.extend(reversed(node.subblocks()))
    return out


def param_slots(b: Block) -> list[tuple[Block, int]]:
    return [(node, k) for node in param_nodes(b) for k in range(len(node.own_params()))]


def parameters(b: Block) -> np.ndarray:
    return np.array([p for node in param_nodes(b) for p in node.own_params()], dtype=float)


def nparameters(b: Block) -> int:
    return sum(len(node.own_params()) for node in param_nodes(b))


def dispatch(b: Block, params, op=None, rng: np.random.Generator | None = None,
             seed: int | None = None) -> Block:
    """
    Set the parameters of `b` in depth-first order.

    params  a vector of nparameters(b) values, or "random" for U(0, 2π) draws
    op      update rule: θ ← op(θ, params), e.g. operator.sub for descent
    """
    nodes = param_nodes(b)
    count = sum(len(node.own_params()) for node in nodes)
    if isinstance(params, str):
        if params != "random":
            raise ValidationError(f"unknown dispatch mode '{params}'")
        rng = rng if rng is not None else config.make_rng(seed)
        values = rng.uniform(0, 2 * np.pi, count)
    else:
        values = np.asarray(params, dtype=float).ravel()
        if values.size != count:
            raise ValidationError(f"expected {count} parameters, got {values.size}")
        if op is not None:
            values = np.asarray(op(parameters(b), values), dtype=float)
    pos = 0
    for node in nodes:
        k = len(node.own_params())
        node.set_own_params(values[pos:pos + k])
        pos += k
    _invalidate_caches(b)
    return b


def _invalidate_caches(b: Block) -> None:
    seen: set[int] = set()
    stack = [b]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, NoParams):
            continue
        if isinstance(node, Cached) and node._memo is not None and nparameters(node.child):
            node.invalidate()
            logging.debug("blocks: cache invalidated by dispatch")
        stack.extend(node.subblocks())


# ── Properties ────────────────────────────────────────────────────────────────
def _all_props(kids: list[OpProps]) -> OpProps:
    def both(field):
        vals = [getattr(k, field) for k in kids]
        return True if vals and all(vals) else None
    return OpProps(both("hermitian"), both("unitary"), both("reflexive"))


def block_props(b: Block, densify: bool = True) -> OpProps:
    """
    Hermiticity, unitarity and reflexivity. Structural rules first; whatever
    stays unknown is settled from the matrix when nqubits ≤ PROPS_MAX_QUBITS.
    """
    p = b._props()
    if not densify or None not in (p.hermitian, p.unitary, p.reflexive):
        return p
    if b.nqubits > config.PROPS_MAX_QUBITS:
        if p == OpProps():
            raise UndecidableError(
                f"properties of a {b.nqubits}-qubit {type(b).__name__} need a matrix "
                f"larger than {config.PROPS_MAX_QUBITS} qubits"
            )
        return p
    m = mat_props(mat(b))
    return OpProps(
        m.hermitian if p.hermitian is None else p.hermitian,
        m.unitary if p.unitary is None else p.unitary,
        m.reflexive if p.reflexive is None else p.reflexive,
    )


def _decided(b: Block, field: str) -> bool:
    value = getattr(block_props(b), field)
    if value is None:
        raise UndecidableError(f"cannot decide whether the block is {field}")
    return value


def ishermitian(b: Block) -> bool:
    return _decided(b, "hermitian")


def isunitary(b: Block) -> bool:
    return _decided(b, "unitary")


def isreflexive(b: Block) -> bool:
    return _decided(b, "reflexive")


def occupied_locs(b: Block) -> set[int]:
    if isinstance(b, IdentityGate):
        return set()
    if isinstance(b, PrimitiveBlock):
        return set(range(1, b.nqubits + 1))
    if isinstance(b, (Put, Subroutine)):
        return {b.locs[q - 1] for q in occupied_locs(b.child)}
    if isinstance(b, Control):
        return set(b.ctrl_locs) | {b.locs[q - 1] for q in occupied_locs(b.child)}
    if isinstance(b, Kron):
        return {locs[q - 1] for locs, c in b.pairs for q in occupied_locs(c)}
    if isinstance(b, Repeat):
        inner = occupied_locs(b.child)
        return {group[q - 1] for group in b.locs for q in inner}
    out: set[int] = set()
    for c in b.subblocks():
        out |= occupied_locs(c)
    return out


def iscommute(a: Block, b: Block) -> bool:
    if a.nqubits != b.nqubits:
        raise ShapeError(f"cannot compare {a.nqubits}- and {b.nqubits}-qubit blocks")
    if not occupied_locs(a) & occupied_locs(b):
        return True
    if a.nqubits > config.PROPS_MAX_QUBITS:
        raise UndecidableError(f"commutation of {a.nqubits}-qubit blocks needs a matrix too large to build")
    ma, mb = to_sparse(mat(a)), to_sparse(mat(b))
    diff = ma @ mb - mb @ ma
    return (float(np.abs(diff.data).max()) if diff.nnz else 0.0) <= config.TOLERANCE


# ── Eigenbasis decomposition ──────────────────────────────────────────────────
def eigenbasis(b: Block) -> tuple[Block, Block]:
    """(E, U) with b = U·E·U† and E diagonal; Pauli and diagonal compositions only."""
    n = b.nqubits
    if isinstance(b, ConstantGate) and b.name == "X":
        return ConstantGate("Z"), ConstantGate("H")
    if isinstance(b, ConstantGate) and b.name == "Y":
        return ConstantGate("Z"), chain(ConstantGate("H"), ConstantGate("S"))
    if isinstance(b, IdentityGate):
        return b, IdentityGate(n)
    if isinstance(b, PrimitiveBlock) and b.kernel and mat(b).tag in ("I", "D"):
        return b, IdentityGate(n)
    if isinstance(b, Put):
        e, u = eigenbasis(b.child)
        return Put(n, b.locs, e), Put(n, b.locs, u)
    if isinstance(b, Kron):
        parts = [(locs, eigenbasis(c)) for locs, c in b.pairs]
        return (Kron(n, [(locs, e) for locs, (e, _) in parts]),
                Kron(n, [(locs, u) for locs, (_, u) in parts]))
    if isinstance(b, Repeat):
        e, u = eigenbasis(b.child)
        return Repeat(n, e, b.locs), Repeat(n, u, b.locs)
    if isinstance(b, Chain):
        used: set[int] = set()
        for c in b.children:
            locs = occupied_locs(c)
            if used & locs:
                raise UnsupportedError("eigenbasis of a chain needs factors on disjoint qubits")
            used |= locs
        parts = [eigenbasis(c) for c in b.children]
        return Chain(n, [e for e, _ in parts]), Chain(n, [u for _, u in parts])
    if isinstance(b, Scale):
        e, u = eigenbasis(b.child)
        return Scale(b.factor, e), u
    if isinstance(b, Add):
        parts = [eigenbasis(c) for c in b.children]
        u0 = parts[0][1]
        if all(blocks_equal(u, u0) for _, u in parts[1:]):
            return Add(n, [e for e, _ in parts]), u0
        raise UnsupportedError("terms of the sum do not share an eigenbasis")
    if isinstance(b, NoParams):
        return eigenbasis(b.child)
    raise UnsupportedError(f"no eigenbasis rule for {b.label()}")


# ── Counting, equality, rewriting ─────────────────────────────────────────────
def _kind_key(b: Block) -> str:
    if isinstance(b, ConstantGate):
        return b.name
    if isinstance(b, Rotation):
        return f"R{b.pauli.lower()}" if b.pauli else "rot"
    if isinstance(b, GeneralMatrix):
        return b.name or "matblock"
    keys = {Shift: "shift", Phase: "phase", TimeEvolution: "time_evolution",
            IdentityGate: "I", MeasureNode: "measure"}
    return keys.get(type(b), type(b).__name__)


def gatecount(b: Block) -> Counter:
    """Primitive occurrences by kind; a controlled gate counts as control(<gate>)."""
    if isinstance(b, PrimitiveBlock):
        return Counter({_kind_key(b): 1})
    if isinstance(b, Control):
        return Counter({f"control({k})": v for k, v in gatecount(b.child).items()})
    if isinstance(b, Repeat):
        inner = gatecount(b.child)
        return Counter({k: v * len(b.locs) for k, v in inner.items()})
    total: Counter = Counter()
    for c in b.subblocks():
        total.update(gatecount(c))
    return total


def _payload_equal(x, y) -> bool:
    if isinstance(x, Block) and isinstance(y, Block):
        return blocks_equal(x, y)
    if isinstance(x, MatrixRepr) and isinstance(y, MatrixRepr):
        return x.dim == y.dim and np.array_equal(to_dense(x), to_dense(y))
    return type(x) is type(y) and x == y


def blocks_equal(a: Block, b: Block) -> bool:
    """Structural equality (same kinds, payloads and children)."""
    if a is b:
        return True
    if type(a) is not type(b) or a.nqubits != b.nqubits:
        return False
    pa, pb = a._payload(), b._payload()
    if len(pa) != len(pb) or not all(_payload_equal(x, y) for x, y in zip(pa, pb)):
        return False
    ka, kb = a.subblocks(), b.subblocks()
    return len(ka) == len(kb) and all(blocks_equal(x, y) for x, y in zip(ka, kb))


def decompose_h(b: Block) -> Block:
    """Rewrite every H as Rz(π/2)·Rx(π/2)·Rz(π/2) (equal up to a global phase)."""
    if isinstance(b, ConstantGate) and b.name == "H":
        return chain(Rz(np.pi / 2), Rx(np.pi / 2), Rz(np.pi / 2))
    kids = b.subblocks()
    if not kids:
        return b
    return chsubblocks(b, [decompose_h(c) for c in kids])


# ── Tree printer ──────────────────────────────────────────────────────────────
def _view(b: Block) -> tuple[str, list[tuple[str, Block]]]:
    """(label, [(prefix, child), ...]) for one printed node."""
    if isinstance(b, Control):
        return b.label(), [(f"{b.locs} ", b.child)]
    if isinstance(b, Kron):
        return b.label(), [(f"{_fmt_locs(locs)}=>", c) for locs, c in b.pairs]
    if isinstance(b, (Daggered, Cached, NoParams)):
        label, kids = _view(b.child)
        mark = b.label()[: b.label().index("]") + 1]
        return mark + label, kids
    return b.label(), [("", c) for c in b.subblocks()]


def _render(b: Block, prefix: str = "") -> list[str]:
    label, kids = _view(b)
    lines = [prefix + label]
    for i, (tag, child) in enumerate(kids):
        last = i == len(kids) - 1
        sub = _render(child, tag)
        lines.append(("└─ " if last else "├─ ") + sub[0])
        pad = "   " if last else "│  "
        lines.extend(pad + line for line in sub[1:])
    return lines


def pretty(b: Block) -> str:
    return "\n".join([f"nqubits: {b.nqubits}", *_render(b)])


# ── Time evolution ────────────────────────────────────────────────────────────
def hamiltonian_action(h: Block):
    """V ↦ H·V for a vector or a (dim × m) block of columns."""
    if isinstance(h, Cached):
        def from_matrix(v: np.ndarray) -> np.ndarray:
            out = np.array(v, dtype=np.complex128).reshape(v.shape[0], -1)
            matvec_cols(h.cached_mat(), out)
            return out.reshape(v.shape)
        return from_matrix

    def by_apply(v: np.ndarray) -> np.ndarray:
        cols = np.array(v, dtype=np.complex128).reshape(v.shape[0], -1)
        scratch = Register(cols, h.nqubits, nbatch=cols.shape[1])
        apply(scratch, h)
        return scratch.state.reshape(v.shape)
    return by_apply


class _NotConverged(Exception):
    pass


def _tridiagonal_expm(alphas: list, betas: list, dt: complex) -> np.ndarray:
    """First column of e^{-i·dt·T} for each column's Lanczos matrix T, shape (m, j)."""
    a = np.array(alphas).T
    ncols, size = a.shape
    tri = np.zeros((ncols, size, size))
    idx = np.arange(size)
    tri[:, idx, idx] = a
    if betas:
        b = np.array(betas).T
        tri[:, idx[:-1], idx[1:]] = b
        tri[:, idx[1:], idx[:-1]] = b
    return scipy.linalg.expm(-1j * dt * tri)[:, :, 0]


def _lanczos_step(action, v: np.ndarray, dt: complex, m_max: int, tol: float) -> np.ndarray:
    """One Lanczos exponential over every column of v (dim × m) at once."""
    beta0 = np.linalg.norm(v, axis=0)
    live = beta0 > 0
    q = np.zeros_like(v)
    q[:, live] = v[:, live] / beta0[live]
    basis = [q]
    alphas: list[np.ndarray] = []
    betas: list[np.ndarray] = []
    w = action(q)
    for j in range(m_max):
        alpha = np.einsum("ij,ij->j", basis[j].conj(), w).real
        w = w - alpha * basis[j]
        if j > 0:
            w = w - betas[-1] * basis[j - 1]
        alphas.append(alpha)
        beta = np.linalg.norm(w, axis=0)
        small = _tridiagonal_expm(alphas, betas, dt)
        done = beta <= tol
        if np.all(done | (beta * np.abs(small[:, -1]) <= tol)):
            out = np.zeros_like(v)
            for i, vec in enumerate(basis):
                out += vec * small[:, i]
            return out * beta0
        # A column whose subspace closed early carries zeros from here on.
        beta = np.where(done, 0.0, beta)
        betas.append(beta)
        basis.append(np.divide(w, beta, out=np.zeros_like(w), where=~done))
        w = action(basis[-1])
    raise _NotConverged


def expmv(action, v: np.ndarray, t: complex, m_max: int | None = None,
          tol: float | None = None) -> np.ndarray:
    """
    e^{-iHt}·v by Lanczos for a vector or every column of a (dim × m) block;
    halves the time step until the subspace converges.
    """
    m_max = config.KRYLOV_DIM if m_max is None else m_max
    tol = config.KRYLOV_TOL if tol is None else tol
    v = np.asarray(v, dtype=np.complex128)
    if t == 0:
        return v.copy()
    cols = v.reshape(v.shape[0], -1)
    nsub = 1
    while True:
        try:
            out = cols
            for _ in range(nsub):
                out = _lanczos_step(action, out, t / nsub, m_max, tol)
            return out.reshape(v.shape)
        except _NotConverged:
            nsub *= 2
            if nsub > 1 << 16:
                raise UnsupportedError("Krylov exponential failed to converge") from None
            logging.warning(f"blocks: Krylov subspace too small, splitting t={t} into {nsub} steps")
