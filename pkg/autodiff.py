"""
autodiff.py — gradients of circuit losses

Reverse mode
------------
The forward pass runs the circuit once. The backward pass walks the block
tree in reverse and, at every gate U_k, recovers the previous state by
uncomputing (ψ_k = U_k† ψ_{k+1}) instead of reading it from a tape. Only the
running state and its adjoint ψ̄ = ∂L/∂ψ* are alive, so memory does not grow
with circuit depth.

At a parameterised gate θ̄ = 2·Re⟨ψ̄|G|ψ_out⟩ with G = (∂U/∂θ)·U†, which is
as cheap as the gate itself (−iσ/2 for a rotation). The overlap is taken
chunk by chunk from the two registers before the gate is undone in place,
so the sweep never copies a whole state. mat_back computes the same number
from the adjoint of the gate matrix, Ū = ψ̄_{k+1} ψ_k†, kept factored as an
OuterProductMat.

Forward mode
------------
faithful_grad applies the shift rule ½(⟨O⟩(θ+π/2) − ⟨O⟩(θ−π/2)) per
parameter, from exact expectations or from nshots samples in the
observable's eigenbasis.

Statistic functionals
---------------------
MMDLoss compares the circuit's output distribution to a target with a
radial-basis kernel; both engines differentiate it.

Batched registers accumulate gradients over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

import config
from blocks import (
    Add, Block, Cached, Chain, Control, Daggered, IdentityGate, Kron, MeasureNode, NoParams,
    Phase, Put, Repeat, Rotation, Scale, Shift, Subroutine, TimeEvolution, adjoint_block,
    apply, block_props, dispatch, eigenbasis, expmv, mat, nparameters, param_nodes, parameters,
)
from errors import ShapeError, UndecidableError, UnsupportedError, ValidationError
from matrices import (
    DiagonalMat, IdentityMat, MatrixRepr, OuterProductMat, adjoint_mat, diagonal, matvec_cols,
    mul, scale_mat, to_dense,
)
from register import (
    Register, inner, instruct, local_overlap, measure, probabilities,
)


# ── Result types ──────────────────────────────────────────────────────────────
@dataclass
class AdjointPair:
    state:   Register
    adjoint: Register

    def __post_init__(self):
        if self.state.state.shape != self.adjoint.state.shape:
            raise ShapeError("state and adjoint registers must have the same layout")


@dataclass
class GradResult:
    state_grad:  Register
    param_grads: np.ndarray
    value:       np.ndarray = field(default_factory=lambda: np.zeros(0))


def _unpack(reg_or_pair) -> tuple[Register, Block | None]:
    if isinstance(reg_or_pair, Register):
        return reg_or_pair, None
    reg, circuit = reg_or_pair
    return reg, circuit


def _check_observable(obs: Block) -> None:
    try:
        herm = block_props(obs).hermitian
    except UndecidableError:
        return
    if herm is False:
        raise ValidationError("observable must be hermitian")


# ── Expectation values ────────────────────────────────────────────────────────
def _run(reg_or_pair) -> Register:
    reg, circuit = _unpack(reg_or_pair)
    if circuit is None:
        return reg
    out = reg.clone()
    apply(out, circuit)
    return out


def _observe(obs: Block, psi: Register) -> tuple[np.ndarray, Register]:
    """(⟨ψ|O|ψ⟩ per batch, O|ψ⟩)."""
    o_psi = psi.clone()
    apply(o_psi, obs)
    value = inner(psi, o_psi)
    if np.any(np.abs(value.imag) > 1e-10 * max(1.0, float(np.abs(value).max()))):
        logging.warning(f"autodiff: expectation has imaginary part {value.imag}")
    return value.real, o_psi


def expect(obs: Block, reg_or_pair) -> np.ndarray:
    """⟨ψ|O|ψ⟩ for every batch, with ψ the register or circuit(register)."""
    _check_observable(obs)
    value, _ = _observe(obs, _run(reg_or_pair))
    return value


# ── Reverse mode ──────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class _Scope:
    """Where a subtree acts: register qubit of each local qubit, plus controls."""

    locs:        tuple[int, ...]
    ctrl_locs:   tuple[int, ...] = ()
    ctrl_config: tuple[int, ...] = ()

    def sub(self, locs: Sequence[int]) -> _Scope:
        return _Scope(tuple(self.locs[q - 1] for q in locs), self.ctrl_locs, self.ctrl_config)

    def controlled(self, locs, ctrl_locs, ctrl_config) -> _Scope:
        mapped = tuple(self.locs[q - 1] for q in ctrl_locs)
        return _Scope(
            tuple(self.locs[q - 1] for q in locs),
            self.ctrl_locs + mapped,
            self.ctrl_config + tuple(ctrl_config),
        )


def _dmat(b: Block) -> MatrixRepr:
    """∂U/∂θ for a one-parameter gate."""
    if isinstance(b, Rotation):
        sigma = mat(b.generator)
        return mul(scale_mat(sigma, -0.5j), mat(b))
    if isinstance(b, Shift):
        return DiagonalMat([0, 1j * np.exp(1j * b.theta)])
    if isinstance(b, Phase):
        return scale_mat(IdentityMat(1 << b.nqubits), 1j * np.exp(1j * b.theta))
    raise UnsupportedError(f"no matrix derivative for {b.label()}")


def _frobenius(ubar: OuterProductMat, du: MatrixRepr) -> float:
    """2·Re Σ conj(Ū) ∘ dU = 2·Re tr(L† dU R†) for Ū = L·R."""
    cols = ubar.right.conj().T.copy()
    matvec_cols(du, cols)
    return 2.0 * float(np.vdot(ubar.left, cols).real)


def mat_back(b: Block, ubar: MatrixRepr) -> np.ndarray:
    """Parameter adjoints of a primitive gate from the adjoint of its matrix."""
    if not b.own_params():
        return np.zeros(0)
    if not isinstance(ubar, OuterProductMat):
        ubar = OuterProductMat(to_dense(ubar), np.eye(ubar.dim))
    if isinstance(b, TimeEvolution):
        # ∂U/∂t = -iH·U; U·R† costs one more Krylov exponential.
        cols = -1j * b.action(expmv(b.action, ubar.right.conj().T, b.t))
        return np.array([2.0 * float(np.vdot(ubar.left, cols).real)])
    return np.array([_frobenius(ubar, _dmat(b))])


def _check_differentiable(circuit: Block) -> None:
    stack, seen = [circuit], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, (Add, Scale, MeasureNode)):
            raise UnsupportedError(f"cannot backpropagate through {type(node).__name__}")
        if isinstance(node, TimeEvolution) and not node.differentiable:
            raise UnsupportedError("time evolution with complex time is not invertible")
        if isinstance(node, Daggered) and nparameters(node.child):
            raise UnsupportedError("parameters under a dagger are not differentiable")
        stack.extend(node.subblocks())


class _Backward:
    """One reverse sweep; `grads` is indexed like parameters(circuit)."""

    def __init__(self, circuit: Block, grads: np.ndarray | None = None):
        self.offsets: dict[int, int] = {}
        pos = 0
        for node in param_nodes(circuit):
            self.offsets[id(node)] = pos
            pos += len(node.own_params())
        self.grads = np.zeros(pos) if grads is None else grads
        if self.grads.size != pos:
            raise ValidationError(f"gradient buffer has {self.grads.size} slots, expected {pos}")

    def run(self, pair: AdjointPair, circuit: Block) -> None:
        n = pair.state.nactive
        self.walk(pair, circuit, _Scope(tuple(range(1, n + 1))))

    def walk(self, pair: AdjointPair, b: Block, scope: _Scope) -> None:
        if isinstance(b, IdentityGate):
            return
        if isinstance(b, NoParams) or (not isinstance(b, (Rotation, Shift, Phase, TimeEvolution))
                                       and nparameters(b) == 0):
            self.uncompute(pair, b, scope)
        elif isinstance(b, Chain):
            for c in reversed(b.children):
                self.walk(pair, c, scope)
        elif isinstance(b, (Put, Subroutine)):
            self.walk(pair, b.child, scope.sub(b.locs))
        elif isinstance(b, Control):
            self.walk(pair, b.child, scope.controlled(b.locs, b.ctrl_locs, b.ctrl_config))
        elif isinstance(b, Kron):
            for locs, c in reversed(b.pairs):
                self.walk(pair, c, scope.sub(locs))
        elif isinstance(b, Repeat):
            for group in reversed(b.locs):
                self.walk(pair, b.child, scope.sub(group))
        elif isinstance(b, Cached):
            self.walk(pair, b.child, scope)
        elif isinstance(b, (Rotation, Shift, Phase, TimeEvolution)):
            self.leaf(pair, b, scope)
        else:
            raise UnsupportedError(f"cannot backpropagate through {type(b).__name__}")

    def uncompute(self, pair: AdjointPair, b: Block, scope: _Scope) -> None:
        """Apply b† to state and adjoint; no parameters below b."""
        m = b.kernel_matrix()
        if m is not None:
            mdag = adjoint_mat(m)
            for reg in (pair.state, pair.adjoint):
                _instruct_scoped(reg, mdag, scope)
            return
        inverse = adjoint_block(b)
        for reg in (pair.state, pair.adjoint):
            _apply_scoped(reg, inverse, scope)

    def leaf(self, pair: AdjointPair, b: Block, scope: _Scope) -> None:
        """Add θ̄ from the gate's generator, then undo the gate on both registers."""
        if b.own_params():
            where = (scope.locs, scope.ctrl_locs, scope.ctrl_config)
            g = local_overlap(pair.adjoint, pair.state, _generator(b), *where)
            self.grads[self.offsets[id(b)]] += 2.0 * g.real
        if isinstance(b, TimeEvolution):
            inverse = adjoint_block(b)
            for reg in (pair.state, pair.adjoint):
                _apply_scoped(reg, inverse, scope)
            return
        mdag = adjoint_mat(mat(b))
        for reg in (pair.state, pair.adjoint):
            _instruct_scoped(reg, mdag, scope)


def _generator(b: Block):
    """G = (∂U/∂θ)·U† for a one-parameter gate."""
    if isinstance(b, Rotation):
        return scale_mat(mat(b.generator), -0.5j)
    if isinstance(b, Shift):
        return DiagonalMat([0, 1j])
    if isinstance(b, Phase):
        return scale_mat(IdentityMat(1 << b.nqubits), 1j)
    if isinstance(b, TimeEvolution):
        action = b.action
        return lambda cols: -1j * action(cols)
    raise UnsupportedError(f"no generator for {b.label()}")


def _instruct_scoped(reg: Register, m: MatrixRepr, scope: _Scope) -> None:
    instruct(reg, m, scope.locs, scope.ctrl_locs, scope.ctrl_config)


def _apply_scoped(reg: Register, b: Block, scope: _Scope) -> None:
    n = reg.nactive
    if scope.ctrl_locs:
        _instruct_scoped(reg, mat(b), scope)
    elif scope.locs == tuple(range(1, n + 1)):
        apply(reg, b)
    else:
        apply(reg, Put(n, scope.locs, b))


def apply_back(pair: AdjointPair, b: Block, grads: np.ndarray | None = None) -> np.ndarray:
    """
    Undo `b` on pair.state and pull pair.adjoint back through it, adding the
    parameter adjoints into `grads` (parameters(b) order). Returns `grads`.
    """
    _check_differentiable(b)
    sweep = _Backward(b, grads)
    sweep.run(pair, b)
    return sweep.grads


def _backprop(circuit: Block, psi_out: Register, seed_adjoint: Register) -> tuple[Register, np.ndarray]:
    pair = AdjointPair(psi_out, seed_adjoint)
    grads = apply_back(pair, circuit)
    return pair.adjoint, grads


def expect_grad(obs: Block, pair) -> GradResult:
    """Reverse-mode gradient of ⟨O⟩ at circuit(register), summed over batches."""
    reg, circuit = pair
    _check_observable(obs)
    _check_differentiable(circuit)
    psi = reg.clone()
    apply(psi, circuit)
    value, o_psi = _observe(obs, psi)
    state_grad, grads = _backprop(circuit, psi, o_psi)
    logging.debug(f"autodiff: reverse sweep over {grads.size} parameters, loss {value}")
    return GradResult(state_grad, grads, value)


# ── Forward mode: the shift rule ──────────────────────────────────────────────
def _check_shiftable(circuit: Block) -> None:
    counts: dict[int, int] = {}
    stack = [circuit]
    while stack:
        node = stack.pop()
        if isinstance(node, NoParams):
            continue
        if node.own_params():
            counts[id(node)] = counts.get(id(node), 0) + 1
            if not isinstance(node, Rotation):
                raise UnsupportedError(
                    f"shift rule needs rotation gates, found {type(node).__name__}"
                )
            continue
        stack.extend(node.subblocks())
    if any(c > 1 for c in counts.values()):
        raise UnsupportedError("shift rule cannot differentiate a gate used more than once")


def _sum_terms(obs: Block) -> list[Block]:
    if isinstance(obs, Add):
        return [t for c in obs.children for t in _sum_terms(c)]
    return [obs]


def sampled_expect(obs: Block, psi: Register, nshots: int,
                   rng: np.random.Generator) -> np.ndarray:
    """⟨O⟩ per batch estimated from nshots samples in each term's eigenbasis."""
    total = np.zeros(psi.nbatch)
    for term in _sum_terms(obs):
        e, u = eigenbasis(term)
        rotated = psi.clone()
        apply(rotated, adjoint_block(u))
        spectrum = diagonal(mat(e)).real
        outcome = measure(rotated, nshots, rng=rng)
        values = spectrum[np.asarray(outcome.values())]
        total += values.reshape(psi.nbatch, nshots).mean(axis=1)
    return total


def faithful_grad(obs: Block, pair, nshots: int | None = None,
                  rng: np.random.Generator | None = None, seed: int | None = None) -> np.ndarray:
    """Shift-rule gradient; exact expectations when nshots is None."""
    reg, circuit = pair
    _check_observable(obs)
    _check_shiftable(circuit)
    rng = rng if rng is not None else config.make_rng(seed)

    def evaluate() -> float:
        psi = reg.clone()
        apply(psi, circuit)
        if nshots is None:
            return float(_observe(obs, psi)[0].sum())
        return float(sampled_expect(obs, psi, nshots, rng).sum())

    return np.array([0.5 * (plus - minus) for plus, minus in _shift_pairs(circuit, evaluate)])


def _shift_pairs(circuit: Block, evaluate: Callable[[], float]) -> list[tuple[float, float]]:
    """(f(θ_k + π/2), f(θ_k − π/2)) for every parameter; θ is restored afterwards."""
    theta = parameters(circuit)
    out = []
    try:
        for k in range(theta.size):
            shifted = theta.copy()
            shifted[k] += np.pi / 2
            dispatch(circuit, shifted)
            plus = evaluate()
            shifted[k] -= np.pi
            dispatch(circuit, shifted)
            out.append((plus, evaluate()))
    finally:
        dispatch(circuit, theta)
    return out


# ── Statistic functionals: MMD ────────────────────────────────────────────────
def rbf_kernel(*sigmas: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Mixture of Gaussians in |x − y| over the given bandwidths (default σ = 2)."""
    sigmas = sigmas or (2.0,)
    gammas = [1.0 / (2.0 * s * s) for s in sigmas]

    def kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sq = (np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) ** 2
        return sum(np.exp(-g * sq) for g in gammas) / len(gammas)
    return kernel


class MMDLoss:
    """Squared maximum mean discrepancy to a fixed target distribution."""

    def __init__(self, target_p, kernel=None):
        target_p = np.asarray(target_p, dtype=float).ravel()
        if abs(target_p.sum() - 1) > 1e-12 or np.any(target_p < 0):
            raise ValidationError("target distribution must be non-negative and sum to 1")
        self.target_p = target_p
        self.kernel   = kernel or rbf_kernel(2.0)
        self._k: np.ndarray | None = None

    def kernel_matrix(self) -> np.ndarray:
        if self._k is None:
            idx = np.arange(self.target_p.size)
            k = self.kernel(idx[:, None], idx[None, :])
            if not np.allclose(k, k.T):
                raise ValidationError("MMD kernel must be symmetric")
            self._k = k
        return self._k

    def __call__(self, p: np.ndarray) -> float:
        d = p - self.target_p
        return float(d @ self.kernel_matrix() @ d)


def _output_probs(loss: MMDLoss, psi: Register) -> np.ndarray:
    p = probabilities(psi)
    if p.shape[0] != loss.target_p.size:
        raise ShapeError(f"circuit has {p.shape[0]} outcomes, target has {loss.target_p.size}")
    return p


def mmd_expect(loss: MMDLoss, pair) -> np.ndarray:
    """Squared MMD per batch between |ψ|² and the target."""
    p = _output_probs(loss, _run(pair))
    return np.array([loss(p[:, b]) for b in range(p.shape[1])])


def mmd_grad(loss: MMDLoss, pair, mode: str = "reverse") -> np.ndarray:
    reg, circuit = pair
    if mode == "reverse":
        _check_differentiable(circuit)
        psi = reg.clone()
        apply(psi, circuit)
        p = _output_probs(loss, psi)
        weight = 2.0 * loss.kernel_matrix() @ (p - loss.target_p[:, None])
        seed = psi.clone()
        seed.batch_view()[...] *= weight[:, :, None]
        _, grads = _backprop(circuit, psi, seed)
        return grads
    if mode == "shift":
        _check_shiftable(circuit)
        base = _output_probs(loss, _run(pair))
        kd = loss.kernel_matrix() @ (base - loss.target_p[:, None])

        def evaluate() -> float:
            p = _output_probs(loss, _run(pair))
            return float(np.einsum("ib,ib->", p, kd))
        # dL/dθ = 2·(K(p − q))ᵀ·dp/dθ and dp/dθ = (p₊ − p₋)/2
        return np.array([plus - minus for plus, minus in _shift_pairs(circuit, evaluate)])
    raise ValidationError(f"unknown MMD gradient mode '{mode}'")


# ── Operator fidelity ─────────────────────────────────────────────────────────
def _as_dense(u) -> np.ndarray:
    if isinstance(u, Block):
        return to_dense(mat(u))
    if isinstance(u, MatrixRepr):
        return to_dense(u)
    return np.asarray(u, dtype=np.complex128)


def operator_fidelity(u, v) -> float:
    """|Tr(U†V)|/d; blind to a global phase."""
    a, b = _as_dense(u), _as_dense(v)
    if a.shape != b.shape:
        raise ShapeError(f"operators of shape {a.shape} and {b.shape}")
    return float(abs(np.trace(a.conj().T @ b)) / a.shape[0])


def fidelity_grad(target, ansatz: Block) -> tuple[float, np.ndarray]:
    """
    Operator fidelity of `ansatz` against `target` and its parameter gradient.
    The ansatz runs once on a batch holding every basis state, so column j of
    the output is V e_j and Tr(U†V) = Σ_j ⟨U e_j, V e_j⟩.
    """
    u = _as_dense(target)
    d = u.shape[0]
    n = ansatz.nqubits
    if d != 1 << n:
        raise ShapeError(f"target of dim {d} against a {n}-qubit ansatz")
    _check_differentiable(ansatz)
    psi = Register(np.eye(d, dtype=np.complex128), n, n, nbatch=d)
    apply(psi, ansatz)
    trace = np.vdot(u, psi.state)
    fid = abs(trace) / d
    if abs(trace) == 0:
        return 0.0, np.zeros(nparameters(ansatz))
    seed = Register(u * (trace / (2 * abs(trace) * d)), n, n, nbatch=d)
    _, grads = _backprop(ansatz, psi, seed)
    return float(fid), grads
