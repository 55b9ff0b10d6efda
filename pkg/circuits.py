"""
circuits.py — the circuit and Hamiltonian zoo

Builders return plain block trees; nothing here touches a register except the
drivers (vqe_run, learn_gate, shor9_check) and the FFT emulation of the QFT.

  qft / iqft           Hadamard + controlled-shift ladders, no final swaps
  heisenberg           open-chain XX + YY + ZZ
  variational_circuit  Rx layer, then (CNOT ring, Rz·Rx·Rz) per layer
  phase_estimation     H layer, controlled U^(2^(k-1)), inverse QFT on 1..n
  shor9                encode, error, decode
  general_u4           15-parameter universal two-qubit ansatz

WHY the QFT has no swap layer:
  The register is little-endian and the ladder starts at qubit 1, so the
  circuit equals "reverse the bit order, then an inverse DFT scaled by √2ⁿ".
  qft_fft_apply computes exactly that with numpy's FFT and is the oracle the
  tests compare against. Phase estimation therefore reads its answer
  bit-reflected (read_phase).

WHY plain gradient steps in the drivers:
  vqe_run and learn_gate update parameters with dispatch(θ, lr·g, op) so the
  update rule is the one a user would write by hand; no optimizer state.
"""

from __future__ import annotations

import logging
import operator
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

import config
from autodiff import expect, expect_grad, fidelity_grad, operator_fidelity
from bitstring import BitStr, breflect
from blocks import (
    Block, H, X, Y, Z, adjoint_block, add, apply, chain, cnot, control, dispatch, igate,
    kron, mat, matblock, put, repeat, shift, subroutine, Rx, Ry, Rz,
)
from errors import ShapeError, ValidationError
from matrices import DenseMat, MatrixRepr, props as mat_props, to_dense, to_sparse
from register import Register, from_vector, statevec, zero_state

LOG_EVERY = 50   # driver progress lines


# ── Quantum Fourier transform ─────────────────────────────────────────────────
def cphase(n: int, i: int, j: int) -> Block:
    """Shift by 2π/2^(i-j+1) on qubit j, controlled by qubit i."""
    return control(n, i, j, shift(2 * np.pi / 2 ** (i - j + 1)))


def hcphases(n: int, i: int) -> Block:
    return chain(n, [put(n, i, H) if j == i else cphase(n, j, i) for j in range(i, n + 1)])


def qft(n: int) -> Block:
    if n < 1:
        raise ValidationError(f"qft needs at least one qubit, got {n}")
    return chain(n, [hcphases(n, i) for i in range(1, n + 1)])


def iqft(n: int) -> Block:
    return adjoint_block(qft(n))


def qft_fft_apply(reg: Register) -> Register:
    """Emulate qft on the active qubits: bit reversal, then √N·ifft per column."""
    a = reg.nactive
    size = 1 << a
    idx = np.arange(size)
    rev = np.zeros_like(idx)
    for k in range(a):
        rev |= ((idx >> k) & 1) << (a - 1 - k)
    reg.state = np.ascontiguousarray(np.fft.ifft(reg.state[rev, :], axis=0) * np.sqrt(size))
    return reg


# ── Hamiltonians ──────────────────────────────────────────────────────────────
def _bond(n: int, i: int) -> Block:
    return add([put(n, i, s) * put(n, i + 1, s) for s in (X, Y, Z)])


def heisenberg(n: int) -> Block:
    """Σ_i X_iX_{i+1} + Y_iY_{i+1} + Z_iZ_{i+1} on an open chain."""
    if n < 2:
        raise ValidationError(f"heisenberg chain needs at least 2 sites, got {n}")
    return add([_bond(n, i) for i in range(1, n)])


def ground_energy(h: Block) -> float:
    """Smallest eigenvalue of a hermitian block; dense below 256 states."""
    m = mat(h)
    if m.dim <= 256:
        return float(np.linalg.eigvalsh(to_dense(m))[0])
    w = scipy.sparse.linalg.eigsh(to_sparse(m), k=1, which="SA", return_eigenvectors=False)
    return float(w[0])


# ── Variational circuits and VQE ──────────────────────────────────────────────
def _ring(n: int) -> Block:
    return chain(n, [cnot(n, i, i % n + 1) for i in range(1, n + 1)])


def variational_circuit(n: int, depth: int) -> Block:
    if n < 2 or depth < 1:
        raise ValidationError(f"variational circuit needs n ≥ 2 and depth ≥ 1, got ({n}, {depth})")
    layers = [chain(n, [put(n, i, Rx()) for i in range(1, n + 1)])]
    for _ in range(depth):
        layers.append(_ring(n))
        layers.append(chain(n, [put(n, i, chain(Rz(), Rx(), Rz())) for i in range(1, n + 1)]))
    return chain(n, layers)


@dataclass
class VqeReport:
    energies:     list[float]
    final_energy: float
    circuit:      Block


def vqe_run(n: int, depth: int, iters: int, lr: float, seed: int | None = None) -> VqeReport:
    """
    Plain gradient descent on ⟨H⟩ for heisenberg(n) with zero_state(n) as input.
    `energies` holds the energy before each update (just the initial energy
    when iters is 0).
    """
    circuit = dispatch(variational_circuit(n, depth), "random", seed=seed)
    h = heisenberg(n)
    reg = zero_state(n)
    energies: list[float] = []
    for step in range(iters):
        result = expect_grad(h, (reg, circuit))
        energies.append(float(result.value[0]))
        dispatch(circuit, lr * result.param_grads, op=operator.sub)
        if step % LOG_EVERY == 0:
            logging.info(f"circuits: VQE step {step}, energy {energies[-1]:.8f}")
    final = float(expect(h, (reg, circuit))[0])
    if not energies:
        energies.append(final)
    logging.info(f"circuits: VQE finished after {iters} steps, energy {final:.8f}")
    return VqeReport(energies, final, circuit)


# ── Phase estimation ──────────────────────────────────────────────────────────
def _unitary_dense(u, what: str) -> np.ndarray:
    m = u if isinstance(u, MatrixRepr) else DenseMat(np.asarray(u, dtype=np.complex128))
    if not mat_props(m).unitary:
        raise ValidationError(f"{what} must be unitary")
    return to_dense(m)


def phase_estimation(n: int, m: int, u) -> Block:
    """n phase qubits (1..n) and an m-qubit unitary on n+1..n+m."""
    dense = _unitary_dense(u, "phase estimation operator")
    if dense.shape[0] != 1 << m:
        raise ShapeError(f"operator of dim {dense.shape[0]} does not act on {m} qubits")
    total = n + m
    targets = range(n + 1, total + 1)
    ladder = chain(total, [
        control(total, k, targets, matblock(np.linalg.matrix_power(dense, 2 ** (k - 1))))
        for k in range(1, n + 1)
    ])
    return chain(
        total,
        repeat(total, H, range(1, n + 1)),
        ladder,
        subroutine(total, iqft(n), range(1, n + 1)),
    )


def read_phase(bits: BitStr) -> int:
    """Phase register readout as the integer j in φ = j/2ⁿ."""
    return breflect(bits).value


# ── Shor's 9-qubit code ───────────────────────────────────────────────────────
def shor9(error: Block | None = None) -> Block:
    error = igate(9) if error is None else error
    if error.nqubits != 9:
        raise ShapeError(f"error block acts on {error.nqubits} qubits, expected 9")
    encode = [
        cnot(9, 1, 4), cnot(9, 1, 7),
        put(9, 1, H), put(9, 4, H), put(9, 7, H),
        cnot(9, 1, 2), cnot(9, 1, 3), cnot(9, 4, 5), cnot(9, 4, 6), cnot(9, 7, 8), cnot(9, 7, 9),
    ]
    decode = [
        cnot(9, 1, 2), cnot(9, 1, 3), cnot(9, (2, 3), 1),
        cnot(9, 4, 5), cnot(9, 4, 6), cnot(9, (5, 6), 4),
        cnot(9, 7, 8), cnot(9, 7, 9), cnot(9, (8, 9), 7),
        put(9, 1, H), put(9, 4, H), put(9, 7, H),
        cnot(9, 1, 4), cnot(9, 1, 7), cnot(9, (4, 7), 1),
    ]
    return chain(9, encode, error, decode)


def shor9_error_xzz() -> Block:
    """X on qubits 1, 4, 7 and Z on the rest."""
    return kron(9, *[(q, X if q % 3 == 1 else Z) for q in range(1, 10)])


def shor9_check(alpha: complex, beta: complex, error: Block | None = None,
                circuit: Block | None = None) -> float:
    """
    Fidelity of qubit 1's reduced state after encode/error/decode against
    α|0⟩ + β|1⟩. `circuit` overrides shor9(error), e.g. with a parsed script.
    """
    psi = np.array([alpha, beta], dtype=np.complex128)
    if abs(np.vdot(psi, psi).real - 1) > config.NORM_TOLERANCE:
        raise ValidationError(f"|α|² + |β|² = {np.vdot(psi, psi).real}, expected 1")
    vec = np.zeros(1 << 9, dtype=np.complex128)
    vec[:2] = psi
    reg = from_vector(vec)
    apply(reg, circuit if circuit is not None else shor9(error))
    amp = statevec(reg).reshape(1 << 8, 2)   # [ancillas, qubit 1]
    rho = amp.T @ amp.conj()
    return float(np.vdot(psi, rho @ psi).real)


SHOR9_SCRIPT = '''let nqubits=9, version="0.6.0"
    begin # encode circuit
        1=>C, 4=>X
        1=>C, 7=>X
        1=>H, 4=>H, 7=>H
        1=>C, 2=>X
        1=>C, 3=>X
        4=>C, 5=>X
        4=>C, 6=>X
        7=>C, 8=>X
        7=>C, 9=>X
    end

    # the error
    1=>X, 2=>Z, 3=>Z, 4=>X, 5=>Z, 6=>Z, 7=>X, 8=>Z, 9=>Z

    begin # decode circuit
        1=>C, 2=>X
        1=>C, 3=>X
        2=>C, 3=>C, 1=>X
        4=>C, 5=>X
        4=>C, 6=>X
        5=>C, 6=>C, 4=>X
        7=>C, 8=>X
        7=>C, 9=>X
        8=>C, 9=>C, 7=>X

        1=>H, 4=>H, 7=>H
        1=>C, 4=>X
        1=>C, 7=>X
        4=>C, 7=>C, 1=>X
    end
end
'''


# ── Gate learning ─────────────────────────────────────────────────────────────
def general_u2() -> Block:
    return chain(Rz(), Ry(), Rz())


def general_u4() -> Block:
    """Minimal universal two-qubit ansatz: 15 rotations, 3 CNOTs."""
    return chain(
        2,
        put(2, 1, general_u2()), put(2, 2, general_u2()),
        cnot(2, 2, 1),
        put(2, 1, Rz()), put(2, 2, Ry()),
        cnot(2, 1, 2),
        put(2, 2, Ry()),
        cnot(2, 2, 1),
        put(2, 1, general_u2()), put(2, 2, general_u2()),
    )


def rand_unitary(d: int, rng: np.random.Generator | None = None,
                 seed: int | None = None) -> np.ndarray:
    """Haar-random d×d unitary: QR of a complex Gaussian with R's diagonal phases removed."""
    rng = rng if rng is not None else config.make_rng(seed)
    z = (rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    diag = np.diag(r)
    return q * (diag / np.abs(diag))


@dataclass
class LearnReport:
    initial_fidelity: float
    final_fidelity:   float
    iterations:       int
    learned:          Block
    fidelity_trace:   list[float] = field(default_factory=list)


def learn_gate(target, iters: int = 2000, lr: float = 0.05, seed: int | None = None,
               ansatz: Block | None = None) -> LearnReport:
    """Gradient ascent on |Tr(U†V)|/4 over the general_u4 parameters."""
    u = _unitary_dense(target, "target gate")
    if u.shape != (4, 4):
        raise ShapeError(f"gate learning needs a 4×4 target, got {u.shape}")
    if ansatz is None:
        ansatz = dispatch(general_u4(), "random", seed=seed)
    trace: list[float] = []
    for step in range(iters):
        fid, grads = fidelity_grad(u, ansatz)
        trace.append(fid)
        dispatch(ansatz, lr * grads, op=operator.add)
        if step % LOG_EVERY == 0:
            logging.debug(f"circuits: learn_gate step {step}, fidelity {fid:.12f}")
    final = operator_fidelity(u, ansatz)
    trace.append(final)
    logging.info(f"circuits: learn_gate {trace[0]:.6f} -> {final:.12f} in {iters} steps")
    return LearnReport(trace[0], final, iters, ansatz, trace)
