"""
gates.py — the gate table

Every named constant gate lives in one registry so the register kernels
(`instruct`) and the block layer (`ConstantGate`) see the same matrices.
Builtin gates are stored in the format the promotion table assigns them:

  Diagonal     Z, S, Sdag, T, Tdag
  Permutation  X, Y, SWAP, CNOT, CZ, Toffoli
  Sparse       P0, P1, Pu, Pd
  Dense        H
  Identity     I2

Parametric gates (Rx, Ry, Rz, shift, phase) are built on demand by
`gate_matrix`. Multi-qubit builtins follow the little-endian convention:
CNOT is controlled by its first qubit and targets its second.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from errors import DispatchError, ValidationError
from matrices import (
    DenseMat, DiagonalMat, IdentityMat, MatrixRepr, OpProps, PermMat, SparseMat, props,
)

_SQ2 = 1 / np.sqrt(2)


@dataclass(frozen=True)
class GateDef:
    name:    str
    matrix:  MatrixRepr
    props:   OpProps
    nqubits: int
    dagger:  str | None = None   # name of the adjoint partner, if not self


def _sparse2(entries: dict) -> SparseMat:
    rows, cols = zip(*entries.keys()) if entries else ((), ())
    return SparseMat(sp.csc_matrix((list(entries.values()), (rows, cols)), shape=(2, 2)))


def _builtin_table() -> dict[str, GateDef]:
    table = {
        "I2":      IdentityMat(2),
        "X":       PermMat([1, 0], [1, 1]),
        "Y":       PermMat([1, 0], [-1j, 1j]),
        "Z":       DiagonalMat([1, -1]),
        "H":       DenseMat([[_SQ2, _SQ2], [_SQ2, -_SQ2]]),
        "S":       DiagonalMat([1, 1j]),
        "Sdag":    DiagonalMat([1, -1j]),
        "T":       DiagonalMat([1, np.exp(1j * np.pi / 4)]),
        "Tdag":    DiagonalMat([1, np.exp(-1j * np.pi / 4)]),
        "SWAP":    PermMat([0, 2, 1, 3], np.ones(4)),
        "CNOT":    PermMat([0, 3, 2, 1], np.ones(4)),
        "CZ":      PermMat([0, 1, 2, 3], [1, 1, 1, -1]),
        "Toffoli": PermMat([0, 1, 2, 7, 4, 5, 6, 3], np.ones(8)),
        "P0":      _sparse2({(0, 0): 1}),
        "P1":      _sparse2({(1, 1): 1}),
        "Pu":      _sparse2({(0, 1): 1}),
        "Pd":      _sparse2({(1, 0): 1}),
    }
    partners = {"S": "Sdag", "Sdag": "S", "T": "Tdag", "Tdag": "T", "Pu": "Pd", "Pd": "Pu"}
    return {
        name: GateDef(name, m, props(m), m.dim.bit_length() - 1, partners.get(name))
        for name, m in table.items()
    }


_GATES: dict[str, GateDef] = _builtin_table()
BUILTIN_GATES = tuple(_GATES)
PARAMETRIC_GATES = ("Rx", "Ry", "Rz", "shift", "phase")


def register_gate(name: str, m: MatrixRepr) -> GateDef:
    """Bind a constant gate name to a matrix; properties are computed once here."""
    dim = m.dim
    if dim < 2 or dim & (dim - 1):
        raise ValidationError(f"gate '{name}' has dimension {dim}, not a power of 2")
    if name in PARAMETRIC_GATES:
        raise ValidationError(f"'{name}' is reserved for a parametric gate")
    if name in _GATES:
        logging.warning(f"gates: redefining gate '{name}'")
    gate = GateDef(name, m, props(m), dim.bit_length() - 1)
    _GATES[name] = gate
    logging.info(f"gates: registered '{name}' ({gate.nqubits} qubits, format {m.tag})")
    return gate


def unregister_gate(name: str) -> None:
    if name in BUILTIN_GATES:
        raise ValidationError(f"builtin gate '{name}' cannot be removed")
    _GATES.pop(name, None)


def lookup(name: str) -> GateDef:
    try:
        return _GATES[name]
    except KeyError:
        raise DispatchError(f"unknown gate '{name}'") from None


def is_gate(name: str) -> bool:
    return name in _GATES


def rx_mat(theta: float) -> DenseMat:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return DenseMat([[c, -1j * s], [-1j * s, c]])


def ry_mat(theta: float) -> DenseMat:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return DenseMat([[c, -s], [s, c]])


def rz_mat(theta: float) -> DiagonalMat:
    return DiagonalMat([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


def shift_mat(theta: float) -> DiagonalMat:
    return DiagonalMat([1, np.exp(1j * theta)])


def phase_mat(theta: float, dim: int = 2) -> DiagonalMat:
    return DiagonalMat(np.full(dim, np.exp(1j * theta)))


_PARAMETRIC = {
    "Rx":    rx_mat,
    "Ry":    ry_mat,
    "Rz":    rz_mat,
    "shift": shift_mat,
    "phase": phase_mat,
}


def gate_matrix(tag: str, *params: float) -> MatrixRepr:
    """Matrix for a gate tag; parametric tags take their angle as a parameter."""
    if tag in _PARAMETRIC:
        if len(params) != 1:
            raise ValidationError(f"gate '{tag}' takes one parameter, got {len(params)}")
        return _PARAMETRIC[tag](float(params[0]))
    if params:
        raise ValidationError(f"constant gate '{tag}' takes no parameters")
    return lookup(tag).matrix
