"""
bitstring.py — little-endian bit strings and control masks

Qubit 1 is the least significant bit of a basis index, and every public
function takes 1-based qubit locations. Text renderings put qubit 1 in the
rightmost character: the basis index 2 on four qubits prints as "0010 (2)".
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

import config
from errors import QubitRangeError, ValidationError


@dataclass(frozen=True, slots=True)
class BitStr:
    value: int
    nbits: int

    def __post_init__(self):
        if not 1 <= self.nbits <= config.MAX_BITS:
            raise ValidationError(
                f"bit string width {self.nbits} outside 1..{config.MAX_BITS}"
            )
        if not 0 <= self.value < (1 << self.nbits):
            raise ValidationError(
                f"value {self.value} does not fit in {self.nbits} bits"
            )

    @property
    def digits(self) -> str:
        return f"{self.value:0{self.nbits}b}"

    def __str__(self) -> str:
        return f"{self.digits} (2)"

    def __int__(self) -> int:
        return self.value

    def __iter__(self):
        return iter(to_bits(self))

    def __len__(self) -> int:
        return self.nbits

    @classmethod
    def parse(cls, text: str) -> "BitStr":
        """Read "0010" with the rightmost character as qubit 1."""
        digits = text.strip().split(" ")[0]
        if not digits or any(c not in "01" for c in digits):
            raise ValidationError(f"'{text}' is not a binary string")
        return cls(int(digits, 2), len(digits))


def bit_at(b: BitStr, i: int) -> int:
    if not 1 <= i <= b.nbits:
        raise QubitRangeError(f"qubit {i} outside 1..{b.nbits}")
    return (b.value >> (i - 1)) & 1


def to_bits(b: BitStr) -> list[int]:
    return [(b.value >> k) & 1 for k in range(b.nbits)]


def from_bits(bits: Sequence[int]) -> BitStr:
    if len(bits) == 0:
        raise ValidationError("from_bits needs at least one bit")
    value = 0
    for k, bit in enumerate(bits):
        if bit not in (0, 1):
            raise ValidationError(f"entry {k + 1} is {bit!r}, expected 0 or 1")
        value |= int(bit) << k
    return BitStr(value, len(bits))


def breflect(b: BitStr) -> BitStr:
    """Reverse the bit order (qubit 1 swaps with qubit nbits)."""
    return from_bits(list(reversed(to_bits(b))))


def bmask(locs: Iterable[int]) -> int:
    mask = 0
    for loc in locs:
        mask |= 1 << (loc - 1)
    return mask


def ctrl_match(index: int, ctrl_locs: Sequence[int], ctrl_config: Sequence[int]) -> bool:
    if len(ctrl_locs) != len(ctrl_config):
        raise ValidationError(
            f"{len(ctrl_locs)} control locations but {len(ctrl_config)} configurations"
        )
    return all(((index >> (loc - 1)) & 1) == cfg for loc, cfg in zip(ctrl_locs, ctrl_config))


# ── Vectorised helpers for the matrix and kernel layers ───────────────────────
def gather_bits(indices: np.ndarray, locs: Sequence[int]) -> np.ndarray:
    """Local index Σ_k bit(locs[k]) · 2^k for every basis index."""
    out = np.zeros_like(indices)
    for k, loc in enumerate(locs):
        out |= ((indices >> (loc - 1)) & 1) << k
    return out


def scatter_bits(indices: np.ndarray, locs: Sequence[int], local: np.ndarray) -> np.ndarray:
    """Overwrite the bits at `locs` of each index with the bits of `local` (broadcasts)."""
    out = indices & ~bmask(locs)
    for k, loc in enumerate(locs):
        out = out | (((local >> k) & 1) << (loc - 1))
    return out


def ctrl_mask_array(indices: np.ndarray, ctrl_locs: Sequence[int], ctrl_config: Sequence[int]) -> np.ndarray:
    """Boolean vector: ctrl_match over every basis index."""
    if len(ctrl_locs) != len(ctrl_config):
        raise ValidationError(
            f"{len(ctrl_locs)} control locations but {len(ctrl_config)} configurations"
        )
    hit = np.ones(indices.shape, dtype=bool)
    for loc, cfg in zip(ctrl_locs, ctrl_config):
        hit &= ((indices >> (loc - 1)) & 1) == cfg
    return hit
