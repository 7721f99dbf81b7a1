"""Digit-plane decomposition of signed weight codes across memory cells.

A ``b``-bit signed code is stored across ``s = b/c`` cells of ``c`` bits
each. The decomposition used here is the base-2^c digit expansion of the
two's-complement encoding with a signed top digit:

    code = sum_{k<s-1} plane[k] * 2^(c*k) + plane[s-1] * 2^(c*(s-1))

with plane[k] in [0, 2^c - 1] for the low digits and plane[s-1] in
[-2^(c-1), 2^(c-1) - 1]. This encoding is linear, so per-plane dot products
recombine exactly by shift-and-add with no correction terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["SplitPlanes", "split", "recombine", "shift_add"]


@dataclass
class SplitPlanes:
    """Digit planes of one tensor of signed codes."""

    planes: list[np.ndarray]
    bits: int
    cell_bits: int

    @property
    def n_split(self) -> int:
        return self.bits // self.cell_bits


def _check_split_args(bits: int, cell_bits: int) -> None:
    if bits < 1 or cell_bits < 1:
        raise ValueError("bits and cell_bits must be positive")
    if bits % cell_bits != 0:
        raise ValueError(f"cell_bits={cell_bits} does not divide bits={bits}")


def split(codes: np.ndarray, bits: int, cell_bits: int) -> SplitPlanes:
    """Decompose signed ``bits``-wide codes into base-2^cell_bits digit planes."""
    _check_split_args(bits, cell_bits)
    codes = np.asarray(codes)
    if not np.issubdtype(codes.dtype, np.integer):
        raise TypeError(f"codes must be an integer tensor, got dtype {codes.dtype}")
    codes = codes.astype(np.int64)
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise ValueError(f"codes out of signed {bits}-bit range [{lo}, {hi}]")
    n_split = bits // cell_bits
    mask = (1 << cell_bits) - 1
    unsigned = codes & ((1 << bits) - 1)
    planes = [(unsigned >> (cell_bits * k)) & mask for k in range(n_split)]
    top = planes[-1]
    planes[-1] = np.where(top >= 1 << (cell_bits - 1), top - (1 << cell_bits), top)
    return SplitPlanes(planes=planes, bits=bits, cell_bits=cell_bits)


def recombine(sp: SplitPlanes) -> np.ndarray:
    """Exact inverse of :func:`split`."""
    out = np.zeros_like(sp.planes[0], dtype=np.int64)
    for k, plane in enumerate(sp.planes):
        out = out + plane.astype(np.int64) * (1 << (sp.cell_bits * k))
    return out


def shift_add(psums_per_split: Sequence[np.ndarray], cell_bits: int) -> np.ndarray:
    """Accumulate per-split partial sums as sum_k psums[k] * 2^(c*k).

    Exact for unquantized per-split partial sums by linearity of the digit
    decomposition. Accumulation order is ascending split index.
    """
    if len(psums_per_split) == 0:
        raise ValueError("need at least one split")
    out = np.asarray(psums_per_split[0]).copy()
    for k in range(1, len(psums_per_split)):
        out = out + np.asarray(psums_per_split[k]) * (2 ** (cell_bits * k))
    return out
