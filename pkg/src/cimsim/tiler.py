"""Mapping of convolution layers onto fixed-size crossbar arrays.

Each kernel is stretched into a column segment of length K*K; a tile of
``channels_per_array = floor(rows / K^2)`` input channels therefore fits one
array's word lines with every stretched kernel kept whole (leftover rows stay
unused rather than splitting a kernel across arrays). Output channels tile
the bit lines. Every array then computes an ordinary (group) convolution
over its channel slice, which lets all arrays be evaluated with batched
matrix multiplies against a shared im2col patch matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ArrayShape",
    "TilingPlan",
    "plan_tiling",
    "map_weights",
    "column_index",
    "im2col_patches",
    "col2im",
    "im2col_reference",
]


@dataclass(frozen=True)
class ArrayShape:
    """Word lines (rows) x bit lines (cols) of one crossbar array."""

    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be >= 1")


@dataclass(frozen=True)
class TilingPlan:
    """Deterministic assignment of a conv layer to a grid of arrays.

    Arrays are numbered row-major: ``array_id = rt * n_array_cols + ct`` where
    ``rt`` indexes input-channel (row) tiles and ``ct`` output-channel
    (column) tiles. Trailing tiles may be partially filled; the unfilled
    region is zero-padded.
    """

    c_in: int
    c_out: int
    kernel: int
    array: ArrayShape
    channels_per_array: int
    oc_per_array: int
    n_array_rows: int
    n_array_cols: int

    @property
    def n_array(self) -> int:
        return self.n_array_rows * self.n_array_cols

    def input_range(self, rt: int) -> tuple[int, int]:
        if not 0 <= rt < self.n_array_rows:
            raise IndexError(f"row tile {rt} out of range")
        lo = rt * self.channels_per_array
        return lo, min(lo + self.channels_per_array, self.c_in)

    def output_range(self, ct: int) -> tuple[int, int]:
        if not 0 <= ct < self.n_array_cols:
            raise IndexError(f"column tile {ct} out of range")
        lo = ct * self.oc_per_array
        return lo, min(lo + self.oc_per_array, self.c_out)

    def array_id(self, rt: int, ct: int) -> int:
        if not (0 <= rt < self.n_array_rows and 0 <= ct < self.n_array_cols):
            raise IndexError(f"tile ({rt}, {ct}) out of range")
        return rt * self.n_array_cols + ct

    def tile_of(self, array: int) -> tuple[int, int]:
        if not 0 <= array < self.n_array:
            raise IndexError(f"array {array} out of range")
        return divmod(array, self.n_array_cols)[0], array % self.n_array_cols

    def mapped_oc(self, array: int) -> int:
        """Output channels actually mapped (non-padded) in this array."""
        _, ct = self.tile_of(array)
        lo, hi = self.output_range(ct)
        return hi - lo

    def mapped_channels(self, array: int) -> int:
        rt, _ = self.tile_of(array)
        lo, hi = self.input_range(rt)
        return hi - lo

    def mapped_oc_total(self) -> int:
        return sum(self.mapped_oc(a) for a in range(self.n_array))

    def total_columns(self, n_split: int) -> int:
        """Distinct physical columns: one per (array, mapped oc, bit split)."""
        return n_split * self.mapped_oc_total()

    def column_offsets(self, n_split: int) -> np.ndarray:
        """Start of each array's column-id block, plus the total as a sentinel."""
        offs = np.zeros(self.n_array + 1, dtype=np.int64)
        for a in range(self.n_array):
            offs[a + 1] = offs[a] + self.mapped_oc(a) * n_split
        return offs


def plan_tiling(c_in: int, c_out: int, kernel: int, shape: ArrayShape) -> TilingPlan:
    """Plan the array grid for one conv layer; fails if a kernel cannot fit."""
    if c_in < 1 or c_out < 1 or kernel < 1:
        raise ValueError("layer dimensions must be >= 1")
    if kernel * kernel > shape.rows:
        raise ValueError(
            f"kernel does not fit array rows: K^2={kernel * kernel} > rows={shape.rows}"
        )
    channels_per_array = min(shape.rows // (kernel * kernel), c_in)
    oc_per_array = min(shape.cols, c_out)
    return TilingPlan(
        c_in=c_in,
        c_out=c_out,
        kernel=kernel,
        array=shape,
        channels_per_array=channels_per_array,
        oc_per_array=oc_per_array,
        n_array_rows=math.ceil(c_in / channels_per_array),
        n_array_cols=math.ceil(c_out / oc_per_array),
    )


def map_weights(w: np.ndarray, plan: TilingPlan) -> np.ndarray:
    """Per-array weight blocks [n_array, oc_per_array, channels_per_array, K, K].

    Each block is a valid 4-D convolution weight for its array's channel
    slice; regions past the layer's dimensions are exactly zero.
    """
    w = np.asarray(w)
    k = plan.kernel
    expected = (plan.c_out, plan.c_in, k, k)
    if w.shape != expected:
        raise ValueError(f"weight shape {w.shape} does not match plan {expected}")
    blocks = np.zeros(
        (plan.n_array, plan.oc_per_array, plan.channels_per_array, k, k), dtype=w.dtype
    )
    for a in range(plan.n_array):
        rt, ct = plan.tile_of(a)
        ic0, ic1 = plan.input_range(rt)
        oc0, oc1 = plan.output_range(ct)
        blocks[a, : oc1 - oc0, : ic1 - ic0] = w[oc0:oc1, ic0:ic1]
    return blocks


def column_index(
    plan: TilingPlan, array: int, out_channel: int, split: int, n_split: int
) -> int:
    """Stable global id of one physical column.

    ``out_channel`` is local to the array (0 .. mapped_oc-1). Ids enumerate
    (array, out_channel, split) with split fastest, so the very first column
    of the first array is id 0 and ids are bijective over all
    ``plan.total_columns(n_split)`` columns.
    """
    if n_split < 1:
        raise ValueError("n_split must be >= 1")
    if not 0 <= array < plan.n_array:
        raise IndexError(f"array {array} out of range")
    if not 0 <= out_channel < plan.mapped_oc(array):
        raise IndexError(
            f"output channel {out_channel} out of range for array {array}"
        )
    if not 0 <= split < n_split:
        raise IndexError(f"split {split} out of range")
    offs = plan.column_offsets(n_split)
    return int(offs[array] + out_channel * n_split + split)


def _conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError("convolution output would be empty")
    return out


def im2col_patches(
    x: np.ndarray, kernel: int, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Patch matrix [B, C*K*K, H_out*W_out]; dtype follows the input."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected input [B, C, H, W], got shape {x.shape}")
    b, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, pad)
    wo = _conv_out_size(w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.zeros((b, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
            ]
    return cols.reshape(b, c * kernel * kernel, ho * wo)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`im2col_patches`: scatter-add patches back to [B,C,H,W]."""
    b, c, h, w = x_shape
    ho = _conv_out_size(h, kernel, stride, pad)
    wo = _conv_out_size(w, kernel, stride, pad)
    cols = np.asarray(cols).reshape(b, c, kernel, kernel, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            xp[
                :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
            ] += cols[:, :, ki, kj]
    return xp[:, :, pad : pad + h, pad : pad + w]


def im2col_reference(
    w: np.ndarray, x: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Convolution by explicit patch-matrix x weight-matrix multiplication.

    Exact in integer dtypes; the equivalence oracle for the tiled pipeline.
    """
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"expected square kernel weights [Cout, Cin, K, K], got {w.shape}")
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"input {x.shape} incompatible with weights {w.shape}")
    c_out, _, kernel, _ = w.shape
    b, _, h, wd = x.shape
    ho = _conv_out_size(h, kernel, stride, pad)
    wo = _conv_out_size(wd, kernel, stride, pad)
    cols = im2col_patches(x, kernel, stride, pad)
    wmat = w.reshape(c_out, -1)
    out = np.einsum("or,brl->bol", wmat, cols)
    return out.reshape(b, c_out, ho, wo)
