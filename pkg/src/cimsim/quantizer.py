"""Uniform quantization with learnable scale factors.

A quantizer is described by a :class:`QuantSpec` (bit-width, signedness,
sharing granularity) and a :class:`ScaleTensor` that maps every tensor
element to one positive scale value. Scales may be shared per layer, per
crossbar array, or per array column; the mapping is always explicit, so the
same functions serve all three granularities.

Besides the forward ops (``quantize`` / ``dequantize``) this module provides
the backward rules needed to train scales with gradient descent: the
straight-through estimator for the input path and the analytic step-size
gradient for the scale path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Granularity",
    "QuantSpec",
    "ScaleTensor",
    "round_half_away",
    "init_scales",
    "calibrate_scales",
    "quantize",
    "dequantize",
    "scale_grad",
    "scale_grad_local",
    "grad_scale_factor",
    "input_grad_ste",
]


class Granularity(Enum):
    """Scope over which one scale factor is shared."""

    LAYER = "layer"
    ARRAY = "array"
    COLUMN = "column"

    @classmethod
    def parse(cls, name: str) -> "Granularity":
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(
                f"unknown granularity {name!r}; expected one of "
                f"{[g.value for g in cls]}"
            ) from None


def round_half_away(z: np.ndarray) -> np.ndarray:
    """Round to the nearest integer with ties away from zero."""
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.floor(np.abs(z) + 0.5)


@dataclass(frozen=True)
class QuantSpec:
    """Integer code range of one quantizer."""

    bits: int
    signed: bool
    granularity: Granularity = Granularity.LAYER

    def __post_init__(self) -> None:
        min_bits = 2 if self.signed else 1
        if self.bits < min_bits:
            raise ValueError(
                f"bits={self.bits} too small for "
                f"{'signed' if self.signed else 'unsigned'} quantizer"
            )

    @property
    def q_neg(self) -> int:
        """Magnitude of the most negative code (0 for unsigned)."""
        return 2 ** (self.bits - 1) if self.signed else 0

    @property
    def q_pos(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1


def _expand_group_of(group_of: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a group map over the leading dims of ``shape`` to all of it."""
    g = np.asarray(group_of, dtype=np.int64)
    if g.shape == tuple(shape):
        return g
    if tuple(shape[: g.ndim]) != g.shape:
        raise ValueError(
            f"group map of shape {g.shape} does not cover tensor shape {tuple(shape)}"
        )
    g = g.reshape(g.shape + (1,) * (len(shape) - g.ndim))
    return np.broadcast_to(g, shape)


@dataclass
class ScaleTensor:
    """Positive scale values plus an element-to-scale-group map.

    ``group_of`` holds, for every element (or every element of the leading
    dimensions, with trailing dimensions sharing their prefix's group), the
    index of its scale in ``values``. Every group must be referenced by at
    least one element and every value must be strictly positive.
    """

    values: np.ndarray
    group_of: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.group_of = np.asarray(self.group_of, dtype=np.int64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("scale values must be a nonempty 1-D vector")
        if not np.all(np.isfinite(self.values)) or not np.all(self.values > 0):
            raise ValueError("scale values must be strictly positive and finite")
        if self.group_of.size == 0:
            raise ValueError("group map must be nonempty")
        if self.group_of.min() < 0 or self.group_of.max() >= self.values.size:
            raise ValueError("group map references scale indices out of range")
        refs = np.bincount(self.group_of.ravel(), minlength=self.values.size)
        if np.any(refs == 0):
            raise ValueError("every scale index must be referenced by >= 1 element")

    @property
    def n_groups(self) -> int:
        return int(self.values.size)

    def expand_groups(self, shape: tuple[int, ...]) -> np.ndarray:
        return _expand_group_of(self.group_of, shape)

    def per_element(self, shape: tuple[int, ...]) -> np.ndarray:
        """Scale value of every element of a ``shape``-d tensor."""
        return self.values[self.expand_groups(shape)]

    def group_sizes(self, shape: tuple[int, ...]) -> np.ndarray:
        """Number of elements of a ``shape``-d tensor in each group."""
        gids = self.expand_groups(shape)
        return np.bincount(gids.ravel(), minlength=self.n_groups)


def _group_reduce(gids: np.ndarray, values: np.ndarray, n: int, op: str) -> np.ndarray:
    flat_g = gids.ravel()
    flat_v = values.ravel()
    if op == "sum":
        return np.bincount(flat_g, weights=flat_v, minlength=n)
    if op == "max":
        out = np.zeros(n, dtype=np.float64)
        np.maximum.at(out, flat_g, flat_v)
        return out
    raise ValueError(op)


def init_scales(x: np.ndarray, spec: QuantSpec, group_of: np.ndarray) -> ScaleTensor:
    """Per-group step sizes from the 2*mean(|x|)/sqrt(q_pos) convention.

    All-zero groups get the identity scale 1 so dead or padded columns never
    divide by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot initialize scales from an empty tensor")
    gids = _expand_group_of(group_of, x.shape)
    n = int(gids.max()) + 1
    counts = np.bincount(gids.ravel(), minlength=n)
    if np.any(counts == 0):
        raise ValueError("empty scale group")
    means = _group_reduce(gids, np.abs(x), n, "sum") / counts
    s = 2.0 * means / math.sqrt(spec.q_pos)
    s = np.where(s > 0.0, s, 1.0)
    return ScaleTensor(s, np.asarray(group_of, dtype=np.int64))


def calibrate_scales(x: np.ndarray, spec: QuantSpec, group_of: np.ndarray) -> ScaleTensor:
    """Saturating calibration: each group's largest |x| maps exactly to q_pos.

    Unlike :func:`init_scales` (a training initialization heuristic), this
    guarantees that every group with any nonzero element uses its full code
    range without clipping.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate scales from an empty tensor")
    gids = _expand_group_of(group_of, x.shape)
    n = int(gids.max()) + 1
    counts = np.bincount(gids.ravel(), minlength=n)
    if np.any(counts == 0):
        raise ValueError("empty scale group")
    gmax = _group_reduce(gids, np.abs(x), n, "max")
    s = gmax / spec.q_pos
    s = np.where(s > 0.0, s, 1.0)
    return ScaleTensor(s, np.asarray(group_of, dtype=np.int64))


def quantize(x: np.ndarray, scales: ScaleTensor, spec: QuantSpec) -> np.ndarray:
    """Integer codes clamp(round(x/s), -q_neg, q_pos), ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    s = scales.per_element(x.shape)
    q = round_half_away(x / s)
    return np.clip(q, -spec.q_neg, spec.q_pos).astype(np.int64)


def dequantize(q: np.ndarray, scales: ScaleTensor) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * scales.per_element(q.shape)


def scale_grad_local(z: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Elementwise d(s*clamp(round(z)))/ds at z = x/s.

    In the pass band the straight-through treatment of rounding leaves the
    negative rounding residual round(z) - z; at the clipped ends the true
    derivative -q_neg / q_pos applies.
    """
    z = np.asarray(z, dtype=np.float64)
    inner = round_half_away(z) - z
    local = np.where(z >= spec.q_pos, float(spec.q_pos), inner)
    return np.where(z <= -spec.q_neg, float(-spec.q_neg), local)


def grad_scale_factor(spec: QuantSpec, group_sizes: np.ndarray) -> np.ndarray:
    """Step-size gradient scaling g = 1/sqrt(N_g * q_pos) per group."""
    return 1.0 / np.sqrt(np.asarray(group_sizes, dtype=np.float64) * spec.q_pos)


def scale_grad(
    x: np.ndarray, scales: ScaleTensor, spec: QuantSpec, upstream: np.ndarray
) -> np.ndarray:
    """Per-group gradient of the fake-quantized output w.r.t. its scale.

    Returns g * sum_i upstream[i] * local[i] for each group, with
    g = 1/sqrt(N_g * q_pos).
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), x.shape)
    s = scales.per_element(x.shape)
    local = scale_grad_local(x / s, spec)
    gids = scales.expand_groups(x.shape)
    n = scales.n_groups
    sums = _group_reduce(gids, upstream * local, n, "sum")
    sizes = np.bincount(gids.ravel(), minlength=n)
    return sums * grad_scale_factor(spec, sizes)


def input_grad_ste(
    x: np.ndarray, scales: ScaleTensor, spec: QuantSpec, upstream: np.ndarray
) -> np.ndarray:
    """Straight-through input gradient: pass where -q_neg <= x/s <= q_pos."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), x.shape)
    z = x / scales.per_element(x.shape)
    mask = (z >= -spec.q_neg) & (z <= spec.q_pos)
    return np.where(mask, upstream, 0.0)
