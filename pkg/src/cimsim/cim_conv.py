"""The full crossbar convolution pipeline for one layer.

Order of operations, fixed for reproducibility:

1. quantize activations once (layer-wise, unsigned) at entry;
2. duplicate the weight per bit-split and quantize each duplicate with its
   own scale groups (layer / array / column granularity);
3. extract each duplicate's digit plane and map it onto the array grid;
4. one batched matrix multiply evaluates every array's integer partial sums
   against the shared im2col patch matrix;
5. quantize partial sums per column (signed), count clip events;
6. dequantize with the per-column fused factor s_w * s_p (formed once);
7. accumulate across row tiles (ascending tile index), then shift-and-add
   across splits (ascending split index), then apply the activation scale.

With partial-sum quantization disabled the integer path is exact: all
intermediate values are integers represented exactly in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .bitsplit import split
from .quantizer import (
    Granularity,
    QuantSpec,
    ScaleTensor,
    calibrate_scales,
    quantize,
    round_half_away,
)
from .tiler import ArrayShape, TilingPlan, im2col_patches, plan_tiling

__all__ = [
    "CimLayerConfig",
    "CimTrace",
    "ColumnTable",
    "column_table",
    "column_scale_group",
    "weight_group_map",
    "psum_group_map",
    "forward",
    "quantize_psums",
    "dequantize_fused",
    "layerwise_weight_path",
    "reference_forward",
    "calibrate_layer",
    "accumulate_split_psums",
]


@dataclass(frozen=True)
class CimLayerConfig:
    """Quantization and array settings of one convolution layer."""

    w_bits: int
    a_bits: int
    p_bits: int
    cell_bits: int
    array: ArrayShape
    w_gran: Granularity = Granularity.LAYER
    p_gran: Granularity = Granularity.LAYER
    stride: int = 1
    pad: int = 0

    def __post_init__(self) -> None:
        if self.w_bits < 2 or self.p_bits < 2:
            raise ValueError("weight and partial-sum bit-widths must be >= 2")
        if self.a_bits < 1:
            raise ValueError("activation bit-width must be >= 1")
        if self.cell_bits < 1:
            raise ValueError("cell bit-width must be >= 1")
        if self.w_bits % self.cell_bits != 0:
            raise ValueError(
                f"cell_bits={self.cell_bits} does not divide w_bits={self.w_bits}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ValueError("invalid stride/padding")

    @property
    def n_split(self) -> int:
        return self.w_bits // self.cell_bits


@dataclass
class ColumnTable:
    """Column-id bookkeeping for one (plan, n_split) pair.

    ``colid`` indexes the pipeline's [split, row tile, col tile, oc slot]
    layout; padded output-channel slots carry -1.
    """

    colid: np.ndarray
    mask: np.ndarray
    n_columns: int
    array_of_col: np.ndarray
    oc_of_col: np.ndarray
    split_of_col: np.ndarray


def column_table(plan: TilingPlan, n_split: int) -> ColumnTable:
    shape = (n_split, plan.n_array_rows, plan.n_array_cols, plan.oc_per_array)
    colid = np.full(shape, -1, dtype=np.int64)
    offs = plan.column_offsets(n_split)
    n_cols = int(offs[-1])
    array_of_col = np.zeros(n_cols, dtype=np.int64)
    oc_of_col = np.zeros(n_cols, dtype=np.int64)
    split_of_col = np.zeros(n_cols, dtype=np.int64)
    splits = np.arange(n_split, dtype=np.int64)
    for a in range(plan.n_array):
        rt, ct = plan.tile_of(a)
        onc = plan.mapped_oc(a)
        ids = offs[a] + np.arange(onc, dtype=np.int64)[None, :] * n_split + splits[:, None]
        colid[:, rt, ct, :onc] = ids
        array_of_col[offs[a] : offs[a + 1]] = a
        oc_of_col[offs[a] : offs[a + 1]] = np.repeat(np.arange(onc), n_split)
        split_of_col[offs[a] : offs[a + 1]] = np.tile(splits, onc)
    return ColumnTable(
        colid=colid,
        mask=colid >= 0,
        n_columns=n_cols,
        array_of_col=array_of_col,
        oc_of_col=oc_of_col,
        split_of_col=split_of_col,
    )


def column_scale_group(plan: TilingPlan, gran: Granularity, n_split: int) -> np.ndarray:
    """Scale-group index of every column id under the given granularity."""
    table = column_table(plan, n_split)
    if gran is Granularity.LAYER:
        return np.zeros(table.n_columns, dtype=np.int64)
    if gran is Granularity.ARRAY:
        return table.array_of_col.copy()
    return np.arange(table.n_columns, dtype=np.int64)


def expected_scale_groups(plan: TilingPlan, gran: Granularity, n_split: int) -> int:
    if gran is Granularity.LAYER:
        return 1
    if gran is Granularity.ARRAY:
        return plan.n_array
    return plan.total_columns(n_split)


def weight_group_map(
    plan: TilingPlan, gran: Granularity, n_split: int
) -> np.ndarray:
    """Group map over the duplicated weight tensor [n_split, Cout, Cin, K, K].

    Column granularity keys each duplicate's elements by the physical column
    (array, local output channel, split) they occupy, so every bit-split
    column owns an independent scale.
    """
    k = plan.kernel
    shape = (n_split, plan.c_out, plan.c_in, k, k)
    gmap = np.zeros(shape, dtype=np.int64)
    if gran is Granularity.LAYER:
        return gmap
    table = column_table(plan, n_split)
    for a in range(plan.n_array):
        rt, ct = plan.tile_of(a)
        ic0, ic1 = plan.input_range(rt)
        oc0, oc1 = plan.output_range(ct)
        if gran is Granularity.ARRAY:
            gmap[:, oc0:oc1, ic0:ic1] = a
        else:
            ids = table.colid[:, rt, ct, : oc1 - oc0]  # [n_split, oc]
            gmap[:, oc0:oc1, ic0:ic1] = ids[:, :, None, None, None]
    return gmap


def psum_group_map(plan: TilingPlan, gran: Granularity, n_split: int) -> np.ndarray:
    """Group map over column ids for partial-sum scales."""
    return column_scale_group(plan, gran, n_split)


@dataclass
class CimTrace:
    """Per-column observations from one forward pass."""

    n_columns: int
    column_array: np.ndarray
    column_split: np.ndarray
    w_scale: np.ndarray
    p_scale: np.ndarray
    sample_count: np.ndarray
    clip_count: np.ndarray
    psum_min: np.ndarray
    psum_max: np.ndarray
    dequant_mults: int
    samples: dict[int, np.ndarray] | None = None

    def validate(self) -> None:
        if np.any(self.clip_count > self.sample_count):
            raise AssertionError("clip counts exceed sample counts")
        if self.column_array.shape != (self.n_columns,):
            raise AssertionError("trace column arrays inconsistent")


def _live_dequant_mults(table: ColumnTable, p_gran: Granularity) -> int:
    """Multiplication count implied by the live column structure.

    One per column for column-wise psums; one per distinct
    (array, output channel) after intra-array shift-and-add for array-wise;
    a single multiplication after full accumulation for layer-wise.
    """
    if p_gran is Granularity.LAYER:
        return 1
    if p_gran is Granularity.ARRAY:
        pairs = table.array_of_col * (table.oc_of_col.max() + 1) + table.oc_of_col
        return int(np.unique(pairs).size)
    return int(np.unique(table.colid[table.mask]).size)


def quantize_psums(
    psums_per_column: np.ndarray, scales_p: ScaleTensor, p_bits: int
) -> tuple[np.ndarray, np.ndarray]:
    """Signed quantization of per-column partial sums, with clip counts.

    ``psums_per_column`` is laid out [n_columns, ...samples]; returns int64
    codes of the same shape and the per-column clip-event count.
    """
    pspec = QuantSpec(p_bits, signed=True)
    psums = np.asarray(psums_per_column, dtype=np.float64)
    s = scales_p.per_element(psums.shape)
    zq = round_half_away(psums / s)
    clips = (zq > pspec.q_pos) | (zq < -pspec.q_neg)
    codes = np.clip(zq, -pspec.q_neg, pspec.q_pos).astype(np.int64)
    axes = tuple(range(1, psums.ndim))
    clip_count = clips.sum(axis=axes) if axes else clips.astype(np.int64)
    return codes, clip_count


def dequantize_fused(
    qpsums: np.ndarray, w_scale: np.ndarray, p_scale: np.ndarray
) -> np.ndarray:
    """Apply the pre-multiplied factor s_w * s_p, formed once and reused."""
    fused = np.asarray(w_scale, dtype=np.float64) * np.asarray(p_scale, dtype=np.float64)
    return np.asarray(qpsums, dtype=np.float64) * fused


def _check_scales(
    scales: ScaleTensor, plan: TilingPlan, gran: Granularity, n_split: int, what: str
) -> None:
    want = expected_scale_groups(plan, gran, n_split)
    if scales.n_groups != want:
        raise ValueError(
            f"{what} scales have {scales.n_groups} groups but granularity "
            f"{gran.value} over this plan needs {want}"
        )


def forward(
    x: np.ndarray,
    w: np.ndarray,
    cfg: CimLayerConfig,
    scales_w: ScaleTensor,
    scales_p: ScaleTensor | None = None,
    scales_a: ScaleTensor | None = None,
    *,
    theta: np.ndarray | None = None,
    collect_samples: bool = False,
    return_cache: bool = False,
):
    """Run the tiled/split/quantized pipeline; returns (output, trace[, cache]).

    ``scales_p=None`` disables partial-sum quantization (the integer partial
    sums pass straight to dequantization). ``scales_a=None`` treats the input
    as already-quantized integer codes with unit scale. ``theta`` injects
    multiplicative log-normal device variation: shape [Cout,Cin,K,K] perturbs
    whole weights (all cells of a weight share the factor), shape
    [n_split,Cout,Cin,K,K] perturbs each cell independently.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected input [B, C, H, W], got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"expected weights [Cout, Cin, K, K], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input channels {x.shape[1]} != weight channels {w.shape[1]}")
    c_out, c_in, k, _ = w.shape
    plan = plan_tiling(c_in, c_out, k, cfg.array)
    n_split = cfg.n_split
    table = column_table(plan, n_split)
    wspec = QuantSpec(cfg.w_bits, signed=True, granularity=cfg.w_gran)
    pspec = QuantSpec(cfg.p_bits, signed=True, granularity=cfg.p_gran)
    _check_scales(scales_w, plan, cfg.w_gran, n_split, "weight")
    if scales_p is not None:
        _check_scales(scales_p, plan, cfg.p_gran, n_split, "partial-sum")

    # activations: quantized once at entry, one layer-wide scale
    if scales_a is not None:
        if scales_a.n_groups != 1:
            raise ValueError("activation scales must be a single layer-wise group")
        aspec = QuantSpec(cfg.a_bits, signed=False)
        acodes = quantize(x, scales_a, aspec).astype(np.float64)
        s_a = float(scales_a.values[0])
    else:
        aspec = None
        acodes = x
        s_a = 1.0

    # per-split duplicates -> codes -> digit planes
    w_dup = np.broadcast_to(w, (n_split,) + w.shape)
    codes = quantize(w_dup, scales_w, wspec)
    planes = np.empty((n_split,) + w.shape, dtype=np.float64)
    for kk in range(n_split):
        planes[kk] = split(codes[kk], cfg.w_bits, cfg.cell_bits).planes[kk]
    if theta is not None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape == w.shape:
            planes = planes * np.exp(theta)[None]
        elif theta.shape == (n_split,) + w.shape:
            planes = planes * np.exp(theta)
        else:
            raise ValueError(
                f"theta shape {theta.shape} matches neither weight nor per-cell layout"
            )

    # tile weights and patches; one broadcast matmul evaluates every array
    rows = plan.channels_per_array * k * k
    n_rt, n_ct, opa = plan.n_array_rows, plan.n_array_cols, plan.oc_per_array
    w_tiles = np.zeros((n_split, n_rt, n_ct, opa, rows), dtype=np.float64)
    for rt in range(n_rt):
        ic0, ic1 = plan.input_range(rt)
        seg_rows = (ic1 - ic0) * k * k
        for ct in range(n_ct):
            oc0, oc1 = plan.output_range(ct)
            w_tiles[:, rt, ct, : oc1 - oc0, :seg_rows] = planes[
                :, oc0:oc1, ic0:ic1
            ].reshape(n_split, oc1 - oc0, seg_rows)

    cols = im2col_patches(acodes, k, cfg.stride, cfg.pad)
    batch = x.shape[0]
    n_pos = cols.shape[2]
    patches = np.zeros((n_rt, rows, batch * n_pos), dtype=np.float64)
    for rt in range(n_rt):
        ic0, ic1 = plan.input_range(rt)
        seg = cols[:, ic0 * k * k : ic1 * k * k, :]
        patches[rt, : (ic1 - ic0) * k * k] = seg.transpose(1, 0, 2).reshape(
            (ic1 - ic0) * k * k, batch * n_pos
        )

    psums = np.matmul(w_tiles, patches[None, :, None])  # [s, n_rt, n_ct, opa, B*L]

    # per-column applied scales (padded slots keep identity scales)
    w_group_of_col = column_scale_group(plan, cfg.w_gran, n_split)
    w_col = np.ones(table.colid.shape, dtype=np.float64)
    w_col[table.mask] = scales_w.values[w_group_of_col[table.colid[table.mask]]]
    p_col = np.ones(table.colid.shape, dtype=np.float64)
    if scales_p is not None:
        p_group_of_col = column_scale_group(plan, cfg.p_gran, n_split)
        p_col[table.mask] = scales_p.values[p_group_of_col[table.colid[table.mask]]]
        z = psums / p_col[..., None]
        zq = round_half_away(z)
        clip_mask = (zq > pspec.q_pos) | (zq < -pspec.q_neg)
        pcodes = np.clip(zq, -pspec.q_neg, pspec.q_pos)
    else:
        pcodes = psums
        clip_mask = np.zeros(psums.shape, dtype=bool)

    fused = w_col * p_col
    deq = dequantize_fused(pcodes, w_col[..., None], p_col[..., None])
    acc = deq.sum(axis=1)  # row tiles, ascending
    out_ct = np.zeros(acc.shape[1:], dtype=np.float64)
    for kk in range(n_split):  # splits, ascending
        out_ct = out_ct + acc[kk] * (2.0 ** (cfg.cell_bits * kk))

    y0 = np.zeros((c_out, batch * n_pos), dtype=np.float64)
    for ct in range(n_ct):
        oc0, oc1 = plan.output_range(ct)
        y0[oc0:oc1] = out_ct[ct, : oc1 - oc0]
    ho = (x.shape[2] + 2 * cfg.pad - k) // cfg.stride + 1
    wo = (x.shape[3] + 2 * cfg.pad - k) // cfg.stride + 1
    y0 = y0.reshape(c_out, batch, ho, wo).transpose(1, 0, 2, 3)
    out = y0 * s_a

    # trace
    cid = table.colid[table.mask]
    n_cols = table.n_columns
    col_psums = psums[table.mask]
    w_scale_arr = np.empty(n_cols)
    w_scale_arr[cid] = w_col[table.mask]
    p_scale_arr = np.empty(n_cols)
    p_scale_arr[cid] = p_col[table.mask]
    pmin = np.empty(n_cols)
    pmin[cid] = col_psums.min(axis=1)
    pmax = np.empty(n_cols)
    pmax[cid] = col_psums.max(axis=1)
    clip_count = np.zeros(n_cols, dtype=np.int64)
    clip_count[cid] = clip_mask[table.mask].sum(axis=1)
    samples = None
    if collect_samples:
        samples = {int(c): col_psums[i].copy() for i, c in enumerate(cid)}
    trace = CimTrace(
        n_columns=n_cols,
        column_array=table.array_of_col.copy(),
        column_split=table.split_of_col.copy(),
        w_scale=w_scale_arr,
        p_scale=p_scale_arr,
        sample_count=np.full(n_cols, batch * n_pos, dtype=np.int64),
        clip_count=clip_count,
        psum_min=pmin,
        psum_max=pmax,
        dequant_mults=_live_dequant_mults(table, cfg.p_gran),
        samples=samples,
    )
    trace.validate()

    if not return_cache:
        return out, trace
    cache: dict[str, Any] = {
        "cfg": cfg,
        "plan": plan,
        "table": table,
        "x": x,
        "x_shape": x.shape,
        "acodes": acodes,
        "s_a": s_a,
        "scales_a": scales_a,
        "aspec": aspec,
        "w": w,
        "codes": codes,
        "scales_w": scales_w,
        "wspec": wspec,
        "scales_p": scales_p,
        "pspec": pspec,
        "cols": cols,
        "patches": patches,
        "w_tiles": w_tiles,
        "psums": psums,
        "pcodes": pcodes,
        "clip_mask": clip_mask,
        "w_col": w_col,
        "p_col": p_col,
        "fused": fused,
        "y0": y0,
        "n_pos": n_pos,
        "out_hw": (ho, wo),
        "w_group_of_col": w_group_of_col,
    }
    return out, trace, cache


def accumulate_split_psums(cache: dict) -> np.ndarray:
    """Per-split integer outputs before any scaling: [n_split, B, Cout, Ho, Wo].

    Sums each split's raw partial sums over row tiles and reassembles the
    output-channel axis; in the no-variation case the result is exactly the
    integer convolution of that split's digit plane with the activation codes.
    """
    plan: TilingPlan = cache["plan"]
    psums = cache["psums"]
    n_split = psums.shape[0]
    batch = cache["x_shape"][0]
    ho, wo = cache["out_hw"]
    acc = psums.sum(axis=1)  # over row tiles
    out = np.zeros((n_split, plan.c_out, batch * cache["n_pos"]), dtype=np.float64)
    for ct in range(plan.n_array_cols):
        oc0, oc1 = plan.output_range(ct)
        out[:, oc0:oc1] = acc[:, ct, : oc1 - oc0]
    return out.reshape(n_split, plan.c_out, batch, ho, wo).transpose(0, 2, 1, 3, 4)


def layerwise_weight_path(
    x: np.ndarray,
    w: np.ndarray,
    cfg: CimLayerConfig,
    s_w: float,
    scales_p: ScaleTensor | None = None,
    scales_a: ScaleTensor | None = None,
    **kwargs,
):
    """Baseline: a single layer-wide weight scale with the same psum pipeline."""
    cfg_layer = replace(cfg, w_gran=Granularity.LAYER)
    scales_w = ScaleTensor(np.array([float(s_w)]), np.zeros((), dtype=np.int64))
    return forward(x, w, cfg_layer, scales_w, scales_p, scales_a, **kwargs)


def reference_forward(
    x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Plain real-valued convolution by nested loops; the full-precision oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    batch, c_in, h, wd = x.shape
    c_out, c_in2, k, _ = w.shape
    if c_in != c_in2:
        raise ValueError("channel mismatch")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((batch, c_out, ho, wo), dtype=np.float64)
    for b in range(batch):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def calibrate_layer(
    x: np.ndarray, w: np.ndarray, cfg: CimLayerConfig
) -> tuple[ScaleTensor, ScaleTensor, ScaleTensor]:
    """Saturating scale calibration for one layer from one batch.

    Weight and activation scales come straight from the data; partial-sum
    scales from the integer partial sums observed in a quantization-disabled
    forward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c_out, c_in, k, _ = w.shape
    plan = plan_tiling(c_in, c_out, k, cfg.array)
    n_split = cfg.n_split
    wspec = QuantSpec(cfg.w_bits, signed=True, granularity=cfg.w_gran)
    aspec = QuantSpec(cfg.a_bits, signed=False)
    pspec = QuantSpec(cfg.p_bits, signed=True, granularity=cfg.p_gran)
    w_dup = np.broadcast_to(w, (n_split,) + w.shape)
    scales_w = calibrate_scales(w_dup, wspec, weight_group_map(plan, cfg.w_gran, n_split))
    scales_a = calibrate_scales(x, aspec, np.zeros((), dtype=np.int64))
    _, _, cache = forward(
        x, w, cfg, scales_w, scales_p=None, scales_a=scales_a, return_cache=True
    )
    table: ColumnTable = cache["table"]
    x_cols = np.empty((table.n_columns, cache["psums"].shape[-1]))
    x_cols[table.colid[table.mask]] = cache["psums"][table.mask]
    scales_p = calibrate_scales(x_cols, pspec, psum_group_map(plan, cfg.p_gran, n_split))
    return scales_w, scales_p, scales_a
