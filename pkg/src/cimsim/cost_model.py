"""Closed-form dequantization-cost accounting.

Counts the scale-factor multiplications needed to restore real-valued layer
outputs, and the number of scale factors the hardware must store, for every
combination of weight and partial-sum granularity. Only multiplication and
storage counts are modeled; no energy or area constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .quantizer import Granularity
from .tiler import TilingPlan

__all__ = ["OverheadReport", "LayerOverhead", "dequant_mults", "scale_storage", "report"]


def dequant_mults(
    w_gran: Granularity, p_gran: Granularity, plan: TilingPlan, n_split: int
) -> int:
    """Dequantize multiplications per layer.

    Layer-wise partial sums accumulate everything first and dequantize once;
    array-wise needs one multiplication per (array, mapped output channel)
    after intra-array shift-and-add; column-wise needs one per physical
    column. The count is a function of the partial-sum granularity only:
    the weight scale rides along inside the fused factor, so refining weight
    granularity adds no multiplications.
    """
    del w_gran  # fused-factor argument: the count is independent of it
    if n_split < 1:
        raise ValueError("n_split must be >= 1")
    if p_gran is Granularity.LAYER:
        return 1
    if p_gran is Granularity.ARRAY:
        return plan.mapped_oc_total()
    return n_split * plan.mapped_oc_total()


def _stored_for(gran: Granularity, plan: TilingPlan, n_split: int) -> int:
    if gran is Granularity.LAYER:
        return 1
    if gran is Granularity.ARRAY:
        return plan.n_array
    return plan.total_columns(n_split)


def scale_storage(
    w_gran: Granularity, p_gran: Granularity, plan: TilingPlan, n_split: int
) -> tuple[int, int, int]:
    """(stored weight scales, stored psum scales, stored fused factors).

    Weight and psum scales are counted at their own granularities; the fused
    factors are what the dequantizer actually applies, one per multiplication.
    """
    stored_w = _stored_for(w_gran, plan, n_split)
    stored_p = _stored_for(p_gran, plan, n_split)
    stored_fused = dequant_mults(w_gran, p_gran, plan, n_split)
    return stored_w, stored_p, stored_fused


@dataclass(frozen=True)
class LayerOverhead:
    name: str
    w_gran: Granularity
    p_gran: Granularity
    n_array: int
    n_oc: int
    n_split: int
    dequant_mults: int
    stored_w: int
    stored_p: int
    stored_fused: int


@dataclass
class OverheadReport:
    layers: list[LayerOverhead] = field(default_factory=list)

    @property
    def total_dequant_mults(self) -> int:
        return sum(l.dequant_mults for l in self.layers)

    @property
    def total_stored_fused(self) -> int:
        return sum(l.stored_fused for l in self.layers)

    def csv_rows(self) -> list[dict]:
        rows = []
        for l in self.layers:
            rows.append(
                {
                    "layer": l.name,
                    "w_gran": l.w_gran.value,
                    "p_gran": l.p_gran.value,
                    "n_array": l.n_array,
                    "n_oc": l.n_oc,
                    "n_split": l.n_split,
                    "dequant_mults": l.dequant_mults,
                    "stored_fused": l.stored_fused,
                }
            )
        return rows


def report(
    layer_plans: list[tuple[str, Granularity, Granularity, TilingPlan, int]],
) -> OverheadReport:
    """Per-layer and total overhead for (name, w_gran, p_gran, plan, n_split) rows."""
    if not layer_plans:
        raise ValueError("cannot report overhead for an empty model")
    out = OverheadReport()
    for name, w_gran, p_gran, plan, n_split in layer_plans:
        stored_w, stored_p, stored_fused = scale_storage(w_gran, p_gran, plan, n_split)
        out.layers.append(
            LayerOverhead(
                name=name,
                w_gran=w_gran,
                p_gran=p_gran,
                n_array=plan.n_array,
                n_oc=plan.oc_per_array,
                n_split=n_split,
                dequant_mults=dequant_mults(w_gran, p_gran, plan, n_split),
                stored_w=stored_w,
                stored_p=stored_p,
                stored_fused=stored_fused,
            )
        )
    return out
