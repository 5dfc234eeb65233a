"""Turn a baseline layer list into a filter-map plan with parameter accounting.

Only 3x3 convolutions are replaced by filter maps; 1x1 convolutions,
dense layers and everything else keep their baseline parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import (
    BadOverride,
    ChannelNotDivisible,
    EmptyNetwork,
    PlanError,
    SpecError,
    UnknownFilterCount,
)
from .filtermap import FilterGrid, FilterMapSpec, map_param_count, param_ratio, validate_spec

# filter count -> (k1, k2, k3)
TABLE_GRIDS = {
    12: (2, 3, 2),
    32: (4, 4, 2),
    64: (4, 4, 4),
    128: (8, 4, 4),
    256: (8, 8, 4),
    512: (8, 8, 8),
}

LAYER_KINDS = ("conv", "dense", "other")


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str
    filter_count: int
    spatial: tuple = (1, 1)
    in_channels: int = 0
    param_count_baseline: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name}: kind must be one of {LAYER_KINDS}")
        object.__setattr__(self, "spatial", tuple(self.spatial))
        if self.kind == "conv":
            s1, s2 = self.spatial
            expected = self.filter_count * s1 * s2 * self.in_channels
            if self.param_count_baseline is None:
                object.__setattr__(self, "param_count_baseline", expected)
            elif self.param_count_baseline != expected:
                raise ValueError(f"layer {self.name}: conv params must be K*s1*s2*c = "
                                 f"{expected}, got {self.param_count_baseline}")
        elif self.param_count_baseline is None:
            if self.kind == "dense":
                # weight plus bias
                object.__setattr__(self, "param_count_baseline",
                                   self.in_channels * self.filter_count + self.filter_count)
            else:
                object.__setattr__(self, "param_count_baseline", 0)


@dataclass(frozen=True)
class FilterMapped:
    spec: FilterMapSpec


@dataclass(frozen=True)
class KeptBaseline:
    reason: str


@dataclass(frozen=True)
class LayerPlan:
    layer: LayerDesc
    decision: FilterMapped | KeptBaseline
    param_count_planned: int
    ratio: Fraction

    @property
    def is_filter_mapped(self):
        return isinstance(self.decision, FilterMapped)


@dataclass(frozen=True)
class NetPlan:
    layers: tuple
    total_baseline: int
    total_planned: int
    model_ratio: Fraction = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "model_ratio",
                           Fraction(self.total_baseline, self.total_planned))

    def by_name(self):
        return {p.layer.name: p for p in self.layers}


def _as_grid(grid) -> FilterGrid:
    return grid if isinstance(grid, FilterGrid) else FilterGrid(*grid)


def grid_for_filter_count(k: int, override=None) -> FilterGrid:
    """Filter grid for ``k`` filters: the table entry, or an explicit override."""
    if override is not None:
        grid = _as_grid(override)
        if min(grid.k1, grid.k2, grid.k3) < 1 or grid.count != k:
            raise BadOverride(f"grid {grid.k1}x{grid.k2}x{grid.k3} does not multiply to {k}")
        return grid
    if k not in TABLE_GRIDS:
        raise UnknownFilterCount(
            f"no grid known for {k} filters (known: {sorted(TABLE_GRIDS)}); supply one")
    return FilterGrid(*TABLE_GRIDS[k])


def plan_layer(layer: LayerDesc, spatial_strides=(2, 2), grid=None) -> LayerPlan:
    if not isinstance(layer, LayerDesc):
        raise TypeError(f"plan_layer takes a LayerDesc, got {type(layer).__name__}")
    base = layer.param_count_baseline
    if layer.kind != "conv":
        return LayerPlan(layer, KeptBaseline(f"{layer.kind} layer"), base, Fraction(1))
    if layer.spatial != (3, 3):
        s1, s2 = layer.spatial
        return LayerPlan(layer, KeptBaseline(f"{s1}x{s2} excluded"), base, Fraction(1))
    g = grid_for_filter_count(layer.filter_count, grid)
    c = layer.in_channels
    if c % g.k3:
        raise ChannelNotDivisible(
            f"{c} input channels not divisible by k3 = {g.k3}")
    x, y = spatial_strides
    spec = FilterMapSpec.build(3, 3, c, (g.k1, g.k2, g.k3), (x, y, c // g.k3))
    validate_spec(spec)
    planned = map_param_count(spec)
    ratio = Fraction(base, planned)
    assert ratio == param_ratio(spec)
    return LayerPlan(layer, FilterMapped(spec), planned, ratio)


def plan_network(layers, overrides=None, spatial_strides=(2, 2)) -> NetPlan:
    """Plan every layer; ``overrides`` maps layer name to an explicit grid."""
    overrides = overrides or {}
    layers = list(layers)
    if not layers:
        raise EmptyNetwork("cannot plan an empty network")
    plans = []
    for layer in layers:
        try:
            plans.append(plan_layer(layer, spatial_strides, overrides.get(layer.name)))
        except (PlanError, SpecError) as exc:
            raise type(exc)(f"layer {layer.name}: {exc}") from exc
    total_base = sum(p.layer.param_count_baseline for p in plans)
    total_planned = sum(p.param_count_planned for p in plans)
    if total_planned == 0:
        raise EmptyNetwork("network has no parameters; model ratio undefined")
    return NetPlan(tuple(plans), total_base, total_planned)


def _ratio_str(r: Fraction) -> str:
    return f"{r.numerator}/{r.denominator}"


def _decision_str(plan: LayerPlan) -> str:
    if plan.is_filter_mapped:
        spec = plan.decision.spec
        g, t = spec.grid, spec.strides
        return f"fm grid={g.k1}x{g.k2}x{g.k3} strides={t.x},{t.y},{t.z}"
    return f"baseline ({plan.decision.reason})"


def plan_records(plan: NetPlan):
    for p in plan.layers:
        rec = {
            "record": "layer",
            "name": p.layer.name,
            "kind": p.layer.kind,
            "decision": "filter_map" if p.is_filter_mapped else "baseline",
            "baseline_params": p.layer.param_count_baseline,
            "planned_params": p.param_count_planned,
            "ratio": _ratio_str(p.ratio),
        }
        if p.is_filter_mapped:
            spec = p.decision.spec
            rec["grid"] = [spec.grid.k1, spec.grid.k2, spec.grid.k3]
            rec["strides"] = [spec.strides.x, spec.strides.y, spec.strides.z]
        else:
            rec["reason"] = p.decision.reason
        yield rec
    yield {
        "record": "total",
        "baseline_params": plan.total_baseline,
        "planned_params": plan.total_planned,
        "ratio": _ratio_str(plan.model_ratio),
    }


def render_plan_report(plan: NetPlan, format="text") -> str:
    if format == "structured":
        return "".join(json.dumps(rec) + "\n" for rec in plan_records(plan))
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    rows = [("layer", "decision", "baseline", "planned", "ratio")]
    for p in plan.layers:
        rows.append((p.layer.name, _decision_str(p), str(p.layer.param_count_baseline),
                     str(p.param_count_planned), f"ratio {_ratio_str(p.ratio)}"))
    rows.append(("total", "", str(plan.total_baseline), str(plan.total_planned),
                 f"ratio {_ratio_str(plan.model_ratio)}"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1]),
                 r[2].rjust(widths[2]), r[3].rjust(widths[3]), r[4]]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
