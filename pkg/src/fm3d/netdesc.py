"""Network description files and the model builder.

A description is a config file whose first section is ``[input]`` and
whose remaining sections are layers, applied in file order::

    [input]
    channels = 2
    height = 16
    width = 16

    [conv1]
    type = conv          # conv | residual | relu | maxpool | gap | flatten | dense
    filters = 12
    kernel = 3
    padding = 1          # default kernel // 2
    stride = 1
    grid = 2,3,2         # optional; required when filters is not a table entry

    [fc]
    type = dense
    units = 3

``residual`` sections take ``filters`` (equal to the incoming channel count)
and build two 3x3 convolutions named ``<name>.a`` and ``<name>.b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import cfgfile, ops
from .errors import BadValue, ConfigError, MissingKey, ShapeMismatch
from .filtermap import FilterGrid
from .nn import (
    Conv2d,
    Dense,
    Flatten,
    FMConv2d,
    GlobalAvgPool,
    MaxPool2,
    Network,
    ReLU,
    ResidualBlock,
)
from .planner import LayerDesc, NetPlan, plan_network

LAYER_KEYS = {
    "conv": {"type", "filters", "kernel", "padding", "stride", "grid"},
    "residual": {"type", "filters", "grid"},
    "relu": {"type"},
    "maxpool": {"type"},
    "gap": {"type"},
    "flatten": {"type"},
    "dense": {"type", "units"},
}

positive = (lambda v: v >= 1, "an integer >= 1")


@dataclass(frozen=True)
class LayerEntry:
    name: str
    type: str
    options: tuple  # sorted (key, value) pairs
    line: int

    def opt(self, key, default=None):
        return dict(self.options).get(key, default)


@dataclass(frozen=True)
class NetDescription:
    input_shape: tuple  # (C, H, W)
    layers: tuple
    text: str
    source: str | None = None


def _grid(text):
    g = cfgfile.int_tuple(text)
    if len(g) != 3 or min(g) < 1:
        raise ValueError("grid needs three positive integers k1,k2,k3")
    return g


def parse_net_text(text: str, source=None) -> NetDescription:
    sections = cfgfile.parse_text(text, source)
    if not sections or sections[0].name != "input":
        raise ConfigError("network description must start with an [input] section", source,
                          sections[0].line if sections else None)
    inp = sections[0]
    inp.reject_unknown({"channels", "height", "width"})
    chk, msg = positive
    shape = tuple(inp.get(k, int, required=True, check=chk, expect=msg)
                  for k in ("channels", "height", "width"))
    layers = []
    for sec in sections[1:]:
        kind = sec.get("type", required=True)
        if kind not in LAYER_KEYS:
            raise BadValue(f"[{sec.name}] unknown layer type {kind!r}", source, sec.line_of("type"))
        sec.reject_unknown(LAYER_KEYS[kind])
        opts = {}
        if kind in ("conv", "residual"):
            opts["filters"] = sec.get("filters", int, required=True, check=chk, expect=msg)
            if "grid" in sec:
                opts["grid"] = sec.get("grid", _grid)
        if kind == "conv":
            opts["kernel"] = sec.get("kernel", int, default=3, check=chk, expect=msg)
            opts["padding"] = sec.get("padding", int, default=opts["kernel"] // 2,
                                      check=lambda v: v >= 0, expect="an integer >= 0")
            opts["stride"] = sec.get("stride", int, default=1, check=chk, expect=msg)
        if kind == "dense":
            opts["units"] = sec.get("units", int, required=True, check=chk, expect=msg)
        layers.append(LayerEntry(sec.name, kind, tuple(sorted(opts.items())), sec.line))
    if not layers:
        raise MissingKey("network description has no layers", source)
    desc = NetDescription(shape, tuple(layers), text, source)
    layer_descs(desc)  # shape-check now so errors surface at parse time
    return desc


def parse_net_description(path) -> NetDescription:
    path = Path(path)
    return parse_net_text(path.read_text(encoding="utf-8"), str(path))


def default_net_text() -> str:
    return resources.files("fm3d").joinpath("data/toy_fm.cfg").read_text(encoding="utf-8")


def _walk(desc: NetDescription):
    """Yield ``(entry, in_shape, out_shape)`` with per-sample shapes."""
    shape = desc.input_shape
    for entry in desc.layers:
        t = entry.type
        if t in ("conv", "residual"):
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {entry.name}: convolution needs a CHW input")
            c, h, w = shape
            k = entry.opt("filters")
            if t == "conv":
                kern, pad, stride = entry.opt("kernel"), entry.opt("padding"), entry.opt("stride")
                ho, wo = ops.conv_output_size(h, w, kern, kern, stride, pad)
                if ho < 1 or wo < 1:
                    raise ShapeMismatch(f"layer {entry.name}: empty output for input {shape}")
                out = (k, ho, wo)
            else:
                if k != c:
                    raise ShapeMismatch(
                        f"layer {entry.name}: residual filters {k} must equal input channels {c}")
                out = shape
        elif t == "relu":
            out = shape
        elif t == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeMismatch(f"layer {entry.name}: maxpool needs CHW input >= 2x2")
            out = (shape[0], shape[1] // 2, shape[2] // 2)
        elif t == "gap":
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {entry.name}: gap needs a CHW input")
            out = (shape[0],)
        elif t == "flatten":
            out = (int(np.prod(shape)),)
        else:
            if len(shape) != 1:
                raise ShapeMismatch(
                    f"layer {entry.name}: dense needs a flat input, got {shape}; add flatten or gap")
            out = (entry.opt("units"),)
        yield entry, shape, out
        shape = out


def output_shape(desc: NetDescription):
    shape = desc.input_shape
    for _, _, shape in _walk(desc):
        pass
    return shape


def layer_descs(desc: NetDescription) -> list[LayerDesc]:
    """Parameterized layers as planner inputs (residual blocks contribute two)."""
    out = []
    for entry, shape, _ in _walk(desc):
        if entry.type == "conv":
            kern = entry.opt("kernel")
            out.append(LayerDesc(entry.name, "conv", entry.opt("filters"), (kern, kern), shape[0]))
        elif entry.type == "residual":
            for tag in ("a", "b"):
                out.append(LayerDesc(f"{entry.name}.{tag}", "conv", entry.opt("filters"),
                                     (3, 3), shape[0]))
        elif entry.type == "dense":
            out.append(LayerDesc(entry.name, "dense", entry.opt("units"), (1, 1), shape[0]))
    return out


def grid_overrides(desc: NetDescription) -> dict:
    overrides = {}
    for entry in desc.layers:
        grid = entry.opt("grid")
        if grid is None:
            continue
        if entry.type == "residual":
            overrides[f"{entry.name}.a"] = FilterGrid(*grid)
            overrides[f"{entry.name}.b"] = FilterGrid(*grid)
        else:
            overrides[entry.name] = FilterGrid(*grid)
    return overrides


def plan_description(desc: NetDescription) -> NetPlan:
    return plan_network(layer_descs(desc), grid_overrides(desc))


def build_network(desc: NetDescription, variant="fm", rng=None, grad_mode="average",
                  dtype=np.float64):
    """Instantiate the described network.

    ``variant="fm"`` turns every planner-eligible convolution into a
    filter-map layer; ``variant="baseline"`` keeps independent filters
    everywhere.  Returns ``(network, plan)``.
    """
    if variant not in ("fm", "baseline"):
        raise ValueError(f"variant must be 'fm' or 'baseline', got {variant!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    plan = plan_description(desc)
    plans = plan.by_name()

    def conv(name, in_ch, k, kern, stride, pad):
        p = plans[name]
        if variant == "fm" and p.is_filter_mapped:
            return FMConv2d.init(rng, p.decision.spec, stride, pad, grad_mode, dtype)
        return Conv2d.init(rng, in_ch, k, kern, stride, pad, dtype)

    layers = []
    for entry, shape, _ in _walk(desc):
        t = entry.type
        if t == "conv":
            kern = entry.opt("kernel")
            layer = conv(entry.name, shape[0], entry.opt("filters"), kern,
                         entry.opt("stride"), entry.opt("padding"))
        elif t == "residual":
            k = entry.opt("filters")
            layer = ResidualBlock(conv(f"{entry.name}.a", k, k, 3, 1, 1),
                                  conv(f"{entry.name}.b", k, k, 3, 1, 1))
        elif t == "relu":
            layer = ReLU()
        elif t == "maxpool":
            layer = MaxPool2()
        elif t == "gap":
            layer = GlobalAvgPool()
        elif t == "flatten":
            layer = Flatten()
        else:
            layer = Dense.init(rng, shape[0], entry.opt("units"), dtype)
        layers.append((entry.name, layer))
    return Network(layers), plan
