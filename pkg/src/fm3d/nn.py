"""Layers with explicit forward/backward passes, a sequential network, and a
finite-difference gradient checker.

Every layer caches what its backward pass needs during ``forward`` and
fills ``self.grads`` (same keys as ``self.params``) during ``backward``.
Parameter arrays are updated in place, so references held by optimizers
and checkpoint loaders stay valid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeMismatch
from .filtermap import (
    GRAD_MODES,
    FilterMap,
    FilterMapSpec,
    aggregate_gradients,
    coverage_counts,
    extract_filters,
)


def he_bound(fan_in):
    return np.sqrt(6.0 / fan_in)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, out_grad):
        raise NotImplementedError

    def output_shape(self, in_shape):
        """Shape of one sample's output given one sample's input shape."""
        raise NotImplementedError


class Conv2d(Layer):
    """Convolution with independent, bias-free filters of shape (K, s1, s2, c)."""

    def __init__(self, filters, stride=1, padding=0):
        super().__init__()
        self.params["weight"] = np.asarray(filters)
        self.stride = stride
        self.padding = padding

    @classmethod
    def init(cls, rng, in_channels, out_channels, kernel=3, stride=1, padding=1,
             dtype=np.float64):
        bound = he_bound(kernel * kernel * in_channels)
        w = rng.uniform(-bound, bound, size=(out_channels, kernel, kernel, in_channels))
        return cls(w.astype(dtype), stride, padding)

    @property
    def filters(self):
        return self.params["weight"]

    def forward(self, x):
        self._x = x
        return ops.conv2d_forward(x, self.filters, self.stride, self.padding)

    def backward(self, out_grad):
        dx, dw = ops.conv2d_backward(self._x, self.filters, out_grad, self.stride, self.padding)
        self.grads["weight"] = dw
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s1, s2, fc = self.filters.shape
        if fc != c:
            raise ShapeMismatch(f"conv expects {fc} input channels, got {c}")
        return (k, *ops.conv_output_size(h, w, s1, s2, self.stride, self.padding))


class FMConv2d(Layer):
    """Convolution whose filters are extracted from a shared filter map.

    Forward materializes the filter bank and convolves with it.  Backward
    takes the per-filter gradients from the ordinary convolution backward
    pass and folds them onto the map with :func:`aggregate_gradients` under
    ``grad_mode`` (``"average"`` by default, ``"sum"`` for the exact
    gradient).  No bias.
    """

    def __init__(self, fmap: FilterMap, stride=1, padding=0, grad_mode="average"):
        super().__init__()
        if grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}, got {grad_mode!r}")
        self.spec = fmap.spec
        self.params["map"] = fmap.data
        self.stride = stride
        self.padding = padding
        self.grad_mode = grad_mode

    @classmethod
    def init(cls, rng, spec: FilterMapSpec, stride=1, padding=1, grad_mode="average",
             dtype=np.float64):
        return cls(FilterMap.he_uniform(spec, rng, dtype), stride, padding, grad_mode)

    @property
    def fmap(self) -> FilterMap:
        return FilterMap(self.spec, self.params["map"])

    def filters(self):
        return extract_filters(self.fmap).filters

    def forward(self, x):
        self._x = x
        self._filters = self.filters()
        return ops.conv2d_forward(x, self._filters, self.stride, self.padding)

    def backward(self, out_grad):
        dx, filter_grads = ops.conv2d_backward(self._x, self._filters, out_grad,
                                               self.stride, self.padding)
        self.filter_grads = filter_grads
        self.grads["map"] = aggregate_gradients(filter_grads, self.spec, self.grad_mode)
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        s = self.spec.shape
        if s.c != c:
            raise ShapeMismatch(f"filter map expects {s.c} input channels, got {c}")
        return (self.spec.num_filters,
                *ops.conv_output_size(h, w, s.s1, s.s2, self.stride, self.padding))

    def to_baseline(self) -> Conv2d:
        """Independent-filter twin initialized with this layer's current filters."""
        return Conv2d(self.filters().copy(), self.stride, self.padding)


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return ops.relu_forward(x)

    def backward(self, out_grad):
        return ops.relu_backward(self._x, out_grad)

    def output_shape(self, in_shape):
        return in_shape


class MaxPool2(Layer):
    def forward(self, x):
        self._shape = x.shape
        out, self._arg = ops.maxpool2_forward(x)
        return out

    def backward(self, out_grad):
        return ops.maxpool2_backward(self._shape, self._arg, out_grad)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return ops.avgpool_global_forward(x)

    def backward(self, out_grad):
        return ops.avgpool_global_backward(self._shape, out_grad)

    def output_shape(self, in_shape):
        return (in_shape[0],)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, out_grad):
        return out_grad.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dense(Layer):
    def __init__(self, weight, bias):
        super().__init__()
        self.params["weight"] = np.asarray(weight)
        self.params["bias"] = np.asarray(bias)

    @classmethod
    def init(cls, rng, in_features, out_features, dtype=np.float64):
        bound = np.sqrt(6.0 / (in_features + out_features))
        w = rng.uniform(-bound, bound, size=(in_features, out_features))
        return cls(w.astype(dtype), np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        self._x = x
        return ops.dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, out_grad):
        dx, dw, db = ops.dense_backward(self._x, self.params["weight"], out_grad)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.params["weight"].shape[0]:
            raise ShapeMismatch(
                f"dense expects ({self.params['weight'].shape[0]},) input, got {in_shape}")
        return (self.params["weight"].shape[1],)


class ResidualBlock(Layer):
    """``out = conv_b(relu(conv_a(x))) + x``; the convs may be FM or baseline."""

    def __init__(self, conv_a: Layer, conv_b: Layer):
        super().__init__()
        self.conv_a = conv_a
        self.relu = ReLU()
        self.conv_b = conv_b
        self.params = {f"a.{k}": v for k, v in conv_a.params.items()}
        self.params.update({f"b.{k}": v for k, v in conv_b.params.items()})

    def forward(self, x):
        branch = self.conv_b.forward(self.relu.forward(self.conv_a.forward(x)))
        if branch.shape != x.shape:
            raise ShapeMismatch(
                f"residual branch output {branch.shape} differs from input {x.shape}")
        return branch + x

    def backward(self, out_grad):
        g = self.conv_a.backward(self.relu.backward(self.conv_b.backward(out_grad)))
        self.grads = {f"a.{k}": v for k, v in self.conv_a.grads.items()}
        self.grads.update({f"b.{k}": v for k, v in self.conv_b.grads.items()})
        return g + out_grad

    def output_shape(self, in_shape):
        out = self.conv_b.output_shape(self.conv_a.output_shape(in_shape))
        if out != tuple(in_shape):
            raise ShapeMismatch(f"residual branch maps {in_shape} to {out}")
        return out


class Network:
    """Ordered stack of named layers ending in logits."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def parameters(self) -> dict:
        out = {}
        for name, layer in self.layers:
            for key, value in layer.params.items():
                out[f"{name}.{key}"] = value
        return out

    def gradients(self) -> dict:
        out = {}
        for name, layer in self.layers:
            for key, value in layer.grads.items():
                out[f"{name}.{key}"] = value
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, out_grad):
        for _, layer in reversed(self.layers):
            out_grad = layer.backward(out_grad)
        return out_grad

    def loss(self, x, labels):
        return ops.softmax_xent(self.forward(x), labels)[0]

    def loss_and_grads(self, x, labels):
        loss, g = ops.softmax_xent(self.forward(x), labels)
        self.backward(g)
        return loss, self.gradients()

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for _, layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def fm_layers(self):
        """``(param_name, FMConv2d)`` for every filter-map parameter, nested ones included."""
        found = []
        for name, layer in self.layers:
            if isinstance(layer, FMConv2d):
                found.append((f"{name}.map", layer))
            elif isinstance(layer, ResidualBlock):
                for tag, sub in (("a", layer.conv_a), ("b", layer.conv_b)):
                    if isinstance(sub, FMConv2d):
                        found.append((f"{name}.{tag}.map", sub))
        return found

    def set_grad_mode(self, mode):
        for _, layer in self.fm_layers():
            layer.grad_mode = mode


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple
    passed: bool
    checked: int = 0


def grad_check(model: Network, x, labels, epsilon=1e-5, threshold=1e-5,
               max_coords=10_000, seed=0, scale_average=False,
               floor=1e-5) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences.

    The step for coordinate ``theta`` is ``epsilon * max(1, |theta|)``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients too small for central differences to resolve (roundoff in the
    loss is ~1e-16 / h) from dominating the report.  Every coordinate
    is checked when the model has fewer than ``max_coords`` parameters,
    otherwise a seeded sample of ``max_coords`` of them.

    Filter-map gradients in ``"average"`` mode are the exact gradient
    divided by coverage counts; pass ``scale_average=True`` to multiply them
    back before comparing.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, grads = model.loss_and_grads(x, labels)
    grads = {k: v.copy() for k, v in grads.items()}
    if scale_average:
        for pname, layer in model.fm_layers():
            if layer.grad_mode == "average":
                grads[pname] = grads[pname] * coverage_counts(layer.spec).counts
    params = model.parameters()
    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if len(coords) >= max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst, worst_at = 0.0, ()
    for name, idx in coords:
        p = params[name]
        orig = p[idx]
        h = epsilon * max(1.0, abs(float(orig)))
        p[idx] = orig + h
        up = model.loss(x, labels)
        p[idx] = orig - h
        down = model.loss(x, labels)
        p[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst or not worst_at:
            worst, worst_at = err, (name, *idx)
    return GradCheckReport(worst, worst_at, bool(worst <= threshold), len(coords))
