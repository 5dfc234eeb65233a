"""Filter maps: one shared 3D tensor from which a layer's filters are cut.

A filter map of dimensions ``(k1*x, k2*y, k3*z)`` yields ``K = k1*k2*k3``
filters of shape ``(s1, s2, c)``.  Filter ``(p, q, r)`` starts at map
coordinate ``(p*x, q*y, r*z)`` and reads its elements with modular
(wraparound) indexing in all three dimensions, so neighbouring filters
share the weights in their overlap.

Axis order is ``(spatial1, spatial2, channel)`` for both the map and each
filter.  A map described elsewhere as ``64 x 8 x 8`` (channel first) is
stored here as ``(8, 8, 64)``.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal

import numpy as np

from .errors import (
    ChannelConstraintViolated,
    IndexOutOfRange,
    NonPositiveDimension,
    ShapeMismatch,
    StrideExceedsFilter,
)

GradMode = Literal["sum", "average"]
GRAD_MODES = ("sum", "average")


@dataclass(frozen=True)
class FilterShape:
    s1: int
    s2: int
    c: int


@dataclass(frozen=True)
class FilterGrid:
    k1: int
    k2: int
    k3: int

    @property
    def count(self) -> int:
        return self.k1 * self.k2 * self.k3


@dataclass(frozen=True)
class ExtractionStrides:
    x: int
    y: int
    z: int


@dataclass(frozen=True)
class FilterMapSpec:
    shape: FilterShape
    grid: FilterGrid
    strides: ExtractionStrides

    @classmethod
    def build(cls, s1, s2, c, grid, strides) -> "FilterMapSpec":
        """Shorthand: ``FilterMapSpec.build(3, 3, 64, (4, 4, 4), (2, 2, 16))``."""
        return cls(FilterShape(s1, s2, c), FilterGrid(*grid), ExtractionStrides(*strides))

    @property
    def num_filters(self) -> int:
        return self.grid.count

    @property
    def filter_dims(self) -> tuple[int, int, int]:
        return (self.shape.s1, self.shape.s2, self.shape.c)

    def __str__(self):
        s, g, t = self.shape, self.grid, self.strides
        return (f"filters {s.s1}x{s.s2}x{s.c}, grid {g.k1}x{g.k2}x{g.k3}, "
                f"strides ({t.x},{t.y},{t.z})")


def validate_spec(spec: FilterMapSpec) -> None:
    """Raise a :class:`SpecError` subclass if ``spec`` is unusable.

    Checked in order: every size and stride positive, ``k3*z == c``, and
    ``x <= s1, y <= s2, z <= c`` (otherwise some map elements would never be
    read by any filter).
    """
    s, g, t = spec.shape, spec.grid, spec.strides
    fields = {"s1": s.s1, "s2": s.s2, "c": s.c, "k1": g.k1, "k2": g.k2,
              "k3": g.k3, "x": t.x, "y": t.y, "z": t.z}
    for name, value in fields.items():
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise NonPositiveDimension(f"{name} must be an integer, got {value!r}")
        if value < 1:
            raise NonPositiveDimension(f"{name} must be >= 1, got {value}")
    if g.k3 * t.z != s.c:
        raise ChannelConstraintViolated(
            f"k3*z = {g.k3}*{t.z} = {g.k3 * t.z} must equal channel count c = {s.c}")
    if t.x > s.s1 or t.y > s.s2 or t.z > s.c:
        raise StrideExceedsFilter(
            f"strides ({t.x},{t.y},{t.z}) must not exceed filter size ({s.s1},{s.s2},{s.c})")


def map_dims(spec: FilterMapSpec) -> tuple[int, int, int]:
    g, t = spec.grid, spec.strides
    return (g.k1 * t.x, g.k2 * t.y, g.k3 * t.z)


def filter_origin(k: int, grid: FilterGrid) -> tuple[int, int, int]:
    """Grid position of filter ``k``; row-major with the channel index fastest."""
    if not 0 <= k < grid.count:
        raise IndexOutOfRange(f"filter index {k} outside [0, {grid.count})")
    k1_idx, rest = divmod(k, grid.k2 * grid.k3)
    k2_idx, k3_idx = divmod(rest, grid.k3)
    return (k1_idx, k2_idx, k3_idx)


def index_map(k: int, t: tuple[int, int, int], spec: FilterMapSpec) -> tuple[int, int, int]:
    """Map coordinate read by element ``t = (i, j, ch)`` of filter ``k``."""
    i, j, ch = t
    s = spec.shape
    if not (0 <= i < s.s1 and 0 <= j < s.s2 and 0 <= ch < s.c):
        raise IndexOutOfRange(f"local index {t} outside filter {spec.filter_dims}")
    p, q, r = filter_origin(k, spec.grid)
    m1, m2, mc = map_dims(spec)
    st = spec.strides
    return ((p * st.x + i) % m1, (q * st.y + j) % m2, (r * st.z + ch) % mc)


def _axis_table(count: int, stride: int, extent: int, length: int) -> np.ndarray:
    # (count, extent): map index hit by local offset e of grid position g
    return (np.arange(count)[:, None] * stride + np.arange(extent)[None, :]) % length


@functools.lru_cache(maxsize=128)
def gather_table(spec: FilterMapSpec) -> np.ndarray:
    """Flat map offsets of shape ``(K, s1, s2, c)``, in filter enumeration order.

    The returned array is read-only and shared between callers.
    """
    validate_spec(spec)
    s, g, t = spec.shape, spec.grid, spec.strides
    m1, m2, mc = map_dims(spec)
    a = _axis_table(g.k1, t.x, s.s1, m1)
    b = _axis_table(g.k2, t.y, s.s2, m2)
    d = _axis_table(g.k3, t.z, s.c, mc)
    flat = (a[:, None, None, :, None, None] * (m2 * mc)
            + b[None, :, None, None, :, None] * mc
            + d[None, None, :, None, None, :])
    flat = np.ascontiguousarray(flat.reshape(g.count, s.s1, s.s2, s.c))
    flat.flags.writeable = False
    return flat


@dataclass
class FilterMap:
    spec: FilterMapSpec
    data: np.ndarray

    def __post_init__(self):
        validate_spec(self.spec)
        self.data = np.asarray(self.data)
        if self.data.shape != map_dims(self.spec):
            raise ShapeMismatch(
                f"map data has shape {self.data.shape}, expected {map_dims(self.spec)}")

    @classmethod
    def zeros(cls, spec: FilterMapSpec, dtype=np.float64) -> "FilterMap":
        validate_spec(spec)
        return cls(spec, np.zeros(map_dims(spec), dtype=dtype))

    @classmethod
    def he_uniform(cls, spec: FilterMapSpec, rng: np.random.Generator,
                   dtype=np.float64) -> "FilterMap":
        """Uniform init with bound sqrt(6 / fan_in), fan-in from the filter shape."""
        validate_spec(spec)
        s = spec.shape
        bound = np.sqrt(6.0 / (s.s1 * s.s2 * s.c))
        data = rng.uniform(-bound, bound, size=map_dims(spec)).astype(dtype)
        return cls(spec, data)


@dataclass
class FilterBank:
    """``filters[k]`` is filter ``k`` with shape ``(s1, s2, c)``.

    The same container holds per-filter gradients.
    """
    spec: FilterMapSpec
    filters: np.ndarray

    def __post_init__(self):
        self.filters = np.asarray(self.filters)
        expected = (self.spec.num_filters, *self.spec.filter_dims)
        if self.filters.shape != expected:
            raise ShapeMismatch(f"bank has shape {self.filters.shape}, expected {expected}")

    def __len__(self):
        return self.filters.shape[0]

    def __getitem__(self, k):
        return self.filters[k]


@dataclass
class CoverageCount:
    spec: FilterMapSpec
    counts: np.ndarray


def extract_filters(fmap: FilterMap) -> FilterBank:
    table = gather_table(fmap.spec)
    return FilterBank(fmap.spec, fmap.data.reshape(-1)[table])


def axis_coverage(count: int, stride: int, extent: int, length: int) -> np.ndarray:
    """How many (grid position, offset) pairs land on each index of one axis."""
    return np.bincount(_axis_table(count, stride, extent, length).ravel(), minlength=length)


def coverage_counts(spec: FilterMapSpec, method: str = "separable") -> CoverageCount:
    """Number of (filter, element) pairs reading each map element.

    ``method="separable"`` multiplies the three per-axis coverage vectors;
    ``method="enumerate"`` walks every ``(k, t)`` through :func:`index_map`.
    Both give the same integers.
    """
    validate_spec(spec)
    m1, m2, mc = map_dims(spec)
    s, g, t = spec.shape, spec.grid, spec.strides
    if method == "separable":
        c1 = axis_coverage(g.k1, t.x, s.s1, m1)
        c2 = axis_coverage(g.k2, t.y, s.s2, m2)
        c3 = axis_coverage(g.k3, t.z, s.c, mc)
        counts = c1[:, None, None] * c2[None, :, None] * c3[None, None, :]
    elif method == "enumerate":
        counts = np.zeros((m1, m2, mc), dtype=np.int64)
        local = list(itertools.product(range(s.s1), range(s.s2), range(s.c)))
        for k in range(spec.num_filters):
            for loc in local:
                counts[index_map(k, loc, spec)] += 1
    else:
        raise ValueError(f"unknown coverage method {method!r}")
    return CoverageCount(spec, counts.astype(np.int64))


@functools.lru_cache(maxsize=128)
def _counts_cached(spec: FilterMapSpec) -> np.ndarray:
    counts = coverage_counts(spec).counts
    counts.flags.writeable = False
    return counts


def aggregate_gradients(grads, spec: FilterMapSpec, mode: GradMode = "average") -> np.ndarray:
    """Fold per-filter gradients back onto the map.

    Every filter element's gradient is scatter-added to the map element it
    was read from.  In ``"average"`` mode (the default) each sum is then
    divided by that element's coverage count; ``"sum"`` mode returns the
    plain scatter-sum, which is the exact gradient of the extraction.

    Accumulation runs in a fixed order (ascending ``k``, then ``(i, j, ch)``
    lexicographically), so output is bitwise reproducible.
    """
    if isinstance(grads, FilterBank):
        grads = grads.filters
    grads = np.asarray(grads)
    expected = (spec.num_filters, *spec.filter_dims)
    if grads.shape != expected:
        raise ShapeMismatch(f"gradient bank has shape {grads.shape}, expected {expected}")
    if mode not in GRAD_MODES:
        raise ValueError(f"grad mode must be one of {GRAD_MODES}, got {mode!r}")
    dims = map_dims(spec)
    table = gather_table(spec)
    out = np.bincount(table.ravel(), weights=grads.ravel().astype(np.float64),
                      minlength=int(np.prod(dims))).reshape(dims)
    if mode == "average":
        out = out / _counts_cached(spec)
    dtype = grads.dtype if np.issubdtype(grads.dtype, np.floating) else np.float64
    return out.astype(dtype, copy=False)


def param_ratio(spec: FilterMapSpec) -> Fraction:
    """Parameters of K independent filters divided by parameters of the map."""
    validate_spec(spec)
    s, g, t = spec.shape, spec.grid, spec.strides
    m1, m2, mc = map_dims(spec)
    direct = Fraction(g.count * s.s1 * s.s2 * s.c, m1 * m2 * mc)
    closed = Fraction(s.s1 * s.s2, t.x * t.y) * g.k3
    assert direct == closed, (direct, closed)
    return direct


def map_param_count(spec: FilterMapSpec) -> int:
    m1, m2, mc = map_dims(spec)
    return m1 * m2 * mc
