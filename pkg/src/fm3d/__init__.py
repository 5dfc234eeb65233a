"""Compact convolution layers whose filters are cut from a shared 3D filter map."""

__version__ = "0.1.0"

from .filtermap import (  # noqa: E402
    CoverageCount,
    ExtractionStrides,
    FilterBank,
    FilterGrid,
    FilterMap,
    FilterMapSpec,
    FilterShape,
    aggregate_gradients,
    coverage_counts,
    extract_filters,
    filter_origin,
    index_map,
    map_dims,
    param_ratio,
    validate_spec,
)
from .planner import (  # noqa: E402
    LayerDesc,
    grid_for_filter_count,
    plan_layer,
    plan_network,
    render_plan_report,
)
