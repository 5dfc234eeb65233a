from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fm3d.errors import (
    ChannelConstraintViolated,
    IndexOutOfRange,
    NonPositiveDimension,
    ShapeMismatch,
    StrideExceedsFilter,
)
from fm3d.filtermap import (
    FilterGrid,
    FilterMap,
    FilterMapSpec,
    aggregate_gradients,
    axis_coverage,
    coverage_counts,
    extract_filters,
    filter_origin,
    index_map,
    map_dims,
    param_ratio,
    validate_spec,
)
from oracles import (
    EXAMPLE_SPEC,
    TABLE_SPECS,
    central_diff,
    counts_bruteforce,
    extract_bruteforce,
    max_rel_err,
    scatter_sum_bruteforce,
    valid_specs,
)

IDENTITY_SPEC = FilterMapSpec.build(3, 3, 64, (1, 1, 1), (3, 3, 64))


class TestValidate:
    def test_example_spec_ok(self):
        validate_spec(EXAMPLE_SPEC)

    def test_degenerate_ok(self):
        validate_spec(IDENTITY_SPEC)

    def test_channel_constraint(self):
        with pytest.raises(ChannelConstraintViolated):
            validate_spec(FilterMapSpec.build(3, 3, 64, (4, 4, 4), (2, 2, 15)))

    @pytest.mark.parametrize("strides", [(4, 2, 16), (2, 4, 16)])
    def test_spatial_stride_exceeds_filter(self, strides):
        with pytest.raises(StrideExceedsFilter):
            validate_spec(FilterMapSpec.build(3, 3, 64, (4, 4, 4), strides))

    def test_channel_stride_equal_to_channels_ok(self):
        # z > c is unreachable once k3*z == c holds; z == c is the boundary
        validate_spec(FilterMapSpec.build(3, 3, 8, (2, 2, 1), (2, 2, 8)))

    @pytest.mark.parametrize("args", [
        (0, 3, 64, (4, 4, 4), (2, 2, 16)),
        (3, 3, 64, (0, 4, 4), (2, 2, 16)),
        (3, 3, 64, (4, 4, 4), (-2, 2, 16)),
    ])
    def test_non_positive(self, args):
        with pytest.raises(NonPositiveDimension):
            validate_spec(FilterMapSpec.build(*args))


def test_map_dims():
    assert map_dims(EXAMPLE_SPEC) == (8, 8, 64)
    assert map_dims(IDENTITY_SPEC) == (3, 3, 64)
    z = 4
    assert map_dims(FilterMapSpec.build(3, 3, 8 * z, (8, 8, 8), (2, 2, z))) == (16, 16, 8 * z)


class TestFilterOrigin:
    grid = FilterGrid(4, 4, 4)

    @pytest.mark.parametrize("k, expected", [(0, (0, 0, 0)), (63, (3, 3, 3)), (21, (1, 1, 1))])
    def test_examples(self, k, expected):
        assert filter_origin(k, self.grid) == expected

    @pytest.mark.parametrize("k", [-1, 64])
    def test_out_of_range(self, k):
        with pytest.raises(IndexOutOfRange):
            filter_origin(k, self.grid)

    def test_channel_index_fastest(self):
        grid = FilterGrid(2, 3, 5)
        seen = [filter_origin(k, grid) for k in range(grid.count)]
        assert seen == sorted(seen)
        assert len(set(seen)) == grid.count


class TestIndexMap:
    def test_no_wrap(self):
        assert index_map(0, (2, 2, 63), EXAMPLE_SPEC) == (2, 2, 63)

    def test_spatial_wrap(self):
        k = 3 * 16  # k1_idx = 3, others 0
        assert filter_origin(k, EXAMPLE_SPEC.grid) == (3, 0, 0)
        assert index_map(k, (2, 0, 0), EXAMPLE_SPEC) == (0, 0, 0)

    def test_channel_wrap(self):
        assert filter_origin(3, EXAMPLE_SPEC.grid) == (0, 0, 3)
        assert index_map(3, (0, 0, 20), EXAMPLE_SPEC) == (0, 0, 4)

    @pytest.mark.parametrize("t", [(3, 0, 0), (0, 3, 0), (0, 0, 64), (-1, 0, 0)])
    def test_local_out_of_range(self, t):
        with pytest.raises(IndexOutOfRange):
            index_map(0, t, EXAMPLE_SPEC)


class TestExtract:
    def test_identity_spec(self):
        rng = np.random.default_rng(0)
        fmap = FilterMap(IDENTITY_SPEC, rng.normal(size=(3, 3, 64)))
        bank = extract_filters(fmap)
        assert len(bank) == 1
        np.testing.assert_array_equal(bank[0], fmap.data)

    def test_constant_map(self):
        fmap = FilterMap(EXAMPLE_SPEC, np.full((8, 8, 64), 2.5))
        assert np.all(extract_filters(fmap).filters == 2.5)

    def test_example_spec_against_enumeration(self):
        data = np.arange(8 * 8 * 64, dtype=np.float64).reshape(8, 8, 64)
        bank = extract_filters(FilterMap(EXAMPLE_SPEC, data)).filters
        np.testing.assert_array_equal(bank, extract_bruteforce(data, EXAMPLE_SPEC))
        # filters 0 and 1 differ only in channel origin (0 vs 16): they share channels 16..63
        np.testing.assert_array_equal(bank[0][:, :, 16:], bank[1][:, :, :48])

    def test_wrong_data_shape(self):
        with pytest.raises(ShapeMismatch):
            FilterMap(EXAMPLE_SPEC, np.zeros((64, 8, 8)))

    @settings(max_examples=60, deadline=None)
    @given(valid_specs(), st.integers(0, 2**32 - 1))
    def test_defining_property(self, spec, seed):
        data = np.random.default_rng(seed).normal(size=map_dims(spec))
        bank = extract_filters(FilterMap(spec, data)).filters
        np.testing.assert_array_equal(bank, extract_bruteforce(data, spec))

    @settings(max_examples=40, deadline=None)
    @given(valid_specs(), st.integers(0, 2**32 - 1), st.sampled_from([0, 1, 2]))
    def test_cyclic_shift_permutes_bank(self, spec, seed, axis):
        data = np.random.default_rng(seed).normal(size=map_dims(spec))
        stride = (spec.strides.x, spec.strides.y, spec.strides.z)[axis]
        counts = (spec.grid.k1, spec.grid.k2, spec.grid.k3)
        bank = extract_filters(FilterMap(spec, data)).filters
        # rolling by -stride moves the content at origin g+1 to origin g
        shifted = extract_filters(FilterMap(spec, np.roll(data, -stride, axis=axis))).filters
        grid_bank = bank.reshape(*counts, *spec.filter_dims)
        expected = np.roll(grid_bank, -1, axis=axis).reshape(bank.shape)
        np.testing.assert_array_equal(shifted, expected)


class TestCoverage:
    def test_example_pattern(self):
        counts = coverage_counts(EXAMPLE_SPEC).counts
        np.testing.assert_array_equal(counts, counts_bruteforce(EXAMPLE_SPEC))
        assert np.all(counts[0, 0, :] == 16)
        assert np.all(counts[1, 1, :] == 4)
        assert np.all(counts[0, 1, :] == 8)
        np.testing.assert_array_equal(axis_coverage(4, 2, 3, 8), [2, 1, 2, 1, 2, 1, 2, 1])
        assert np.all(axis_coverage(4, 16, 64, 64) == 4)
        assert counts.sum() == 64 * 9 * 64 == 36864

    def test_identity_all_ones(self):
        assert np.all(coverage_counts(IDENTITY_SPEC).counts == 1)

    def test_enumerate_method(self):
        np.testing.assert_array_equal(coverage_counts(EXAMPLE_SPEC, "enumerate").counts,
                                      coverage_counts(EXAMPLE_SPEC).counts)

    @settings(max_examples=60, deadline=None)
    @given(valid_specs())
    def test_separable_matches_enumeration(self, spec):
        counts = coverage_counts(spec).counts
        np.testing.assert_array_equal(counts, counts_bruteforce(spec))
        s = spec.shape
        assert counts.sum() == spec.num_filters * s.s1 * s.s2 * s.c
        assert counts.min() >= 1


class TestAggregate:
    def test_all_ones(self):
        bank = np.ones((64, 3, 3, 64))
        np.testing.assert_array_equal(aggregate_gradients(bank, EXAMPLE_SPEC), np.ones((8, 8, 64)))

    def test_single_entry(self):
        g = np.zeros((64, 3, 3, 64))
        k, t = 37, (1, 2, 50)
        g[(k, *t)] = 3.0
        j = index_map(k, t, EXAMPLE_SPEC)
        counts = coverage_counts(EXAMPLE_SPEC).counts
        out = aggregate_gradients(g, EXAMPLE_SPEC)
        expected = np.zeros((8, 8, 64))
        expected[j] = 3.0 / counts[j]
        np.testing.assert_array_equal(out, expected)

    def test_random_matches_scatter_oracle(self):
        g = np.random.default_rng(3).normal(size=(64, 3, 3, 64))
        counts = coverage_counts(EXAMPLE_SPEC).counts
        oracle = scatter_sum_bruteforce(g, EXAMPLE_SPEC)
        out = aggregate_gradients(g, EXAMPLE_SPEC)
        assert max_rel_err(out * counts, oracle, floor=1e-300) <= 1e-12
        np.testing.assert_array_equal(aggregate_gradients(g, EXAMPLE_SPEC, "sum") / counts, out)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            aggregate_gradients(np.zeros((63, 3, 3, 64)), EXAMPLE_SPEC)

    def test_bitwise_repeatable(self):
        g = np.random.default_rng(5).normal(size=(64, 3, 3, 64))
        a = aggregate_gradients(g, EXAMPLE_SPEC)
        b = aggregate_gradients(g.copy(), EXAMPLE_SPEC)
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(valid_specs(), st.integers(0, 2**32 - 1))
    def test_adjoint_identity(self, spec, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=map_dims(spec))
        g = rng.normal(size=(spec.num_filters, *spec.filter_dims))
        counts = coverage_counts(spec).counts
        lhs = np.sum(aggregate_gradients(g, spec) * counts * m)
        rhs = np.sum(g * extract_filters(FilterMap(spec, m)).filters)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(valid_specs(max_filter=3, max_grid=3, max_z=3), st.integers(0, 2**32 - 1))
    def test_finite_differences(self, spec, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=map_dims(spec))
        g = rng.normal(size=(spec.num_filters, *spec.filter_dims))

        def loss():
            return float(np.sum(g * extract_filters(FilterMap(spec, m)).filters))

        numeric = central_diff(loss, m)
        analytic = aggregate_gradients(g, spec) * coverage_counts(spec).counts
        assert max_rel_err(analytic, numeric, floor=1e-6) <= 1e-6

    @settings(max_examples=20, deadline=None)
    @given(valid_specs())
    def test_ones_normalization(self, spec):
        ones = np.ones((spec.num_filters, *spec.filter_dims))
        assert np.all(aggregate_gradients(ones, spec) == 1.0)


class TestParamRatio:
    def test_example_example(self):
        assert param_ratio(EXAMPLE_SPEC) == 9
        assert Fraction(64 * 64 * 3 * 3, 64 * 8 * 8) == 9

    def test_no_sharing(self):
        assert param_ratio(IDENTITY_SPEC) == 1

    def test_derived(self):
        assert param_ratio(FilterMapSpec.build(3, 3, 64, (8, 8, 8), (2, 2, 8))) == 18
        assert param_ratio(FilterMapSpec.build(3, 3, 64, (8, 8, 2), (2, 2, 32))) == Fraction(9, 2)

    @pytest.mark.parametrize("spec", TABLE_SPECS)
    def test_table_grids(self, spec):
        assert param_ratio(spec) == Fraction(9, 4) * spec.grid.k3

    @settings(max_examples=60, deadline=None)
    @given(valid_specs())
    def test_equals_element_count_ratio(self, spec):
        data = np.zeros(map_dims(spec))
        bank = extract_filters(FilterMap(spec, data)).filters
        assert param_ratio(spec) == Fraction(bank.size, data.size)
        s, t = spec.shape, spec.strides
        if (t.x, t.y, t.z) != (s.s1, s.s2, s.c):
            assert param_ratio(spec) > 1
