import numpy as np
import pytest

from fm3d import ops
from fm3d.filtermap import (
    FilterMap,
    FilterMapSpec,
    aggregate_gradients,
    coverage_counts,
    extract_filters,
    map_dims,
)
from fm3d.netdesc import build_network, parse_net_text
from fm3d.nn import (
    Conv2d,
    Dense,
    FMConv2d,
    GlobalAvgPool,
    Network,
    ReLU,
    ResidualBlock,
    grad_check,
)
from oracles import EXAMPLE_SPEC, central_diff, max_rel_err, random_spec

TOY_NET = """
[input]
channels = 2
height = 8
width = 8

[conv1]
type = conv
filters = 12

[relu1]
type = relu

[pool1]
type = maxpool

[conv2]
type = conv
filters = 64

[relu2]
type = relu

[gap]
type = gap

[fc]
type = dense
units = 3
"""

RESIDUAL_NET = """
[input]
channels = 2
height = 6
width = 6

[stem]
type = conv
filters = 12

[res1]
type = residual
filters = 12

[res2]
type = residual
filters = 12

[gap]
type = gap

[fc]
type = dense
units = 3
"""


def toy_batch(seed=0, n=4, shape=(2, 8, 8), classes=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, *shape)), rng.integers(0, classes, size=n)


class TestFMConv:
    def test_equals_materialize_then_convolve(self):
        rng = np.random.default_rng(0)
        layer = FMConv2d.init(rng, EXAMPLE_SPEC, stride=1, padding=1)
        x = rng.normal(size=(2, 64, 6, 6))
        bank = extract_filters(layer.fmap).filters
        out = layer.forward(x)
        ref = ops.conv2d_forward(x, bank, 1, 1)
        assert out.tobytes() == ref.tobytes()

    def test_identity_spec_matches_baseline(self):
        spec = FilterMapSpec.build(3, 3, 4, (1, 1, 1), (3, 3, 4))
        rng = np.random.default_rng(1)
        data = rng.normal(size=(3, 3, 4))
        x = rng.normal(size=(2, 4, 5, 5))
        fm = FMConv2d(FilterMap(spec, data), padding=1)
        base = Conv2d(data[None].copy(), padding=1)
        np.testing.assert_array_equal(fm.forward(x), base.forward(x))

    def test_constant_fill(self):
        spec = FilterMapSpec.build(3, 3, 4, (2, 2, 2), (2, 2, 2))
        v = 0.25
        layer = FMConv2d(FilterMap(spec, np.full(map_dims(spec), v)), padding=0)
        out = layer.forward(np.ones((1, 4, 5, 5)))
        assert np.all(out == v * 3 * 3 * 4)

    def test_zero_out_grad(self):
        rng = np.random.default_rng(2)
        layer = FMConv2d.init(rng, FilterMapSpec.build(3, 3, 4, (2, 3, 2), (2, 2, 2)))
        x = rng.normal(size=(2, 4, 5, 5))
        out = layer.forward(x)
        dx = layer.backward(np.zeros_like(out))
        assert not dx.any() and not layer.grads["map"].any()

    def test_identity_spec_gradient_equals_filter_gradient(self):
        spec = FilterMapSpec.build(3, 3, 2, (1, 1, 1), (3, 3, 2))
        rng = np.random.default_rng(3)
        layer = FMConv2d(FilterMap(spec, rng.normal(size=(3, 3, 2))), padding=1)
        x = rng.normal(size=(2, 2, 4, 4))
        g = rng.normal(size=layer.forward(x).shape)
        layer.backward(g)
        _, dw = ops.conv2d_backward(x, layer.filters(), g, 1, 1)
        np.testing.assert_array_equal(layer.grads["map"], dw[0])

    @pytest.mark.parametrize("seed", range(4))
    def test_sum_mode_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng, max_filter=3, max_grid=3, max_z=2)
        layer = FMConv2d.init(rng, spec, stride=1, padding=1, grad_mode="sum")
        x = rng.normal(size=(2, spec.shape.c, 4, 5))
        g = rng.normal(size=layer.forward(x).shape)
        layer.backward(g)
        m = layer.params["map"]

        def loss():
            return float(np.sum(g * layer.forward(x)))

        assert max_rel_err(layer.grads["map"], central_diff(loss, m), floor=1e-5) <= 1e-6

        layer.grad_mode = "average"
        layer.forward(x)
        layer.backward(g)
        sum_grad = aggregate_gradients(layer.filter_grads, spec, "sum")
        np.testing.assert_array_equal(layer.grads["map"], sum_grad / coverage_counts(spec).counts)

    def test_baseline_twin_identical_until_update(self):
        rng = np.random.default_rng(4)
        spec = FilterMapSpec.build(3, 3, 4, (2, 3, 2), (2, 2, 2))
        fm = FMConv2d.init(rng, spec, padding=1)
        twin = fm.to_baseline()
        x = rng.normal(size=(3, 4, 6, 6))
        out_fm, out_base = fm.forward(x), twin.forward(x)
        assert out_fm.tobytes() == out_base.tobytes()
        g = rng.normal(size=out_fm.shape)
        dx_fm, dx_base = fm.backward(g), twin.backward(g)
        assert dx_fm.tobytes() == dx_base.tobytes()
        assert fm.filter_grads.tobytes() == twin.grads["weight"].tobytes()


class TestResidual:
    def make(self, rng, zero=False):
        spec = FilterMapSpec.build(3, 3, 4, (2, 1, 2), (2, 2, 2))
        a = FMConv2d.init(rng, spec, padding=1, grad_mode="sum")
        b = Conv2d.init(rng, 4, 4, padding=1)
        if zero:
            a.params["map"][...] = 0
            b.params["weight"][...] = 0
        return ResidualBlock(a, b)

    def test_zero_branch_is_identity(self):
        rng = np.random.default_rng(0)
        block = self.make(rng, zero=True)
        x = rng.normal(size=(2, 4, 5, 5))
        np.testing.assert_array_equal(block.forward(x), x)

    def test_gradient_sums_both_paths(self):
        rng = np.random.default_rng(1)
        block = self.make(rng)
        x = rng.normal(size=(2, 4, 5, 5))
        g = rng.normal(size=x.shape)
        block.forward(x)
        total = block.backward(g)
        branch = block.conv_a.backward(block.relu.backward(block.conv_b.backward(g)))
        np.testing.assert_array_equal(total, branch + g)

    def test_two_block_net_finite_differences(self):
        desc = parse_net_text(RESIDUAL_NET)
        model, _ = build_network(desc, "fm", np.random.default_rng(2), grad_mode="sum")
        x, y = toy_batch(3, n=3, shape=(2, 6, 6))
        report = grad_check(model, x, y)
        assert report.max_rel_err <= 1e-6
        assert report.checked == model.param_count()


class TestGradCheck:
    def test_linear_model(self):
        rng = np.random.default_rng(0)
        model = Network([("fc", Dense.init(rng, 5, 3))])
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        report = grad_check(model, x, y)
        assert report.passed and report.max_rel_err <= 1e-8

    def test_toy_fm_sum_mode(self):
        model, _ = build_network(parse_net_text(TOY_NET), "fm", np.random.default_rng(1),
                                 grad_mode="sum")
        x, y = toy_batch(1)
        report = grad_check(model, x, y, threshold=1e-5)
        assert report.passed, report

    def test_toy_fm_average_mode_fails_unless_scaled(self):
        model, _ = build_network(parse_net_text(TOY_NET), "fm", np.random.default_rng(1),
                                 grad_mode="average")
        x, y = toy_batch(1)
        raw = grad_check(model, x, y, threshold=1e-5)
        assert not raw.passed
        assert raw.worst_index[0].endswith(".map")
        scaled = grad_check(model, x, y, threshold=1e-5, scale_average=True)
        assert scaled.passed

    def test_sampling_is_deterministic(self):
        model, _ = build_network(parse_net_text(TOY_NET), "baseline", np.random.default_rng(1))
        x, y = toy_batch(1)
        a = grad_check(model, x, y, max_coords=50, seed=3)
        b = grad_check(model, x, y, max_coords=50, seed=3)
        assert a == b and a.checked == 50

    def test_epsilon_must_be_positive(self):
        model = Network([("fc", Dense.init(np.random.default_rng(0), 2, 2))])
        with pytest.raises(ValueError):
            grad_check(model, np.zeros((1, 2)), np.array([0]), epsilon=0)


def test_full_network_matches_manual_composition():
    rng = np.random.default_rng(5)
    spec = FilterMapSpec.build(3, 3, 2, (2, 3, 2), (2, 2, 1))
    fm = FMConv2d.init(rng, spec, padding=1)
    fc = Dense.init(rng, 12, 3)
    model = Network([("c", fm), ("r", ReLU()), ("g", GlobalAvgPool()), ("fc", fc)])
    x = rng.normal(size=(2, 2, 4, 4))
    manual = ops.dense_forward(
        ops.avgpool_global_forward(ops.relu_forward(
            ops.conv2d_forward(x, extract_filters(fm.fmap).filters, 1, 1))),
        fc.params["weight"], fc.params["bias"])
    np.testing.assert_array_equal(model.forward(x), manual)
    assert set(model.parameters()) == {"c.map", "fc.weight", "fc.bias"}


def test_first_step_does_not_increase_loss():
    from fm3d.train import SGD

    model, _ = build_network(parse_net_text(TOY_NET), "fm", np.random.default_rng(6))
    x, y = toy_batch(6, n=8)
    before, grads = model.loss_and_grads(x, y)
    SGD(model.parameters(), lr=1e-4, momentum=0.9).step(grads)
    after = model.loss(x, y)
    assert np.isfinite(after) and after <= before
