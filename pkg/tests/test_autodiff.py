import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biasloss import autodiff as ad
from fdcheck import assert_grads_close


class TestTensorCreate:
    def test_zero_fill(self):
        t = ad.tensor([2, 2], fill=0)
        assert t.shape == (2, 2) and (t == 0).all()

    def test_data_passthrough(self):
        t = ad.tensor([3], data=[1, 2, 3])
        np.testing.assert_array_equal(t, [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.tensor([2], data=[1, 2, 3])

    def test_negative_extent(self):
        with pytest.raises(ad.ShapeError):
            ad.tensor([-1, 2], fill=0)

    def test_row_major(self):
        t = ad.tensor([2, 2], data=[1, 2, 3, 4])
        assert t[0, 1] == 2 and t[1, 0] == 3
        assert t.flags["C_CONTIGUOUS"]


class TestUnfold:
    def test_row_major_flatten(self):
        x = ad.constant(np.arange(1, 9, dtype=np.float32).reshape(2, 1, 2, 2))
        u = ad.unfold(x)
        ad.forward(u)
        np.testing.assert_array_equal(u.value, [[1, 2, 3, 4], [5, 6, 7, 8]])

    def test_singleton(self):
        x = ad.constant(np.full((1, 1, 1, 1), 9.0))
        ad.forward(u := ad.unfold(x))
        np.testing.assert_array_equal(u.value, [[9.0]])

    def test_rank_2_rejected(self):
        x = ad.constant(np.zeros((2, 3)))
        with pytest.raises(ad.ShapeError):
            ad.forward(ad.unfold(x))

    def test_zero_copy(self):
        x = ad.constant(np.zeros((2, 3, 4, 5), dtype=np.float32))
        u = ad.unfold(x)
        ad.forward(u)
        assert u.value.base is x.value or u.value.base is x.value.base


class TestForward:
    def test_add(self):
        a, b = ad.leaf(np.array(2.0)), ad.leaf(np.array(3.0))
        assert ad.forward(a + b) == 5.0

    def test_relu_negative(self):
        x = ad.leaf(np.array(-1.0))
        assert ad.forward(ad.relu(x)) == 0.0

    def test_unset_leaf(self):
        x = ad.leaf()
        with pytest.raises(ad.UninitializedValueError):
            ad.forward(x + ad.constant(np.array(1.0)))

    def test_cycle_detected(self):
        a = ad.leaf(np.array(1.0))
        b = a + a
        c = b + a
        b.inputs[0] = c  # deliberately corrupt the DAG
        with pytest.raises(ad.GraphError):
            ad.forward(c)

    def test_referential_transparency(self):
        rng = np.random.default_rng(0)
        x = ad.leaf(rng.normal(size=(4, 4)).astype(np.float32))
        y = ad.sum_(ad.exp(ad.mul(x, x)))
        v1 = ad.forward(y).copy()
        v2 = ad.forward(y)
        assert np.array_equal(v1, v2)

    def test_forward_pass_shares_prefix(self):
        calls = []
        orig = ad._FORWARD["exp"]

        def counting(node, xs):
            calls.append(node.id)
            return orig(node, xs)

        ad._FORWARD["exp"] = counting
        try:
            x = ad.leaf(np.array(1.0))
            e = ad.exp(x)
            fp = ad.ForwardPass()
            fp.run(e)
            fp.run(e + e)  # same pass: exp must not be recomputed
            assert len(calls) == 1
        finally:
            ad._FORWARD["exp"] = orig

    def test_validate_flag_traps_nonfinite(self):
        x = ad.leaf(np.array(1000.0))
        y = ad.exp(x)
        with np.errstate(over="ignore"):
            ad.forward(y)  # silent by default
            with pytest.raises(FloatingPointError):
                ad.forward(ad.exp(y), validate=True)


class TestBackward:
    def test_square(self):
        x = ad.parameter(np.array(3.0))
        y = ad.mul(x, x)
        ad.forward(y)
        assert ad.backward(y)[x] == 6.0

    def test_relu_subgradient(self):
        x = ad.parameter(np.array([-1.0, 2.0]))
        root = ad.sum_(ad.relu(x))
        ad.forward(root)
        np.testing.assert_array_equal(ad.backward(root)[x], [0.0, 1.0])

    def test_non_scalar_root(self):
        x = ad.parameter(np.array([1.0, 2.0]))
        y = x + x
        ad.forward(y)
        with pytest.raises(ValueError):
            ad.backward(y)

    def test_unreached_node_reads_zero(self):
        x = ad.parameter(np.array([1.0, 2.0]))
        other = ad.parameter(np.array(5.0))
        root = ad.sum_(x)
        ad.forward(other)
        ad.forward(root)
        g = ad.backward(root)
        assert g[other] == 0.0

    def test_mlp_matches_finite_differences(self):
        # three dense layers with mixed nonlinearity, f64
        rng = np.random.default_rng(7)
        x = ad.constant(rng.uniform(-2, 2, (5, 6)))
        params = []
        h = x
        for i, (cin, cout) in enumerate([(6, 8), (8, 8), (8, 3)]):
            w = ad.parameter(rng.uniform(-1, 1, (cin, cout)) / np.sqrt(cin))
            b = ad.parameter(rng.uniform(-0.2, 0.2, (cout,)))
            params += [w, b]
            h = ad.matmul(h, w) + b
            if i < 2:
                h = ad.relu(h)
        root = ad.mean(ad.exp(h * 0.3))
        assert_grads_close(root, params, eps=1e-4, rtol=1e-4)

    def test_detach_blocks_gradient(self):
        x = ad.parameter(np.array([1.0, 2.0]))
        root = ad.sum_(ad.mul(ad.detach(x), x))
        ad.forward(root)
        np.testing.assert_array_equal(root.value, np.array(5.0))
        g = ad.backward(root)
        # only the non-detached factor contributes: d/dx (c * x) = c = value
        np.testing.assert_array_equal(g[x], [1.0, 2.0])

    def test_detach_value_equal(self):
        x = ad.parameter(np.array([3.0, -1.0]))
        d = ad.detach(x)
        ad.forward(d)
        np.testing.assert_array_equal(d.value, x.value)
        assert not d.requires_grad


class TestPrimitiveGradients:
    """Central differences over each primitive on random inputs in [-2, 2]."""

    @pytest.mark.parametrize("make", [
        lambda x: ad.exp(x * 0.5),
        lambda x: ad.log(x + 3.0),
        lambda x: ad.mul(x, x),
        lambda x: ad.div(x, x + 3.0),
        lambda x: ad.neg(x),
        lambda x: ad.power(x + 3.0, 1.7),
        lambda x: ad.reshape(x, (-1,)),
        lambda x: ad.transpose(x),
        lambda x: ad.broadcast_to(ad.reshape(x, (3, 4, 1)), (3, 4, 5)),
        lambda x: ad.mean(x, axis=0, keepdims=True),
        lambda x: ad.sum_(x, axis=1),
    ], ids=["exp", "log", "mul", "div", "neg", "power", "reshape",
            "transpose", "broadcast", "mean_axis", "sum_axis"])
    def test_smooth_primitives(self, make):
        rng = np.random.default_rng(11)
        x = ad.parameter(rng.uniform(-2, 2, (3, 4)))
        root = ad.sum_(ad.mul(make(x), ad.constant(rng.normal(size=1))))
        assert_grads_close(root, [x], eps=1e-5, rtol=1e-4)

    def test_matmul(self):
        rng = np.random.default_rng(3)
        a = ad.parameter(rng.uniform(-2, 2, (3, 4)))
        b = ad.parameter(rng.uniform(-2, 2, (4, 2)))
        root = ad.sum_(ad.mul(ad.matmul(a, b),
                              ad.constant(rng.normal(size=(3, 2)))))
        assert_grads_close(root, [a, b], eps=1e-5, rtol=1e-4)

    def test_broadcast_binary(self):
        rng = np.random.default_rng(4)
        a = ad.parameter(rng.uniform(-2, 2, (3, 1, 5)))
        b = ad.parameter(rng.uniform(1, 2, (4, 5)))
        root = ad.sum_(ad.div(ad.mul(a, b), b + 1.0))
        assert_grads_close(root, [a, b], eps=1e-5, rtol=1e-4)

    def test_max_min_reductions(self):
        rng = np.random.default_rng(5)
        x = ad.parameter(rng.uniform(-2, 2, (4, 5)))
        root = ad.sum_(ad.max_(x, axis=1)) + ad.sum_(ad.min_(x, axis=0))
        assert_grads_close(root, [x], eps=1e-5, rtol=1e-4)

    def test_clamp_interior(self):
        rng = np.random.default_rng(6)
        x = ad.parameter(rng.uniform(-2, 2, (4, 4)))
        # keep inputs off the clamp thresholds so FD is valid
        x.value[np.abs(np.abs(x.value) - 1.0) < 0.05] = 0.5
        root = ad.sum_(ad.clamp(x, -1.0, 1.0))
        assert_grads_close(root, [x], eps=1e-5, rtol=1e-4)

    def test_log_softmax_and_take_rows(self):
        rng = np.random.default_rng(8)
        x = ad.parameter(rng.uniform(-2, 2, (6, 5)))
        labels = rng.integers(0, 5, size=6)
        root = ad.mean(ad.neg(ad.take_rows(ad.log_softmax(x), labels)))
        assert_grads_close(root, [x], eps=1e-5, rtol=1e-4)


class TestReductionOracles:
    """sum/mean/max against naive scalar loops (f64)."""

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_sum_mean_max_match_loop(self, values):
        arr = np.array(values, dtype=np.float64)
        node = ad.constant(arr)
        s = ad.forward(ad.sum_(node))
        m = ad.forward(ad.mean(node))
        mx = ad.forward(ad.max_(node))
        acc = 0.0
        mag = 0.0
        for v in values:
            acc += v
            mag += abs(v)
        loop_mean = acc / len(values)
        loop_max = values[0]
        for v in values:
            if v > loop_max:
                loop_max = v
        # summation-order roundoff scales with the summand magnitudes
        assert abs(s - acc) <= 1e-12 * max(1.0, mag)
        assert abs(m - loop_mean) <= 1e-12 * max(1.0, mag / len(values))
        assert mx == loop_max

    def test_max_tie_sharing(self):
        x = ad.parameter(np.array([2.0, 2.0, 1.0]))
        root = ad.max_(x)
        ad.forward(root)
        g = ad.backward(root)
        np.testing.assert_allclose(g[x], [0.5, 0.5, 0.0])


class TestDtypeDiscipline:
    def test_f32_stays_f32_through_scalar_sugar(self):
        x = ad.leaf(np.ones((2, 2), dtype=np.float32))
        y = (x + 1.0) * 0.5 - 2.0
        ad.forward(y)
        assert y.value.dtype == np.float32

    def test_f64_mode(self):
        x = ad.leaf(np.ones((2, 2), dtype=np.float64))
        y = ad.exp(x / 3.0)
        ad.forward(y)
        assert y.value.dtype == np.float64
