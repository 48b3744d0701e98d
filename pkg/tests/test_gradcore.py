import math
import warnings

import numpy as np
import pytest

import gradcases
from aand import gradcore as gc


@pytest.mark.parametrize("name", sorted(gradcases.KERNEL_CASES))
def test_kernel_gradients_match_central_differences(name):
    builder = gradcases.KERNEL_CASES[name]
    errors = [gradcases.worst_error(builder, seed) for seed in range(gradcases.TRIALS)]
    assert max(errors) < gradcases.TOLERANCE, errors


def test_identity_graph():
    out = gc.evaluate(lambda x: x, {"x": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(out["out"], [1.0, 2.0])


def test_tanh_of_zero():
    out = gc.evaluate(lambda x: gc.tanh(x), {"x": np.zeros((2, 3))})
    np.testing.assert_array_equal(out["out"], np.zeros((2, 3)))


def test_softmax_closed_form():
    out = gc.evaluate(lambda x: gc.softmax(x), {"x": np.array([0.0, math.log(3.0)])}, dtype=np.float64)
    np.testing.assert_allclose(out["out"], [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = gc.Tensor(np.random.default_rng(0).standard_normal((50, 17)) * 10)
    s = gc.softmax(x, axis=-1).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_linear_map_gradient():
    _, grads = gc.gradients(lambda x: gc.sum(gc.mul(x, 3.0)), {"x": np.ones(4)})
    np.testing.assert_array_equal(grads["x"], np.full(4, 3.0))


def test_quadratic_gradient():
    _, grads = gc.gradients(lambda x: gc.sum(gc.mul(x, x)), {"x": np.array([1.0, -2.0])})
    np.testing.assert_array_equal(grads["x"], [2.0, -4.0])


def test_cosine_distance_seed7():
    rng = np.random.default_rng(7)
    bindings = {"a": rng.standard_normal(8), "b": rng.standard_normal(8)}
    errs = gc.check_gradients(lambda a, b: gc.sub(1.0, gc.cosine_similarity(a, b)), bindings, dtype=np.float64)
    assert max(errs.values()) < 1e-3


def test_backprop_rejects_non_scalar():
    x = gc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(gc.GraphError):
        gc.backprop(gc.mul(x, 2.0))


def test_detached_input_gets_zero_gradient_with_warning():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, grads = gc.gradients(lambda x, y: gc.sum(x), {"x": np.ones(2), "y": np.ones(3)}, wrt=["x", "y"])
    np.testing.assert_array_equal(grads["y"], np.zeros(3))
    assert any("y" in str(w.message) for w in caught)


def test_shape_mismatch_names_the_node():
    a = gc.Tensor(np.ones((2, 3)), name="left")
    b = gc.Tensor(np.ones((4, 5)))
    with pytest.raises(gc.GraphError) as err:
        gc.matmul(a, b)
    assert "matmul" in str(err.value)


def test_non_finite_intermediate_is_reported():
    with pytest.raises(gc.GraphError) as err:
        gc.log(gc.Tensor(np.array([0.0, 1.0])))
    assert "log" in str(err.value)


def test_evaluation_is_bit_reproducible():
    rng = np.random.default_rng(3)
    bindings = {"x": rng.standard_normal((2, 2, 6, 6)), "w": rng.standard_normal((3, 2, 3, 3))}

    def graph(x, w):
        return gc.mean(gc.tanh(gc.conv2d(x, w, stride=2)))
    first = gc.gradients(graph, bindings)
    second = gc.gradients(graph, bindings)
    assert first[0] == second[0]
    for k in bindings:
        assert first[1][k].tobytes() == second[1][k].tobytes()


def test_no_grad_records_nothing():
    x = gc.Tensor(np.ones(3), requires_grad=True)
    with gc.no_grad():
        y = gc.mul(x, 2.0)
    assert not y.requires_grad and y.parents == ()


class TestCosine:
    def test_self_similarity(self):
        v = gc.Tensor(np.array([0.3, -2.0, 5.0]))
        assert float(gc.cosine_similarity(v, v).data) == pytest.approx(1.0, abs=1e-6)

    def test_antipodal(self):
        v = np.array([0.3, -2.0, 5.0])
        assert float(gc.cosine_similarity(gc.Tensor(v), gc.Tensor(-v)).data) == pytest.approx(-1.0, abs=1e-6)

    def test_orthogonal(self):
        assert float(gc.cosine_similarity(gc.Tensor([1.0, 0.0]), gc.Tensor([0.0, 1.0])).data) == 0.0

    def test_zero_vector_is_guarded(self):
        out = gc.cosine_similarity(gc.Tensor(np.zeros(4)), gc.Tensor(np.ones(4)))
        assert np.isfinite(out.data) and float(out.data) == 0.0


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = gc.Tensor(np.array([1.0, -1.0], np.float32), requires_grad=True)
        opt = gc.Adam({"p": p})
        p.grad = np.zeros(2, np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -1.0])
        assert opt.step_count == 1

    def test_first_step_by_hand(self):
        p = gc.Tensor(np.zeros(1, np.float64), requires_grad=True)
        opt = gc.Adam({"p": p}, lr=0.005)
        p.grad = np.ones(1)
        opt.step()
        # bias-corrected moments: m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
        expected = -0.005 * 1.0 / (1.0 + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)

    def test_zero_gradient_idempotent(self):
        p = gc.Tensor(np.array([0.5], np.float32), requires_grad=True)
        opt = gc.Adam({"p": p})
        snapshots = []
        for _ in range(2):
            p.grad = np.zeros(1, np.float32)
            opt.step()
            snapshots.append((p.data.copy(), opt.m["p"].copy(), opt.v["p"].copy()))
        for a, b in zip(*snapshots):
            np.testing.assert_array_equal(a, b)

    def test_non_finite_gradient_aborts(self):
        p = gc.Tensor(np.zeros(2, np.float32), requires_grad=True)
        opt = gc.Adam({"weights": p})
        p.grad = np.array([np.nan, 0.0], np.float32)
        with pytest.raises(gc.GraphError, match="weights"):
            opt.step()
        assert opt.step_count == 0
        np.testing.assert_array_equal(p.data, 0.0)

    def test_state_round_trip(self):
        p = gc.Tensor(np.ones(3, np.float32), requires_grad=True)
        opt = gc.Adam({"p": p})
        p.grad = np.arange(3, dtype=np.float32)
        opt.step()
        clone = gc.Adam({"p": gc.Tensor(p.data.copy(), requires_grad=True)})
        clone.load_state_arrays(opt.state_arrays())
        assert clone.step_count == 1
        np.testing.assert_array_equal(clone.m["p"], opt.m["p"])
        np.testing.assert_array_equal(clone.v["p"], opt.v["p"])


class TestBilinear:
    def test_constant_preserved(self):
        x = gc.Tensor(np.full((1, 1, 3, 5), 0.5))
        np.testing.assert_allclose(gc.bilinear_upsample(x, (9, 10)).data, 0.5, atol=1e-7)

    def test_identity_scale_passthrough(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = gc.bilinear_upsample(gc.Tensor(x), (4, 4)).data
        assert out.tobytes() == x.tobytes()

    def test_two_by_two_to_four_by_four(self):
        # half-pixel centres: output i samples input coordinate (i + 0.5) / 2 - 0.5, clamped at 0
        # rows (and columns) therefore blend with weights 1, .75/.25, .25/.75, 1
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        r = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
        expected = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                expected[i, j] = sum(r[i, a] * r[j, b] * x[a, b] for a in range(2) for b in range(2))
        out = gc.bilinear_upsample(gc.Tensor(x[None, None]), (4, 4)).data[0, 0]
        np.testing.assert_allclose(out, expected, atol=1e-6)
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)

    def test_downscale_rejected(self):
        with pytest.raises(gc.GraphError):
            gc.bilinear_upsample(gc.Tensor(np.zeros((1, 1, 4, 4))), (2, 2))

    def test_range_bounded(self):
        x = np.random.default_rng(1).uniform(-3, 3, (1, 1, 5, 7))
        out = gc.bilinear_upsample(gc.Tensor(x), (20, 21)).data
        assert out.min() >= x.min() - 1e-6 and out.max() <= x.max() + 1e-6
