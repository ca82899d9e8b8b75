import numpy as np
import pytest

from decentrl import autodiff as ad
from decentrl import gradcheck as gc


class TestRelativeError:
    def test_both_zero(self):
        assert gc.relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_opposite(self):
        assert gc.relative_error(np.ones(2), -np.ones(2)) == pytest.approx(1.0)

    def test_numeric_gradient_of_quadratic(self):
        x = np.array([0.5, -1.5, 2.0])
        g = gc.numeric_gradient(lambda x: np.sum(x ** 3), dict(x=x), "x")
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)


class TestCheck:
    def test_matmul_passes(self):
        rng = np.random.default_rng(0)
        res = gc.check(lambda a, b: ad.sum(ad.matmul(a, b)),
                       dict(a=rng.normal(size=(2, 3)), b=rng.normal(size=(3, 2))), "matmul")
        assert res.passed and set(res.per_input) == {"a", "b"}

    def test_corrupted_gradient_fails(self):
        rng = np.random.default_rng(1)
        inputs = dict(x=rng.normal(size=(3, 3)))
        fn = lambda x: ad.sum(ad.exp(x))
        good = gc.analytic_gradient(fn, inputs)
        bad = {"x": good["x"] * 1.01}
        assert gc.check(fn, inputs, analytic=good).passed
        res = gc.check(fn, inputs, analytic=bad)
        assert not res.passed and res.max_rel_error > gc.TOLERANCE

    @pytest.mark.parametrize("mode", ["dan", "gat", "centrl"])
    def test_full_model(self, mode):
        fn, inputs = gc.model_case(0, mode=mode)
        assert inputs["layer4.W"].shape == (4, 4)
        res = gc.check(fn, inputs, f"model_{mode}")
        assert res.max_rel_error <= 1e-4, max(res.per_input.items(), key=lambda kv: kv[1])

    def test_op_cases_cover_primitives(self):
        names = set(gc.op_cases())
        assert {"matmul", "segment_softmax", "segment_sum", "layer_norm", "dropout",
                "leaky_relu", "log_softmax", "take"} <= names
