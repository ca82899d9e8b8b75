import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decentrl import autodiff as ad
from decentrl.autodiff import SegmentIndex, Tape
from decentrl.gradcheck import check


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def scalar_softmax(xs):
    top = max(xs)
    ex = [math.exp(x - top) for x in xs]
    total = 0.0
    for v in ex:
        total += v
    return [v / total for v in ex]


class TestMatmul:
    def test_identity(self):
        out = ad.matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0], [4.0]])
        np.testing.assert_array_equal(out.value, [[3.0], [4.0]])

    def test_scalar(self):
        assert ad.matmul([[2.0]], [[5.0]]).value[0, 0] == 10.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ad.matmul(a, b).value, triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSegmentSoftmax:
    def test_single_row(self):
        for x in (-50.0, 0.0, 3.7, 700.0):
            out = ad.segment_softmax([x], SegmentIndex([0], 1))
            assert out.value.tolist() == [1.0]

    def test_symmetric(self):
        out = ad.segment_softmax([2.5, 2.5], SegmentIndex([0, 0], 1))
        np.testing.assert_array_equal(out.value, [0.5, 0.5])

    def test_matches_scalar_oracle(self):
        out = ad.segment_softmax([1.0, 2.0, 3.0], SegmentIndex([0, 0, 0], 1))
        np.testing.assert_allclose(out.value, scalar_softmax([1.0, 2.0, 3.0]), atol=1e-12)

    def test_interleaved_segments(self):
        scores = np.array([0.3, -1.0, 2.0, 0.5, 4.0])
        ids = np.array([1, 0, 1, 0, 2])
        out = ad.segment_softmax(scores, SegmentIndex(ids, 3)).value
        for s in range(3):
            rows = np.flatnonzero(ids == s)
            np.testing.assert_allclose(out[rows], scalar_softmax(scores[rows].tolist()), atol=1e-12)

    def test_strict_rejects_empty_segment(self):
        with pytest.raises(ad.DegenerateNeighborhoodError):
            ad.segment_softmax([1.0], SegmentIndex([0], 2), strict=True)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000), st.floats(-50, 50))
    def test_sums_to_one_and_shift_invariant(self, rows, segs, seed, shift):
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, segs, rows)
        scores = rng.normal(scale=5.0, size=rows)
        idx = SegmentIndex(ids, segs)
        out = ad.segment_softmax(scores, idx).value
        assert np.all(out > 0)
        sums = np.bincount(ids, out, minlength=segs)
        np.testing.assert_allclose(sums[idx.counts > 0], 1.0, atol=1e-9)
        shifted = ad.segment_softmax(scores + shift, idx).value
        np.testing.assert_allclose(shifted, out, atol=1e-9)


class TestSegmentSum:
    def test_same_segment(self):
        out = ad.segment_sum([[1.0, 1.0], [2.0, 2.0]], SegmentIndex([0, 0], 1))
        np.testing.assert_array_equal(out.value, [[3.0, 3.0]])

    def test_one_row_per_segment(self):
        vals = np.arange(6.0).reshape(3, 2)
        out = ad.segment_sum(vals, SegmentIndex([2, 0, 1], 3))
        np.testing.assert_array_equal(out.value, vals[[1, 2, 0]])

    def test_accumulation_oracle(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(10, 3))
        ids = rng.integers(0, 4, 10)
        expect = np.zeros((4, 3))
        for r in range(10):
            for c in range(3):
                expect[ids[r], c] += vals[r, c]
        np.testing.assert_allclose(ad.segment_sum(vals, SegmentIndex(ids, 4)).value, expect,
                                   atol=1e-12)

    def test_empty_segment_is_zero(self):
        out = ad.segment_sum([[5.0]], SegmentIndex([1], 3)).value
        np.testing.assert_array_equal(out, [[0.0], [5.0], [0.0]])

    def test_bad_segment_id(self):
        with pytest.raises(IndexError):
            SegmentIndex([0, 3], 3)


class TestElementwise:
    def test_leaky_relu(self):
        out = ad.leaky_relu([3.0, -2.0, 0.0], 0.2).value
        np.testing.assert_allclose(out, [3.0, -0.4, 0.0])

    def test_leaky_relu_subgradient_at_zero(self):
        with Tape() as tape:
            x = tape.watch([0.0])
            loss = ad.sum(ad.leaky_relu(x, 0.2))
        assert tape.backward(loss)[x][0] == pytest.approx(0.2)

    def test_layer_norm_constant_row(self):
        out = ad.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4)).value
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_layer_norm_normalized_row(self):
        out = ad.layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2)).value
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-6)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(1).normal(3.0, 7.0, size=(5, 16))
        out = ad.layer_norm(x, np.ones(16), np.zeros(16)).value
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-6)

    def test_dropout_identity_cases(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(ad.dropout(x, 0.0, 1).value, x)
        np.testing.assert_array_equal(ad.dropout(x, 0.7, 1, training=False).value, x)

    def test_dropout_frequency_and_scale(self):
        out = ad.dropout(np.ones(100_000), 0.5, seed=123).value
        survivors = out != 0
        assert abs(survivors.mean() - 0.5) <= 0.01
        np.testing.assert_array_equal(out[survivors], 2.0)

    def test_dropout_seed_determines_mask(self):
        x = np.ones(1000)
        np.testing.assert_array_equal(ad.dropout(x, 0.3, 9).value, ad.dropout(x, 0.3, 9).value)
        assert not np.array_equal(ad.dropout(x, 0.3, 9).value, ad.dropout(x, 0.3, 10).value)

    def test_dropout_rate_error(self):
        with pytest.raises(ValueError):
            ad.dropout(np.ones(3), 1.0, 0)


class TestTape:
    def test_sum_gradient(self):
        with Tape() as tape:
            x = tape.watch([1.0, -2.0, 3.0])
            loss = ad.sum(x)
        np.testing.assert_array_equal(tape.backward(loss)[x], [1.0, 1.0, 1.0])

    def test_quadratic(self):
        with Tape() as tape:
            x = tape.watch([1.0, 2.0])
            loss = ad.sum(x * x)
        np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 4.0])

    def test_detach(self):
        xv, yv = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 2.0])
        with Tape() as tape:
            x, y = tape.watch(xv), tape.watch(yv)
            loss = ad.sum(ad.mul(ad.detach(x), y))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], 0.0)
        np.testing.assert_array_equal(grads[y], xv)

    def test_detach_idempotent(self):
        x = ad.Tensor([1.5, 2.5])
        np.testing.assert_array_equal(ad.detach(ad.detach(x)).value, x.value)

    def test_backward_twice_is_error(self):
        with Tape() as tape:
            x = tape.watch([1.0])
            loss = ad.sum(x)
        tape.backward(loss)
        with pytest.raises(ad.TapeError):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        with Tape() as tape:
            x = tape.watch([1.0, 2.0])
            y = x * 2.0
        with pytest.raises(ad.DimensionError):
            tape.backward(y)

    def test_reverse_recording_order(self):
        with Tape() as tape:
            x = tape.watch([1.0, 2.0])
            a = x * 3.0
            b = ad.exp(a)
            loss = ad.sum(b)
        tape.backward(loss)
        assert tape.visited == sorted(tape.visited, reverse=True)
        assert tape.visited == [loss.node, b.node, a.node]

    def test_constants_do_not_record(self):
        out = ad.matmul(np.eye(2), np.ones((2, 1)))
        assert out.tape is None and out.node is None

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 3))
            with Tape() as tape:
                A, B = tape.watch(a), tape.watch(b)
                loss = ad.sum(ad.log_softmax(ad.dropout(A @ B, 0.3, 11), -1))
            g = tape.backward(loss)
            return loss.value, g[A], g[B]
        r1, r2 = run(), run()
        for u, v in zip(r1, r2):
            assert np.array_equal(u, v)


# every differentiable op against central finite differences at 64-bit
rng = np.random.default_rng(2024)
SEG = SegmentIndex(np.array([0, 2, 0, 1, 2, 2, 0]), 3)
OP_CASES = {
    "add": (lambda x, y: ad.sum(ad.add(x, y) * ad.add(x, y)), dict(x=rng.normal(size=(3, 2)), y=rng.normal(size=(1, 2)))),
    "sub": (lambda x, y: ad.sum(ad.sub(x, y) * x), dict(x=rng.normal(size=(3, 2)), y=rng.normal(size=(3, 2)))),
    "mul": (lambda x, y: ad.sum(ad.mul(x, y)), dict(x=rng.normal(size=(4,)), y=rng.normal(size=(4,)))),
    "matmul": (lambda a, b: ad.sum(ad.exp(ad.matmul(a, b) * 0.3)), dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=(4, 2)))),
    "exp_log": (lambda x: ad.sum(ad.log(ad.add(ad.exp(x), 1.0))), dict(x=rng.normal(size=(5,)))),
    "mean": (lambda x: ad.mean(x * x), dict(x=rng.normal(size=(3, 3)))),
    "sum_axis": (lambda x: ad.sum(ad.exp(ad.sum(x, axis=0) * 0.5)), dict(x=rng.normal(size=(3, 4)))),
    "concat": (lambda x, y: ad.sum(ad.concat([x, y]) * np.arange(5.0)), dict(x=rng.normal(size=(2, 2)), y=rng.normal(size=(2, 3)))),
    "transpose": (lambda x, y: ad.sum(ad.matmul(ad.transpose(x), y)), dict(x=rng.normal(size=(3, 2)), y=rng.normal(size=(3, 4)))),
    "take": (lambda x: ad.sum(ad.exp(ad.take(x, [0, 2, 2, 1]))), dict(x=rng.normal(size=(3, 2)))),
    "slice_cols": (lambda x: ad.sum(ad.slice_cols(x, 1, 3) * ad.slice_cols(x, 0, 2)), dict(x=rng.normal(size=(2, 4)))),
    "leaky_relu": (lambda x: ad.sum(ad.leaky_relu(x) * x), dict(x=rng.normal(size=(8,)) + 0.05)),
    "relu": (lambda x: ad.sum(ad.relu(x) * ad.relu(x)), dict(x=rng.normal(size=(8,)) + 0.05)),
    "l2_norm": (lambda x: ad.sum(ad.l2_norm(x)), dict(x=rng.normal(size=(4, 3)))),
    "l2_distance": (lambda x, y: ad.sum(ad.l2_distance(x, y)), dict(x=rng.normal(size=(4, 3)), y=rng.normal(size=(4, 3)))),
    "pairwise_distance": (lambda x, y: ad.sum(ad.pairwise_distance(x, y)), dict(x=rng.normal(size=(3, 2)), y=rng.normal(size=(4, 2)))),
    "log_softmax": (lambda x: ad.sum(ad.log_softmax(x) * np.array([1.0, 0.0, 2.0])), dict(x=rng.normal(size=(2, 3)))),
    "layer_norm": (lambda x, g, b: ad.sum(ad.layer_norm(x, g, b) * np.arange(4.0)), dict(x=rng.normal(size=(3, 4)), g=rng.normal(size=4), b=rng.normal(size=4))),
    "segment_softmax": (lambda s: ad.sum(ad.segment_softmax(s, SEG) * np.arange(7.0)), dict(s=rng.normal(size=7))),
    "segment_sum": (lambda v: ad.sum(ad.exp(ad.segment_sum(v, SEG))), dict(v=rng.normal(size=(7, 2)))),
    "dropout": (lambda x: ad.sum(ad.dropout(x, 0.4, 7) * x), dict(x=rng.normal(size=(5, 3)))),
    "reshape": (lambda x: ad.sum(ad.reshape(x, (-1,)) * np.arange(6.0)), dict(x=rng.normal(size=(2, 3)))),
    "neg": (lambda x: ad.sum(ad.exp(-x)), dict(x=rng.normal(size=(3,)))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_finite_differences(name):
    fn, inputs = OP_CASES[name]
    res = check(fn, inputs, name)
    assert res.max_rel_error <= 1e-4, res.per_input
