import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decentrl import autodiff as ad
from decentrl import encoder as enc
from decentrl import kg
from decentrl.kg import Vocab


def graph(triples, n, R=1):
    return kg.KnowledgeGraph(Vocab(f"e{i}" for i in range(n)), Vocab(f"r{i}" for i in range(R)),
                             np.asarray(triples, dtype=np.int64).reshape(-1, 3))


def loop_attention(q_src, kv_src, idx, p, R):
    """Per-entity scalar loops over the neighbor list."""
    n, D = q_src.shape[0], p["W"].shape[1]
    out = np.zeros((n, D))
    for i in range(n):
        nbrs = idx.neighbor_list(i)
        if not nbrs:
            continue
        scores = []
        for j, r, _ in nbrs:
            z = np.concatenate([q_src[i] @ p["W1"], kv_src[j] @ p["W2"]]) @ p["a"][:, 0]
            scores.append(z if z > 0 else 0.2 * z)
        scores = np.array(scores)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for wt, (j, r, _) in zip(w, nbrs):
            out[i] += wt * (kv_src[j] @ p["W"] + R[r] @ p["Wr"])
    return out


def loop_layer_norm(h, gain, bias, eps=1e-6):
    out = np.zeros_like(h)
    for i, row in enumerate(h):
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        out[i] = (row - mu) / np.sqrt(var + eps) * gain + bias
    return out


def star(n_leaves):
    return graph([[0, 0, i] for i in range(1, n_leaves + 1)], n_leaves + 1)


class TestForward:
    def test_shapes(self):
        g = kg.generate_synthetic_kg(30, 3, 3.0, 0)
        p = enc.EncoderParams.init(30, 3, 8, 3, 0)
        out = enc.forward(p, enc.index_for_mode(g, enc.DAN))
        assert out.K == 3 and len(out.layers) == 5
        assert all(t.shape == (30, 8) for t in out.layers)
        assert enc.final_output(out, enc.ALIGNMENT).shape == (30, 24)
        assert enc.final_output(out, enc.PREDICTION).shape == (30, 8)

    def test_relation_table_rows(self):
        p = enc.EncoderParams.init(5, 4, 3, 1, 0)
        assert p["relation"].shape == (9, 3)

    @pytest.mark.parametrize("mode", enc.MODES)
    def test_matches_loop_oracle(self, mode):
        g = kg.generate_synthetic_kg(12, 2, 3.0, 3)
        idx = enc.index_for_mode(g, mode)
        P = enc.EncoderParams.init(12, 2, 4, 2, 5, mode)
        out = enc.forward(P, idx)
        E, R = P["entity"], P["relation"]
        counts = np.maximum(idx.counts, 1)
        d0 = np.zeros((12, 4))
        for i in range(12):
            for j, _, _ in idx.neighbor_list(i):
                d0[i] += E[j] @ P["agg.W0"]
        d0 /= counts[:, None]
        outs = [E, d0]
        for k in (1, 2):
            lp = enc.layer_params(P.arrays, k)
            if mode == enc.GAT:
                src = outs[-2] if k == 1 else outs[-1]
                h = loop_attention(src, src, idx, lp, R)
            else:
                h = loop_attention(outs[-1], outs[-2], idx, lp, R)
            outs.append(d0 + outs[-1] + loop_layer_norm(h, lp["ln_gain"], lp["ln_bias"]))
        for got, want in zip(out.layers, outs):
            np.testing.assert_allclose(got.value, want, atol=1e-10)

    def test_mode_index_mismatch(self):
        g = kg.generate_synthetic_kg(10, 2, 2.0, 0)
        p = enc.EncoderParams.init(10, 2, 4, 1, 0)
        with pytest.raises(ValueError):
            enc.forward(p, enc.index_for_mode(g, enc.CENTRL), mode=enc.DAN)

    def test_eval_ignores_dropout(self):
        g = kg.generate_synthetic_kg(20, 2, 3.0, 0)
        p = enc.EncoderParams.init(20, 2, 4, 2, 0)
        idx = enc.index_for_mode(g, enc.DAN)
        a = enc.forward(p, idx, training=False, dropout=0.5, seed=1).layers[-1].value
        b = enc.forward(p, idx, training=False, dropout=0.5, seed=2).layers[-1].value
        np.testing.assert_array_equal(a, b)

    def test_zero_degree_entity_gets_bias_only(self):
        g = graph([[0, 0, 1]], 3)
        p = enc.EncoderParams.init(3, 1, 4, 2, 0)
        out = enc.forward(p, enc.index_for_mode(g, enc.DAN))
        np.testing.assert_array_equal(out.layers[1].value[2], 0.0)
        np.testing.assert_allclose(out.layers[2].value[2], p["layer1.ln_bias"])

    def test_strict_raises_on_degenerate(self):
        g = graph([[0, 0, 1]], 3)
        idx = enc.index_for_mode(g, enc.DAN)
        p = enc.EncoderParams.init(3, 1, 4, 1, 0)
        lp = enc.layer_params(p.arrays, 1)
        with pytest.raises(ad.DegenerateNeighborhoodError):
            enc.attention_layer(p["entity"], p["entity"], idx, lp, strict=True)


class TestAttention:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(3, 25), st.integers(0, 10_000), st.sampled_from(enc.MODES))
    def test_rows_sum_to_one(self, n, seed, mode):
        g = kg.generate_synthetic_kg(n, 2, 2.5, seed)
        idx = enc.index_for_mode(g, mode)
        p = enc.EncoderParams.init(n, 2, 4, 3, seed, mode)
        out = enc.forward(p, idx)
        has = idx.counts > 0
        for att in out.attention:
            sums = np.bincount(idx.targets, att.value, minlength=n)
            np.testing.assert_allclose(sums[has], 1.0, atol=1e-9)


class TestInductive:
    @pytest.mark.parametrize("seed", range(10))
    def test_dan_blind_to_own_embedding(self, seed):
        g = star(int(np.random.default_rng(seed).integers(2, 8)))
        n = g.num_entities
        idx_dan = kg.build_neighbor_index(g, kg.DECENTRL, add_inverse=False)
        p = enc.EncoderParams.init(n, 1, 6, 3, seed, enc.DAN)
        before = enc.forward(p, idx_dan).layers[-1].value[0]
        q = p.copy()
        q.arrays["entity"][0] = np.random.default_rng(seed + 100).normal(size=6)
        after = enc.forward(q, idx_dan).layers[-1].value[0]
        assert np.array_equal(before, after)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = enc.EncoderParams.init(7, 2, 3, 2, 4, enc.GAT)
        p.extra["task"] = enc.ALIGNMENT
        p.save(tmp_path / "c.npz")
        q = enc.EncoderParams.load(tmp_path / "c.npz")
        assert (q.num_entities, q.num_relations, q.dim, q.layers, q.mode) == (7, 2, 3, 2, enc.GAT)
        assert q.extra == {"task": enc.ALIGNMENT}
        for k, v in p.arrays.items():
            np.testing.assert_array_equal(q[k], v)

    def test_init_deterministic(self):
        a, b = enc.EncoderParams.init(5, 1, 3, 2, 9), enc.EncoderParams.init(5, 1, 3, 2, 9)
        for k in a.arrays:
            np.testing.assert_array_equal(a[k], b[k])

    def test_rejects_zero_layers(self):
        with pytest.raises(ValueError):
            enc.EncoderParams.init(5, 1, 3, 0, 0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            enc.EncoderParams.init(5, 1, 3, 1, 0, "gcn")


class TestResidual:
    def test_sum(self):
        out = enc.residual_combine(np.ones((2, 2)), np.full((2, 2), 2.0), np.full((2, 2), 3.0))
        np.testing.assert_array_equal(out.value, 6.0)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            enc.residual_combine(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2)))

    def test_relation_id_bounds(self):
        with pytest.raises(IndexError):
            enc.relation_combine(np.zeros((1, 2)), [3], np.zeros((3, 2)))
