"""Decentralized attention network (DAN) plus the GAT and centRL baselines.

All three share one parameter layout and one forward routine:

* ``dan``    - layer k attends with layer k-1 queries over layer k-2
               keys/values; no entity ever reads its own embedding.
* ``centrl`` - the same layers over a self-loop-augmented neighbor index.
* ``gat``    - classic GAT: queries, keys and values all come from the
               previous layer, over the self-loop-augmented index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kg import CENTRL, DECENTRL, KnowledgeGraph, NeighborIndex, build_neighbor_index
from .seeding import rng_for

DAN, GAT = "dan", "gat"
MODES = (DAN, GAT, CENTRL)
ALIGNMENT, PREDICTION = "alignment", "prediction"
CHECKPOINT_VERSION = 1
DROPOUT_RATE = 0.2

LAYER_KEYS = ("W", "W1", "W2", "a", "Wr", "ln_gain", "ln_bias")


def index_for_mode(g: KnowledgeGraph, mode: str, add_inverse: bool = True) -> NeighborIndex:
    """Neighbor index an encoder mode expects (self-loops for gat/centrl)."""
    mode = _check_mode(mode)
    return build_neighbor_index(g, DECENTRL if mode == DAN else CENTRL, add_inverse)


def _check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"unknown encoder mode {mode!r}; expected one of {MODES}")
    return mode


def xavier_uniform(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class EncoderParams:
    """Named parameter arrays plus the architecture they describe.

    ``num_relations`` counts original relations; the relation table has
    ``2 * num_relations + 1`` rows (inverse and self relations included).
    """

    arrays: dict
    num_entities: int
    num_relations: int
    dim: int
    layers: int
    mode: str = DAN
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_entities: int, num_relations: int, dim: int, layers: int,
             seed: int, mode: str = DAN, dtype=np.float64) -> "EncoderParams":
        if layers < 1:
            raise ValueError("need at least one attention layer")
        rng = rng_for(seed, "encoder-init")
        arrays = {
            "entity": xavier_uniform(rng, (num_entities, dim), dtype),
            "relation": xavier_uniform(rng, (2 * num_relations + 1, dim), dtype),
            "agg.W0": xavier_uniform(rng, (dim, dim), dtype),
        }
        for k in range(1, layers + 1):
            arrays[f"layer{k}.W"] = xavier_uniform(rng, (dim, dim), dtype)
            arrays[f"layer{k}.W1"] = xavier_uniform(rng, (dim, dim), dtype)
            arrays[f"layer{k}.W2"] = xavier_uniform(rng, (dim, dim), dtype)
            arrays[f"layer{k}.a"] = xavier_uniform(rng, (2 * dim, 1), dtype)
            arrays[f"layer{k}.Wr"] = xavier_uniform(rng, (dim, dim), dtype)
            arrays[f"layer{k}.ln_gain"] = np.ones(dim, dtype)
            arrays[f"layer{k}.ln_bias"] = np.zeros(dim, dtype)
        return cls(arrays, num_entities, num_relations, dim, layers, _check_mode(mode))

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()},
                             self.num_entities, self.num_relations, self.dim,
                             self.layers, self.mode, json.loads(json.dumps(self.extra)))

    def __getitem__(self, key):
        return self.arrays[key]

    def meta(self) -> dict:
        return {"version": CHECKPOINT_VERSION, "num_entities": self.num_entities,
                "num_relations": self.num_relations, "dim": self.dim,
                "layers": self.layers, "mode": self.mode, "extra": self.extra}

    def save(self, path):
        """Write an ``.npz`` checkpoint: one row-major array per parameter."""
        payload = {f"param/{k}": v for k, v in self.arrays.items()}
        payload["meta"] = np.array(json.dumps(self.meta(), sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "EncoderParams":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        return cls(arrays, meta["num_entities"], meta["num_relations"], meta["dim"],
                   meta["layers"], meta["mode"], meta.get("extra", {}))


@dataclass
class LayerOutputs:
    """``layers[0]`` is d^-1 (raw embeddings), ``layers[1]`` is d^0, then d^1..d^K."""

    layers: list
    attention: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.layers) - 2

    def d(self, k: int) -> Tensor:
        return self.layers[k + 1]


def _as_tensors(params) -> dict:
    src = params.arrays if isinstance(params, EncoderParams) else params
    return {k: ad.as_tensor(v) for k, v in src.items()}


def mean_aggregate(E, idx: NeighborIndex, W0) -> Tensor:
    """d0[i] = mean over neighbors j of e_j W0; empty neighborhoods give 0."""
    counts = idx.counts.astype(np.float64)
    inv = (1.0 / np.maximum(counts, 1.0))[:, None]
    msgs = ad.take(ad.matmul(E, W0), idx.neighbors)
    return ad.mul(ad.segment_sum(msgs, idx.segments), inv.astype(ad.as_tensor(E).dtype))


def relation_combine(messages, rel_ids, R, proj=None) -> Tensor:
    """Add the (projected) relation embedding of each row to its message."""
    R = ad.as_tensor(R)
    rel_ids = np.asarray(rel_ids)
    if rel_ids.size and (rel_ids.min() < 0 or rel_ids.max() >= R.shape[0]):
        raise IndexError("relation id outside the relation table")
    table = R if proj is None else ad.matmul(R, proj)
    return ad.add(messages, ad.take(table, rel_ids))


def attention_layer(query_src, kv_src, idx: NeighborIndex, p: dict, R=None,
                    strict: bool = False, training: bool = False,
                    rate: float = 0.0, rng=None, return_attention: bool = False):
    """One attention layer over neighbor rows of ``idx``.

    Scores: LeakyReLU(a^T [W1 q_i || W2 kv_j]) normalized over each
    target's rows; output_i = sum_j att_ij (W kv_j [+ Wr r_ij]).
    """
    if training and rate > 0:
        query_src = ad.dropout(query_src, rate, rng, training)
        kv_src = ad.dropout(kv_src, rate, rng, training)
    seg = idx.segments
    if strict:
        seg.require_nonempty()
    q = ad.take(ad.matmul(query_src, p["W1"]), idx.targets)
    k = ad.take(ad.matmul(kv_src, p["W2"]), idx.neighbors)
    scores = ad.reshape(ad.leaky_relu(ad.matmul(ad.concat([q, k], axis=-1), p["a"])), (-1,))
    att = ad.segment_softmax(scores, seg)
    msgs = ad.take(ad.matmul(kv_src, p["W"]), idx.neighbors)
    if R is not None:
        msgs = relation_combine(msgs, idx.relations, R, p.get("Wr"))
    out = ad.segment_sum(ad.mul(msgs, ad.reshape(att, (-1, 1))), seg)
    return (out, att) if return_attention else out


def dan_layer(d_prev, d_prev2, idx: NeighborIndex, p: dict, R=None, **kw):
    """Second-order attention: queries from layer k-1, keys/values from k-2."""
    return attention_layer(d_prev, d_prev2, idx, p, R, **kw)


def gat_layer(d_prev, idx: NeighborIndex, p: dict, R=None, **kw):
    """GAT baseline: the entity's own previous output is the query."""
    return attention_layer(d_prev, d_prev, idx, p, R, **kw)


def residual_combine(g0, g_km1, g_k) -> Tensor:
    g0, g_km1, g_k = ad.as_tensor(g0), ad.as_tensor(g_km1), ad.as_tensor(g_k)
    if not (g0.shape == g_km1.shape == g_k.shape):
        raise ad.DimensionError(f"residual shapes {g0.shape}, {g_km1.shape}, {g_k.shape}")
    return ad.add(ad.add(g0, g_km1), g_k)


def layer_params(params: dict, k: int) -> dict:
    return {key: params[f"layer{k}.{key}"] for key in LAYER_KEYS}


def forward(params, idx: NeighborIndex, K: int | None = None, mode: str | None = None,
            training: bool = False, dropout: float = DROPOUT_RATE, seed=0,
            use_relations: bool = True) -> LayerOutputs:
    """Run the encoder stack; ``params`` is EncoderParams or a dict of tensors.

    The neighbor index must match the mode (see :func:`index_for_mode`).
    """
    if mode is None:
        mode = params.mode if isinstance(params, EncoderParams) else DAN
    mode = _check_mode(mode)
    if K is None:
        K = params.layers if isinstance(params, EncoderParams) else _count_layers(params)
    if K < 1:
        raise ValueError("K must be at least 1")
    if (mode == DAN) != (idx.mode == DECENTRL):
        raise ValueError(f"mode {mode!r} needs a {'decentrl' if mode == DAN else 'centrl'} index")
    P = _as_tensors(params)
    rng = None
    if training and dropout > 0:
        rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, "dropout")
    R = P["relation"] if use_relations else None
    E = P["entity"]
    d0 = mean_aggregate(E, idx, P["agg.W0"])
    outs = [E, d0]
    atts = []
    for k in range(1, K + 1):
        lp = layer_params(P, k)
        kw = dict(training=training, rate=dropout, rng=rng, return_attention=True)
        if mode == GAT:
            h, att = gat_layer(outs[-2] if k == 1 else outs[-1], idx, lp, R, **kw)
        else:
            h, att = dan_layer(outs[-1], outs[-2], idx, lp, R, **kw)
        if training and dropout > 0:
            h = ad.dropout(h, dropout, rng, training)
        h = ad.layer_norm(h, lp["ln_gain"], lp["ln_bias"])
        outs.append(residual_combine(d0, outs[-1], h))
        atts.append(att)
    return LayerOutputs(outs, atts)


def _count_layers(params: dict) -> int:
    k = 0
    while f"layer{k + 1}.W" in params:
        k += 1
    return k


def final_output(layers: LayerOutputs, task: str = ALIGNMENT) -> Tensor:
    """Concatenate g^1..g^K for alignment; last layer only for prediction."""
    if task == ALIGNMENT:
        outs = layers.layers[2:]
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
    if task == PREDICTION:
        return layers.layers[-1]
    raise ValueError(f"unknown task {task!r}")


def encode(params: EncoderParams, idx: NeighborIndex, task: str = ALIGNMENT) -> np.ndarray:
    """Evaluation-mode final outputs as a plain array."""
    return final_output(forward(params, idx, training=False), task).value
