"""Entity alignment and entity prediction training on top of the encoder."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import distiller as dist
from . import encoder as enc
from .evaluation import rank_alignment, rank_prediction
from .kg import AlignmentPairs, KnowledgeGraph, NeighborIndex, merge_graphs
from .seeding import rng_for

log = logging.getLogger(__name__)

TRANSE, DISTMULT, COMPLEX = "transe", "distmult", "complex"
DECODERS = (TRANSE, DISTMULT, COMPLEX)

HISTORY_HEADER = ("epoch", "task_loss", "distill_loss", "mi_bound", "val_h1", "val_mrr")
STEP_HEADER = ("step", "epoch", "task_loss", "distill_loss", "mi_bound", "log_num_candidates")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AlignConfig:
    margin: float = 1.5
    alpha: float = 0.1
    neg_per_pos: int = 10
    batch_size: int = 4500
    epochs: int = 100
    lr: float = 1e-3
    distill_weight: float = 1.0
    distill: str = dist.AUTO
    distill_candidates: int = 64
    mode: str = enc.DAN
    dim: int = 256
    layers: int = 4
    dropout: float = enc.DROPOUT_RATE
    add_inverse: bool = True
    share_relations: bool = False
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class PredictConfig:
    decoder: str = TRANSE
    neg_per_triple: int = 256
    batch_size: int = 1024
    epochs: int = 100
    lr: float = 1e-3
    distill_weight: float = 0.001
    distill: str = dist.AUTO
    distill_candidates: int = 256
    filtered: bool = True
    mode: str = enc.DAN
    dim: int = 128
    layers: int = 2
    dropout: float = enc.DROPOUT_RATE
    add_inverse: bool = True
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        self.decoder = self.decoder.lower()
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if self.decoder == COMPLEX and self.dim % 2:
            raise ValueError("ComplEx needs an even dimension")


# ------------------------------------------------------------------ losses

def alignment_loss(g, pos, neg, margin: float, alpha: float) -> ad.Tensor:
    """sum_pos ||g_i - g_j|| + alpha * sum_neg [margin - ||g_i' - g_j'||]_+."""
    pos = np.asarray(pos, dtype=np.intp).reshape(-1, 2)
    neg = np.asarray(neg, dtype=np.intp).reshape(-1, 2)
    pos_term = ad.sum(ad.l2_distance(ad.take(g, pos[:, 0]), ad.take(g, pos[:, 1])))
    if not len(neg):
        return pos_term
    d = ad.l2_distance(ad.take(g, neg[:, 0]), ad.take(g, neg[:, 1]))
    hinge = ad.sum(ad.relu(ad.sub(margin, d)))
    return ad.add(pos_term, ad.mul(hinge, alpha))


def sample_negative_pairs(pos, k: int, rng: np.random.Generator, left_pool,
                          right_pool, known=None) -> np.ndarray:
    """``k`` corruptions per positive, replacing one side uniformly from its pool.

    Corruptions that hit a known positive pair are redrawn.
    """
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    if k == 0 or not len(pos):
        return np.zeros((0, 2), np.int64)
    left_pool, right_pool = np.asarray(left_pool), np.asarray(right_pool)
    known = {tuple(p) for p in (pos if known is None else np.asarray(known).reshape(-1, 2))}
    out = np.repeat(pos, k, axis=0)
    side = rng.random(len(out)) < 0.5  # True: replace the left entity
    out[side, 0] = rng.choice(left_pool, side.sum())
    out[~side, 1] = rng.choice(right_pool, (~side).sum())
    for _ in range(100):
        bad = np.array([tuple(p) in known for p in out.tolist()], dtype=bool)
        if not bad.any():
            break
        lb, rb = bad & side, bad & ~side
        out[lb, 0] = rng.choice(left_pool, lb.sum())
        out[rb, 1] = rng.choice(right_pool, rb.sum())
    else:
        out = out[~bad]
    return out


def transe_score(g_s, r, g_o) -> ad.Tensor:
    """-||g_s + r - g_o|| per row."""
    return ad.neg(ad.l2_norm(ad.sub(ad.add(g_s, r), g_o)))


def distmult_score(g_s, r, g_o) -> ad.Tensor:
    return ad.sum(ad.mul(ad.mul(g_s, r), g_o), axis=-1)


def _complex_query(g_s, r):
    g_s, r = ad.as_tensor(g_s), ad.as_tensor(r)
    h = g_s.shape[-1] // 2
    s_re, s_im = ad.slice_cols(g_s, 0, h), ad.slice_cols(g_s, h, 2 * h)
    r_re, r_im = ad.slice_cols(r, 0, h), ad.slice_cols(r, h, 2 * h)
    q_re = ad.sub(ad.mul(s_re, r_re), ad.mul(s_im, r_im))
    q_im = ad.add(ad.mul(s_re, r_im), ad.mul(s_im, r_re))
    return ad.concat([q_re, q_im], axis=-1)


def complex_score(g_s, r, g_o) -> ad.Tensor:
    """Re(<s, r, conj(o)>) with vectors stored as [real half || imaginary half]."""
    return ad.sum(ad.mul(_complex_query(g_s, r), g_o), axis=-1)


def score_matrix(decoder: str, g_s, r, cands) -> ad.Tensor:
    """Scores of each (s, r) query row against every candidate row."""
    if decoder == TRANSE:
        return ad.neg(ad.pairwise_distance(ad.add(g_s, r), cands))
    if decoder == DISTMULT:
        return ad.matmul(ad.mul(g_s, r), ad.transpose(cands))
    if decoder == COMPLEX:
        return ad.matmul(_complex_query(g_s, r), ad.transpose(cands))
    raise ValueError(f"unknown decoder {decoder!r}")


def prediction_loss(scores, true_col) -> ad.Tensor:
    """Softmax cross-entropy of the true candidate against sampled ones."""
    return dist.info_nce_loss(scores, true_col)


# --------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        """Update ``params`` (name -> array) in place from ``grads`` (name -> array)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------- history

@dataclass
class History:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def to_csv(self) -> str:
        return _csv(HISTORY_HEADER, self.epochs)

    def steps_csv(self) -> str:
        return _csv(STEP_HEADER, self.steps)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value} at epoch {epoch}, step {step}")


def _diag_bound(g, E, batch, W_f, b_f) -> float:
    loss = dist.auto_distill_loss(ad.detach(g), ad.detach(E), batch, W_f, b_f)
    return dist.mi_lower_bound_estimate(loss.value, batch.size)


def _distill_step(kind, g, E, batch, W_f, b_f):
    """Distill loss tensor plus the InfoNCE-based MI bound for the log."""
    loss = dist.distill_loss(kind, g, E, batch, W_f, b_f)
    if kind == dist.L2:
        bound = _diag_bound(g, E, batch, ad.detach(W_f), ad.detach(b_f))
    else:
        bound = dist.mi_lower_bound_estimate(loss.value, batch.size)
    return loss, bound


# ---------------------------------------------------------------- alignment

@dataclass
class AlignmentModel:
    params: enc.EncoderParams
    density: dist.DensityParams
    graph: KnowledgeGraph
    index: NeighborIndex
    pairs: AlignmentPairs  # merged-graph ids
    n1: int

    def outputs(self, index: NeighborIndex | None = None) -> np.ndarray:
        return enc.encode(self.params, index or self.index, enc.ALIGNMENT)


def prepare_alignment(g1: KnowledgeGraph, g2: KnowledgeGraph, pairs: AlignmentPairs,
                      cfg: AlignConfig):
    merged = merge_graphs(g1, g2, share_relations=cfg.share_relations)
    idx = enc.index_for_mode(merged, cfg.mode, cfg.add_inverse)
    return merged, idx, pairs.offset(g1.num_entities)


def _all_params(P: enc.EncoderParams, D: dist.DensityParams) -> dict:
    out = dict(P.arrays)
    out.update(D.as_dict())
    return out


def train_alignment(g1: KnowledgeGraph, g2: KnowledgeGraph, pairs: AlignmentPairs,
                    cfg: AlignConfig, init: enc.EncoderParams | None = None,
                    callback=None):
    """Train the encoder on seed pairs tagged ``train``.

    Validation uses pairs tagged ``valid`` when present (enabling early
    stopping with ``cfg.patience``), otherwise the training pairs themselves.
    Returns ``(AlignmentModel, History)``.
    """
    merged, idx, mpairs = prepare_alignment(g1, g2, pairs, cfg)
    n1 = g1.num_entities
    params = init.copy() if init is not None else enc.EncoderParams.init(
        merged.num_entities, merged.num_relations, cfg.dim, cfg.layers, cfg.seed, cfg.mode)
    params.extra.update(task=enc.ALIGNMENT)
    out_dim = cfg.dim * params.layers
    density = dist.DensityParams.init(out_dim, cfg.dim, cfg.seed)
    model = AlignmentModel(params, density, merged, idx, mpairs, n1)
    history = History()
    train = mpairs.train
    has_valid = len(mpairs.valid) > 0
    val = mpairs.valid if has_valid else train
    left_pool = np.arange(n1)
    right_pool = np.arange(n1, merged.num_entities)
    arrays = _all_params(params, density)
    opt = Adam(cfg.lr)
    best = (-1.0, None)
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        rng = rng_for(cfg.seed, "align-epoch", epoch)
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        nb = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            neg = sample_negative_pairs(batch, cfg.neg_per_pos, rng, left_pool, right_pool, train)
            anchors = np.unique(np.concatenate([batch.ravel(), neg.ravel()]))
            nbatch = dist.sample_negative_batch(anchors, merged.num_entities,
                                                cfg.distill_candidates, rng)
            with ad.Tape() as tape:
                W = {k: tape.watch(v) for k, v in arrays.items()}
                layers = enc.forward(W, idx, params.layers, cfg.mode, training=True,
                                     dropout=cfg.dropout, seed=rng_for(cfg.seed, "dropout", step))
                g = enc.final_output(layers, enc.ALIGNMENT)
                task = alignment_loss(g, batch, neg, cfg.margin, cfg.alpha)
                dl, bound = _distill_step(cfg.distill, g, W["entity"], nbatch,
                                          W["density.W_f"], W["density.b_f"])
                loss = ad.add(task, ad.mul(dl, cfg.distill_weight))
            _check_finite(float(loss.value), "loss", epoch, step)
            grads = tape.backward(loss)
            opt.step(arrays, {k: grads[t] for k, t in W.items()})
            row = dict(step=step, epoch=epoch, task_loss=float(task.value),
                       distill_loss=float(dl.value), mi_bound=bound,
                       log_num_candidates=math.log(nbatch.size))
            history.steps.append(row)
            sums += (row["task_loss"], row["distill_loss"], bound)
            nb += 1
            step += 1
        _sync(params, density, arrays)
        rep = rank_alignment(model.outputs(), model.outputs(), val)
        history.epochs.append(dict(epoch=epoch, task_loss=sums[0] / max(nb, 1),
                                   distill_loss=sums[1] / max(nb, 1),
                                   mi_bound=sums[2] / max(nb, 1),
                                   val_h1=rep.hits(1), val_mrr=rep.mrr))
        if callback is not None:
            callback(epoch, history.epochs[-1])
        if has_valid:
            if rep.hits(1) > best[0]:
                best, stale = (rep.hits(1), {k: v.copy() for k, v in arrays.items()}), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (best val H@1 %.4f)", epoch, best[0])
                    break
    if has_valid and best[1] is not None:
        arrays.update(best[1])
        _sync(params, density, arrays)
    return model, history


def _sync(params: enc.EncoderParams, density: dist.DensityParams, arrays: dict):
    for k in params.arrays:
        params.arrays[k] = arrays[k]
    density.W_f = arrays["density.W_f"]
    density.b_f = arrays["density.b_f"]


# --------------------------------------------------------------- prediction

@dataclass
class PredictionModel:
    params: enc.EncoderParams
    density: dist.DensityParams
    decoder: str
    relations: np.ndarray  # (2R, D) decoder relation table
    graph: KnowledgeGraph
    index: NeighborIndex

    def scorer(self, index: NeighborIndex | None = None):
        g = enc.encode(self.params, index or self.index, enc.PREDICTION)

        def score(heads, rels):
            return score_matrix(self.decoder, g[heads], self.relations[rels], g).value

        return score

    def evaluate(self, test_triples, known_triples=None, filtered=True, index=None):
        return rank_prediction(self.scorer(index), test_triples, self.graph.num_relations,
                               known_triples, filtered)


def train_prediction(g: KnowledgeGraph, cfg: PredictConfig, valid_triples=None,
                     init: enc.EncoderParams | None = None, callback=None):
    """Train encoder + decoder on the triples of ``g`` (tail and inverse-head queries).

    Returns ``(PredictionModel, History)``.
    """
    idx = enc.index_for_mode(g, cfg.mode, cfg.add_inverse)
    params = init.copy() if init is not None else enc.EncoderParams.init(
        g.num_entities, g.num_relations, cfg.dim, cfg.layers, cfg.seed, cfg.mode)
    params.extra.update(task=enc.PREDICTION, decoder=cfg.decoder)
    density = dist.DensityParams.init(cfg.dim, cfg.dim, cfg.seed)
    rel_rng = rng_for(cfg.seed, "decoder-init")
    R = 2 * g.num_relations
    limit = np.sqrt(6.0 / (R + cfg.dim))
    dec_rel = rel_rng.uniform(-limit, limit, (R, cfg.dim))
    model = PredictionModel(params, density, cfg.decoder, dec_rel, g, idx)
    s, r, o = g.triples.T
    queries = np.stack([np.concatenate([s, o]), np.concatenate([r, r + g.num_relations]),
                        np.concatenate([o, s])], axis=1)
    has_valid = valid_triples is not None and len(valid_triples) > 0
    arrays = _all_params(params, density)
    arrays["decoder.relation"] = dec_rel
    opt = Adam(cfg.lr)
    history = History()
    best, stale, step = (-1.0, None), 0, 0
    for epoch in range(cfg.epochs):
        rng = rng_for(cfg.seed, "predict-epoch", epoch)
        order = rng.permutation(len(queries))
        sums, nb = np.zeros(3), 0
        for start in range(0, len(queries), cfg.batch_size):
            q = queries[order[start:start + cfg.batch_size]]
            cand = dist.sample_negative_batch(q[:, 2], g.num_entities, cfg.neg_per_triple + 1, rng)
            nbatch = dist.sample_negative_batch(np.unique(q[:, [0, 2]]), g.num_entities,
                                                cfg.distill_candidates, rng)
            with ad.Tape() as tape:
                W = {k: tape.watch(v) for k, v in arrays.items()}
                layers = enc.forward(W, idx, params.layers, cfg.mode, training=True,
                                     dropout=cfg.dropout, seed=rng_for(cfg.seed, "dropout", step))
                gout = enc.final_output(layers, enc.PREDICTION)
                scores = score_matrix(cfg.decoder, ad.take(gout, q[:, 0]),
                                      ad.take(W["decoder.relation"], q[:, 1]),
                                      ad.take(gout, cand.candidates))
                task = prediction_loss(scores, cand.anchor_col)
                dl, bound = _distill_step(cfg.distill, gout, W["entity"], nbatch,
                                          W["density.W_f"], W["density.b_f"])
                loss = ad.add(task, ad.mul(dl, cfg.distill_weight))
            _check_finite(float(loss.value), "loss", epoch, step)
            grads = tape.backward(loss)
            opt.step(arrays, {k: grads[t] for k, t in W.items()})
            row = dict(step=step, epoch=epoch, task_loss=float(task.value),
                       distill_loss=float(dl.value), mi_bound=bound,
                       log_num_candidates=math.log(nbatch.size))
            history.steps.append(row)
            sums += (row["task_loss"], row["distill_loss"], bound)
            nb += 1
            step += 1
        _sync(params, density, arrays)
        model.relations = arrays["decoder.relation"]
        if has_valid:
            rep, _ = model.evaluate(valid_triples, g.triples, cfg.filtered)
            val_h1, val_mrr = rep.hits(1), rep.mrr
        else:
            val_h1 = val_mrr = float("nan")
        history.epochs.append(dict(epoch=epoch, task_loss=sums[0] / max(nb, 1),
                                   distill_loss=sums[1] / max(nb, 1),
                                   mi_bound=sums[2] / max(nb, 1),
                                   val_h1=val_h1, val_mrr=val_mrr))
        if callback is not None:
            callback(epoch, history.epochs[-1])
        if has_valid:
            if val_h1 > best[0]:
                best, stale = (val_h1, {k: v.copy() for k, v in arrays.items()}), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if has_valid and best[1] is not None:
        arrays.update(best[1])
        _sync(params, density, arrays)
        model.relations = arrays["decoder.relation"]
    params.arrays["decoder.relation"] = model.relations
    return model, history


def config_fields(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def config_dict(cfg) -> dict:
    return asdict(cfg)
