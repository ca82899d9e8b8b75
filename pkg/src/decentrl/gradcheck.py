"""Central finite-difference checks for anything built on the tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    per_input: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-12); 0 when both are (near) zero."""
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if den < 1e-12:
        return 0.0
    return float(num / den)


def numeric_gradient(fn, inputs: dict, name: str, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``fn(**inputs)`` w.r.t. ``inputs[name]``.

    ``fn`` receives plain arrays here, which keeps this path free of the tape.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    x = base[name]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar(fn(**base))
        flat[i] = orig - step
        lo = _scalar(fn(**base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def _scalar(out) -> float:
    v = out.value if isinstance(out, Tensor) else np.asarray(out)
    return float(v.reshape(-1)[0])


def analytic_gradient(fn, inputs: dict) -> dict:
    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in inputs.items()}
        loss = fn(**watched)
    grads = tape.backward(loss)
    return {k: grads[t] for k, t in watched.items()}


def check(fn, inputs: dict, name: str = "fn", step: float = STEP,
          analytic: dict | None = None) -> GradCheckResult:
    """Compare tape gradients of ``fn`` with central differences.

    ``analytic`` may be supplied to check an externally computed gradient
    (e.g. a deliberately corrupted one).
    """
    analytic = analytic if analytic is not None else analytic_gradient(fn, inputs)
    errs = {k: relative_error(analytic[k], numeric_gradient(fn, inputs, k, step))
            for k in inputs}
    return GradCheckResult(name, max(errs.values()) if errs else 0.0, errs)


def op_cases(seed: int = 0) -> dict:
    """name -> (fn, inputs) for every differentiable primitive."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    seg = ad.SegmentIndex(np.array([0, 2, 0, 1, 2, 2, 0]), 3)
    n = rng.normal
    return {
        "add": (lambda x, y: ad.sum(ad.mul(ad.add(x, y), ad.add(x, y))),
                dict(x=n(size=(3, 2)), y=n(size=(1, 2)))),
        "sub": (lambda x, y: ad.sum(ad.mul(ad.sub(x, y), x)),
                dict(x=n(size=(3, 2)), y=n(size=(3, 2)))),
        "mul": (lambda x, y: ad.sum(ad.mul(x, y)), dict(x=n(size=4), y=n(size=4))),
        "neg": (lambda x: ad.sum(ad.exp(ad.neg(x))), dict(x=n(size=3))),
        "matmul": (lambda a, b: ad.sum(ad.exp(ad.mul(ad.matmul(a, b), 0.3))),
                   dict(a=n(size=(3, 4)), b=n(size=(4, 2)))),
        "exp_log": (lambda x: ad.sum(ad.log(ad.add(ad.exp(x), 1.0))), dict(x=n(size=5))),
        "mean": (lambda x: ad.mean(ad.mul(x, x)), dict(x=n(size=(3, 3)))),
        "transpose": (lambda x, y: ad.sum(ad.matmul(ad.transpose(x), y)),
                      dict(x=n(size=(3, 2)), y=n(size=(3, 4)))),
        "reshape": (lambda x: ad.sum(ad.mul(ad.reshape(x, (-1,)), np.arange(6.0))),
                    dict(x=n(size=(2, 3)))),
        "concat": (lambda x, y: ad.sum(ad.mul(ad.concat([x, y]), np.arange(5.0))),
                   dict(x=n(size=(2, 2)), y=n(size=(2, 3)))),
        "take": (lambda x: ad.sum(ad.exp(ad.take(x, [0, 2, 2, 1]))), dict(x=n(size=(3, 2)))),
        "slice_cols": (lambda x: ad.sum(ad.mul(ad.slice_cols(x, 1, 3), ad.slice_cols(x, 0, 2))),
                       dict(x=n(size=(2, 4)))),
        "relu": (lambda x: ad.sum(ad.mul(ad.relu(x), x)), dict(x=n(size=8) + 0.05)),
        "leaky_relu": (lambda x: ad.sum(ad.mul(ad.leaky_relu(x), x)), dict(x=n(size=8) + 0.05)),
        "l2_norm": (lambda x: ad.sum(ad.l2_norm(x)), dict(x=n(size=(4, 3)))),
        "l2_distance": (lambda x, y: ad.sum(ad.l2_distance(x, y)),
                        dict(x=n(size=(4, 3)), y=n(size=(4, 3)))),
        "pairwise_distance": (lambda x, y: ad.sum(ad.pairwise_distance(x, y)),
                              dict(x=n(size=(3, 2)), y=n(size=(4, 2)))),
        "log_softmax": (lambda x: ad.sum(ad.mul(ad.log_softmax(x), np.array([1.0, 0.0, 2.0]))),
                        dict(x=n(size=(2, 3)))),
        "segment_sum": (lambda v: ad.sum(ad.exp(ad.segment_sum(v, seg))), dict(v=n(size=(7, 2)))),
        "segment_softmax": (lambda s: ad.sum(ad.mul(ad.segment_softmax(s, seg), np.arange(7.0))),
                            dict(s=n(size=7))),
        "layer_norm": (lambda x, g, b: ad.sum(ad.mul(ad.layer_norm(x, g, b), np.arange(4.0))),
                       dict(x=n(size=(3, 4)), g=n(size=4), b=n(size=4))),
        "dropout": (lambda x: ad.sum(ad.mul(ad.dropout(x, 0.4, 7), x)), dict(x=n(size=(5, 3)))),
    }


def model_case(seed: int = 0, n_entities: int = 12, dim: int = 4, layers: int = 4,
               mode: str = "dan"):
    """Full encoder + auto-distiller + alignment loss on a tiny aligned pair.

    The distiller's teacher table is a constant copy of the embeddings, which
    is what the stop-gradient means; finite differences cannot see a detach.
    """
    from . import autodiff as ad
    from . import distiller as dist
    from . import encoder as enc
    from . import kg, tasks
    from .seeding import rng_for

    g = kg.generate_synthetic_kg(n_entities // 2, 2, 3.0, seed)
    src, copy, pairs = kg.make_aligned_copy(g, seed, 0.0)
    merged = kg.merge_graphs(src, copy)
    idx = enc.index_for_mode(merged, mode)
    p = enc.EncoderParams.init(merged.num_entities, merged.num_relations, dim, layers, seed, mode)
    dens = dist.DensityParams.init(dim * layers, dim, seed)
    rng = rng_for(seed, "gradcheck")
    pos = pairs.offset(src.num_entities).pairs[:3]
    neg = np.stack([pos[:, 0], np.roll(pos[:, 1], 1)], axis=1)
    batch = dist.sample_negative_batch(np.unique(pos), merged.num_entities, 8, rng)
    teacher = p.arrays["entity"][batch.candidates].copy()
    inputs = dict(p.arrays)
    inputs.update(dens.as_dict())
    keys = sorted(inputs)

    def fn(**arrays):
        layers_out = enc.forward({k: arrays[k] for k in p.arrays}, idx, layers, mode,
                                 training=True, dropout=0.2, seed=seed)
        out = enc.final_output(layers_out, enc.ALIGNMENT)
        task = tasks.alignment_loss(out, pos, neg, margin=3.0, alpha=0.5)
        logd = dist.density(ad.take(out, batch.anchors), teacher,
                            arrays["density.W_f"], arrays["density.b_f"])
        return ad.add(task, dist.info_nce_loss(logd, batch.anchor_col))

    return fn, {k: inputs[k] for k in keys}


def standard_suite(seed: int = 0) -> list[GradCheckResult]:
    results = [check(fn, inputs, name) for name, (fn, inputs) in op_cases(seed).items()]
    for mode in ("dan", "gat", "centrl"):
        fn, inputs = model_case(seed, mode=mode)
        results.append(check(fn, inputs, f"model_{mode}_4layer"))
    return results
