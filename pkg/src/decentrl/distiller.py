"""Mutual-information objectives between encoder outputs and raw embeddings.

The auto-distiller scores each output g_i against a stop-gradient copy of the
embedding table. The raw embeddings therefore learn only through their role
as neighbor inputs to the encoder, and the teacher copies improve from batch
to batch without ever being pulled towards their own student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import rng_for

AUTO, INFONCE, L2 = "auto", "infonce", "l2"
OBJECTIVES = (AUTO, INFONCE, L2)


@dataclass
class DensityParams:
    W_f: np.ndarray  # (output width, embedding width)
    b_f: np.ndarray  # scalar bias, shape (1,)

    @classmethod
    def init(cls, out_dim: int, emb_dim: int, seed: int, dtype=np.float64):
        rng = rng_for(seed, "density-init")
        limit = np.sqrt(6.0 / (out_dim + emb_dim))
        return cls(rng.uniform(-limit, limit, (out_dim, emb_dim)).astype(dtype),
                   np.zeros(1, dtype))

    def as_dict(self) -> dict:
        return {"density.W_f": self.W_f, "density.b_f": self.b_f}


@dataclass
class NegativeBatch:
    """Anchors and a shared candidate set X; ``anchor_col[b]`` locates anchor b.

    Every anchor is in the candidate set and the remaining candidates are
    distinct non-anchor entities, so the candidates for anchor b are the
    anchor itself plus ``|X| - 1`` negatives drawn without replacement.
    """

    anchors: np.ndarray
    candidates: np.ndarray
    anchor_col: np.ndarray

    @property
    def size(self) -> int:
        return len(self.candidates)


def sample_negative_batch(anchors, num_entities: int, size: int,
                          rng: np.random.Generator) -> NegativeBatch:
    """Pad the unique anchors with uniform non-anchor entities up to ``size``.

    When there are more anchors than ``size`` the anchors alone form X.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    uniq = np.unique(anchors)
    need = min(size, num_entities) - len(uniq)
    if need > 0:
        pool = np.setdiff1d(np.arange(num_entities), uniq, assume_unique=True)
        extra = rng.choice(pool, size=need, replace=False)
        cands = np.concatenate([uniq, np.sort(extra)])
    else:
        cands = uniq
    col = np.searchsorted(uniq, anchors)
    return NegativeBatch(anchors, cands, col)


def density(g, e_hat, W_f, b_f) -> Tensor:
    """Log-density matrix g W_f e_hat^T + b_f (exp is left to the softmax)."""
    g, e_hat = ad.as_tensor(g), ad.as_tensor(e_hat)
    W_f = ad.as_tensor(W_f)
    if g.shape[-1] != W_f.shape[0] or e_hat.shape[-1] != W_f.shape[1]:
        raise ad.DimensionError(
            f"density widths: g {g.shape}, W_f {W_f.shape}, e_hat {e_hat.shape}")
    return ad.add(ad.matmul(ad.matmul(g, W_f), ad.transpose(e_hat)), b_f)


def info_nce_loss(logdens, anchor_col) -> Tensor:
    """Mean over rows of -log softmax(row)[anchor column]."""
    logdens = ad.as_tensor(logdens)
    anchor_col = np.asarray(anchor_col, dtype=np.intp)
    onehot = np.zeros(logdens.shape, dtype=logdens.dtype)
    onehot[np.arange(len(anchor_col)), anchor_col] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logdens, axis=-1), onehot), axis=-1)
    return ad.neg(ad.mean(picked))


def auto_distill_loss(g, E, batch: NegativeBatch, W_f, b_f) -> Tensor:
    """InfoNCE between g[anchors] and a detached copy of E[candidates]."""
    e_hat = ad.detach(ad.take(E, batch.candidates))
    return info_nce_loss(density(ad.take(g, batch.anchors), e_hat, W_f, b_f), batch.anchor_col)


def joint_infonce_loss(g, E, batch: NegativeBatch, W_f, b_f) -> Tensor:
    """Ablation: the same objective with gradients into both arguments."""
    e = ad.take(E, batch.candidates)
    return info_nce_loss(density(ad.take(g, batch.anchors), e, W_f, b_f), batch.anchor_col)


def l2_align_loss(g, E, anchors, proj=None) -> Tensor:
    """Mean squared distance between g_i (optionally g_i proj) and a detached e_i.

    Averaged over anchors and coordinates.
    """
    anchors = np.asarray(anchors, dtype=np.intp)
    gi = ad.take(g, anchors)
    if proj is not None:
        gi = ad.matmul(gi, proj)
    diff = ad.sub(gi, ad.detach(ad.take(E, anchors)))
    return ad.mean(ad.mul(diff, diff))


def mi_lower_bound_estimate(loss: float, sample_size: int) -> float:
    """log|X| - InfoNCE loss; never exceeds log|X| because the loss is >= 0."""
    return float(np.log(sample_size) - float(ad.as_tensor(loss).value))


def distill_loss(kind: str, g, E, batch: NegativeBatch, W_f, b_f) -> Tensor:
    if kind == AUTO:
        return auto_distill_loss(g, E, batch, W_f, b_f)
    if kind == INFONCE:
        return joint_infonce_loss(g, E, batch, W_f, b_f)
    if kind == L2:
        g = ad.as_tensor(g)
        proj = None if g.shape[-1] == ad.as_tensor(E).shape[-1] else W_f
        return l2_align_loss(g, E, batch.anchors, proj)
    raise ValueError(f"unknown distill objective {kind!r}")
