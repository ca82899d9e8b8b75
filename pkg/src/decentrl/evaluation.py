"""Ranking metrics for entity alignment and entity prediction.

Ties are always broken by ascending candidate id: a candidate with the same
score (or distance) as the target but a smaller id ranks ahead of it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc

HITS_AT = (1, 3, 10)


@dataclass
class RankingReport:
    ranks: np.ndarray
    tag: str = ""
    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if self.ranks.size and self.ranks.min() < 1:
            raise ValueError("ranks start at 1")

    @property
    def count(self) -> int:
        return int(self.ranks.size)

    def hits(self, k: int) -> float:
        return float(np.mean(self.ranks <= k)) if self.count else 0.0

    @property
    def mr(self) -> float:
        return float(np.mean(self.ranks)) if self.count else 0.0

    @property
    def mrr(self) -> float:
        return float(np.mean(1.0 / self.ranks)) if self.count else 0.0

    def metrics(self) -> dict:
        out = {f"hits@{k}": self.hits(k) for k in HITS_AT}
        out.update(mr=self.mr, mrr=self.mrr, count=self.count)
        return out

    def rows(self) -> list[tuple[str, object]]:
        rows = list(self.metrics().items())
        for name, part in self.parts.items():
            rows += [(f"{name}.{k}", v) for k, v in part.metrics().items()]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, _fmt(v)])
        return buf.getvalue()

    def summary(self) -> str:
        m = self.metrics()
        head = f"[{self.tag}] " if self.tag else ""
        return (f"{head}queries={m['count']}  H@1={m['hits@1']:.4f}  H@3={m['hits@3']:.4f}  "
                f"H@10={m['hits@10']:.4f}  MR={m['mr']:.2f}  MRR={m['mrr']:.4f}")


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def rank_of_target(scores: np.ndarray, target: int, higher_is_better: bool = True,
                   exclude=None, ids=None) -> int:
    """1 + candidates strictly better + equal-scored candidates with smaller id.

    ``target`` is a position in ``scores``; ``ids`` gives the entity id of
    each position (defaults to the position itself).
    """
    s = scores if higher_is_better else -scores
    t = s[target]
    ids = np.arange(s.size) if ids is None else np.asarray(ids)
    ahead = (s > t) | ((s == t) & (ids < ids[target]))
    if exclude is not None:
        ahead[np.asarray(exclude, dtype=np.intp)] = False
    ahead[target] = False
    return int(ahead.sum()) + 1


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _direction_ranks(src: np.ndarray, dst: np.ndarray, dst_ids) -> np.ndarray:
    """Query i's target is candidate i; rank by ascending distance."""
    dist = _pairwise_dist(src, dst)
    return np.array([rank_of_target(dist[i], i, higher_is_better=False, ids=dst_ids)
                     for i in range(len(src))], dtype=np.int64)


def rank_alignment(out1: np.ndarray, out2: np.ndarray, test_pairs,
                   tag: str = "") -> RankingReport:
    """Nearest-neighbor alignment ranking, averaged over both directions.

    ``out1``/``out2`` are row tables indexed by the ids in ``test_pairs``
    (they may be the same merged table). Candidates are the test entities
    of the opposite side.
    """
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    out1, out2 = np.asarray(out1), np.asarray(out2)
    if pairs.size and (pairs[:, 0].max() >= len(out1) or pairs[:, 1].max() >= len(out2)):
        raise IndexError("test entity has no output row")
    a, b = out1[pairs[:, 0]], out2[pairs[:, 1]]
    l2r = RankingReport(_direction_ranks(a, b, pairs[:, 1]), "kg1->kg2")
    r2l = RankingReport(_direction_ranks(b, a, pairs[:, 0]), "kg2->kg1")
    return RankingReport(np.concatenate([l2r.ranks, r2l.ranks]), tag,
                         {"kg1_to_kg2": l2r, "kg2_to_kg1": r2l})


def per_layer_eval(layers, test_pairs) -> list[RankingReport]:
    """One report for each of d^-1, d^0, ..., d^K plus the concatenation."""
    reports = []
    for k in range(-1, layers.K + 1):
        v = layers.d(k).value
        reports.append(rank_alignment(v, v, test_pairs, tag=f"layer{k}"))
    cat = enc.final_output(layers, enc.ALIGNMENT).value
    reports.append(rank_alignment(cat, cat, test_pairs, tag="concat"))
    return reports


def known_answers(triples, num_relations: int) -> dict:
    """(head, query relation) -> set of true tails, inverse queries included."""
    answers: dict = {}
    for s, r, o in np.asarray(triples).reshape(-1, 3):
        answers.setdefault((int(s), int(r)), set()).add(int(o))
        answers.setdefault((int(o), int(r) + num_relations), set()).add(int(s))
    return answers


def rank_prediction(scorer, test_triples, num_relations: int, known_triples=None,
                    filtered: bool = True, tag: str = "") -> tuple[RankingReport, RankingReport]:
    """Rank tails for (s, r, ?) and heads via (o, r_inv, ?) over all entities.

    ``scorer(heads, rels)`` returns a (queries x entities) score matrix,
    higher is better. Returns ``(filtered_or_raw_report, raw_report)``.
    """
    t = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    heads = np.concatenate([t[:, 0], t[:, 2]])
    rels = np.concatenate([t[:, 1], t[:, 1] + num_relations])
    targets = np.concatenate([t[:, 2], t[:, 0]])
    scores = np.asarray(scorer(heads, rels))
    answers = known_answers(t if known_triples is None else
                            np.concatenate([np.asarray(known_triples).reshape(-1, 3), t]),
                            num_relations)
    raw, filt = [], []
    for q in range(len(heads)):
        raw.append(rank_of_target(scores[q], targets[q]))
        if filtered:
            others = answers.get((int(heads[q]), int(rels[q])), set()) - {int(targets[q])}
            filt.append(rank_of_target(scores[q], targets[q], exclude=sorted(others)))
    n = len(t)
    raw_rep = RankingReport(raw, tag + ":raw", {"tail": RankingReport(raw[:n]),
                                                "head": RankingReport(raw[n:])})
    if not filtered:
        return raw_rep, raw_rep
    return RankingReport(filt, tag, {"tail": RankingReport(filt[:n]),
                                     "head": RankingReport(filt[n:])}), raw_rep


def write_report(path, report: RankingReport):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_csv())


def per_layer_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "metric", "value"])
    for rep in reports:
        for k, v in rep.metrics().items():
            w.writerow([rep.tag, k, _fmt(v)])
    return buf.getvalue()
