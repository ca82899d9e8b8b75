"""Knowledge-graph data model, ingestion, splitting and synthetic generators."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
import numpy as np

from .autodiff import SegmentIndex
from .seeding import rng_for

log = logging.getLogger(__name__)

DECENTRL = "decentrl"
CENTRL = "centrl"


class KGParseError(ValueError):
    pass


class EmptyGraphError(ValueError):
    pass


class Vocab:
    """Bidirectional string <-> dense id map, ids in insertion order."""

    def __init__(self, names=()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    @property
    def names(self) -> list[str]:
        return list(self._names)


@dataclass
class KnowledgeGraph:
    entities: Vocab
    relations: Vocab
    triples: np.ndarray  # (n, 3) int: subject, relation, object
    duplicates_dropped: int = 0

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if t.size:
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= len(self.entities):
                raise IndexError("triple entity id outside vocabulary")
            if t[:, 1].min() < 0 or t[:, 1].max() >= len(self.relations):
                raise IndexError("triple relation id outside vocabulary")
        self.triples = t

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self):
        return len(self.triples)

    def degrees(self) -> np.ndarray:
        return (np.bincount(self.triples[:, 0], minlength=self.num_entities)
                + np.bincount(self.triples[:, 2], minlength=self.num_entities))

    def with_triples(self, triples) -> "KnowledgeGraph":
        """Same vocabularies, different triple set."""
        return KnowledgeGraph(self.entities, self.relations, np.asarray(triples).reshape(-1, 3))

    def triple_strings(self, triples=None):
        t = self.triples if triples is None else triples
        e, r = self.entities, self.relations
        return [(e.name(s), r.name(p), e.name(o)) for s, p, o in t]

    @classmethod
    def from_string_triples(cls, rows, entities: Vocab | None = None,
                            relations: Vocab | None = None, frozen: bool = False):
        """Build a graph, assigning ids in first-appearance order.

        With ``frozen`` the given vocabularies are reused and unknown names
        raise ``KeyError``.
        """
        ents = entities if entities is not None else Vocab()
        rels = relations if relations is not None else Vocab()
        seen = set()
        out = []
        dup = 0
        for s, r, o in rows:
            if frozen:
                key = (ents.id(s), rels.id(r), ents.id(o))
            else:
                key = (ents.add(s), rels.add(r), ents.add(o))
            if key in seen:
                dup += 1
                continue
            seen.add(key)
            out.append(key)
        return cls(ents, rels, np.array(out, dtype=np.int64).reshape(-1, 3), dup)


def read_tsv(path, ncols: int) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols or any(p == "" for p in parts):
                raise KGParseError(f"{path}:{lineno}: expected {ncols} tab-separated fields")
            rows.append(tuple(parts))
    return rows


def load_triples(path, entities: Vocab | None = None, relations: Vocab | None = None,
                 frozen: bool = False) -> KnowledgeGraph:
    """Read ``subject<TAB>relation<TAB>object`` lines."""
    rows = read_tsv(path, 3)
    if not rows:
        raise EmptyGraphError(f"{path}: no triples")
    g = KnowledgeGraph.from_string_triples(rows, entities, relations, frozen)
    if g.duplicates_dropped:
        log.info("%s: dropped %d duplicate triples", path, g.duplicates_dropped)
    return g


def write_triples(path, g: KnowledgeGraph, triples=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o in g.triple_strings(triples):
            fh.write(f"{s}\t{r}\t{o}\n")


def write_lines(path, names):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n in names:
            fh.write(f"{n}\n")


def merge_graphs(g1: KnowledgeGraph, g2: KnowledgeGraph, tags=("", ""),
                 share_relations: bool = False) -> KnowledgeGraph:
    """Disjoint union; ids of ``g2`` are offset by the sizes of ``g1``.

    Names are kept unless ``tags`` prefixes are given; a clash between the two
    vocabularies is resolved by tagging, never by identifying entities.
    With ``share_relations`` a relation name present in both graphs maps to
    one merged relation id.
    """
    t1, t2 = tags
    ents = Vocab(t1 + n for n in g1.entities)
    rels = Vocab(t1 + n for n in g1.relations)
    for n in g2.entities:
        name = t2 + n
        if name in ents:
            name = "KG2:" + name
        ents.add(name)
    rel_map = np.empty(g2.num_relations, dtype=np.int64)
    for r, n in enumerate(g2.relations):
        if share_relations and n in g1.relations:
            rel_map[r] = g1.relations.id(n)
            continue
        name = t2 + n
        if name in rels:
            name = "KG2:" + name
        rel_map[r] = rels.add(name)
    if len(ents) != g1.num_entities + g2.num_entities:
        raise ValueError("entity names collide after tagging")
    t2x = g2.triples.copy()
    t2x[:, [0, 2]] += g1.num_entities
    t2x[:, 1] = rel_map[t2x[:, 1]]
    triples = np.concatenate([g1.triples, t2x]) if len(g2) else g1.triples.copy()
    return KnowledgeGraph(ents, rels, triples)


# ------------------------------------------------------------ neighbor index

@dataclass
class NeighborIndex:
    """Per-entity (neighbor, relation, direction) lists, flattened into rows.

    Relation ids: ``r`` for an original edge, ``r + R`` for its inverse and
    ``2R`` for the self relation, so the relation table always has ``2R + 1``
    rows regardless of mode.
    """

    num_entities: int
    num_relations: int
    targets: np.ndarray
    neighbors: np.ndarray
    relations: np.ndarray
    direction: np.ndarray  # 1 original, -1 inverse, 0 self
    mode: str = DECENTRL
    add_inverse: bool = True
    _segments: object = field(default=None, repr=False)

    FORWARD, INVERSE, SELF = 1, -1, 0

    @property
    def self_relation(self) -> int:
        return 2 * self.num_relations

    @property
    def relation_table_size(self) -> int:
        return 2 * self.num_relations + 1

    @property
    def segments(self):
        if self._segments is None:
            self._segments = SegmentIndex(self.targets, self.num_entities)
        return self._segments

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.num_entities)

    def degenerate_entities(self) -> np.ndarray:
        """Entities with an empty neighbor list."""
        return np.flatnonzero(self.counts == 0)

    def neighbor_list(self, i: int) -> list[tuple[int, int, int]]:
        rows = np.flatnonzero(self.targets == i)
        return [(int(self.neighbors[r]), int(self.relations[r]), int(self.direction[r]))
                for r in rows]

    def __len__(self):
        return self.targets.size


def build_neighbor_index(g: KnowledgeGraph, mode: str = DECENTRL,
                         add_inverse: bool = True) -> NeighborIndex:
    mode = mode.lower()
    if mode not in (DECENTRL, CENTRL):
        raise ValueError(f"unknown neighbor mode {mode!r}")
    s, r, o = g.triples.T
    R = g.num_relations
    tgt, nbr, rel, dr = [s], [o], [r], [np.ones_like(r)]
    if add_inverse:
        tgt.append(o); nbr.append(s); rel.append(r + R); dr.append(-np.ones_like(r))
    tgt, nbr, rel, dr = (np.concatenate(x) for x in (tgt, nbr, rel, dr))
    keep = tgt != nbr  # generated triples are loop-free, loaded files need not be
    tgt, nbr, rel, dr = tgt[keep], nbr[keep], rel[keep], dr[keep]
    if mode == CENTRL:
        ids = np.arange(g.num_entities)
        tgt = np.concatenate([tgt, ids])
        nbr = np.concatenate([nbr, ids])
        rel = np.concatenate([rel, np.full_like(ids, 2 * R)])
        dr = np.concatenate([dr, np.zeros_like(ids)])
    order = np.lexsort((np.arange(tgt.size), tgt))
    idx = NeighborIndex(g.num_entities, R, tgt[order], nbr[order], rel[order], dr[order],
                        mode, add_inverse)
    deg = idx.degenerate_entities()
    if deg.size:
        log.info("%d entities have no neighbors (degenerate)", deg.size)
    return idx


# ------------------------------------------------------------ alignment pairs

@dataclass
class AlignmentPairs:
    """Entity pairs ``(id in KG1, id in KG2)`` with a split tag per pair."""

    pairs: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.splits = np.asarray(self.splits, dtype=object).reshape(-1)
        if len(self.splits) != len(self.pairs):
            raise ValueError("one split tag per pair")
        for tag in set(self.splits.tolist()):
            sub = self.pairs[self.splits == tag]
            if len(np.unique(sub[:, 0])) != len(sub) or len(np.unique(sub[:, 1])) != len(sub):
                raise ValueError(f"pairs in split {tag!r} are not one-to-one")

    def __len__(self):
        return len(self.pairs)

    def split(self, tag: str) -> np.ndarray:
        return self.pairs[self.splits == tag]

    @property
    def train(self) -> np.ndarray:
        return self.split("train")

    @property
    def test(self) -> np.ndarray:
        return self.split("test")

    @property
    def valid(self) -> np.ndarray:
        return self.split("valid")

    def offset(self, n1: int) -> "AlignmentPairs":
        """Shift right-hand ids into a merged graph where KG2 starts at ``n1``."""
        return AlignmentPairs(self.pairs + np.array([0, n1]), self.splits.copy())

    def resplit(self, train_fraction: float, seed: int) -> "AlignmentPairs":
        rng = rng_for(seed, "pair-split")
        perm = rng.permutation(len(self.pairs))
        n_train = int(round(train_fraction * len(self.pairs)))
        tags = np.empty(len(self.pairs), dtype=object)
        tags[perm[:n_train]] = "train"
        tags[perm[n_train:]] = "test"
        return AlignmentPairs(self.pairs.copy(), tags)


def load_pairs(path, g1: KnowledgeGraph, g2: KnowledgeGraph, split: str) -> np.ndarray:
    rows = read_tsv(path, 2)
    try:
        return np.array([(g1.entities.id(a), g2.entities.id(b)) for a, b in rows],
                        dtype=np.int64).reshape(-1, 2)
    except KeyError as exc:
        raise KGParseError(f"{path}: unknown entity {exc.args[0]!r}") from None


def write_pairs(path, g1: KnowledgeGraph, g2: KnowledgeGraph, pairs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in pairs:
            fh.write(f"{g1.entities.name(a)}\t{g2.entities.name(b)}\n")


# ------------------------------------------------------------ open world

@dataclass
class OpenSplit:
    known_entities: np.ndarray
    open_entities: np.ndarray
    train_triples: np.ndarray
    test_triples: np.ndarray

    @property
    def moved_fraction(self) -> float:
        total = len(self.train_triples) + len(self.test_triples)
        return len(self.test_triples) / total if total else 0.0


def split_open_world(g: KnowledgeGraph, test_entities, open_fraction: float,
                     seed: int, test_triples=None) -> OpenSplit:
    """Sample open entities among ``test_entities`` and withhold their triples.

    ``test_triples`` are triples already reserved for testing; every triple
    touching an open entity is moved there from the training pool.
    """
    if not 0.0 < open_fraction < 1.0:
        raise ValueError(f"open_fraction must lie in (0, 1), got {open_fraction}")
    test_entities = np.unique(np.asarray(list(test_entities), dtype=np.int64))
    if test_entities.size and (test_entities.min() < 0 or test_entities.max() >= g.num_entities):
        raise IndexError("test entity outside the vocabulary")
    n_open = math.ceil(open_fraction * test_entities.size - 1e-9)
    rng = rng_for(seed, "open-world")
    chosen = rng.choice(test_entities, size=n_open, replace=False) if n_open else []
    open_ents = np.sort(np.asarray(chosen, dtype=np.int64))
    is_open = np.zeros(g.num_entities, dtype=bool)
    is_open[open_ents] = True
    touches = is_open[g.triples[:, 0]] | is_open[g.triples[:, 2]]
    extra = np.zeros((0, 3), np.int64) if test_triples is None else np.asarray(test_triples)
    return OpenSplit(
        known_entities=np.flatnonzero(~is_open),
        open_entities=open_ents,
        train_triples=g.triples[~touches],
        test_triples=np.concatenate([extra.reshape(-1, 3), g.triples[touches]]),
    )


# ------------------------------------------------------------ synthetic data

def generate_synthetic_kg(n_entities: int, n_relations: int, avg_degree: float,
                          seed: int, skew: float = 0.0, connected: bool = True,
                          prefix: str = "e") -> KnowledgeGraph:
    """Random loop-free multi-relational graph with mean degree ``avg_degree``.

    ``skew > 0`` draws endpoints with power-law weights ``rank ** -skew``,
    giving a long-tailed degree distribution. With ``connected`` a random
    spanning tree is laid down first, so no entity is isolated.
    """
    if n_entities < 1 or n_relations < 1:
        raise ValueError("need at least one entity and one relation")
    rng = rng_for(seed, "synthetic-kg")
    ents = Vocab(f"{prefix}{i}" for i in range(n_entities))
    rels = Vocab(f"r{k}" for k in range(n_relations))
    if n_entities == 1:
        return KnowledgeGraph(ents, rels, np.zeros((0, 3), np.int64))
    target = int(round(n_entities * avg_degree / 2))
    max_pairs = n_entities * (n_entities - 1) * n_relations
    target = min(target, max_pairs)
    weights = np.arange(1, n_entities + 1, dtype=np.float64) ** (-skew)
    weights = rng.permutation(weights / weights.sum())

    seen: set = set()
    triples = []

    def push(s, o):
        r = int(rng.integers(n_relations))
        key = (int(s), r, int(o))
        if s == o or key in seen:
            return False
        seen.add(key)
        triples.append(key)
        return True

    if connected:
        order = rng.permutation(n_entities)
        for pos in range(1, n_entities):
            if len(triples) >= target:
                break
            new = order[pos]
            old = order[rng.integers(pos)]
            s, o = (new, old) if rng.random() < 0.5 else (old, new)
            push(s, o)
    while len(triples) < target:
        s, o = rng.choice(n_entities, size=2, p=weights)
        push(s, o)
    return KnowledgeGraph(ents, rels, np.array(triples, dtype=np.int64).reshape(-1, 3))


def make_aligned_copy(g: KnowledgeGraph, rename_seed: int, edge_dropout: float,
                      prefix: str = "x"):
    """Isomorphic renamed copy with independent edge dropout on both sides.

    Returns ``(source_view, copy, pairs)``: ``source_view`` is ``g`` with its
    own dropout applied, ``copy`` has entities renamed by a random
    permutation, and ``pairs`` is the ground-truth bijection (all tagged
    ``"all"`` until resplit).
    """
    if not 0.0 <= edge_dropout < 1.0:
        raise ValueError(f"edge_dropout must lie in [0, 1), got {edge_dropout}")
    rng = rng_for(rename_seed, "aligned-copy")
    n = g.num_entities
    perm = rng.permutation(n)  # entity i of g becomes copy entity perm[i]
    names = [None] * n
    for i in range(n):
        names[perm[i]] = f"{prefix}{perm[i]}"
    ents = Vocab(names)
    rels = Vocab(g.relations)
    keep_src = rng.random(len(g)) >= edge_dropout
    keep_cpy = rng.random(len(g)) >= edge_dropout
    t = g.triples
    mapped = np.stack([perm[t[:, 0]], t[:, 1], perm[t[:, 2]]], axis=1)
    copy = KnowledgeGraph(ents, rels, mapped[keep_cpy])
    source = g.with_triples(t[keep_src])
    pairs = AlignmentPairs(np.stack([np.arange(n), perm], axis=1), np.full(n, "all", object))
    return source, copy, pairs
