"""Per-graph entity/relation embeddings trained with a margin ranking loss."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import NumericError, SamplingError
from .kg import KnowledgeGraph

log = logging.getLogger(__name__)

DIM_GRID = (64, 128, 256, 512)
_EPS = 1e-12


class ModelKind(enum.IntEnum):
    TRANSE = 0
    TRANSH = 1
    DISTMULT = 2

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown embedding model {name!r}; "
                             f"expected one of {[m.name.lower() for m in cls]}") from None


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    entity: np.ndarray
    relation: np.ndarray
    kind: ModelKind = ModelKind.TRANSE
    normal: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 128
    margin: float = 1.0
    negatives_per_positive: int = 1
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 0.01
    rng_seed: int = 0
    kind: ModelKind = ModelKind.TRANSE

    def __post_init__(self):
        for name in ("dim", "negatives_per_positive", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not (self.margin > 0 and self.learning_rate > 0):
            raise ValueError("margin and learning_rate must be positive")


def _normalize_rows(m):
    return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), _EPS)


def score_triplets(table: EmbeddingTable, triplets) -> np.ndarray:
    """Plausibility scores for an ``(n, 3)`` batch; higher is more plausible."""
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(t) and (t.min() < 0 or t[:, [0, 2]].max() >= table.n_entities
                   or t[:, 1].max() >= table.n_relations):
        raise IndexError("triplet index out of range for embedding table")
    h, r, tl = table.entity[t[:, 0]], table.relation[t[:, 1]], table.entity[t[:, 2]]
    if table.kind == ModelKind.DISTMULT:
        return np.sum(h * r * tl, axis=1)
    if table.kind == ModelKind.TRANSH:
        n = table.normal[t[:, 1]]
        h = h - np.sum(n * h, axis=1, keepdims=True) * n
        tl = tl - np.sum(n * tl, axis=1, keepdims=True) * n
    return -np.linalg.norm(h + r - tl, axis=1)


def score_triplet(table: EmbeddingTable, triplet) -> float:
    return float(score_triplets(table, triplet)[0])


def _score_grads(table: EmbeddingTable, t: np.ndarray, coef: np.ndarray):
    """Gradients of ``sum(coef * score)`` w.r.t. the rows used by ``t``.

    Returns per-row contributions ``(dh, dr, dt, dn)`` (``dn`` None unless TransH).
    """
    h, r, tl = table.entity[t[:, 0]], table.relation[t[:, 1]], table.entity[t[:, 2]]
    c = coef[:, None]
    if table.kind == ModelKind.DISTMULT:
        return c * r * tl, c * h * tl, c * h * r, None
    if table.kind == ModelKind.TRANSE:
        u = h + r - tl
        g = -c * u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _EPS)
        return g, g, -g, None
    n = table.normal[t[:, 1]]
    delta = h - tl
    nd = np.sum(n * delta, axis=1, keepdims=True)
    u = delta - nd * n + r
    g = -c * u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _EPS)
    ng = np.sum(n * g, axis=1, keepdims=True)
    d_delta = g - ng * n
    dn = -(ng * delta + nd * g)
    return d_delta, g, -d_delta, dn


def margin_loss(table: EmbeddingTable, pos, neg, margin: float):
    """``sum(max(0, margin - score(pos) + score(neg)))`` and its gradients.

    Gradients are keyed ``entity``, ``relation`` (and ``normal`` for TransH).
    """
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 3)
    hinge = margin - score_triplets(table, pos) + score_triplets(table, neg)
    active = hinge > 0
    loss = float(np.sum(hinge[active]))
    grads = {"entity": np.zeros_like(table.entity), "relation": np.zeros_like(table.relation)}
    if table.kind == ModelKind.TRANSH:
        grads["normal"] = np.zeros_like(table.normal)
    coef = active.astype(np.float64)
    for trip, sign in ((pos, -1.0), (neg, 1.0)):
        dh, dr, dt, dn = _score_grads(table, trip, sign * coef)
        np.add.at(grads["entity"], trip[:, 0], dh)
        np.add.at(grads["entity"], trip[:, 2], dt)
        np.add.at(grads["relation"], trip[:, 1], dr)
        if dn is not None:
            np.add.at(grads["normal"], trip[:, 1], dn)
    return loss, grads


def _valid_replacements(triplet, graph: KnowledgeGraph, side: int) -> np.ndarray:
    cand = np.repeat(np.asarray(triplet, dtype=np.int64)[None, :], graph.n_entities, axis=0)
    cand[:, side] = np.arange(graph.n_entities)
    return np.flatnonzero(~graph.contains(cand))


def negative_sample(triplet, graph: KnowledgeGraph, rng: np.random.Generator,
                    max_tries: int = 32) -> tuple:
    """Corrupt head or tail (fair coin) with a uniform entity, rejecting true triplets.

    Falls back to exact enumeration of valid replacements when rejection
    keeps failing; if neither side admits a corruption, raises SamplingError.
    """
    if graph.n_entities == 0:
        raise SamplingError("cannot corrupt triplets of an empty graph")
    triplet = tuple(int(x) for x in triplet)
    side = 0 if rng.random() < 0.5 else 2
    for _ in range(max_tries):
        cand = list(triplet)
        cand[side] = int(rng.integers(graph.n_entities))
        if tuple(cand) not in graph:
            return tuple(cand)
    for s in (side, 2 - side):
        ok = _valid_replacements(triplet, graph, s)
        if len(ok):
            cand = list(triplet)
            cand[s] = int(ok[rng.integers(len(ok))])
            return tuple(cand)
    raise SamplingError(f"no valid corruption exists for triplet {triplet}")


def negative_sample_batch(triplets, graph: KnowledgeGraph, rng: np.random.Generator,
                          max_rounds: int = 8) -> np.ndarray:
    """Vectorized :func:`negative_sample` over an ``(n, 3)`` batch."""
    t = np.array(triplets, dtype=np.int64).reshape(-1, 3)
    out = t.copy()
    sides = np.where(rng.random(len(t)) < 0.5, 0, 2)
    todo = np.arange(len(t))
    for _ in range(max_rounds):
        if not len(todo):
            break
        out[todo] = t[todo]
        out[todo, sides[todo]] = rng.integers(graph.n_entities, size=len(todo))
        todo = todo[graph.contains(out[todo])]
    for i in todo:
        out[i] = negative_sample(t[i], graph, rng)
    return out


def init_table(n_entities: int, n_relations: int, dim: int, kind: ModelKind,
               rng: np.random.Generator) -> EmbeddingTable:
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, size=(n_entities, dim))
    rel = rng.uniform(-bound, bound, size=(n_relations, dim))
    normal = None
    if kind == ModelKind.DISTMULT:
        ent *= 0.1
        rel *= 0.1
    else:
        ent = _normalize_rows(ent)
        rel = _normalize_rows(rel)
    if kind == ModelKind.TRANSH:
        normal = _normalize_rows(rng.normal(size=(n_relations, dim)))
    return EmbeddingTable(ent, rel, kind, normal)


def train_embeddings(graph: KnowledgeGraph, config: EmbedConfig) -> EmbeddingTable:
    """Mini-batch SGD on the margin ranking loss with filtered negatives."""
    if graph.n_triplets == 0:
        raise ValueError("graph has no triplets")
    rng = np.random.default_rng(config.rng_seed)
    table = init_table(graph.n_entities, graph.n_relations, config.dim, config.kind, rng)
    trip = graph.triplets
    for epoch in range(config.epochs):
        order = rng.permutation(len(trip))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            pos = trip[order[start:start + config.batch_size]]
            pos = np.repeat(pos, config.negatives_per_positive, axis=0)
            neg = negative_sample_batch(pos, graph, rng)
            loss, grads = margin_loss(table, pos, neg, config.margin)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite embedding loss at epoch {epoch}, batch {b}")
            epoch_loss += loss
            lr = config.learning_rate
            normal = table.normal
            if normal is not None:
                normal = _normalize_rows(normal - lr * grads["normal"])
            table = replace(table, entity=table.entity - lr * grads["entity"],
                            relation=table.relation - lr * grads["relation"], normal=normal)
        if config.kind != ModelKind.DISTMULT:
            table = replace(table, entity=_normalize_rows(table.entity))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d loss %.4f", epoch, epoch_loss)
    return table


def tail_ranks(table: EmbeddingTable, triplets) -> np.ndarray:
    """Raw rank of the true tail among all entities (1 = best)."""
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    ranks = np.empty(len(t), dtype=np.int64)
    all_e = np.arange(table.n_entities)
    for i, (h, r, tl) in enumerate(t.tolist()):
        cand = np.stack([np.full_like(all_e, h), np.full_like(all_e, r), all_e], axis=1)
        s = score_triplets(table, cand)
        ranks[i] = 1 + int(np.sum(s > s[tl]))
    return ranks
