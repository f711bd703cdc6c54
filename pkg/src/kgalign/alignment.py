"""Linear-projection alignment functions between two embedding spaces.

A source entity ``s`` aligns to target ``k`` with probability proportional
to ``exp(-eta * ||theta_e v_s - v_k||^2)`` (relations likewise with
``theta_r``). A triplet aligns component-wise, so its log-probability is the
sum of head, relation and tail terms.

For a single component the score-function gradient has the closed form
``d/dtheta log p(k | s) = 2 * eta * (v_k - E_p[v]) v_s^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .embedding import EmbeddingTable
from .errors import NumericError, ShapeError
from .kg import AlignmentSeeds
from .nn import svd

DEFAULT_ETA = 1.0


@dataclass(frozen=True, eq=False)
class AlignmentParams:
    theta_e: np.ndarray
    theta_r: np.ndarray
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if not self.eta >= 0 or not np.isfinite(self.eta):
            raise ValueError("eta must be a finite non-negative number")
        if self.theta_e.ndim != 2 or self.theta_r.ndim != 2:
            raise ShapeError("projection matrices must be 2-D")


class Tables(NamedTuple):
    src: EmbeddingTable
    tgt: EmbeddingTable


@dataclass(frozen=True, eq=False)
class AlignmentDistribution:
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def argmax(self) -> int:
        return int(np.argmax(self.log_probs))


def log_softmax_neg_sq(d2: np.ndarray, eta: float) -> np.ndarray:
    """Row-wise ``log softmax(-eta * d2)``, shifted by the row minimum first."""
    shifted = d2 - d2.min(axis=-1, keepdims=True)
    logits = -eta * shifted
    return logits - np.log(np.sum(np.exp(logits), axis=-1, keepdims=True))


def _check_theta(theta, src_mat, tgt_mat):
    if theta.shape != (tgt_mat.shape[1], src_mat.shape[1]):
        raise ShapeError(f"projection of shape {theta.shape} cannot map dim {src_mat.shape[1]} "
                         f"to dim {tgt_mat.shape[1]}")


def sq_distances(theta, src_mat, tgt_mat, sources) -> np.ndarray:
    """``||theta v_s - v_k||^2`` for each requested source (rows) and every target."""
    _check_theta(theta, src_mat, tgt_mat)
    z = src_mat[np.asarray(sources)] @ theta.T
    d2 = (np.sum(z * z, axis=1)[:, None] - 2.0 * z @ tgt_mat.T
          + np.sum(tgt_mat * tgt_mat, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def entity_log_probs(params: AlignmentParams, tables: Tables, sources) -> np.ndarray:
    return log_softmax_neg_sq(
        sq_distances(params.theta_e, tables.src.entity, tables.tgt.entity, sources), params.eta)


def relation_log_probs(params: AlignmentParams, tables: Tables, sources) -> np.ndarray:
    return log_softmax_neg_sq(
        sq_distances(params.theta_r, tables.src.relation, tables.tgt.relation, sources), params.eta)


def entity_align_dist(params: AlignmentParams, src_table: EmbeddingTable,
                      tgt_table: EmbeddingTable, e_s: int) -> AlignmentDistribution:
    _check_index(e_s, src_table.n_entities, "entity")
    return AlignmentDistribution(entity_log_probs(params, Tables(src_table, tgt_table), [e_s])[0])


def relation_align_dist(params: AlignmentParams, tables: Tables, r_s: int) -> AlignmentDistribution:
    _check_index(r_s, tables.src.n_relations, "relation")
    return AlignmentDistribution(relation_log_probs(params, tables, [r_s])[0])


def _check_index(i, n, kind):
    if not 0 <= int(i) < n:
        raise IndexError(f"{kind} index {i} out of range [0, {n})")


def _as_triplets(x):
    return np.asarray(x, dtype=np.int64).reshape(-1, 3)


def triplet_log_probs(params: AlignmentParams, tables: Tables, xs, xt) -> np.ndarray:
    """``log p(x_t | x_s)`` for paired rows of two ``(n, 3)`` batches."""
    xs, xt = _as_triplets(xs), _as_triplets(xt)
    rows = np.arange(len(xs))
    lh = entity_log_probs(params, tables, xs[:, 0])[rows, xt[:, 0]]
    lr = relation_log_probs(params, tables, xs[:, 1])[rows, xt[:, 1]]
    lt = entity_log_probs(params, tables, xs[:, 2])[rows, xt[:, 2]]
    return lh + lr + lt


def triplet_align_logprob(params: AlignmentParams, tables: Tables, x_s, x_t) -> float:
    x_s, x_t = _as_triplets(x_s), _as_triplets(x_t)
    for x, t in ((x_s, tables.src), (x_t, tables.tgt)):
        _check_index(x[0, 0], t.n_entities, "entity")
        _check_index(x[0, 2], t.n_entities, "entity")
        _check_index(x[0, 1], t.n_relations, "relation")
    return float(triplet_log_probs(params, tables, x_s, x_t)[0])


def _sample_rows(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = np.exp(log_probs)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), p.shape[1] - 1)


def sample_aligned_triplets(params: AlignmentParams, tables: Tables, xs,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw head, relation and tail independently from their alignment distributions."""
    xs = _as_triplets(xs)
    h = _sample_rows(entity_log_probs(params, tables, xs[:, 0]), rng)
    r = _sample_rows(relation_log_probs(params, tables, xs[:, 1]), rng)
    t = _sample_rows(entity_log_probs(params, tables, xs[:, 2]), rng)
    return np.stack([h, r, t], axis=1)


def sample_aligned_triplet(params: AlignmentParams, tables: Tables, x_s,
                           rng: np.random.Generator) -> tuple:
    return tuple(int(v) for v in sample_aligned_triplets(params, tables, x_s, rng)[0])


def sample_aligned_entities(params: AlignmentParams, tables: Tables, sources,
                            rng: np.random.Generator) -> np.ndarray:
    return _sample_rows(entity_log_probs(params, tables, sources), rng)


def component_grad(theta, eta, src_mat, tgt_mat, sources, targets, weights) -> np.ndarray:
    """``sum_i w_i * d/dtheta log p(target_i | source_i)`` for one component."""
    sources = np.asarray(sources)
    targets = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    p = np.exp(log_softmax_neg_sq(sq_distances(theta, src_mat, tgt_mat, sources), eta))
    resid = tgt_mat[targets] - p @ tgt_mat
    g = 2.0 * eta * (w[:, None] * resid).T @ src_mat[sources]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite alignment log-probability gradient")
    return g


def weighted_logprob_grad(params: AlignmentParams, tables: Tables, xs, xt, weights) -> dict:
    """``sum_i w_i * grad log p(xt_i | xs_i)`` keyed ``theta_e`` / ``theta_r``."""
    xs, xt = _as_triplets(xs), _as_triplets(xt)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(xs),))
    src, tgt = tables
    ge = component_grad(params.theta_e, params.eta, src.entity, tgt.entity,
                        np.concatenate([xs[:, 0], xs[:, 2]]),
                        np.concatenate([xt[:, 0], xt[:, 2]]), np.concatenate([w, w]))
    gr = component_grad(params.theta_r, params.eta, src.relation, tgt.relation,
                        xs[:, 1], xt[:, 1], w)
    return {"theta_e": ge, "theta_r": gr}


def logprob_grad(params: AlignmentParams, tables: Tables, x_s, x_t) -> dict:
    """Exact gradient of ``log p(x_t | x_s)`` with respect to both projections."""
    return weighted_logprob_grad(params, tables, x_s, x_t, 1.0)


def entity_logprob_grad(params: AlignmentParams, tables: Tables, sources, targets, weights):
    """``theta_e`` gradient of weighted entity log-probabilities."""
    return component_grad(params.theta_e, params.eta, tables.src.entity, tables.tgt.entity,
                          sources, targets, weights)


def orthogonal_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Orthogonal ``W`` minimizing ``sum_i ||W x_i - y_i||^2`` for row-stacked x, y."""
    u, _, v = svd(y.T @ x)
    return u @ v.T


def procrustes_pretrain(seeds: AlignmentSeeds, src_table: EmbeddingTable,
                        tgt_table: EmbeddingTable, eta: float = DEFAULT_ETA) -> AlignmentParams:
    """Fit orthogonal projections on the seed pairs.

    Without relation seeds the relation projection reuses the entity one.
    """
    if len(seeds.entity_pairs) == 0:
        raise ValueError("Procrustes needs at least one entity seed pair")
    if src_table.dim != tgt_table.dim:
        raise ShapeError(f"orthogonal map needs equal dims, got {src_table.dim} and {tgt_table.dim}")
    ep = seeds.entity_pairs
    theta_e = orthogonal_map(src_table.entity[ep[:, 0]], tgt_table.entity[ep[:, 1]])
    if len(seeds.relation_pairs):
        rp = seeds.relation_pairs
        theta_r = orthogonal_map(src_table.relation[rp[:, 0]], tgt_table.relation[rp[:, 1]])
    else:
        theta_r = theta_e.copy()
    return AlignmentParams(theta_e, theta_r, eta)


def noisy_identity(d_t: int, d_s: int, rng: np.random.Generator, noise: float = 0.01,
                   eta: float = DEFAULT_ETA) -> AlignmentParams:
    """Identity projections plus uniform noise in ``[-noise, noise]``."""
    return AlignmentParams(np.eye(d_t, d_s) + rng.uniform(-noise, noise, (d_t, d_s)),
                           np.eye(d_t, d_s) + rng.uniform(-noise, noise, (d_t, d_s)), eta)
