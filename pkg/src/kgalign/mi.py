"""Donsker-Varadhan mutual information between source entities and their alignments.

A batch holds ``n`` joint pairs ``(s_i, t_i)`` with ``t_i ~ p(.|s_i)`` and
``n`` extra sources ``s'_i``; the marginal pairs are ``(s'_i, t_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignmentParams, Tables, entity_logprob_grad, sample_aligned_entities
from .errors import NumericError, ShapeError
from .nn import (DEFAULT_HIDDEN, MlpParams, SgdConfig, init_mlp, mlp_backward, mlp_forward,
                 prefixed, sgd_step)

KL_SMOOTHING = 1e-12


@dataclass(frozen=True, eq=False)
class MiEstimatorParams:
    t: MlpParams


@dataclass(frozen=True, eq=False)
class MiBatch:
    joint_sources: np.ndarray
    joint_targets: np.ndarray
    marginal_sources: np.ndarray

    def __post_init__(self):
        n = len(self.joint_sources)
        if n < 1 or len(self.joint_targets) != n or len(self.marginal_sources) != n:
            raise ValueError("MI batch needs n >= 1 joint pairs and n marginal sources")

    def __len__(self):
        return len(self.joint_sources)


def init_mi_estimator(src_dim: int, tgt_dim: int, hidden_dim: int = DEFAULT_HIDDEN,
                      rng: np.random.Generator = None) -> MiEstimatorParams:
    return MiEstimatorParams(init_mlp(src_dim + tgt_dim, hidden_dim, 1, rng))


def sample_mi_batch(align: AlignmentParams, tables: Tables, n: int,
                    rng: np.random.Generator) -> MiBatch:
    """Sources are uniform over source entities; targets come from the alignment."""
    sources = rng.integers(tables.src.n_entities, size=2 * n)
    targets = sample_aligned_entities(align, tables, sources[:n], rng)
    return MiBatch(sources[:n], targets, sources[n:])


def _forward(params: MiEstimatorParams, tables: Tables, batch: MiBatch):
    src, tgt = tables
    if params.t.input_dim != src.dim + tgt.dim:
        raise ShapeError(f"statistic network expects input {params.t.input_dim}, "
                         f"got {src.dim} + {tgt.dim}")
    vt = tgt.entity[batch.joint_targets]
    x = np.concatenate([
        np.concatenate([src.entity[batch.joint_sources], vt], axis=1),
        np.concatenate([src.entity[batch.marginal_sources], vt], axis=1),
    ])
    y, cache = mlp_forward(params.t, x)
    n = len(batch)
    return y[:n, 0], y[n:, 0], cache


def statistic(params: MiEstimatorParams, tables: Tables, sources, targets) -> np.ndarray:
    x = np.concatenate([tables.src.entity[np.asarray(sources)],
                        tables.tgt.entity[np.asarray(targets)]], axis=1)
    return mlp_forward(params.t, x)[0][:, 0]


def _dv(t_joint, t_marg):
    m = t_marg.max()
    lme = m + np.log(np.mean(np.exp(t_marg - m)))
    est = float(np.mean(t_joint) - lme)
    if not np.isfinite(est):
        raise NumericError("MI estimate is not finite")
    w = np.exp(t_marg - m)
    return est, w / w.sum()


def estimate_mi(params: MiEstimatorParams, batch: MiBatch, tables: Tables) -> float:
    """Mean statistic on joint pairs minus log-mean-exp on marginal pairs."""
    tj, tm, _ = _forward(params, tables, batch)
    return _dv(tj, tm)[0]


def mi_gamma_grads(params: MiEstimatorParams, batch: MiBatch, tables: Tables):
    """Estimate and its gradient with respect to the statistic network (``t.*``)."""
    tj, tm, cache = _forward(params, tables, batch)
    est, soft = _dv(tj, tm)
    n = len(batch)
    g_out = np.concatenate([np.full(n, 1.0 / n), -soft])[:, None]
    grads, _ = mlp_backward(params.t, cache, g_out)
    return est, prefixed(grads, "t.")


def mi_train_step_gamma(params: MiEstimatorParams, batch: MiBatch, tables: Tables,
                        sgd: SgdConfig):
    """One ascent step on the estimate; returns ``(params, pre-step estimate)``."""
    est, grads = mi_gamma_grads(params, batch, tables)
    return sgd_step(params, grads, sgd, ascend=True), est


def mi_theta_weights(mi_params: MiEstimatorParams, tables: Tables, batch: MiBatch) -> np.ndarray:
    """Per-pair weights on ``grad log p(t_i | s_i)`` in the two-term estimator."""
    tj, tm, _ = _forward(mi_params, tables, batch)
    _, soft = _dv(tj, tm)
    return tj / len(batch) - soft


def mi_grad_theta(mi_params: MiEstimatorParams, align: AlignmentParams, tables: Tables,
                  batch: MiBatch) -> np.ndarray:
    """REINFORCE estimate of the estimate's gradient with respect to ``theta_e``.

    ``sum_i T(s_i, t_i)/n * g_i - sum_i softmax_i(T(s'_i, t_i)) * g_i`` with
    ``g_i = grad log p(t_i | s_i)``.
    """
    w = mi_theta_weights(mi_params, tables, batch)
    return entity_logprob_grad(align, tables, batch.joint_sources, batch.joint_targets, w)


def _check_dist(p, name, axis=None):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=axis), 1.0, rtol=0, atol=1e-9):
        raise ValueError(f"{name} is not a normalized distribution")
    return p


def verify_mi_lower_bound(p_d, p_cond):
    """Exact ``(mean pairwise KL, mutual information)`` for small discrete tables.

    ``p_d[u]`` is the source distribution and ``p_cond[u, k]`` the alignment
    distribution of source ``u``. KL terms use ``1e-12`` smoothing so
    disjoint supports stay finite.
    """
    p_d = _check_dist(p_d, "p_d")
    p_cond = _check_dist(p_cond, "conditional rows", axis=1)
    if p_cond.shape[0] != p_d.shape[0]:
        raise ValueError("p_cond needs one row per source")
    logp = np.log(p_cond + KL_SMOOTHING)
    # kl[u, v] = sum_k p(k|u) (log p(k|u) - log p(k|v))
    self_term = np.sum(p_cond * logp, axis=1)
    kl = self_term[:, None] - p_cond @ logp.T
    mean_kl = float(p_d @ kl @ p_d)
    marg = p_d @ p_cond
    joint = p_d[:, None] * p_cond
    nz = joint > 0
    mi = float(np.sum(joint[nz] * (np.log(p_cond[nz]) - np.log(np.broadcast_to(marg, joint.shape)[nz]))))
    return mean_kl, mi
