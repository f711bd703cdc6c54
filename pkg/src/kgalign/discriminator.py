"""Triplet discriminator ``D(x) = sigmoid(f(v_h) + f(v_t) + g(v_h, v_r, v_t))``.

``f`` (unary potential) is shared between the head and tail positions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import EmbeddingTable
from .errors import NumericError, SamplingError, ShapeError
from .kg import KnowledgeGraph
from .nn import (DEFAULT_HIDDEN, MlpParams, SgdConfig, init_mlp, mlp_backward, mlp_forward,
                 prefixed, sgd_step, sigmoid)

CLAMP_EPS = 1e-7


class FakeSourceMode(enum.Enum):
    ADVERSARIAL = "adv"
    RANDOM = "rand"
    RANDOM_PLUS_ADVERSARIAL = "rand+adv"

    @classmethod
    def parse(cls, text: str) -> "FakeSourceMode":
        key = text.strip().lower().replace(".", "")
        for m in cls:
            if key in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown fake mode {text!r}; expected adv, rand or rand+adv")


@dataclass(frozen=True, eq=False)
class DiscriminatorParams:
    f: MlpParams
    g: MlpParams

    @property
    def dim(self) -> int:
        return self.f.input_dim


def init_discriminator(dim: int, hidden_dim: int = DEFAULT_HIDDEN,
                       rng: np.random.Generator = None) -> DiscriminatorParams:
    rng = np.random.default_rng() if rng is None else rng
    return DiscriminatorParams(init_mlp(dim, hidden_dim, 1, rng), init_mlp(3 * dim, hidden_dim, 1, rng))


def _inputs(params: DiscriminatorParams, tgt_table: EmbeddingTable, xt):
    xt = np.asarray(xt, dtype=np.int64).reshape(-1, 3)
    if tgt_table.dim != params.dim or params.g.input_dim != 3 * params.dim:
        raise ShapeError(f"discriminator expects dim {params.dim}, table has {tgt_table.dim}")
    h = tgt_table.entity[xt[:, 0]]
    r = tgt_table.relation[xt[:, 1]]
    t = tgt_table.entity[xt[:, 2]]
    return np.concatenate([h, t]), np.concatenate([h, r, t], axis=1)


def disc_logits(params: DiscriminatorParams, tgt_table: EmbeddingTable, xt, return_cache=False):
    unary_in, triple_in = _inputs(params, tgt_table, xt)
    fy, fcache = mlp_forward(params.f, unary_in)
    gy, gcache = mlp_forward(params.g, triple_in)
    n = len(triple_in)
    logits = fy[:n, 0] + fy[n:, 0] + gy[:, 0]
    if return_cache:
        return logits, (fcache, gcache)
    return logits


def disc_scores(params: DiscriminatorParams, tgt_table: EmbeddingTable, xt) -> np.ndarray:
    return sigmoid(disc_logits(params, tgt_table, xt))


def disc_score(params: DiscriminatorParams, tgt_table: EmbeddingTable, x_t) -> float:
    return float(disc_scores(params, tgt_table, x_t)[0])


def disc_loss_and_grads(params: DiscriminatorParams, tgt_table: EmbeddingTable, real, fake):
    """Binary cross-entropy with reals as positives; gradients keyed ``f.*`` / ``g.*``."""
    real = np.asarray(real, dtype=np.int64).reshape(-1, 3)
    fake = np.asarray(fake, dtype=np.int64).reshape(-1, 3)
    if not len(real) or not len(fake):
        raise ValueError("real and fake batches must be nonempty")
    both = np.concatenate([real, fake])
    logits, (fcache, gcache) = disc_logits(params, tgt_table, both, return_cache=True)
    d = sigmoid(logits)
    nr = len(real)
    dr, df = d[:nr], d[nr:]
    cr = np.clip(dr, CLAMP_EPS, 1 - CLAMP_EPS)
    cf = np.clip(df, CLAMP_EPS, 1 - CLAMP_EPS)
    loss = float(-np.mean(np.log(cr)) - np.mean(np.log(1 - cf)))
    if not np.isfinite(loss):
        raise NumericError("discriminator loss is not finite")
    # clamped scores contribute no gradient
    g_real = np.where((dr > CLAMP_EPS) & (dr < 1 - CLAMP_EPS), -(1 - dr), 0.0) / nr
    g_fake = np.where((df > CLAMP_EPS) & (df < 1 - CLAMP_EPS), df, 0.0) / len(fake)
    g_logit = np.concatenate([g_real, g_fake])[:, None]
    fgrads, _ = mlp_backward(params.f, fcache, np.concatenate([g_logit, g_logit]))
    ggrads, _ = mlp_backward(params.g, gcache, g_logit)
    return loss, {**prefixed(fgrads, "f."), **prefixed(ggrads, "g.")}


def disc_loss(params: DiscriminatorParams, tgt_table: EmbeddingTable, real, fake) -> float:
    return disc_loss_and_grads(params, tgt_table, real, fake)[0]


def disc_train_step(params: DiscriminatorParams, tgt_table: EmbeddingTable, real, fake,
                    sgd: SgdConfig):
    """One SGD step on the discriminator loss; returns ``(params, pre-step loss)``."""
    loss, grads = disc_loss_and_grads(params, tgt_table, real, fake)
    return sgd_step(params, grads, sgd), loss


def corrupt_triplets(triplets, graph: KnowledgeGraph, rng: np.random.Generator,
                     max_rounds: int = 64) -> np.ndarray:
    """Replace the head, relation or tail (uniformly chosen) with a random symbol.

    Results that are true triplets of ``graph`` are redrawn.
    """
    t = np.array(triplets, dtype=np.int64).reshape(-1, 3)
    out = t.copy()
    todo = np.arange(len(t))
    sizes = np.array([graph.n_entities, graph.n_relations, graph.n_entities])
    for _ in range(max_rounds):
        if not len(todo):
            return out
        pos = rng.integers(3, size=len(todo))
        out[todo] = t[todo]
        out[todo, pos] = (rng.random(len(todo)) * sizes[pos]).astype(np.int64)
        todo = todo[graph.contains(out[todo])]
    raise SamplingError(f"could not corrupt {len(todo)} triplets into non-members")


def make_fake_batch(mode: FakeSourceMode, adversarial: Callable, random: Callable,
                    batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Fake triplets for discriminator training.

    ``adversarial(n, rng)`` and ``random(n, rng)`` each return ``(n, 3)``
    triplets. The mixed mode takes ``batch_size // 2`` random and the rest
    adversarial.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode is FakeSourceMode.ADVERSARIAL:
        return adversarial(batch_size, rng)
    if mode is FakeSourceMode.RANDOM:
        return random(batch_size, rng)
    n_rand = batch_size // 2
    parts = [random(n_rand, rng)] if n_rand else []
    parts.append(adversarial(batch_size - n_rand, rng))
    return np.concatenate(parts)
