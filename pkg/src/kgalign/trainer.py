"""Adversarial fine-tuning of the alignment functions.

The loop pre-trains the projections (Procrustes on seeds, or a noisy
identity without them), pre-trains the discriminator and the MI statistic
network, then alternates: discriminator step, reward step on the
projections, statistic-network step, and the MI ascent on ``theta_e``
(folded into the reward step unless ``alternate_mi`` is set).
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .alignment import (AlignmentParams, Tables, noisy_identity, procrustes_pretrain,
                        sample_aligned_triplets, weighted_logprob_grad)
from .checkpoint import Checkpoint
from .discriminator import (CLAMP_EPS, DiscriminatorParams, FakeSourceMode, corrupt_triplets,
                            disc_scores, disc_train_step, init_discriminator, make_fake_batch)
from .errors import NumericError
from .evaluation import evaluate
from .kg import AlignmentSeeds, KnowledgeGraph
from .mi import (MiEstimatorParams, init_mi_estimator, mi_grad_theta, mi_train_step_gamma,
                 sample_mi_batch)
from .nn import DEFAULT_HIDDEN, SgdConfig, sgd_step
from .seeding import stream

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "disc_loss", "mean_reward", "mi_estimate", "valid_hits1", "valid_mr")


class RewardKind(enum.Enum):
    LOG_X = "logx"
    LOG_X_OVER_ONE_MINUS_X = "logit"
    X_OVER_ONE_MINUS_X = "odds"
    X = "x"

    @classmethod
    def parse(cls, text: str) -> "RewardKind":
        aliases = {"log": cls.LOG_X, "log(x)": cls.LOG_X,
                   "log-odds": cls.LOG_X_OVER_ONE_MINUS_X, "logx/(1-x)": cls.LOG_X_OVER_ONE_MINUS_X,
                   "x/(1-x)": cls.X_OVER_ONE_MINUS_X}
        key = text.strip().lower()
        if key in aliases:
            return aliases[key]
        for m in cls:
            if key in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown reward {text!r}; expected one of {[m.value for m in cls]}")


class Baseline(enum.Enum):
    NONE = "none"
    BATCH_MEAN = "batch-mean"

    @classmethod
    def parse(cls, text: str) -> "Baseline":
        key = text.strip().lower().replace("_", "-")
        for m in cls:
            if key in (m.value, m.name.lower().replace("_", "-")):
                return m
        raise ValueError(f"unknown baseline {text!r}")


def reward(kind: RewardKind, d):
    """Reward of discriminator output ``d``; every kind increases with ``d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any((d <= 0) | (d >= 1)) or np.any(~np.isfinite(d)):
        raise ValueError("reward is only defined for discriminator outputs strictly inside (0, 1)")
    if kind is RewardKind.LOG_X:
        out = np.log(d)
    elif kind is RewardKind.LOG_X_OVER_ONE_MINUS_X:
        out = np.log(d) - np.log1p(-d)
    elif kind is RewardKind.X_OVER_ONE_MINUS_X:
        out = d / (1.0 - d)
    else:
        out = d.copy()
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TrainConfig:
    reward: RewardKind = RewardKind.X
    mi_weight: float = 0.1
    fake_mode: FakeSourceMode = FakeSourceMode.ADVERSARIAL
    batch_size: int = 512
    mi_batch_size: int = 256
    max_steps: int = 2000
    align_lr: float = 0.001
    disc_lr: float = 0.001
    mi_lr: float = 0.001
    pretrain_lr: float = 0.1
    disc_pretrain_steps: int = 1000
    mi_pretrain_steps: int = 1000
    baseline: Baseline = Baseline.BATCH_MEAN
    eval_every: int = 100
    patience: int = 5
    rng_seed: int = 0
    hidden_dim: int = DEFAULT_HIDDEN
    eta: float = 1.0
    init_noise: float = 0.01
    clip_norm: Optional[float] = None
    alternate_mi: bool = False

    def __post_init__(self):
        for name in ("batch_size", "mi_batch_size", "eval_every", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("max_steps", "disc_pretrain_steps", "mi_pretrain_steps", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("align_lr", "disc_lr", "mi_lr", "pretrain_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mi_weight < 0 or self.eta < 0:
            raise ValueError("mi_weight and eta must be non-negative")

    def digest(self) -> str:
        items = sorted((f.name, getattr(self, f.name)) for f in dataclasses.fields(self))
        text = ";".join(f"{k}={v.value if isinstance(v, enum.Enum) else v!r}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def sample_source_triplets(src_graph: KnowledgeGraph, n: int, rng) -> np.ndarray:
    """Uniform draws (with replacement) from the source triplet list."""
    return src_graph.triplets[rng.integers(src_graph.n_triplets, size=n)]


def reinforce_weights(rewards: np.ndarray, baseline: Baseline) -> np.ndarray:
    """Per-sample weights ``(R_i - b_i) / n``.

    The batch-mean baseline leaves sample ``i`` out of its own mean, which
    keeps the estimator unbiased.
    """
    n = len(rewards)
    if baseline is Baseline.BATCH_MEAN and n > 1:
        b = (rewards.sum() - rewards) / (n - 1)
        return (rewards - b) / n
    return rewards / n


def reward_gradient(align: AlignmentParams, disc: DiscriminatorParams, tables: Tables,
                    xs: np.ndarray, config: TrainConfig, rng):
    """Score-function estimate of the gradient of the expected reward.

    Samples one aligned triplet per source triplet and returns
    ``(ascent gradient, rewards, aligned triplets)``; the gradient of the
    reward loss is its negation.
    """
    xt = sample_aligned_triplets(align, tables, xs, rng)
    d = np.clip(disc_scores(disc, tables.tgt, xt), CLAMP_EPS, 1 - CLAMP_EPS)
    r = reward(config.reward, d)
    grads = weighted_logprob_grad(align, tables, xs, xt, reinforce_weights(r, config.baseline))
    return grads, r, xt


def align_train_step(align: AlignmentParams, disc: DiscriminatorParams,
                     mi: Optional[MiEstimatorParams], tables: Tables, src_graph: KnowledgeGraph,
                     config: TrainConfig, rng):
    """One ascent step of the projections on reward (plus ``mi_weight`` x MI).

    Returns ``(align, diagnostics)``.
    """
    xs = sample_source_triplets(src_graph, config.batch_size, rng)
    grads, r, _ = reward_gradient(align, disc, tables, xs, config, rng)
    diag = {"mean_reward": float(np.mean(r))}
    if mi is not None and config.mi_weight > 0 and not config.alternate_mi:
        batch = sample_mi_batch(align, tables, config.mi_batch_size, rng)
        grads["theta_e"] = grads["theta_e"] + config.mi_weight * mi_grad_theta(mi, align, tables, batch)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite {k} gradient in alignment step")
    new = sgd_step(align, grads, SgdConfig(config.align_lr, config.clip_norm), ascend=True)
    return new, diag


def mi_ascent_step(align: AlignmentParams, mi: MiEstimatorParams, tables: Tables,
                   config: TrainConfig, rng) -> AlignmentParams:
    batch = sample_mi_batch(align, tables, config.mi_batch_size, rng)
    g = config.mi_weight * mi_grad_theta(mi, align, tables, batch)
    return sgd_step(align, {"theta_e": g}, SgdConfig(config.align_lr, config.clip_norm), ascend=True)


def initial_alignment(seeds: AlignmentSeeds, tables: Tables, config: TrainConfig) -> AlignmentParams:
    if seeds is not None and len(seeds.entity_pairs):
        return procrustes_pretrain(seeds, tables.src, tables.tgt, config.eta)
    return noisy_identity(tables.tgt.dim, tables.src.dim, stream(config.rng_seed, "init"),
                          config.init_noise, config.eta)


class _Fakes:
    """Adversarial and random fake-triplet sources bound to the current state."""

    def __init__(self, src_graph, tgt_graph, tables):
        self.src_graph, self.tgt_graph, self.tables = src_graph, tgt_graph, tables
        self.align = None

    def adversarial(self, n, rng):
        xs = sample_source_triplets(self.src_graph, n, rng)
        return sample_aligned_triplets(self.align, self.tables, xs, rng)

    def random(self, n, rng):
        real = sample_source_triplets(self.tgt_graph, n, rng)
        return corrupt_triplets(real, self.tgt_graph, rng)


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    log: list
    initial: AlignmentParams
    final: AlignmentParams
    best_step: int
    stopped_at: int

    def log_lines(self) -> list[str]:
        return ["#" + "\t".join(LOG_HEADER)] + [format_log_row(row) for row in self.log]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def format_log_row(row) -> str:
    return "\t".join(_fmt(v) for v in row)


def run_training(src_graph: KnowledgeGraph, tgt_graph: KnowledgeGraph,
                 seeds: Optional[AlignmentSeeds], tables: Tables, config: TrainConfig,
                 valid_pairs=None, on_log=None) -> TrainingResult:
    """Pre-train, then alternate updates with early stopping.

    With ``valid_pairs`` the retained checkpoint is the one with the best
    validation Hits@1 (ties keep the earlier one); otherwise the best mean
    reward over an evaluation window. ``on_log(row)`` is called for each
    log row, and receives the current best checkpoint as a second argument
    whenever it changes.
    """
    if src_graph.n_triplets == 0:
        raise ValueError("source graph has no triplets")
    if tgt_graph.n_triplets == 0:
        raise ValueError("target graph has no triplets")
    seed = config.rng_seed
    align = initial_alignment(seeds, tables, config)
    initial = align
    fakes = _Fakes(src_graph, tgt_graph, tables)
    use_mi = config.mi_weight > 0

    rng_disc = stream(seed, "disc")
    disc = init_discriminator(tables.tgt.dim, config.hidden_dim, stream(seed, "disc-init"))
    pre = SgdConfig(config.pretrain_lr, config.clip_norm)
    disc_loss = math.nan
    for _ in range(config.disc_pretrain_steps):
        real = sample_source_triplets(tgt_graph, config.batch_size, rng_disc)
        fake = fakes.random(config.batch_size, rng_disc)
        disc, disc_loss = disc_train_step(disc, tables.tgt, real, fake, pre)

    rng_mi = stream(seed, "mi")
    mi = init_mi_estimator(tables.src.dim, tables.tgt.dim, config.hidden_dim, stream(seed, "mi-init"))
    mi_est = math.nan
    if use_mi:
        for _ in range(config.mi_pretrain_steps):
            batch = sample_mi_batch(align, tables, config.mi_batch_size, rng_mi)
            mi, mi_est = mi_train_step_gamma(mi, batch, tables, pre)

    rng_align = stream(seed, "align")
    disc_sgd = SgdConfig(config.disc_lr, config.clip_norm)
    mi_sgd = SgdConfig(config.mi_lr, config.clip_norm)
    digest = config.digest()
    rows = []

    def snapshot(step):
        return Checkpoint(align, disc, mi, step, digest)

    def measure(rewards):
        if valid_pairs is not None and len(valid_pairs):
            rep = evaluate(align, tables, valid_pairs)
            return rep.hits_at[1], rep.mean_rank, rep.hits_at[1]
        score = float(np.mean(rewards)) if rewards else -math.inf
        return math.nan, math.nan, score

    window = []
    h1, mr, score = measure(window)
    best, best_score, best_step, bad = snapshot(0), score, 0, 0
    rows.append((0, disc_loss, math.nan, mi_est, h1, mr))
    if on_log:
        on_log(rows[-1], best)
    step = 0
    for step in range(1, config.max_steps + 1):
        fakes.align = align
        real = sample_source_triplets(tgt_graph, config.batch_size, rng_disc)
        fake = make_fake_batch(config.fake_mode, fakes.adversarial, fakes.random,
                               config.batch_size, rng_disc)
        disc, disc_loss = disc_train_step(disc, tables.tgt, real, fake, disc_sgd)
        try:
            align, diag = align_train_step(align, disc, mi if use_mi else None, tables, src_graph,
                                           config, rng_align)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        window.append(diag["mean_reward"])
        if use_mi:
            batch = sample_mi_batch(align, tables, config.mi_batch_size, rng_mi)
            mi, mi_est = mi_train_step_gamma(mi, batch, tables, mi_sgd)
            if config.alternate_mi:
                align = mi_ascent_step(align, mi, tables, config, rng_align)
        if step % config.eval_every == 0 or step == config.max_steps:
            h1, mr, score = measure(window)
            rows.append((step, disc_loss, float(np.mean(window)), mi_est, h1, mr))
            window = []
            improved = score > best_score
            if improved:
                best, best_score, best_step, bad = snapshot(step), score, step, 0
            else:
                bad += 1
            log.info("step %d disc_loss %.4f reward %.4f mi %.4f hits1 %s", step, disc_loss,
                     rows[-1][2], mi_est, h1)
            if on_log:
                on_log(rows[-1], best if improved else None)
            if config.patience and bad >= config.patience:
                break
    return TrainingResult(best, rows, initial, align, best_step, step)
