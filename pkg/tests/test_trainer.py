import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgalign import trainer
from kgalign.alignment import AlignmentParams, Tables, procrustes_pretrain
from kgalign.discriminator import FakeSourceMode, init_discriminator
from kgalign.embedding import EmbedConfig, EmbeddingTable, train_embeddings
from kgalign.evaluation import evaluate
from kgalign.kg import AlignmentSeeds, KnowledgeGraph, synthesize_aligned_pair
from kgalign.trainer import (Baseline, RewardKind, TrainConfig, initial_alignment,
                             reinforce_weights, reward, reward_gradient, run_training)
from oracles import central_diff, expected_reward

AT_HALF = {RewardKind.LOG_X: -math.log(2), RewardKind.LOG_X_OVER_ONE_MINUS_X: 0.0,
           RewardKind.X_OVER_ONE_MINUS_X: 1.0, RewardKind.X: 0.5}
SLOPE_AT_HALF = {RewardKind.LOG_X: 2.0, RewardKind.LOG_X_OVER_ONE_MINUS_X: 4.0,
                 RewardKind.X_OVER_ONE_MINUS_X: 4.0, RewardKind.X: 1.0}


@pytest.mark.parametrize("kind", list(RewardKind))
def test_reward_at_half(kind):
    assert reward(kind, 0.5) == pytest.approx(AT_HALF[kind], abs=1e-15)
    h = 1e-6
    slope = (reward(kind, 0.5 + h) - reward(kind, 0.5 - h)) / (2 * h)
    assert slope == pytest.approx(SLOPE_AT_HALF[kind], rel=1e-8)


@pytest.mark.parametrize("kind", list(RewardKind))
@given(a=st.floats(1e-6, 1 - 1e-6), b=st.floats(1e-6, 1 - 1e-6))
def test_reward_is_increasing(kind, a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert reward(kind, lo) < reward(kind, hi)


def test_reward_domain():
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(ValueError):
            reward(RewardKind.X, bad)
    assert RewardKind.parse("log(x)") is RewardKind.LOG_X
    assert RewardKind.parse("x/(1-x)") is RewardKind.X_OVER_ONE_MINUS_X
    with pytest.raises(ValueError):
        RewardKind.parse("hinge")


def test_reinforce_weights():
    r = np.array([1.0, 2.0, 6.0])
    np.testing.assert_allclose(reinforce_weights(r, Baseline.NONE), r / 3)
    # leave-one-out means: 4, 3.5, 1.5
    np.testing.assert_allclose(reinforce_weights(r, Baseline.BATCH_MEAN), [-1.0, -0.5, 1.5])
    assert not reinforce_weights(np.zeros(5), Baseline.NONE).any()
    assert not reinforce_weights(np.full(5, 0.7), Baseline.BATCH_MEAN).any()
    np.testing.assert_allclose(reinforce_weights(np.array([0.4]), Baseline.BATCH_MEAN), [0.4])


def _toy(seed=0):
    rng = np.random.default_rng(seed)
    d = 2
    src = EmbeddingTable(rng.normal(size=(3, d)), rng.normal(size=(2, d)))
    tgt = EmbeddingTable(rng.normal(size=(3, d)), rng.normal(size=(2, d)))
    tables = Tables(src, tgt)
    align = AlignmentParams(rng.normal(size=(d, d)), rng.normal(size=(d, d)), 1.0)
    disc = init_discriminator(d, 8, rng)
    xs = np.array([[0, 0, 1], [1, 1, 2], [2, 0, 0], [0, 1, 2]])
    return tables, align, disc, xs


def test_constant_reward_gives_zero_update(monkeypatch):
    tables, align, disc, xs = _toy()
    monkeypatch.setattr(trainer, "reward", lambda kind, d: np.full(len(d), 0.3))
    cfg = TrainConfig(hidden_dim=8)
    grads, _, _ = reward_gradient(align, disc, tables, xs, cfg, np.random.default_rng(0))
    assert not grads["theta_e"].any() and not grads["theta_r"].any()


def _mc_gradient(baseline, n_batches, seed):
    tables, align, disc, xs = _toy()
    cfg = TrainConfig(reward=RewardKind.LOG_X, baseline=baseline, hidden_dim=8)
    rng = np.random.default_rng(seed)
    vecs = np.empty((n_batches, 8))
    for i in range(n_batches):
        g, _, _ = reward_gradient(align, disc, tables, xs, cfg, rng)
        vecs[i] = np.concatenate([g["theta_e"].ravel(), g["theta_r"].ravel()])
    return vecs


def test_both_baselines_estimate_the_same_gradient():
    tables, align, disc, xs = _toy()
    fn_e = lambda th: expected_reward(th, align.theta_r, align.eta, tables, xs, disc, np.log)
    fn_r = lambda th: expected_reward(align.theta_e, th, align.eta, tables, xs, disc, np.log)
    exact = np.concatenate([central_diff(fn_e, align.theta_e, 1e-5).ravel(),
                            central_diff(fn_r, align.theta_r, 1e-5).ravel()])
    for baseline, seed in ((Baseline.NONE, 1), (Baseline.BATCH_MEAN, 2)):
        v = _mc_gradient(baseline, 20_000, seed)
        se = v.std(axis=0, ddof=1) / math.sqrt(len(v))
        assert np.all(np.abs(v.mean(axis=0) - exact) <= 4 * se), baseline


@pytest.fixture(scope="module")
def small():
    src, tgt, truth = synthesize_aligned_pair(40, 4, 300, 1.0, 0)
    cfg = EmbedConfig(dim=8, epochs=30, batch_size=64)
    tables = Tables(train_embeddings(src, cfg),
                    train_embeddings(tgt, dataclasses.replace(cfg, rng_seed=1)))
    pairs = truth.entity_pairs()
    seeds = AlignmentSeeds(pairs[:10])
    return src, tgt, tables, seeds, pairs[10:]


def _cfg(**kw):
    base = dict(batch_size=32, mi_batch_size=16, max_steps=20, hidden_dim=16, eval_every=5,
                disc_pretrain_steps=5, mi_pretrain_steps=5, patience=0, align_lr=0.05,
                disc_lr=0.05, mi_lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_keeps_pretrained_alignment(small):
    src, tgt, tables, seeds, _ = small
    res = run_training(src, tgt, seeds, tables, _cfg(max_steps=0))
    want = procrustes_pretrain(seeds, tables.src, tables.tgt, 1.0)
    assert np.array_equal(res.checkpoint.align.theta_e, want.theta_e)
    assert np.array_equal(res.final.theta_r, want.theta_r)
    assert res.stopped_at == 0 and len(res.log) == 1


def test_unsupervised_start_is_noisy_identity(small):
    _, _, tables, _, _ = small
    p = initial_alignment(AlignmentSeeds.empty(), tables, _cfg(init_noise=0.01))
    assert np.abs(p.theta_e - np.eye(8)).max() <= 0.01
    assert not np.array_equal(p.theta_e, np.eye(8))


def test_mi_off_with_random_fakes(small):
    src, tgt, tables, seeds, _ = small
    res = run_training(src, tgt, seeds, tables, _cfg(mi_weight=0.0, fake_mode=FakeSourceMode.RANDOM))
    assert all(math.isnan(row[3]) for row in res.log)
    assert all(np.isfinite(res.final.theta_e).ravel())


@pytest.mark.parametrize("alternate", [False, True])
def test_runs_with_mi(small, alternate):
    src, tgt, tables, seeds, _ = small
    res = run_training(src, tgt, seeds, tables,
                       _cfg(alternate_mi=alternate, fake_mode=FakeSourceMode.RANDOM_PLUS_ADVERSARIAL))
    assert all(np.isfinite(row[3]) for row in res.log)
    assert [row[0] for row in res.log] == [0, 5, 10, 15, 20]


class _ScriptedEval:
    """Stands in for validation scoring with a fixed Hits@1 sequence."""

    def __init__(self, hits):
        self.hits, self.seen = list(hits), []

    def __call__(self, align, tables, pairs):
        self.seen.append(align)
        return SimpleNamespace(hits_at={1: self.hits[len(self.seen) - 1]}, mean_rank=1.0)


def test_best_checkpoint_is_retained(small, monkeypatch):
    src, tgt, tables, seeds, valid = small
    script = _ScriptedEval([0.1, 0.3, 0.2, 0.5, 0.5, 0.4, 0.45])
    monkeypatch.setattr(trainer, "evaluate", script)
    seen = []
    res = run_training(src, tgt, seeds, tables, _cfg(max_steps=30), valid_pairs=valid,
                       on_log=lambda row, best: seen.append((row[0], best)))
    assert [row[4] for row in res.log] == script.hits
    # ties keep the earlier checkpoint
    assert res.best_step == res.checkpoint.step == 15
    assert res.checkpoint.align is script.seen[3]
    assert res.final is script.seen[-1]
    assert [step for step, best in seen if best is not None] == [0, 5, 15]


def test_patience_stops_early(small, monkeypatch):
    src, tgt, tables, seeds, valid = small
    monkeypatch.setattr(trainer, "evaluate", _ScriptedEval([0.1, 0.2, 0.1, 0.3, 0.2, 0.2, 0.9]))
    res = run_training(src, tgt, seeds, tables, _cfg(max_steps=200, patience=2), valid_pairs=valid)
    assert res.stopped_at == 25 and res.best_step == 15
    assert [row[0] for row in res.log] == [0, 5, 10, 15, 20, 25]


def test_real_validation_scores_are_logged(small):
    src, tgt, tables, seeds, valid = small
    res = run_training(src, tgt, seeds, tables, _cfg(max_steps=10), valid_pairs=valid)
    for row in res.log:
        assert 0.0 <= row[4] <= 1.0 and 1.0 <= row[5] <= tables.tgt.n_entities
    assert evaluate(res.checkpoint.align, tables, valid).hits_at[1] == max(r[4] for r in res.log)


def test_training_is_deterministic(small):
    src, tgt, tables, seeds, _ = small
    a = run_training(src, tgt, seeds, tables, _cfg())
    b = run_training(src, tgt, seeds, tables, _cfg())
    assert a.log_lines() == b.log_lines()
    assert a.final.theta_e.tobytes() == b.final.theta_e.tobytes()
    c = run_training(src, tgt, seeds, tables, _cfg(rng_seed=1))
    assert c.final.theta_e.tobytes() != a.final.theta_e.tobytes()


def test_config_validation_and_digest():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(mi_weight=-1.0)
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(eta=2.0).digest()


def test_empty_graph_rejected(small):
    src, tgt, tables, seeds, _ = small
    empty = KnowledgeGraph(src.entities, src.relations, np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        run_training(empty, tgt, seeds, tables, _cfg())
