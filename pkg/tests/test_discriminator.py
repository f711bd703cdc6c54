import math

import numpy as np
import pytest

from kgalign.discriminator import (CLAMP_EPS, DiscriminatorParams, FakeSourceMode, corrupt_triplets,
                                   disc_loss, disc_loss_and_grads, disc_score, disc_scores,
                                   disc_train_step, init_discriminator, make_fake_batch)
from kgalign.embedding import EmbeddingTable
from kgalign.errors import ShapeError
from kgalign.kg import synthesize_aligned_pair
from kgalign.nn import MlpParams, SgdConfig, finite_diff_check, zero_mlp
from oracles import disc_prob, mlp


def _table(rng, ne=6, nr=3, d=4):
    return EmbeddingTable(rng.normal(size=(ne, d)), rng.normal(size=(nr, d)))


def _zero_disc(d=4, hidden=5):
    return DiscriminatorParams(zero_mlp(d, hidden, 1), zero_mlp(3 * d, hidden, 1))


def test_zero_networks_score_half():
    rng = np.random.default_rng(0)
    t = _table(rng)
    disc = _zero_disc()
    assert disc_score(disc, t, (0, 1, 2)) == 0.5
    real = rng.integers([6, 3, 6], size=(7, 3))
    fake = rng.integers([6, 3, 6], size=(5, 3))
    assert disc_loss(disc, t, real, fake) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_head_equals_tail_counts_unary_twice():
    rng = np.random.default_rng(1)
    t = _table(rng)
    disc = init_discriminator(4, 8, rng)
    vh, vr = t.entity[3], t.relation[1]
    want = 2 * mlp(disc.f, vh[None])[0, 0] + mlp(disc.g, np.concatenate([vh, vr, vh])[None])[0, 0]
    assert disc_score(disc, t, (3, 1, 3)) == pytest.approx(1 / (1 + math.exp(-want)), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_scores_match_oracle(seed):
    rng = np.random.default_rng(seed)
    t = _table(rng)
    disc = init_discriminator(4, 16, rng)
    xs = rng.integers([6, 3, 6], size=(20, 3))
    want = np.array([disc_prob(disc, t, x) for x in xs])
    np.testing.assert_allclose(disc_scores(disc, t, xs), want, atol=1e-12)


def test_loss_recomputed_from_scores():
    rng = np.random.default_rng(2)
    t = _table(rng)
    disc = init_discriminator(4, 16, rng)
    real = rng.integers([6, 3, 6], size=(9, 3))
    fake = rng.integers([6, 3, 6], size=(4, 3))
    dr = np.array([disc_prob(disc, t, x) for x in real])
    df = np.array([disc_prob(disc, t, x) for x in fake])
    want = -np.mean(np.log(dr)) - np.mean(np.log(1 - df))
    assert disc_loss(disc, t, real, fake) == pytest.approx(want, abs=1e-12)


def test_loss_is_clamped():
    rng = np.random.default_rng(0)
    t = _table(rng)
    disc = _zero_disc()
    # a huge negative output bias drives every score to zero
    f = MlpParams(disc.f.w1, disc.f.b1, disc.f.w2, np.array([-1e4]), disc.f.slope)
    strong = DiscriminatorParams(f, disc.g)
    loss, grads = disc_loss_and_grads(strong, t, [[0, 0, 1]], [[1, 0, 2]])
    assert loss == pytest.approx(-math.log(CLAMP_EPS) - math.log(1 - CLAMP_EPS), rel=1e-9)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed + 20)
    t = _table(rng)
    disc = init_discriminator(4, 6, rng)
    real = rng.integers([6, 3, 6], size=(5, 3))
    fake = rng.integers([6, 3, 6], size=(3, 3))
    assert finite_diff_check(lambda p: disc_loss_and_grads(p, t, real, fake), disc, step=1e-6) <= 1e-6


def test_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        disc_score(init_discriminator(5, 4, rng), _table(rng), (0, 0, 1))


def test_separable_batch_is_learned():
    rng = np.random.default_rng(3)
    t = _table(rng, ne=20, nr=2, d=8)
    real = np.array([[i, 0, i + 1] for i in range(0, 10)])
    fake = np.array([[i, 1, i - 1] for i in range(10, 20)])
    disc = init_discriminator(8, 32, rng)
    sgd = SgdConfig(0.1)
    for _ in range(500):
        disc, _ = disc_train_step(disc, t, real, fake, sgd)
    assert disc_loss(disc, t, real, fake) < 0.1


def test_identical_batches_converge_to_half():
    rng = np.random.default_rng(4)
    t = _table(rng)
    batch = rng.integers([6, 3, 6], size=(12, 3))
    disc = init_discriminator(4, 16, rng)
    for _ in range(500):
        disc, _ = disc_train_step(disc, t, batch, batch, SgdConfig(0.05))
    assert np.all(np.abs(disc_scores(disc, t, batch) - 0.5) <= 0.05)


def test_train_step_reports_pre_step_loss():
    rng = np.random.default_rng(5)
    t = _table(rng)
    disc = init_discriminator(4, 8, rng)
    real, fake = [[0, 0, 1]], [[2, 1, 3]]
    new, loss = disc_train_step(disc, t, real, fake, SgdConfig(0.01))
    assert loss == disc_loss(disc, t, real, fake)
    assert disc_loss(new, t, real, fake) < loss


def test_corrupted_triplets_are_never_true():
    src, _, _ = synthesize_aligned_pair(30, 3, 200, 1.0, 1)
    rng = np.random.default_rng(6)
    base = src.triplets[rng.integers(src.n_triplets, size=10_000)]
    out = corrupt_triplets(base, src, rng)
    assert not src.contains(out).any()
    assert np.all((out != base).sum(axis=1) <= 1)


def _labelled(tag):
    def draw(n, rng):
        return np.full((n, 3), tag, dtype=np.int64)
    return draw


def test_fake_batch_mixing():
    rng = np.random.default_rng(0)
    adv, rnd = _labelled(1), _labelled(2)
    mixed = make_fake_batch(FakeSourceMode.RANDOM_PLUS_ADVERSARIAL, adv, rnd, 5, rng)
    assert (mixed[:, 0] == 2).sum() == 2 and (mixed[:, 0] == 1).sum() == 3
    assert np.all(make_fake_batch(FakeSourceMode.RANDOM, adv, rnd, 4, rng) == 2)
    assert np.all(make_fake_batch(FakeSourceMode.ADVERSARIAL, adv, rnd, 4, rng) == 1)
    one = make_fake_batch(FakeSourceMode.RANDOM_PLUS_ADVERSARIAL, adv, rnd, 1, rng)
    assert one.tolist() == [[1, 1, 1]]
    with pytest.raises(ValueError):
        make_fake_batch(FakeSourceMode.ADVERSARIAL, adv, rnd, 0, rng)


def test_fake_batch_deterministic():
    src, _, _ = synthesize_aligned_pair(30, 3, 200, 1.0, 1)

    def rnd(n, rng):
        return corrupt_triplets(src.triplets[rng.integers(src.n_triplets, size=n)], src, rng)

    def adv(n, rng):
        return rng.integers([30, 3, 30], size=(n, 3))

    mode = FakeSourceMode.RANDOM_PLUS_ADVERSARIAL
    a = make_fake_batch(mode, adv, rnd, 33, np.random.default_rng(8))
    b = make_fake_batch(mode, adv, rnd, 33, np.random.default_rng(8))
    assert np.array_equal(a, b)


def test_mode_parsing():
    assert FakeSourceMode.parse("rand+adv") is FakeSourceMode.RANDOM_PLUS_ADVERSARIAL
    assert FakeSourceMode.parse("ADV") is FakeSourceMode.ADVERSARIAL
    with pytest.raises(ValueError):
        FakeSourceMode.parse("mixed")
