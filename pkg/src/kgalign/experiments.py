"""Synthetic benchmark and the ablation runners built on it.

The benchmark is a synthetic aligned pair, embedded independently per graph,
with a small fraction of the ground-truth entity pairs handed out as seeds
and the rest held out for testing.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .alignment import AlignmentParams, Tables
from .discriminator import FakeSourceMode
from .embedding import EmbedConfig, ModelKind, train_embeddings
from .evaluation import collapse_histogram, evaluate
from .kg import AlignmentSeeds, GroundTruthMap, KnowledgeGraph, synthesize_aligned_pair
from .seeding import stream
from .trainer import RewardKind, TrainConfig, TrainingResult, initial_alignment, run_training

# Small networks and larger step sizes than the full-scale defaults, so a run
# on the 200-entity benchmark finishes in well under a minute on one core.
DESK_OVERRIDES = dict(hidden_dim=128, batch_size=256, mi_batch_size=128, max_steps=1000,
                      eval_every=100, patience=0, disc_pretrain_steps=300, mi_pretrain_steps=300,
                      eta=10.0, align_lr=0.1, disc_lr=0.1, pretrain_lr=0.5)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_OVERRIDES, **overrides})


def n_seed_pairs(n: int, fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"seed fraction must be in [0, 1], got {fraction}")
    return int(np.floor(fraction * n + 0.5))


def seed_test_split(pairs: np.ndarray, fraction: float, seed: int):
    """Random ``(seed pairs, test pairs)`` split, each sorted by source index."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    k = n_seed_pairs(len(pairs), fraction)
    perm = stream(seed, "split").permutation(len(pairs))
    return pairs[np.sort(perm[:k])], pairs[np.sort(perm[k:])]


def embed_seed(seed: int, side: str) -> int:
    return int(stream(seed, f"embed-{side}").integers(2**63))


@dataclass(frozen=True, eq=False)
class Benchmark:
    src: KnowledgeGraph
    tgt: KnowledgeGraph
    truth: GroundTruthMap
    tables: Tables
    seeds: AlignmentSeeds
    test_pairs: np.ndarray

    def with_tables(self, tables: Tables) -> "Benchmark":
        return dataclasses.replace(self, tables=tables)

    def unsupervised(self) -> "Benchmark":
        """Same graphs and tables with no seeds; every mapped entity is a test pair."""
        return dataclasses.replace(self, seeds=AlignmentSeeds.empty(),
                                   test_pairs=self.truth.entity_pairs())


def embed_pair(src: KnowledgeGraph, tgt: KnowledgeGraph, config: EmbedConfig, seed: int) -> Tables:
    return Tables(train_embeddings(src, dataclasses.replace(config, rng_seed=embed_seed(seed, "source"))),
                  train_embeddings(tgt, dataclasses.replace(config, rng_seed=embed_seed(seed, "target"))))


def build_benchmark(n_entities: int = 200, n_relations: int = 20, n_triplets: int = 3000,
                    overlap: float = 0.9, seed_fraction: float = 0.05, seed: int = 0,
                    embed: EmbedConfig = EmbedConfig(dim=64)) -> Benchmark:
    src, tgt, truth = synthesize_aligned_pair(n_entities, n_relations, n_triplets, overlap, seed)
    seed_pairs, test = seed_test_split(truth.entity_pairs(), seed_fraction, seed)
    tables = embed_pair(src, tgt, embed, seed)
    seeds = AlignmentSeeds(seed_pairs) if len(seed_pairs) else AlignmentSeeds.empty()
    return Benchmark(src, tgt, truth, tables, seeds, test)


@dataclass(frozen=True, eq=False)
class VariantResult:
    name: str
    hits1: float
    hits10: float
    mean_rank: float
    top1_count: int
    seconds: float
    params: AlignmentParams
    training: Optional[TrainingResult] = None

    def row(self) -> str:
        return (f"{self.name}\t{self.hits1!r}\t{self.hits10!r}\t{self.mean_rank!r}\t"
                f"{self.top1_count}\t{self.seconds:.1f}")


RESULT_HEADER = "variant\thits1\thits10\tmean_rank\ttop1_count\tseconds"


def score_params(name: str, params: AlignmentParams, bench: Benchmark, seconds: float = 0.0,
                 training: Optional[TrainingResult] = None) -> VariantResult:
    rep = evaluate(params, bench.tables, bench.test_pairs)
    hist = collapse_histogram(params, bench.tables, bench.test_pairs[:, 0], top=1)
    return VariantResult(name, rep.hits_at[1], rep.hits_at[10], rep.mean_rank, int(hist.counts[0]),
                         seconds, params, training)


def run_variant(name: str, bench: Benchmark, config: TrainConfig) -> VariantResult:
    """Full pipeline on the benchmark; scores the retained checkpoint on the test pairs."""
    t0 = time.perf_counter()
    res = run_training(bench.src, bench.tgt, bench.seeds, bench.tables, config)
    return score_params(name, res.checkpoint.align, bench, time.perf_counter() - t0, res)


def baseline_variant(bench: Benchmark, config: TrainConfig) -> VariantResult:
    """Initialization only: Procrustes on the seeds, or the noisy identity without them."""
    return score_params("procrustes" if len(bench.seeds) else "init",
                        initial_alignment(bench.seeds, bench.tables, config), bench)


def ablate_reward(bench: Benchmark, base: TrainConfig,
                  kinds: Iterable[RewardKind] = tuple(RewardKind)) -> list[VariantResult]:
    out = [baseline_variant(bench, base)]
    for k in kinds:
        out.append(run_variant(f"reward={k.value}", bench, dataclasses.replace(base, reward=k)))
    return out


def ablate_fake_mode(bench: Benchmark, base: TrainConfig,
                     modes: Iterable[FakeSourceMode] = tuple(FakeSourceMode)) -> list[VariantResult]:
    return [run_variant(f"fake={m.value}", bench, dataclasses.replace(base, fake_mode=m))
            for m in modes]


def ablate_mi(bench: Benchmark, base: TrainConfig) -> list[VariantResult]:
    weight = base.mi_weight if base.mi_weight > 0 else TrainConfig.mi_weight
    return [run_variant("mi=0", bench, dataclasses.replace(base, mi_weight=0.0)),
            run_variant(f"mi={weight!r}", bench, dataclasses.replace(base, mi_weight=weight))]


def ablate_embedding(bench: Benchmark, base: TrainConfig, embed: EmbedConfig, seed: int,
                     kinds: Iterable[ModelKind] = tuple(ModelKind)) -> list[VariantResult]:
    out = []
    for k in kinds:
        tables = embed_pair(bench.src, bench.tgt, dataclasses.replace(embed, kind=k), seed)
        out.append(run_variant(f"embedding={k.name.lower()}", bench.with_tables(tables), base))
    return out
