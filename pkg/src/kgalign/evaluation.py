"""Entity-alignment ranking metrics and mode-collapse diagnostics.

Ranking is raw (unfiltered) by descending alignment probability; ties go to
the lower target index.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .alignment import AlignmentParams, Tables, entity_log_probs

DEFAULT_KS = (1, 10)
_CHUNK = 512


@dataclass(frozen=True)
class EvalReport:
    hits_at: dict
    mean_rank: float
    n_test: int
    ranks: np.ndarray = field(repr=False, compare=False, default=None)

    def lines(self) -> list[str]:
        out = [f"hits@{k}\t{v!r}" for k, v in sorted(self.hits_at.items())]
        out += [f"mean_rank\t{self.mean_rank!r}", f"n_test\t{self.n_test}"]
        return out


@dataclass(frozen=True)
class CollapseHistogram:
    """How many evaluated sources pick each target first, largest counts first."""

    targets: np.ndarray
    counts: np.ndarray
    n_test: int
    assignments: np.ndarray = field(repr=False, compare=False, default=None)

    def top(self, k: int) -> "CollapseHistogram":
        return CollapseHistogram(self.targets[:k], self.counts[:k], self.n_test, self.assignments)

    def entropy(self) -> float:
        p = self.counts[self.counts > 0] / self.n_test
        return float(-np.sum(p * np.log(p)))


def rank_target_entities(params: AlignmentParams, tables: Tables, e_s: int) -> np.ndarray:
    if not 0 <= e_s < tables.src.n_entities:
        raise IndexError(f"entity index {e_s} out of range")
    logp = entity_log_probs(params, tables, [e_s])[0]
    return np.argsort(-logp, kind="stable")


def true_ranks(params: AlignmentParams, tables: Tables, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    ranks = np.empty(len(pairs), dtype=np.int64)
    n_t = tables.tgt.n_entities
    idx = np.arange(n_t)
    for start in range(0, len(pairs), _CHUNK):
        p = pairs[start:start + _CHUNK]
        logp = entity_log_probs(params, tables, p[:, 0])
        own = logp[np.arange(len(p)), p[:, 1]][:, None]
        better = (logp > own) | ((logp == own) & (idx[None, :] < p[:, 1:2]))
        ranks[start:start + _CHUNK] = 1 + better.sum(axis=1)
    return ranks


def evaluate(params: AlignmentParams, tables: Tables, test_pairs,
             ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        raise ValueError("evaluation needs at least one test pair")
    ranks = true_ranks(params, tables, pairs)
    hits = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return EvalReport(hits, float(np.mean(ranks)), len(pairs), ranks)


def top_choices(params: AlignmentParams, tables: Tables, sources) -> np.ndarray:
    sources = np.asarray(sources, dtype=np.int64)
    out = np.empty(len(sources), dtype=np.int64)
    for start in range(0, len(sources), _CHUNK):
        out[start:start + _CHUNK] = np.argmax(
            entity_log_probs(params, tables, sources[start:start + _CHUNK]), axis=1)
    return out


def histogram_from_assignments(assignments) -> CollapseHistogram:
    assignments = np.asarray(assignments, dtype=np.int64)
    items = sorted(Counter(assignments.tolist()).items(), key=lambda kv: (-kv[1], kv[0]))
    targets = np.array([k for k, _ in items], dtype=np.int64)
    counts = np.array([c for _, c in items], dtype=np.int64)
    return CollapseHistogram(targets, counts, len(assignments), assignments)


def collapse_histogram(params: AlignmentParams, tables: Tables, test_sources,
                       top: int = None) -> CollapseHistogram:
    """Counts of first-ranked targets; ``top`` truncates to the largest entries."""
    sources = np.asarray(test_sources, dtype=np.int64)
    if not len(sources):
        raise ValueError("collapse histogram needs at least one source")
    hist = histogram_from_assignments(top_choices(params, tables, sources))
    return hist.top(top) if top is not None else hist


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_plot_data(data, path) -> None:
    """Write tab-separated numeric columns under a one-line header.

    ``data`` is an EvalReport, a CollapseHistogram, or a mapping of column
    name to equal-length sequences.
    """
    if isinstance(data, EvalReport):
        ks = sorted(data.hits_at)
        cols = {"k": ks, "hits": [data.hits_at[k] for k in ks]}
    elif isinstance(data, CollapseHistogram):
        cols = {"rank": list(range(1, len(data.counts) + 1)), "target": data.targets.tolist(),
                "count": data.counts.tolist()}
    elif isinstance(data, Mapping):
        cols = {k: list(v) for k, v in data.items()}
    else:
        raise TypeError(f"cannot emit plot data for {type(data).__name__}")
    lengths = {len(v) for v in cols.values()}
    if len(lengths) > 1:
        raise ValueError("plot columns differ in length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in zip(*cols.values()):
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def read_plot_data(path) -> dict[str, list]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        cols = {h: [] for h in header}
        for line in fh:
            for h, v in zip(header, line.rstrip("\n").split("\t")):
                cols[h].append(float(v) if any(c in v for c in ".eEn") else int(v))
    return cols


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric\tvalue\n")
        for line in report.lines():
            fh.write(line + "\n")


def read_report(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            k, v = line.rstrip("\n").split("\t")
            out[k] = float(v)
    return out
