"""Knowledge graphs, seed pairs, ground-truth maps and a synthetic pair generator."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConflictError, ParseError, VocabularyError

RELATION_SECTION = "== relations =="


def _index_of(vocab: Sequence[str]) -> dict[str, int]:
    return {s: i for i, s in enumerate(vocab)}


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Interned entity/relation vocabularies plus a deduplicated triplet array.

    ``triplets`` is an ``(n, 3)`` int64 array of (head, relation, tail)
    indices, kept in first-seen order.
    """

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triplets: np.ndarray = field(repr=False)

    def __post_init__(self):
        trip = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        trip.setflags(write=False)
        object.__setattr__(self, "triplets", trip)
        if len(set(self.entities)) != len(self.entities):
            raise VocabularyError("duplicate entity symbols")
        if len(set(self.relations)) != len(self.relations):
            raise VocabularyError("duplicate relation symbols")
        if len(trip):
            ne, nr = len(self.entities), len(self.relations)
            if (trip.min() < 0 or trip[:, [0, 2]].max() >= ne
                    or trip[:, 1].max() >= nr):
                raise IndexError("triplet index out of vocabulary range")
            if len(np.unique(self.keys)) != len(trip):
                raise ValueError("duplicate triplets")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    @cached_property
    def entity_index(self) -> dict[str, int]:
        return _index_of(self.entities)

    @cached_property
    def relation_index(self) -> dict[str, int]:
        return _index_of(self.relations)

    @cached_property
    def keys(self) -> np.ndarray:
        """One int64 key per triplet; see :meth:`encode`."""
        return self.encode(self.triplets)

    @cached_property
    def key_set(self) -> frozenset:
        return frozenset(self.keys.tolist())

    def encode(self, triplets) -> np.ndarray:
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        ne, nr = max(self.n_entities, 1), max(self.n_relations, 1)
        return (t[:, 0] * nr + t[:, 1]) * ne + t[:, 2]

    def contains(self, triplets) -> np.ndarray:
        """Boolean membership mask for an ``(n, 3)`` batch."""
        return np.isin(self.encode(triplets), self.keys)

    def __contains__(self, triplet) -> bool:
        return int(self.encode(triplet)[0]) in self.key_set

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entities == other.entities and self.relations == other.relations
                and np.array_equal(self.triplets, other.triplets))

    __hash__ = None

    def vocab(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return self.entities, self.relations

    def symbol_triplets(self):
        for h, r, t in self.triplets.tolist():
            yield self.entities[h], self.relations[r], self.entities[t]

    @classmethod
    def from_symbols(cls, rows: Iterable[tuple[str, str, str]], vocab=None) -> "KnowledgeGraph":
        """Intern symbol triplets. With ``vocab`` the vocabularies are frozen."""
        if vocab is not None:
            entities, relations = (tuple(v) for v in vocab)
            e_idx, r_idx = _index_of(entities), _index_of(relations)
        else:
            entities, relations = [], []
            e_idx, r_idx = {}, {}
        seen = set()
        out = []
        for h, r, t in rows:
            ids = []
            for sym, idx, vocab_list, kind in ((h, e_idx, entities, "entity"),
                                               (r, r_idx, relations, "relation"),
                                               (t, e_idx, entities, "entity")):
                i = idx.get(sym)
                if i is None:
                    if vocab is not None:
                        raise VocabularyError(f"unknown {kind} symbol {sym!r}")
                    i = idx[sym] = len(vocab_list)
                    vocab_list.append(sym)
                ids.append(i)
            key = tuple(ids)
            if key not in seen:
                seen.add(key)
                out.append(key)
        return cls(tuple(entities), tuple(relations), np.array(out, dtype=np.int64).reshape(-1, 3))


def _read_rows(path, n_fields):
    """Yield (line_no, fields) for non-blank, non-comment lines."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise ParseError(f"expected {n_fields} tab-separated fields, got {len(fields)}",
                                 path, line_no)
            yield line_no, fields


def load_triples(path, existing_vocab=None) -> KnowledgeGraph:
    """Read a tab-separated ``head<TAB>relation<TAB>tail`` file.

    ``existing_vocab`` may be a KnowledgeGraph or an ``(entities, relations)``
    pair; unseen symbols are then rejected.
    """
    if isinstance(existing_vocab, KnowledgeGraph):
        existing_vocab = existing_vocab.vocab()
    rows = (tuple(f) for _, f in _read_rows(path, 3))
    return KnowledgeGraph.from_symbols(rows, vocab=existing_vocab)


def write_triples(g: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in g.symbol_triplets():
            fh.write(f"{h}\t{r}\t{t}\n")


@dataclass(frozen=True, eq=False)
class AlignmentSeeds:
    """Labeled (source, target) index pairs. Relation pairs are optional."""

    entity_pairs: np.ndarray
    relation_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    def __post_init__(self):
        for name in ("entity_pairs", "relation_pairs"):
            a = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        for a, kind in ((self.entity_pairs, "entity"), (self.relation_pairs, "relation")):
            if len(np.unique(a[:, 0])) != len(a):
                raise ConflictError(f"source {kind} appears twice in seed pairs")

    def __len__(self):
        return len(self.entity_pairs)

    def __eq__(self, other):
        return (np.array_equal(self.entity_pairs, other.entity_pairs)
                and np.array_equal(self.relation_pairs, other.relation_pairs))

    __hash__ = None

    @classmethod
    def empty(cls) -> "AlignmentSeeds":
        return cls(np.zeros((0, 2), np.int64))


def _intern_pairs(pairs, src_index, tgt_index, kind, skip_unknown=False):
    out: dict[int, int] = {}
    for where, a, b in pairs:
        i, j = src_index.get(a), tgt_index.get(b)
        if i is None or j is None:
            if skip_unknown:
                continue
            missing = a if i is None else b
            raise VocabularyError(f"{where}: unknown {kind} symbol {missing!r}")
        if i in out and out[i] != j:
            raise ConflictError(f"{where}: source {kind} {a!r} paired with two targets")
        out[i] = j
    return np.array(list(out.items()), dtype=np.int64).reshape(-1, 2)


def _read_sectioned_pairs(path):
    """Split a two-column pair file at the relation-section marker."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    sections = {"entity": [], "relation": []}
    current = "entity"
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line.strip() == RELATION_SECTION:
                current = "relation"
                continue
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", path, line_no)
            sections[current].append((f"{path}:{line_no}", fields[0], fields[1]))
    return sections


def load_seed_pairs(path, src: KnowledgeGraph, tgt: KnowledgeGraph,
                    skip_unknown: bool = False) -> AlignmentSeeds:
    """Load aligned symbol pairs.

    Lines after a ``== relations ==`` marker are relation pairs. With
    ``skip_unknown`` pairs naming symbols absent from either graph are
    dropped instead of raising (used when test entities never occur in the
    training triplets).
    """
    sec = _read_sectioned_pairs(path)
    ents = _intern_pairs(sec["entity"], src.entity_index, tgt.entity_index, "entity", skip_unknown)
    rels = _intern_pairs(sec["relation"], src.relation_index, tgt.relation_index, "relation",
                         skip_unknown)
    return AlignmentSeeds(ents, rels)


def load_aligned_triplets(path, src: KnowledgeGraph, tgt: KnowledgeGraph,
                          skip_unknown: bool = False) -> AlignmentSeeds:
    """Reduce 6-column aligned-triplet lines to entity and relation pairs by position."""
    ent_rows, rel_rows = [], []
    for line_no, f in _read_rows(path, 6):
        where = f"{path}:{line_no}"
        ent_rows += [(where, f[0], f[3]), (where, f[2], f[5])]
        rel_rows.append((where, f[1], f[4]))
    return AlignmentSeeds(
        _intern_pairs(ent_rows, src.entity_index, tgt.entity_index, "entity", skip_unknown),
        _intern_pairs(rel_rows, src.relation_index, tgt.relation_index, "relation", skip_unknown))


def write_pairs(path, entity_pairs, src: KnowledgeGraph, tgt: KnowledgeGraph,
                relation_pairs=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j in np.asarray(entity_pairs).reshape(-1, 2).tolist():
            fh.write(f"{src.entities[i]}\t{tgt.entities[j]}\n")
        if relation_pairs is not None:
            fh.write(RELATION_SECTION + "\n")
            for i, j in np.asarray(relation_pairs).reshape(-1, 2).tolist():
                fh.write(f"{src.relations[i]}\t{tgt.relations[j]}\n")


def split_pairs(seeds: AlignmentSeeds, validation_fraction: float, rng_seed: int):
    """Random train/validation split of the entity pairs.

    Relation pairs all stay in the training part.
    """
    if not 0.0 <= validation_fraction < 1.0:
        raise ValueError(f"validation_fraction must be in [0, 1), got {validation_fraction}")
    n = len(seeds.entity_pairs)
    if n == 0:
        raise ValueError("cannot split an empty seed set")
    n_valid = int(np.floor(validation_fraction * n + 0.5))
    perm = np.random.default_rng(rng_seed).permutation(n)
    valid_idx = np.sort(perm[:n_valid])
    train_idx = np.sort(perm[n_valid:])
    return (AlignmentSeeds(seeds.entity_pairs[train_idx], seeds.relation_pairs),
            AlignmentSeeds(seeds.entity_pairs[valid_idx]))


@dataclass(frozen=True, eq=False)
class GroundTruthMap:
    """Injective source->target index maps; ``-1`` marks an unmapped source."""

    entity_map: np.ndarray
    relation_map: np.ndarray

    def __post_init__(self):
        for name in ("entity_map", "relation_map"):
            a = np.asarray(getattr(self, name), dtype=np.int64).ravel()
            mapped = a[a >= 0]
            if len(np.unique(mapped)) != len(mapped):
                raise ConflictError(f"{name} is not injective")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def entity_pairs(self) -> np.ndarray:
        src = np.flatnonzero(self.entity_map >= 0)
        return np.stack([src, self.entity_map[src]], axis=1)

    def relation_pairs(self) -> np.ndarray:
        src = np.flatnonzero(self.relation_map >= 0)
        return np.stack([src, self.relation_map[src]], axis=1)

    def apply(self, triplets) -> np.ndarray:
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        return np.stack([self.entity_map[t[:, 0]], self.relation_map[t[:, 1]],
                         self.entity_map[t[:, 2]]], axis=1)


def write_truth_map(path, truth: GroundTruthMap, src: KnowledgeGraph, tgt: KnowledgeGraph) -> None:
    write_pairs(path, truth.entity_pairs(), src, tgt, truth.relation_pairs())


def load_truth_map(path, src: KnowledgeGraph, tgt: KnowledgeGraph) -> GroundTruthMap:
    seeds = load_seed_pairs(path, src, tgt)
    em = np.full(src.n_entities, -1, np.int64)
    rm = np.full(src.n_relations, -1, np.int64)
    em[seeds.entity_pairs[:, 0]] = seeds.entity_pairs[:, 1]
    rm[seeds.relation_pairs[:, 0]] = seeds.relation_pairs[:, 1]
    return GroundTruthMap(em, rm)


@dataclass(frozen=True)
class GraphStats:
    n_entities: int
    n_relations: int
    n_triplets: int
    degree_histogram: dict

    def as_lines(self) -> list[str]:
        return [f"entities\t{self.n_entities}", f"relations\t{self.n_relations}",
                f"triplets\t{self.n_triplets}"]


def graph_stats(g: KnowledgeGraph) -> GraphStats:
    """Counts plus a histogram ``{degree: number of entities}``.

    Degree counts head and tail occurrences, so a self-loop adds two.
    """
    deg = np.bincount(g.triplets[:, [0, 2]].ravel(), minlength=g.n_entities)
    hist = dict(sorted(Counter(deg.tolist()).items())) if g.n_entities else {}
    return GraphStats(g.n_entities, g.n_relations, g.n_triplets, hist)


# --- synthetic aligned pairs -------------------------------------------------

_LATENT_DIM = 8
_TAIL_TEMPERATURE = 0.5


class _TranslationalWorld:
    """Latent entity points and relation offsets; tails cluster near head + offset.

    Gives synthetic graphs the kind of regularity translational embeddings
    can pick up, which uniformly random triplets lack.
    """

    def __init__(self, n_entities, n_relations, rng):
        self.rng = rng
        self.ne, self.nr = n_entities, n_relations
        self.z = rng.normal(size=(n_entities, _LATENT_DIM))
        self.w = rng.normal(scale=0.7, size=(n_relations, _LATENT_DIM))

    def tails(self, heads, rels):
        target = self.z[heads] + self.w[rels]
        d2 = ((target[:, None, :] - self.z[None, :, :]) ** 2).sum(-1)
        logits = -d2 / _TAIL_TEMPERATURE
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        u = self.rng.random(len(heads))[:, None]
        return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), self.ne - 1)

    def sample(self, n, heads=None, rels=None):
        heads = self.rng.integers(self.ne, size=n) if heads is None else np.asarray(heads)
        rels = self.rng.integers(self.nr, size=n) if rels is None else np.asarray(rels)
        return np.stack([heads, rels, self.tails(heads, rels)], axis=1)


def _encode(t, ne, nr):
    return (t[:, 0] * nr + t[:, 1]) * ne + t[:, 2]


def _fill(world, have_keys: set, forbid: set, want: int, cover_e=(), cover_r=()):
    """Draw ``want`` distinct new triplets avoiding ``have_keys | forbid``.

    Uncovered entities/relations are placed first (as heads / relations).
    """
    ne, nr, rng = world.ne, world.nr, world.rng
    out, keys = [], set()

    def take(batch):
        for row, k in zip(batch.tolist(), _encode(batch, ne, nr).tolist()):
            if len(out) == want:
                return
            if k in keys or k in have_keys or k in forbid:
                continue
            keys.add(k)
            out.append(row)

    cover_e, cover_r = list(cover_e), list(cover_r)
    if len(cover_e) + len(cover_r) > want:
        raise ValueError("too few triplets to cover every entity and relation")
    for _ in range(50):
        pending = [e for e in cover_e if not any(row[0] == e or row[2] == e for row in out)]
        pending_r = [r for r in cover_r if not any(row[1] == r for row in out)]
        if not pending and not pending_r:
            break
        if pending:
            take(world.sample(len(pending), heads=pending))
        if pending_r:
            take(world.sample(len(pending_r), rels=pending_r))
    # anything still uncovered gets a uniformly chosen free triplet
    used = keys | have_keys | forbid
    for axis, items in ((0, cover_e), (1, cover_r)):
        col = [0, 2] if axis == 0 else [1]
        for x in items:
            if any(row[c] == x for row in out for c in col):
                continue
            h, r, t = np.meshgrid(np.arange(ne), np.arange(nr), np.arange(ne), indexing="ij")
            cand = np.stack([h.ravel(), r.ravel(), t.ravel()], axis=1)
            cand = cand[(cand[:, col] == x).any(axis=1)]
            cand = cand[~np.isin(_encode(cand, ne, nr), np.fromiter(used, np.int64, len(used)))]
            if not len(cand) or len(out) == want:
                raise ValueError("cannot cover every entity and relation with distinct triplets")
            take(cand[rng.integers(len(cand))][None, :])
            used = keys | have_keys | forbid
    stalls = 0
    while len(out) < want:
        before = len(out)
        take(world.sample(max(2 * (want - len(out)), 64)))
        stalls = stalls + 1 if len(out) == before else 0
        if stalls > 20:
            # structured proposals exhausted: fall back to uniform triplets
            all_keys = np.arange(ne * nr * ne)
            free = np.setdiff1d(all_keys, np.fromiter(keys | have_keys | forbid, np.int64))
            pick = rng.permutation(free)[: want - len(out)]
            h, rem = np.divmod(pick, nr * ne)
            r, t = np.divmod(rem, ne)
            take(np.stack([h, r, t], axis=1))
            break
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def synthesize_aligned_pair(n_entities: int, n_relations: int, n_triplets: int,
                            overlap_fraction: float, rng_seed: int):
    """Build a source graph and a relabeled target graph sharing some triplets.

    Both graphs are drawn from one latent translational model. The target
    keeps ``round(overlap_fraction * n_triplets)`` source triplets (relabeled
    by random entity and relation permutations) and fills the rest with
    fresh triplets that do not occur in the source. Every entity and
    relation appears in each graph, so vocabulary sizes equal the requested
    counts.

    Returns ``(src, tgt, truth)``.
    """
    if n_entities < 1 or n_relations < 1 or n_triplets < 1:
        raise ValueError("counts must be positive")
    if not 0.0 < overlap_fraction <= 1.0:
        raise ValueError(f"overlap_fraction must be in (0, 1], got {overlap_fraction}")
    if n_triplets > n_entities * n_entities * n_relations:
        raise ValueError(f"{n_triplets} triplets exceed the {n_entities ** 2 * n_relations} "
                         "possible distinct triplets")
    rng = np.random.default_rng(rng_seed)
    world = _TranslationalWorld(n_entities, n_relations, rng)
    ne, nr = n_entities, n_relations

    base = _fill(world, set(), set(), n_triplets, range(ne), range(nr))
    n_shared = int(np.floor(overlap_fraction * n_triplets + 0.5))
    shared = base[np.sort(rng.permutation(n_triplets)[:n_shared])]
    base_keys = set(_encode(base, ne, nr).tolist())
    shared_keys = set(_encode(shared, ne, nr).tolist())
    missing_e = sorted(set(range(ne)) - set(shared[:, [0, 2]].ravel().tolist()))
    missing_r = sorted(set(range(nr)) - set(shared[:, 1].tolist()))
    fresh = _fill(world, shared_keys, base_keys, n_triplets - n_shared, missing_e, missing_r)
    tgt_latent = np.concatenate([shared, fresh])

    ent_perm = rng.permutation(ne)
    rel_perm = rng.permutation(nr)
    src_rows = base[rng.permutation(len(base))]
    tgt_rows = tgt_latent[rng.permutation(len(tgt_latent))]
    width = len(str(max(ne, nr) - 1))
    src = KnowledgeGraph.from_symbols(
        (f"s_e{h:0{width}d}", f"s_r{r:0{width}d}", f"s_e{t:0{width}d}") for h, r, t in src_rows.tolist())
    tgt = KnowledgeGraph.from_symbols(
        (f"t_e{ent_perm[h]:0{width}d}", f"t_r{rel_perm[r]:0{width}d}", f"t_e{ent_perm[t]:0{width}d}")
        for h, r, t in tgt_rows.tolist())

    em = np.empty(ne, np.int64)
    for i in range(ne):
        em[src.entity_index[f"s_e{i:0{width}d}"]] = tgt.entity_index[f"t_e{ent_perm[i]:0{width}d}"]
    rm = np.empty(nr, np.int64)
    for i in range(nr):
        rm[src.relation_index[f"s_r{i:0{width}d}"]] = tgt.relation_index[f"t_r{rel_perm[i]:0{width}d}"]
    return src, tgt, GroundTruthMap(em, rm)


def count_shared(src: KnowledgeGraph, tgt: KnowledgeGraph, truth: GroundTruthMap) -> int:
    """Number of source triplets whose image under ``truth`` is a target triplet."""
    mapped = truth.apply(src.triplets)
    ok = (mapped >= 0).all(axis=1)
    return int(tgt.contains(mapped[ok]).sum())
