"""Command-line entry point.

Every flag mirrors a key of a flat ``key = value`` config file. Values are
resolved as defaults, then ``--config`` file, then ``KGA_<KEY>`` environment
variables, then explicit flags. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from typing import Callable, NamedTuple

from . import __version__
from .alignment import Tables
from .checkpoint import (load_checkpoint, load_embeddings, save_checkpoint,
                         save_embeddings, vocab_digest)
from .discriminator import FakeSourceMode
from .embedding import DIM_GRID, EmbedConfig, ModelKind, train_embeddings
from .errors import ConfigError, DataError, KgaError, NumericError, ShapeError, VocabularyError
from .evaluation import collapse_histogram, emit_plot_data, evaluate, write_report
from .experiments import (RESULT_HEADER, Benchmark, ablate_embedding, ablate_fake_mode, ablate_mi,
                          ablate_reward, embed_pair, embed_seed, seed_test_split, DESK_OVERRIDES)
from .kg import (AlignmentSeeds, count_shared, graph_stats, load_seed_pairs, load_triples,
                 load_truth_map, split_pairs, synthesize_aligned_pair, write_pairs, write_triples,
                 write_truth_map)
from .trainer import LOG_HEADER, Baseline, RewardKind, TrainConfig, format_log_row, run_training

log = logging.getLogger("kgalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_PREFIX = "KGA_"
RECORD_PREFIX = "record."


def _bool(text: str) -> bool:
    key = str(text).strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _opt_str(text: str):
    return None if str(text).strip() in ("", "none") else str(text).strip()


class Key(NamedTuple):
    parse: Callable
    default: object
    help: str


_T = TrainConfig()
_E = EmbedConfig()

KEYS: dict[str, Key] = {
    "seed": Key(int, 0, "master random seed"),
    "threads": Key(int, 1, "numeric library threads (1 = fully deterministic)"),
    "preset": Key(str, "full", "hyperparameter preset: full or desk"),
    # data
    "source": Key(_opt_str, None, "source-graph triples file"),
    "target": Key(_opt_str, None, "target-graph triples file"),
    "seeds": Key(_opt_str, None, "seed alignment pairs file"),
    "test": Key(_opt_str, None, "test alignment pairs file"),
    "data": Key(_opt_str, None, "dataset directory written by synth"),
    "source_emb": Key(_opt_str, None, "source embedding checkpoint"),
    "target_emb": Key(_opt_str, None, "target embedding checkpoint"),
    "checkpoint": Key(_opt_str, None, "alignment checkpoint"),
    "out": Key(_opt_str, None, "output directory"),
    "mode": Key(str, "weak", "supervision: unsupervised, weak or supervised"),
    "valid_fraction": Key(float, 0.0, "seed pairs held out for checkpoint selection"),
    # embeddings
    "model": Key(str, "transe", "embedding model: transe, transh or distmult"),
    "dim": Key(int, _E.dim, f"embedding dimension, one of {DIM_GRID}"),
    "margin": Key(float, _E.margin, "margin of the ranking loss"),
    "negatives": Key(int, _E.negatives_per_positive, "negatives per positive triplet"),
    "epochs": Key(int, _E.epochs, "embedding epochs"),
    "embed_batch_size": Key(int, _E.batch_size, "embedding minibatch size"),
    "embed_lr": Key(float, _E.learning_rate, "embedding learning rate"),
    # alignment training
    "reward": Key(str, _T.reward.value, "reward: logx, logit, odds or x"),
    "mi_weight": Key(float, _T.mi_weight, "weight of the MI regularizer"),
    "fake_mode": Key(str, _T.fake_mode.value, "fake triplets: adv, rand or rand+adv"),
    "baseline": Key(str, _T.baseline.value, "REINFORCE baseline: none or batch-mean"),
    "batch_size": Key(int, _T.batch_size, "triplets per step"),
    "mi_batch_size": Key(int, _T.mi_batch_size, "pairs per MI batch"),
    "max_steps": Key(int, _T.max_steps, "adversarial steps"),
    "align_lr": Key(float, _T.align_lr, "alignment learning rate"),
    "disc_lr": Key(float, _T.disc_lr, "discriminator learning rate"),
    "mi_lr": Key(float, _T.mi_lr, "statistic-network learning rate"),
    "pretrain_lr": Key(float, _T.pretrain_lr, "pre-training learning rate"),
    "disc_pretrain_steps": Key(int, _T.disc_pretrain_steps, "discriminator pre-training steps"),
    "mi_pretrain_steps": Key(int, _T.mi_pretrain_steps, "statistic-network pre-training steps"),
    "eval_every": Key(int, _T.eval_every, "steps between evaluations"),
    "patience": Key(int, _T.patience, "evaluations without improvement before stopping (0 = never)"),
    "hidden_dim": Key(int, _T.hidden_dim, "hidden units of the discriminator and statistic nets"),
    "eta": Key(float, _T.eta, "alignment temperature"),
    "init_noise": Key(float, _T.init_noise, "noise of the identity initialization"),
    "clip_norm": Key(_opt_float, _T.clip_norm, "global gradient-norm clip (none = off)"),
    "alternate_mi": Key(_bool, _T.alternate_mi, "separate MI ascent step on the projections"),
    # evaluation
    "top": Key(int, 100, "length of the collapse histogram"),
    # synthesis
    "entities": Key(int, 200, "synthetic entities"),
    "relations": Key(int, 20, "synthetic relations"),
    "triplets": Key(int, 3000, "synthetic triplets per graph"),
    "overlap": Key(float, 0.9, "fraction of target triplets that are images of source triplets"),
    "seed_fraction": Key(float, 0.05, "fraction of ground-truth entity pairs given as seeds"),
}


class UsageError(KgaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith(RECORD_PREFIX):
                continue
            key = key.replace("-", "_")
            if key not in KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            out[key] = value
    return out


def _fmt_value(v) -> str:
    return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)


def write_config_file(path, values: dict, records: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {_fmt_value(values[k])}\n")
        for k, v in (records or {}).items():
            fh.write(f"{RECORD_PREFIX}{k} = {v}\n")


def resolve(args: argparse.Namespace, environ=os.environ) -> dict:
    """Merge defaults, config file, environment and flags into typed values."""
    raw = {k: spec.default for k, spec in KEYS.items()}
    preset = {}
    layers = []
    if args.config:
        layers.append(("config file", read_config_file(args.config)))
    layers.append(("environment", {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items()
                                   if k.startswith(ENV_PREFIX)
                                   and k[len(ENV_PREFIX):].lower() in KEYS}))
    layers.append(("flag", {k: v for k, v in vars(args).items() if k in KEYS and v is not None}))
    explicit = {}
    for where, layer in layers:
        for k, v in layer.items():
            try:
                explicit[k] = KEYS[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"{where} value for {k!r}: {exc}") from None
    name = explicit.get("preset", raw["preset"])
    if name == "desk":
        preset = dict(DESK_OVERRIDES, dim=64)
    elif name != "full":
        raise ConfigError(f"unknown preset {name!r}; expected full or desk")
    raw.update(preset)
    raw.update(explicit)
    return raw


def _require(cfg, *keys):
    for k in keys:
        if cfg[k] is None:
            raise ConfigError(f"missing required setting {k!r} (flag --{k.replace('_', '-')})")


def _require_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _parse_enum(parse, value, key):
    try:
        return parse(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def embed_config(cfg) -> EmbedConfig:
    if cfg["dim"] not in DIM_GRID:
        raise ConfigError(f"dim must be one of {DIM_GRID}, got {cfg['dim']}")
    try:
        return EmbedConfig(dim=cfg["dim"], margin=cfg["margin"],
                           negatives_per_positive=cfg["negatives"], epochs=cfg["epochs"],
                           batch_size=cfg["embed_batch_size"], learning_rate=cfg["embed_lr"],
                           rng_seed=cfg["seed"],
                           kind=_parse_enum(ModelKind.parse, cfg["model"], "model"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: cfg[k] for k in names if k in cfg}
    kw["reward"] = _parse_enum(RewardKind.parse, cfg["reward"], "reward")
    kw["fake_mode"] = _parse_enum(FakeSourceMode.parse, cfg["fake_mode"], "fake_mode")
    kw["baseline"] = _parse_enum(Baseline.parse, cfg["baseline"], "baseline")
    kw["rng_seed"] = cfg["seed"]
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(cfg) -> str:
    _require(cfg, "out")
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _load_graphs(cfg):
    _require(cfg, "source", "target")
    return load_triples(_require_file(cfg["source"])), load_triples(_require_file(cfg["target"]))


def _graph_meta(g) -> dict:
    return {"entities": vocab_digest(g.entities), "relations": vocab_digest(g.relations)}


def _check_vocab(meta: dict, g, path, side: str):
    if not meta:
        return
    if (meta.get("entities"), meta.get("relations")) != tuple(_graph_meta(g).values()):
        raise VocabularyError(f"{path}: checkpoint vocabulary does not match the {side} graph")


def _load_tables(cfg, src, tgt) -> Tables:
    _require(cfg, "source_emb", "target_emb")
    s, s_meta = load_embeddings(_require_file(cfg["source_emb"]))
    t, t_meta = load_embeddings(_require_file(cfg["target_emb"]))
    _check_vocab(s_meta, src, cfg["source_emb"], "source")
    _check_vocab(t_meta, tgt, cfg["target_emb"], "target")
    for table, g, path in ((s, src, cfg["source_emb"]), (t, tgt, cfg["target_emb"])):
        if table.n_entities != g.n_entities or table.n_relations != g.n_relations:
            raise VocabularyError(f"{path}: table size does not match the graph")
        if table.dim != cfg["dim"]:
            raise ConfigError(f"{path}: embedding dimension {table.dim} differs from "
                              f"configured dim {cfg['dim']}")
    return Tables(s, t)


def cmd_embed(cfg) -> int:
    base = embed_config(cfg)
    src, tgt = _load_graphs(cfg)
    out = _out_dir(cfg)
    for side, g in (("source", src), ("target", tgt)):
        stats = graph_stats(g)
        print(f"[{side}]")
        for line in stats.as_lines():
            print(line)
        table = train_embeddings(g, dataclasses.replace(base, rng_seed=embed_seed(cfg["seed"], side)))
        path = os.path.join(out, f"{side}.kga")
        save_embeddings(table, path, _graph_meta(g))
        print(f"wrote {path}")
    write_config_file(os.path.join(out, "embed.cfg"), cfg)
    return EXIT_OK


def _supervision(cfg, src, tgt):
    mode = cfg["mode"].strip().lower()
    if mode not in ("unsupervised", "weak", "supervised"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}; expected unsupervised, weak or supervised")
    if mode == "unsupervised":
        if cfg["seeds"]:
            log.warning("mode is unsupervised: ignoring seed file %s", cfg["seeds"])
        return None
    if not cfg["seeds"]:
        raise ConfigError(f"mode {mode} requires a seed file (--seeds)")
    return load_seed_pairs(_require_file(cfg["seeds"]), src, tgt)


def cmd_train(cfg) -> int:
    src, tgt = _load_graphs(cfg)
    tables = _load_tables(cfg, src, tgt)
    seeds = _supervision(cfg, src, tgt)
    config = train_config(cfg)
    valid = None
    if seeds is not None and cfg["valid_fraction"] > 0:
        try:
            seeds, held = split_pairs(seeds, cfg["valid_fraction"], cfg["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        valid = held.entity_pairs
    out = _out_dir(cfg)
    write_config_file(os.path.join(out, "train.cfg"), cfg)
    ckpt_path = os.path.join(out, "best.kga")
    meta = {"source_" + k: v for k, v in _graph_meta(src).items()}
    meta.update({"target_" + k: v for k, v in _graph_meta(tgt).items()})

    with open(os.path.join(out, "train.log"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#" + "\t".join(LOG_HEADER) + "\n")

        def on_log(row, best):
            fh.write(format_log_row(row) + "\n")
            fh.flush()
            if best is not None:
                save_checkpoint(dataclasses.replace(best, meta=meta), ckpt_path)

        result = run_training(src, tgt, seeds, tables, config, valid_pairs=valid, on_log=on_log)
    save_checkpoint(dataclasses.replace(result.checkpoint, meta=meta), ckpt_path)
    print(f"best step {result.best_step} of {result.stopped_at}; wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    src, tgt = _load_graphs(cfg)
    tables = _load_tables(cfg, src, tgt)
    _require(cfg, "checkpoint", "test")
    try:
        ckpt = load_checkpoint(_require_file(cfg["checkpoint"]), expect_dim=cfg["dim"])
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None
    for side, g in (("source", src), ("target", tgt)):
        stored = {k: ckpt.meta.get(f"{side}_{k}") for k in ("entities", "relations")}
        if all(stored.values()) and stored != _graph_meta(g):
            raise VocabularyError(f"{cfg['checkpoint']}: vocabulary does not match the {side} graph")
    test = load_seed_pairs(_require_file(cfg["test"]), src, tgt).entity_pairs
    if not len(test):
        raise DataError(f"{cfg['test']}: no test pairs")
    if cfg["top"] < 1:
        raise ConfigError("top must be positive")
    report = evaluate(ckpt.align, tables, test)
    hist = collapse_histogram(ckpt.align, tables, test[:, 0], top=cfg["top"])
    out = _out_dir(cfg)
    write_report(report, os.path.join(out, "report.tsv"))
    emit_plot_data(report, os.path.join(out, "hits.tsv"))
    emit_plot_data(hist, os.path.join(out, "collapse.tsv"))
    for line in report.lines():
        print(line)
    return EXIT_OK


SYNTH_FILES = {"source": "source.tsv", "target": "target.tsv", "truth": "truth.tsv",
               "seeds": "seeds.tsv", "test": "test.tsv"}


def cmd_synth(cfg) -> int:
    out = _out_dir(cfg)
    try:
        src, tgt, truth = synthesize_aligned_pair(cfg["entities"], cfg["relations"], cfg["triplets"],
                                                  cfg["overlap"], cfg["seed"])
        seed_pairs, test = seed_test_split(truth.entity_pairs(), cfg["seed_fraction"], cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = {k: os.path.join(out, v) for k, v in SYNTH_FILES.items()}
    write_triples(src, path["source"])
    write_triples(tgt, path["target"])
    write_truth_map(path["truth"], truth, src, tgt)
    write_pairs(path["seeds"], seed_pairs, src, tgt)
    write_pairs(path["test"], test, src, tgt)
    keys = ("seed", "entities", "relations", "triplets", "overlap", "seed_fraction")
    records = {"shared_triplets": count_shared(src, tgt, truth), "seed_pairs": len(seed_pairs),
               "test_pairs": len(test), **{f"file.{k}": v for k, v in SYNTH_FILES.items()}}
    write_config_file(os.path.join(out, "manifest.cfg"), {k: cfg[k] for k in keys}, records)
    print(f"wrote {out}: {records['shared_triplets']} shared triplets, "
          f"{len(seed_pairs)} seed pairs, {len(test)} test pairs")
    return EXIT_OK


def _load_benchmark(cfg, tables_needed=True) -> Benchmark:
    _require(cfg, "data")
    d = cfg["data"]
    path = {k: _require_file(os.path.join(d, v)) for k, v in SYNTH_FILES.items()}
    src, tgt = load_triples(path["source"]), load_triples(path["target"])
    truth = load_truth_map(path["truth"], src, tgt)
    seeds = load_seed_pairs(path["seeds"], src, tgt)
    test = load_seed_pairs(path["test"], src, tgt).entity_pairs
    if cfg["mode"].strip().lower() == "unsupervised":
        seeds, test = AlignmentSeeds.empty(), truth.entity_pairs()
    tables = embed_pair(src, tgt, embed_config(cfg), cfg["seed"]) if tables_needed else None
    return Benchmark(src, tgt, truth, tables, seeds, test)


def _write_results(cfg, name, rows) -> int:
    out = _out_dir(cfg)
    path = os.path.join(out, f"{name}.tsv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RESULT_HEADER + "\n")
        for r in rows:
            fh.write(r.row() + "\n")
    write_config_file(os.path.join(out, f"{name}.cfg"), cfg)
    print(RESULT_HEADER)
    for r in rows:
        print(r.row())
    return EXIT_OK


def cmd_ablate_reward(cfg) -> int:
    return _write_results(cfg, "ablate-reward", ablate_reward(_load_benchmark(cfg), train_config(cfg)))


def cmd_ablate_fake_mode(cfg) -> int:
    return _write_results(cfg, "ablate-fake-mode",
                          ablate_fake_mode(_load_benchmark(cfg), train_config(cfg)))


def cmd_ablate_mi(cfg) -> int:
    return _write_results(cfg, "ablate-mi", ablate_mi(_load_benchmark(cfg), train_config(cfg)))


def cmd_ablate_embedding(cfg) -> int:
    bench = _load_benchmark(cfg, tables_needed=False)
    rows = ablate_embedding(bench, train_config(cfg), embed_config(cfg), cfg["seed"])
    return _write_results(cfg, "ablate-embedding", rows)


COMMANDS = {
    "embed": (cmd_embed, "train an embedding table per graph"),
    "train": (cmd_train, "adversarial alignment training"),
    "eval": (cmd_eval, "Hits@k, mean rank and collapse histogram"),
    "synth": (cmd_synth, "write a synthetic aligned dataset"),
    "ablate-reward": (cmd_ablate_reward, "compare the four rewards with the Procrustes baseline"),
    "ablate-fake-mode": (cmd_ablate_fake_mode, "compare fake-triplet sources"),
    "ablate-mi": (cmd_ablate_mi, "with and without the MI regularizer"),
    "ablate-embedding": (cmd_ablate_embedding, "compare embedding models"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgalign", description="Knowledge-graph alignment experiments.")
    parser.add_argument("--version", action="version", version=f"kgalign {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, spec in KEYS.items():
        common.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            metavar=key.upper(), help=f"{spec.help} (default {spec.default})")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


@contextlib.contextmanager
def _thread_limit(n: int):
    if n < 1:
        raise ConfigError("threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        cfg = resolve(args)
        with _thread_limit(cfg["threads"]):
            return fn(cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
