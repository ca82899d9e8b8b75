"""Command-line runner: ``decentrl <command> [flags]``.

Datasets are directories of tab-separated files. An alignment dataset holds
``kg1.tsv``/``kg2.tsv`` triples, ``kg{1,2}_entities.txt`` and
``kg{1,2}_relations.txt`` vocabularies and ``pairs_{train,valid,test}.tsv``.
An open-world split adds ``kg{1,2}_test.tsv`` with the withheld triples.
A prediction dataset holds ``train.tsv``, ``valid.tsv`` and ``test.tsv`` plus
``entities.txt``/``relations.txt``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distiller as dist
from . import encoder as enc
from . import gradcheck
from . import kg
from . import tasks
from .seeding import rng_for
from .evaluation import per_layer_csv, per_layer_eval, rank_alignment, write_report

log = logging.getLogger("decentrl")

SYNTH_DEFAULTS = dict(entities=200, relations=5, degree=4.0, edge_dropout=0.1,
                      train_fraction=0.3, valid_fraction=0.0, skew=0.0, kind="alignment")
SPLIT_DEFAULTS = dict(fraction=0.2)
EVAL_DEFAULTS = dict(per_layer=False, open=False, filtered=True)
COMMON_DEFAULTS = dict(seed=0, data="", out="", checkpoint="")

COMMAND_KEYS = {
    "synth": {**COMMON_DEFAULTS, **SYNTH_DEFAULTS},
    "split": {**COMMON_DEFAULTS, **SPLIT_DEFAULTS},
    "train-align": {**COMMON_DEFAULTS, **tasks.config_dict(tasks.AlignConfig())},
    "train-predict": {**COMMON_DEFAULTS, **tasks.config_dict(tasks.PredictConfig())},
    "eval": {**COMMON_DEFAULTS, **EVAL_DEFAULTS},
    "gradcheck": {"seed": 0, "out": ""},
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults, then the config file, then flags; unknown keys are errors."""
    defaults = COMMAND_KEYS[command]
    cfg = dict(defaults)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} for command {command!r}")
            cfg[key] = _coerce(key, value, defaults[key])
    return cfg


def write_resolved(out: Path, command: str, cfg: dict):
    lines = [f"# resolved configuration for {command}"]
    lines += [f"{k} = {_show(v)}" for k, v in sorted(cfg.items())]
    (out / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dataclass_from(cls, cfg: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names})


def _need(cfg: dict, key: str) -> Path:
    if not cfg[key]:
        raise ConfigError(f"--{key} is required")
    return Path(cfg[key])


def _out_dir(cfg: dict) -> Path:
    out = _need(cfg, "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_bytes(text.encode("utf-8"))


# ------------------------------------------------------------------ datasets

def _vocab(path: Path):
    if not path.exists():
        return None
    return kg.Vocab(path.read_text(encoding="utf-8").splitlines())


def _load_side(data: Path, name: str, with_test: bool = False) -> kg.KnowledgeGraph:
    ents = _vocab(data / f"{name}_entities.txt")
    rels = _vocab(data / f"{name}_relations.txt")
    frozen = ents is not None and rels is not None
    g = kg.load_triples(data / f"{name}.tsv", ents, rels, frozen)
    test = data / f"{name}_test.tsv"
    if with_test and test.exists():
        extra = kg.load_triples(test, g.entities, g.relations, frozen=True)
        g = g.with_triples(np.concatenate([g.triples, extra.triples]))
    return g


def load_alignment_dataset(data: Path, with_test: bool = False):
    g1 = _load_side(data, "kg1", with_test)
    g2 = _load_side(data, "kg2", with_test)
    chunks, tags = [], []
    for split in ("train", "valid", "test"):
        path = data / f"pairs_{split}.tsv"
        if path.exists() and path.stat().st_size:
            p = kg.load_pairs(path, g1, g2, split)
            chunks.append(p)
            tags += [split] * len(p)
    if not chunks:
        raise ConfigError(f"{data}: no pairs_*.tsv files")
    return g1, g2, kg.AlignmentPairs(np.concatenate(chunks), np.array(tags, dtype=object))


def load_prediction_dataset(data: Path):
    ents = _vocab(data / "entities.txt")
    rels = _vocab(data / "relations.txt")
    frozen = ents is not None and rels is not None
    g = kg.load_triples(data / "train.tsv", ents, rels, frozen)
    out = {}
    for split in ("valid", "test"):
        path = data / f"{split}.tsv"
        if path.exists() and path.stat().st_size:
            out[split] = kg.load_triples(path, g.entities, g.relations, frozen=True).triples
        else:
            out[split] = np.zeros((0, 3), np.int64)
    return g, out["valid"], out["test"]


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    seed = cfg["seed"]
    g = kg.generate_synthetic_kg(cfg["entities"], cfg["relations"], cfg["degree"], seed,
                                 skew=cfg["skew"])
    if cfg["kind"] == "prediction":
        rng = rng_for(seed, "synth-prediction-split")
        perm = rng.permutation(len(g))
        n_test = int(round(0.1 * len(g)))
        parts = {"test": perm[:n_test], "valid": perm[n_test:2 * n_test],
                 "train": perm[2 * n_test:]}
        for name, rows in parts.items():
            kg.write_triples(out / f"{name}.tsv", g, g.triples[np.sort(rows)])
        kg.write_lines(out / "entities.txt", g.entities)
        kg.write_lines(out / "relations.txt", g.relations)
    elif cfg["kind"] == "alignment":
        src, copy, pairs = kg.make_aligned_copy(g, seed, cfg["edge_dropout"])
        pairs = pairs.resplit(cfg["train_fraction"], seed)
        if cfg["valid_fraction"] > 0:
            pairs = _carve_valid(pairs, cfg["valid_fraction"], seed)
        for name, side in (("kg1", src), ("kg2", copy)):
            kg.write_triples(out / f"{name}.tsv", side)
            kg.write_lines(out / f"{name}_entities.txt", side.entities)
            kg.write_lines(out / f"{name}_relations.txt", side.relations)
        for split in ("train", "valid", "test"):
            kg.write_pairs(out / f"pairs_{split}.tsv", src, copy, pairs.split(split))
    else:
        raise ConfigError(f"kind must be 'alignment' or 'prediction', got {cfg['kind']!r}")
    write_resolved(out, "synth", cfg)
    log.info("wrote synthetic %s dataset to %s", cfg["kind"], out)
    return 0


def _carve_valid(pairs: kg.AlignmentPairs, fraction: float, seed: int) -> kg.AlignmentPairs:
    tags = pairs.splits.copy()
    test_rows = np.flatnonzero(tags == "test")
    rng = rng_for(seed, "valid-split")
    n = int(round(fraction * len(pairs)))
    tags[rng.choice(test_rows, size=min(n, len(test_rows)), replace=False)] = "valid"
    return kg.AlignmentPairs(pairs.pairs.copy(), tags)


def split_stats(g: kg.KnowledgeGraph, split: kg.OpenSplit, name: str) -> list:
    rows = []
    for pool, triples in (("train", split.train_triples), ("test", split.test_triples)):
        t = np.asarray(triples).reshape(-1, 3)
        ents = np.unique(t[:, [0, 2]]) if len(t) else np.zeros(0, np.int64)
        rows.append((name, pool, len(ents), len(np.unique(t[:, 1])), len(t)))
    return rows


def cmd_split(cfg: dict) -> int:
    data, out = _need(cfg, "data"), _out_dir(cfg)
    g1, g2, pairs = load_alignment_dataset(data)
    test = pairs.test
    lines = ["kg,pool,entities,relations,triples"]
    summary = ["kg,test_entities,open_entities,moved_triples,original_triples,moved_fraction"]
    for side, (name, g) in enumerate((("kg1", g1), ("kg2", g2))):
        sp = kg.split_open_world(g, test[:, side], cfg["fraction"], cfg["seed"])
        kg.write_triples(out / f"{name}.tsv", g, sp.train_triples)
        kg.write_triples(out / f"{name}_test.tsv", g, sp.test_triples)
        kg.write_lines(out / f"{name}_entities.txt", g.entities)
        kg.write_lines(out / f"{name}_relations.txt", g.relations)
        kg.write_lines(out / f"{name}_open.txt", [g.entities.name(i) for i in sp.open_entities])
        lines += [",".join(map(str, r)) for r in split_stats(g, sp, name)]
        summary.append(f"{name},{len(np.unique(test[:, side]))},{len(sp.open_entities)},"
                       f"{len(sp.test_triples)},{len(g)},{sp.moved_fraction!r}")
    for split in ("train", "valid", "test"):
        kg.write_pairs(out / f"pairs_{split}.tsv", g1, g2, pairs.split(split))
    _write(out / "stats.csv", "\n".join(lines) + "\n")
    _write(out / "open_summary.csv", "\n".join(summary) + "\n")
    write_resolved(out, "split", cfg)
    print("\n".join(lines))
    return 0


def _save_checkpoint(out: Path, params: enc.EncoderParams, cfg: dict, command: str):
    params.extra.update(config={k: _show(v) for k, v in sorted(cfg.items())}, command=command)
    params.save(out / "checkpoint.npz")


def cmd_train_align(cfg: dict) -> int:
    data, out = _need(cfg, "data"), _out_dir(cfg)
    g1, g2, pairs = load_alignment_dataset(data)
    acfg = _dataclass_from(tasks.AlignConfig, cfg)
    write_resolved(out, "train-align", cfg)
    start = time.perf_counter()
    model, history = tasks.train_alignment(g1, g2, pairs, acfg, callback=_progress)
    model.params.extra.update(n1=model.n1, share_relations=acfg.share_relations,
                              add_inverse=acfg.add_inverse)
    _save_checkpoint(out, model.params, cfg, "train-align")
    _write(out / "history.csv", history.to_csv())
    _write(out / "steps.csv", history.steps_csv())
    log.info("trained %d epochs in %.1fs", len(history.epochs), time.perf_counter() - start)
    return 0


def cmd_train_predict(cfg: dict) -> int:
    data, out = _need(cfg, "data"), _out_dir(cfg)
    g, valid, _ = load_prediction_dataset(data)
    pcfg = _dataclass_from(tasks.PredictConfig, cfg)
    write_resolved(out, "train-predict", cfg)
    model, history = tasks.train_prediction(g, pcfg, valid, callback=_progress)
    model.params.extra.update(add_inverse=pcfg.add_inverse)
    _save_checkpoint(out, model.params, cfg, "train-predict")
    _write(out / "history.csv", history.to_csv())
    _write(out / "steps.csv", history.steps_csv())
    return 0


def _progress(epoch: int, row: dict):
    log.info("epoch %d  task %.4f  distill %.4f  val H@1 %.4f", epoch, row["task_loss"],
             row["distill_loss"], row["val_h1"])


def cmd_eval(cfg: dict) -> int:
    data, out = _need(cfg, "data"), _out_dir(cfg)
    ckpt = _need(cfg, "checkpoint")
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params = enc.EncoderParams.load(ckpt)
    task = params.extra.get("task", enc.ALIGNMENT)
    write_resolved(out, "eval", cfg)
    if task == enc.ALIGNMENT:
        report, layers = evaluate_alignment(params, data, cfg["open"])
        write_report(out / "report.csv", report)
        text = report.summary()
        if cfg["per_layer"]:
            reports = per_layer_eval(layers, _test_pairs(params, data))
            _write(out / "per_layer.csv", per_layer_csv(reports))
            text += "\n" + "\n".join(r.summary() for r in reports)
    else:
        if cfg["per_layer"]:
            raise ConfigError("--per-layer applies to alignment checkpoints only")
        report = evaluate_prediction(params, data, cfg["open"], cfg["filtered"])
        write_report(out / "report.csv", report)
        text = report.summary()
    _write(out / "summary.txt", text + "\n")
    print(text)
    return 0


def _test_pairs(params: enc.EncoderParams, data: Path) -> np.ndarray:
    g1, g2, pairs = load_alignment_dataset(data)
    return pairs.offset(g1.num_entities).test


def evaluate_alignment(params: enc.EncoderParams, data: Path, open_world: bool = False):
    """Rebuild the merged graph (with withheld triples when ``open_world``) and rank."""
    g1, g2, pairs = load_alignment_dataset(data, with_test=open_world)
    merged = kg.merge_graphs(g1, g2, share_relations=bool(params.extra.get("share_relations")))
    _check_compatible(params, merged)
    idx = enc.index_for_mode(merged, params.mode, params.extra.get("add_inverse", True))
    layers = enc.forward(params, idx, training=False)
    cat = enc.final_output(layers, enc.ALIGNMENT).value
    test = pairs.offset(g1.num_entities).test
    return rank_alignment(cat, cat, test, tag="alignment"), layers


def evaluate_prediction(params: enc.EncoderParams, data: Path, open_world: bool = False,
                        filtered: bool = True):
    g, valid, test = load_prediction_dataset(data)
    known = np.concatenate([g.triples, valid])
    graph = g.with_triples(np.concatenate([g.triples, test])) if open_world else g
    _check_compatible(params, graph)
    idx = enc.index_for_mode(graph, params.mode, params.extra.get("add_inverse", True))
    model = tasks.PredictionModel(params, None, params.extra.get("decoder", tasks.TRANSE),
                                  params.arrays["decoder.relation"], g, idx)
    report, _ = model.evaluate(test, known, filtered)
    report.tag = "prediction"
    return report


def _check_compatible(params: enc.EncoderParams, g: kg.KnowledgeGraph):
    if params.num_entities != g.num_entities or params.num_relations != g.num_relations:
        raise ConfigError(
            f"checkpoint has {params.num_entities} entities / {params.num_relations} relations, "
            f"dataset has {g.num_entities} / {g.num_relations}")


def cmd_gradcheck(cfg: dict) -> int:
    results = gradcheck.standard_suite(cfg["seed"])
    lines = ["check,max_rel_error,passed"]
    lines += [f"{r.name},{r.max_rel_error:.3e},{'yes' if r.passed else 'no'}" for r in results]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if cfg["out"]:
        out = _out_dir(cfg)
        _write(out / "gradcheck.csv", text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train-align": cmd_train_align,
    "train-predict": cmd_train_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decentrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name != "gradcheck":
            p.add_argument("--data")
        if name.startswith("train"):
            p.add_argument("--mode", choices=enc.MODES)
            p.add_argument("--distill", choices=dist.OBJECTIVES)
            p.add_argument("--layers", type=int)
            p.add_argument("--dim", type=int)
            p.add_argument("--epochs", type=int)
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--open", action="store_true", default=None)
            p.add_argument("--per-layer", action="store_true", default=None)
        if name == "split":
            p.add_argument("--fraction", type=float)
        if name == "synth":
            p.add_argument("--kind", choices=("alignment", "prediction"))
    return parser


def _flag_values(args: argparse.Namespace) -> dict:
    skip = {"command", "config", "set", "verbose"}
    flags = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip().replace("-", "_")] = value.strip()
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        file_values = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, _flag_values(args))
        return COMMANDS[args.command](cfg)
    except (ConfigError, kg.KGParseError, kg.EmptyGraphError, FileNotFoundError,
            tasks.TrainingDivergedError, ad.DimensionError, ValueError) as exc:
        print(f"decentrl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
