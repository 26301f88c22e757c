"""Command-line entry point: ``crn {train,eval,ablate,sweep,trace,synth}``.

Config files are flat ``key = value`` text (``#`` starts a comment). Keys are
the fields of :class:`ModelConfig` and :class:`TrainConfig` plus ``seed``,
``preset`` (iemocap/semaine/meld optimizer defaults), ``embeddings`` (path to
a word-vector file) and ``switches`` (ablation subset). ``--set key=value``
overrides the file. Every run writes ``manifest.json`` into ``--out`` first;
``--manifest path`` replays a run from such a manifest.

Exit codes: 0 success, 1 unexpected failure, 2 bad configuration or input,
3 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .corpus import Schema, load_corpus, load_embeddings, save_corpus, split_train_val
from .errors import (CheckpointFormatError, ConfigError, CorpusError, DimensionError,
                     GenerationError, NonFiniteLossError)
from .evaluation import (SWITCHES, ablation_table, attention_trace, cell_dict, evaluate,
                         metrics_summary, prediction_records, run_ablation_grid,
                         run_turn_sweep, write_jsonl)
from .model import DialogueCRN, ModelConfig
from .synth import SynthSpec, synth_embeddings, synth_generate
from .training import PRESETS, TrainConfig, history_csv, load_checkpoint, save_checkpoint, train

log = logging.getLogger("dialoguecrn")

MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
SYNTH_KEYS = {f.name: f for f in fields(SynthSpec)}
EXTRA_KEYS = {"seed", "preset", "embeddings", "switches", "val_fraction"}


# config parsing -------------------------------------------------------------

def parse_config_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def _section(raw, keys, **base):
    kwargs = dict(base)
    for key, f in keys.items():
        if key in raw:
            kwargs[key] = _coerce(key, raw[key], f.default)
    return kwargs


def resolve_configs(raw, seed=None):
    """Split a flat key/value dict into (ModelConfig, TrainConfig, seed).

    An explicit ``seed`` (the --seed flag) beats the config file; it seeds
    parameter init, shuffling and the default validation split alike.
    """
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | EXTRA_KEYS
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if seed is None:
        seed = int(raw.get("seed", 0))
    preset = raw.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    train_base = {"seed": seed, **(PRESETS[preset] if preset else {})}
    model_kw = _section(raw, MODEL_KEYS, init_seed=seed)
    train_kw = _section(raw, TRAIN_KEYS, **train_base)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw), seed
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# helpers --------------------------------------------------------------------

def _out_dir(args):
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inside(out, name):
    """Resolve ``name`` under ``out``; refuse paths that escape it."""
    path = (out / name).resolve()
    if out.resolve() not in (path, *path.parents):
        raise ConfigError(f"{name} lies outside the output directory {out}")
    return path


def _schema(model_config):
    kind = "categorical" if model_config.head == "categorical" else "continuous"
    return Schema(kind, model_config.n_outputs)


def _load_split(path, schema, what):
    try:
        convs = load_corpus(path, schema)
    except CorpusError as exc:
        raise ConfigError(f"{what} corpus {path}: {exc}") from None
    if not convs:
        raise ConfigError(f"{what} corpus {path} is empty")
    return convs


def _table(raw, model_config, convs):
    path = raw.get("embeddings")
    needs_tokens = any(u.tokens is not None for c in convs for u in c.utterances)
    if path is None:
        if needs_tokens:
            raise ConfigError("token corpora need an 'embeddings' config key")
        return None
    try:
        return load_embeddings(path, model_config.embedding_dim)
    except CorpusError as exc:
        raise ConfigError(f"embeddings {path}: {exc}") from None


def _model_for_corpus(model_config, convs):
    if not any(u.tokens is not None for c in convs for u in c.utterances):
        return replace(model_config, encoder=False)
    return model_config


def _data(args, raw, model_config, seed):
    schema = _schema(model_config)
    train_set = _load_split(args.train, schema, "training")
    if args.val:
        val_set = _load_split(args.val, schema, "validation")
    else:
        train_set, val_set = split_train_val(train_set, seed, float(raw.get("val_fraction", 0.2)))
    model_config = _model_for_corpus(model_config, train_set + val_set)
    return train_set, val_set, model_config, _table(raw, model_config, train_set + val_set)


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(args, out, raw, model_config=None, train_config=None, seed=None, **extra):
    manifest = {
        "tool": "dialoguecrn", "version": __version__, "command": args.command,
        "config": raw, "seed": seed, "out": str(out),
        "inputs": {k: getattr(args, k, None) for k in ("train", "val", "test", "checkpoint")},
        "args": {k: getattr(args, k, None) for k in ("ts", "tv", "clue", "conv", "level", "export")},
        "model_config": model_config.to_dict() if model_config else None,
        "train_config": train_config.to_dict() if train_config else None,
        **extra,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _raw_config(args):
    raw = {}
    if args.config:
        try:
            raw.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def parse_range(text):
    """``0..3`` -> [0, 1, 2, 3]; ``1,3`` -> [1, 3]; ``2`` -> [2]."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse turn range {text!r}") from None


def _print_report(report):
    for k, v in report.summary().items():
        print(f"{k:>12s}  {v:.4f}")


# subcommands ----------------------------------------------------------------

def cmd_train(args):
    raw = _raw_config(args)
    model_config, train_config, seed = resolve_configs(raw, args.seed)
    if not args.train:
        raise ConfigError("train needs --train")
    out = _out_dir(args)
    train_set, val_set, model_config, table = _data(args, raw, model_config, seed)
    _manifest(args, out, raw, model_config, train_config, seed)
    model = DialogueCRN(model_config, table)
    history_path = out / "history.csv"
    result = train(model, train_set, val_set, train_config, metrics_fn=metrics_summary)
    history_path.write_text(history_csv(result.history), encoding="utf-8")
    snapshot = {"model": model_config.to_dict(), "train": train_config.to_dict(),
                "embeddings": raw.get("embeddings"), "version": __version__}
    save_checkpoint(out / "checkpoint.bin", model.params, snapshot, result.optimizer)
    report, _ = evaluate(model, val_set)
    _write_json(out / "report.json", {"best_epoch": result.best_epoch,
                                      "stopped_epoch": result.stopped_epoch,
                                      "validation": vars(report)})
    print(f"best epoch {result.best_epoch} of {result.stopped_epoch}")
    _print_report(report)
    return 0


def _restore(args, raw):
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointFormatError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    model_config = ModelConfig.from_dict(ckpt.config.get("model", {}))
    if "embeddings" in raw:
        emb_path = raw["embeddings"]
    else:
        emb_path = ckpt.config.get("embeddings")
    return ckpt, model_config, emb_path


def _restored_model(args, raw, corpus_path):
    ckpt, model_config, emb_path = _restore(args, raw)
    schema = _schema(model_config)
    try:
        convs = load_corpus(corpus_path, schema)
    except CorpusError as exc:
        raise ConfigError(f"corpus does not match checkpoint "
                          f"({schema.kind}, {schema.size} outputs): {exc}") from None
    if not convs:
        raise ConfigError(f"corpus {corpus_path} is empty")
    table = None
    if model_config.encoder:
        if emb_path is None:
            raise ConfigError("checkpoint has a text encoder but no embeddings path is known")
        table = load_embeddings(emb_path, model_config.embedding_dim)
    model = DialogueCRN(model_config, table)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, DimensionError) as exc:
        raise ConfigError(f"checkpoint does not fit its own config: {exc}") from None
    return model, convs


def cmd_eval(args):
    raw = _raw_config(args)
    if not args.test:
        raise ConfigError("eval needs --test")
    model, convs = _restored_model(args, raw, args.test)
    out = export = None
    if args.export or args.out:
        out = _out_dir(args)
        export = _inside(out, args.export) if args.export else None
        _manifest(args, out, raw, model.config)
    report, outs = evaluate(model, convs)
    _print_report(report)
    if out is not None:
        _write_json(out / "report.json", vars(report))
    if export is not None:
        write_jsonl(prediction_records(model, convs, outs), export)
    return 0


def _switches(raw):
    if "switches" not in raw:
        return SWITCHES
    chosen = tuple(s.strip() for s in raw["switches"].split(",") if s.strip())
    bad = set(chosen) - set(SWITCHES)
    if bad:
        raise ConfigError(f"unknown switches {sorted(bad)}; choose from {SWITCHES}")
    return chosen


def cmd_ablate(args):
    raw = _raw_config(args)
    model_config, train_config, seed = resolve_configs(raw, args.seed)
    if not args.train:
        raise ConfigError("ablate needs --train")
    out = _out_dir(args)
    switches = _switches(raw)
    train_set, val_set, model_config, table = _data(args, raw, model_config, seed)
    _manifest(args, out, raw, model_config, train_config, seed)
    rows = run_ablation_grid(model_config, train_config, train_set, val_set, table, switches)
    table_text = ablation_table(rows)
    (out / "ablation.csv").write_text(table_text, encoding="utf-8")
    _write_json(out / "ablation.json", [cell_dict(r) for r in rows])
    print(table_text, end="")
    return 0


def cmd_sweep(args):
    raw = _raw_config(args)
    model_config, train_config, seed = resolve_configs(raw, args.seed)
    if not args.train:
        raise ConfigError("sweep needs --train")
    ts, tv = parse_range(args.ts or "0..3"), parse_range(args.tv or "0..3")
    if any(t < 0 for t in ts + tv):
        raise ConfigError("turn counts must be non-negative")
    out = _out_dir(args)
    train_set, val_set, model_config, table = _data(args, raw, model_config, seed)
    _manifest(args, out, raw, model_config, train_config, seed)
    grid = run_turn_sweep(model_config, train_config, train_set, val_set, ts, tv, table)
    key = "accuracy" if model_config.head == "categorical" else "mae_0"
    (out / "sweep.csv").write_text(grid.to_csv(key), encoding="utf-8")
    best = grid.best()
    _write_json(out / "sweep.json", {
        "turns_s": ts, "turns_v": tv, "best": list(best),
        "cells": {f"{a},{b}": cell_dict(c) for (a, b), c in grid.cells.items()},
    })
    print(grid.to_csv(key), end="")
    print(f"best cell T_s={best[0]} T_v={best[1]}")
    return 0


def cmd_trace(args):
    raw = _raw_config(args)
    if not args.test:
        raise ConfigError("trace needs --test (the corpus holding the conversation)")
    if not args.conv:
        raise ConfigError("trace needs --conv")
    out = _out_dir(args)
    model, convs = _restored_model(args, raw, args.test)
    matches = [c for c in convs if c.id == args.conv]
    if not matches:
        raise ConfigError(f"conversation {args.conv!r} not found in {args.test}")
    _manifest(args, out, raw, model.config)
    level = None if args.level == "both" else args.level
    records = attention_trace(model, matches[0], level)
    write_jsonl(records, out / "trace.jsonl")
    print(f"{len(records)} attention records written")
    return 0


def cmd_synth(args):
    raw = _raw_config(args)
    out = _out_dir(args)
    unknown = sorted(set(raw) - set(SYNTH_KEYS) - {"embedding_dim", "val_fraction"})
    if unknown:
        raise ConfigError(f"unknown synth keys: {', '.join(unknown)}")
    kw = _section(raw, SYNTH_KEYS)
    if args.clue:
        kw["clue_kind"] = args.clue
    if args.seed is not None:
        kw["seed"] = args.seed
    spec = SynthSpec(**kw)
    dim = int(raw.get("embedding_dim", 300))
    _manifest(args, out, raw, seed=spec.seed, synth=vars(spec), embedding_dim=dim)
    try:
        convs = synth_generate(spec)
    except GenerationError as exc:
        raise ConfigError(str(exc)) from None
    train_set, val_set = split_train_val(convs, spec.seed, float(raw.get("val_fraction", 0.2)))
    save_corpus(train_set, out / "train.jsonl")
    save_corpus(val_set, out / "val.jsonl")
    synth_embeddings(spec, dim).save(out / "embeddings.txt")
    print(f"{len(train_set)} train / {len(val_set)} val conversations in {out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "trace": cmd_trace, "synth": cmd_synth}


def build_parser():
    parser = argparse.ArgumentParser(prog="crn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}
    for name in COMMANDS:
        p = parser.subcommands[name] = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (nothing is written elsewhere)")
        p.add_argument("--seed", type=int)
        p.add_argument("--manifest", help="replay the run recorded in this manifest")
        if name in ("train", "ablate", "sweep"):
            p.add_argument("--train", help="training corpus (JSONL)")
            p.add_argument("--val", help="validation corpus; default holds out 20%% of --train")
        if name in ("eval", "trace"):
            p.add_argument("--checkpoint")
            p.add_argument("--test", help="corpus to evaluate")
        if name == "eval":
            p.add_argument("--export", help="per-utterance predictions file, relative to --out")
        if name == "sweep":
            p.add_argument("--ts", help="T_s range, e.g. 0..3")
            p.add_argument("--tv", help="T_v range, e.g. 0..3")
        if name == "trace":
            p.add_argument("--conv", help="conversation id")
            p.add_argument("--level", choices=("s", "v", "both"), default="both")
        if name == "synth":
            p.add_argument("--clue", choices=("situation", "speaker"))
    return parser


def _from_manifest(args):
    """Rebuild the argument namespace recorded in a manifest."""
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from None
    if manifest.get("command") != args.command:
        raise ConfigError(f"manifest records command {manifest.get('command')!r}, not {args.command!r}")
    replay = argparse.Namespace(**vars(args))
    replay.config = None
    replay.set = [f"{k}={v}" for k, v in manifest.get("config", {}).items()]
    replay.seed = manifest.get("seed")
    replay.out = args.out or manifest.get("out")
    for section in ("inputs", "args"):
        for k, v in manifest.get(section, {}).items():
            if hasattr(replay, k):
                setattr(replay, k, v)
    return replay


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "ablate", "sweep") and not (args.config or args.manifest):
        sub = parser.subcommands[args.command]
        sub.print_usage(sys.stderr)
        print(f"{sub.prog}: error: --config is required", file=sys.stderr)
        return 2
    try:
        if args.manifest:
            args = _from_manifest(args)
        return COMMANDS[args.command](args)
    except (ConfigError, GenerationError) as exc:
        print(f"crn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"crn {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
