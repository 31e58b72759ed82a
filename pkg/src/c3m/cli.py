"""Command-line entry points: gen-data, train, eval, ablate, gradcheck.

Settings come from three layers, later ones winning: built-in defaults,
a ``--config`` file of ``key = value`` lines (dotted keys such as
``gen.identities`` or ``train.beta``, ``#`` comments), and flags. The
seed falls back to the ``C3M_SEED`` environment variable when neither
the file nor a flag sets it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .evaluation import (
    DEFAULT_RANKS,
    DataSpec,
    ProtocolError,
    dump_json,
    evaluate,
    format_table,
    grid_csv,
    grid_report,
    hyperparams_hash,
    result_csv,
    run_ablation,
    suite,
)
from .gradcheck import MODULES, run_gradcheck
from .model import Variant
from .synthgen import ConfigError, Dataset, FormatError, GeneratorConfig, generate_dataset, read_dataset, split_dataset, write_dataset
from .training import HyperParams, NumericError, checkpoint_bytes, init_state, load_checkpoint, train

log = logging.getLogger("c3m")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_PROTOCOL, EXIT_GRID, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6, 7

SECTIONS = {"gen": GeneratorConfig, "train": HyperParams}
EXTRA_KEYS = {
    "model.variant": str,
    "data.fractions": "floats",
    "data.split": str,
}


class IOFailure(RuntimeError):
    """A path is missing, unreadable or unwritable."""


# ---------------------------------------------------------------------------
# configuration


def _field_types(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default
        out[f.name] = "floats" if isinstance(default, tuple) else type(default)
    return out


def known_keys() -> dict[str, Any]:
    keys = dict(EXTRA_KEYS)
    for section, cls in SECTIONS.items():
        for name, kind in _field_types(cls).items():
            keys[f"{section}.{name}"] = kind
    return keys


def _convert(key: str, value: str, kind) -> Any:
    try:
        if kind == "floats":
            return tuple(float(v) for v in value.split(","))
        if kind is bool:
            if value.lower() in ("1", "true", "on", "yes"):
                return True
            if value.lower() in ("0", "false", "off", "no"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}", key) from None


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; unknown keys are rejected."""
    keys = known_keys()
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", key or "?")
        if key not in keys:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}", key)
        out[key] = _convert(key, value, keys[key])
    return out


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _flag_name(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_section_flags(parser: argparse.ArgumentParser, section: str) -> None:
    group = parser.add_argument_group(f"{section}.* settings")
    for name, kind in _field_types(SECTIONS[section]).items():
        if name == "seed":
            continue  # shared --seed flag
        flag = _flag_name(name)
        if section == "train" and name == "p":
            flag = "--p"
        group.add_argument(flag, dest=f"{section}.{name}", default=None, metavar=name.upper(),
                           help=f"{section}.{name}")


def effective(args: argparse.Namespace, sections: Sequence[str]) -> dict[str, Any]:
    """Defaults, then the config file, then flags; returns dotted keys."""
    keys = known_keys()
    merged: dict[str, Any] = {}
    for section in sections:
        defaults = dataclasses.asdict(SECTIONS[section]())
        merged.update({f"{section}.{k}": v for k, v in defaults.items()})
    file_cfg = load_config(getattr(args, "config", None))
    merged.update({k: v for k, v in file_cfg.items() if k.split(".")[0] in sections or k in EXTRA_KEYS})
    for key, value in vars(args).items():
        if "." in key and value is not None:
            merged[key] = _convert(key, value, keys[key])
    seed = args.seed
    if seed is None and not any(f"{s}.seed" in file_cfg for s in sections):
        env = os.environ.get("C3M_SEED")
        if env is not None:
            seed = _convert("C3M_SEED", env, int)
    if seed is not None:
        for section in sections:
            merged[f"{section}.seed"] = int(seed)
    return merged


def build_section(config: dict, section: str):
    prefix = section + "."
    values = {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}
    obj = SECTIONS[section](**values)
    obj.validate()
    return obj


def _ranks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"ranks: cannot parse {text!r}", "ranks") from None
    if not ks or min(ks) < 1:
        raise ConfigError("ranks: need positive integers", "ranks")
    return ks


def _int_list(text: str, key: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}", key) from None


# ---------------------------------------------------------------------------
# paths


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what}: a path is required", what)
    p = Path(path)
    if not p.is_file():
        raise IOFailure(f"{what}: no such file {path}")
    return p


def _need_writable(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise IOFailure(f"{what}: directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise IOFailure(f"{what}: directory {parent} is not writable")
    return p


def _atomic_write(path: Path, data: bytes | str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _select_split(dataset: Dataset, config: dict, split: str) -> Dataset:
    """A dataset file holding every identity is split on the fly."""
    if dataset.meta.split != "all":
        if dataset.meta.split != split:
            log.warning("dataset is tagged %r, using it as %r", dataset.meta.split, split)
        return dataset
    fractions = config.get("data.fractions", (0.8, 0.1, 0.1))
    return split_dataset(dataset, fractions)[split]


def _provenance(config: dict, seed) -> dict:
    return {"version": __version__, "config_hash": config_hash(config), "seed": seed, "config": config}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = effective(args, ["gen"])
    out = _need_writable(args.out, "out")
    if out is None:
        raise ConfigError("out: a path is required", "out")
    cfg = build_section(config, "gen")
    dataset = generate_dataset(cfg)
    if args.split is not None:
        fractions = config.get("data.fractions", (0.8, 0.1, 0.1))
        dataset = split_dataset(dataset, fractions)[args.split]
    write_dataset(out, dataset)
    m = dataset.meta
    print(json.dumps({"N": m.N, "Q": m.Q, "split": m.split, "d_raw": m.d_raw, "records": len(dataset.records),
                      "path": str(out), **{k: v for k, v in _provenance(config, cfg.seed).items() if k != "config"}}))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = effective(args, ["train"])
    if args.variant is not None:
        config["model.variant"] = args.variant
    if args.fractions is not None:
        config["data.fractions"] = _convert("data.fractions", args.fractions, "floats")
    data_path = _need_file(args.data, "data")
    out = _need_writable(args.out, "out")
    if out is None:
        raise ConfigError("out: a path is required", "out")
    log_path = _need_writable(args.log or str(out) + ".log.jsonl", "log")
    resume = _need_file(args.resume, "resume") if args.resume else None

    dataset = _select_split(read_dataset(data_path), config, config.get("data.split", "train"))
    if resume is not None:
        state = load_checkpoint(resume)
        hp, variant = state.hp, state.variant
    else:
        state = None
        hp = build_section(config, "train")
        variant = Variant.parse(config.get("model.variant", Variant().tag))

    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as logf:
        def on_epoch(st, entry):
            record = {**entry.to_dict(), "variant": st.variant.tag, "seed": st.hp.seed}
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            logf.flush()
            _atomic_write(out, checkpoint_bytes(st))

        try:
            if state is None:
                state = init_state(dataset, hp, variant)
            _atomic_write(out, checkpoint_bytes(state))
            state, _ = train(dataset, hp, variant, state=state, until=args.until, on_epoch=on_epoch)
        except NumericError as exc:
            print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
            return EXIT_NUMERIC
    _atomic_write(out, checkpoint_bytes(state))
    print(json.dumps({"checkpoint": str(out), "epoch": state.epoch, "variant": state.variant.tag,
                      "hyperparams_hash": hyperparams_hash(state.hp), "log": str(log_path),
                      "version": __version__, "config_hash": config_hash(config), "seed": state.hp.seed}))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.fractions is not None:
        config["data.fractions"] = _convert("data.fractions", args.fractions, "floats")
    ks = _ranks(args.ranks)
    ckpt = _need_file(args.checkpoint, "checkpoint")
    data_path = _need_file(args.data, "data")
    out_json = _need_writable(args.json, "json")
    out_csv = _need_writable(args.csv, "csv")
    state = load_checkpoint(ckpt)
    split = args.split or "test"
    dataset = _select_split(read_dataset(data_path), config, split)
    config = {**config, "checkpoint": str(ckpt), "data": str(data_path), "split": split, "ranks": list(ks)}
    result = evaluate(state, dataset, ks)
    report = {**result.to_dict(state.hp), **_provenance(config, state.hp.seed)}
    text = dump_json(report)
    if out_json is not None:
        _atomic_write(out_json, text + "\n")
    if out_csv is not None:
        _atomic_write(out_csv, result_csv(report))
    print(text)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = effective(args, ["gen", "train"])
    if args.fractions is not None:
        config["data.fractions"] = _convert("data.fractions", args.fractions, "floats")
    ks = _ranks(args.ranks)
    seeds = _int_list(args.seeds, "seeds") if args.seeds else [config["train.seed"]]
    starts = _int_list(args.start_epochs, "start_epochs")
    out_json = _need_writable(args.json, "json")
    out_csv = _need_writable(args.csv, "csv")
    hp = build_section(config, "train")
    gen = build_section(config, "gen")
    for s in starts if args.suite in ("stage-sweep", "all") else ():
        if not 0 <= s <= hp.epochs:
            raise ConfigError(f"start_epochs: {s} outside [0, {hp.epochs}]", "start_epochs")
    grid = suite(args.suite, seeds, starts)
    fractions = config.get("data.fractions", (0.6, 0.0, 0.4))
    if args.data:
        full = read_dataset(_need_file(args.data, "data"))
        parts = split_dataset(full, fractions)
        data = (parts["train"], parts["test"])
    else:
        data = DataSpec(gen, fractions, "test")

    def progress(cell, seed, res):
        status = "failed" if seed in res.errors else f"r1={res.per_seed[seed].ranks[ks[0]]:.2f}"
        print(f"[{cell.label} seed={seed}] {status}", file=sys.stderr)

    results = run_ablation(grid, data, hp, ks, progress=progress, jobs=args.jobs)
    config = {**config, "suite": args.suite, "seeds": seeds, "start_epochs": starts, "ranks": list(ks)}
    report = {**grid_report(results, hp, ks), **_provenance(config, seeds)}
    if out_json is not None:
        _atomic_write(out_json, dump_json(report) + "\n")
    if out_csv is not None:
        _atomic_write(out_csv, grid_csv(report))
    print(format_table(report))
    if not any(r.per_seed for r in results):
        print("error: every cell failed", file=sys.stderr)
        return EXIT_GRID
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    modules = tuple(m.strip() for m in args.modules.split(",")) if args.modules else MODULES
    unknown = [m for m in modules if m not in MODULES]
    if unknown:
        raise ConfigError(f"modules: unknown {unknown}; choose from {', '.join(MODULES)}", "modules")
    if args.tol <= 0 or args.seeds < 1:
        raise ConfigError("tol and seeds must be positive", "tol" if args.tol <= 0 else "seeds")
    out_json = _need_writable(args.json, "json")
    report = run_gradcheck(modules, seeds=args.seeds, tol=args.tol)
    print(report.format())
    print(f"{'PASS' if report.passed else 'FAIL'} ({len(report.results)} operations, {report.seconds:.1f}s)")
    if out_json is not None:
        body = {
            "version": __version__,
            "tol": args.tol,
            "seeds": args.seeds,
            "passed": report.passed,
            "operations": [
                {"module": r.module, "name": r.name, "max_rel_error": r.max_rel_error, "worst": r.worst,
                 "passed": r.passed}
                for r in report.results
            ],
        }
        _atomic_write(out_json, dump_json(body) + "\n")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c3m", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=None, help="seed (default: config, then $C3M_SEED, then 0)")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    _add_section_flags(p, "gen")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--split", choices=["train", "val", "test"], help="write only this split")
    p.add_argument("--fractions", dest="data.fractions", help="train,val,test identity fractions")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    _add_section_flags(p, "train")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--variant", help=f"variant tag (default {Variant().tag})")
    p.add_argument("--fractions", help="split fractions when the file holds all identities (default 0.8,0.1,0.1)")
    p.add_argument("--out", required=True, help="checkpoint path (rewritten after every epoch)")
    p.add_argument("--log", help="JSON-lines training log (default <out>.log.jsonl)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--until", type=int, help="stop after this many total epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-k retrieval metrics of a checkpoint")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], help="split to evaluate (default test)")
    p.add_argument("--fractions", help="split fractions when the file holds all identities")
    p.add_argument("--ranks", default=",".join(map(str, DEFAULT_RANKS)))
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--csv", help="write the CSV report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    _add_section_flags(p, "gen")
    _add_section_flags(p, "train")
    p.add_argument("--suite", default="paradigm", choices=["paradigm", "usem", "lasm", "ds", "stage-sweep", "all"])
    p.add_argument("--seeds", help="comma-separated seeds (default: the single configured seed)")
    p.add_argument("--start-epochs", default="0,5,15,30", help="stage-two start epochs for stage-sweep")
    p.add_argument("--data", help="fixed dataset file (default: generate per seed)")
    p.add_argument("--fractions", help="train,val,test fractions (default 0.6,0,0.4)")
    p.add_argument("--ranks", default=",".join(map(str, DEFAULT_RANKS)))
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--csv", help="write the CSV report here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--modules", help=f"comma-separated subset of {', '.join(MODULES)}")
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
