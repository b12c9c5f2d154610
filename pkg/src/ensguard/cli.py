"""Command-line front end.

Every subcommand reads explicit seeds and writes only inside ``--out-dir``.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AddressingError,
    ConfigError,
    ContractError,
    EnsguardError,
    FormatError,
    ParseError,
)
from .guard import GuardedEnsemble, build_guard, load_guard, save_guard
from .inject import MODES, InjectionConfig, inject
from .nn import (
    NetworkSpec,
    TrainConfig,
    gen_synthetic,
    init_model,
    load_csv,
    save_csv,
    train_independent,
)
from .params import ModelParams, load_model, save_model
from .sim import SimTrace, load_sim_config, parse_sim_config, run_sim, scenario_from_config, write_csv
from .strategies import STRATEGY_NAMES, make_strategy

# errors caused by what the user asked for, as opposed to faults while running
USAGE_ERRORS = (ConfigError, ContractError, ParseError, FormatError, AddressingError)

BENCH_SIZES = (2048, 2048, 2048, 10)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input not found: {p}")
    return p


def _out_file(out_dir: Path, name: str) -> Path:
    if Path(name).name != name or name in ("", ".", ".."):
        raise UsageError(f"output name must be a plain file name: {name!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def _write_text(out_dir: Path, name: str, text: str) -> Path:
    p = _out_file(out_dir, name)
    p.write_text(text)
    return p


def _read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(_need_file(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _load_models(base: str, redundants: Sequence[str]) -> tuple[ModelParams, list[ModelParams]]:
    return load_model(_need_file(base)), [load_model(_need_file(p)) for p in redundants]


def _load_set(args):
    """Models plus an optional guard file.

    Returns (guard or None, {"base"|"red<m>": model}, {same keys: source file}).
    """
    base, reds = _load_models(args.base, args.redundant)
    models = {"base": base, **{f"red{i + 1}": r for i, r in enumerate(reds)}}
    files = {"base": Path(args.base), **{f"red{i + 1}": Path(p) for i, p in enumerate(args.redundant)}}
    if args.guard is None:
        return None, models, files
    if not reds:
        raise UsageError("--guard needs at least one --redundant model")
    g = load_guard(_need_file(args.guard), base, reds)
    return g, models, files


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    data = gen_synthetic(args.seed, args.samples, args.dim, args.classes, args.spread)
    if args.split:
        if not 0 < args.split < args.samples:
            raise UsageError(f"--split must be in (0, {args.samples})")
        train, val = data.split(args.split)
        save_csv(train, _out_file(args.out_dir, "train.csv"))
        save_csv(val, _out_file(args.out_dir, "val.csv"))
        print(f"wrote {len(train)} train and {len(val)} validation rows to {args.out_dir}")
    else:
        save_csv(data, _out_file(args.out_dir, "data.csv"))
        print(f"wrote {len(data)} rows to {args.out_dir / 'data.csv'}")
    return 0


def cmd_train(args) -> int:
    data = load_csv(_need_file(args.data))
    spec = NetworkSpec(args.sizes)
    if spec.input_dim != data.input_dim or spec.n_classes < data.n_classes:
        raise UsageError(f"--sizes {args.sizes} does not fit data with {data.input_dim} features "
                         f"and {data.n_classes} classes")
    seeds = args.seeds if args.seeds else (args.seed, args.seed + 1)
    for s in seeds:
        cfg = TrainConfig(seed=s, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch)
        m = train_independent(spec, data, cfg)
        p = _out_file(args.out_dir, f"model_s{s}.napm")
        save_model(m, p)
        print(f"seed {s}: {p}")
    return 0


def cmd_build_guard(args) -> int:
    if not args.redundant:
        raise UsageError("build-guard needs at least one --redundant model")
    base, reds = _load_models(args.base, args.redundant)
    g = build_guard(base, reds, relation=args.relation)
    p = _out_file(args.out_dir, args.name)
    save_guard(g, p)
    print(f"guard over {g.M + 1} models, {g.n_layers} layers: {p}")
    return 0


def _save_set(g: GuardedEnsemble | None, models: dict[str, ModelParams], files: dict[str, Path],
              guard_name: str | None, out_dir: Path) -> list[Path]:
    written = []
    for key, m in models.items():
        p = _out_file(out_dir, files[key].name)
        save_model(m, p)
        written.append(p)
    if g is not None:
        p = _out_file(out_dir, guard_name)
        save_guard(g, p)
        written.append(p)
    return written


def cmd_inject(args) -> int:
    g, models, files = _load_set(args)
    if g is not None:
        stores = g.stores(include_metadata=args.include_metadata)
    else:
        stores = {f"{k}/{n}/{part}": t for k, m in models.items() for n, part, t in m.tensors()}
    cfg = InjectionConfig(args.ber, seed=args.seed, mode=args.mode, targets=args.targets,
                          include_metadata=args.include_metadata)
    ev = inject(stores, cfg, time=0.0)
    guard_name = Path(args.guard).name if args.guard else None
    written = _save_set(g, models, files, guard_name, args.out_dir)
    _write_text(args.out_dir, "inject.jsonl", "".join(line + "\n" for line in ev.log_lines()))
    print(f"flipped {len(ev.locations)} bits; wrote {len(written)} files to {args.out_dir}")
    return 0


def cmd_detect(args) -> int:
    if args.guard is None:
        raise UsageError("detect needs --guard")
    g, _, _ = _load_set(args)
    rep = g.detect_all()
    out = {"sweep": rep.to_dict(), "counters": list(g.counters.snapshot())}
    if args.audit:
        out["audit"] = g.audit().to_dict()
    _write_text(args.out_dir, "detect.json", json.dumps(out, indent=1, sort_keys=True) + "\n")
    faults = len(rep.faults) + (len(out["audit"]["verdicts"]) if args.audit else 0)
    print(f"{faults} faulty layer verdicts; models halted {sorted(rep.models_halted)}")
    return 0


def cmd_recover(args) -> int:
    if args.guard is None:
        raise UsageError("recover needs --guard")
    g, models, files = _load_set(args)
    found = g.detect_all().faults + g.audit().faults
    done, lost = 0, []
    for mid in [0] + list(range(1, g.M + 1)):
        try:
            done += g.recover_model(mid, g.n_layers).layers_recovered
        except EnsguardError as e:
            lost.append({"model": mid, "error": str(e)})
    written = _save_set(g, models, files, Path(args.guard).name, args.out_dir)
    out = {"faults": [v.to_dict() for v in found], "layers_recovered": done, "unrecoverable": lost,
           "healthy": g.fully_healthy()}
    _write_text(args.out_dir, "recover.json", json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(f"recovered {done} layers; wrote {len(written)} files to {args.out_dir}")
    if lost:
        print(f"unrecoverable: {lost}", file=sys.stderr)
        return 1
    return 0


def cmd_simulate(args) -> int:
    overrides = {}
    if args.seed_given:
        overrides["seed"] = args.seed
    if args.config:
        cfg = load_sim_config(_need_file(args.config), **overrides)
    else:
        cfg = parse_sim_config("", **overrides)
    strategies = args.strategies or (cfg.strategy,)
    for s in strategies:
        if s not in STRATEGY_NAMES:
            raise UsageError(f"unknown strategy {s!r}, expected one of {STRATEGY_NAMES}")
    scenario = scenario_from_config(cfg)
    rows = []
    for s in strategies:
        tr = run_sim(replace(cfg, strategy=s), scenario)
        _write_text(args.out_dir, f"trace_{s}.jsonl", tr.jsonl())
        rows.append(tr.summary_row())
        print(f"{s}: deadline_met_pct={tr.deadline_met_pct:.1f} mean_acc_proxy={tr.mean_accuracy_proxy:.4f}")
    _write_text(args.out_dir, "summary.csv", write_csv([SimTrace.SUMMARY_HEADER, *rows]))
    return 0


BENCH_HEADER = ("strategy", "n_params", "n_layers", "trials", "median_ms", "min_ms", "normalized_median",
                "comparison_passes", "checksum_passes", "comparisons_per_layer", "comparison_ratio_to_tmr")


def bench_rows(strategies: Sequence[str], sizes: Sequence[int], trials: int, seed: int,
               clock=time.perf_counter) -> list[list]:
    """Fault-free detection+inference timing per strategy, interleaved across trials."""
    if trials < 3:
        raise UsageError("--trials must be >= 3")
    if "tmr" not in strategies:
        strategies = ("tmr", *strategies)
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(tuple(sizes))
    models = [init_model(spec, rng) for _ in range(2)]
    x = rng.standard_normal(spec.input_dim).astype(np.float32)
    built = {s: make_strategy(s, models) for s in strategies}
    counts = {}
    for s, st in built.items():
        r = st.step(x)  # warm-up, also records the per-step counters
        counts[s] = (r.comparison_passes, r.checksum_passes)
    times = {s: [] for s in strategies}
    for _ in range(trials):
        # round-robin so slow drift of the machine hits every strategy alike
        for s, st in built.items():
            t0 = clock()
            st.step(x)
            times[s].append((clock() - t0) * 1e3)
    ref = float(np.median(times["tmr"]))
    L = len(spec.layer_sizes) - 1
    tmr_comp = counts["tmr"][0]
    rows = []
    for s in strategies:
        med = float(np.median(times[s]))
        comp, chk = counts[s]
        rows.append([s, models[0].n_params, L, trials, f"{med:.4f}", f"{min(times[s]):.4f}", f"{med / ref:.4f}",
                     comp, chk, f"{comp / L:g}", f"{comp / tmr_comp:g}"])
    return rows


def cmd_bench(args) -> int:
    strategies = args.strategies or ("guard", "tmr", "dro", "cbr", "eft", "unprotected")
    for s in strategies:
        if s not in STRATEGY_NAMES:
            raise UsageError(f"unknown strategy {s!r}, expected one of {STRATEGY_NAMES}")
    rows = bench_rows(strategies, args.sizes, args.trials, args.seed)
    p = _write_text(args.out_dir, "bench.csv", write_csv([BENCH_HEADER, *rows]))
    for r in rows:
        print(f"{r[0]:<12} median {r[4]} ms  normalized {r[6]}  comparisons/layer {r[9]}")
    print(f"wrote {p}")
    return 0


MEMORY_HEADER = ("strategy", "base_bytes", "redundancy_bytes", "metadata_bytes", "overhead_percent")


def memory_rows(models: Sequence[ModelParams]) -> list[list]:
    if len(models) < 2:
        models = [models[0], models[0].copy()]
    return [make_strategy(s, models).memory_report().csv_row() for s in STRATEGY_NAMES]


def _read_csv(path: Path) -> list[list[str]]:
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return [r for r in csv.reader(lines) if r]


def _markdown(rows: list[list]) -> str:
    head, body = rows[0], rows[1:]
    out = ["| " + " | ".join(str(c) for c in head) + " |", "|" + "---|" * len(head)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in body]
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    paths = []
    for raw in args.inputs:
        p = Path(raw)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix in (".csv", ".napm"))
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"input not found: {p}")
    if not paths:
        raise UsageError("report needs at least one input file (csv outputs or napm models)")
    tables: dict[str, list[list]] = {}
    sources: dict[str, list[str]] = {}
    models = []
    for p in sorted(set(paths)):
        if p.suffix == ".napm":
            models.append(load_model(p))
            continue
        rows = _read_csv(p)
        if not rows:
            continue
        head = tuple(rows[0])
        key = ",".join(head)
        tables.setdefault(key, [list(head)]).extend(rows[1:])
        sources.setdefault(key, []).append(p.name)
    if not models:
        models = [init_model(NetworkSpec((16, 64, 64, 64, 10)), np.random.default_rng(args.seed))]
    mem = memory_rows(models[:2])
    _write_text(args.out_dir, "memory.csv", write_csv([MEMORY_HEADER, *mem]))
    parts = ["# Report\n", f"## Memory overhead ({models[0].n_params} parameters per model)\n",
             _markdown([list(MEMORY_HEADER), *mem])]
    for key in sorted(tables):
        rows = tables[key]
        parts += [f"\n## {', '.join(sources[key])}\n", _markdown(rows)]
    _write_text(args.out_dir, "report.md", "\n".join(parts))
    print(f"wrote report.md and memory.csv to {args.out_dir}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (default 0)")
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS, help="output directory (default out)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key=value file; for simulate a simulation config, otherwise option defaults")

    p = argparse.ArgumentParser(prog="ensguard", parents=[common],
                                description="Fault-tolerant ensemble inference experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a seeded synthetic classification dataset")
    sp.add_argument("--samples", type=int, default=3000)
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--spread", type=float, default=1.4)
    sp.add_argument("--split", type=int, default=2000, help="rows in train.csv; 0 writes data.csv only")

    sp = add("train", cmd_train, "train one model file per seed")
    sp.add_argument("--data", required=True, help="training csv (label,f0,f1,...)")
    sp.add_argument("--sizes", type=_ints, default=(16, 64, 64, 64, 10), help="layer widths, comma-separated")
    sp.add_argument("--seeds", type=_ints, default=(), help="training seeds (default: seed, seed+1)")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch", type=int, default=32)

    def model_set(sp, with_guard=True):
        sp.add_argument("--base", required=True, help="base model (napm)")
        sp.add_argument("--redundant", action="append", default=[], help="redundant model (napm), repeatable")
        if with_guard:
            sp.add_argument("--guard", default=None, help="guard file (napg)")

    sp = add("build-guard", cmd_build_guard, "build relation tensors and checksums for a model set")
    model_set(sp, with_guard=False)
    sp.add_argument("--relation", choices=("bits", "float"), default="bits")
    sp.add_argument("--name", default="guard.napg")

    sp = add("inject", cmd_inject, "flip seeded bits in model and guard files, writing copies")
    model_set(sp)
    sp.add_argument("--ber", type=float, default=1e-5)
    sp.add_argument("--mode", choices=MODES, default="fixed")
    sp.add_argument("--targets", type=_names, default=("all",), help="store selectors, comma-separated")
    sp.add_argument("--include-metadata", action="store_true", help="allow flips in the checksum table")

    sp = add("detect", cmd_detect, "run the detection sweep and write detect.json")
    model_set(sp)
    sp.add_argument("--audit", action="store_true", help="also checksum every store")

    sp = add("recover", cmd_recover, "detect, restore and write repaired copies")
    model_set(sp)

    sp = add("simulate", cmd_simulate, "run the frame simulator and write traces and summary.csv")
    sp.add_argument("--strategies", type=_names, default=(), help="override the config strategy")

    sp = add("bench", cmd_bench, "time fault-free detection+inference per strategy")
    sp.add_argument("--strategies", type=_names, default=())
    sp.add_argument("--sizes", type=_ints, default=BENCH_SIZES)
    sp.add_argument("--trials", type=int, default=15)

    sp = add("report", cmd_report, "aggregate csv outputs and the memory table into report.md")
    sp.add_argument("inputs", nargs="*", help="csv files, napm models or directories")
    return p


GLOBAL_DEFAULTS = {"seed": 0, "out_dir": Path("out"), "config": None}


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Use a key=value file as option defaults; explicit flags still win."""
    kv = _read_key_values(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in kv.items():
        dest = k.replace("-", "_")
        if dest not in dests or dest in ("help", "func", "config"):
            raise ConfigError(f"{args.config}: unknown key {k!r} for {args.command}")
        a = dests[dest]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                v = v.lower() in ("1", "true", "yes", "on")
            elif isinstance(a, argparse._AppendAction):
                v = list(_names(v))
            elif a.type is not None:
                v = a.type(v)
        except (argparse.ArgumentTypeError, ValueError):
            raise ConfigError(f"{args.config}: bad value for {k}: {v!r}") from None
        defaults[dest] = v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if getattr(args, "config", None) and args.command != "simulate":
            args = _apply_config(parser, args, argv)
        args.seed_given = hasattr(args, "seed")
        for k, v in GLOBAL_DEFAULTS.items():
            if not hasattr(args, k):
                setattr(args, k, v)
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (EnsguardError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
