"""Command-line entry point and the on-disk formats of runs.

Commands: train, eval, oracle, modes, compare, report. Exit status is 0 on
success, 1 on a runtime failure and 2 on a configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .env import EnvError, TooLargeToEnumerate
from .metrics import TargetOracle, default_mode_specs, find_modes
from .trainer import (
    CSV_COLUMNS,
    CSV_SCHEMA_VERSION,
    ConfigError,
    RunConfig,
    TrainingAborted,
    build_env,
    evaluate,
    load_policy,
    run,
)

log = logging.getLogger("lsgfn")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_VARIANTS = ("TB:iterations=0,chains=32", "TB+LS:iterations=7,chains=4")
QUANTILES = (0.5, 0.9, 0.99, 0.995, 0.999, 1.0)


class InputError(ValueError):
    """Bad command-line input (as opposed to a bad config value)."""


# ------------------------------------------------------------------ config files

_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def parse_overrides(pairs, where: str = "") -> dict:
    """key=value strings to typed RunConfig overrides; unknown keys are errors."""
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"{where}expected key=value, got {item!r}")
        key, raw = (t.strip() for t in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment. Relative table paths resolve next to the file."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kv = parse_overrides([line], where=f"{path}:{n}: ")
        dup = set(kv) & set(out)
        if dup:
            raise ConfigError(f"{path}:{n}: duplicate key {dup.pop()!r}")
        out.update(kv)
    table = out.get("reward_table")
    if table and not Path(table).is_absolute():
        out["reward_table"] = str(path.parent / table)
    return out


def load_config(path=None, seed=None, overrides=()) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(parse_overrides(overrides))
    if seed is not None:
        values["seed"] = seed
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def write_config_file(cfg: RunConfig, path) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ run outputs

def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest(cfg: RunConfig, env) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "env": env.fingerprint(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def train_to_dir(cfg: RunConfig, out_dir, quiet: bool = False) -> dict:
    """One training run writing manifest, rounds.csv, eval_samples.csv, checkpoints and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = build_env(cfg)
    man = manifest(cfg, env)
    write_json(out / "manifest.json", man)
    write_config_file(cfg, out / "config.cfg")
    with open(out / "rounds.csv", "w", newline="") as rf, open(out / "eval_samples.csv", "w", newline="") as ef:
        rounds_w = csv.writer(rf)
        rounds_w.writerow(CSV_COLUMNS)
        evals_w = csv.writer(ef)
        evals_w.writerow(("round", "terminal", "reward"))

        def on_round(entry):
            rounds_w.writerow(entry.row())
            for x, lr in entry.samples:
                evals_w.writerow((entry.round, x, repr(math.exp(lr))))
            if entry.metrics and not quiet:
                acc = entry.metrics.get("accuracy")
                print(f"round {entry.round}\tloss {entry.loss:.4g}\taccuracy {acc:.3f}" if acc is not None
                      else f"round {entry.round}\tloss {entry.loss:.4g}", file=sys.stderr)

        result = run(cfg, out, on_round)
    if cfg.dump_dataset:
        result.dataset.dump(out / "dataset.csv")
    man["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    write_json(out / "manifest.json", man)
    write_json(out / "summary.json", result.summary)
    return result.summary


def _print_rows(rows, header=None, file=None) -> None:
    w = csv.writer(file or sys.stdout, delimiter="\t", lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return str(v)


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.set)
    summary = train_to_dir(cfg, args.out, args.quiet)
    _print_rows([(k, _fmt(v)) for k, v in sorted(summary["final_metrics"].items())], ("metric", "value"))
    return EXIT_OK


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint_final.npz"
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    return p


def cmd_eval(args) -> int:
    policy, cfg, env = load_policy(_resolve_checkpoint(args.checkpoint))
    target_mean = TargetOracle.from_env(env).target_mean if env.enumerable else None
    specs = default_mode_specs(env, cfg.mode_quantile, cfg.mode_separation, cfg.mode_radius,
                               cfg.mode_threshold if cfg.mode_threshold >= 0 else None) if env.enumerable else ()
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
    xs, metrics = evaluate(policy, env, args.n, rng, target_mean, specs)
    if args.samples:
        with open(args.samples, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("terminal", "reward"))
            w.writerows((x, repr(env.reward(x))) for x in xs)
    _print_rows([(k, _fmt(v)) for k, v in sorted(metrics.items())], ("metric", "value"))
    return EXIT_OK


def _oracle_env(args):
    cfg = load_config(args.config, None, args.set)
    env = build_env(cfg)
    if not env.enumerable:
        raise TooLargeToEnumerate(
            f"environment too large to enumerate: {env.n_terminals} terminals exceeds cap {env.enumeration_cap}"
        )
    return cfg, env


def cmd_oracle(args) -> int:
    cfg, env = _oracle_env(args)
    o = TargetOracle.from_env(env)
    rows = [
        ("n_terminals", len(o.terminals)),
        ("log_Z", _fmt(o.log_z)),
        ("Z", _fmt(o.Z)),
        ("target_mean", _fmt(o.target_mean)),
    ]
    rows += [(f"reward_q{q:g}", _fmt(o.quantile(q))) for q in QUANTILES]
    _print_rows(rows, ("quantity", "value"))
    print()
    _print_mode_inventory(cfg, env, list(o.terminals))
    return EXIT_OK


def _print_mode_inventory(cfg, env, samples) -> None:
    thr = cfg.mode_threshold if cfg.mode_threshold >= 0 else None
    specs = default_mode_specs(env, cfg.mode_quantile, cfg.mode_separation, cfg.mode_radius, thr)
    land = getattr(env.reward_spec, "landscape", None)
    planted = set(land.modes) if land is not None else set()
    rows = []
    for spec in specs:
        for x in find_modes(samples, spec, env):
            rows.append((spec.kind, x, _fmt(env.reward(x)), ("yes" if x in planted else "no") if land is not None else "-"))
    rows.sort(key=lambda r: (r[0], -float(r[2]), r[1]))
    _print_rows(rows, ("definition", "sequence", "reward", "planted"))


def cmd_modes(args) -> int:
    cfg, env = _oracle_env(args)
    if args.samples:
        path = Path(args.samples)
        if not path.is_file():
            raise InputError(f"samples file not found: {path}")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "terminal" not in rows[0]:
            raise InputError(f"{path}: expected a 'terminal' column")
        samples = [r["terminal"] for r in rows]
        for x in samples:
            env.alphabet.validate(x)
            if len(x) != env.length:
                raise InputError(f"{path}: {x!r} is not a complete length-{env.length} sequence")
    else:
        samples = [x for x, _ in env.enumerate_terminals()]
    _print_mode_inventory(cfg, env, samples)
    return EXIT_OK


def parse_variant(text: str) -> tuple[str, dict]:
    """'NAME:key=value,key=value' (the override list may be empty)."""
    name, _, rest = text.partition(":")
    name = name.strip()
    if not name or "/" in name:
        raise ConfigError(f"bad variant name in {text!r}")
    pairs = [p for p in rest.split(",") if p.strip()]
    return name, parse_overrides(pairs, where=f"variant {name}: ")


def _mean_std(vals) -> tuple[float, float]:
    a = np.asarray(vals, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


COMPARE_METRICS = ("accuracy", "n_modes_threshold", "n_modes_localopt", "top100_mean", "unique_fraction")


def cmd_compare(args) -> int:
    base = load_config(args.config, None, args.set)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    variants = [parse_variant(v) for v in (args.variant or DEFAULT_VARIANTS)]
    names = [n for n, _ in variants]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    cfgs = {name: base.replace(**kw) for name, kw in variants}  # validates every variant up front
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, runs = [], {}
    for name, cfg in cfgs.items():
        finals, runs[name] = [], []
        for seed in seeds:
            run_dir = out / name / f"seed_{seed}"
            if not args.quiet:
                print(f"[{name}] seed {seed}", file=sys.stderr)
            finals.append(train_to_dir(cfg.replace(seed=seed), run_dir, quiet=True)["final_metrics"])
            runs[name].append(str(run_dir / "rounds.csv"))
        row = {
            "variant": name,
            "objective": cfg.objective,
            "filter": cfg.filter if cfg.iterations > 0 else "none",
            "I": cfg.iterations,
            "M": cfg.chains,
            "budget": cfg.budget,
        }
        for key in COMPARE_METRICS:
            m, s = _mean_std([f.get(key, float("nan")) for f in finals])
            row[f"{key}_mean"], row[f"{key}_std"] = m, s
        table.append(row)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    write_json(out / "comparison.json", {"seeds": seeds, "rows": table, "runs": runs})
    header = ["variant", "objective", "filter", "I", "M", "budget"] + list(COMPARE_METRICS)
    rows = []
    for r in table:
        rows.append([r[k] for k in header[:6]] +
                    [f"{_fmt(r[k + '_mean'])} ± {_fmt(r[k + '_std'])}" for k in COMPARE_METRICS])
    _print_rows(rows, header)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plots

    target = Path(args.dir)
    if (target / "comparison.json").is_file():
        info = json.loads((target / "comparison.json").read_text())
        paths = plots.plot_comparison({k: [Path(p) for p in v] for k, v in info["runs"].items()}, target)
        for name, csvs in info["runs"].items():
            for p in csvs:
                paths += plots.plot_run(p, Path(p).parent, title=f"{name} ({Path(p).parent.name})")
    elif (target / "rounds.csv").is_file():
        paths = plots.plot_run(target / "rounds.csv", target)
    else:
        raise InputError(f"no rounds.csv or comparison.json in {target}")
    _print_rows([(str(p),) for p in paths], ("figure",))
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsgfn", description="Local-search GFlowNets on string design tasks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p, out_required=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one configuration")
    config_args(p, out_required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="draw on-policy samples from a checkpoint and score them")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", help="write the samples to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exact partition function, target mean and mode inventory")
    config_args(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("modes", help="mode inventory of a sample file (or of every terminal)")
    config_args(p)
    p.add_argument("--samples", help="CSV with a 'terminal' column, e.g. eval_samples.csv")
    p.set_defaults(func=cmd_modes)

    p = sub.add_parser("compare", help="train several variants over several seeds")
    config_args(p, out_required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--variant", action="append", metavar="NAME:KEY=VALUE,...",
                   help="variant overrides (repeatable); default compares TB with TB+LS")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="render PNG figures from a run or compare directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, EnvError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
