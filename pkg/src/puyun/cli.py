"""
``puyun`` command line.

Every subcommand accepts ``--config FILE``: a JSON object whose keys mirror
the long flag names (``--batch-size`` -> ``batch_size``). Flags given on the
command line win over file values, which win over built-in defaults.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .ablation import ABLATION_ROWS, parse_ablation, run_ablation
from .data import SyntheticParams, build_climatology, generate_synthetic, load_dataset, normalize
from .errors import ConfigError, DataError, NumericError, PuYunError, UsageError
from .evaluation import emit_report, evaluate_runs
from .forecast import cascade_rollout, rollout, save_forecast
from .grid import FULL_LEVELS, VariableSet, make_grid
from .model import LKA_MODES, MERGE_MODES, ModelConfig, load_checkpoint, save_checkpoint
from .training import (TrainConfig, finetune_cascade_medium, finetune_dynamic_steps,
                       pretrain_single_step, write_trace)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors here must exit with 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Options:
    """Flag/config/default resolution for one subcommand."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict = {}

    def add(self, flag: str, default=None, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        # None marks "not given" so config-file values can fill in
        self.parser.add_argument(flag, dest=dest, default=None, **kw)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        conf = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(conf, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in conf.items()}


def _resolve(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    conf = _load_config(getattr(args, "config", None))
    unknown = sorted(set(conf) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        val = getattr(args, key, None)
        if val is None:
            val = conf.get(key, default)
        out[key] = val
    out["command"] = args.command
    return argparse.Namespace(**out)


def _require(opts, *names):
    missing = [n for n in names if getattr(opts, n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


def _parse_grid(text: str) -> tuple:
    try:
        h, w = (int(x) for x in str(text).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--grid expects HxW, got {text!r}") from exc
    if h < 2 or w < 2:
        raise UsageError("--grid needs at least 2 rows and 2 columns")
    return h, w


def _parse_blocks(val) -> tuple:
    if isinstance(val, (list, tuple)):
        parts = list(val)
    else:
        parts = str(val).strip("()").split(",")
    try:
        blocks = tuple(int(b) for b in parts)
    except ValueError as exc:
        raise UsageError(f"--blocks expects four integers, got {val!r}") from exc
    if len(blocks) != 4 or min(blocks) < 1:
        raise UsageError(f"--blocks expects four positive integers, got {val!r}")
    return blocks


def variables_for(n_channels: int) -> VariableSet:
    """8 -> desk set, 69 -> full set; otherwise z on C-4 levels plus 4 surface fields."""
    if n_channels == 8:
        return VariableSet.desk()
    if n_channels == 69:
        return VariableSet.full()
    n_levels = n_channels - 4
    if not 1 <= n_levels <= len(FULL_LEVELS):
        raise UsageError(f"--channels must be 8, 69 or in [5, {4 + len(FULL_LEVELS)}]")
    idx = np.linspace(len(FULL_LEVELS) - 1, 0, n_levels).round().astype(int)
    levels = tuple(FULL_LEVELS[i] for i in idx)
    return VariableSet((("z", levels),), ("2t", "10u", "10v", "msl"))


def _dataset(path):
    if path is None:
        raise UsageError("missing required option: --data")
    return load_dataset(path)


def _check_matches(config: ModelConfig, dataset, what: str):
    if config.variables != dataset.variables or config.grid != dataset.grid:
        raise DataError(f"{what} was built for a different grid or channel set than the data")


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(o) -> int:
    _require(o, "out")
    h, w = _parse_grid(o.grid)
    if o.steps < 3:
        raise UsageError("--steps must be >= 3")
    params = SyntheticParams(period=o.period)
    ds = generate_synthetic(make_grid(h, w), variables_for(o.channels), o.steps, o.seed, params)
    ds.save(o.out)
    print(f"wrote {o.out}: {ds.n_steps} states, {ds.variables.n_channels} channels, {h}x{w} grid")
    return EXIT_OK


def _model_config(o, dataset) -> ModelConfig:
    base = ModelConfig(variables=dataset.variables, grid=dataset.grid,
                       embed_dim=o.embed_dim, blocks_per_stage=_parse_blocks(o.blocks),
                       kernel_K=o.kernel, lka_mode=o.lka_mode, patch=o.patch, merge=o.merge,
                       droppath_rate=o.droppath)
    if o.arch:
        spec = parse_ablation(o.arch)
        base = spec.model_config(base)
    return base


def _train_config(o, **kw) -> TrainConfig:
    return TrainConfig(lr=o.lr, weight_decay=o.weight_decay, seed=o.seed, iterations=o.iters,
                       **kw)


def cmd_train(o) -> int:
    _require(o, "data", "out")
    ds = _dataset(o.data)
    cfg = _model_config(o, ds)
    tc = _train_config(o, batch_size=o.batch_size, loss=o.loss,
                       checkpoint_every=o.checkpoint_every, checkpoint_path=o.out)
    params, trace = pretrain_single_step(ds, cfg, tc)
    save_checkpoint(o.out, params, cfg, o.seed, {"stage": "pretrain", "iterations": o.iters})
    if o.trace:
        write_trace(o.trace, trace)
    print(f"wrote {o.out}: final loss {trace[-1].loss:.6g}" if trace else f"wrote {o.out}")
    return EXIT_OK


def cmd_finetune(o) -> int:
    _require(o, "ckpt", "data", "out")
    ds = _dataset(o.data)
    params, cfg, _ = load_checkpoint(o.ckpt)
    _check_matches(cfg, ds, o.ckpt)
    tc = _train_config(o, max_autoreg_steps=o.max_steps, n_workers=o.workers, loss="mse",
                       parallel=bool(o.parallel))
    params, trace = finetune_dynamic_steps(params, ds, tc, cfg)
    save_checkpoint(o.out, params, cfg, o.seed,
                    {"stage": "finetune", "max_steps": o.max_steps, "workers": o.workers,
                     "iterations": o.iters, "parent": formats.file_sha256(o.ckpt)})
    if o.trace:
        write_trace(o.trace, trace)
    print(f"wrote {o.out}: final loss {trace[-1].loss:.6g}" if trace else f"wrote {o.out}")
    return EXIT_OK


def cmd_cascade_finetune(o) -> int:
    _require(o, "short_ckpt", "data", "out")
    ds = _dataset(o.data)
    params, cfg, _ = load_checkpoint(o.short_ckpt)
    _check_matches(cfg, ds, o.short_ckpt)
    if o.handoff < 2:
        raise UsageError("--handoff must be >= 2")
    tc = _train_config(o, max_autoreg_steps=o.max_steps, n_workers=o.workers, loss="mse",
                       parallel=bool(o.parallel))
    medium, trace, hs = finetune_cascade_medium(params, ds, tc, cfg, o.handoff, o.stride)
    save_checkpoint(o.out, medium, cfg, o.seed,
                    {"stage": "cascade-medium", "handoff": o.handoff, "max_steps": o.max_steps,
                     "workers": o.workers, "iterations": o.iters,
                     "handoff_pairs": int(len(hs.starts)),
                     "parent": formats.file_sha256(o.short_ckpt)})
    if o.trace:
        write_trace(o.trace, trace)
    print(f"wrote {o.out}: {len(hs.starts)} handoff pairs")
    return EXIT_OK


def cmd_forecast(o) -> int:
    if o.steps is None or o.steps < 1:
        raise UsageError("--steps must be >= 1")
    _require(o, "ckpt", "data", "init_time", "out")
    if (o.medium_ckpt is None) != (o.handoff is None):
        raise UsageError("--medium-ckpt and --handoff must be given together")
    ds = _dataset(o.data)
    params, cfg, _ = load_checkpoint(o.ckpt)
    _check_matches(cfg, ds, o.ckpt)
    t = int(o.init_time)
    pair = (ds.state(t - 1), ds.state(t))
    meta = {"short_ckpt_sha256": formats.file_sha256(o.ckpt)}
    if o.medium_ckpt:
        if not 2 <= o.handoff < o.steps:
            raise UsageError(f"--handoff must satisfy 2 <= S < --steps ({o.steps})")
        medium, mcfg, _ = load_checkpoint(o.medium_ckpt)
        _check_matches(mcfg, ds, o.medium_ckpt)
        run = cascade_rollout(params, medium, pair, o.steps, o.handoff, cfg, mcfg)
        meta.update(model_name=o.name or "puyun-cascade", handoff=o.handoff,
                    medium_ckpt_sha256=formats.file_sha256(o.medium_ckpt))
    else:
        run = rollout(params, pair, o.steps, cfg)
        meta["model_name"] = o.name or "puyun"
    save_forecast(o.out, run, cfg, ds.stats, meta)
    print(f"wrote {o.out}: {o.steps} steps from t={t}")
    return EXIT_OK


def _read_forecast(path, dataset):
    values, names, lats, side = formats.read_pygr(path)
    if side.get("kind") != "forecast":
        raise DataError(f"{path} is not a forecast file")
    if tuple(names) != dataset.variables.channel_names or values.shape[2:] != dataset.grid.shape:
        raise DataError(f"{path} does not match the truth dataset's channels/grid")
    return side.get("model_name", "forecast"), int(side["init_time"]), normalize(values, dataset.stats)


def cmd_evaluate(o) -> int:
    _require(o, "forecast", "truth", "out")
    files = o.forecast if isinstance(o.forecast, list) else [o.forecast]
    ds = _dataset(o.truth)
    clim = build_climatology(ds, o.climatology)
    groups: dict = {}
    for f in files:
        name, t0, vals = _read_forecast(f, ds)
        groups.setdefault(name, []).append((t0, vals))
    lengths = {v.shape[0] for runs in groups.values() for _, v in runs}
    if len(lengths) != 1:
        raise DataError(f"forecasts have differing lengths {sorted(lengths)}")
    report = None
    for name, runs in groups.items():
        inits = [t for t, _ in runs]
        if report is not None and inits != report.init_times:
            raise DataError(f"model {name!r} covers different init times than the others")
        report = evaluate_runs(name, runs, ds, clim, report)
    if o.units == "physical":
        scale = ds.stats.std.reshape(-1)[:, None].astype(np.float64)
        for sc in report.scores.values():
            sc["rmse"] = sc["rmse"] * scale
    elif o.units != "normalized":
        raise UsageError("--units must be 'physical' or 'normalized'")
    _, table = emit_report(report, o.out, o.summary)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(o) -> int:
    _require(o, "data", "out")
    specs = [s.strip() for s in str(o.specs).split(";") if s.strip()] if o.specs else list(ABLATION_ROWS)
    for s in specs:
        parse_ablation(s)
    ds = _dataset(o.data)
    base = ModelConfig(variables=ds.variables, grid=ds.grid, patch=o.patch)
    tc = TrainConfig(lr=o.lr, iterations=o.iters, batch_size=o.batch_size, seed=o.seed,
                     weight_decay=o.weight_decay)
    columns, rows = run_ablation(specs, ds, tc, base, o.dim_scale, o.block_scale)
    with open(o.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arch"] + columns)
        for label, vals in rows:
            w.writerow([label] + [f"{v:.6g}" for v in vals])
    width = max(len(r[0]) for r in rows) + 2
    print("arch".ljust(width) + "".join(c.rjust(12) for c in columns))
    for label, vals in rows:
        print(label.ljust(width) + "".join(f"{v:12.5g}" for v in vals))
    return EXIT_OK


def cmd_gradcheck(o) -> int:
    from .gradcheck import check_model, check_primitives

    h, w = _parse_grid(o.grid)
    cfg = ModelConfig(embed_dim=o.embed_dim, blocks_per_stage=_parse_blocks(o.blocks),
                      kernel_K=o.kernel, lka_mode=o.lka_mode, patch=o.patch, merge=o.merge,
                      variables=variables_for(o.channels), grid=make_grid(h, w))
    t0 = time.perf_counter()
    failed = 0
    for name, err in check_primitives(seed=o.seed).items():
        ok = err <= o.tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:40s} {err:.3e}")
    err = check_model(cfg, samples=o.samples, seed=o.seed)
    ok = err <= o.tol
    failed += not ok
    print(f"{'PASS' if ok else 'FAIL'} {'model':40s} {err:.3e}")
    print(f"{failed} failure(s), tol {o.tol:g}, {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# ----------------------------------------------------------------------------
# parser


def _model_flags(opt: _Options):
    opt.add("--embed-dim", 64, type=int)
    opt.add("--blocks", "2,2,2,2", help="four comma-separated block counts")
    opt.add("--kernel", 5, type=int, help="LKA receptive field K")
    opt.add("--lka-mode", "decomposed", choices=LKA_MODES)
    opt.add("--patch", 4, type=int)
    opt.add("--merge", "pixelshuffle+resize", choices=MERGE_MODES)


def _optim_flags(opt: _Options, lr: float, iters: int):
    opt.add("--iters", iters, type=int)
    opt.add("--lr", lr, type=float)
    opt.add("--weight-decay", 0.1, type=float)
    opt.add("--seed", 0, type=int)


def build_parser():
    parser = _Parser(prog="puyun", description="PuYun weather model on synthetic data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    table = {}

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        opt = _Options(p)
        opt.add("--config", None, help="JSON file whose keys mirror the flags")
        table[name] = (fn, opt)
        return opt

    o = command("gen-data", cmd_gen_data, "generate a synthetic advection dataset")
    o.add("--grid", "33x64")
    o.add("--channels", 8, type=int)
    o.add("--steps", 800, type=int)
    o.add("--seed", 0, type=int)
    o.add("--period", 40, type=int, help="seasonal period in steps")
    o.add("--out")

    o = command("train", cmd_train, "single-step pre-training")
    o.add("--data")
    _model_flags(o)
    o.add("--arch", help="architecture string, e.g. '64d+(2,2,2,2)@K5+[resize]'")
    o.add("--droppath", 0.0, type=float)
    _optim_flags(o, 1e-3, 2000)
    o.add("--batch-size", 4, type=int)
    o.add("--loss", "mae", choices=("mae", "mse"))
    o.add("--checkpoint-every", 0, type=int)
    o.add("--trace", help="write the loss trace CSV here")
    o.add("--out")

    o = command("finetune", cmd_finetune, "dynamic-step autoregressive fine-tuning")
    o.add("--ckpt")
    o.add("--data")
    o.add("--max-steps", 6, type=int)
    o.add("--workers", 4, type=int)
    o.add("--parallel", False, action="store_true")
    _optim_flags(o, 1e-4, 500)
    o.add("--trace")
    o.add("--out")

    o = command("cascade-finetune", cmd_cascade_finetune, "build the Medium model")
    o.add("--short-ckpt")
    o.add("--data")
    o.add("--handoff", 10, type=int)
    o.add("--max-steps", 6, type=int)
    o.add("--workers", 4, type=int)
    o.add("--stride", 1, type=int, help="spacing of handoff rollout starts")
    o.add("--parallel", False, action="store_true")
    _optim_flags(o, 1e-4, 500)
    o.add("--trace")
    o.add("--out")

    o = command("forecast", cmd_forecast, "autoregressive forecast from one init time")
    o.add("--ckpt")
    o.add("--medium-ckpt")
    o.add("--handoff", type=int)
    o.add("--data")
    o.add("--init-time", type=int)
    o.add("--steps", 20, type=int)
    o.add("--name", help="model label stored in the file")
    o.add("--out")

    o = command("evaluate", cmd_evaluate, "RMSE/ACC against truth and baselines")
    o.add("--forecast", nargs="+")
    o.add("--truth")
    o.add("--climatology", 40, type=int, help="climatology period in steps")
    o.add("--units", "physical", choices=("physical", "normalized"))
    o.add("--summary")
    o.add("--out")

    o = command("ablate", cmd_ablate, "architecture sweep, one-step RMSE table")
    o.add("--specs", help="';'-separated architecture strings (default: the 7-row table)")
    o.add("--data")
    o.add("--dim-scale", 1 / 12, type=float)
    o.add("--block-scale", 1 / 3, type=float)
    o.add("--patch", 4, type=int)
    _optim_flags(o, 1e-3, 200)
    o.add("--batch-size", 4, type=int)
    o.add("--out")

    o = command("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    _model_flags(o)
    o.add("--grid", "33x64")
    o.add("--channels", 8, type=int)
    o.add("--samples", 200, type=int)
    o.add("--tol", 1e-4, type=float)
    o.add("--seed", 0, type=int)
    return parser, table


def main(argv=None) -> int:
    parser, table = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see puyun --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        fn, opt = table[args.command]
        return fn(_resolve(args, opt.defaults))
    except (UsageError, ConfigError) as exc:
        print(f"puyun: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"puyun: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"puyun: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PuYunError as exc:
        print(f"puyun: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
