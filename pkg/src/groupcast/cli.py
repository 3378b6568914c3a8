"""Operator surface: simulate | train | eval | check-equivariance.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 property
failure. Each output directory is guarded by a lock file; emitted reports
carry the tool version and a hash of the driving config.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, parse_config
from .data import (build_charged_dataset, generate_hier_synth, load_dataset,
                   save_dataset, Standardization)
from .errors import (ConfigError, DatasetError, GroupcastError, LockError,
                     NumericError, PropertyError)
from .harness import run_equivariance_suite, write_verdicts_ndjson
from .metrics import evaluate_scenes, remove_series_protocol
from .model import Forecaster, ModelConfig, load_checkpoint
from .seeding import make_rng
from .training import TrainSettings, run_training


@contextlib.contextmanager
def output_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"output directory {out_dir} is locked by another command "
            f"(remove {lock_path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock_path)


def _provenance(run_cfg: RunConfig | None, extra=None):
    out = {"tool_version": __version__}
    if run_cfg is not None:
        out["config_hash"] = run_cfg.config_hash
    if extra:
        out.update(extra)
    return out


def _apply_overrides(run_cfg: RunConfig, args):
    tr = run_cfg.training.to_dict()
    if getattr(args, "seed", None) is not None:
        tr["seed"] = args.seed
        run_cfg.dataset_seed = args.seed
    if getattr(args, "loss", None):
        tr["loss"] = args.loss
    run_cfg.training = TrainSettings(**tr)
    if getattr(args, "variant", None):
        run_cfg.model["variant"] = args.variant
    if getattr(args, "precision", None):
        run_cfg.precision = args.precision
    return run_cfg


def cmd_simulate(args):
    run_cfg = _apply_overrides(parse_config(args.config), args)
    with output_lock(args.out):
        if run_cfg.dataset_kind == "charged":
            counts = run_cfg.counts or {"train": 100, "val": 20, "test": 20}
            records = build_charged_dataset(run_cfg.charged, counts, run_cfg.dataset_seed)
        else:
            records, _ = generate_hier_synth(run_cfg.hier, run_cfg.dataset_seed)
        echo = run_cfg.echo()
        echo.update(_provenance(run_cfg))
        save_dataset(records, args.out, config_echo=echo,
                     master_seed=run_cfg.dataset_seed, tool_version=__version__)
    counts = {}
    for rec in records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    summary = {"scenes": counts,
               "series": records[0].x.shape[0],
               "t_in": records[0].x.shape[1],
               "t_out": records[0].y.shape[1]}
    print(json.dumps({"dataset": args.out, **summary}))
    return 0


def _model_config(run_cfg: RunConfig, records) -> ModelConfig:
    first = records[0]
    fields = {
        "t_in": first.x.shape[1], "t_out": first.y.shape[1],
        "d_in": first.x.shape[2], "d_out": first.y.shape[2],
        "dtype": run_cfg.precision,
    }
    fields.update(run_cfg.model)
    return ModelConfig(**fields)


def cmd_train(args):
    run_cfg = _apply_overrides(parse_config(args.config), args)
    records, manifest = load_dataset(args.data)
    model_cfg = _model_config(run_cfg, records)
    with output_lock(args.out):
        # identify inputs by content hash, not path, so equal configs and
        # seeds yield byte-identical artifacts wherever they run
        echo = _provenance(run_cfg, {
            "command": "train",
            "model_config": model_cfg.to_dict(),
            "training": run_cfg.training.to_dict(),
            "dataset_config_hash": manifest.get("config_hash"),
        })
        log_path = os.path.join(args.out, "train_log.ndjson")
        model, stats, history = run_training(
            records, model_cfg, run_cfg.training, out_dir=args.out,
            log_path=log_path, config_echo=echo, quiet=args.quiet)
        from .figures import loss_curve

        loss_curve(history, os.path.join(args.out, "loss_curve.png"))
    best = min((h["val_loss"] for h in history), default=float("nan"))
    print(json.dumps({"checkpoint": os.path.join(args.out, "checkpoint"),
                      "epochs": len(history), "best_val_loss": best}))
    return 0


def _load_model(checkpoint_dir):
    model, manifest = load_checkpoint(checkpoint_dir)
    stats = None
    if manifest.get("standardization"):
        stats = Standardization.from_dict(manifest["standardization"])
    return model, stats, manifest


def cmd_eval(args):
    model, stats, manifest = _load_model(args.checkpoint)
    records, _ = load_dataset(args.data)
    with output_lock(args.out):
        echo = {"tool_version": __version__, "command": "eval",
                "split": args.split,
                "config_hash": manifest.get("config_echo", {}).get("config_hash")}
        report = evaluate_scenes(model, records, stats=stats, split=args.split,
                                 per_level=args.per_level, config_echo=echo)
        if args.remove_grid:
            try:
                maxima = [int(v) for v in args.remove_grid.split(",")]
            except ValueError:
                raise ConfigError(f"--remove-grid expects comma-separated ints, got {args.remove_grid!r}")
            labels = sorted(set(records[0].labels), key=repr)
            if len(maxima) != len(labels):
                raise ConfigError(
                    f"--remove-grid names {len(maxima)} classes but the data has {len(labels)}")
            grid = remove_series_protocol(
                model, records, list(zip(labels, maxima)), seed=args.seed,
                stats=stats, split=args.split)
            report.remove_grid = grid.remove_grid
            report.counts["cells"] = len(grid.remove_grid)
        report.to_ndjson(os.path.join(args.out, "metrics.ndjson"))
        report.to_tsv(os.path.join(args.out, "metrics.tsv"))
        _render_eval_figures(args, model, stats, records, report)
        if args.dump_forecasts:
            _dump_forecasts(args, model, stats, records)
    print(json.dumps({"metrics": report.aggregates, "out": args.out}))
    return 0


def _render_eval_figures(args, model, stats, records, report):
    from . import figures

    subset = [r for r in records if r.split == args.split]
    if subset and subset[0].y.shape[-1] == 2 and subset[0].hierarchy is None:
        picks = subset[:4]
        fcs = []
        for rec in picks:
            x = stats.apply_x(rec.x) if stats is not None else rec.x
            fc = model.predict(x, rec.labels)
            fcs.append(stats.invert_forecast(fc) if stats is not None else fc)
        figures.trajectory_panel(picks, fcs, os.path.join(args.out, "trajectories.png"))
    if report.per_level:
        figures.per_level_bars(report.per_level, os.path.join(args.out, "per_level.png"))
    if report.remove_grid:
        figures.remove_grid_heatmap(report.remove_grid,
                                    os.path.join(args.out, "remove_grid.png"))


def _dump_forecasts(args, model, stats, records):
    from .distribution import dump_forecast_ndjson

    subset = [r for r in records if r.split == args.split][: args.dump_forecasts]
    path = os.path.join(args.out, "forecasts.ndjson")
    for i, rec in enumerate(subset):
        x = stats.apply_x(rec.x) if stats is not None else rec.x
        fc = model.predict(x, rec.labels, tree=rec.hierarchy)
        if stats is not None:
            fc = stats.invert_forecast(fc)
        ids = list(range(fc.mean.shape[0]))
        dump_forecast_ndjson(fc, ids, path, append=i > 0)


def cmd_check_equivariance(args):
    model, _, manifest = _load_model(args.checkpoint)
    if args.inject_fault:
        model.fault_bias = 1e-3
    cfg = model.cfg
    rng = make_rng(args.seed, 77)
    n_series = args.series
    if cfg.variant == "full":
        labels = tuple(int(v) for v in rng.integers(0, max(2, args.classes), size=n_series))
        hierarchical_only = True
    else:
        labels = (0,) * n_series
        hierarchical_only = False
    x = rng.standard_normal((n_series, cfg.t_in, cfg.d_in))
    tol = args.tol if args.tol is not None else (1e-9 if cfg.dtype == "f64" else 1e-4)
    verdicts = run_equivariance_suite(
        model, x, labels, n_permutations=args.permutations, seed=args.seed,
        tol=tol, hierarchical_only=hierarchical_only, check_heads=args.check_heads)
    with output_lock(args.out):
        write_verdicts_ndjson(
            verdicts, os.path.join(args.out, "equivariance.ndjson"),
            header={"tool_version": __version__, "variant": cfg.variant,
                    "tolerance": tol, "series": n_series,
                    "hierarchical_only": hierarchical_only,
                    "fault_injected": bool(args.inject_fault)})
    n_fail = sum(1 for v in verdicts if not v.passed)
    worst = max(v.deviation for v in verdicts)
    print(json.dumps({"permutations": len(verdicts), "failures": n_fail,
                      "max_deviation": worst, "tolerance": tol}))
    if n_fail:
        raise PropertyError(f"{n_fail} of {len(verdicts)} permutations exceeded {tol}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="groupcast",
        description="Simulate, train, evaluate and property-check grouped series forecasters.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a dataset")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int)

    tr = sub.add_parser("train", help="train a model on a simulated dataset")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--precision", choices=["f32", "f64"])
    tr.add_argument("--variant", choices=["full", "wo-class", "attT"])
    tr.add_argument("--loss", choices=["nll", "mae"])
    tr.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--per-level", action="store_true")
    ev.add_argument("--remove-grid", help="comma-separated max removals per class (sorted labels)")
    ev.add_argument("--dump-forecasts", type=int, default=0)
    ev.add_argument("--seed", type=int, default=0)

    ce = sub.add_parser("check-equivariance", help="verify permutation properties")
    ce.add_argument("--checkpoint", required=True)
    ce.add_argument("--out", required=True)
    ce.add_argument("--permutations", type=int, default=100)
    ce.add_argument("--series", type=int, default=6)
    ce.add_argument("--classes", type=int, default=3)
    ce.add_argument("--seed", type=int, default=0)
    ce.add_argument("--tol", type=float)
    ce.add_argument("--check-heads", action="store_true")
    ce.add_argument("--inject-fault", action="store_true",
                    help="test-only: add a series-index bias to break equivariance")
    return parser


_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-equivariance": cmd_check_equivariance,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, DatasetError, LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except PropertyError as exc:
        print(f"property failure: {exc}", file=sys.stderr)
        return 4
    except GroupcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
