"""``dynamap`` command line: generate, train, eval and plot, all driven by one JSON run config.

Every command writes ``resolved_<command>.json`` into the output directory;
running the command again with ``--config`` pointing at that file repeats it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .evaluation import write_report
from .experiments import (RunConfig, atc_days, build_dataset, divergence_records, ground_truth_field,
                          prediction_records, run_training, velocity_field_records)
from .fields import ConfigError, export_sequence
from .ingest import IngestError, split_days, to_motion_sequence
from .model import CheckpointError, MapOfDynamics, collate_sequences, load_checkpoint, save_checkpoint
from .training import NumericalError, write_curve

log = logging.getLogger("dynamap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class OutputExists(ConfigError):
    pass


def resolve(args) -> RunConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
        if "seed" in raw.get("train", {}):
            raw["train"]["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    if getattr(args, "mode", None):
        raw["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        raw.setdefault("train", {})["epochs"] = args.epochs
    return RunConfig.from_dict(raw)


def snapshot(cfg: RunConfig, command: str) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"resolved_{command}.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _guard(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExists(f"output already exists: {existing[0]} (use --force to overwrite)")


def _checkpoint_path(cfg: RunConfig, explicit: str | None) -> Path:
    path = Path(explicit) if explicit else cfg.out / "checkpoint.pt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


# -- commands ------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, force: bool) -> int:
    data_dir = cfg.out / "data"
    if cfg.data.source == "files":
        raise ConfigError("data.source 'files' has nothing to generate")
    _guard([data_dir], force)
    data_dir.mkdir(parents=True, exist_ok=True)
    if cfg.data.source == "atc":
        days = atc_days(cfg)
        split = split_days(days)
        for day, table in days.items():
            export_sequence(to_motion_sequence(table, cfg.binning_config()), data_dir / f"{day.isoformat()}.csv")
        (data_dir / "split.json").write_text(json.dumps(
            {k: [d.isoformat() for d in getattr(split, k)] for k in ("train", "validation", "test")}, indent=2))
        print(f"atc: {len(days)} days -> {data_dir} (train {len(split.train)}, validation "
              f"{len(split.validation)}, test {len(split.test)})")
    else:
        ds = build_dataset(cfg)
        for i, seq in enumerate(ds.train):
            export_sequence(seq, data_dir / f"train_{i:03d}.csv")
        for j, seq in enumerate(ds.test):
            export_sequence(seq, data_dir / f"test_{j:03d}.csv")
        first = ds.train[0]
        print(f"{cfg.data.source}: {len(ds.train)} train + {len(ds.test)} test sequences, {len(first)} steps, "
              f"{len(first[0])} samples/step, seed {cfg.seed} -> {data_dir}")
    snapshot(cfg, "generate")
    return EXIT_OK


def cmd_train(cfg: RunConfig, force: bool, resume: bool) -> int:
    ckpt, curve_path = cfg.out / "checkpoint.pt", cfg.out / "curve.csv"
    model, start = None, 0
    if resume:
        model, meta = load_checkpoint(_checkpoint_path(cfg, None), expect=cfg.model_config())
        if meta["mode"] != cfg.mode:
            raise ConfigError(f"checkpoint was trained in mode {meta['mode']!r}, config says {cfg.mode!r}")
        start = int(meta.get("epoch", 0))
    else:
        _guard([ckpt, curve_path], force)
    ds = build_dataset(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    result = run_training(cfg, ds.train, model, start)
    last = result.curve[-1]["epoch"] if result.curve else start
    save_checkpoint(result.model, ckpt, {"epoch": last, "seed": cfg.seed})
    write_curve(result.curve, curve_path, append=resume)
    snapshot(cfg, "train")
    final = result.curve[-1] if result.curve else {}
    print(f"trained {cfg.mode} epochs {start + 1}-{last} in {result.seconds:.1f}s; "
          f"final loss {final.get('total', float('nan')):.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, force: bool) -> int:
    e = cfg.eval
    report = cfg.out / f"report_{e.protocol}.csv"
    summary = cfg.out / f"summary_{e.protocol}.json"
    _guard([report, summary], force)
    model, _ = load_checkpoint(_checkpoint_path(cfg, e.checkpoint))
    ds = build_dataset(cfg)
    if not ds.test:
        raise IngestError("no test sequences to evaluate")
    if e.protocol == "ave_fve":
        records = velocity_field_records(model, ds.test, ds.test_names, e.observe, e.horizons)
    elif e.protocol == "divergence":
        records = divergence_records(model, ds.test, ds.test_names, e.steps, e.k, cfg.seed)
    else:
        if cfg.data.source != "atc":
            raise ConfigError("the prediction protocol needs data.source 'atc'")
        records = prediction_records(model, ds.test_tables, ds.test_names, e.history, e.horizons, e.stride,
                                     cfg.data.one_direction)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_report(records, report, summary)
    snapshot(cfg, "eval")
    for r in records:
        print(f"{r['metric']:>22} {r['split']:>16} {str(r['horizon']):>6} {r['value']:.6g}")
    return EXIT_OK


def cmd_plot(cfg: RunConfig, force: bool) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p = cfg.plot
    model, _ = load_checkpoint(_checkpoint_path(cfg, p.checkpoint))
    ds = build_dataset(cfg)
    if not ds.test:
        raise IngestError("plot needs at least one test sequence")
    seq = ds.test[0]
    plot_dir = cfg.out / "plots"
    targets = [plot_dir / f"step_{int(t):03d}.png" for t in p.steps]
    _guard(targets, force)
    plot_dir.mkdir(parents=True, exist_ok=True)
    xy = grid_positions(model, p.grid, p.extent)
    patterns = patterns_for_steps(model, seq, p.observe, [int(t) for t in p.steps])
    for t, path in zip(p.steps, targets):
        t = int(t)
        fig, ax = plt.subplots(figsize=(6, 6))
        with torch.no_grad():
            mean = model.decode(torch.as_tensor(xy, dtype=model.dtype), patterns[t]).mean.numpy()
        n = quiver(ax, xy, mean, "tab:blue")
        if p.overlay:
            truth = ground_truth_field(cfg, xy, t)
            if truth is not None:
                n += quiver(ax, xy, truth, "tab:red")
            elif t < len(seq):
                n += quiver(ax, seq[t].positions, seq[t].data[:, 2:], "tab:red")
        ax.set_aspect("equal")
        ax.set_title(f"step {t}")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        print(f"{path}: {n} arrows")
    snapshot(cfg, "plot")
    return EXIT_OK


def grid_positions(model: MapOfDynamics, n: int, extent=None) -> np.ndarray:
    if extent is None:
        c, s = model.normalizer.pos_mean.numpy(), model.normalizer.pos_scale.numpy()
        extent = [c[0] - 2 * s[0], c[0] + 2 * s[0], c[1] - 2 * s[1], c[1] + 2 * s[1]]
    xs, ys = np.linspace(extent[0], extent[1], n), np.linspace(extent[2], extent[3], n)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


@torch.no_grad()
def patterns_for_steps(model: MapOfDynamics, seq, observe: int, steps: list[int]) -> dict[int, torch.Tensor]:
    """Posterior patterns for observed steps, prior rollout beyond ``observe``."""
    observe = min(observe, len(seq))
    points, mask = collate_sequences([seq[:observe]], model.dtype)
    states = model.filter(points, mask, "mean")
    ahead = max(steps) - observe + 1
    if ahead > 0:
        states += model.rollout_prior(states[-1], ahead, "mean")
    return {t: states[t].m[0] for t in steps}


def quiver(ax, xy: np.ndarray, polar: np.ndarray, color: str) -> int:
    u = polar[:, 1] * np.cos(polar[:, 0])
    v = polar[:, 1] * np.sin(polar[:, 0])
    q = ax.quiver(xy[:, 0], xy[:, 1], u, v, color=color, angles="xy")
    return int(q.N)


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=1, help="torch threads; 1 keeps runs deterministic")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic or ATC-derived sequence files")
    tr = sub.add_parser("train", parents=[common], help="fit a model and write checkpoint + curve")
    tr.add_argument("--mode", choices=["ssm", "vae"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pt")
    sub.add_parser("eval", parents=[common], help="write metric reports")
    sub.add_parser("plot", parents=[common], help="render quiver plots of the decoded field")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.force, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.force)
        return cmd_plot(cfg, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except json.JSONDecodeError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
