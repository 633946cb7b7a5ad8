"""Run configuration, dataset assembly and the experiment protocols shared by the CLI and tests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core import MotionSequence, Velocity, wrap_angle
from .evaluation import (ade_fde, ave_fve, filter_last, map_quality, one_direction_filter,
                         predict_trajectories)
from .fields import (ConfigError, VortexConfig, generate_constant_field_sequence, generate_vortex_sequence,
                     import_sequence, vortex_velocity_at)
from .ingest import (COLUMNS, BinningConfig, TrackTable, parse_rows, prediction_windows, split_by_day, split_days,
                     to_motion_sequence)
from .model import MapOfDynamics, ModelConfig
from .training import TrainConfig, TrainResult, train

SCHEMA_VERSION = 1
SOURCES = ("vortex", "constant", "files", "atc")
PROTOCOLS = ("ave_fve", "divergence", "prediction")


@dataclass
class DataSection:
    source: str = "vortex"
    n_train: int = 16
    n_test: int = 1
    # held-out synthetic sequences need observe + the longest horizon steps
    test_steps: int = 25
    vortex: dict = field(default_factory=dict)
    constant: dict = field(default_factory=lambda: {"psi": 0.0, "rho": 1.0, "n_steps": 20, "n_per_step": 20})
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    atc_files: list = field(default_factory=list)
    binning: dict = field(default_factory=dict)
    one_direction: bool = False


@dataclass
class EvalSection:
    protocol: str = "ave_fve"
    observe: int = 5
    horizons: list = field(default_factory=lambda: [5, 20])
    checkpoint: str | None = None
    steps: list | None = None
    k: int = 1
    history: int = 50
    stride: int = 10


@dataclass
class PlotSection:
    checkpoint: str | None = None
    grid: int = 20
    steps: list = field(default_factory=lambda: [0])
    extent: list | None = None
    overlay: bool = False
    observe: int = 5


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    mode: str = "ssm"
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)
    plot: PlotSection = field(default_factory=PlotSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
        top = _check_keys(raw, cls, "")
        sections = {"data": DataSection, "eval": EvalSection, "plot": PlotSection}
        for name, typ in sections.items():
            if name in top:
                top[name] = typ(**_check_keys(top[name], typ, name + "."))
        cfg = cls(**top)
        _check_keys(cfg.model, ModelConfig, "model.")
        _check_keys(cfg.train, TrainConfig, "train.")
        _check_keys(cfg.data.vortex, VortexConfig, "data.vortex.")
        _check_keys(cfg.data.binning, BinningConfig, "data.binning.")
        unknown = set(cfg.data.constant) - {"psi", "rho", "n_steps", "n_per_step", "domain"}
        if unknown:
            raise ConfigError(f"unknown config key data.constant.{sorted(unknown)[0]}")
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def validate(self) -> "RunConfig":
        if self.mode not in ("ssm", "vae"):
            raise ConfigError(f"mode must be 'ssm' or 'vae', got {self.mode!r}")
        d, e = self.data, self.eval
        if d.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}, got {d.source!r}")
        if d.n_train < 1 or d.n_test < 0:
            raise ConfigError("data.n_train must be >= 1 and data.n_test >= 0")
        if d.source == "files" and not d.train_files:
            raise ConfigError("data.source 'files' needs data.train_files")
        if d.source == "atc" and not d.atc_files:
            raise ConfigError("data.source 'atc' needs data.atc_files")
        for p in [*d.train_files, *d.test_files, *d.atc_files]:
            if not Path(p).exists():
                raise ConfigError(f"data file does not exist: {p}")
        if e.protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {PROTOCOLS}, got {e.protocol!r}")
        if e.observe < 1 or any(int(h) < 1 for h in e.horizons):
            raise ConfigError("eval.observe and eval.horizons must be >= 1")
        if self.plot.grid < 1:
            raise ConfigError("plot.grid must be >= 1")
        try:
            self.model_config().validate()
            self.train_config().validate()
            self.vortex_config().validate()
            self.binning_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def vortex_config(self, **overrides) -> VortexConfig:
        return VortexConfig(**{**self.data.vortex, **overrides})

    def binning_config(self) -> BinningConfig:
        b = dict(self.data.binning)
        if b.get("bbox") is not None:
            b["bbox"] = tuple(b["bbox"])
        return BinningConfig(**b)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _check_keys(raw, typ, prefix: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {prefix.rstrip('.') or 'root'} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(typ)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix}{key}")
    return dict(raw)


# -- datasets ------------------------------------------------------------------


@dataclass
class Dataset:
    train: list[MotionSequence]
    test: list[MotionSequence]
    test_names: list[str]
    # raw tracking tables of the test days (ATC only), for trajectory windows
    test_tables: list = field(default_factory=list)


TEST_SEED_OFFSET = 10_000


def synthetic_sequence(cfg: RunConfig, seed: int, n_steps: int | None = None) -> MotionSequence:
    d = cfg.data
    if d.source == "vortex":
        over = {"seed": seed} if n_steps is None else {"seed": seed, "n_steps": n_steps}
        return generate_vortex_sequence(cfg.vortex_config(**over))
    c = d.constant
    steps = int(c.get("n_steps", 20)) if n_steps is None else n_steps
    return generate_constant_field_sequence(Velocity(float(c.get("psi", 0.0)), float(c.get("rho", 1.0))), steps,
                                            int(c.get("n_per_step", 20)), tuple(c.get("domain", (-1, 1, -1, 1))),
                                            seed)


def build_dataset(cfg: RunConfig) -> Dataset:
    """Assemble train/test sequences for the configured source (synthetic data is generated deterministically)."""
    d = cfg.data
    if d.source in ("vortex", "constant"):
        train_seqs = [synthetic_sequence(cfg, cfg.seed + i) for i in range(d.n_train)]
        test_seeds = [cfg.seed + TEST_SEED_OFFSET + j for j in range(d.n_test)]
        test = [synthetic_sequence(cfg, s, d.test_steps) for s in test_seeds]
        names = [f"seed{s}" for s in test_seeds]
        ds = Dataset(train_seqs, test, names)
    elif d.source == "files":
        ds = Dataset([import_sequence(p) for p in d.train_files], [import_sequence(p) for p in d.test_files],
                     [Path(p).stem for p in d.test_files])
    else:
        ds = _atc_dataset(cfg)
    if d.one_direction:
        ds.train = [one_direction_filter(s) for s in ds.train]
        ds.test = [one_direction_filter(s) for s in ds.test]
    return ds


def atc_days(cfg: RunConfig) -> dict:
    tables = [parse_rows(p) for p in cfg.data.atc_files]
    bcfg = cfg.binning_config()
    days: dict = {}
    for table in tables:
        for day, part in split_by_day(table, bcfg.utc_offset_hours).items():
            days.setdefault(day, []).append(part)
    return {day: _concat(parts) for day, parts in sorted(days.items())}


def _concat(parts):
    if len(parts) == 1:
        return parts[0]
    return TrackTable(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in COLUMNS},
                      n_malformed=sum(p.n_malformed for p in parts))


def _atc_dataset(cfg: RunConfig) -> Dataset:
    days = atc_days(cfg)
    split = split_days(days)
    bcfg = cfg.binning_config()
    seq = {day: to_motion_sequence(days[day], bcfg) for day in [*split.train, *split.test]}
    return Dataset([seq[d] for d in split.train], [seq[d] for d in split.test],
                   [f"{d.isoformat()}-{d.strftime('%a')}" for d in split.test],
                   [days[d] for d in split.test])


# -- protocols -----------------------------------------------------------------


def run_training(cfg: RunConfig, data: list[MotionSequence], model: MapOfDynamics | None = None,
                 start_epoch: int = 0, callback=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    return train(data, cfg.model_config(), cfg.train_config(), cfg.mode, model=model, start_epoch=start_epoch,
                 callback=callback)


def velocity_field_records(model: MapOfDynamics, tests: list[MotionSequence], names: list[str], observe: int,
                           horizons) -> list[dict]:
    """AVE/FVE per horizon, averaged over the held-out sequences."""
    records = []
    for h in horizons:
        h = int(h)
        rows = []
        for seq in tests:
            if len(seq) < observe + h:
                raise ValueError(f"test sequence has {len(seq)} steps; need observe+horizon = {observe + h}")
            rows.append(ave_fve(model, seq[:observe], seq[observe:observe + h], h))
        ave, fve = np.mean(rows, axis=0)
        records += [{"metric": "AVE", "split": "test", "horizon": h, "value": float(ave)},
                    {"metric": "FVE", "split": "test", "horizon": h, "value": float(fve)}]
    return records


def divergence_records(model: MapOfDynamics, tests: list[MotionSequence], names: list[str], steps, k: int,
                       seed: int) -> list[dict]:
    records = []
    for name, seq in zip(names, tests):
        rep = map_quality(model, seq, steps, k=k, seed=seed)
        records += [{"metric": "divergence_bits", "split": name, "horizon": row.step, "value": row.divergence}
                    for row in rep["rows"]]
        records.append({"metric": "divergence_bits_mean", "split": name, "horizon": "all", "value": rep["mean"]})
    return records


def prediction_records(model: MapOfDynamics, tables, names: list[str], history: int, horizons, stride: int,
                       one_direction: bool = False) -> list[dict]:
    records = []
    for name, table in zip(names, tables):
        for h in horizons:
            h = int(h)
            windows = prediction_windows(table, window=history, horizon=h, stride=stride)
            if not windows:
                continue
            ades, fdes, weights = [], [], []
            for w in windows:
                hist = one_direction_filter(w.history) if one_direction else w.history
                pred = predict_trajectories(model, hist, w.starts, h, w.history.dt)
                ade, fde = ade_fde(pred, w.truth)
                ades.append(ade)
                fdes.append(fde)
                weights.append(len(w.truth))
            seconds = round(h * windows[0].history.dt, 3)
            records += [{"metric": "ADE_m", "split": name, "horizon": seconds,
                         "value": float(np.average(ades, weights=weights))},
                        {"metric": "FDE_m", "split": name, "horizon": seconds,
                         "value": float(np.average(fdes, weights=weights))}]
    return records


def ground_truth_field(cfg: RunConfig, xy: np.ndarray, step: int) -> np.ndarray | None:
    """Analytic (psi, rho) at ``xy`` for synthetic sources, else None."""
    if cfg.data.source == "vortex":
        return vortex_velocity_at(cfg.vortex_config(), xy, step)
    if cfg.data.source == "constant":
        c = cfg.data.constant
        return np.tile([float(c.get("psi", 0.0)), float(c.get("rho", 1.0))], (len(xy), 1))
    return None


def default_run_config(**overrides: Any) -> RunConfig:
    return RunConfig.from_dict({"schema_version": SCHEMA_VERSION, **overrides})


# -- benchmark runs ------------------------------------------------------------


def vortex_ablation(kind: str = "particles", seed: int = 0, epochs: int = 500, n_train: int = 16,
                    model: dict | None = None, observe: int = 5, horizons=(5, 20)) -> dict:
    """Train VAE and SSM on the same vortex data; AVE/FVE on one held-out sequence per horizon."""
    out: dict = {}
    for mode in ("vae", "ssm"):
        cfg = RunConfig.from_dict({"seed": seed, "mode": mode, "model": model or {}, "train": {"epochs": epochs},
                                   "data": {"source": "vortex", "n_train": n_train, "n_test": 1,
                                            "test_steps": observe + max(horizons), "vortex": {"kind": kind}}})
        ds = build_dataset(cfg)
        res = run_training(cfg, ds.train)
        recs = velocity_field_records(res.model, ds.test, ds.test_names, observe, horizons)
        out[mode] = {"seconds": res.seconds, "final_loss": res.curve[-1]["total"],
                     **{f"{r['metric']}@{r['horizon']}": r["value"] for r in recs}}
    return out


def constant_field_check(seed: int = 0, epochs: int = 300, model: dict | None = None, n_query: int = 100,
                         rollout_steps: int = 20) -> dict:
    """Train an SSM on the (psi=0, rho=1) field; report decoded-mean and rollout-endpoint errors."""
    cfg = RunConfig.from_dict({"seed": seed, "mode": "ssm", "model": model or {}, "train": {"epochs": epochs},
                               "data": {"source": "constant", "n_train": 16, "n_test": 1, "test_steps": 5}})
    ds = build_dataset(cfg)
    res = run_training(cfg, ds.train)
    m = res.model
    rng = np.random.default_rng(seed + 1)
    xy = rng.uniform(-1, 1, (n_query, 2))
    history = ds.test[0]
    with torch.no_grad():
        mean = m.decode(torch.as_tensor(xy, dtype=m.dtype), filter_last(m, history).m[0]).mean.numpy()
    traj = predict_trajectories(m, history, [[0.0, 0.0]], rollout_steps)[0]
    return {"seconds": res.seconds, "max_psi_err": float(np.max(np.abs(wrap_angle(mean[:, 0])))),
            "max_rho_err": float(np.max(np.abs(mean[:, 1] - 1.0))),
            "endpoint": traj.positions[-1].tolist(),
            "endpoint_err": float(np.linalg.norm(traj.positions[-1] - [0.1 * rollout_steps, 0.0]))}
