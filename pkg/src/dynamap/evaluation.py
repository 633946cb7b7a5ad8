"""Evaluation protocols: velocity-field errors, k-NN divergence and trajectory errors."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .core import PSI, RHO, MotionSequence, MotionSet, polar_to_cart_array, wrap_angle
from .model import LatentState, MapOfDynamics, collate_sequences, warn_outside_support

DISTANCE_FLOOR = 1e-12


# -- velocity-field error ------------------------------------------------------


@torch.no_grad()
def filter_last(model: MapOfDynamics, observed: MotionSequence) -> LatentState:
    """Posterior state (mean mode) after the last observed step."""
    points, mask = collate_sequences([observed], model.dtype)
    return model.filter(points, mask, "mean")[-1]


@torch.no_grad()
def predict_patterns(model: MapOfDynamics, observed: MotionSequence, horizon: int) -> list[torch.Tensor]:
    """Mean-mode motion patterns for the ``horizon`` steps after ``observed``, each (stochastic_dim,)."""
    last = filter_last(model, observed)
    return [s.m[0] for s in model.rollout_prior(last, horizon, "mean")]


@torch.no_grad()
def ave_fve(model: MapOfDynamics, observed: MotionSequence, future_truth: MotionSequence,
            horizon: int | None = None) -> tuple[float, float]:
    """Average / final squared Cartesian velocity error at the ground-truth positions."""
    horizon = len(future_truth) if horizon is None else horizon
    if horizon < 1 or len(future_truth) == 0:
        raise ValueError("ave_fve needs a non-empty future")
    if horizon != len(future_truth):
        raise ValueError(f"horizon {horizon} != len(future_truth) {len(future_truth)}")
    patterns = predict_patterns(model, observed, horizon)
    errors = []
    for m, truth in zip(patterns, future_truth):
        pred = model.decode(torch.as_tensor(truth.positions, dtype=model.dtype), m).mean.numpy()
        errors.append(velocity_sq_errors(pred, truth.data[:, [PSI, RHO]]))
    if any(len(e) == 0 for e in errors):
        raise ValueError("ave_fve: empty ground-truth step")
    return float(np.concatenate(errors).mean()), float(errors[-1].mean())


def velocity_sq_errors(pred_polar: np.ndarray, true_polar: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between polar velocities, compared as Cartesian vectors."""
    diff = polar_to_cart_array(pred_polar[:, 0], pred_polar[:, 1]) - \
        polar_to_cart_array(true_polar[:, 0], true_polar[:, 1])
    return (diff**2).sum(-1)


def heading_error(pred_psi, true_psi) -> np.ndarray:
    return np.abs(wrap_angle(np.asarray(pred_psi) - np.asarray(true_psi)))


# -- k-NN divergence -----------------------------------------------------------


@dataclass
class DivergenceConfig:
    """Parameters of the k-NN divergence estimate.

    ``k`` is the neighbour rank, ``d`` the sample dimension.  ``n`` and ``m``
    are the observed and model sample counts; they are filled from the data
    when left as ``None``.  (In the estimator the k-NN distances are usually
    written with rho and nu; they are unrelated to the speed ``rho``.)
    """

    k: int = 1
    d: int = 2
    n: int | None = None
    m: int | None = None

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n is not None and self.n < self.k + 1:
            raise ValueError(f"need at least k+1={self.k + 1} observed samples, got {self.n}")
        if self.m is not None and self.m < self.k:
            raise ValueError(f"need at least k={self.k} model samples, got {self.m}")
        return self


def knn_divergence(obs, model_samples, cfg: DivergenceConfig | None = None) -> float:
    """Estimate D(obs distribution || model distribution) in bits from samples alone."""
    obs = np.asarray(obs, dtype=float)
    other = np.asarray(model_samples, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if other.ndim == 1:
        other = other[:, None]
    if cfg is not None and cfg.d != obs.shape[1]:
        raise ValueError(f"DivergenceConfig.d={cfg.d} but samples are {obs.shape[1]}-dimensional")
    base = cfg.__dict__ if cfg else {"d": obs.shape[1]}
    cfg = DivergenceConfig(**{**base, "n": len(obs), "m": len(other)}).validate()
    if other.shape[1] != obs.shape[1]:
        raise ValueError("sample dimensions differ")
    n, m, k = cfg.n, cfg.m, cfg.k
    # the query point itself is returned first at distance 0
    rho = cKDTree(obs).query(obs, k=k + 1)[0][:, k]
    nu = cKDTree(other).query(obs, k=k)[0]
    nu = nu[:, k - 1] if nu.ndim == 2 else nu
    rho = np.maximum(rho, DISTANCE_FLOOR)
    nu = np.maximum(nu, DISTANCE_FLOOR)
    return float(cfg.d / n * np.sum(np.log2(nu / rho)) + math.log2(m / (n - 1)))


@torch.no_grad()
def sample_model_velocities(model: MapOfDynamics, positions: np.ndarray, m: torch.Tensor,
                            generator: torch.Generator | None = None) -> np.ndarray:
    """One Cartesian velocity draw per query position; negative speed draws are clipped to 0."""
    emission = model.decode(torch.as_tensor(positions, dtype=model.dtype), m)
    noise = torch.randn(emission.mean.shape, generator=generator, dtype=model.dtype)
    draw = (emission.mean + emission.std * noise).numpy()
    return polar_to_cart_array(draw[:, 0], np.maximum(draw[:, 1], 0.0))


@dataclass
class DivergenceRow:
    step: int
    n_obs: int
    divergence: float


@torch.no_grad()
def map_quality(model: MapOfDynamics, eval_day: MotionSequence, step_indices: Sequence[int] | None = None,
                k: int = 1, seed: int = 0) -> dict:
    """Per-step divergence (bits) between observed velocities and model draws at the same positions.

    The motion pattern for step ``t`` is the posterior mean after filtering
    steps ``0..t``.  Steps with fewer than ``k+1`` observations are skipped.
    """
    idx = list(range(len(eval_day))) if step_indices is None else list(step_indices)
    gen = torch.Generator().manual_seed(seed)
    rows: list[DivergenceRow] = []
    states = _filter_tolerant(model, eval_day)
    for t in idx:
        step = eval_day[t]
        if len(step) < k + 1 or states[t] is None:
            warnings.warn(f"step {t}: {len(step)} observations, skipped", stacklevel=2)
            continue
        drawn = sample_model_velocities(model, step.positions, states[t].m[0], gen)
        rows.append(DivergenceRow(t, len(step), knn_divergence(step.velocities, drawn, DivergenceConfig(k=k))))
    values = [r.divergence for r in rows]
    nan = float("nan")
    return {"rows": rows, "mean": float(np.mean(values)) if values else nan,
            "weighted_mean": float(np.average(values, weights=[r.n_obs for r in rows])) if values else nan}


def _filter_tolerant(model: MapOfDynamics, seq: MotionSequence) -> list[LatentState | None]:
    """Posterior filtering that carries the prior prediction through empty steps."""
    out: list[LatentState | None] = []
    state = model.initial_state(1)
    for step in seq:
        if len(step) == 0:
            if model.mode == "vae":
                out.append(None)
                continue
            state = model.rollout_prior(state, 1, "mean")[0]
            out.append(state)
            continue
        sub = MotionSequence([MotionSet(0, step.data)], seq.dt)
        points, mask = collate_sequences([sub], model.dtype)
        state = model.filter(points, mask, "mean", state=state)[-1]
        out.append(state)
    return out


# -- trajectories --------------------------------------------------------------


@dataclass
class Trajectory:
    positions: np.ndarray  # (H, 2)
    dt: float = 0.1

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.positions)


@torch.no_grad()
def predict_trajectories(model: MapOfDynamics, history: MotionSequence, starts, horizon_steps: int,
                         dt: float = 0.1) -> list[Trajectory]:
    """Euler-integrate decoded mean velocities from each start for ``horizon_steps`` steps.

    Step ``t`` uses the motion pattern predicted for the ``t``-th step after
    the history; the start itself is not part of the returned positions.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    warn_outside_support(model, starts)
    patterns = predict_patterns(model, history, horizon_steps)
    pos = torch.as_tensor(starts, dtype=model.dtype)
    out = torch.empty(len(starts), horizon_steps, 2, dtype=model.dtype)
    for t, m in enumerate(patterns):
        v = model.decode(pos, m).mean
        speed = v[:, 1].clamp_min(0.0)
        pos = pos + torch.stack([speed * v[:, 0].cos(), speed * v[:, 0].sin()], -1) * dt
        out[:, t] = pos
    return [Trajectory(p.numpy(), dt) for p in out]


def _as_array(trajs) -> np.ndarray:
    if isinstance(trajs, np.ndarray):
        return trajs.astype(float)
    lengths = {len(t) for t in trajs}
    if len(lengths) > 1:
        raise ValueError(f"trajectories have different lengths {sorted(lengths)}")
    return np.stack([t.positions if isinstance(t, Trajectory) else np.asarray(t, dtype=float) for t in trajs])


def ade_fde(pred, truth) -> tuple[float, float]:
    """Mean Euclidean displacement over all steps (ADE) and at the last step (FDE), in metres."""
    p, q = _as_array(pred), _as_array(truth)
    if p.shape != q.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth {q.shape}")
    if p.size == 0:
        raise ValueError("no trajectories")
    dist = np.linalg.norm(p - q, axis=-1)
    return float(dist.mean()), float(dist[:, -1].mean())


def one_direction_filter(seq: MotionSequence) -> MotionSequence:
    """Keep only samples heading into [0, pi)."""
    steps = []
    for s in seq:
        keep = (s.data[:, PSI] >= 0) & (s.data[:, PSI] < math.pi)
        steps.append(MotionSet(s.t, s.data[keep]))
    return MotionSequence(steps, seq.dt)


# -- reports -------------------------------------------------------------------

REPORT_COLUMNS = ("metric", "split", "horizon", "value")


def write_report(records: Sequence[dict], path, summary_path=None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in records:
            w.writerow([r["metric"], r["split"], r["horizon"], repr(float(r["value"]))])
    if summary_path is not None:
        summary: dict = {}
        for r in records:
            summary.setdefault(r["split"], {}).setdefault(str(r["horizon"]), {})[r["metric"]] = float(r["value"])
        Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True))


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**r, "value": float(r["value"])} for r in csv.DictReader(fh)]
