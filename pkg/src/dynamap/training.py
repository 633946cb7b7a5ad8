"""ELBO objectives, the optimisation loop and training curves."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .core import (PSI, RHO, DiagonalGaussian, MotionSequence, MotionSet, gaussian_kl, gaussian_log_prob,
                   gaussian_sample, wrap_tensor)
from .model import MapOfDynamics, ModelConfig, collate_sequences

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 500
    weight_decay: float = 0.01
    grad_clip_norm: float = 10.0
    kl_scale: float = 1.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.grad_clip_norm > 0
                and self.kl_scale >= 0):
            raise ValueError("learning_rate, grad_clip_norm must be > 0; weight_decay, kl_scale >= 0")
        return self


@dataclass
class LossReport:
    """Per-sequence averages in nats; ``total = recon_nll + kl_scale * kl``."""

    total: torch.Tensor
    recon_nll: torch.Tensor
    kl: torch.Tensor

    def item(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "recon_nll", "kl")}


def circular_target(emission: DiagonalGaussian, target: torch.Tensor) -> torch.Tensor:
    """Replace the heading target by ``mean + wrap(psi - mean)``.

    The heading density then treats psi and psi + 2*pi alike, which keeps
    fields pointing near +-pi learnable.
    """
    mu = emission.mean[..., 0]
    psi = mu + wrap_tensor(target[..., 0] - mu)
    return torch.stack([psi, target[..., 1]], -1)


def recon_nll(model: MapOfDynamics, points: torch.Tensor, mask: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the observed velocities in each set, shape (B,)."""
    emission = model.decode(points[..., :2], m)
    nll = -gaussian_log_prob(emission, circular_target(emission, points[..., [PSI, RHO]]))
    w = mask.to(nll.dtype)
    return (nll * w).sum(-1) / w.sum(-1)


def elbo_step(model: MapOfDynamics, s, m_dist: DiagonalGaussian, prior: DiagonalGaussian,
              m_sample: torch.Tensor, kl_scale: float = 1.0, mask: torch.Tensor | None = None) -> LossReport:
    """Single-sample ELBO terms for one observation set (or a batch of padded sets).

    ``s`` is a MotionSet or points of shape (..., N, 4).
    """
    if isinstance(s, MotionSet):
        if len(s) == 0:
            raise ValueError("elbo_step needs a non-empty set")
        points = torch.as_tensor(s.data, dtype=model.dtype)
    else:
        points = s
    if mask is None:
        mask = torch.ones(points.shape[:-1], dtype=torch.bool)
    if not bool(mask.any(-1).all()):
        raise ValueError("elbo_step needs a non-empty set")
    rec = recon_nll(model, points, mask, m_sample)
    kl = gaussian_kl(m_dist, prior)
    return LossReport(rec + kl_scale * kl, rec, kl)


def _noise(shape, generator, dtype):
    return torch.randn(shape, generator=generator, dtype=dtype)


def elbo_batch(model: MapOfDynamics, points: torch.Tensor, mask: torch.Tensor,
               generator: torch.Generator | None = None, kl_scale: float = 1.0) -> LossReport:
    """Sequence ELBO for a padded batch (B, T, N, 4); terms are averaged over steps and batch."""
    B, T = points.shape[:2]
    if not bool(mask.any(-1).all()):
        raise ValueError("every time step needs at least one observation")
    z = model.encode_points(points, mask)
    dtype = model.dtype
    d = model.cfg.stochastic_dim
    recs, kls = [], []
    if model.mode == "vae":
        prior = model.prior_vae((B,))
        for t in range(T):
            post = model.posterior_head(z[:, t])
            m = gaussian_sample(post, _noise((B, d), generator, dtype))
            step = elbo_step(model, points[:, t], post, prior, m, kl_scale, mask[:, t])
            recs.append(step.recon_nll)
            kls.append(step.kl)
    else:
        state = model.initial_state(B)
        for t in range(T):
            h = model.deterministic_step(state)
            prior = model.prior_head(h)
            post = model.posterior_from_feature(h, z[:, t])
            m = gaussian_sample(post, _noise((B, d), generator, dtype))
            step = elbo_step(model, points[:, t], post, prior, m, kl_scale, mask[:, t])
            recs.append(step.recon_nll)
            kls.append(step.kl)
            state = type(state)(h, m, post)
    rec = torch.stack(recs, 1).mean()
    kl = torch.stack(kls, 1).mean()
    return LossReport(rec + kl_scale * kl, rec, kl)


def elbo_sequence(model: MapOfDynamics, seq: MotionSequence | Sequence[MotionSequence],
                  generator: torch.Generator | None = None, kl_scale: float = 1.0) -> LossReport:
    seqs = [seq] if isinstance(seq, MotionSequence) else list(seq)
    if any(len(s) == 0 for s in seqs):
        raise ValueError("elbo_sequence needs at least one time step")
    if any(len(step) == 0 for s in seqs for step in s):
        raise ValueError("elbo_sequence: empty observation set in sequence")
    points, mask = collate_sequences(seqs, model.dtype)
    return elbo_batch(model, points, mask, generator, kl_scale)


@dataclass
class TrainResult:
    model: MapOfDynamics
    curve: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _batches(n: int, size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator).tolist()
    return [order[i:i + size] for i in range(0, n, size)]


def train(data: Sequence[MotionSequence], model_cfg: ModelConfig | None = None,
          train_cfg: TrainConfig | None = None, mode: str = "ssm", model: MapOfDynamics | None = None,
          start_epoch: int = 0, callback=None, dtype: torch.dtype = torch.float32) -> TrainResult:
    """Minimise the negative ELBO with AdamW over mini-batches of whole sequences.

    Passing ``model`` resumes training (its normaliser is kept); ``start_epoch``
    only offsets the epoch numbers in the curve.  ``callback(epoch, row, model)``
    runs after every epoch.
    """
    data = list(data)
    if not data:
        raise ValueError("train: no training sequences")
    tc = (train_cfg or TrainConfig()).validate()
    torch.manual_seed(tc.seed)
    if model is None:
        model = MapOfDynamics(model_cfg, mode).to(dtype)
        model.normalizer.fit(data)
    dtype = model.dtype
    # group by length so every batch stacks
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(data):
        by_len.setdefault(len(s), []).append(i)
    tensors = {L: collate_sequences([data[i] for i in idx], dtype) for L, idx in by_len.items()}
    opt = torch.optim.AdamW(model.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay)
    gen = torch.Generator().manual_seed(tc.seed)
    curve: list[dict] = []
    t0 = time.perf_counter()
    model.train()
    for epoch in range(start_epoch + 1, start_epoch + tc.epochs + 1):
        sums = {"total": 0.0, "recon_nll": 0.0, "kl": 0.0}
        n_seen = 0
        jobs = [(L, b) for L, idx in by_len.items() for b in _batches(len(idx), tc.batch_size, gen)]
        order = torch.randperm(len(jobs), generator=gen).tolist()
        for j in order:
            L, b = jobs[j]
            points, mask = tensors[L]
            try:
                rep = elbo_batch(model, points[b], mask[b], gen, tc.kl_scale)
            except ValueError as exc:
                if "variances" not in str(exc):
                    raise
                raise NumericalError(f"non-finite variance in a latent or emission head at epoch {epoch}: "
                                     f"{_bad_parameters(model)}") from exc
            _check_finite(rep, epoch)
            opt.zero_grad(set_to_none=True)
            rep.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
            opt.step()
            bad = _bad_parameters(model)
            if bad:
                raise NumericalError(f"parameters became non-finite at epoch {epoch} "
                                     f"(loss recon_nll={rep.recon_nll.item():.4g}, kl={rep.kl.item():.4g}): {bad}")
            for k, v in rep.item().items():
                sums[k] += v * len(b)
            n_seen += len(b)
        row = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
        curve.append(row)
        if callback is not None:
            callback(epoch, row, model)
        if epoch == start_epoch + 1 or epoch % 50 == 0:
            log.info("epoch %d total=%.4f recon=%.4f kl=%.4f", epoch, row["total"], row["recon_nll"], row["kl"])
    model.eval()
    return TrainResult(model, curve, time.perf_counter() - t0)


def _bad_parameters(model) -> list[str]:
    return [n for n, p in model.named_parameters() if not bool(torch.isfinite(p.detach()).all())][:5]


def _check_finite(rep: LossReport, epoch: int):
    for name in ("recon_nll", "kl", "total"):
        val = getattr(rep, name)
        if not bool(torch.isfinite(val).all()):
            raise NumericalError(f"non-finite {name} ({float(val.detach())}) at epoch {epoch}")


CURVE_COLUMNS = ("epoch", "total", "recon_nll", "kl")


def write_curve(curve: Sequence[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in CURVE_COLUMNS[1:]])


def read_curve(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in CURVE_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


def smoothed(values: Sequence[float], window: int = 20) -> list[float]:
    out = []
    for i in range(len(values) - window + 1):
        out.append(math.fsum(values[i:i + window]) / window)
    return out
