"""Domain types and closed-form Gaussian / angle primitives.

Velocities are polar: ``psi`` is the heading in [-pi, pi) and ``rho`` the
speed.  All log densities and KL values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

TWO_PI = 2.0 * math.pi

# column layout of MotionSet.data
X, Y, PSI, RHO = range(4)


def wrap_angle(theta):
    """Map an angle (float, ndarray or tensor) into [-pi, pi)."""
    if isinstance(theta, torch.Tensor):
        if not torch.isfinite(theta).all():
            raise ValueError("wrap_angle: non-finite input")
        return wrap_tensor(theta)
    arr = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_angle: non-finite input")
    out = np.mod(arr + math.pi, TWO_PI) - math.pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    if np.ndim(theta) == 0 and not isinstance(theta, np.ndarray):
        return float(out)
    return out


def wrap_tensor(theta: torch.Tensor) -> torch.Tensor:
    """Differentiable wrap to [-pi, pi) without the finiteness check (NaN passes through)."""
    out = torch.remainder(theta + math.pi, TWO_PI) - math.pi
    # remainder can round up to exactly 2*pi for tiny negative inputs
    return torch.where(out >= math.pi, out - TWO_PI, out)


@dataclass(frozen=True)
class Velocity:
    psi: float
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.psi) and math.isfinite(self.rho)):
            raise ValueError(f"non-finite velocity ({self.psi}, {self.rho})")
        if self.rho < 0:
            raise ValueError(f"speed must be >= 0, got {self.rho}")
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))
        object.__setattr__(self, "rho", float(self.rho))


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")


@dataclass(frozen=True)
class MotionSample:
    p: Position
    v: Velocity


def polar_to_cart(v: Velocity) -> tuple[float, float]:
    return v.rho * math.cos(v.psi), v.rho * math.sin(v.psi)


def cart_to_polar(vx: float, vy: float) -> Velocity:
    rho = math.hypot(vx, vy)
    if rho == 0.0:
        return Velocity(0.0, 0.0)
    return Velocity(math.atan2(vy, vx), rho)


def polar_to_cart_array(psi, rho):
    """Vectorised polar -> Cartesian; works for ndarrays and tensors."""
    if isinstance(psi, torch.Tensor):
        return torch.stack([rho * torch.cos(psi), rho * torch.sin(psi)], dim=-1)
    psi = np.asarray(psi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return np.stack([rho * np.cos(psi), rho * np.sin(psi)], axis=-1)


def cart_to_polar_array(vx, vy):
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    rho = np.hypot(vx, vy)
    psi = np.where(rho > 0, np.arctan2(vy, vx), 0.0)
    return wrap_angle(psi), rho


class MotionSet:
    """Observations at one time step, stored as an ``(n, 4)`` array of x, y, psi, rho.

    Row order carries no meaning.
    """

    def __init__(self, t: int, data=None):
        if t < 0:
            raise ValueError(f"time index must be >= 0, got {t}")
        arr = np.zeros((0, 4)) if data is None else np.array(data, dtype=float).reshape(-1, 4)
        if not np.all(np.isfinite(arr)):
            raise ValueError("MotionSet contains non-finite values")
        if np.any(arr[:, RHO] < 0):
            raise ValueError("MotionSet contains negative speeds")
        arr[:, PSI] = wrap_angle(arr[:, PSI])
        self.t = int(t)
        self.data = arr

    @classmethod
    def from_samples(cls, t: int, samples: Iterable[MotionSample]) -> "MotionSet":
        rows = [(s.p.x, s.p.y, s.v.psi, s.v.rho) for s in samples]
        return cls(t, np.array(rows, dtype=float).reshape(-1, 4))

    @property
    def samples(self) -> list[MotionSample]:
        return [MotionSample(Position(r[X], r[Y]), Velocity(r[PSI], r[RHO])) for r in self.data]

    @property
    def positions(self) -> np.ndarray:
        return self.data[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        """Cartesian velocity vectors, shape (n, 2)."""
        return polar_to_cart_array(self.data[:, PSI], self.data[:, RHO])

    def __len__(self) -> int:
        return len(self.data)

    def __iter__(self) -> Iterator[MotionSample]:
        return iter(self.samples)

    def __eq__(self, other) -> bool:
        return isinstance(other, MotionSet) and self.t == other.t and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"MotionSet(t={self.t}, n={len(self)})"


@dataclass
class MotionSequence:
    steps: list[MotionSet]
    dt: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ts = [s.t for s in self.steps]
        if any(b != a + 1 for a, b in zip(ts, ts[1:])):
            raise ValueError(f"time indices must be consecutive, got {ts}")

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return MotionSequence(self.steps[idx], self.dt)
        return self.steps[idx]

    def __iter__(self) -> Iterator[MotionSet]:
        return iter(self.steps)

    def reindexed(self, start: int = 0) -> "MotionSequence":
        return MotionSequence([MotionSet(start + i, s.data) for i, s in enumerate(self.steps)], self.dt)


@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian over the last tensor dimension (leading dims are batch)."""

    mean: torch.Tensor
    var: torch.Tensor = field(default=None)

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.get_default_dtype()) \
            if not isinstance(self.mean, torch.Tensor) else self.mean
        if self.var is None:
            self.var = torch.ones_like(self.mean)
        elif not isinstance(self.var, torch.Tensor):
            self.var = torch.as_tensor(self.var, dtype=self.mean.dtype)
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean/var shape mismatch {tuple(self.mean.shape)} vs {tuple(self.var.shape)}")
        if not bool((self.var > 0).all()):
            raise ValueError("DiagonalGaussian variances must be strictly positive")

    @classmethod
    def standard(cls, dim: int, batch_shape: Sequence[int] = (), dtype=None) -> "DiagonalGaussian":
        shape = (*batch_shape, dim)
        return cls(torch.zeros(shape, dtype=dtype), torch.ones(shape, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return self.var.sqrt()

    def __getitem__(self, idx) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean[idx], self.var[idx])

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.var.detach())


def _check_dims(a: int, b: int, what: str):
    if a != b:
        raise ValueError(f"{what}: dimension mismatch ({a} vs {b})")


def gaussian_log_prob(g: DiagonalGaussian, x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=g.mean.dtype)
    _check_dims(x.shape[-1], g.dim, "gaussian_log_prob")
    return -0.5 * (math.log(TWO_PI) + g.var.log() + (x - g.mean) ** 2 / g.var).sum(-1)


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) in nats, summed over the event dimension."""
    _check_dims(q.dim, p.dim, "gaussian_kl")
    ratio = q.var / p.var
    kl = 0.5 * (ratio + (q.mean - p.mean) ** 2 / p.var - 1.0 - ratio.log()).sum(-1)
    # the closed form can round to -1e-17 for identical inputs
    return kl.clamp_min(0.0)


def gaussian_sample(g: DiagonalGaussian, noise) -> torch.Tensor:
    noise = torch.as_tensor(noise, dtype=g.mean.dtype)
    _check_dims(noise.shape[-1], g.dim, "gaussian_sample")
    return g.mean + g.var.sqrt() * noise
