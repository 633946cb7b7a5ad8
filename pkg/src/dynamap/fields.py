"""Synthetic motion fields: the vortex benchmark and constant-velocity fixtures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import MotionSequence, MotionSet, Velocity, cart_to_polar_array, wrap_angle


class ConfigError(ValueError):
    pass


@dataclass
class VortexConfig:
    growth_rate: float = 0.5
    angular_offset: float = math.pi / 2
    n_particles: int = 200
    n_observed_per_step: int = 20
    n_steps: int = 20
    dt: float = 0.1
    domain_radius: float = 1.0
    min_radius: float = 0.05
    substeps: int = 10
    seed: int = 0
    # "particles": (rho, psi) of the ODE are polar positions of advected particles;
    # "field": they are the speed and heading of the velocity at fixed locations
    kind: str = "particles"

    def validate(self):
        if self.kind not in ("particles", "field"):
            raise ConfigError(f"unknown vortex kind {self.kind!r}")
        if not self.n_particles >= self.n_observed_per_step >= 1:
            raise ConfigError("need n_particles >= n_observed_per_step >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.domain_radius <= 0 or not 0 <= self.min_radius < self.domain_radius:
            raise ConfigError("empty spawn domain")
        if self.n_steps < 1 or self.substeps < 10:
            raise ConfigError("n_steps must be >= 1 and substeps >= 10")


@dataclass(frozen=True)
class ParticleState:
    r: float
    theta: float

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("radius must be >= 0")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


def vortex_rhs(state: ParticleState, growth_rate: float = 0.5,
               angular_offset: float = math.pi / 2) -> tuple[float, float]:
    """Time derivative (dr/dt, dtheta/dt) of a particle in polar position coordinates."""
    return growth_rate * state.r, wrap_angle(state.theta) + angular_offset


def _rhs_array(r, theta, growth_rate, angular_offset):
    return growth_rate * r, wrap_angle(theta) + angular_offset


def _cartesian_velocity(r, theta, growth_rate, angular_offset):
    dr, dtheta = _rhs_array(r, theta, growth_rate, angular_offset)
    c, s = np.cos(theta), np.sin(theta)
    return dr * c - r * dtheta * s, dr * s + r * dtheta * c


def particle_velocity(state: ParticleState, growth_rate: float = 0.5,
                      angular_offset: float = math.pi / 2) -> Velocity:
    vx, vy = _cartesian_velocity(state.r, state.theta, growth_rate, angular_offset)
    psi, rho = cart_to_polar_array(vx, vy)
    return Velocity(float(psi), float(rho))


def rk4_advance(r, theta, duration, substeps, growth_rate=0.5, angular_offset=math.pi / 2):
    """Integrate particle arrays over ``duration`` with fixed-step RK4.

    The angle is re-wrapped after every substep.
    """
    r = np.array(r, dtype=float)
    theta = np.array(theta, dtype=float)
    h = duration / substeps
    for _ in range(substeps):
        k1r, k1t = _rhs_array(r, theta, growth_rate, angular_offset)
        k2r, k2t = _rhs_array(r + 0.5 * h * k1r, theta + 0.5 * h * k1t, growth_rate, angular_offset)
        k3r, k3t = _rhs_array(r + 0.5 * h * k2r, theta + 0.5 * h * k2t, growth_rate, angular_offset)
        k4r, k4t = _rhs_array(r + h * k3r, theta + h * k3t, growth_rate, angular_offset)
        r = r + h / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        theta = wrap_angle(theta + h / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t))
    return r, theta


def spawn_in_disk(rng: np.random.Generator, n: int, radius: float, min_radius: float = 0.0):
    """Uniform positions over an annulus, returned as polar (r, theta)."""
    u = rng.uniform(size=n)
    r = np.sqrt(min_radius**2 + u * (radius**2 - min_radius**2))
    theta = wrap_angle(rng.uniform(-math.pi, math.pi, size=n))
    return r, theta


def generate_vortex_trajectories(config: VortexConfig):
    """Full particle state at every emitted time step: arrays r, theta of shape (n_steps, n_particles)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    r, theta = spawn_in_disk(rng, config.n_particles, config.domain_radius, config.min_radius)
    rs, thetas = [r], [theta]
    for _ in range(config.n_steps - 1):
        r, theta = rk4_advance(r, theta, config.dt, config.substeps,
                               config.growth_rate, config.angular_offset)
        rs.append(r)
        thetas.append(theta)
    return np.stack(rs), np.stack(thetas), rng


def generate_vortex_sequence(config: VortexConfig) -> MotionSequence:
    if config.kind == "field":
        return generate_vortex_field_sequence(config)
    rs, thetas, rng = generate_vortex_trajectories(config)
    steps = []
    for t, (r, theta) in enumerate(zip(rs, thetas)):
        idx = rng.choice(config.n_particles, size=config.n_observed_per_step, replace=False)
        r_obs, th_obs = r[idx], theta[idx]
        vx, vy = _cartesian_velocity(r_obs, th_obs, config.growth_rate, config.angular_offset)
        psi, rho = cart_to_polar_array(vx, vy)
        data = np.column_stack([r_obs * np.cos(th_obs), r_obs * np.sin(th_obs), psi, rho])
        steps.append(MotionSet(t, data))
    return MotionSequence(steps, config.dt)


def vortex_field_state(config: VortexConfig, r, theta, t: float):
    """Heading and speed at fixed locations after evolving for time ``t``.

    The field starts as a solid-body counter-clockwise vortex (heading
    ``theta + pi/2``, speed ``r``); each location's speed and heading then
    follow the same ODE as :func:`vortex_rhs` with (r, theta) -> (speed, heading).
    """
    speed = np.asarray(r, dtype=float)
    heading = wrap_angle(np.asarray(theta, dtype=float) + math.pi / 2)
    n_sub = int(round(t / config.dt)) * config.substeps
    if n_sub:
        speed, heading = rk4_advance(speed, heading, t, n_sub, config.growth_rate, config.angular_offset)
    return heading, speed


def generate_vortex_field_sequence(config: VortexConfig) -> MotionSequence:
    config.validate()
    rng = np.random.default_rng(config.seed)
    r, theta = spawn_in_disk(rng, config.n_particles, config.domain_radius, config.min_radius)
    xy = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    steps = []
    for t in range(config.n_steps):
        idx = rng.choice(config.n_particles, size=config.n_observed_per_step, replace=False)
        psi, rho = vortex_field_state(config, r[idx], theta[idx], t * config.dt)
        steps.append(MotionSet(t, np.column_stack([xy[idx], psi, rho])))
    return MotionSequence(steps, config.dt)


def vortex_velocity_at(config: VortexConfig, xy, step: int = 0) -> np.ndarray:
    """Ground-truth (psi, rho) of the vortex field at positions ``xy`` (n, 2) and time step ``step``."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    r, theta = np.hypot(xy[:, 0], xy[:, 1]), np.arctan2(xy[:, 1], xy[:, 0])
    if config.kind == "field":
        psi, rho = vortex_field_state(config, r, theta, step * config.dt)
    else:
        psi, rho = cart_to_polar_array(*_cartesian_velocity(r, theta, config.growth_rate, config.angular_offset))
    return np.column_stack([psi, rho])


def generate_constant_field_sequence(velocity: Velocity, n_steps: int, n_per_step: int,
                                     domain=(-1.0, 1.0, -1.0, 1.0), seed: int = 0,
                                     dt: float = 0.1) -> MotionSequence:
    """Every sample carries ``velocity``; positions are uniform over the box ``(xmin, xmax, ymin, ymax)``."""
    if n_steps < 1 or n_per_step < 1:
        raise ConfigError("n_steps and n_per_step must be >= 1")
    xmin, xmax, ymin, ymax = domain
    if not (xmax > xmin and ymax > ymin):
        raise ConfigError(f"empty domain {domain}")
    rng = np.random.default_rng(seed)
    steps = []
    for t in range(n_steps):
        xy = np.column_stack([rng.uniform(xmin, xmax, n_per_step), rng.uniform(ymin, ymax, n_per_step)])
        v = np.tile([velocity.psi, velocity.rho], (n_per_step, 1))
        steps.append(MotionSet(t, np.hstack([xy, v])))
    return MotionSequence(steps, dt)


SEQUENCE_COLUMNS = ("t", "x", "y", "psi", "rho")


def export_sequence(seq: MotionSequence, path) -> None:
    """Write one row per sample with a ``t,x,y,psi,rho`` header; dt goes in a leading comment."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# dt={seq.dt!r}\n")
        w = csv.writer(fh)
        w.writerow(SEQUENCE_COLUMNS)
        for step in seq:
            for x, y, psi, rho in step.data:
                w.writerow([step.t, repr(float(x)), repr(float(y)), repr(float(psi)), repr(float(rho))])


def import_sequence(path) -> MotionSequence:
    """Inverse of :func:`export_sequence`.  Empty time steps between rows are preserved."""
    path = Path(path)
    dt = 1.0
    rows: dict[int, list] = {}
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if lines and lines[0].startswith("#"):
        for part in lines[0][1:].split():
            key, _, val = part.partition("=")
            if key == "dt":
                dt = float(val)
        lines = lines[1:]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SEQUENCE_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(SEQUENCE_COLUMNS)}, got {header}")
    for rec in reader:
        t = int(rec[0])
        rows.setdefault(t, []).append([float(v) for v in rec[1:]])
    if not rows:
        return MotionSequence([], dt)
    t0, t1 = min(rows), max(rows)
    steps = [MotionSet(t, np.array(rows.get(t, []), dtype=float).reshape(-1, 4)) for t in range(t0, t1 + 1)]
    return MotionSequence(steps, dt)
