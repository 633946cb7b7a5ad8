import math

import numpy as np
import pytest

from dynamap.core import Velocity, wrap_angle
from dynamap.fields import (ConfigError, ParticleState, VortexConfig, export_sequence,
                            generate_constant_field_sequence, generate_vortex_sequence,
                            generate_vortex_trajectories, import_sequence, particle_velocity, rk4_advance,
                            vortex_rhs)


def test_vortex_rhs_examples():
    assert vortex_rhs(ParticleState(0.0, 2.0))[0] == 0.0
    assert vortex_rhs(ParticleState(1.0, -math.pi / 2)) == pytest.approx((0.5, 0.0))
    assert vortex_rhs(ParticleState(2.0, 0.0)) == pytest.approx((1.0, math.pi / 2))


def test_particle_velocity_examples():
    assert particle_velocity(ParticleState(0.0, 1.3)) == Velocity(0.0, 0.0)
    v = particle_velocity(ParticleState(1.0, -math.pi / 2))
    assert v.psi == pytest.approx(-math.pi / 2) and v.rho == pytest.approx(0.5)


@pytest.mark.parametrize("r, theta", [(0.4, 0.3), (1.0, -1.0), (0.7, 2.0), (1.5, -2.5)])
def test_particle_speed_matches_finite_difference(r, theta):
    dr, dth = vortex_rhs(ParticleState(r, theta))
    rho = particle_velocity(ParticleState(r, theta)).rho
    assert rho == pytest.approx(math.hypot(dr, r * dth), rel=1e-12)
    # independent check: difference the Cartesian position of an integrated trajectory
    h = 1e-5
    r1, t1 = rk4_advance([r], [theta], h, 10)
    r0, t0 = rk4_advance([r], [theta], -h, 10)
    p1 = np.array([r1[0] * math.cos(t1[0]), r1[0] * math.sin(t1[0])])
    p0 = np.array([r0[0] * math.cos(t0[0]), r0[0] * math.sin(t0[0])])
    fd = np.linalg.norm(p1 - p0) / (2 * h)
    assert abs(fd - rho) / rho < 1e-3


def test_rk4_half_step_agreement():
    r = np.array([0.3, 0.8, 1.0])
    th = np.array([-1.2, 0.1, 1.0])
    a = rk4_advance(r, th, 0.1, 10)
    b = rk4_advance(r, th, 0.1, 20)
    pa = np.column_stack([a[0] * np.cos(a[1]), a[0] * np.sin(a[1])])
    pb = np.column_stack([b[0] * np.cos(b[1]), b[0] * np.sin(b[1])])
    rel = np.linalg.norm(pa - pb, axis=1) / np.linalg.norm(pb, axis=1)
    assert rel.max() < 1e-6


def test_vortex_sequence_shape_and_invariants():
    seq = generate_vortex_sequence(VortexConfig(n_steps=20, n_observed_per_step=20, seed=3))
    assert len(seq) == 20
    assert all(len(s) == 20 for s in seq)
    assert [s.t for s in seq] == list(range(20))
    for s in seq:
        assert np.all(s.data[:, 3] >= 0)
        assert np.all((s.data[:, 2] >= -math.pi) & (s.data[:, 2] < math.pi))


def test_vortex_is_deterministic_under_seed(tmp_path):
    a = generate_vortex_sequence(VortexConfig(seed=11))
    b = generate_vortex_sequence(VortexConfig(seed=11))
    export_sequence(a, tmp_path / "a.csv")
    export_sequence(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert generate_vortex_sequence(VortexConfig(seed=12)).steps[0] != a.steps[0]


def test_vortex_radii_non_decreasing():
    rs, _, _ = generate_vortex_trajectories(VortexConfig(seed=5))
    assert np.all(np.diff(rs, axis=0) >= 0)


def test_observed_samples_match_particle_velocity():
    cfg = VortexConfig(seed=2, n_steps=3)
    seq = generate_vortex_sequence(cfg)
    for x, y, psi, rho in seq[2].data:
        v = particle_velocity(ParticleState(math.hypot(x, y), math.atan2(y, x)))
        assert v.rho == pytest.approx(rho, rel=1e-9)
        assert abs(wrap_angle(v.psi - psi)) < 1e-9


@pytest.mark.parametrize("bad", [
    dict(n_particles=5, n_observed_per_step=10),
    dict(dt=0.0),
    dict(domain_radius=0.0),
    dict(n_observed_per_step=0),
])
def test_vortex_config_errors(bad):
    with pytest.raises(ConfigError):
        generate_vortex_sequence(VortexConfig(**bad))


def test_constant_field():
    seq = generate_constant_field_sequence(Velocity(0, 1), n_steps=5, n_per_step=7, seed=1)
    data = np.concatenate([s.data for s in seq])
    assert data.shape == (35, 4)
    assert np.all(data[:, 2] == 0) and np.all(data[:, 3] == 1)
    again = generate_constant_field_sequence(Velocity(0, 1), n_steps=5, n_per_step=7, seed=1)
    assert all(a == b for a, b in zip(seq, again))


def test_sequence_file_round_trip(tmp_path):
    seq = generate_vortex_sequence(VortexConfig(seed=4, n_steps=4))
    path = tmp_path / "seq.csv"
    export_sequence(seq, path)
    assert path.read_text().splitlines()[1] == "t,x,y,psi,rho"
    back = import_sequence(path)
    assert back.dt == seq.dt
    assert all(a == b for a, b in zip(seq, back))
