"""Set-encoder variational model of motion fields, with an optional recurrent transition.

Two modes share the encoder and decoder:

``"vae"``
    every time step is encoded independently; the prior over the motion
    pattern ``m`` is a standard normal.
``"ssm"``
    a recurrent state-space model: a GRU carries a deterministic state ``h``
    driven by the previous motion pattern, a prior head predicts ``m`` from
    ``h`` and a posterior head additionally sees the encoded observation set.
"""

from __future__ import annotations

import dataclasses
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PSI, RHO, DiagonalGaussian, MotionSequence, MotionSet, gaussian_sample, wrap_tensor

MODES = ("vae", "ssm")


@dataclass
class ModelConfig:
    set_feature_dim: int = 256
    encoder_hidden_dim: int = 1024
    decoder_hidden_dim: int = 256
    deterministic_dim: int = 512
    stochastic_dim: int = 256
    # hidden width of the transition MLPs (m embedding, prior head)
    latent_dim: int = 256
    n_attention_heads: int = 4
    n_attention_layers: int = 2
    variance_floor: float = 1e-4

    def validate(self) -> "ModelConfig":
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "variance_floor":
                if not val > 0:
                    raise ValueError("variance_floor must be > 0")
            elif f.name == "n_attention_layers":
                if val < 0:
                    raise ValueError("n_attention_layers must be >= 0")
            elif val < 1:
                raise ValueError(f"{f.name} must be >= 1, got {val}")
        if self.set_feature_dim % self.n_attention_heads:
            raise ValueError("set_feature_dim must be divisible by n_attention_heads")
        return self

    @classmethod
    def miniature(cls, dim: int = 4, heads: int = 2, layers: int = 1) -> "ModelConfig":
        return cls(dim, dim, dim, dim, dim, dim, heads, layers)


@dataclass
class LatentState:
    h: torch.Tensor  # (B, deterministic_dim); width 0 in vae mode
    m: torch.Tensor  # (B, stochastic_dim)
    m_dist: DiagonalGaussian


def collate_sets(sets: Sequence[MotionSet], dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad sets to a common size: points ``(B, N, 4)`` and a boolean validity mask ``(B, N)``."""
    dtype = dtype or torch.get_default_dtype()
    n = max(1, max(len(s) for s in sets))
    points = torch.zeros(len(sets), n, 4, dtype=dtype)
    mask = torch.zeros(len(sets), n, dtype=torch.bool)
    for i, s in enumerate(sets):
        if len(s):
            points[i, : len(s)] = torch.as_tensor(s.data, dtype=dtype)
            mask[i, : len(s)] = True
    return points, mask


def collate_sequences(seqs: Sequence[MotionSequence], dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack equal-length sequences into ``(B, T, N, 4)`` points and a ``(B, T, N)`` mask."""
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValueError(f"sequences in a batch must share a length, got {sorted(lengths)}")
    (T,) = lengths
    flat = [step for s in seqs for step in s]
    points, mask = collate_sets(flat, dtype)
    return points.view(len(seqs), T, *points.shape[1:]), mask.view(len(seqs), T, -1)


class Normalizer(nn.Module):
    """Affine standardisation of positions and speeds, fitted once on training data."""

    def __init__(self):
        super().__init__()
        self.register_buffer("pos_mean", torch.zeros(2))
        self.register_buffer("pos_scale", torch.ones(2))
        self.register_buffer("speed_mean", torch.zeros(()))
        self.register_buffer("speed_scale", torch.ones(()))

    @torch.no_grad()
    def fit(self, seqs: Sequence[MotionSequence]):
        data = np.concatenate([s.data for seq in seqs for s in seq if len(s)])
        pos_std = data[:, :2].std(0)
        speed_std = data[:, RHO].std()
        self.pos_mean.copy_(torch.as_tensor(data[:, :2].mean(0)))
        self.pos_scale.copy_(torch.as_tensor(np.where(pos_std > 1e-6, pos_std, 1.0)))
        self.speed_mean.fill_(float(data[:, RHO].mean()))
        self.speed_scale.fill_(float(speed_std) if speed_std > 1e-6 else 1.0)
        return self

    def positions(self, xy: torch.Tensor) -> torch.Tensor:
        return (xy - self.pos_mean) / self.pos_scale

    def features(self, points: torch.Tensor) -> torch.Tensor:
        """(..., 4) raw x, y, psi, rho -> (..., 5) normalised x, y, cos psi, sin psi, rho."""
        psi = points[..., PSI]
        speed = (points[..., RHO] - self.speed_mean) / self.speed_scale
        return torch.cat([self.positions(points[..., :2]), torch.stack([psi.cos(), psi.sin(), speed], -1)], -1)


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ELU())
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    """MLP emitting a diagonal Gaussian; variances are softplus(raw) + floor."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, floor: float):
        super().__init__()
        self.net = mlp([in_dim, hidden, 2 * out_dim])
        self.floor = floor

    def forward(self, x: torch.Tensor) -> DiagonalGaussian:
        mean, raw = self.net(x).chunk(2, -1)
        return DiagonalGaussian(mean, F.softplus(raw) + self.floor)


class SetAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y, key_padding_mask=pad, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class SetEncoder(nn.Module):
    """Self-attention over the observations followed by a masked mean over the set."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.set_feature_dim
        self.embed = nn.Linear(5, d)
        self.blocks = nn.ModuleList(SetAttentionBlock(d, cfg.n_attention_heads)
                                    for _ in range(cfg.n_attention_layers))
        self.out_norm = nn.LayerNorm(d)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(-1).all()):
            raise ValueError("cannot encode an empty observation set")
        x = self.embed(feats)
        pad = ~mask
        for block in self.blocks:
            x = block(x, pad)
        w = mask.to(x.dtype).unsqueeze(-1)
        pooled = (x * w).sum(-2) / w.sum(-2)
        return self.out_norm(pooled)


class MapOfDynamics(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, mode: str = "ssm"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.cfg = (cfg or ModelConfig()).validate()
        self.mode = mode
        c = self.cfg
        self.normalizer = Normalizer()
        self.encoder = SetEncoder(c)
        self.decoder = mlp([2 + c.stochastic_dim, c.decoder_hidden_dim, c.decoder_hidden_dim, 4])
        if mode == "vae":
            self.posterior_head = GaussianHead(c.set_feature_dim, c.encoder_hidden_dim,
                                               c.stochastic_dim, c.variance_floor)
        else:
            self.m_embed = nn.Sequential(nn.Linear(c.stochastic_dim, c.latent_dim), nn.ELU())
            self.cell = nn.GRUCell(c.latent_dim, c.deterministic_dim)
            self.prior_head = GaussianHead(c.deterministic_dim, c.latent_dim, c.stochastic_dim, c.variance_floor)
            self.posterior_head = GaussianHead(c.deterministic_dim + c.set_feature_dim, c.encoder_hidden_dim,
                                               c.stochastic_dim, c.variance_floor)

    @property
    def dtype(self) -> torch.dtype:
        return self.normalizer.pos_mean.dtype

    # -- set level ---------------------------------------------------------

    def encode_points(self, points: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Batched set features: points (..., N, 4), mask (..., N) -> (..., set_feature_dim)."""
        if mask is None:
            mask = torch.ones(points.shape[:-1], dtype=torch.bool)
        lead = points.shape[:-2]
        feats = self.normalizer.features(points.reshape(-1, *points.shape[-2:]))
        z = self.encoder(feats, mask.reshape(-1, mask.shape[-1]))
        return z.view(*lead, -1)

    def encode_set(self, s: MotionSet) -> torch.Tensor:
        if len(s) == 0:
            raise ValueError("cannot encode an empty observation set")
        return self.encode_points(torch.as_tensor(s.data, dtype=self.dtype))

    def decode(self, positions, m: torch.Tensor) -> DiagonalGaussian:
        """Gaussian over (psi, rho) at each query position.

        ``positions`` is (..., N, 2) and ``m`` is (..., stochastic_dim); every
        position in a row shares that row's motion pattern.
        """
        positions = torch.as_tensor(positions, dtype=self.dtype)
        if m.dim() == positions.dim() - 1:
            m = m.unsqueeze(-2).expand(*positions.shape[:-1], m.shape[-1])
        out = self.decoder(torch.cat([self.normalizer.positions(positions), m], -1))
        psi, rho, raw_psi, raw_rho = out.unbind(-1)
        nz = self.normalizer
        mean = torch.stack([wrap_tensor(psi), nz.speed_mean + nz.speed_scale * rho], -1)
        var = torch.stack([F.softplus(raw_psi), F.softplus(raw_rho) * nz.speed_scale**2], -1)
        return DiagonalGaussian(mean, var + self.cfg.variance_floor)

    def posterior_vae(self, z: torch.Tensor) -> DiagonalGaussian:
        if self.mode != "vae":
            raise RuntimeError("posterior_vae is only defined in vae mode")
        return self.posterior_head(z)

    def prior_vae(self, batch_shape: Sequence[int] = ()) -> DiagonalGaussian:
        return DiagonalGaussian.standard(self.cfg.stochastic_dim, batch_shape, self.dtype)

    # -- recurrent transition ---------------------------------------------

    def initial_state(self, batch_size: int | None = None) -> LatentState:
        shape = () if batch_size is None else (batch_size,)
        h_dim = self.cfg.deterministic_dim if self.mode == "ssm" else 0
        h = torch.zeros(*shape, h_dim, dtype=self.dtype)
        m = torch.zeros(*shape, self.cfg.stochastic_dim, dtype=self.dtype)
        return LatentState(h, m, self.prior_vae(shape))

    def _require_ssm(self):
        if self.mode != "ssm":
            raise RuntimeError("transitions are only defined in ssm mode")

    def deterministic_step(self, prev: LatentState) -> torch.Tensor:
        self._require_ssm()
        x = self.m_embed(prev.m)
        if x.dim() == 1:
            return self.cell(x.unsqueeze(0), prev.h.unsqueeze(0)).squeeze(0)
        return self.cell(x, prev.h)

    def transition_prior(self, prev: LatentState) -> tuple[torch.Tensor, DiagonalGaussian]:
        h = self.deterministic_step(prev)
        return h, self.prior_head(h)

    def transition_posterior(self, prev: LatentState, set_next, mask: torch.Tensor | None = None
                             ) -> tuple[torch.Tensor, DiagonalGaussian]:
        """``set_next`` is a MotionSet or a raw point tensor (..., N, 4) with optional mask."""
        if isinstance(set_next, MotionSet):
            z = self.encode_set(set_next)
        else:
            z = self.encode_points(set_next, mask)
        h = self.deterministic_step(prev)
        return h, self.posterior_from_feature(h, z)

    def posterior_from_feature(self, h: torch.Tensor, z: torch.Tensor) -> DiagonalGaussian:
        self._require_ssm()
        return self.posterior_head(torch.cat([h, z], -1))

    def filter(self, points: torch.Tensor, mask: torch.Tensor, noise_mode: str = "mean",
               generator: torch.Generator | None = None, state: LatentState | None = None) -> list[LatentState]:
        """Run the posterior over (B, T, N, 4) observations; returns one state per step."""
        B, T = points.shape[:2]
        z = self.encode_points(points, mask)
        out = []
        if self.mode == "vae":
            for t in range(T):
                dist = self.posterior_head(z[:, t])
                m = self._draw(dist, noise_mode, generator)
                out.append(LatentState(torch.zeros(B, 0, dtype=self.dtype), m, dist))
            return out
        state = state or self.initial_state(B)
        for t in range(T):
            h = self.deterministic_step(state)
            dist = self.posterior_from_feature(h, z[:, t])
            state = LatentState(h, self._draw(dist, noise_mode, generator), dist)
            out.append(state)
        return out

    def rollout_prior(self, start: LatentState, horizon: int, noise_mode: str = "mean",
                      generator: torch.Generator | None = None) -> list[LatentState]:
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode == "vae":
            # no dynamics: the motion pattern is held fixed
            return [start] * horizon
        states, state = [], start
        for _ in range(horizon):
            h, dist = self.transition_prior(state)
            state = LatentState(h, self._draw(dist, noise_mode, generator), dist)
            states.append(state)
        return states

    @staticmethod
    def _draw(dist: DiagonalGaussian, noise_mode: str, generator) -> torch.Tensor:
        if noise_mode == "mean":
            return dist.mean
        if noise_mode == "sample":
            noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
            return gaussian_sample(dist, noise)
        raise ValueError(f"noise_mode must be 'mean' or 'sample', got {noise_mode!r}")


# -- checkpoints -------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def checkpoint_bytes(model: MapOfDynamics, extra: dict | None = None) -> bytes:
    meta = {"config": dataclasses.asdict(model.cfg), "mode": model.mode, **(extra or {})}
    payload = {"meta": json.dumps(meta, sort_keys=True),
               "weights": {k: v.detach().clone() for k, v in model.state_dict().items()}}
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_checkpoint(model: MapOfDynamics, path, extra: dict | None = None) -> Path:
    """Write config, mode and all weights (keyed by their module paths) to one archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[MapOfDynamics, dict]:
    """Rebuild a model from an archive; returns (model, meta).

    ``expect`` makes any config disagreement an error instead of trusting the file.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        meta = json.loads(payload["meta"])
        weights = payload["weights"]
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises several unrelated types for damaged archives
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    cfg = ModelConfig(**meta["config"])
    if expect is not None and dataclasses.asdict(expect) != dataclasses.asdict(cfg):
        diff = {k: (v, getattr(cfg, k)) for k, v in dataclasses.asdict(expect).items() if getattr(cfg, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, stored): {diff}")
    model = MapOfDynamics(cfg, meta["mode"])
    dtype = next(iter(weights.values())).dtype
    model.to(dtype)
    expected = model.state_dict()
    bad = [k for k in expected if k not in weights or expected[k].shape != weights[k].shape]
    if bad or set(weights) - set(expected):
        raise CheckpointError(f"{path}: weight names/shapes disagree with config: {bad[:5]}")
    model.load_state_dict(weights)
    return model.eval(), meta


def warn_outside_support(model: MapOfDynamics, xy: np.ndarray, n_std: float = 4.0):
    z = (np.asarray(xy) - model.normalizer.pos_mean.numpy()) / model.normalizer.pos_scale.numpy()
    if np.any(np.abs(z) > n_std):
        warnings.warn(f"query position(s) lie more than {n_std} std outside the training data", stacklevel=2)
