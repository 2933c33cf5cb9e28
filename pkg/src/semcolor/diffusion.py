"""Noise schedule, forward process, the epsilon-matching loss and DDIM sampling.

Timesteps are 1-indexed: ``t`` in ``[1, T_train]``, with ``t = 0`` meaning the
clean sample (alpha_bar_0 = 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, Sequence

import torch
import torch.nn.functional as F

if TYPE_CHECKING:
    from .guidance import GuidanceConfig
    from .priors import SemanticPriors
    from .unet import TextEmbedding


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int
    betas: torch.Tensor
    alphas_bar: torch.Tensor

    def abar(self, t) -> torch.Tensor:
        """alpha_bar at integer timestep(s) ``t``; 1 at ``t = 0``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t > self.T_train):
            raise ValueError(f"timestep out of range [0, {self.T_train}]")
        padded = torch.cat([torch.ones(1, dtype=self.alphas_bar.dtype), self.alphas_bar])
        return padded[t]


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 2:
        raise ValueError("T_train must be >= 2")
    betas = torch.linspace(beta_start, beta_end, T_train, dtype=torch.float64)
    return NoiseSchedule(T_train, betas, torch.cumprod(1.0 - betas, dim=0))


@dataclass
class TrainBatch:
    z0: torch.Tensor
    zc: torch.Tensor
    cond: list[str]

    def __post_init__(self):
        if self.z0.shape != self.zc.shape:
            raise ValueError(f"z0 {tuple(self.z0.shape)} and zc {tuple(self.zc.shape)} differ")
        if len(self.cond) != self.z0.shape[0]:
            raise ValueError("condition count does not match batch size")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


class NoisePredictor(Protocol):
    def predict_noise(self, z_t, t, z_c, cond: "TextEmbedding") -> torch.Tensor: ...

    def embed_text(self, texts: Sequence[str]) -> "TextEmbedding": ...


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if v.dtype != torch.bool:
        v = v.to(like.dtype)
    return v.view(-1, *([1] * (like.ndim - 1))) if v.ndim else v


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with ``t`` scalar or per-item."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > s.T_train):
        raise ValueError(f"t must be in [1, {s.T_train}]")
    if eps.shape != z0.shape:
        raise ValueError("eps must have the shape of z0")
    ab = _bcast(s.abar(t), z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def condition_dropout(n: int, p: float, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Independent per-item drop masks for (text condition, grayscale latent)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    u = torch.rand(2, n, generator=gen)
    return u[0] < p, u[1] < p


def denoise_loss(
    batch: TrainBatch,
    model: NoisePredictor,
    s: NoiseSchedule,
    dropout_p: float,
    rng: torch.Generator,
) -> torch.Tensor:
    """Mean squared error between the injected noise and the model's estimate."""
    n = batch.z0.shape[0]
    t = torch.randint(1, s.T_train + 1, (n,), generator=rng)
    eps = torch.randn(batch.z0.shape, generator=rng, dtype=batch.z0.dtype)
    drop_text, drop_zc = condition_dropout(n, dropout_p, rng)
    z_t = q_sample(batch.z0, t, eps, s)
    zc = torch.where(_bcast(drop_zc, batch.zc), torch.zeros_like(batch.zc), batch.zc)
    cond = model.embed_text(batch.cond).with_null(drop_text)
    pred = model.predict_noise(z_t, t, zc, cond)
    return F.mse_loss(pred, eps)


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    ab = _bcast(s.abar(t), z_t)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    if t <= t_prev:
        raise ValueError(f"t ({t}) must exceed t_prev ({t_prev})")
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat must have the shape of z_t")
    ab_t = _bcast(s.abar(t), z_t)
    ab_prev = _bcast(s.abar(t_prev), z_t)
    x0 = predict_x0(z_t, eps_hat, t, s)
    sigma = eta * ((1 - ab_prev) / (1 - ab_t)).sqrt() * (1 - ab_t / ab_prev).sqrt()
    z_prev = ab_prev.sqrt() * x0 + (1 - ab_prev - sigma**2).clamp(min=0).sqrt() * eps_hat
    if eta > 0:
        noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
        z_prev = z_prev + sigma * noise
    return z_prev


def ddim_timesteps(steps: int, T_train: int) -> list[int]:
    """Evenly spaced, descending training timesteps, ending above 0."""
    if not 1 <= steps <= T_train:
        raise ValueError(f"steps must be in [1, {T_train}]")
    return [round(k * T_train / steps) for k in range(steps, 0, -1)]


def cfg_predict(model: NoisePredictor, z_t, t, z_c, cond: "TextEmbedding", w: float) -> torch.Tensor:
    """Classifier-free guidance over the text condition.

    Written as (1 - w) * uncond + w * cond so that w = 0 and w = 1 return the
    unconditional and conditional predictions exactly.
    """
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    n = z_t.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(n)
    both = cond.cat(cond.null_like())
    out = model.predict_noise(torch.cat([z_t, z_t]), torch.cat([t, t]), torch.cat([z_c, z_c]), both)
    e_cond, e_uncond = out[:n], out[n:]
    return (1.0 - w) * e_uncond + w * e_cond


def ddim_sample(
    model: NoisePredictor,
    zc: torch.Tensor,
    cond: "TextEmbedding | None",
    cfg: SamplerConfig,
    guidance: "GuidanceConfig",
    priors: "Sequence[SemanticPriors] | None",
    schedule: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Run ``cfg.steps`` DDIM steps from seeded noise and return z_0.

    With ``priors`` (one per batch item) every step goes through the
    segmentation-guided step (``cond`` then defaults to the captions);
    otherwise plain CFG + DDIM with ``cond``.
    """
    from .guidance import guided_step, with_steps

    s = schedule or make_schedule()
    guidance = with_steps(guidance, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn(zc.shape, generator=gen, dtype=zc.dtype)
    ts = ddim_timesteps(cfg.steps, s.T_train)
    with torch.no_grad():
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            step_index = cfg.steps - k
            if priors is not None:
                z = guided_step(z, step_index, zc, priors, guidance, model, s, cond=cond, eta=cfg.eta, rng=gen)
            else:
                eps = cfg_predict(model, z, t, zc, cond, guidance.cfg_scale)
                z = ddim_step(z, eps, t, t_prev, s, cfg.eta, gen)
    return z
