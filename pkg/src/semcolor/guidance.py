"""Segmentation-guided denoising.

Every step computes the caption-conditioned update. For the first
``strength * T`` inference steps it also denoises each instance with its label
text and its masked grayscale latent, then pastes that result inside the mask.
Instances are pasted largest-first, so smaller objects win where masks overlap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F

from .diffusion import NoisePredictor, NoiseSchedule, cfg_predict, ddim_step, ddim_timesteps
from .priors import InstanceMask, SemanticPriors
from .unet import TextEmbedding

log = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class GuidanceConfig:
    strength: float = 0.3
    steps_T: int = 50
    cfg_scale: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must be in [0, 1]")
        if self.steps_T < 1:
            raise ValueError("steps_T must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")

    @property
    def threshold(self) -> float:
        return self.steps_T * (1.0 - self.strength)


def segmentation_active(t: int, cfg: GuidanceConfig) -> bool:
    """True for inference steps ``t`` (counting down from ``steps_T``) above the threshold."""
    if not 1 <= t <= cfg.steps_T:
        raise ValueError(f"t must be in [1, {cfg.steps_T}]")
    return t > cfg.threshold + _EPS


def active_steps(cfg: GuidanceConfig) -> set[int]:
    return {t for t in range(1, cfg.steps_T + 1) if segmentation_active(t, cfg)}


def resize_mask(m: InstanceMask | torch.Tensor, h: int, w: int) -> torch.Tensor | None:
    """Area-average the mask down to (1, h, w) and binarise at 0.5; None if it vanishes."""
    arr = m.mask if isinstance(m, InstanceMask) else m
    t = torch.as_tensor(arr, dtype=torch.float32)[None, None]
    small = F.adaptive_avg_pool2d(t, (h, w))[0]
    out = (small >= 0.5).to(torch.float32)
    if out.sum() == 0:
        label = m.label if isinstance(m, InstanceMask) else "<mask>"
        log.warning("instance %r vanishes at %dx%d latent resolution; skipped", label, h, w)
        return None
    return out


def caption_condition(model: NoisePredictor, priors: Sequence[SemanticPriors]) -> TextEmbedding:
    """Caption embeddings; items with an empty caption get the null condition."""
    emb = model.embed_text([p.caption for p in priors])
    return emb.with_null(torch.tensor([not p.caption for p in priors]))


def embed_text(text: str, model: NoisePredictor) -> TextEmbedding:
    return model.embed_text([text])


def _step_times(t: int, cfg: GuidanceConfig, s: NoiseSchedule) -> tuple[int, int]:
    ts = ddim_timesteps(cfg.steps_T, s.T_train)
    k = cfg.steps_T - t
    return ts[k], ts[k + 1] if k + 1 < len(ts) else 0


def guided_step(
    z_t: torch.Tensor,
    t: int,
    z_c: torch.Tensor,
    priors: Sequence[SemanticPriors],
    cfg: GuidanceConfig,
    model: NoisePredictor,
    schedule: NoiseSchedule,
    cond: TextEmbedding | None = None,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One denoising step at inference step ``t`` (``cfg.steps_T`` down to 1).

    ``priors`` holds one entry per batch item; ``cond`` defaults to the caption
    embeddings of those priors.
    """
    if len(priors) != z_t.shape[0]:
        raise ValueError(f"{len(priors)} priors for a batch of {z_t.shape[0]}")
    if cond is None:
        cond = caption_condition(model, priors)
    t_train, t_prev = _step_times(t, cfg, schedule)
    eps = cfg_predict(model, z_t, t_train, z_c, cond, cfg.cfg_scale)
    z_prev = ddim_step(z_t, eps, t_train, t_prev, schedule, eta, rng)
    if not segmentation_active(t, cfg):
        return z_prev

    h, w = z_t.shape[-2:]
    rows: list[tuple[int, torch.Tensor, str]] = []
    for b, p in enumerate(priors):
        for inst in sorted(p.instances, key=lambda m: -m.area):
            mask = resize_mask(inst, h, w)
            if mask is not None:
                rows.append((b, mask, inst.label))
    if not rows:
        return z_prev

    idx = torch.tensor([r[0] for r in rows])
    masks = torch.stack([r[1] for r in rows]).to(z_t.dtype)
    inst_cond = model.embed_text([r[2] for r in rows])
    inst_eps = cfg_predict(model, z_t[idx], t_train, z_c[idx] * masks, inst_cond, cfg.cfg_scale)
    inst_prev = ddim_step(z_t[idx], inst_eps, t_train, t_prev, schedule, eta, rng)

    out = z_prev.clone()
    for r, (b, mask, _) in enumerate(rows):
        out[b] = torch.where(mask.bool(), inst_prev[r], out[b])
    return out


def with_steps(cfg: GuidanceConfig, steps: int) -> GuidanceConfig:
    return cfg if cfg.steps_T == steps else replace(cfg, steps_T=steps)
