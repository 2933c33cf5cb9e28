"""Grayscale -> color pipeline: encode, guided DDIM sampling, luminance-aware decode."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import checkpoint_exists, load_checkpoint
from .colorspace import GrayImage, luminance_lock
from .data import images_to_tensor, tensor_to_images
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, make_schedule
from .guidance import GuidanceConfig, caption_condition
from .priors import SemanticPriors
from .unet import ColorizationUNet
from .vae import Autoencoder

VAE_CKPT = "vae"
DECODER_CKPT = "decoder"
CDM_CKPT = "cdm"


class MissingCheckpoint(FileNotFoundError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"{stage} checkpoint required (looked for {path})")
        self.stage = stage


def load_autoencoder(ckpt_dir: str | Path, with_decoder: bool = True) -> Autoencoder:
    ckpt_dir = Path(ckpt_dir)
    if not checkpoint_exists(ckpt_dir / VAE_CKPT):
        raise MissingCheckpoint("vae", ckpt_dir / VAE_CKPT)
    state, meta = load_checkpoint(ckpt_dir / VAE_CKPT)
    if with_decoder:
        if not checkpoint_exists(ckpt_dir / DECODER_CKPT):
            raise MissingCheckpoint("decoder", ckpt_dir / DECODER_CKPT)
        dstate, _ = load_checkpoint(ckpt_dir / DECODER_CKPT)
        state = {**state, **{f"lum_decoder.{k}": v for k, v in dstate.items()}}
    return Autoencoder.from_state(state, meta)


def load_cdm(ckpt_dir: str | Path) -> ColorizationUNet:
    path = Path(ckpt_dir) / CDM_CKPT
    if not checkpoint_exists(path):
        raise MissingCheckpoint("cdm", path)
    state, meta = load_checkpoint(path)
    return ColorizationUNet.from_state(state, meta)


@dataclass
class Colorizer:
    ae: Autoencoder
    cdm: ColorizationUNet
    schedule: NoiseSchedule

    @classmethod
    def from_dir(cls, ckpt_dir: str | Path, T_train: int = 1000) -> "Colorizer":
        return cls(load_autoencoder(ckpt_dir), load_cdm(ckpt_dir), make_schedule(T_train))

    @torch.no_grad()
    def sample_latents(
        self,
        grays: Sequence[GrayImage],
        priors: Sequence[SemanticPriors],
        guidance: GuidanceConfig = GuidanceConfig(),
        sampler: SamplerConfig = SamplerConfig(),
        use_caption: bool = True,
        use_segmentation: bool = True,
    ) -> torch.Tensor:
        zc = self.ae.encode(images_to_tensor([g.rgb_replicated for g in grays]))
        if use_caption:
            cond = caption_condition(self.cdm, priors)
        else:
            cond = self.cdm.embed_text([""] * len(grays)).null_like()
        if use_segmentation:
            return ddim_sample(self.cdm, zc, cond, sampler, guidance, list(priors), self.schedule)
        return ddim_sample(self.cdm, zc, cond, sampler, guidance, None, self.schedule)

    @torch.no_grad()
    def decode(self, z: torch.Tensor, grays: Sequence[GrayImage], luminance_aware: bool = True) -> list[np.ndarray]:
        if luminance_aware:
            x = self.ae.decode_luminance_aware(z, images_to_tensor([g.rgb_replicated for g in grays]))
        else:
            x = self.ae.decode_baseline(z)
        return tensor_to_images(x)

    def colorize(
        self,
        grays: Sequence[GrayImage],
        priors: Sequence[SemanticPriors],
        guidance: GuidanceConfig = GuidanceConfig(),
        sampler: SamplerConfig = SamplerConfig(),
        use_caption: bool = True,
        use_segmentation: bool = True,
        lock_luminance: bool = False,
        luminance_aware: bool = True,
        batch_size: int = 32,
    ) -> list[np.ndarray]:
        """Colorize a list of grayscale images.

        Batches are sampled independently; the noise seed of batch ``k`` is
        ``sampler.seed + k`` so results do not depend on how many batches follow.
        """
        out: list[np.ndarray] = []
        for k, start in enumerate(range(0, len(grays), batch_size)):
            g = list(grays[start : start + batch_size])
            p = list(priors[start : start + batch_size])
            s = SamplerConfig(sampler.steps, sampler.eta, sampler.seed + k)
            z = self.sample_latents(g, p, guidance, s, use_caption, use_segmentation)
            imgs = self.decode(z, g, luminance_aware)
            if lock_luminance:
                imgs = [luminance_lock(im, gi) for im, gi in zip(imgs, g)]
            out.extend(imgs)
        return out
