"""Latent autoencoder with a luminance-aware decoder.

The encoder has three stages (64, 32 and 16 px for a 64 px input, so the
latent is downsampled by 4). The luminance-aware decoder adds weighted,
convolved encoder features of the grayscale input to its upsample stages::

    f_up[j] <- f_up[j] + alpha[i] * conv_i(f_down[i])    (i, j) in (0,3), (1,2), (2,1)
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import state_checksum
from .layers import Downsample, ResBlock, Upsample, norm

log = logging.getLogger(__name__)

SKIP_PAIRS = ((0, 3), (1, 2), (2, 1))


@dataclass(frozen=True)
class VAEConfig:
    channels: tuple[int, int, int] = (16, 32, 64)
    latent_channels: int = 4

    @property
    def factor(self) -> int:
        return 4


@dataclass(frozen=True)
class DecoderLossConfig:
    lambda_p: float = 0.1

    def __post_init__(self):
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be >= 0")


class Encoder(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        c0, c1, c2 = cfg.channels
        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self.stages = nn.ModuleList([ResBlock(c0, c0), ResBlock(c0, c1), ResBlock(c1, c2)])
        self.downs = nn.ModuleList([Downsample(c0), Downsample(c1)])
        self.mid = ResBlock(c2, c2)
        self.norm_out = norm(c2)
        self.conv_out = nn.Conv2d(c2, 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        h = self.conv_in(x)
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.conv_out(F.silu(self.norm_out(self.mid(h))))
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0), feats


class LuminanceSkips(nn.Module):
    """1x1 convs and per-stage scalar weights for the grayscale skip features."""

    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.convs = nn.ModuleList([nn.Conv2d(c, c, 1) for c in cfg.channels])
        self.alpha = nn.Parameter(torch.zeros(3))

    def term(self, i: int, feat: torch.Tensor) -> torch.Tensor:
        return self.alpha[i] * self.convs[i](feat)


class Decoder(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        c0, c1, c2 = cfg.channels
        self.conv_in = nn.Conv2d(cfg.latent_channels, c2, 3, padding=1)
        self.mid = ResBlock(c2, c2)
        # upsample stages 1, 2, 3 run at 16, 32 and 64 px
        self.stages = nn.ModuleList([ResBlock(c2, c2), ResBlock(c2, c1), ResBlock(c1, c0)])
        self.ups = nn.ModuleList([Upsample(c2), Upsample(c1)])
        self.norm_out = norm(c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)
        self.skips: LuminanceSkips | None = None

    def forward(self, z: torch.Tensor, gray_feats: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
        if gray_feats is not None and self.skips is None:
            raise ValueError("decoder has no luminance skip connections")
        h = self.mid(self.conv_in(z))
        for j, stage in enumerate(self.stages, start=1):
            h = stage(h)
            if gray_feats is not None:
                i = 3 - j
                feat = gray_feats[i]
                if feat.shape[-2:] != h.shape[-2:]:
                    raise ValueError(f"skip {i} is {tuple(feat.shape[-2:])}, stage {j} is {tuple(h.shape[-2:])}")
                h = h + self.skips.term(i, feat)
            if j <= len(self.ups):
                h = self.ups[j - 1](h)
        return self.conv_out(F.silu(self.norm_out(h)))


class FeaturePyramid(nn.Module):
    """Fixed, seeded, randomly initialised 4-layer conv feature extractor.

    Stands in for a pretrained perceptual network; never trained.
    """

    def __init__(self, seed: int = 1234, widths: Sequence[int] = (16, 32, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for k, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled features of every layer, (B, sum(widths))."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self(x)], dim=1)


_PYRAMID: FeaturePyramid | None = None


def default_pyramid() -> FeaturePyramid:
    global _PYRAMID
    if _PYRAMID is None:
        _PYRAMID = FeaturePyramid()
    return _PYRAMID


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, pyramid: FeaturePyramid | None = None) -> torch.Tensor:
    pyramid = pyramid or default_pyramid()
    fp, ft = pyramid(pred), pyramid(target)
    return sum(F.mse_loss(a, b) for a, b in zip(fp, ft)) / len(fp)


def decoder_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    cfg: DecoderLossConfig = DecoderLossConfig(),
    pyramid: FeaturePyramid | None = None,
) -> torch.Tensor:
    """L2 + lambda_p * perceptual distance between float image batches."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    l2 = F.mse_loss(pred, target)
    if cfg.lambda_p == 0:
        return l2
    return l2 + cfg.lambda_p * perceptual_loss(pred, target, pyramid)


class Autoencoder(nn.Module):
    """Encoder, baseline decoder and (after decoder training) the luminance-aware decoder.

    Latents are the posterior mean times ``latent_scale``; decoders undo the scale.
    """

    def __init__(self, cfg: VAEConfig = VAEConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.lum_decoder: Decoder | None = None
        self.register_buffer("latent_scale", torch.ones(()))

    def _check(self, x: torch.Tensor) -> None:
        f = self.cfg.factor
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by {f}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        mean, _, _ = self.encoder(x)
        return mean * self.latent_scale

    def gray_features(self, gray: torch.Tensor) -> list[torch.Tensor]:
        self._check(gray)
        return self.encoder(gray)[2]

    def decode_baseline(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)

    def decode_luminance_aware(self, z: torch.Tensor, gray: torch.Tensor) -> torch.Tensor:
        if self.lum_decoder is None:
            raise RuntimeError("luminance-aware decoder has not been initialised")
        f = self.cfg.factor
        if gray.shape[-2:] != (z.shape[-2] * f, z.shape[-1] * f) or gray.shape[0] != z.shape[0]:
            raise ValueError(f"gray {tuple(gray.shape)} does not match latent {tuple(z.shape)}")
        with torch.no_grad():
            feats = self.gray_features(gray)
        return self.lum_decoder(z / self.latent_scale, feats)

    def init_luminance_decoder(self, seed: int = 0) -> Decoder:
        """Copy the baseline decoder and attach skips with alpha = 0."""
        torch.manual_seed(seed)
        dec = copy.deepcopy(self.decoder)
        dec.skips = LuminanceSkips(self.cfg)
        self.lum_decoder = dec
        return dec

    def encoder_checksum(self) -> str:
        return state_checksum(self.encoder.state_dict())

    def freeze_encoder(self) -> None:
        self.encoder.requires_grad_(False)

    def meta(self) -> dict:
        return {"vae_config": asdict(self.cfg)}

    @classmethod
    def from_state(cls, state: dict[str, torch.Tensor], meta: dict) -> "Autoencoder":
        raw = meta.get("vae_config", {})
        cfg = VAEConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        ae = cls(cfg)
        if any(k.startswith("lum_decoder.") for k in state):
            ae.init_luminance_decoder()
        ae.load_state_dict(state)
        ae.freeze_encoder()
        return ae.eval()


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def pretrain_vae(
    images: torch.Tensor,
    grays: torch.Tensor,
    cfg: VAEConfig = VAEConfig(),
    epochs: int = 60,
    batch_size: int = 16,
    lr: float = 5e-4,
    lambda_p: float = 0.1,
    kl_weight: float = 1e-6,
    gray_prob: float = 0.25,
    seed: int = 0,
    log_every: int = 20,
) -> tuple[Autoencoder, list[dict]]:
    """Train encoder + baseline decoder on color images (and some grayscale copies).

    ``images``/``grays`` are (N, 3, H, W) float tensors in [-1, 1]. Returns the
    model with its encoder frozen and ``latent_scale`` set to 1/std of the
    training latents.
    """
    torch.manual_seed(seed)
    ae = Autoencoder(cfg)
    params = list(ae.encoder.parameters()) + list(ae.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed + 1)
    loss_cfg = DecoderLossConfig(lambda_p)
    history = []
    step = 0
    ae.train()
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(images), batch_size, gen):
            use_gray = torch.rand(len(idx), generator=gen) < gray_prob
            x = torch.where(use_gray[:, None, None, None], grays[idx], images[idx])
            mean, logvar, _ = ae.encoder(x)
            z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
            recon = ae.decoder(z)
            kl = 0.5 * torch.mean(torch.sum(mean**2 + logvar.exp() - 1.0 - logvar, dim=(1, 2, 3)))
            loss = decoder_loss(recon, x, loss_cfg) + kl_weight * kl
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            losses.append(loss.item())
            if step % log_every == 0:
                history.append({"step": step, "epoch": epoch, "loss": losses[-1]})
                log.info("vae step %d epoch %d loss %.5f", step, epoch, losses[-1])
            step += 1
        history.append({"epoch": epoch, "epoch_loss": float(np.mean(losses))})
    ae.eval()
    with torch.no_grad():
        lat = torch.cat([ae.encoder(images[i : i + 64])[0] for i in range(0, len(images), 64)])
        ae.latent_scale.fill_(1.0 / float(lat.std()))
    ae.freeze_encoder()
    return ae, history


def train_decoder(
    ae: Autoencoder,
    images: torch.Tensor,
    grays: torch.Tensor,
    epochs: int = 20,
    batch_size: int = 16,
    lr: float = 1e-4,
    lambda_p: float = 0.1,
    seed: int = 0,
    log_every: int = 20,
    latent_noise: float = 0.0,
) -> list[dict]:
    """Fine-tune the luminance-aware decoder; the encoder stays bit-identical.

    With ``latent_noise > 0`` each latent gets Gaussian noise of standard
    deviation ``u * latent_noise`` (in units of the latent std, ``u ~ U(0, 1)``
    per sample). Sampled latents are never exact encodings; the noise teaches
    the decoder to take structure from the grayscale skips instead.

    Returns a history with per-step losses and per-epoch mean losses
    (``{"epoch": e, "epoch_loss": ...}``).
    """
    if ae is None or ae.encoder is None:
        raise ValueError("a pretrained encoder is required")
    before = ae.encoder_checksum()
    ae.freeze_encoder()
    if ae.lum_decoder is None:
        ae.init_luminance_decoder(seed)
    dec = ae.lum_decoder
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed + 2)
    loss_cfg = DecoderLossConfig(lambda_p)
    history = []
    step = 0
    ae.encoder.eval()
    dec.train()
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(images), batch_size, gen):
            with torch.no_grad():
                z = ae.encoder(images[idx])[0]
                feats = ae.encoder(grays[idx])[2]
                if latent_noise > 0:
                    u = torch.rand(len(idx), 1, 1, 1, generator=gen)
                    z = z + (latent_noise / ae.latent_scale) * u * torch.randn(z.shape, generator=gen)
            loss = decoder_loss(dec(z, feats), images[idx], loss_cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(dec.parameters(), 1.0)
            opt.step()
            losses.append(loss.item())
            if step % log_every == 0:
                history.append({"step": step, "epoch": epoch, "loss": losses[-1]})
            step += 1
        history.append({"epoch": epoch, "epoch_loss": float(np.mean(losses))})
        log.info("decoder epoch %d loss %.5f alpha %s", epoch, np.mean(losses), dec.skips.alpha.tolist())
    dec.eval()
    if ae.encoder_checksum() != before:
        raise RuntimeError("encoder weights changed during decoder training")
    return history
