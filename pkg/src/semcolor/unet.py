"""Colorization diffusion model: grayscale-latent input adapter, text encoder and U-Net."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .diffusion import NoiseSchedule, TrainBatch, denoise_loss
from .layers import CrossAttention, Downsample, ResBlock, Upsample, norm, timestep_embedding

log = logging.getLogger(__name__)

DEFAULT_VOCAB = (
    "a", "and",
    "circle", "square", "triangle",
    "red", "orange", "yellow", "lime", "green", "teal", "blue", "purple", "magenta", "brown",
    "cream", "sky", "rose", "navy", "forest", "maroon",
)


@dataclass(frozen=True)
class CdmConfig:
    latent_channels: int = 4
    base: int = 64
    mult: tuple[int, ...] = (1, 2, 2)
    n_res: int = 2
    attn_levels: tuple[int, ...] = (1, 2)
    text_dim: int = 128
    text_len: int = 16
    heads: int = 4
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    n_buckets: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "CdmConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TextEmbedding:
    """Token embeddings (B, L, d) plus a per-item flag selecting the learned null condition."""

    tokens: torch.Tensor
    is_null: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.tokens.ndim == 2:
            self.tokens = self.tokens[None]
        if self.is_null is None:
            self.is_null = torch.zeros(self.tokens.shape[0], dtype=torch.bool)
        if not torch.isfinite(self.tokens).all():
            raise ValueError("text embedding contains non-finite values")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def with_null(self, mask: torch.Tensor) -> "TextEmbedding":
        return TextEmbedding(self.tokens, self.is_null | mask.to(torch.bool))

    def null_like(self) -> "TextEmbedding":
        return TextEmbedding(self.tokens, torch.ones_like(self.is_null))

    def cat(self, other: "TextEmbedding") -> "TextEmbedding":
        return TextEmbedding(torch.cat([self.tokens, other.tokens]), torch.cat([self.is_null, other.is_null]))

    def index(self, idx) -> "TextEmbedding":
        return TextEmbedding(self.tokens[idx], self.is_null[idx])

    @classmethod
    def null(cls, n: int, length: int, dim: int) -> "TextEmbedding":
        return cls(torch.zeros(n, length, dim), torch.ones(n, dtype=torch.bool))


class TextEncoder(nn.Module):
    """Whitespace tokens -> trainable table (hash buckets for unknown words) + positions."""

    def __init__(self, vocab: Sequence[str], dim: int, length: int, n_buckets: int = 64):
        super().__init__()
        self.vocab = {w: i + 1 for i, w in enumerate(vocab)}
        self.n_buckets = n_buckets
        self.length = length
        self.table = nn.Embedding(len(vocab) + n_buckets + 1, dim)
        self.pos = nn.Parameter(torch.randn(length, dim) * 0.1)
        self.null = nn.Parameter(torch.randn(dim))

    def token_id(self, word: str) -> int:
        if word in self.vocab:
            return self.vocab[word]
        return len(self.vocab) + 1 + zlib.crc32(word.encode()) % self.n_buckets

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        ids = torch.zeros(len(texts), self.length, dtype=torch.long)
        for row, text in enumerate(texts):
            words = text.lower().split()[: self.length]
            ids[row, : len(words)] = torch.tensor([self.token_id(w) for w in words], dtype=torch.long)
        return ids

    def forward(self, texts: Sequence[str]) -> TextEmbedding:
        return TextEmbedding(self.table(self.tokenize(texts)) + self.pos)

    def resolve(self, cond: TextEmbedding) -> torch.Tensor:
        null = self.null.expand_as(cond.tokens)
        return torch.where(cond.is_null[:, None, None], null, cond.tokens)


class ColorizationUNet(nn.Module):
    def __init__(self, cfg: CdmConfig = CdmConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.latent_channels
        self.adapter = nn.Conv2d(2 * c, c, 1)
        with torch.no_grad():
            # z_t passes straight through; the z_c half starts at zero
            self.adapter.weight.zero_()
            self.adapter.weight[:, :c, 0, 0] = torch.eye(c)
            self.adapter.bias.zero_()
        self.text = TextEncoder(cfg.vocab, cfg.text_dim, cfg.text_len, cfg.n_buckets)
        temb = 4 * cfg.base
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(c, cfg.base, 3, padding=1)

        chans = [cfg.base * m for m in cfg.mult]
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = cfg.base
        for lvl, out in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.n_res):
                blocks.append(ResBlock(ch, out, temb))
                blocks.append(CrossAttention(out, cfg.text_dim, cfg.heads) if lvl in cfg.attn_levels else nn.Identity())
                ch = out
            self.down.append(blocks)
            self.downsample.append(Downsample(ch) if lvl < len(chans) - 1 else nn.Identity())

        self.mid1 = ResBlock(ch, ch, temb)
        self.mid_attn = CrossAttention(ch, cfg.text_dim, cfg.heads)
        self.mid2 = ResBlock(ch, ch, temb)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            out = chans[lvl]
            blocks = nn.ModuleList()
            for r in range(cfg.n_res):
                cin = ch + chans[lvl] if r == 0 else ch
                blocks.append(ResBlock(cin, out, temb))
                blocks.append(CrossAttention(out, cfg.text_dim, cfg.heads) if lvl in cfg.attn_levels else nn.Identity())
                ch = out
            self.up.append(blocks)
            self.upsample.append(Upsample(ch) if lvl > 0 else nn.Identity())

        self.norm_out = norm(ch)
        self.conv_out = nn.Conv2d(ch, c, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def input_adapter(self, z_t: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
        if z_t.shape != z_c.shape:
            raise ValueError(f"z_t {tuple(z_t.shape)} and z_c {tuple(z_c.shape)} differ")
        return self.adapter(torch.cat([z_t, z_c], dim=1))

    def embed_text(self, texts: Sequence[str]) -> TextEmbedding:
        return self.text(list(texts))

    @staticmethod
    def _run(blocks, h, temb, context):
        for block in blocks:
            if isinstance(block, ResBlock):
                h = block(h, temb)
            elif isinstance(block, CrossAttention):
                h = block(h, context)
        return h

    def predict_noise(self, z_t: torch.Tensor, t, z_c: torch.Tensor, cond: TextEmbedding) -> torch.Tensor:
        if not (torch.isfinite(z_t).all() and torch.isfinite(z_c).all()):
            raise ValueError("non-finite latent input")
        n = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(n)
        if len(cond) != n:
            raise ValueError(f"{len(cond)} conditions for a batch of {n}")
        context = self.text.resolve(cond)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base).to(z_t.dtype))

        h = self.conv_in(self.input_adapter(z_t, z_c))
        skips = []
        for blocks, down in zip(self.down, self.downsample):
            h = self._run(blocks, h, temb, context)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), context), temb)
        for blocks, up in zip(self.up, self.upsample):
            h = torch.cat([h, skips.pop()], dim=1)
            h = up(self._run(blocks, h, temb, context))
        return self.conv_out(F.silu(self.norm_out(h)))

    forward = predict_noise

    def meta(self) -> dict:
        return {"cdm_config": asdict(self.cfg)}

    @classmethod
    def from_state(cls, state: dict[str, torch.Tensor], meta: dict) -> "ColorizationUNet":
        model = cls(CdmConfig.from_dict(meta["cdm_config"]))
        model.load_state_dict(state)
        return model.eval()


@torch.no_grad()
def validation_loss(model: ColorizationUNet, batch: TrainBatch, s: NoiseSchedule, repeats: int = 4, seed: int = 12345) -> float:
    """Denoising loss on a fixed batch with fixed noise draws (no condition dropout)."""
    gen = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    total = sum(float(denoise_loss(batch, model, s, 0.0, gen)) for _ in range(repeats)) / repeats
    model.train(was_training)
    return total


def train_cdm(
    batches: Iterator[TrainBatch],
    s: NoiseSchedule,
    lr: float = 5e-5,
    steps: int = 20_000,
    cfg: CdmConfig = CdmConfig(),
    dropout_p: float = 0.05,
    seed: int = 0,
    val_batch: TrainBatch | None = None,
    log_every: int = 50,
    val_every: int = 500,
    ckpt_path: str | Path | None = None,
    ckpt_every: int = 1000,
    model: ColorizationUNet | None = None,
    lr_schedule: str = "constant",
) -> tuple[ColorizationUNet, list[dict]]:
    """``lr_schedule`` is ``"constant"`` or ``"cosine"`` (decay to 0 at ``steps``)."""
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr schedule {lr_schedule!r}")
    torch.manual_seed(seed)
    model = model or ColorizationUNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1.0 + math.cos(math.pi * k / steps)))
    else:
        sched = None
    gen = torch.Generator().manual_seed(seed + 3)
    history: list[dict] = []
    if val_batch is not None:
        history.append({"step": 0, "val_loss": validation_loss(model, val_batch, s)})
    model.train()
    for step in range(1, steps + 1):
        batch = next(batches)
        loss = denoise_loss(batch, model, s, dropout_p, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if sched is not None:
            sched.step()
        if step % log_every == 0 or step == 1:
            history.append({"step": step, "loss": loss.item()})
            log.info("cdm step %d loss %.5f", step, history[-1]["loss"])
        if val_batch is not None and (step % val_every == 0 or step == steps):
            history.append({"step": step, "val_loss": validation_loss(model, val_batch, s)})
            log.info("cdm step %d val_loss %.5f", step, history[-1]["val_loss"])
        if ckpt_path is not None and (step % ckpt_every == 0 or step == steps):
            save_checkpoint(ckpt_path, model.state_dict(), {**model.meta(), "step": step})
    model.eval()
    return model, history


def tiny_config(**overrides) -> CdmConfig:
    """Small configuration for gradient checks and smoke tests."""
    base = CdmConfig(latent_channels=2, base=8, mult=(1, 2), n_res=1, attn_levels=(1,), text_dim=8, text_len=4, heads=2, n_buckets=4)
    return replace(base, **overrides)
