"""Training stages driven by a :class:`RunConfig`; each writes a checkpoint and a JSON log."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import torch

from .checkpoint import checkpoint_exists, save_checkpoint
from .config import RunConfig
from .data import images_to_tensor, load_folder, make_batches
from .diffusion import TrainBatch, make_schedule
from .pipeline import CDM_CKPT, DECODER_CKPT, VAE_CKPT, MissingCheckpoint, load_autoencoder
from .unet import CdmConfig, train_cdm
from .vae import VAEConfig, pretrain_vae, train_decoder

log = logging.getLogger(__name__)


def _write_log(ckpt_dir: Path, stage: str, history: list[dict]) -> Path:
    path = ckpt_dir / f"{stage}_log.json"
    path.write_text(json.dumps(history, indent=1))
    return path


def _image_tensors(cfg: RunConfig, folder: str) -> tuple[list, torch.Tensor, torch.Tensor]:
    data = load_folder(folder, cfg.image_size)
    return data, images_to_tensor([s.image for s in data]), images_to_tensor([s.gray.rgb_replicated for s in data])


def vae_config(cfg: RunConfig) -> VAEConfig:
    return VAEConfig(tuple(cfg.vae_channels), cfg.latent_channels)


def cdm_config(cfg: RunConfig) -> CdmConfig:
    n_levels = len(cfg.unet_mult)
    return CdmConfig(
        latent_channels=cfg.latent_channels,
        base=cfg.unet_base,
        mult=tuple(cfg.unet_mult),
        n_res=cfg.unet_res_blocks,
        attn_levels=tuple(range(1, n_levels)),
        text_dim=cfg.text_dim,
        text_len=cfg.text_len,
    )


def run_vae(cfg: RunConfig) -> Path:
    ckpt_dir = Path(cfg.ckpt_dir)
    _, images, grays = _image_tensors(cfg, cfg.data_dir)
    ae, history = pretrain_vae(
        images, grays, vae_config(cfg),
        epochs=cfg.vae_epochs, batch_size=cfg.batch_vae, lr=cfg.lr_vae,
        lambda_p=cfg.lambda_p, kl_weight=cfg.kl_weight, seed=cfg.effective_seed,
    )
    state = {k: v for k, v in ae.state_dict().items() if not k.startswith("lum_decoder.")}
    path = save_checkpoint(ckpt_dir / VAE_CKPT, state, {**ae.meta(), "encoder_checksum": ae.encoder_checksum()})
    _write_log(ckpt_dir, "vae", history)
    cfg.dump(ckpt_dir, "vae_config.json")
    return path


def run_decoder(cfg: RunConfig) -> Path:
    ckpt_dir = Path(cfg.ckpt_dir)
    ae = load_autoencoder(ckpt_dir, with_decoder=False)
    _, images, grays = _image_tensors(cfg, cfg.data_dir)
    history = train_decoder(
        ae, images, grays,
        epochs=cfg.decoder_epochs, batch_size=cfg.batch_decoder, lr=cfg.lr_decoder,
        lambda_p=cfg.lambda_p, seed=cfg.effective_seed, latent_noise=cfg.decoder_latent_noise,
    )
    path = save_checkpoint(
        ckpt_dir / DECODER_CKPT, ae.lum_decoder.state_dict(),
        {"encoder_checksum": ae.encoder_checksum(), "alpha": ae.lum_decoder.skips.alpha.tolist()},
    )
    _write_log(ckpt_dir, "decoder", history)
    cfg.dump(ckpt_dir, "decoder_config.json")
    return path


def encoded_batch(ae, samples, limit: int = 64) -> TrainBatch:
    samples = list(samples)[:limit]
    with torch.no_grad():
        z0 = ae.encode(images_to_tensor([s.image for s in samples]))
        zc = ae.encode(images_to_tensor([s.gray.rgb_replicated for s in samples]))
    return TrainBatch(z0, zc, [s.caption for s in samples])


def run_cdm(cfg: RunConfig) -> Path:
    ckpt_dir = Path(cfg.ckpt_dir)
    if not checkpoint_exists(ckpt_dir / VAE_CKPT):
        raise MissingCheckpoint("vae", ckpt_dir / VAE_CKPT)
    ae = load_autoencoder(ckpt_dir, with_decoder=False)
    data = load_folder(cfg.data_dir, cfg.image_size)
    seed = cfg.effective_seed
    batches = make_batches(data, cfg.batch_cdm, seed, ae.encode)
    val = encoded_batch(ae, load_folder(cfg.val_dir, cfg.image_size)) if cfg.val_dir else None
    _, history = train_cdm(
        batches, make_schedule(cfg.T_train),
        lr=cfg.lr_cdm, steps=cfg.cdm_steps, cfg=cdm_config(cfg), dropout_p=cfg.dropout_p,
        seed=seed, val_batch=val, ckpt_path=ckpt_dir / CDM_CKPT, ckpt_every=cfg.ckpt_every,
        lr_schedule=cfg.lr_schedule_cdm,
    )
    _write_log(ckpt_dir, "cdm", history)
    cfg.dump(ckpt_dir, "cdm_config.json")
    return (ckpt_dir / CDM_CKPT).with_suffix(".safetensors")


STAGES = {"vae": run_vae, "decoder": run_decoder, "cdm": run_cdm}
