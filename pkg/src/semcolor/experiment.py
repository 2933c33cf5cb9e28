"""Seeded desk-scale end-to-end run: data -> VAE -> decoder -> CDM -> evaluation.

``run_toy`` writes everything under one work directory and returns (and
stores as ``results.json``) the measurements the acceptance suite checks.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .colorspace import rgb_to_lab, write_png
from .config import RunConfig, load_config
from .data import PALETTE, Sample, images_to_tensor, load_folder, save_dataset, synth_shapes, tensor_to_images
from .diffusion import SamplerConfig
from .guidance import GuidanceConfig
from .metrics import colorfulness, gray_fidelity, psnr
from .pipeline import Colorizer
from .train import run_cdm, run_decoder, run_vae

log = logging.getLogger(__name__)

TRAIN_SEED, VAL_SEED = 7, 8
N_TRAIN, N_VAL = 512, 128

_PALETTE_NAMES = list(PALETTE)
_PALETTE_LAB = np.stack([rgb_to_lab(np.array([[c]], dtype=np.uint8)).stack()[0, 0] for c in PALETTE.values()])


def dominant_palette_color(img: np.ndarray, mask: np.ndarray) -> str:
    """Most frequent nearest-palette colour (CIELAB distance) over the masked pixels."""
    lab = rgb_to_lab(img).stack()[mask.astype(bool)]
    d = ((lab[:, None, :] - _PALETTE_LAB[None]) ** 2).sum(-1)
    counts = np.bincount(d.argmin(1), minlength=len(_PALETTE_NAMES))
    return _PALETTE_NAMES[int(counts.argmax())]


def label_color(label: str) -> str:
    return label.split()[0]


def color_match_rate(outputs: list[np.ndarray], samples: list[Sample]) -> float:
    hits = [dominant_palette_color(o, s.instances[0].mask) == label_color(s.instances[0].label) for o, s in zip(outputs, samples)]
    return float(np.mean(hits)) if hits else float("nan")


def toy_config(work: str | Path, config_path: str | Path | None = None) -> RunConfig:
    work = Path(work)
    return load_config(
        config_path,
        {
            "data_dir": str(work / "data" / "train"),
            "val_dir": str(work / "data" / "val"),
            "ckpt_dir": str(work / "checkpoints"),
            "out_dir": str(work / "outputs"),
        },
    )


def prepare_data(cfg: RunConfig) -> None:
    for folder, seed, n in ((cfg.data_dir, TRAIN_SEED, N_TRAIN), (cfg.val_dir, VAL_SEED, N_VAL)):
        if not (Path(folder) / "manifest.json").is_file():
            save_dataset(synth_shapes(seed, n, cfg.image_size), folder, seed)


_PATH_KEYS = ("data_dir", "val_dir", "ckpt_dir", "out_dir")


def fingerprint(cfg: RunConfig) -> dict:
    """Effective configuration without the work-directory paths."""
    return {k: v for k, v in cfg.to_dict().items() if k not in _PATH_KEYS}


def train_all(cfg: RunConfig, force: bool = False) -> dict[str, float]:
    """Train missing stages; wall-clock seconds per stage persist in ``timings.json``."""
    ckpt = Path(cfg.ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    tpath = ckpt / "timings.json"
    timings = json.loads(tpath.read_text()) if tpath.is_file() else {}
    for stage, fn in (("vae", run_vae), ("decoder", run_decoder), ("cdm", run_cdm)):
        if force or not (ckpt / f"{stage}_log.json").is_file():
            start = time.time()
            fn(cfg)
            timings[stage] = time.time() - start
            tpath.write_text(json.dumps(timings, indent=2, sort_keys=True))
            log.info("stage %s done in %.0f s", stage, timings[stage])
    return timings


def evaluate_toy(cfg: RunConfig) -> dict:
    ckpt = Path(cfg.ckpt_dir)
    colorizer = Colorizer.from_dir(ckpt, cfg.T_train)
    ae = colorizer.ae
    val = load_folder(cfg.val_dir, cfg.image_size)
    grays = [s.gray for s in val]
    priors = [s.priors for s in val]
    x = images_to_tensor([s.image for s in val])
    g = images_to_tensor([s.gray.rgb_replicated for s in val])

    res: dict = {}
    with torch.no_grad():
        z = ae.encode(x)
        recon_base = tensor_to_images(ae.decode_baseline(z))
        recon_lum = tensor_to_images(ae.decode_luminance_aware(z, g))
    res["vae_recon_psnr_median"] = float(np.median([psnr(r, s.image) for r, s in zip(recon_base, val)]))
    res["recon_gray_fidelity_baseline_median"] = float(np.median([gray_fidelity(r, s.gray) for r, s in zip(recon_base, val)]))
    res["recon_gray_fidelity_lum_median"] = float(np.median([gray_fidelity(r, s.gray) for r, s in zip(recon_lum, val)]))

    cdm_log = json.loads((ckpt / "cdm_log.json").read_text())
    vals = [h["val_loss"] for h in cdm_log if "val_loss" in h]
    res["cdm_val_loss_init"], res["cdm_val_loss_final"] = vals[0], vals[-1]
    res["cdm_val_loss_drop"] = 1.0 - vals[-1] / vals[0]

    guidance = GuidanceConfig(cfg.strength, cfg.steps_T, cfg.cfg_scale)
    sampler = SamplerConfig(cfg.steps_T, cfg.eta, cfg.effective_seed)
    out_lum, out_base, out_off = [], [], []
    bs = 32
    for k, start in enumerate(range(0, len(val), bs)):
        gb, pb = grays[start : start + bs], priors[start : start + bs]
        s = SamplerConfig(sampler.steps, sampler.eta, sampler.seed + k)
        z_on = colorizer.sample_latents(gb, pb, guidance, s)
        out_lum += colorizer.decode(z_on, gb, luminance_aware=True)
        out_base += colorizer.decode(z_on, gb, luminance_aware=False)
        z_off = colorizer.sample_latents(gb, pb, guidance, s, use_caption=False, use_segmentation=False)
        out_off += colorizer.decode(z_off, gb, luminance_aware=True)

    res["gray_fidelity_lum_median"] = float(np.median([gray_fidelity(o, gi) for o, gi in zip(out_lum, grays)]))
    res["gray_fidelity_baseline_median"] = float(np.median([gray_fidelity(o, gi) for o, gi in zip(out_base, grays)]))
    res["colorfulness_outputs_mean"] = float(np.mean([colorfulness(o) for o in out_lum]))
    res["colorfulness_truth_mean"] = float(np.mean([colorfulness(s.image) for s in val]))
    res["colorfulness_ratio"] = res["colorfulness_outputs_mean"] / res["colorfulness_truth_mean"]

    single = [i for i, s in enumerate(val) if len(s.instances) == 1]
    res["single_instance_count"] = len(single)
    res["match_rate_on"] = color_match_rate([out_lum[i] for i in single], [val[i] for i in single])
    res["match_rate_off"] = color_match_rate([out_off[i] for i in single], [val[i] for i in single])

    out_dir = Path(cfg.out_dir)
    for s, a, b in zip(val, out_lum, out_off):
        write_png(out_dir / "guided" / f"{s.name}.png", a)
        write_png(out_dir / "unguided" / f"{s.name}.png", b)
    return res


def run_toy(work: str | Path, config_path: str | Path | None = None, force: bool = False) -> dict:
    cfg = toy_config(work, config_path)
    prepare_data(cfg)
    timings = train_all(cfg, force)
    start = time.time()
    res = evaluate_toy(cfg)
    timings["evaluate"] = time.time() - start
    res["timings"] = timings
    res["config"] = fingerprint(cfg)
    path = Path(work) / "results.json"
    path.write_text(json.dumps(res, indent=2, sort_keys=True))
    return res


def cached_toy(work: str | Path, config_path: str | Path | None = None) -> dict:
    """Results of a previous ``run_toy`` with the same configuration, else run it."""
    path = Path(work) / "results.json"
    if path.is_file():
        res = json.loads(path.read_text())
        if res.get("config") == fingerprint(toy_config(work, config_path)):
            return res
    return run_toy(work, config_path)


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser()
    ap.add_argument("work")
    ap.add_argument("--config")
    ap.add_argument("--force", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    print(json.dumps(run_toy(a.work, a.config, a.force), indent=2))
