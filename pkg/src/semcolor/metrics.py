"""Colorfulness, PSNR and Frechet distance, plus directory evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .colorspace import GrayImage, as_rgb, read_png, rgb_to_lab

log = logging.getLogger(__name__)

PSNR_CAP = 100.0

Embedder = Callable[[Sequence[np.ndarray]], np.ndarray]


def colorfulness(img) -> float:
    """Hasler-Suesstrunk colorfulness with population statistics."""
    rgb = as_rgb(img).astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    std = np.sqrt(rg.var() + yb.var())
    mean = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(std + 0.3 * mean)


def psnr(a, b, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


def gray_fidelity(img, gray: GrayImage) -> float:
    """PSNR between the lightness of ``img`` and ``gray.L`` (both on the 0-100 scale)."""
    return psnr(rgb_to_lab(img).L, gray.L, peak=100.0)


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((c + c.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of (C1 C2)^(1/2) is taken as the trace of (S C2 S)^(1/2) with
    S = C1^(1/2), which is symmetric PSD and shares its eigenvalues.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    c1, c2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    d = mu1.shape[0]
    if mu2.shape != (d,) or c1.shape != (d, d) or c2.shape != (d, d):
        raise ValueError("means and covariances must have matching dimensions")
    s1 = _sqrtm_psd(c1)
    cross = np.linalg.eigvalsh(s1 @ c2 @ s1)
    tr_sqrt = np.sqrt(np.clip(cross, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.cov(f, rowvar=False, bias=False).reshape(f.shape[1], f.shape[1])


def frechet_from_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_distance(*gaussian_stats(a), *gaussian_stats(b))


def pyramid_embedder() -> Embedder:
    """Pooled features of the fixed random conv pyramid used by the perceptual loss."""
    import torch

    from .data import images_to_tensor
    from .vae import default_pyramid

    pyr = default_pyramid()

    def embed(images: Sequence[np.ndarray]) -> np.ndarray:
        out = []
        with torch.no_grad():
            for start in range(0, len(images), 64):
                out.append(pyr.embed(images_to_tensor(images[start : start + 64])).double().numpy())
        return np.concatenate(out)

    return embed


@dataclass
class MetricReport:
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        width = max([len("name")] + [len(r["name"]) for r in self.per_image])
        lines = [f"{'name':<{width}}  {'colorfulness':>12}  {'psnr':>8}"]
        for r in self.per_image:
            lines.append(f"{r['name']:<{width}}  {r['colorfulness']:>12.4f}  {r['psnr']:>8.4f}")
        agg = self.aggregate
        lines.append(f"{'mean':<{width}}  {agg.get('mean_colorfulness', float('nan')):>12.4f}  {agg.get('mean_psnr', float('nan')):>8.4f}")
        if agg.get("frechet") is not None:
            lines.append(f"frechet distance: {agg['frechet']:.6f}")
        for name in self.excluded:
            lines.append(f"excluded: {name}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.txt").write_text(self.to_table())


def evaluate(pred_dir: str | Path, ref_dir: str | Path, embedder: Embedder | None = None) -> MetricReport:
    """Per-image colorfulness (predictions) and PSNR (prediction vs reference).

    Files present in only one directory are listed in ``excluded``.
    """
    pred = {p.name: p for p in sorted(Path(pred_dir).glob("*.png"))}
    ref = {p.name: p for p in sorted(Path(ref_dir).glob("*.png"))}
    report = MetricReport()
    report.excluded = sorted(set(pred) ^ set(ref))
    pred_imgs, ref_imgs = [], []
    for name in sorted(set(pred) & set(ref)):
        a, b = read_png(pred[name]), read_png(ref[name])
        if a.shape != b.shape:
            log.warning("%s: shape mismatch %s vs %s", name, a.shape, b.shape)
            report.excluded.append(name)
            continue
        report.per_image.append({"name": name, "colorfulness": colorfulness(a), "psnr": psnr(a, b)})
        pred_imgs.append(a)
        ref_imgs.append(b)
    report.excluded.sort()
    n = len(report.per_image)
    report.aggregate = {
        "count": n,
        "mean_colorfulness": float(np.mean([r["colorfulness"] for r in report.per_image])) if n else float("nan"),
        "mean_psnr": float(np.mean([r["psnr"] for r in report.per_image])) if n else float("nan"),
        "frechet": None,
    }
    if embedder is not None and n >= 2:
        report.aggregate["frechet"] = frechet_from_features(embedder(pred_imgs), embedder(ref_imgs))
    return report
