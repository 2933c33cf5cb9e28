"""Synthetic annotated shapes dataset, folder ingestion and training batches."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .colorspace import GrayImage, extract_gray, read_png, write_png
from .priors import InstanceMask, SemanticPriors, annotation_doc, read_annotation, write_mask_png

log = logging.getLogger(__name__)

IMAGE_SIZE = 64

# Shape colours all sit at CIELAB L ~= 60, so the grayscale input shows where a
# shape is but not which colour it has.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (249, 90, 87),
    "orange": (218, 119, 26),
    "yellow": (163, 145, 27),
    "lime": (91, 162, 33),
    "green": (38, 164, 114),
    "teal": (40, 159, 167),
    "blue": (47, 151, 225),
    "purple": (148, 126, 250),
    "magenta": (230, 91, 192),
    "brown": (182, 135, 103),
}

# light backgrounds at L ~= 90, dark ones at L ~= 28
BACKGROUNDS: dict[str, tuple[int, int, int]] = {
    "cream": (243, 224, 192),
    "sky": (201, 230, 253),
    "rose": (255, 217, 227),
    "navy": (49, 63, 117),
    "forest": (28, 75, 44),
    "maroon": (113, 44, 41),
}

SHAPES = ("circle", "square", "triangle")


@dataclass
class Sample:
    name: str
    image: np.ndarray
    gray: GrayImage
    caption: str = ""
    categories: list[str] = field(default_factory=list)
    instances: list[InstanceMask] = field(default_factory=list)

    @property
    def priors(self) -> SemanticPriors:
        return SemanticPriors(list(self.categories), self.caption, list(self.instances))


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def label(self) -> str:
        return f"{self.color} {self.kind}"


def rasterize(spec: ShapeSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary mask of pixels whose centres fall inside the shape."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - spec.cx, ys - spec.cy
    if spec.kind == "circle":
        inside = dx * dx + dy * dy <= spec.size * spec.size
    elif spec.kind == "square":
        inside = (np.abs(dx) <= spec.size) & (np.abs(dy) <= spec.size)
    elif spec.kind == "triangle":
        angles = np.radians([-90.0, 30.0, 150.0])
        vx = spec.size * np.cos(angles)
        vy = spec.size * np.sin(angles)
        signs = []
        for k in range(3):
            x0, y0, x1, y1 = vx[k], vy[k], vx[(k + 1) % 3], vy[(k + 1) % 3]
            signs.append((x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0))
        inside = (signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)
    else:
        raise ValueError(f"unknown shape {spec.kind!r}")
    return inside.astype(np.uint8)


def caption_for(specs: Sequence[ShapeSpec]) -> str:
    return " and ".join(f"a {s.label}" for s in specs)


def render_sample(name: str, background: str, specs: Sequence[ShapeSpec], size: int = IMAGE_SIZE) -> Sample:
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUNDS[background]
    instances = []
    for spec in specs:
        mask = rasterize(spec, size)
        image[mask.astype(bool)] = PALETTE[spec.color]
        instances.append(InstanceMask(mask, spec.label))
    categories = list(dict.fromkeys(s.kind for s in specs))
    return Sample(name, image, extract_gray(image), caption_for(specs), categories, instances)


def _draw_specs(rng: np.random.Generator, size: int) -> list[ShapeSpec]:
    n_shapes = int(rng.integers(1, 4))
    colors = rng.choice(len(PALETTE), size=n_shapes, replace=False)
    names = list(PALETTE)
    specs: list[ShapeSpec] = []
    occupied = np.zeros((size, size), dtype=bool)
    for c in colors:
        for _ in range(100):
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            extent = float(rng.uniform(7.0, 13.0)) if kind != "triangle" else float(rng.uniform(9.0, 15.0))
            margin = extent + 1.0
            spec = ShapeSpec(
                kind,
                names[int(c)],
                float(rng.uniform(margin, size - margin)),
                float(rng.uniform(margin, size - margin)),
                extent,
            )
            mask = rasterize(spec, size).astype(bool)
            # keep a 2 px gap between shapes
            grown = np.zeros_like(mask)
            for oy in range(-2, 3):
                for ox in range(-2, 3):
                    grown |= np.roll(np.roll(mask, oy, axis=0), ox, axis=1)
            if not (grown & occupied).any():
                occupied |= mask
                specs.append(spec)
                break
    return specs


def synth_shapes(seed: int, n: int, size: int = IMAGE_SIZE) -> list[Sample]:
    """``n`` samples with 1-3 disjoint palette shapes each, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        background = list(BACKGROUNDS)[int(rng.integers(len(BACKGROUNDS)))]
        samples.append(render_sample(f"{idx:05d}", background, _draw_specs(rng, size), size))
    return samples


def save_dataset(samples: Sequence[Sample], root: str | Path, seed: int | None = None) -> None:
    root = Path(root)
    for sub in ("images", "masks", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(root / "images" / f"{s.name}.png", s.image)
        mask_paths = []
        for i, inst in enumerate(s.instances):
            rel = f"masks/{s.name}_{i}.png"
            write_mask_png(root / rel, inst.mask)
            mask_paths.append(rel)
        with open(root / "annotations" / f"{s.name}.json", "w") as fh:
            json.dump(annotation_doc(s.priors, mask_paths), fh, indent=2, sort_keys=True)
    manifest = {
        "seed": seed,
        "count": len(samples),
        "instances": sum(len(s.instances) for s in samples),
        "image_size": int(samples[0].image.shape[0]) if samples else None,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _center_square(im: Image.Image) -> Image.Image:
    w, h = im.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return im.crop((left, top, left + side, top + side))


def fit_image(img: np.ndarray, size: int) -> np.ndarray:
    im = _center_square(Image.fromarray(img, mode="RGB"))
    if im.size != (size, size):
        im = im.resize((size, size), Image.Resampling.BICUBIC)
    return np.asarray(im, dtype=np.uint8).copy()


def _fit_mask(mask: np.ndarray, size: int) -> np.ndarray:
    im = _center_square(Image.fromarray(mask.astype(np.uint8) * 255, mode="L"))
    if im.size != (size, size):
        im = im.resize((size, size), Image.Resampling.NEAREST)
    return (np.asarray(im) >= 128).astype(np.uint8)


def _annotation_path(root: Path, image_path: Path) -> Path | None:
    for cand in (root / "annotations" / f"{image_path.stem}.json", image_path.with_suffix(".json")):
        if cand.is_file():
            return cand
    return None


def load_folder(path: str | Path, size: int = IMAGE_SIZE) -> list[Sample]:
    """Read PNGs (``path/images/*.png`` or ``path/*.png``) plus optional sidecar annotations."""
    root = Path(path)
    img_dir = root / "images" if (root / "images").is_dir() else root
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        try:
            image = fit_image(read_png(img_path), size)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", img_path, exc)
            continue
        sample = Sample(img_path.stem, image, extract_gray(image))
        ann = _annotation_path(root, img_path)
        if ann is not None:
            priors = read_annotation(ann, root if ann.parent.name == "annotations" else ann.parent)
            sample.caption = priors.caption
            sample.categories = list(priors.categories)
            for inst in priors.instances:
                m = _fit_mask(inst.mask, size)
                if m.sum() == 0:
                    log.warning("instance %r of %s vanished after resizing", inst.label, img_path.name)
                    continue
                sample.instances.append(InstanceMask(m, inst.label))
        samples.append(sample)
    if not samples:
        raise ValueError(f"no readable PNG images in {root}")
    return samples


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """uint8 H x W x 3 images -> float (B, 3, H, W) in [-1, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).div(127.5).sub(1.0).contiguous()


def tensor_to_images(x: torch.Tensor) -> list[np.ndarray]:
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return [a.permute(1, 2, 0).cpu().numpy() for a in arr]


def training_text(sample: Sample) -> str:
    return sample.caption


def make_batches(
    dataset: Sequence[Sample],
    batch_size: int,
    seed: int,
    encoder,
    epochs: int | None = None,
    encode_batch: int = 64,
) -> Iterator["TrainBatch"]:
    """Yield encoded training batches, reshuffled every epoch.

    ``encoder`` maps a float image batch in [-1, 1] to latents. The whole set is
    encoded once up front since the encoder is frozen.
    """
    from .diffusion import TrainBatch

    z0, zc = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), encode_batch):
            chunk = dataset[start : start + encode_batch]
            z0.append(encoder(images_to_tensor([s.image for s in chunk])))
            zc.append(encoder(images_to_tensor([s.gray.rgb_replicated for s in chunk])))
    z0_all, zc_all = torch.cat(z0), torch.cat(zc)
    texts = [training_text(s) for s in dataset]
    epoch = 0
    while epochs is None or epoch < epochs:
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(order) - batch_size + 1 if len(order) >= batch_size else 1, batch_size):
            idx = order[start : start + batch_size]
            yield TrainBatch(z0_all[idx], zc_all[idx], [texts[i] for i in idx.tolist()])
        epoch += 1
