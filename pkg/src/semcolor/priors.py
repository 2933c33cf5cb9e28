"""Semantic priors (categories, caption, instance masks) and their providers.

The desk-scale provider reads dataset annotations; anything implementing
:class:`PriorProvider` (e.g. an adapter around external captioning and
segmentation models) can stand in for it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from PIL import Image

from .colorspace import GrayImage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstanceMask:
    mask: np.ndarray
    label: str

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError("instance mask must be H x W")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("instance mask values must be 0 or 1")
        if m.sum() == 0:
            raise ValueError(f"instance {self.label!r} has an empty mask")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SemanticPriors:
    categories: list[str] = field(default_factory=list)
    caption: str = ""
    instances: list[InstanceMask] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.instances)

    @classmethod
    def empty(cls) -> "SemanticPriors":
        return cls()


class PriorProvider(Protocol):
    def __call__(self, gray: GrayImage, name: str | None = None) -> SemanticPriors | None: ...


class AnnotationProvider:
    """Looks priors up by image name; unknown names yield ``None``."""

    def __init__(self, annotations: Mapping[str, SemanticPriors]):
        self.annotations = dict(annotations)

    def __call__(self, gray: GrayImage, name: str | None = None) -> SemanticPriors | None:
        if name is None:
            return None
        return self.annotations.get(name)

    @classmethod
    def from_folder(cls, root: str | Path) -> "AnnotationProvider":
        root = Path(root)
        ann_dir = root / "annotations" if (root / "annotations").is_dir() else root
        found = {}
        for path in sorted(ann_dir.glob("*.json")):
            if path.name == "manifest.json":
                continue
            try:
                found[path.stem] = read_annotation(path, root)
            except (OSError, ValueError, KeyError) as exc:
                log.warning("skipping annotation %s: %s", path, exc)
        return cls(found)


def generate_priors(gray: GrayImage, source: PriorProvider | None, name: str | None = None) -> SemanticPriors:
    """Priors for ``gray``; a missing provider or annotation gives empty priors."""
    priors = source(gray, name) if source is not None else None
    if priors is None:
        return SemanticPriors.empty()
    for inst in priors.instances:
        if inst.mask.shape != gray.shape:
            raise ValueError(f"mask for {inst.label!r} is {inst.mask.shape}, image is {gray.shape}")
    return priors


def read_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def read_annotation(path: str | Path, root: str | Path | None = None) -> SemanticPriors:
    """Parse ``{caption, categories, instances: [{label, mask_png}]}``.

    ``mask_png`` paths are resolved against ``root`` (default: the JSON's folder).
    """
    path = Path(path)
    base = Path(root) if root is not None else path.parent
    with open(path) as fh:
        doc = json.load(fh)
    instances = []
    for inst in doc.get("instances", []):
        mask_path = Path(inst["mask_png"])
        if not mask_path.is_absolute():
            mask_path = base / mask_path
        instances.append(InstanceMask(read_mask_png(mask_path), inst["label"]))
    return SemanticPriors(list(doc.get("categories", [])), doc.get("caption", ""), instances)


def annotation_doc(priors: SemanticPriors, mask_paths: list[str]) -> dict:
    return {
        "caption": priors.caption,
        "categories": list(priors.categories),
        "instances": [{"label": inst.label, "mask_png": p} for inst, p in zip(priors.instances, mask_paths)],
    }
