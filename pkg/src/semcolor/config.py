"""Run configuration: JSON file + command-line overrides, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

SEED_ENV = "COLORIZER_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    val_dir: str | None = None
    ckpt_dir: str = "checkpoints"
    out_dir: str = "outputs"
    seed: int | None = None

    image_size: int = 64
    vae_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    latent_channels: int = 4
    unet_base: int = 64
    unet_mult: list[int] = field(default_factory=lambda: [1, 2, 2])
    unet_res_blocks: int = 2
    text_dim: int = 128
    text_len: int = 16

    T_train: int = 1000
    lr_vae: float = 5e-4
    lr_decoder: float = 1e-4
    lr_cdm: float = 5e-5
    lr_schedule_cdm: str = "constant"
    vae_epochs: int = 60
    decoder_epochs: int = 20
    cdm_steps: int = 20_000
    batch_vae: int = 16
    batch_decoder: int = 16
    batch_cdm: int = 16
    dropout_p: float = 0.05
    lambda_p: float = 0.1
    decoder_latent_noise: float = 1.0
    kl_weight: float = 1e-6
    ckpt_every: int = 1000

    cfg_scale: float = 3.0
    strength: float = 0.3
    steps_T: int = 50
    eta: float = 0.0
    luminance_lock: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError("dropout_p must be in [0, 1]")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError("strength must be in [0, 1]")
        if self.lambda_p < 0 or self.cfg_scale < 0 or self.eta < 0 or self.decoder_latent_noise < 0:
            raise ConfigError("lambda_p, cfg_scale, eta and decoder_latent_noise must be >= 0")
        if self.lr_schedule_cdm not in ("constant", "cosine"):
            raise ConfigError("lr_schedule_cdm must be 'constant' or 'cosine'")
        if not 1 <= self.steps_T <= self.T_train:
            raise ConfigError("steps_T must be in [1, T_train]")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        if len(self.vae_channels) != 3:
            raise ConfigError("vae_channels needs exactly three entries")
        for name in ("lr_vae", "lr_decoder", "lr_cdm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")

    @property
    def effective_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get(SEED_ENV, "0"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed"] = self.effective_seed
        return d

    def dump(self, directory: str | Path, name: str = "effective_config.json") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def _known() -> set[str]:
    return {f.name for f in fields(RunConfig)}


def from_dict(d: dict) -> RunConfig:
    unknown = set(d) - _known()
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- overrides (``None`` values in overrides are ignored)."""
    d: dict = {}
    if path is not None:
        with open(path) as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return from_dict(d)
