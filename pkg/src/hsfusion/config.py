"""Run configuration: presets, flat ``key = value`` files and overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PRESETS = {
    # architecture as published
    "paper": dict(image_size=(256, 256), base_ch=64, unet_depth=7, frb_reduction=64,
                  epochs_cgfe=400, epochs_fusion=400),
    # CPU desk scale; every mechanism kept, widths and depth reduced
    "toy": dict(image_size=(128, 128), base_ch=16, unet_depth=3, frb_reduction=4,
                epochs_cgfe=50, epochs_fusion=50, batch_size=1),
}


@dataclass
class RunConfig:
    preset: str = "toy"
    data_root: str = "data"
    out_dir: str = "runs"
    seed: int = 0

    image_size: tuple = (128, 128)
    base_ch: int = 16
    unet_depth: int = 3
    n_blocks: int = 7
    d_layers: int = 3
    frb_reduction: int = 4

    lambda_sere: float = 80.0
    cycle_weight: float = 10.0
    reverse_cycle: bool = False
    ohem_thresh: float = 0.7
    ohem_min_divisor: int = 16

    mu: float = 100.0
    rho: float = 50.0
    eta: float = 40.0
    omega0: float = 0.5
    gamma0: float = 0.5

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.0
    lr_linear_decay: bool = False
    batch_size: int = 4
    epochs_cgfe: int = 50
    epochs_fusion: int = 50

    hflip: bool = False
    crop: bool = False

    n_train: int = 20
    n_test: int = 5

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "RunConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = cls(preset=preset, **PRESETS[preset])
        return cfg.replace(**overrides) if overrides else cfg

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        positive = ("base_ch", "unet_depth", "d_layers", "frb_reduction", "lr", "batch_size",
                    "ohem_min_divisor")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        # loss weights may be switched off, never negative
        for name in ("lambda_sere", "cycle_weight", "mu", "rho", "eta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("n_blocks", "epochs_cgfe", "epochs_fusion", "weight_decay",
                     "n_train", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.ohem_thresh <= 1:
            raise ConfigError("ohem_thresh must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        h, w = self.image_size
        stride = max(2 ** self.unet_depth, 4)
        if h % stride or w % stride:
            raise ConfigError(f"image size {h}x{w} incompatible with stride {stride}")
        tap_ch = 2 * (2 * self.base_ch) + 2 * (4 * self.base_ch) + self.base_ch
        if tap_ch % self.frb_reduction:
            raise ConfigError(f"tap channel total {tap_ch} not divisible by frb_reduction "
                              f"{self.frb_reduction}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls().replace(**d)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = raw.lower().replace(",", "x").split("x")
            vals = tuple(int(p) for p in parts if p.strip())
            return vals * 2 if len(vals) == 1 else vals
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_pairs(items) -> dict:
    """Parse ``key = value`` strings against RunConfig's field types."""
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key = value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw, getattr(defaults, key))
    return out


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the config file, then explicit overrides."""
    file_vals = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        file_vals = parse_pairs([ln for ln in lines if ln])
    overrides = dict(overrides or {})
    chosen = preset or overrides.pop("preset", None) or file_vals.pop("preset", "toy")
    overrides.pop("preset", None)
    file_vals.pop("preset", None)
    cfg = RunConfig.for_preset(chosen)
    return cfg.replace(**{**file_vals, **overrides})
