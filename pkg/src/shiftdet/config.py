"""Run configuration: one flat, documented key-value namespace.

The on-disk format is a plain text file of ``key = value`` lines
(``#`` starts a comment). Every key has a default; unknown keys are
rejected. The same object snapshot is embedded in checkpoints, and its
sha256 hash ties run directories to the checkpoints they produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass


@dataclass
class Config:
    # -- detector architecture --
    image_size: int = 96
    backbone_channels: tuple = (32, 64, 128)
    embed_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    num_queries: int = 20
    num_classes: int = 3
    decoder_layers: int = 3
    use_pos_encoding: bool = True
    dtype: str = "float32"

    # -- adaptation modules --
    grl_coeff: float = 1.0
    disc_hidden_dim: int = 64
    disc_share_backbone_heads: bool = False
    num_domain_queries: int = 1
    obj_mask_weight: float = 1.5
    target_conf_thresh: float = 0.5
    cons_detach_reference: bool = True

    # -- loss weights (total = det + l1*backbone + l2*encoder + l3*decoder + l4*consistency) --
    lambda1: float = 1.5
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    enable_lofa: bool = True
    enable_ssfa: bool = True
    enable_ifa: bool = True
    enable_cons: bool = True

    # -- optimization --
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 72
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if len(self.backbone_channels) != 3:
            raise ValueError("backbone_channels must have exactly 3 entries")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.num_domain_queries != 1:
            raise ValueError("num_domain_queries is fixed at 1")
        if self.grl_coeff < 0:
            raise ValueError("grl_coeff must be non-negative")
        if not 0.0 <= self.target_conf_thresh <= 1.0:
            raise ValueError("target_conf_thresh must lie in [0, 1]")
        if self.disc_share_backbone_heads and len(set(self.backbone_channels)) != 1:
            raise ValueError(
                "disc_share_backbone_heads requires equal backbone channel "
                f"counts, got {self.backbone_channels}"
            )

    @property
    def strides(self):
        return (8, 16, 32)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


# Keys that determine parameter shapes or the meaning of stored weights;
# a checkpoint whose snapshot disagrees on any of these cannot be loaded.
ARCH_KEYS = (
    "image_size",
    "backbone_channels",
    "embed_dim",
    "num_heads",
    "ffn_dim",
    "num_queries",
    "num_classes",
    "decoder_layers",
    "use_pos_encoding",
    "dtype",
    "disc_hidden_dim",
    "disc_share_backbone_heads",
    "num_domain_queries",
)


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(name, text):
    field = _FIELDS[name]
    text = text.strip()
    if field.type in ("int", int):
        return int(text)
    if field.type in ("float", float):
        return float(text)
    if field.type in ("bool", bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean {name} = {text!r}")
    if field.type in ("tuple", tuple):
        return tuple(int(part) for part in text.split(",") if part.strip())
    return text


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path):
    """Parse a flat key=value config file; unknown keys raise."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = _parse_value(key, value)
    return Config(**overrides)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(Config):
            fh.write(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n")


def config_from_dict(d):
    d = dict(d)
    if "backbone_channels" in d:
        d["backbone_channels"] = tuple(d["backbone_channels"])
    return Config(**d)


def config_hash(cfg):
    """Stable sha256 over the full configuration."""
    canon = "\n".join(
        f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(Config)
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def arch_snapshot(cfg):
    return {k: cfg.to_dict()[k] for k in ARCH_KEYS}
