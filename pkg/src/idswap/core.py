"""Shared configuration, tensor contracts and deterministic seeding."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np
import torch

#: Feature-matching layer selections: last layers, all layers, none, first layers.
FM_VARIANTS = ("wFM", "oFM", "nFM", "wFM_bar")

#: Downsampling depth of the generator encoder; image sides must divide 2**ENCODER_DEPTH.
ENCODER_DEPTH = 3

#: Layer count of each patch discriminator (4 downsampling convs + score conv).
DISC_LAYERS = 5


class ConfigError(ValueError):
    """A TrainConfig field violates one of its invariants."""


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run. Defaults are the desk-scale recipe."""

    lambda_id: float = 10.0
    lambda_recon: float = 10.0
    lambda_gp: float = 1e-5
    lambda_fm: float = 10.0
    fm_variant: str = "wFM"
    fm_start_layer: int = 4
    n_id_blocks: int = 9
    n_discriminators: int = 2
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    learning_rate: float = 2e-4
    batch_size: int = 4
    image_size: int = 64
    embed_dim: int = 64
    steps: int = 3000
    checkpoint_every: int = 1000
    seed: int = 0


_FIELD_TYPES = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Check every invariant; return the config unchanged or raise ConfigError."""
    for name in ("lambda_id", "lambda_recon", "lambda_gp", "lambda_fm"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg.fm_variant not in FM_VARIANTS:
        raise ConfigError(f"fm_variant must be one of {FM_VARIANTS}, got {cfg.fm_variant!r}")
    if not 1 <= cfg.fm_start_layer <= DISC_LAYERS:
        raise ConfigError(f"fm_start_layer out of range: must be in [1, {DISC_LAYERS}]")
    if cfg.fm_variant in ("wFM", "wFM_bar") and cfg.fm_start_layer < 2:
        raise ConfigError(f"fm_start_layer out of range: {cfg.fm_variant} requires m >= 2")
    if cfg.n_id_blocks < 1:
        raise ConfigError("n_id_blocks must be >= 1")
    if cfg.n_discriminators < 1:
        raise ConfigError("n_discriminators must be >= 1")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(f"{name} must be in [0, 1)")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    chunk = 2**ENCODER_DEPTH
    if cfg.image_size < 16 or cfg.image_size % chunk != 0:
        raise ConfigError(f"image_size must be >= 16 and a multiple of {chunk}")
    # The coarsest discriminator scale still needs 4 stride-2 convs to fit.
    if cfg.image_size // 2 ** (cfg.n_discriminators - 1) < 16:
        raise ConfigError("image_size too small for n_discriminators scales")
    if cfg.embed_dim < 2:
        raise ConfigError("embed_dim must be >= 2")
    if cfg.steps < 1:
        raise ConfigError("steps must be >= 1")
    if cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    return cfg


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg: TrainConfig) -> str:
    """Canonical `key = value` text; stable byte-for-byte for equal configs."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r}")
        typ = _FIELD_TYPES[key]
        try:
            values[key] = typ(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic stream; identical seeds give identical draws across processes."""
    return np.random.default_rng(seed)


def child_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Derived worker stream; distinct per worker_id, reproducible from (seed, worker_id)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, worker_id)))


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed for a named sub-stream (hash-based, build independent)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@contextmanager
def fork_seeded(seed: int):
    """Run a block under a private torch RNG seeded with `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def rng_state_blob(rng: np.random.Generator) -> np.ndarray:
    """Serialize the generator state to a uint8 array (for checkpoints)."""
    payload = json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def rng_from_blob(blob) -> np.random.Generator:
    state = json.loads(bytes(bytearray(np.asarray(blob, dtype=np.uint8))).decode("utf-8"))
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def validate_image(image: torch.Tensor, *, divisible_by: int = 1) -> torch.Tensor:
    """Check the image contract: float tensor, 3 channels, finite, range [-1, 1]."""
    if not torch.is_tensor(image) or not torch.is_floating_point(image):
        raise ValueError("image must be a floating-point tensor")
    if image.dim() == 3:
        c, h, w = image.shape
    elif image.dim() == 4:
        _, c, h, w = image.shape
    else:
        raise ValueError(f"expected (3, H, W) or (N, 3, H, W) image, got shape {tuple(image.shape)}")
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    if image.numel() == 0:
        raise ValueError("empty image tensor")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite entries")
    lo, hi = image.min().item(), image.max().item()
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"image values outside [-1, 1]: min {lo:.6g}, max {hi:.6g}")
    if h % divisible_by != 0 or w % divisible_by != 0:
        raise ValueError(f"image size {h}x{w} must be divisible by {divisible_by}")
    return image


def validate_identity(vector: torch.Tensor, *, dim: int | None = None) -> torch.Tensor:
    """Check the identity-vector contract: unit L2 norm within 1e-5."""
    if not torch.is_tensor(vector) or not torch.is_floating_point(vector):
        raise ValueError("identity vector must be a floating-point tensor")
    if vector.dim() not in (1, 2):
        raise ValueError(f"expected (d,) or (N, d) identity vector, got shape {tuple(vector.shape)}")
    if dim is not None and vector.shape[-1] != dim:
        raise ValueError(f"expected identity dimension {dim}, got {vector.shape[-1]}")
    norms = vector.norm(dim=-1)
    if not torch.isfinite(vector).all():
        raise ValueError("identity vector contains non-finite entries")
    if (norms - 1.0).abs().max().item() > 1e-5:
        raise ValueError("identity vector is not unit-norm within 1e-5")
    return vector


def normalize_identity(vector: torch.Tensor) -> torch.Tensor:
    """Rescale to unit L2 norm along the last axis."""
    return vector / vector.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def validate_feature(feature: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(feature) or not torch.isfinite(feature).all():
        raise ValueError("feature map must be a finite tensor")
    return feature
