"""Multi-scale patch discriminators exposing per-layer features.

Each scale is an independent 5-layer network: four stride-2 convs and a final
1-channel conv that scores each receptive patch. Scale k sees the input
average-pooled down by 2**(k-1). No normalization layers: the gradient penalty
needs per-sample statistics left alone.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DISC_LAYERS, TrainConfig, derive_seed, fork_seeded

LEAKY_SLOPE = 0.2


class PatchDiscriminator(nn.Module):
    def __init__(self, base_channels: int = 64):
        super().__init__()
        b = base_channels
        self.down = nn.ModuleList(
            [
                nn.Conv2d(3, b, 4, 2, 1),
                nn.Conv2d(b, 2 * b, 4, 2, 1),
                nn.Conv2d(2 * b, 4 * b, 4, 2, 1),
                nn.Conv2d(4 * b, 8 * b, 4, 2, 1),
            ]
        )
        self.score = nn.Conv2d(8 * b, 1, 3, 1, 1)
        self.base_channels = base_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Score map plus the outputs of layers 1..5 (the score map is layer 5)."""
        features = []
        h = x
        for conv in self.down:
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            features.append(h)
        s = self.score(h)
        features.append(s)
        return s, features


class MultiScaleDiscriminator(nn.Module):
    """Independent patch networks; one per scale, no weight sharing."""

    def __init__(self, n_scales: int = 2, base_channels: int = 64):
        super().__init__()
        if n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        self.scales = nn.ModuleList(PatchDiscriminator(base_channels) for _ in range(n_scales))
        self.pool = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def downsample(self, image: torch.Tensor, scale_index: int) -> torch.Tensor:
        x = image
        for _ in range(scale_index - 1):
            x = self.pool(x)
        return x

    def forward_scale(self, image: torch.Tensor, scale_index: int):
        if not 1 <= scale_index <= self.n_scales:
            raise ValueError(f"scale_index must be in [1, {self.n_scales}], got {scale_index}")
        return self.scales[scale_index - 1](self.downsample(image, scale_index))

    def forward(self, image: torch.Tensor):
        """All scales: list of (score_map, features)."""
        return [self.forward_scale(image, k) for k in range(1, self.n_scales + 1)]


def disc_forward(disc: MultiScaleDiscriminator, image: torch.Tensor, scale_index: int):
    """Spec surface for one scale; the image is pooled down internally."""
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
    score, features = disc.forward_scale(image, scale_index)
    if single:
        score = score.squeeze(0)
        features = [f.squeeze(0) for f in features]
    return score, features


def _conv_out(size: int) -> int:
    # 4x4 kernel, stride 2, padding 1
    return (size + 2 - 4) // 2 + 1


def feature_count(disc: MultiScaleDiscriminator, layer: int, image_size: int) -> int:
    """Element count N_i of layer features at full resolution (per sample)."""
    if not 1 <= layer <= DISC_LAYERS:
        raise ValueError(f"layer must be in [1, {DISC_LAYERS}], got {layer}")
    b = disc.scales[0].base_channels
    channels = [b, 2 * b, 4 * b, 8 * b, 1]
    size = image_size
    for _ in range(min(layer, 4)):
        size = _conv_out(size)
    return channels[layer - 1] * size * size


def build_discriminator(cfg: TrainConfig, base_channels: int = 64) -> MultiScaleDiscriminator:
    with fork_seeded(derive_seed(cfg.seed, "discriminator-init")):
        return MultiScaleDiscriminator(n_scales=cfg.n_discriminators, base_channels=base_channels)
