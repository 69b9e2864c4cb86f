"""Generator pipeline: encoder, identity-injection blocks, decoder.

The encoder downsamples the target image to a feature map, a stack of residual
blocks renormalizes those features with scales and shifts predicted from the
source identity vector, and the decoder restores an image. The final tanh keeps
every output inside [-1, 1].
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ENCODER_DEPTH, TrainConfig, derive_seed, fork_seeded

LEAKY_SLOPE = 0.2
ADAIN_EPS = 1e-5


def adain(fea: torch.Tensor, sigma_s: torch.Tensor, mu_s: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalize each channel's spatial statistics to a conditioned scale and shift.

    Statistics are per (sample, channel) over spatial positions, with the
    population standard deviation; eps is added to the std, so a constant
    channel maps to exactly mu_s.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    single = fea.dim() == 3
    if single:
        fea = fea.unsqueeze(0)
    if fea.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) features, got {tuple(fea.shape)}")
    channels = fea.shape[1]
    sigma_s = sigma_s.unsqueeze(0) if sigma_s.dim() == 1 else sigma_s
    mu_s = mu_s.unsqueeze(0) if mu_s.dim() == 1 else mu_s
    if sigma_s.shape[-1] != channels or mu_s.shape[-1] != channels:
        raise ValueError(
            f"scale/shift length ({sigma_s.shape[-1]}, {mu_s.shape[-1]}) != channel count {channels}"
        )
    mean = fea.mean(dim=(2, 3), keepdim=True)
    std = fea.var(dim=(2, 3), keepdim=True, correction=0).sqrt()
    out = sigma_s[..., None, None] * (fea - mean) / (std + eps) + mu_s[..., None, None]
    return out.squeeze(0) if single else out


class IdBlock(nn.Module):
    """Residual block whose two normalizations are conditioned on an identity vector.

    Each conditioning site has its own linear head mapping the identity vector
    to per-channel (scale, shift). Scale biases start at 1 so an untrained block
    is near the identity map.
    """

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.head1 = nn.Linear(embed_dim, 2 * channels)
        self.head2 = nn.Linear(embed_dim, 2 * channels)
        self.channels = channels
        with torch.no_grad():
            self.head1.bias[:channels] = 1.0
            self.head1.bias[channels:] = 0.0
            self.head2.bias[:channels] = 1.0
            self.head2.bias[channels:] = 0.0

    def _styles(self, head: nn.Linear, v: torch.Tensor, batch: int):
        if v.dim() == 1:
            v = v.unsqueeze(0)
        if v.shape[0] == 1 and batch > 1:
            v = v.expand(batch, -1)
        sigma, mu = head(v).chunk(2, dim=1)
        return sigma, mu

    def forward(self, fea: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        single = fea.dim() == 3
        if single:
            fea = fea.unsqueeze(0)
        sigma1, mu1 = self._styles(self.head1, v, fea.shape[0])
        h = F.leaky_relu(adain(fea, sigma1, mu1), LEAKY_SLOPE)
        h = self.conv1(h)
        sigma2, mu2 = self._styles(self.head2, v, fea.shape[0])
        h = F.leaky_relu(adain(h, sigma2, mu2), LEAKY_SLOPE)
        h = self.conv2(h)
        out = fea + h
        return out.squeeze(0) if single else out


class Encoder(nn.Module):
    """Three stride-2 convs; channels 3 -> base -> 2*base -> 4*base."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        b = base_channels
        self.convs = nn.ModuleList(
            [nn.Conv2d(3, b, 4, 2, 1), nn.Conv2d(b, 2 * b, 4, 2, 1), nn.Conv2d(2 * b, 4 * b, 4, 2, 1)]
        )
        self.out_channels = 4 * b

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        chunk = 2**ENCODER_DEPTH
        if h % chunk != 0 or w % chunk != 0:
            raise ValueError(f"image size {h}x{w} must be divisible by {chunk}")
        x = image
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        return x.squeeze(0) if single else x


class Decoder(nn.Module):
    """Mirror of the encoder: nearest-neighbor x2 upsampling + conv, tanh output."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        b = base_channels
        self.conv1 = nn.Conv2d(4 * b, 2 * b, 3, 1, 1)
        self.conv2 = nn.Conv2d(2 * b, b, 3, 1, 1)
        self.conv3 = nn.Conv2d(b, 3, 3, 1, 1)

    def forward(self, fea: torch.Tensor) -> torch.Tensor:
        single = fea.dim() == 3
        if single:
            fea = fea.unsqueeze(0)
        x = F.leaky_relu(self.conv1(F.interpolate(fea, scale_factor=2, mode="nearest")), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv2(F.interpolate(x, scale_factor=2, mode="nearest")), LEAKY_SLOPE)
        x = torch.tanh(self.conv3(F.interpolate(x, scale_factor=2, mode="nearest")))
        return x.squeeze(0) if single else x


class Generator(nn.Module):
    def __init__(self, n_id_blocks: int = 9, embed_dim: int = 64, base_channels: int = 64):
        super().__init__()
        if n_id_blocks < 1:
            raise ValueError("n_id_blocks must be >= 1")
        self.encoder = Encoder(base_channels)
        self.blocks = nn.ModuleList(
            IdBlock(self.encoder.out_channels, embed_dim) for _ in range(n_id_blocks)
        )
        self.decoder = Decoder(base_channels)
        self.embed_dim = embed_dim

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def inject(self, fea: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            fea = block(fea, v)
        return fea

    def decode(self, fea: torch.Tensor) -> torch.Tensor:
        return self.decoder(fea)

    def forward(self, target: torch.Tensor, v_source: torch.Tensor) -> torch.Tensor:
        return self.decode(self.inject(self.encode(target), v_source))


def generate(generator: Generator, embedder, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Swap: paint the source's identity onto the target image (inference path)."""
    with torch.no_grad():
        v = embedder(source)
        return generator(target, v)


def build_generator(cfg: TrainConfig, base_channels: int = 64) -> Generator:
    with fork_seeded(derive_seed(cfg.seed, "generator-init")):
        return Generator(
            n_id_blocks=cfg.n_id_blocks, embed_dim=cfg.embed_dim, base_channels=base_channels
        )
