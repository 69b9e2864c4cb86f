"""The five training loss terms and their weighted total.

Scalar reductions are means over elements, so values stay comparable across
image sizes. Feature-matching sums are accumulated in double precision so the
layer-range split (all layers = first part + last part) adds up exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .core import DISC_LAYERS, FM_VARIANTS, TrainConfig


@dataclass(frozen=True)
class FMVariant:
    """Feature-matching layer selection: which discriminator layers are aligned."""

    kind: str
    m: int = 4

    def __post_init__(self):
        if self.kind not in FM_VARIANTS:
            raise ValueError(f"fm variant must be one of {FM_VARIANTS}, got {self.kind!r}")

    def layer_range(self, n_layers: int) -> range:
        if self.kind == "nFM":
            return range(0)
        if self.kind == "oFM":
            return range(1, n_layers + 1)
        if not 2 <= self.m <= n_layers:
            raise ValueError(f"fm_start_layer out of range: need 2 <= m <= {n_layers}, got {self.m}")
        if self.kind == "wFM":
            return range(self.m, n_layers + 1)
        return range(1, self.m)  # wFM_bar: the first layers only


def variant_from_config(cfg: TrainConfig) -> FMVariant:
    return FMVariant(cfg.fm_variant, cfg.fm_start_layer)


def identity_loss(v_r: torch.Tensor, v_s: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity, averaged over the batch; in [0, 2]."""
    if v_r.shape != v_s.shape:
        raise ValueError(f"identity vector shapes differ: {tuple(v_r.shape)} vs {tuple(v_s.shape)}")
    if v_r.dim() == 1:
        v_r, v_s = v_r.unsqueeze(0), v_s.unsqueeze(0)
    norm_r = v_r.norm(dim=1)
    norm_s = v_s.norm(dim=1)
    if (norm_r == 0).any() or (norm_s == 0).any():
        raise ValueError("identity loss undefined for zero vectors")
    cos = (v_r * v_s).sum(dim=1) / (norm_r * norm_s)
    return (1.0 - cos).mean()


def reconstruction_loss(i_r: torch.Tensor, i_t: torch.Tensor, same_identity: bool) -> torch.Tensor:
    """Mean absolute difference for same-identity pairs; exactly 0 otherwise."""
    if i_r.shape != i_t.shape:
        raise ValueError(f"image shapes differ: {tuple(i_r.shape)} vs {tuple(i_t.shape)}")
    if not same_identity:
        return torch.zeros((), dtype=i_r.dtype, device=i_r.device)
    return (i_r - i_t).abs().mean()


def feature_matching_loss(
    feats_r: Sequence[torch.Tensor], feats_t: Sequence[torch.Tensor], variant: FMVariant
) -> torch.Tensor:
    """Per-layer normalized L1 between result and target features over the variant's range.

    Target features are detached: the loss shapes the generator only. Returns a
    float64 scalar tensor (see module docstring).
    """
    if len(feats_r) != len(feats_t):
        raise ValueError(f"feature list lengths differ: {len(feats_r)} vs {len(feats_t)}")
    for i, (r, t) in enumerate(zip(feats_r, feats_t), start=1):
        if r.shape != t.shape:
            raise ValueError(f"layer {i} feature shapes differ: {tuple(r.shape)} vs {tuple(t.shape)}")
    device = feats_r[0].device if feats_r else "cpu"
    total = torch.zeros((), dtype=torch.float64, device=device)
    for i in variant.layer_range(len(feats_r)):
        r, t = feats_r[i - 1], feats_t[i - 1]
        total = total + (r - t.detach()).abs().mean().double()
    return total


def fm_sum(
    feats_r_per_scale: Sequence[Sequence[torch.Tensor]],
    feats_t_per_scale: Sequence[Sequence[torch.Tensor]],
    variant: FMVariant,
) -> torch.Tensor:
    """Feature matching summed over every discriminator scale."""
    if len(feats_r_per_scale) != len(feats_t_per_scale):
        raise ValueError("per-scale feature lists have different lengths")
    total = torch.zeros((), dtype=torch.float64)
    for feats_r, feats_t in zip(feats_r_per_scale, feats_t_per_scale):
        total = total + feature_matching_loss(feats_r, feats_t, variant)
    return total


def _as_scale_list(scores) -> list[torch.Tensor]:
    if torch.is_tensor(scores):
        return [scores]
    return list(scores)


def hinge_d_loss(real_scores, fake_scores) -> torch.Tensor:
    """mean(relu(1 - real)) + mean(relu(1 + fake)) per scale, summed over scales."""
    reals, fakes = _as_scale_list(real_scores), _as_scale_list(fake_scores)
    if len(reals) != len(fakes):
        raise ValueError("real and fake score lists have different scale counts")
    total = None
    for r, f in zip(reals, fakes):
        term = F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
        total = term if total is None else total + term
    return total


def hinge_g_loss(fake_scores) -> torch.Tensor:
    """-mean(fake) per scale, summed over scales."""
    total = None
    for f in _as_scale_list(fake_scores):
        term = -f.mean()
        total = term if total is None else total + term
    return total


def gradient_penalty(
    disc_fns: "Callable | Sequence[Callable]",
    real: torch.Tensor,
    fake: torch.Tensor,
    alpha: torch.Tensor | None = None,
    rng=None,
) -> torch.Tensor:
    """Two-sided penalty pushing the per-sample input-gradient norm toward 1.

    Interpolates x_hat = alpha*real + (1-alpha)*fake per sample, then averages
    (||d score_sum / d x_hat||_2 - 1)^2 over samples and scales. `alpha` may be
    passed explicitly; otherwise it is drawn uniform from `rng`.
    """
    fns = [disc_fns] if callable(disc_fns) else list(disc_fns)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake batch shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    if alpha is None:
        if rng is None:
            raise ValueError("gradient_penalty needs either alpha or rng")
        alpha = torch.from_numpy(rng.uniform(size=n).astype("float32")).to(real.dtype)
    a = alpha.reshape(n, *([1] * (real.dim() - 1)))
    x_hat = (a * real.detach() + (1.0 - a) * fake.detach()).requires_grad_(True)
    total = None
    for fn in fns:
        scores = fn(x_hat)
        grad = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)[0]
        norms = grad.reshape(n, -1).norm(dim=1)
        term = ((norms - 1.0) ** 2).mean()
        total = term if total is None else total + term
    return total / len(fns)


def total_generator_loss(l_id, l_recon, l_adv_g, l_fm, cfg: TrainConfig):
    """Weighted generator objective; the gradient penalty lives in the D update."""
    return cfg.lambda_id * l_id + cfg.lambda_recon * l_recon + l_adv_g + cfg.lambda_fm * l_fm


@dataclass(frozen=True)
class LossReport:
    """All per-step scalars; total_g is the full weighted sum including the GP term."""

    l_id: float
    l_recon: float
    l_adv_g: float
    l_adv_d: float
    l_gp: float
    l_fm: float
    total_g: float

    FIELDS = ("l_id", "l_recon", "l_adv_g", "l_adv_d", "l_gp", "l_fm", "total_g")

    @classmethod
    def from_components(cls, cfg: TrainConfig, *, l_id, l_recon, l_adv_g, l_adv_d, l_gp, l_fm):
        total = (
            cfg.lambda_id * l_id
            + cfg.lambda_recon * l_recon
            + l_adv_g
            + cfg.lambda_gp * l_gp
            + cfg.lambda_fm * l_fm
        )
        return cls(
            l_id=float(l_id),
            l_recon=float(l_recon),
            l_adv_g=float(l_adv_g),
            l_adv_d=float(l_adv_d),
            l_gp=float(l_gp),
            l_fm=float(l_fm),
            total_g=float(total),
        )

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}
