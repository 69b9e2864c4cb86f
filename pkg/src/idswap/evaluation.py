"""Quantitative evaluation: identity retrieval, attribute-error proxy, and the
cross-swap / self-swap loss protocol, plus the ablation comparison runner."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainConfig, derive_seed, fork_seeded, seeded_rng
from .data import FaceDataset, YAW_RANGE, sample_pair
from .embedder import IdentityEmbedder
from .generator import Generator
from .losses import identity_loss
from .training import apply_preset, train


@dataclass(frozen=True)
class RetrievalRecord:
    generated_id: int  # index of the generated embedding
    true_source_id: int
    retrieved_id: int
    cosine_distance: float


def _to_matrix(vectors) -> np.ndarray:
    if torch.is_tensor(vectors):
        arr = vectors.detach().cpu().numpy()
    else:
        arr = np.asarray(vectors)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr.astype(np.float64)


def retrieval_records(gen_vectors, gen_labels, gallery_vectors, gallery_labels) -> list[RetrievalRecord]:
    """Nearest gallery vector per generated embedding, by cosine distance.

    Ties break toward the lowest gallery index.
    """
    gen = _to_matrix(gen_vectors)
    gallery = _to_matrix(gallery_vectors)
    if gallery.shape[0] == 0:
        raise ValueError("gallery is empty")
    if gen.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"dimension mismatch: generated {gen.shape[1]} vs gallery {gallery.shape[1]}"
        )
    gen_labels = np.asarray(gen_labels)
    gallery_labels = np.asarray(gallery_labels)
    gal_norms = np.linalg.norm(gallery, axis=1)
    records = []
    for i in range(gen.shape[0]):
        v = gen[i]
        dists = 1.0 - (gallery @ v) / (gal_norms * np.linalg.norm(v))
        j = int(np.argmin(dists))  # first minimum = lowest index
        records.append(
            RetrievalRecord(
                generated_id=i,
                true_source_id=int(gen_labels[i]),
                retrieved_id=int(gallery_labels[j]),
                cosine_distance=float(dists[j]),
            )
        )
    return records


def id_retrieval(gen_vectors, gen_labels, gallery_vectors, gallery_labels) -> float:
    """Percentage of generated embeddings whose nearest gallery vector has the right identity."""
    records = retrieval_records(gen_vectors, gen_labels, gallery_vectors, gallery_labels)
    hits = sum(r.retrieved_id == r.true_source_id for r in records)
    return 100.0 * hits / len(records)


# --- attribute-error proxy ---------------------------------------------------

ATTRIBUTE_NAMES = ("pose_yaw", "expression", "lighting")


def normalized_attributes(specs) -> np.ndarray:
    """(N, 3) array with every attribute mapped to [0, 1] by its range."""
    rows = []
    for spec in specs:
        rows.append(
            (
                (spec.pose_yaw - YAW_RANGE[0]) / (YAW_RANGE[1] - YAW_RANGE[0]),
                spec.expression,
                spec.lighting,
            )
        )
    return np.asarray(rows, dtype=np.float32)


class AttributeRegressor(nn.Module):
    """Small conv net predicting (pose, expression, lighting) in normalized units."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        b = base_channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, b, 4, 2, 1),
                nn.Conv2d(b, 2 * b, 4, 2, 1),
                nn.Conv2d(2 * b, 4 * b, 4, 2, 1),
                nn.Conv2d(4 * b, 8 * b, 4, 2, 1),
            ]
        )
        self.fc = nn.Linear(8 * b, len(ATTRIBUTE_NAMES))
        self.fitted_ = False
        self.validation_error_: np.ndarray | None = None  # per-attribute MAE

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = images
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return torch.sigmoid(self.fc(h.mean(dim=(2, 3))))


def fit_attribute_regressor(
    train_ds: FaceDataset,
    val_ds: FaceDataset,
    *,
    epochs: int = 12,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> AttributeRegressor:
    """Train on renders with known specs; freeze and record held-out per-attribute MAE."""
    if train_ds.specs is None or val_ds.specs is None:
        raise ValueError("attribute regressor needs datasets with ground-truth specs")
    with fork_seeded(derive_seed(seed, "attr-regressor-init")):
        net = AttributeRegressor()
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    rng = seeded_rng(derive_seed(seed, "attr-regressor-shuffle"))
    targets = torch.from_numpy(normalized_attributes(train_ds.specs))
    n = len(train_ds)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = net(train_ds.images[idx])
            loss = F.mse_loss(pred, targets[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.requires_grad_(False)
    net.eval()
    with torch.no_grad():
        preds = _predict_attributes(net, val_ds.images)
    truth = normalized_attributes(val_ds.specs)
    net.validation_error_ = np.abs(preds - truth).mean(axis=0)
    net.fitted_ = True
    return net


def _predict_attributes(net: AttributeRegressor, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch):
            chunks.append(net(images[start : start + batch]).numpy())
    return np.concatenate(chunks, axis=0)


def attribute_error(regressor: AttributeRegressor, images: torch.Tensor, target_specs) -> float:
    """Mean L2 distance between predicted attributes of the images and the target truth."""
    if not getattr(regressor, "fitted_", False):
        raise RuntimeError("attribute regressor is not fitted")
    preds = _predict_attributes(regressor, images)
    truth = normalized_attributes(target_specs)
    if preds.shape != truth.shape:
        raise ValueError(f"got {preds.shape[0]} images but {truth.shape[0]} target specs")
    return float(np.linalg.norm(preds - truth, axis=1).mean())


# --- cross-swap / self-swap protocol -----------------------------------------


def fig7_protocol(
    generator: Generator,
    embedder: IdentityEmbedder,
    dataset: FaceDataset,
    n_pairs: int,
    rng: Optional[np.random.Generator] = None,
    batch: int = 16,
) -> tuple[float, float]:
    """(cross_id_loss, self_recon_loss) over sampled different-identity pairs / self-swaps."""
    if n_pairs <= 0:
        raise ValueError("n_pairs must be >= 1")
    if rng is None:
        rng = seeded_rng(0)
    if n_pairs > len(dataset):
        warnings.warn(f"n_pairs {n_pairs} exceeds dataset size {len(dataset)}; sampling with replacement")

    sources, targets = [], []
    for _ in range(n_pairs):
        i_s, i_t, _, _ = sample_pair(dataset, same_identity=False, rng=rng)
        sources.append(i_s)
        targets.append(i_t)
    cross_total = 0.0
    with torch.no_grad():
        for start in range(0, n_pairs, batch):
            i_s = torch.stack(sources[start : start + batch])
            i_t = torch.stack(targets[start : start + batch])
            v_s = embedder(i_s)
            i_r = generator(i_t, v_s)
            v_r = embedder(i_r)
            cross_total += float(identity_loss(v_r, v_s)) * i_s.shape[0]
    cross_id_loss = cross_total / n_pairs

    idx = rng.integers(len(dataset), size=n_pairs)
    self_total = 0.0
    with torch.no_grad():
        for start in range(0, n_pairs, batch):
            x = dataset.images[idx[start : start + batch]]
            i_r = generator(x, embedder(x))
            self_total += float((i_r - x).abs().mean()) * x.shape[0]
    self_recon_loss = self_total / n_pairs
    return cross_id_loss, self_recon_loss


# --- ablation runner ----------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    preset: str
    id_retrieval: float
    attr_error: float
    cross_id_loss: float
    self_recon_loss: float


def swap_gallery_metrics(
    generator: Generator,
    embedder: IdentityEmbedder,
    eval_ds: FaceDataset,
    *,
    regressor: Optional[AttributeRegressor] = None,
    n_swaps: int = 200,
    seed: int = 0,
    batch: int = 16,
) -> dict[str, float]:
    """Retrieval (and optional attribute error) for generated swaps against the gallery."""
    rng = seeded_rng(derive_seed(seed, "swap-gallery"))
    sources, targets, target_specs, labels = [], [], [], []
    for _ in range(n_swaps):
        i_s, i_t, sp_s, sp_t = sample_pair(eval_ds, same_identity=False, rng=rng)
        sources.append(i_s)
        targets.append(i_t)
        target_specs.append(sp_t)
        labels.append(sp_s.identity_id if sp_s is not None else -1)
    if any(lbl == -1 for lbl in labels):
        raise ValueError("swap gallery metrics need identity labels on the eval dataset")

    swaps = []
    with torch.no_grad():
        for start in range(0, n_swaps, batch):
            i_s = torch.stack(sources[start : start + batch])
            i_t = torch.stack(targets[start : start + batch])
            swaps.append(generator(i_t, embedder(i_s)))
        swaps = torch.cat(swaps, dim=0)
        gen_vectors = torch.cat(
            [embedder(swaps[start : start + batch]) for start in range(0, n_swaps, batch)], dim=0
        )
        gallery_vectors = torch.cat(
            [embedder(eval_ds.images[start : start + batch]) for start in range(0, len(eval_ds), batch)],
            dim=0,
        )
    out = {
        "id_retrieval": id_retrieval(gen_vectors, labels, gallery_vectors, eval_ds.identity_ids)
    }
    if regressor is not None and eval_ds.specs is not None:
        out["attr_error"] = attribute_error(regressor, swaps, target_specs)
    else:
        out["attr_error"] = float("nan")
    return out


def evaluate_generator(
    generator: Generator,
    embedder: IdentityEmbedder,
    eval_ds: FaceDataset,
    *,
    regressor: Optional[AttributeRegressor] = None,
    preset: str = "SimSwap",
    n_pairs: int = 200,
    seed: int = 0,
) -> AblationRow:
    gallery = swap_gallery_metrics(
        generator, embedder, eval_ds, regressor=regressor, n_swaps=n_pairs, seed=seed
    )
    cross_id, self_recon = fig7_protocol(
        generator, embedder, eval_ds, n_pairs, rng=seeded_rng(derive_seed(seed, "fig7"))
    )
    return AblationRow(
        preset=preset,
        id_retrieval=gallery["id_retrieval"],
        attr_error=gallery["attr_error"],
        cross_id_loss=cross_id,
        self_recon_loss=self_recon,
    )


def run_ablation(
    preset_names: Sequence[str],
    base_cfg: TrainConfig,
    train_ds: FaceDataset,
    eval_ds: FaceDataset,
    embedder: IdentityEmbedder,
    *,
    regressor: Optional[AttributeRegressor] = None,
    out_dir=None,
    n_pairs: int = 200,
) -> list[AblationRow]:
    """Train each preset with identical seed and budget, then evaluate all metrics."""
    rows = []
    for name in preset_names:
        cfg = apply_preset(name, base_cfg)
        run_dir = Path(out_dir) / f"run_{name}" if out_dir is not None else None
        if run_dir is None:
            import tempfile

            with tempfile.TemporaryDirectory() as tmp:
                state = train(cfg, train_ds, tmp, embedder=embedder)
        else:
            state = train(cfg, train_ds, run_dir, embedder=embedder)
        rows.append(
            evaluate_generator(
                state.generator,
                embedder,
                eval_ds,
                regressor=regressor,
                preset=name,
                n_pairs=n_pairs,
                seed=cfg.seed,
            )
        )
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    header = ("preset", "id_retrieval", "attr_error", "cross_id_loss", "self_recon_loss")
    cells = [header] + [
        (
            r.preset,
            f"{r.id_retrieval:.2f}",
            f"{r.attr_error:.4f}",
            f"{r.cross_id_loss:.4f}",
            f"{r.self_recon_loss:.4f}",
        )
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def save_ablation_rows(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(
                json.dumps(
                    {
                        "preset": r.preset,
                        "id_retrieval": r.id_retrieval,
                        "attr_error": r.attr_error,
                        "cross_id_loss": r.cross_id_loss,
                        "self_recon_loss": r.self_recon_loss,
                    }
                )
                + "\n"
            )
