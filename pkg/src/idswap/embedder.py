"""Identity embedding network standing in for an off-the-shelf face recognizer.

A small conv stack maps any face image to a unit vector. It is pretrained with
normalized-softmax classification over identity labels, then frozen; the
swapping networks only ever read it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import derive_seed, fork_seeded, normalize_identity, seeded_rng
from .data import FaceDataset

#: Images are resized to this side length before embedding, whatever the
#: generator resolution is.
EMBEDDER_INPUT_SIZE = 64

EMBEDDING_MAGIC = b"IDVEC\x01"


class IdentityEmbedder(nn.Module):
    """4 downsampling convs + global average pool + linear projection, L2-normalized."""

    def __init__(self, embed_dim: int = 64, base_channels: int = 32):
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
        self.fc = nn.Linear(8 * b, embed_dim)
        self.embed_dim = embed_dim
        self.train_accuracy_: float | None = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(
                f"expected (3, H, W) or (N, 3, H, W) image, got shape {tuple(images.shape)}"
            )
        if images.shape[-2:] != (EMBEDDER_INPUT_SIZE, EMBEDDER_INPUT_SIZE):
            images = F.interpolate(
                images, size=(EMBEDDER_INPUT_SIZE, EMBEDDER_INPUT_SIZE),
                mode="bilinear", align_corners=False,
            )
        h = images
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        v = self.fc(h.mean(dim=(2, 3)))
        v = normalize_identity(v)
        return v.squeeze(0) if single else v


def embed(embedder: IdentityEmbedder, image: torch.Tensor) -> torch.Tensor:
    """Identity vector of one image or a batch; unit norm, deterministic."""
    return embedder(image)


def build_embedder(embed_dim: int = 64, seed: int = 0) -> IdentityEmbedder:
    with fork_seeded(derive_seed(seed, "embedder-init")):
        return IdentityEmbedder(embed_dim=embed_dim)


def pretrain_embedder(
    dataset: FaceDataset,
    epochs: int = 10,
    *,
    embed_dim: int = 64,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
    scale: float = 16.0,
    seed: int = 0,
) -> IdentityEmbedder:
    """Train with normalized-softmax classification over identity_id, then freeze.

    The returned network carries its held-in classification accuracy in
    `train_accuracy_` and is never updated again.
    """
    if dataset.n_identities < 2:
        raise ValueError("dataset must contain at least 2 identities to pretrain the embedder")
    unique_ids = np.unique(dataset.identity_ids)
    class_of = {int(k): i for i, k in enumerate(unique_ids)}
    targets = torch.tensor([class_of[int(k)] for k in dataset.identity_ids], dtype=torch.long)

    net = build_embedder(embed_dim=embed_dim, seed=seed)
    with fork_seeded(derive_seed(seed, "embedder-head")):
        head = nn.Linear(embed_dim, len(unique_ids), bias=False)
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=learning_rate)
    rng = seeded_rng(derive_seed(seed, "embedder-shuffle"))

    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            imgs = dataset.images[idx]
            v = net(imgs)
            logits = scale * v @ normalize_identity(head.weight).T
            loss = F.cross_entropy(logits, targets[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    correct = 0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            imgs = dataset.images[start : start + batch_size]
            v = net(imgs)
            logits = v @ normalize_identity(head.weight).T
            correct += int((logits.argmax(dim=1) == targets[start : start + batch_size]).sum())
    net.train_accuracy_ = correct / n
    net.requires_grad_(False)
    net.eval()
    return net


def save_embeddings(path, vectors: dict[str, "torch.Tensor | np.ndarray"]) -> None:
    """Write the binary embedding container (magic, dim, count, records)."""
    items = list(vectors.items())
    if not items:
        raise ValueError("no records to write")
    dim = int(np.asarray(items[0][1]).reshape(-1).shape[0])
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", dim, len(items)))
        for key, vec in items:
            arr = np.asarray(
                vec.detach().cpu().numpy() if torch.is_tensor(vec) else vec, dtype=np.float32
            ).reshape(-1)
            if arr.shape[0] != dim:
                raise ValueError(f"record {key!r} has dimension {arr.shape[0]}, expected {dim}")
            encoded = key.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(arr.astype("<f4").tobytes())


def _load_binary_embeddings(payload: bytes, path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    offset = len(EMBEDDING_MAGIC)
    if len(payload) < offset + 8:
        raise ValueError(f"malformed embedding file {path}: truncated header")
    dim, count = struct.unpack_from("<II", payload, offset)
    offset += 8
    records = []
    for _ in range(count):
        if offset + 4 > len(payload):
            raise ValueError(f"malformed embedding file {path}: truncated record")
        (key_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        key = payload[offset : offset + key_len].decode("utf-8")
        offset += key_len
        end = offset + 4 * dim
        if end > len(payload):
            raise ValueError(f"malformed embedding file {path}: truncated vector for {key!r}")
        records.append((key, np.frombuffer(payload, "<f4", count=dim, offset=offset).copy()))
        offset = end
    return dim, records


def _load_csv_embeddings(text: str, path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"no records in {path}")
    header = lines[0].split(",")
    if header[0].strip() != "id" or len(header) < 2:
        raise ValueError(f"malformed embedding CSV {path}: expected header 'id,v0,...'")
    dim = len(header) - 1
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != dim + 1:
            raise ValueError(f"malformed embedding CSV {path}: row width != header width")
        records.append((parts[0], np.array([float(x) for x in parts[1:]], dtype=np.float32)))
    return dim, records


def load_external_embeddings(path, embed_dim: int | None = None) -> dict[str, torch.Tensor]:
    """Read externally computed identity vectors; every vector is re-unit-normalized."""
    path = Path(path)
    payload = path.read_bytes()
    if payload.startswith(EMBEDDING_MAGIC):
        dim, records = _load_binary_embeddings(payload, path)
    else:
        dim, records = _load_csv_embeddings(payload.decode("utf-8", errors="strict"), path)
    if not records:
        raise ValueError(f"no records in {path}")
    if embed_dim is not None and dim != embed_dim:
        raise ValueError(f"embedding dimension {dim} in {path} does not match configured {embed_dim}")
    out: dict[str, torch.Tensor] = {}
    for key, arr in records:
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ValueError(f"record {key!r} in {path} is a zero vector")
        out[key] = torch.from_numpy(arr / norm)
    return out
