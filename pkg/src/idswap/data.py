"""Procedural face-like dataset with controlled identity and attribute factors.

Identity parameters fix the geometry and colors of a face; the three attributes
(pose_yaw, expression, lighting) move features sideways, bend the mouth, and
tilt the brightness. Rendering is pure arithmetic: the same spec always yields
the same pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import derive_seed, seeded_rng

ID_PARAM_COUNT = 10
YAW_RANGE = (-45.0, 45.0)
_BACKGROUND = 0.10
_FEATURE_SHIFT = 0.28  # max lateral feature offset at 45 degrees yaw


@dataclass
class FaceSpec:
    """Generative parameters of one face image."""

    identity_id: int
    identity_params: np.ndarray | None  # (ID_PARAM_COUNT,) in [0, 1]; None for ingested data
    pose_yaw: float = 0.0  # degrees in [-45, 45]
    expression: float = 0.5  # [0, 1], frown to smile
    lighting: float = 0.5  # [0, 1], dim-left to bright-right


def _check_spec(spec: FaceSpec) -> np.ndarray:
    if spec.identity_params is None:
        raise ValueError("spec has no identity_params; only synthetic specs can be rendered")
    p = np.asarray(spec.identity_params, dtype=np.float64)
    if p.shape != (ID_PARAM_COUNT,):
        raise ValueError(f"identity_params must have shape ({ID_PARAM_COUNT},), got {p.shape}")
    if not (YAW_RANGE[0] <= spec.pose_yaw <= YAW_RANGE[1]):
        raise ValueError(f"pose_yaw {spec.pose_yaw} outside {YAW_RANGE}")
    if not (0.0 <= spec.expression <= 1.0 and 0.0 <= spec.lighting <= 1.0):
        raise ValueError("expression and lighting must lie in [0, 1]")
    return p


def face_geometry(spec: FaceSpec, size: int) -> dict[str, np.ndarray]:
    """Boolean masks for every facial feature. Lighting never enters here."""
    p = _check_spec(spec)
    coords = np.linspace(-1.0, 1.0, size)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    a = 0.58 + 0.22 * p[0]  # head half-width
    b = 0.66 + 0.22 * p[1]  # head half-height
    eye_dx = 0.15 + 0.12 * p[5]
    eye_r = 0.055 + 0.05 * p[6]
    nose_len = 0.14 + 0.14 * p[7]
    mouth_w = 0.16 + 0.16 * p[8]
    pupil_r = eye_r * (0.35 + 0.30 * p[9])

    shift = math.sin(math.radians(spec.pose_yaw)) * _FEATURE_SHIFT
    eye_y = -0.30 * b
    lx, rx = -eye_dx + shift, eye_dx + shift

    head = (xs / a) ** 2 + (ys / b) ** 2 <= 1.0
    eye_left = (xs - lx) ** 2 + (ys - eye_y) ** 2 <= eye_r**2
    eye_right = (xs - rx) ** 2 + (ys - eye_y) ** 2 <= eye_r**2
    pupil_left = (xs - lx) ** 2 + (ys - eye_y) ** 2 <= pupil_r**2
    pupil_right = (xs - rx) ** 2 + (ys - eye_y) ** 2 <= pupil_r**2

    brow_lo = eye_y - eye_r - 0.10
    brow_hi = eye_y - eye_r - 0.04
    brow_band = (ys >= brow_lo) & (ys <= brow_hi)
    brow_left = brow_band & (np.abs(xs - lx) <= eye_r * 1.5)
    brow_right = brow_band & (np.abs(xs - rx) <= eye_r * 1.5)

    nose_top = eye_y + eye_r + 0.06
    nose_cx = 1.25 * shift
    along = (ys - nose_top) / nose_len
    nose = (along >= 0.0) & (along <= 1.0) & (np.abs(xs - nose_cx) <= 0.025 + 0.05 * along)

    mouth_y = 0.44 * b
    curve = (0.5 - spec.expression) * 0.22
    x_rel = (xs - shift) / mouth_w
    mouth = (np.abs(x_rel) <= 1.0) & (np.abs(ys - (mouth_y + curve * x_rel**2)) <= 0.045)

    return {
        "head": head,
        "eye_left": eye_left,
        "eye_right": eye_right,
        "pupil_left": pupil_left,
        "pupil_right": pupil_right,
        "brow_left": brow_left,
        "brow_right": brow_right,
        "nose": nose,
        "mouth": mouth,
    }


def render(spec: FaceSpec, size: int = 64) -> torch.Tensor:
    """Rasterize a spec into a (3, size, size) float32 image in [-1, 1]."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    p = _check_spec(spec)
    geo = face_geometry(spec, size)

    skin = np.array([0.36 + 0.50 * p[2], 0.26 + 0.50 * p[3], 0.20 + 0.50 * p[4]])
    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float64)
    img[geo["head"]] = skin
    img[geo["brow_left"] & geo["head"]] = skin * 0.35
    img[geo["brow_right"] & geo["head"]] = skin * 0.35
    img[geo["eye_left"]] = 0.93
    img[geo["eye_right"]] = 0.93
    img[geo["pupil_left"]] = 0.06
    img[geo["pupil_right"]] = 0.06
    img[geo["nose"]] = skin * 0.82
    img[geo["mouth"]] = (0.55, 0.16, 0.20)

    xs = np.linspace(-1.0, 1.0, size)[None, :, None]
    gain = (0.72 + 0.50 * spec.lighting) * (1.0 + (spec.lighting - 0.5) * 0.6 * xs)
    img = np.clip(img * gain, 0.0, 1.0)

    chw = (2.0 * img - 1.0).astype(np.float32).transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(chw))


def sample_identity_params(n_identities: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(size=(n_identities, ID_PARAM_COUNT))


def sample_spec(identity_id: int, identity_params: np.ndarray, rng: np.random.Generator) -> FaceSpec:
    return FaceSpec(
        identity_id=identity_id,
        identity_params=identity_params,
        pose_yaw=float(rng.uniform(*YAW_RANGE)),
        expression=float(rng.uniform()),
        lighting=float(rng.uniform()),
    )


class FaceDataset:
    """In-memory pool of face images with identity labels.

    Synthetic pools also carry the generating FaceSpec per image and the
    per-identity parameter table, which evaluation uses as ground truth.
    """

    def __init__(self, images, identity_ids, specs=None, identity_params=None, identity_names=None):
        self.images = images  # (N, 3, H, W) float32 in [-1, 1]
        self.identity_ids = np.asarray(identity_ids, dtype=np.int64)
        self.specs = specs
        self.identity_params = identity_params
        self.identity_names = identity_names
        self._by_identity: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    @property
    def n_identities(self) -> int:
        return int(np.unique(self.identity_ids).size)

    def indices_by_identity(self) -> dict[int, np.ndarray]:
        if self._by_identity is None:
            self._by_identity = {
                int(k): np.flatnonzero(self.identity_ids == k) for k in np.unique(self.identity_ids)
            }
        return self._by_identity


def _render_pool(identity_params, per_identity, image_size, rng, identity_ids=None):
    ids = range(identity_params.shape[0]) if identity_ids is None else identity_ids
    specs = []
    for identity_id in ids:
        for _ in range(per_identity):
            specs.append(sample_spec(int(identity_id), identity_params[identity_id], rng))
    images = torch.stack([render(s, image_size) for s in specs])
    labels = np.array([s.identity_id for s in specs], dtype=np.int64)
    return FaceDataset(images, labels, specs=specs, identity_params=identity_params)


def synthesize_dataset(n_identities: int, per_identity: int, image_size: int = 64, seed: int = 0) -> FaceDataset:
    """Fresh identities plus `per_identity` attribute draws per identity."""
    if n_identities < 1 or per_identity < 1:
        raise ValueError("n_identities and per_identity must be >= 1")
    params = sample_identity_params(n_identities, seeded_rng(derive_seed(seed, "identity-params")))
    return _render_pool(params, per_identity, image_size, seeded_rng(derive_seed(seed, "attributes")))


def holdout_dataset(dataset: FaceDataset, per_identity: int, seed: int = 1) -> FaceDataset:
    """Same identities as `dataset`, fresh attribute draws (evaluation pool)."""
    if dataset.identity_params is None:
        raise ValueError("dataset has no identity parameters; cannot draw a holdout pool")
    rng = seeded_rng(derive_seed(seed, "holdout-attributes"))
    return _render_pool(dataset.identity_params, per_identity, dataset.image_size, rng)


def sample_pair(dataset: FaceDataset, same_identity: bool, rng: np.random.Generator):
    """Draw (I_S, I_T, spec_S, spec_T); same identity_id or guaranteed-distinct ids."""
    by_id = dataset.indices_by_identity()
    ids = sorted(by_id)
    if len(ids) < 2:
        raise ValueError("dataset must contain at least 2 identities")
    if same_identity:
        key = ids[int(rng.integers(len(ids)))]
        idx_s = int(by_id[key][int(rng.integers(len(by_id[key])))])
        idx_t = int(by_id[key][int(rng.integers(len(by_id[key])))])
    else:
        pick = rng.choice(len(ids), size=2, replace=False)
        key_s, key_t = ids[int(pick[0])], ids[int(pick[1])]
        idx_s = int(by_id[key_s][int(rng.integers(len(by_id[key_s])))])
        idx_t = int(by_id[key_t][int(rng.integers(len(by_id[key_t])))])
    spec_s = dataset.specs[idx_s] if dataset.specs is not None else None
    spec_t = dataset.specs[idx_t] if dataset.specs is not None else None
    return dataset.images[idx_s], dataset.images[idx_t], spec_s, spec_t


def sample_batch(dataset: FaceDataset, same_identity: bool, batch_size: int, rng: np.random.Generator):
    """Stack `batch_size` pairs into (I_S, I_T, specs_S, specs_T) batches."""
    sources, targets, specs_s, specs_t = [], [], [], []
    for _ in range(batch_size):
        i_s, i_t, sp_s, sp_t = sample_pair(dataset, same_identity, rng)
        sources.append(i_s)
        targets.append(i_t)
        specs_s.append(sp_s)
        specs_t.append(sp_t)
    return torch.stack(sources), torch.stack(targets), specs_s, specs_t


MANIFEST_FILENAME = "manifest.txt"


def save_dataset(dataset: FaceDataset, out_dir) -> Path:
    """Write PNGs grouped by identity plus a manifest with attribute ground truth."""
    if dataset.specs is None:
        raise ValueError("only synthetic datasets (with specs) can be saved")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    lines = []
    for idx in range(len(dataset)):
        spec = dataset.specs[idx]
        k = counters.get(spec.identity_id, 0)
        counters[spec.identity_id] = k + 1
        rel = f"identity_{spec.identity_id:03d}/sample_{k:04d}.png"
        path = out_dir / rel
        path.parent.mkdir(exist_ok=True)
        save_image(dataset.images[idx], path)
        lines.append(
            f"{rel}\t{spec.identity_id}\t{spec.pose_yaw!r}\t{spec.expression!r}\t{spec.lighting!r}"
        )
    manifest = out_dir / MANIFEST_FILENAME
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("path\tidentity\tpose_yaw\texpression\tlighting\n")
        fh.write("\n".join(lines) + "\n")
    return manifest


def save_image(image: torch.Tensor, path) -> None:
    """Write a (3, H, W) [-1, 1] tensor as an 8-bit PNG."""
    arr = image.detach().cpu().numpy().transpose(1, 2, 0)
    u8 = np.rint((arr + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Read an 8-bit image to a (3, H, W) float32 tensor in [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    chw = (arr / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(chw))


def _load_manifest_attrs(folder: Path) -> dict[str, tuple[float, float, float]]:
    manifest = folder / MANIFEST_FILENAME
    attrs: dict[str, tuple[float, float, float]] = {}
    if not manifest.is_file():
        return attrs
    with open(manifest, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("path\t"):
            return attrs
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) == 5:
                attrs[parts[0]] = (float(parts[2]), float(parts[3]), float(parts[4]))
    return attrs


def load_image_folder(path, size: int, min_size: int = 0) -> FaceDataset:
    """Ingest pre-aligned images grouped by subfolder-as-identity.

    Images are resized to `size` and rescaled to [-1, 1]. If a dataset manifest
    is present (written by save_dataset), the attribute ground truth rides
    along as specs without identity parameters.
    """
    folder = Path(path)
    if not folder.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {folder}")
    attrs = _load_manifest_attrs(folder)
    extensions = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
    subdirs = sorted(d for d in folder.iterdir() if d.is_dir())
    names = [d.name for d in subdirs]
    images, labels, specs = [], [], []
    have_attrs = True
    for label, sub in enumerate(subdirs):
        for file in sorted(sub.iterdir()):
            if file.suffix.lower() not in extensions:
                continue
            try:
                with Image.open(file) as im:
                    if min(im.size) < min_size:
                        warnings.warn(f"skipping {file}: smaller than --min-size {min_size}")
                        continue
                    im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32)
            except OSError as exc:
                warnings.warn(f"skipping unreadable image {file}: {exc}")
                continue
            chw = (arr / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)
            images.append(torch.from_numpy(np.ascontiguousarray(chw)))
            labels.append(label)
            rel = f"{sub.name}/{file.name}"
            if rel in attrs:
                yaw, expr, light = attrs[rel]
                specs.append(FaceSpec(label, None, yaw, expr, light))
            else:
                have_attrs = False
    if not images:
        raise ValueError(f"no images found under {folder}")
    return FaceDataset(
        torch.stack(images),
        labels,
        specs=specs if have_attrs and specs else None,
        identity_names=names,
    )
