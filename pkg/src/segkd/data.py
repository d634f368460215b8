"""Dataset ingestion, preprocessing, synthetic data, and the embedding cache.

Dataset layout on disk:

    <root>/images/<id>.<ext>
    <root>/masks/<id>.<ext>
    <root>/splits.csv          optional, columns id,split

Embedding cache layout:

    <cache_root>/<dataset>/<id>.emb   one float32 npy blob per record
    <cache_root>/<dataset>/index.json content hashes + teacher fingerprint

Split assignment is a seeded shuffle over the sorted record ids, so identical
(root, fractions, seed) always produce identical manifests.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from . import telemetry
from .errors import ManifestError
from .models.common import weights_fingerprint
from .seeding import derive_seed

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    mask_path: str
    split: str
    cached_embedding_path: str | None = None


@dataclass(frozen=True)
class Preprocessing:
    resize_to: tuple[int, int] = (64, 64)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class DatasetManifest:
    name: str
    root_path: str
    records: list[SampleRecord]
    preprocessing: Preprocessing = field(default_factory=Preprocessing)

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def record(self, record_id: str) -> SampleRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise ManifestError(f"no record with id {record_id!r}")


def _find_files(directory: Path) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in out:
                raise ManifestError(f"duplicate id {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def _assign_splits(ids: list[str], fractions: tuple[float, float, float],
                   seed: int) -> dict[str, str]:
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ManifestError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(derive_seed(seed, 0xD5))
    shuffled = list(ids)
    rng.shuffle(shuffled)
    n = len(shuffled)
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    assignment = {}
    for i, rid in enumerate(shuffled):
        if i < n_train:
            assignment[rid] = "train"
        elif i < n_train + n_val:
            assignment[rid] = "val"
        else:
            assignment[rid] = "test"
    return assignment


def _read_split_file(path: Path, ids: list[str]) -> dict[str, str]:
    assignment: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "split"} <= set(reader.fieldnames):
            raise ManifestError(f"{path} must have columns id,split")
        for row in reader:
            if row["split"] not in SPLITS:
                raise ManifestError(f"{path}: unknown split {row['split']!r} for id {row['id']!r}")
            assignment[row["id"]] = row["split"]
    missing = [rid for rid in ids if rid not in assignment]
    if missing:
        raise ManifestError(f"{path} missing split for ids: {', '.join(missing[:10])}")
    return assignment


def load_dataset(root_path: str | Path,
                 split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 seed: int = 0,
                 name: str | None = None,
                 preprocessing: Preprocessing | None = None,
                 split_file: str | Path | None = None) -> DatasetManifest:
    """Scan <root>/images and <root>/masks into a manifest.

    Records are ordered by id; splits come from splits.csv when present (or
    ``split_file``), otherwise from a seeded shuffle with ``split_fractions``.
    """
    root = Path(root_path)
    images_dir, masks_dir = root / "images", root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise ManifestError(f"{root} must contain images/ and masks/ directories")
    images = _find_files(images_dir)
    masks = _find_files(masks_dir)
    if not images:
        raise ManifestError(f"no images found under {images_dir}")
    orphans = sorted(set(images) - set(masks))
    if orphans:
        raise ManifestError(f"images without masks: {', '.join(orphans[:10])}")

    ids = sorted(images)
    if split_file is None and (root / "splits.csv").is_file():
        split_file = root / "splits.csv"
    if split_file is not None:
        assignment = _read_split_file(Path(split_file), ids)
    else:
        assignment = _assign_splits(ids, split_fractions, seed)

    records = [
        SampleRecord(
            id=rid,
            image_path=str(images[rid]),
            mask_path=str(masks[rid]),
            split=assignment[rid],
        )
        for rid in ids
    ]
    return DatasetManifest(
        name=name or root.name,
        root_path=str(root),
        records=records,
        preprocessing=preprocessing or Preprocessing(),
    )


def concat_manifests(name: str, manifests: list[DatasetManifest]) -> DatasetManifest:
    """Explicit joint-training manifest; record ids are prefixed per source."""
    records = []
    for m in manifests:
        for r in m.records:
            records.append(replace(r, id=f"{m.name}/{r.id}"))
    if not records:
        raise ManifestError("cannot concatenate empty manifest list")
    return DatasetManifest(
        name=name,
        root_path=";".join(m.root_path for m in manifests),
        records=records,
        preprocessing=manifests[0].preprocessing,
    )


def preprocess(record: SampleRecord, spec: Preprocessing) -> tuple[Tensor, Tensor]:
    """Load one sample: image resized bilinear + normalized, mask nearest + binarized.

    Returns (image (3, H, W) float32, mask (1, H, W) float32 in {0, 1}).
    """
    with Image.open(record.image_path) as im:
        image = torch.from_numpy(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    image = image.permute(2, 0, 1).unsqueeze(0)
    image = F.interpolate(image, size=spec.resize_to, mode="bilinear", align_corners=False)
    mean = torch.tensor(spec.mean).view(1, 3, 1, 1)
    std = torch.tensor(spec.std).view(1, 3, 1, 1)
    image = ((image - mean) / std).squeeze(0)

    with Image.open(record.mask_path) as im:
        mask = torch.from_numpy(np.asarray(im.convert("L"), dtype=np.float32) / 255.0)
    mask = mask.unsqueeze(0).unsqueeze(0)
    mask = F.interpolate(mask, size=spec.resize_to, mode="nearest")
    mask = (mask >= 0.5).to(torch.float32).squeeze(0)
    return image, mask


# ---------------------------------------------------------------------------
# synthetic shapes


def _membership(shape: dict, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Analytic pixel membership on integer coordinates; the oracle re-runs this."""
    if shape["kind"] == "ellipse":
        return ((xs - shape["cx"]) / shape["rx"]) ** 2 + (
            (ys - shape["cy"]) / shape["ry"]
        ) ** 2 <= 1.0
    if shape["kind"] == "rect":
        return (xs >= shape["x0"]) & (xs <= shape["x1"]) & (ys >= shape["y0"]) & (ys <= shape["y1"])
    raise ManifestError(f"unknown shape kind {shape['kind']!r}")


def _sample_shapes(rng: np.random.Generator, h: int, w: int) -> list[dict]:
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        cy = float(rng.uniform(0.25 * h, 0.75 * h))
        cx = float(rng.uniform(0.25 * w, 0.75 * w))
        if rng.random() < 0.5:
            shapes.append({
                "kind": "ellipse",
                "cx": cx,
                "cy": cy,
                "rx": float(rng.uniform(0.08 * w, 0.22 * w)),
                "ry": float(rng.uniform(0.08 * h, 0.22 * h)),
            })
        else:
            hw = float(rng.uniform(0.07 * w, 0.2 * w))
            hh = float(rng.uniform(0.07 * h, 0.2 * h))
            shapes.append({
                "kind": "rect",
                "x0": cx - hw,
                "x1": cx + hw,
                "y0": cy - hh,
                "y1": cy + hh,
            })
    return shapes


def _render_sample(shapes: list[dict], rng: np.random.Generator,
                   h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for s in shapes:
        mask |= _membership(s, ys, xs)

    # textured background: low-frequency waves plus pixel noise
    fy, fx = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    background = 90 + 40 * np.sin(2 * np.pi * fy * ys / h + phase[0]) * np.cos(
        2 * np.pi * fx * xs / w + phase[1]
    )
    image = background + rng.normal(0, 6.0, size=(h, w))
    fg_level = rng.uniform(180, 240)
    image = np.where(mask, fg_level + rng.normal(0, 6.0, size=(h, w)), image)
    image = np.clip(image, 0, 255).astype(np.uint8)
    return np.stack([image] * 3, axis=-1), mask


def generate_synthetic(root_path: str | Path, n: int,
                       canvas: tuple[int, int] = (64, 64), seed: int = 0,
                       split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                       preprocessing: Preprocessing | None = None) -> DatasetManifest:
    """Write n deterministic shape images + exact masks, return the manifest.

    Each sample holds 1-3 random ellipses/rectangles over a textured
    background; the mask is the analytic membership union (never rendered
    approximately). Shape parameters are recorded in shapes.json so the
    geometry can be re-evaluated independently.
    """
    if n < 1:
        raise ManifestError("need n >= 1 synthetic samples")
    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    h, w = canvas
    all_shapes = {}
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        shapes = _sample_shapes(rng, h, w)
        image, mask = _render_sample(shapes, rng, h, w)
        rid = f"sample_{i:04d}"
        Image.fromarray(image).save(root / "images" / f"{rid}.png")
        Image.fromarray((mask * np.uint8(255))).save(root / "masks" / f"{rid}.png")
        all_shapes[rid] = shapes
    with open(root / "shapes.json", "w") as fh:
        json.dump(all_shapes, fh, indent=2, sort_keys=True)
    return load_dataset(root, split_fractions, seed=seed,
                        preprocessing=preprocessing)


# ---------------------------------------------------------------------------
# teacher embedding cache


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_cached_embedding(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return torch.from_numpy(np.load(fh))


def cache_teacher_embeddings(manifest: DatasetManifest, teacher: nn.Module,
                             cache_root: str | Path) -> DatasetManifest:
    """Precompute teacher embeddings for every record, once.

    Records whose cached file already matches the stored content hash (and the
    current teacher fingerprint) are skipped; the second invocation recomputes
    nothing. Returns a manifest copy with cached_embedding_path populated.
    """
    cache_dir = Path(cache_root) / manifest.name
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / "index.json"
    fingerprint = weights_fingerprint(teacher)
    index = {"teacher_fingerprint": fingerprint, "records": {}}
    if index_path.is_file():
        with open(index_path) as fh:
            stored = json.load(fh)
        if stored.get("teacher_fingerprint") == fingerprint:
            index = stored

    records = []
    teacher.eval()
    for record in manifest.records:
        emb_path = cache_dir / f"{record.id}.emb"
        entry = index["records"].get(record.id)
        fresh = (
            entry is not None
            and emb_path.is_file()
            and _file_sha256(emb_path) == entry["sha256"]
        )
        if not fresh:
            telemetry.count("embedding_cache_miss")
            image, _ = preprocess(record, manifest.preprocessing)
            with torch.no_grad():
                embedding = teacher(image.unsqueeze(0)).squeeze(0)
            buf = io.BytesIO()
            np.save(buf, embedding.cpu().numpy())
            emb_path.write_bytes(buf.getvalue())
            index["records"][record.id] = {"sha256": _file_sha256(emb_path)}
        records.append(replace(record, cached_embedding_path=str(emb_path)))

    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return DatasetManifest(
        name=manifest.name,
        root_path=manifest.root_path,
        records=records,
        preprocessing=manifest.preprocessing,
    )


def manifest_content_hash(manifest: DatasetManifest) -> str:
    """Content hash over every referenced image/mask file; run provenance."""
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(r.id.encode())
        h.update(_file_sha256(Path(r.image_path)).encode())
        h.update(_file_sha256(Path(r.mask_path)).encode())
    return h.hexdigest()
