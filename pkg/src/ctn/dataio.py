"""Dataset layout, synthetic corpus generation, exemplar selection, simulated corrections.

On-disk layout::

    root/images/<id>.png|pgm           grayscale, 8- or 16-bit
    root/labels/<id>.contour.json      ground-truth contours (evaluation-only
                                       except for the designated exemplar)
    root/corrections/<id>.corrections.json
    root/meta.json                     {"exemplar": id|null, "n": int, "provenance": str}

Ground truth for non-exemplar images is quarantined: training code may only
call ``exemplar_label()``; ``ground_truth()`` is the evaluation-only path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .contour import Contour, hausdorff, load_contour, rasterize, resample_uniform, save_contour
from .errors import DataError
from .losses import PerceptualExtractor

__all__ = [
    "PartialCorrection",
    "Sample",
    "Dataset",
    "read_image",
    "write_image",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "select_exemplar",
    "simulate_corrections",
    "load_corrections_file",
    "save_corrections_file",
]


@dataclass(frozen=True)
class PartialCorrection:
    """One human-drawn (or simulated) correction segment for an image."""

    image_id: str
    points: np.ndarray
    author: str = "human"
    closed: bool = False  # closed corrections stand in for full labels
    created_at: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise DataError(f"correction for {self.image_id!r} needs >= 2 points")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"correction for {self.image_id!r} has non-finite points")
        object.__setattr__(self, "points", pts)
        self.points.setflags(write=False)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H,W) float64 in [0,1]
    corrections: list[PartialCorrection] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.image.shape
        return w, h


class Dataset:
    """Ordered image collection with an optional exemplar designation."""

    def __init__(self, samples: list[Sample], labels: dict[str, Contour] | None = None,
                 exemplar_id: str | None = None, meta: dict | None = None):
        self.samples = sorted(samples, key=lambda s: s.id)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate image ids: {dupes}")
        self._labels = dict(labels or {})
        for lid in self._labels:
            if lid not in set(ids):
                raise DataError(f"label {lid!r} has no matching image")
        if exemplar_id is not None and exemplar_id not in set(ids):
            raise DataError(f"exemplar id {exemplar_id!r} not in dataset")
        self.exemplar_id = exemplar_id
        self.meta = dict(meta or {})

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def get(self, image_id: str) -> Sample:
        for s in self.samples:
            if s.id == image_id:
                return s
        raise DataError(f"unknown image id {image_id!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def has_label(self, image_id: str) -> bool:
        return image_id in self._labels

    def exemplar_label(self) -> Contour:
        """The one label training is allowed to read."""
        if self.exemplar_id is None:
            raise DataError("no exemplar designated")
        if self.exemplar_id not in self._labels:
            raise DataError(f"exemplar {self.exemplar_id!r} has no label")
        return self._labels[self.exemplar_id]

    def ground_truth(self, image_id: str) -> Contour:
        """Evaluation-only access to quarantined ground truth."""
        if image_id not in self._labels:
            raise DataError(f"no ground truth for {image_id!r}")
        return self._labels[image_id]

    def labeled_ids(self) -> list[str]:
        return sorted(self._labels)

    def set_corrections(self, corrections: dict[str, list[PartialCorrection]]) -> None:
        for s in self.samples:
            if s.id in corrections:
                s.corrections = list(corrections[s.id])


# ---------------------------------------------------------------------------
# Image and corrections file IO


def read_image(path) -> np.ndarray:
    """Load a grayscale PNG/PGM as float64 in [0,1]; rejects multi-channel images."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.float64) / 255.0
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.float64)
            return arr / 65535.0
        raise DataError(f"{path}: expected a single-channel image, got mode {img.mode!r}")


def write_image(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as 16-bit grayscale PNG (or 8-bit PGM by extension)."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    path = Path(path)
    if path.suffix == ".pgm":
        arr = np.round(image * 255.0).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
    else:
        arr = np.round(image * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)  # uint16 -> 16-bit grayscale PNG


def quantize16(image: np.ndarray) -> np.ndarray:
    """Snap to the 16-bit grid used on disk, so saved and in-memory data agree."""
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def load_corrections_file(path, image_id: str) -> list[PartialCorrection]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("image") != image_id:
        raise DataError(f"{path}: image field {payload.get('image')!r} != {image_id!r}")
    out = []
    for seg in payload.get("segments", []):
        out.append(
            PartialCorrection(
                image_id=image_id,
                points=np.asarray(seg["points"], dtype=np.float64),
                author=seg.get("author", "human"),
                closed=bool(seg.get("closed", False)),
                created_at=seg.get("created_at"),
            )
        )
    return out


def save_corrections_file(path, image_id: str, corrections: list[PartialCorrection]) -> None:
    segments = []
    for c in corrections:
        seg = {"author": c.author, "points": c.points.tolist()}
        if c.closed:
            seg["closed"] = True
        if c.created_at is not None:
            seg["created_at"] = c.created_at
        segments.append(seg)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"image": image_id, "segments": segments}, fh)


# ---------------------------------------------------------------------------
# Dataset load/save


def load_dataset(root) -> Dataset:
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    samples = []
    seen: dict[str, Path] = {}
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() not in (".png", ".pgm"):
            continue
        if path.stem in seen:
            raise DataError(f"duplicate image id {path.stem!r}: {seen[path.stem].name} and {path.name}")
        seen[path.stem] = path
        samples.append(Sample(id=path.stem, image=read_image(path)))
    labels: dict[str, Contour] = {}
    labels_dir = root / "labels"
    if labels_dir.is_dir():
        for path in sorted(labels_dir.glob("*.contour.json")):
            lid = path.name[: -len(".contour.json")]
            labels[lid] = load_contour(path)
    corrections_dir = root / "corrections"
    corr: dict[str, list[PartialCorrection]] = {}
    if corrections_dir.is_dir():
        for path in sorted(corrections_dir.glob("*.corrections.json")):
            cid = path.name[: -len(".corrections.json")]
            corr[cid] = load_corrections_file(path, cid)
    meta = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    ds = Dataset(samples, labels, exemplar_id=meta.get("exemplar"), meta=meta)
    for cid, segs in corr.items():
        if cid not in set(ds.ids()):
            raise DataError(f"corrections for unknown image {cid!r}")
    ds.set_corrections(corr)
    return ds


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    (root / "corrections").mkdir(exist_ok=True)
    for s in dataset.samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        if s.corrections:
            save_corrections_file(root / "corrections" / f"{s.id}.corrections.json", s.id, s.corrections)
    for lid in dataset.labeled_ids():
        save_contour(root / "labels" / f"{lid}.contour.json", dataset.ground_truth(lid))
    meta = dict(dataset.meta)
    meta["exemplar"] = dataset.exemplar_id
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Synthetic corpus


def _lowpass_radial_noise(rng: np.random.Generator, n: int, keep: int = 5) -> np.ndarray:
    """Unit-std circular noise bandlimited to harmonics 2..keep."""
    raw = rng.standard_normal(n)
    spec = np.fft.rfft(raw)
    spec[0] = 0.0
    spec[1] = 0.0
    spec[keep + 1 :] = 0.0
    smooth = np.fft.irfft(spec, n)
    std = smooth.std()
    return smooth / (std if std > 0 else 1.0)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _signed_distance(points: np.ndarray, poly: np.ndarray, inside: np.ndarray) -> np.ndarray:
    a = poly
    d = np.roll(poly, -1, axis=0) - poly
    len2 = (d ** 2).sum(axis=1)
    len2[len2 == 0] = 1.0
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * d[None]).sum(axis=2) / len2[None], 0.0, 1.0)
    closest = a[None] + t[:, :, None] * d[None]
    dist = np.sqrt(((points[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    return np.where(inside, -dist, dist)


def generate_synthetic(count: int, size: int = 64, noise: float = 0.02, seed: int = 0,
                       n_vertices: int = 64, family: str = "blob",
                       blur: float = 1.5) -> Dataset:
    """Render ``count`` smooth-blob images with ground-truth contours.

    Blobs are star polygons with bandlimited per-vertex radial perturbation
    under a bounded random affine pose. Interiors are 0.25, exteriors 0.75,
    with the boundary smoothed over a +-``blur`` px band and optional Gaussian
    pixel noise. Deterministic given the seed; ground truth is stored for all
    images but only ever read through the evaluation path.
    """
    if count < 2:
        raise DataError("synthetic corpus needs count >= 2")
    if family != "blob":
        raise DataError(f"unknown shape family {family!r}")
    rng = np.random.default_rng(seed)
    boundary_samples = 256
    theta = np.linspace(0.0, 2.0 * np.pi, boundary_samples, endpoint=False)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    center = (size - 1) / 2.0
    samples = []
    labels = {}
    for i in range(count):
        radius = size * rng.uniform(0.25, 0.32)
        amp = rng.uniform(0.06, 0.12)
        wobble = _lowpass_radial_noise(rng, boundary_samples, keep=6)
        r = radius * (1.0 + amp * wobble)
        base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        phi = rng.uniform(-0.3, 0.3)
        sx, sy = rng.uniform(0.87, 1.13, 2)
        shift = rng.uniform(-5.0, 5.0, 2)
        rot = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
        poly = (base * [sx, sy]) @ rot.T + center + shift
        inside = rasterize(Contour(poly), size, size).ravel()
        sd = _signed_distance(pixels, poly, inside)
        img = 0.25 + 0.5 * _smoothstep((sd + blur) / (2.0 * blur))
        if noise > 0:
            img = img + rng.normal(0.0, noise, img.shape)
        img = quantize16(img.reshape(size, size))
        sid = f"img_{i:03d}"
        samples.append(Sample(id=sid, image=img))
        labels[sid] = resample_uniform(poly, n_vertices, closed=True)
    meta = {
        "provenance": f"synthetic/{family} count={count} size={size} noise={noise} seed={seed}",
        "n": n_vertices,
    }
    return Dataset(samples, labels, exemplar_id=None, meta=meta)


# ---------------------------------------------------------------------------
# Exemplar selection


def select_exemplar(dataset: Dataset, extractor: PerceptualExtractor | None = None) -> str:
    """Id of the image whose summed feature distance to all others is smallest.

    Feature vector per image: spatial mean of each frozen perceptual channel,
    concatenated across levels. Ties break toward the lexicographically
    smaller id.
    """
    if len(dataset) < 2:
        raise DataError("exemplar selection needs at least 2 images")
    extractor = extractor or PerceptualExtractor.default()
    feats = []
    for s in dataset.samples:
        levels = extractor.extract(s.image)
        feats.append(np.concatenate([lv.fmap.mean(axis=(1, 2)) for lv in levels]))
    feats = np.stack(feats)
    dists = np.sqrt(((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=2))
    totals = dists.sum(axis=1)
    best = int(np.argmin(totals))  # argmin takes the first minimum; ids are sorted
    return dataset.samples[best].id


# ---------------------------------------------------------------------------
# Simulated human corrections


def _circular_runs(marked: np.ndarray) -> list[np.ndarray]:
    n = marked.size
    if marked.all():
        return [np.arange(n)]
    if not marked.any():
        return []
    start = int(np.argmin(marked))  # an unmarked anchor to cut the circle
    order = (start + np.arange(n)) % n
    runs, current = [], []
    for idx in order:
        if marked[idx]:
            current.append(idx)
        elif current:
            runs.append(np.array(current))
            current = []
    if current:
        runs.append(np.array(current))
    return runs


def simulate_corrections(predictions: dict[str, Contour], ground_truth: dict[str, Contour],
                         fraction: float, mode: str = "partial",
                         tau: float = 3.0) -> dict[str, list[PartialCorrection]]:
    """Simulate annotator feedback on the worst-predicted images.

    Images are ranked by Hausdorff error (descending) and the top
    ceil(fraction * count) selected. ``mode="full"`` attaches the whole ground
    truth as one closed correction; ``mode="partial"`` emits the maximal
    ground-truth arcs whose vertices sit more than ``tau`` px from the
    prediction, each extended by one vertex on both ends so segments overlap
    the good stretches slightly.
    """
    if set(predictions) != set(ground_truth):
        raise DataError("prediction and ground-truth ids differ")
    if mode not in ("full", "partial"):
        raise DataError(f"unknown mode {mode!r}")
    ids = sorted(predictions)
    if fraction <= 0 or not ids:
        return {}
    errors = {i: hausdorff(predictions[i], ground_truth[i]) for i in ids}
    ranked = sorted(ids, key=lambda i: (-errors[i], i))
    chosen = ranked[: math.ceil(fraction * len(ids))]
    out: dict[str, list[PartialCorrection]] = {}
    for sid in chosen:
        gt = ground_truth[sid].points
        if mode == "full":
            out[sid] = [PartialCorrection(sid, gt, author="simulated", closed=True)]
            continue
        tree = cKDTree(predictions[sid].points)
        dist = tree.query(gt)[0]
        marked = dist > tau
        segments = []
        n = gt.shape[0]
        for run in _circular_runs(marked):
            if run.size >= n:
                segments.append(PartialCorrection(sid, gt, author="simulated", closed=True))
                continue
            ext = np.concatenate(([(run[0] - 1) % n], run, [(run[-1] + 1) % n]))
            segments.append(PartialCorrection(sid, gt[ext], author="simulated"))
        if segments:
            out[sid] = segments
    return out
