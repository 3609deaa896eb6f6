"""Differentiable contour losses and their supporting systems.

Four losses drive contour evolution: a perceptual loss (L1 between frozen
filter-bank features sampled at corresponding vertices), a thin-plate-spline
bending energy against the exemplar shape, an edge loss (negative image
gradient magnitude along the contour), and a one-directional Chamfer loss
against human-drawn partial corrections. All are scalar ``Tensor`` outputs
differentiable with respect to predicted vertex coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import diffcore as dc
from .contour import Contour, match_segment
from .errors import DataError, GeometryError, NumericError

__all__ = [
    "TpsSystem",
    "LossWeights",
    "FeatureLevel",
    "PerceptualExtractor",
    "tps_build",
    "contour_bending_loss",
    "sobel_gradient_magnitude",
    "edge_loss",
    "edge_loss_from_gradmag",
    "contour_perceptual_loss",
    "partial_matching_loss",
    "total_loss",
]

FEAT_MAGIC = b"CTNFEAT1"


@dataclass(frozen=True)
class LossWeights:
    """Weighting factors for the four loss terms."""

    perceptual: float = 1.0
    bending: float = 0.25
    edge: float = 0.1
    matching: float = 1.0

    def validate(self) -> "LossWeights":
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {v}")
        return self


# ---------------------------------------------------------------------------
# Thin-plate-spline bending energy


@dataclass(frozen=True)
class TpsSystem:
    """Precomputed TPS matrices for one exemplar contour.

    K[i,j] = r^2 log r with r the distance between source vertices i and j
    (0 on the diagonal), Pmat = (1, x', y'), L = [[K, P], [P^T, 0]], and H is
    the N x N upper-left submatrix of L^-1. H is symmetric PSD with the affine
    functions of the source coordinates in its null space.
    """

    source: np.ndarray
    K: np.ndarray
    Pmat: np.ndarray
    L: np.ndarray
    H: np.ndarray

    @property
    def n(self) -> int:
        return self.source.shape[0]


def tps_build(exemplar) -> TpsSystem:
    """Assemble the TPS system for an exemplar contour (N >= 4, distinct points)."""
    src = np.asarray(getattr(exemplar, "points", exemplar), dtype=np.float64)
    n = src.shape[0]
    if src.ndim != 2 or src.shape[1] != 2 or n < 4:
        raise GeometryError("TPS needs at least 4 source points")
    diff = src[:, None, :] - src[None, :, :]
    r2 = (diff ** 2).sum(axis=2)
    off = ~np.eye(n, dtype=bool)
    if r2[off].min() <= 1e-20:
        raise NumericError("degenerate TPS system")
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.where(off, 0.5 * r2 * np.log(np.where(off, r2, 1.0)), 0.0)
    Pmat = np.column_stack([np.ones(n), src[:, 0], src[:, 1]])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = Pmat
    L[n:, :n] = Pmat.T
    rhs = np.zeros((n + 3, n))
    rhs[:n, :n] = np.eye(n)
    try:
        H = np.linalg.solve(L, rhs)[:n, :n]
    except np.linalg.LinAlgError as exc:
        raise NumericError("degenerate TPS system") from exc
    if not np.all(np.isfinite(H)):
        raise NumericError("degenerate TPS system")
    H = 0.5 * (H + H.T)
    # project out the affine null space exactly; rounding in the solve
    # otherwise leaks tiny energies on affine targets
    q, _ = np.linalg.qr(Pmat)
    H = H - q @ (q.T @ H)
    H = H - (H @ q) @ q.T
    H = 0.5 * (H + H.T)
    return TpsSystem(source=src, K=K, Pmat=Pmat, L=L, H=H)


def contour_bending_loss(system: TpsSystem, predicted) -> dc.Tensor:
    """max[(x^T H x + y^T H y) / 8pi, 0] for predicted vertices (N,2)."""
    pred = dc._as_tensor(predicted)
    if pred.value.shape != (system.n, 2):
        raise ValueError(
            f"vertex count mismatch: TPS system has {system.n}, prediction {pred.value.shape}"
        )
    h = dc.constant(system.H, name="tps_H")
    # x^T H x + y^T H y == sum(P * (H @ P)) for P = [x | y]
    quad = dc.reduce_sum(dc.mul(pred, dc.matmul(h, pred)))
    return dc.max_with_zero(dc.smul(quad, 1.0 / (8.0 * np.pi)))


# ---------------------------------------------------------------------------
# Frozen perceptual feature extractor


@dataclass(frozen=True)
class FeatureLevel:
    level: int
    stride: int
    fmap: np.ndarray  # (C, H, W)


# response gain of the filter bank; keeps the summed perceptual gradients from
# drowning the edge term near the boundary at the default loss weights
FILTER_GAIN = 0.1


def _gaussian_derivative_filters(size: int = 7) -> np.ndarray:
    """16 oriented first/second Gaussian-derivative filters, zero-mean, L2 norm FILTER_GAIN."""
    half = size // 2
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    filters = []
    for sigma in (2.5, 3.5):
        g = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
        gx = -xx / sigma ** 2 * g
        gy = -yy / sigma ** 2 * g
        for theta in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4):
            filters.append(np.cos(theta) * gx + np.sin(theta) * gy)
        gxx = (xx ** 2 / sigma ** 4 - 1.0 / sigma ** 2) * g
        gyy = (yy ** 2 / sigma ** 4 - 1.0 / sigma ** 2) * g
        gxy = xx * yy / sigma ** 4 * g
        for theta in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4):
            c, s = np.cos(theta), np.sin(theta)
            filters.append(c * c * gxx + 2 * c * s * gxy + s * s * gyy)
    bank = np.stack(filters)  # (16, size, size)
    bank -= bank.mean(axis=(1, 2), keepdims=True)
    bank *= FILTER_GAIN / np.linalg.norm(bank.reshape(len(bank), -1), axis=1)[:, None, None]
    return bank[:, None, :, :]  # (16, 1, size, size)


def _orthonormal_mixing(seed: int, out_channels: int = 32, in_channels: int = 16, k: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((in_channels * k * k, out_channels))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # fix QR sign ambiguity for reproducibility
    return q.T.reshape(out_channels, in_channels, k, k)


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Plain (non-AD) conv of (C,H,W) with (OC,C,kh,kw), replicate padding."""
    oc, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), mode="edge")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    _, oh, ow = win.shape[:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    return (cols @ w.reshape(oc, -1).T).T.reshape(oc, oh, ow)


class PerceptualExtractor:
    """Frozen two-level convolutional filter bank.

    Level 1: 16 oriented Gaussian-derivative 7x7 filters at stride 1.
    Level 2: 32 channels at stride 2 from fixed random orthonormal 3x3
    convolutions over level 1, followed by relu. Weights come from a fixed
    seed and travel with every checkpoint; ``load`` accepts externally trained
    weights of the same topology.
    """

    DEFAULT_SEED = 20240
    MIN_SIZE = 8

    def __init__(self, level1: np.ndarray, level2: np.ndarray):
        level1 = np.asarray(level1, dtype=np.float64)
        level2 = np.asarray(level2, dtype=np.float64)
        if level1.ndim != 4 or level1.shape[1] != 1 or level2.ndim != 4 or level2.shape[1] != level1.shape[0]:
            raise DataError(f"bad extractor weight shapes {level1.shape}, {level2.shape}")
        self.level1 = level1
        self.level2 = level2

    @classmethod
    def default(cls, seed: int = DEFAULT_SEED) -> "PerceptualExtractor":
        return cls(_gaussian_derivative_filters(), _orthonormal_mixing(seed))

    @property
    def channels(self) -> tuple[int, int]:
        return self.level1.shape[0], self.level2.shape[0]

    def extract(self, image: np.ndarray) -> list[FeatureLevel]:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise DataError(f"expected a single-channel image, got shape {image.shape}")
        if min(image.shape) < self.MIN_SIZE:
            raise DataError(f"image too small for feature extraction: {image.shape}")
        k1 = self.level1.shape[2]
        f1 = _conv_raw(image[None], self.level1, stride=1, padding=k1 // 2)
        f2 = _conv_raw(f1, self.level2, stride=2, padding=1)
        np.maximum(f2, 0.0, out=f2)
        return [FeatureLevel(1, 1, f1), FeatureLevel(2, 2, f2)]

    def vertex_features(self, levels: list[FeatureLevel], points: np.ndarray,
                        use_levels: tuple[int, ...] = (1, 2)) -> np.ndarray:
        """Bilinear samples at vertex pixel coordinates, concatenated across levels."""
        pts = dc.constant(np.asarray(points, dtype=np.float64))
        parts = [
            dc.bilinear_sample(dc.constant(lv.fmap), dc.smul(pts, 1.0 / lv.stride))
            for lv in levels
            if lv.level in use_levels
        ]
        return np.concatenate([p.value for p in parts], axis=1)

    def save(self, path) -> None:
        """CTNFEAT1 container: magic, u32 LE header length, header JSON
        (then, concatenated in order, one little-endian float32 blob per level).
        Header: {"levels": [{"level": int, "stride": int, "shape": [..]}...]}.
        """
        header = {
            "levels": [
                {"level": 1, "stride": 1, "shape": list(self.level1.shape)},
                {"level": 2, "stride": 2, "shape": list(self.level2.shape)},
            ]
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(FEAT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(self.level1.astype("<f4").tobytes())
            fh.write(self.level2.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PerceptualExtractor":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != FEAT_MAGIC:
                raise DataError(f"not a CTNFEAT1 file: {path}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            weights = []
            for lv in header["levels"]:
                shape = tuple(lv["shape"])
                count = int(np.prod(shape))
                weights.append(np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape).astype(np.float64))
        if len(weights) != 2:
            raise DataError("CTNFEAT1 file must hold exactly 2 levels")
        return cls(*weights)


# ---------------------------------------------------------------------------
# Edge loss


def sobel_gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude via 3x3 Sobel kernels scaled by 1/8.

    The scaling makes a unit intensity ramp yield magnitude exactly 1.
    Borders use replicate padding.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 3:
        raise DataError(f"image must be 2-D and at least 3x3, got {image.shape}")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
    gx = ndimage.correlate(image, kx, mode="nearest")
    gy = ndimage.correlate(image, kx.T, mode="nearest")
    return np.hypot(gx, gy)


def edge_loss_from_gradmag(gradmag: np.ndarray, predicted) -> dc.Tensor:
    """-(1/N) * sum of gradient magnitude bilinearly sampled at the vertices."""
    pred = dc._as_tensor(predicted)
    n = pred.value.shape[0]
    sampled = dc.bilinear_sample(dc.constant(gradmag[None]), pred)
    return dc.smul(dc.reduce_sum(sampled), -1.0 / n)


def edge_loss(image: np.ndarray, predicted) -> dc.Tensor:
    return edge_loss_from_gradmag(sobel_gradient_magnitude(image), predicted)


# ---------------------------------------------------------------------------
# Perceptual loss


def contour_perceptual_loss(target_levels: list[FeatureLevel], exemplar_vertex_feats: np.ndarray,
                            predicted, use_levels: tuple[int, ...] = (1, 2),
                            normalized: bool = False) -> dc.Tensor:
    """Sum over vertices of the L1 feature distance to the exemplar's vertices.

    Prediction vertex i pairs with exemplar vertex i. Gradients flow only
    through the sampling coordinates; the feature maps are frozen. The
    default compares raw (unnormalized) concatenated features; ``normalized``
    switches both sides to per-vertex unit L2 vectors.
    """
    pred = dc._as_tensor(predicted)
    n = pred.value.shape[0]
    selected = [lv for lv in target_levels if lv.level in use_levels]
    width = sum(lv.fmap.shape[0] for lv in selected)
    ref = np.asarray(exemplar_vertex_feats, dtype=np.float64)
    if ref.shape != (n, width):
        raise ValueError(f"feature/vertex mismatch: expected {(n, width)}, got {ref.shape}")
    parts = [
        dc.bilinear_sample(dc.constant(lv.fmap), dc.smul(pred, 1.0 / lv.stride))
        for lv in selected
    ]
    sampled = parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)
    if normalized:
        sampled = dc.row_l2_normalize(sampled)
        norms = np.linalg.norm(ref, axis=1, keepdims=True)
        ref = ref / np.maximum(norms, 1e-12)
    return dc.l1_norm(dc.sub(sampled, dc.constant(ref)))


# ---------------------------------------------------------------------------
# Partial contour matching (one-directional Chamfer)


def partial_matching_loss(corrections, predicted, matches=None) -> dc.Tensor:
    """(1/N) sum over corrections of the Chamfer distance from the matched
    predicted sub-chain to the correction points.

    Correspondences come from ``match_segment`` on the current prediction and
    are treated as fixed during backward; pass ``matches`` to reuse frozen
    ones. A closed correction covers the whole contour (full-label case).
    The sum over sub-chain points runs one-directionally, prediction to
    correction.
    """
    pred = dc._as_tensor(predicted)
    n = pred.value.shape[0]
    corrections = list(corrections)
    if not corrections:
        return dc.constant(0.0)
    if matches is None:
        matches = compute_matches(corrections, pred.value)
    total = None
    for corr, (chain, nearest) in zip(corrections, matches):
        pts = np.asarray(getattr(corr, "points", corr), dtype=np.float64)
        diff = dc.sub(dc.gather_rows(pred, chain), dc.constant(pts[nearest]))
        dist = dc.sqrt(dc.reduce_sum(dc.mul(diff, diff), axis=1))
        term = dc.reduce_sum(dist)
        total = term if total is None else dc.add(total, term)
    return dc.smul(total, 1.0 / n)


def compute_matches(corrections, predicted_points: np.ndarray):
    """Per-correction (chain, nearest-correction-index) pairs for the current prediction."""
    contour = Contour(predicted_points, closed=True)
    n = predicted_points.shape[0]
    out = []
    for corr in corrections:
        pts = np.asarray(getattr(corr, "points", corr), dtype=np.float64)
        if getattr(corr, "closed", False):
            chain = np.arange(n)
            d2 = ((predicted_points[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argmin(d2, axis=1)
        else:
            m = match_segment(pts, contour)
            chain, nearest = m.chain, m.nearest
        out.append((chain, nearest))
    return out


# ---------------------------------------------------------------------------
# Weighted total


def total_loss(weights: LossWeights, perceptual, bending, edge, matching=None) -> dc.Tensor:
    """lambda1*Lperc + lambda2*Lbend + lambda3*Ledge (+ lambda4*Lpcm when present)."""
    weights.validate()
    out = dc.add(
        dc.add(
            dc.smul(dc._as_tensor(perceptual), weights.perceptual),
            dc.smul(dc._as_tensor(bending), weights.bending),
        ),
        dc.smul(dc._as_tensor(edge), weights.edge),
    )
    if matching is not None:
        out = dc.add(out, dc.smul(dc._as_tensor(matching), weights.matching))
    return out
