"""Contour representation, resampling, rasterization, correspondence and metrics.

Coordinates are pixel coordinates: x grows rightward, y grows downward, and
integer coordinates sit on pixel centers. Closed contours are stored without
repeating the first vertex.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, GeometryError

__all__ = [
    "Contour",
    "SegmentMatch",
    "resample_uniform",
    "center_initialize",
    "rasterize",
    "iou",
    "hausdorff",
    "match_segment",
    "self_intersects",
    "save_contour",
    "load_contour",
    "write_mask_pgm",
    "read_mask_pgm",
]


@dataclass(frozen=True)
class Contour:
    """Ordered 2-D vertices; closed object contours or open correction segments."""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError(f"contour points must be (N,2), got {pts.shape}")
        minimum = 3 if self.closed else 2
        if pts.shape[0] < minimum:
            kind = "closed contour" if self.closed else "open segment"
            raise GeometryError(f"{kind} needs at least {minimum} vertices, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("contour has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        """Vertex mean. Resampled contours make this the perimeter centroid."""
        return self.points.mean(axis=0)

    def translated(self, offset) -> "Contour":
        return Contour(self.points + np.asarray(offset, dtype=np.float64), self.closed)

    def perimeter(self) -> float:
        seg = _segments(self.points, self.closed)
        return float(np.linalg.norm(seg, axis=1).sum())


@dataclass(frozen=True)
class SegmentMatch:
    """Correspondence between a correction segment and a predicted contour.

    ``chain`` are indices into the predicted contour, walking from the vertex
    nearest the correction start to the vertex nearest its end along the chosen
    arc; ``nearest`` holds, per chain vertex, the index of its closest
    correction point.
    """

    start: int
    end: int
    chain: np.ndarray = field(repr=False)
    nearest: np.ndarray = field(repr=False)


def _segments(points: np.ndarray, closed: bool) -> np.ndarray:
    if closed:
        return np.roll(points, -1, axis=0) - points
    return points[1:] - points[:-1]


def resample_uniform(points, n: int, closed: bool = True) -> Contour:
    """Resample a polyline to ``n`` vertices equally spaced by arc length.

    The first output vertex coincides with the first input vertex. Closed
    inputs are resampled over the full perimeter (no duplicated endpoint);
    open inputs keep both endpoints.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise GeometryError("need at least 2 points to resample")
    minimum = 3 if closed else 2
    if n < minimum:
        raise GeometryError(f"n must be >= {minimum}")
    seg = _segments(pts, closed)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    if total <= 0.0:
        raise GeometryError("degenerate contour")
    cum = np.concatenate(([0.0], np.cumsum(seg_len)))
    if closed:
        targets = np.arange(n) * (total / n)
    else:
        targets = np.arange(n) * (total / (n - 1))
        targets[-1] = total
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    denom = np.where(seg_len[idx] == 0.0, 1.0, seg_len[idx])
    t = ((targets - cum[idx]) / denom)[:, None]
    out = pts[idx] + t * seg[idx]
    out[0] = pts[0]
    return Contour(out, closed)


def center_initialize(exemplar: Contour, width: int, height: int) -> Contour:
    """Translate the exemplar so its centroid sits at the image center.

    Image center is ((w-1)/2, (h-1)/2) in pixel-center coordinates; no scaling
    or rotation is applied.
    """
    if width <= 0 or height <= 0:
        raise GeometryError("target dimensions must be positive")
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return exemplar.translated(center - exemplar.centroid)


def rasterize(contour: Contour, width: int, height: int) -> np.ndarray:
    """Binary mask of pixels whose centers lie inside the polygon (even-odd rule).

    Returns a (height, width) bool array; pixels outside image bounds are
    simply absent. Orientation-independent.
    """
    if not contour.closed:
        raise GeometryError("cannot rasterize open segment")
    pts = contour.points
    nxt = np.roll(pts, -1, axis=0)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    inside = np.zeros((height, width), dtype=bool)
    for (xa, ya), (xb, yb) in zip(pts, nxt):
        if ya == yb:
            continue
        # half-open rule on y so vertices are counted once
        rows = (ya > ys) != (yb > ys)
        if not rows.any():
            continue
        xint = xa + (ys[rows] - ya) * (xb - xa) / (yb - ya)
        inside[rows] ^= xs[None, :] < xint[:, None]
    return inside


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a∩b| / |a∪b| over equal-size binary masks; 1.0 if both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GeometryError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def hausdorff(a: Contour, b: Contour) -> float:
    """Symmetric Hausdorff distance between the two vertex sets."""
    pa, pb = a.points, b.points
    ta, tb = cKDTree(pa), cKDTree(pb)
    d_ab = tb.query(pa)[0].max()
    d_ba = ta.query(pb)[0].max()
    return float(max(d_ab, d_ba))


def match_segment(correction, predicted: Contour) -> SegmentMatch:
    """Match a correction polyline to the sub-chain of ``predicted`` it corrects.

    Start/end are the predicted vertices nearest the correction's endpoints.
    Of the two arcs joining them, the one with fewer vertices wins; on a tie,
    the arc containing the predicted vertex globally nearest to the correction.
    Every chain vertex is assigned its nearest correction point.
    """
    corr = np.asarray(getattr(correction, "points", correction), dtype=np.float64)
    if corr.ndim != 2 or corr.shape[1] != 2 or corr.shape[0] < 2:
        raise GeometryError("correction needs at least 2 points")
    if not predicted.closed:
        raise GeometryError("predicted contour must be closed")
    pred = predicted.points
    n = pred.shape[0]
    d2 = ((pred[:, None, :] - corr[None, :, :]) ** 2).sum(axis=2)
    start = int(np.argmin(d2[:, 0]))
    end = int(np.argmin(d2[:, -1]))
    fwd = (end - start) % n + 1
    bwd = (start - end) % n + 1
    if fwd < bwd:
        direction = 1
    elif bwd < fwd:
        direction = -1
    else:
        g = int(np.argmin(d2.min(axis=1)))
        on_fwd = (g - start) % n <= (end - start) % n
        direction = 1 if on_fwd else -1
    count = fwd if direction == 1 else bwd
    chain = (start + direction * np.arange(count)) % n
    nearest = np.argmin(d2[chain], axis=1)
    return SegmentMatch(start=start, end=end, chain=chain, nearest=nearest)


def _orient(p, q, r):
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
        r[..., 0] - p[..., 0]
    )


def self_intersects(contour: Contour) -> bool:
    """True if any two non-adjacent edges properly intersect.

    Detection only; the package never repairs self-intersections.
    """
    pts = contour.points
    n = pts.shape[0]
    a = pts
    b = np.roll(pts, -1, axis=0) if contour.closed else pts[1:]
    if not contour.closed:
        a = pts[:-1]
    m = a.shape[0]
    for i in range(m):
        p1, p2 = a[i], b[i]
        js = np.arange(i + 2, m)
        if contour.closed and i == 0:
            js = js[js != m - 1]
        if js.size == 0:
            continue
        q1, q2 = a[js], b[js]
        d1 = _orient(p1[None], p2[None], q1)
        d2 = _orient(p1[None], p2[None], q2)
        d3 = _orient(q1, q2, p1[None])
        d4 = _orient(q1, q2, p2[None])
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return True
    return False


def save_contour(path, contour: Contour) -> None:
    """Write the `.contour.json` format: {"closed": bool, "points": [[x,y],...]}."""
    payload = {"closed": bool(contour.closed), "points": contour.points.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_contour(path) -> Contour:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        return Contour(np.asarray(payload["points"], dtype=np.float64), bool(payload["closed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad contour file {path}: {exc}") from exc


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Export a binary mask as PGM (P5): 0 background, 255 foreground."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"not a P5 PGM: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return (raw.reshape(h, w) > maxval // 2)
