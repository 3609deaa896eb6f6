"""Contour basics: resampling, placement, rasterization, and the two metrics.

Run:  python3 demos/01_contour_geometry.py
"""

import numpy as np

from ctn.contour import (
    center_initialize,
    hausdorff,
    iou,
    match_segment,
    rasterize,
    resample_uniform,
)

rng = np.random.default_rng(0)

# An uneven 12-gon resampled to 64 uniformly spaced vertices.
angles = np.sort(rng.uniform(0, 2 * np.pi, 12))
radii = 20 * rng.uniform(0.7, 1.3, 12)
ragged = np.stack([32 + radii * np.cos(angles), 32 + radii * np.sin(angles)], axis=1)
contour = resample_uniform(ragged, 64)
chords = np.linalg.norm(np.roll(contour.points, -1, axis=0) - contour.points, axis=1)
print(f"resampled 12-gon -> 64 vertices, arc step {contour.perimeter() / 64:.3f} px "
      f"(mean chord {chords.mean():.3f}, shorter where corners fall between vertices)")

# Drop it onto a 96x96 canvas and rasterize.
placed = center_initialize(contour, 96, 96)
mask = rasterize(placed, 96, 96)
print(f"centered at {placed.centroid.round(2)}, mask covers {mask.sum()} px")

# Metrics against a shifted copy.
shifted = placed.translated((2.5, -1.0))
print(f"IoU vs shifted copy:       {iou(mask, rasterize(shifted, 96, 96)):.4f}")
print(f"Hausdorff vs shifted copy: {hausdorff(placed, shifted):.4f} px "
      f"(= |t| = {np.hypot(2.5, 1.0):.4f})")

# Correction matching: a short stroke near one arc selects that sub-chain.
stroke = placed.points[10:18] + rng.normal(0, 0.3, (8, 2))
m = match_segment(stroke, placed)
print(f"stroke matched sub-chain {m.chain[0]}..{m.chain[-1]} "
      f"({len(m.chain)} vertices), nearest stroke point per vertex: {m.nearest[:8]}...")
