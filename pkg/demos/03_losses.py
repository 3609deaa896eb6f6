"""The four contour losses on a toy scene.

Run:  python3 demos/03_losses.py
"""

import numpy as np

import ctn.diffcore as dc
from ctn.contour import resample_uniform
from ctn.dataio import generate_synthetic
from ctn.losses import (
    LossWeights,
    PerceptualExtractor,
    contour_bending_loss,
    contour_perceptual_loss,
    edge_loss,
    partial_matching_loss,
    total_loss,
    tps_build,
)

ds = generate_synthetic(count=2, size=64, noise=0.02, seed=5, n_vertices=64)
exemplar, target = ds.samples
exemplar_contour = ds.ground_truth(exemplar.id)
target_gt = ds.ground_truth(target.id)

# TPS bending: zero for any affine image of the exemplar, positive otherwise.
system = tps_build(exemplar_contour)
affine = exemplar_contour.points @ np.array([[1.1, 0.2], [-0.1, 0.9]]).T + [4.0, -2.0]
dent = exemplar_contour.points.copy()
dent[10] += (4.0, 0.0)
print(f"bending(affine warp)    = {float(contour_bending_loss(system, dc.constant(affine)).value):.2e}")
print(f"bending(4px dent)       = {float(contour_bending_loss(system, dc.constant(dent)).value):.4f}")

# Perceptual: frozen filter-bank features at corresponding vertices.
extractor = PerceptualExtractor.default()
exemplar_feats = extractor.vertex_features(extractor.extract(exemplar.image),
                                           exemplar_contour.points)
target_levels = extractor.extract(target.image)
at_gt = contour_perceptual_loss(target_levels, exemplar_feats, dc.constant(target_gt.points))
off = contour_perceptual_loss(target_levels, exemplar_feats,
                              dc.constant(target_gt.points + [5.0, 3.0]))
print(f"perceptual(at boundary) = {float(at_gt.value):.2f}   (5,3)px off = {float(off.value):.2f}")

# Edge: most negative when vertices ride the intensity gradient ridge.
on_edge = edge_loss(target.image, dc.constant(target_gt.points))
inside = edge_loss(target.image, dc.constant(
    resample_uniform((target_gt.points - target_gt.centroid) * 0.5 + target_gt.centroid, 64).points))
print(f"edge(on boundary)       = {float(on_edge.value):.4f}   shrunk inside = {float(inside.value):.4f}")

# Partial matching: one-directional Chamfer to a drawn stroke.
stroke = target_gt.points[20:30]
pred = target_gt.points + np.random.default_rng(0).normal(0, 1.5, (64, 2))
pcm = partial_matching_loss([stroke], dc.constant(pred))
print(f"chamfer to stroke       = {float(pcm.value):.4f}")

# The weighted combination used in training.
combo = total_loss(LossWeights(), at_gt, contour_bending_loss(system, dc.constant(dent)),
                   on_edge, pcm)
print(f"weighted total          = {float(combo.value):.4f}")
