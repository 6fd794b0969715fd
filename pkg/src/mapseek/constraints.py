"""Constraint masks for the voxel solution space.

Masks are sparse fields with values in (0, 1]; a cell absent from the mask
is fully suppressed. Builders here cover the three constraint kinds used
by the pose pipeline: line-of-view columns through known joint image
positions, hard obstacle exclusion, and the gravity support region that
pins standing poses to the ground segment between the feet.
"""

from __future__ import annotations

import numpy as np

from .fields import SparseField

__all__ = [
    "line_of_view_mask",
    "multi_lobe_mask",
    "obstacle_mask",
    "boxes_to_voxels",
    "gravity_support_mask",
    "GravitySupportMask",
    "estimate_center_of_mass",
    "compose_masks",
]

UP_AXIS = 1      # y points up
DEPTH_AXIS = 2   # z is collapsed by the orthographic projection


def line_of_view_mask(shape3d, joint2d, blur_sigma=1.5, floor=0.2):
    """Mask favoring the depth column through one joint's image position.

    Value 1 along the exact (x, y) column, Gaussian falloff transverse to
    it, clamped below at `floor` (occluded joints are inhibited, never
    hard-zeroed, when floor > 0). blur_sigma <= 0 degenerates to the exact
    column plus the floor elsewhere.
    """
    return multi_lobe_mask(shape3d, [joint2d], blur_sigma, floor)


def multi_lobe_mask(shape3d, joints2d, blur_sigma=1.5, floor=0.2):
    """Elementwise max of line-of-view lobes, clamped below at floor."""
    if not (0.0 <= floor <= 1.0):
        raise ValueError("floor must lie in [0, 1]")
    x, y, z = shape3d
    gx, gy = np.meshgrid(np.arange(x), np.arange(y), indexing="ij")
    best = np.zeros((x, y), dtype=np.float64)
    for joint in joints2d:
        jx, jy = float(joint[0]), float(joint[1])
        if not (0 <= jx < x and 0 <= jy < y):
            raise ValueError(f"joint image position {joint} outside the grid")
        d2 = (gx - jx) ** 2 + (gy - jy) ** 2
        if blur_sigma > 0:
            lobe = np.exp(-d2 / (2.0 * blur_sigma ** 2))
        else:
            lobe = (d2 == 0).astype(np.float64)
        np.maximum(best, lobe, out=best)
    plane = np.maximum(best, floor)
    dense = np.repeat(plane[:, :, None], z, axis=2)
    return SparseField.from_dense(dense)


def boxes_to_voxels(shape3d, boxes):
    """Voxel set covered by axis-aligned boxes given as {min: [..], max: [..]}
    with inclusive corners."""
    cells = []
    for box in boxes:
        lo = np.maximum(np.asarray(box["min"], dtype=np.int64), 0)
        hi = np.minimum(np.asarray(box["max"], dtype=np.int64),
                        np.asarray(shape3d, dtype=np.int64) - 1)
        if np.any(hi < lo):
            continue
        xs, ys, zs = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
        g = np.meshgrid(xs, ys, zs, indexing="ij")
        cells.append(np.stack([a.ravel() for a in g], axis=1))
    if not cells:
        return np.empty((0, 3), dtype=np.int64)
    return np.unique(np.concatenate(cells), axis=0)


def obstacle_mask(shape3d, obstacle_voxels):
    """Ones everywhere except the obstacle voxels, which are removed."""
    total = int(np.prod(shape3d))
    obstacle_voxels = np.atleast_2d(np.asarray(obstacle_voxels, dtype=np.int64))
    if obstacle_voxels.size == 0:
        return SparseField((tuple(shape3d)), np.arange(total, dtype=np.int64),
                           np.ones(total))
    for ax, n in enumerate(shape3d):
        col = obstacle_voxels[:, ax]
        if np.any(col < 0) or np.any(col >= n):
            raise ValueError("obstacle voxel outside the grid")
    blocked = np.ravel_multi_index(tuple(obstacle_voxels.T), tuple(shape3d))
    keep = np.setdiff1d(np.arange(total, dtype=np.int64), blocked)
    return SparseField(tuple(shape3d), keep, np.ones(keep.size))


class GravitySupportMask:
    """Support-region mask plus the static-stability diagnostic."""

    def __init__(self, mask, stable, com_distance):
        self.mask = mask
        self.stable = bool(stable)
        self.com_distance = float(com_distance)

    @property
    def diagnostic(self):
        return None if self.stable else "statically-unstable"


def gravity_support_mask(shape3d, com, feet, ground_y, radius):
    """Permissible end-effector region for the supporting limbs.

    The region is the ground-plane (y == ground_y) set of cells within
    `radius` of the segment between the two support loci; everything else,
    including all off-plane cells, is suppressed. Identical feet degrade to
    a disc. The center of mass is projected vertically onto the plane; if
    the projection falls outside the region the pose is flagged
    statically-unstable (a diagnostic, not an error).
    """
    shape3d = tuple(int(n) for n in shape3d)
    ground_y = int(ground_y)
    if not (0 <= ground_y < shape3d[UP_AXIS]):
        raise ValueError("ground plane outside the grid")
    f0 = np.asarray(feet[0], dtype=np.float64)
    f1 = np.asarray(feet[1], dtype=np.float64)
    for f in (f0, f1):
        if f[UP_AXIS] < ground_y:
            raise ValueError("support locus below the ground plane")
    # work in ground-plane coordinates (x, z)
    a = np.array([f0[0], f0[DEPTH_AXIS]])
    b = np.array([f1[0], f1[DEPTH_AXIS]])
    xs = np.arange(shape3d[0])
    zs = np.arange(shape3d[DEPTH_AXIS])
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gz.ravel()], axis=1).astype(np.float64)
    dist = _point_segment_distance(pts, a, b)
    sel = dist <= float(radius)
    cells = np.stack([
        pts[sel, 0].astype(np.int64),
        np.full(int(sel.sum()), ground_y, dtype=np.int64),
        pts[sel, 1].astype(np.int64),
    ], axis=1)
    mask = SparseField.from_points(shape3d, cells, 1.0) if cells.size else \
        SparseField.empty(shape3d)
    com = np.asarray(com, dtype=np.float64)
    com_plane = np.array([com[0], com[DEPTH_AXIS]])
    com_dist = float(_point_segment_distance(com_plane[None, :], a, b)[0])
    return GravitySupportMask(mask, com_dist <= float(radius), com_dist)


def _point_segment_distance(pts, a, b):
    seg = b - a
    denom = float(seg @ seg)
    rel = pts - a
    if denom == 0.0:
        return np.linalg.norm(rel, axis=1)
    t = np.clip(rel @ seg / denom, 0.0, 1.0)
    return np.linalg.norm(rel - t[:, None] * seg, axis=1)


def estimate_center_of_mass(model, pose):
    """Mass-weighted mean of segment midpoints.

    Per-segment mass fractions come from the skeleton definition; a missing
    fraction is a configuration error.
    """
    total = 0.0
    acc = np.zeros(3, dtype=np.float64)
    for name, (prox, distal) in pose.joints.items():
        seg = model.segments[name]
        if seg.mass is None:
            raise ValueError(
                f"segment {name!r} has no mass fraction in the skeleton file")
        mid = (np.asarray(prox, dtype=np.float64)
               + np.asarray(distal, dtype=np.float64)) / 2.0
        acc += seg.mass * mid
        total += seg.mass
    if total <= 0:
        raise ValueError("total mass must be positive")
    return acc / total


def compose_masks(*masks):
    """Pointwise product of masks; never increases any value."""
    masks = [m for m in masks if m is not None]
    if not masks:
        return None
    out = masks[0]
    for m in masks[1:]:
        out = out.mul(m)
    return out
