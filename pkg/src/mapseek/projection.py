"""Bridging 3D voxel space and the 2D image plane.

Azimuth/elevation rotations of voxel fields, orthographic projection along
the depth (z) axis, and per-segment contour rendering: each body segment's
2D appearance is the outline of a capsule around its projected axis, with
a per-variant half-width. The circuit-facing family decomposes a 3D field
against its current per-view axis hypotheses and swaps in the matching
outline (or, in the forward image-to-space direction, back-projects image
weight onto the candidate axis voxels); both directions are sums of rank-1
terms, so the pair is exactly adjoint.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import TransformFamily
from .fields import SparseField
from .transform2d import ResampleTransform, grid_center

__all__ = [
    "ViewFamilySpec",
    "MorphVariant",
    "rotation_matrix",
    "rotate_view",
    "rotate_points",
    "make_view_family",
    "view_angle_grid",
    "project_ortho",
    "project_point",
    "morph_project_segment",
    "render_figure",
    "SegmentContourFamily",
    "overlay_rgb",
]


def rotation_matrix(azimuth_deg, elevation_deg):
    """World rotation: azimuth about +y (vertical), then elevation about +x.

    Azimuth 90 maps +x onto -z (right-handed about the up axis).
    """
    a = math.radians(float(azimuth_deg))
    e = math.radians(float(elevation_deg))
    ca, sa = math.cos(a), math.sin(a)
    ce, se = math.cos(e), math.sin(e)
    ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return rx @ ry


def rotate_view(field, azimuth_deg, elevation_deg, center=None):
    """Rigid rotation of a voxel field about the grid center (nearest voxel)."""
    t = ResampleTransform(field.shape, rotation_matrix(azimuth_deg, elevation_deg),
                          center)
    return t.apply(field)


def rotate_points(points, azimuth_deg, elevation_deg, shape, center=None):
    """Exact (float) rotation of 3D loci about the grid center."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = grid_center(shape) if center is None else np.asarray(center, dtype=np.float64)
    r = rotation_matrix(azimuth_deg, elevation_deg)
    return (pts - c) @ r.T + c


class ViewFamilySpec:
    """Azimuth and elevation angle lists; the (0, 0) view must be present."""

    def __init__(self, azimuths, elevations):
        self.azimuths = [float(a) for a in azimuths]
        self.elevations = [float(e) for e in elevations]
        pairs = self.pairs()
        if (0.0, 0.0) not in pairs:
            raise ValueError("view family must include the identity view (0, 0)")

    def pairs(self):
        return [(a, e) for a in self.azimuths for e in self.elevations]

    def __len__(self):
        return len(self.azimuths) * len(self.elevations)


def view_angle_grid(az_step=1.0, el_step=1.0):
    """Full-circle azimuth x elevation grid at the given steps."""
    az = np.arange(0.0, 360.0, float(az_step))
    el = np.arange(0.0, 360.0, float(el_step))
    return [(float(a), float(e)) for a in az for e in el]


def make_view_family(shape, spec, center=None):
    """View-rotation stage family.

    The backward (model-to-camera) direction rotates by +(az, el); the
    forward direction is its exact transpose, geometrically the inverse
    rotation. Realized by push-resampling with the transposed matrix so the
    adjoint gather reproduces the pull-rotation by +(az, el).
    """
    from .transform2d import ResampleFamily

    pairs = spec.pairs() if isinstance(spec, ViewFamilySpec) else list(spec)
    mats = [rotation_matrix(a, e).T for a, e in pairs]
    return ResampleFamily(shape, mats, pairs, center)


# --------------------------------------------------------------------------
# orthographic projection
# --------------------------------------------------------------------------


def project_ortho(field3d):
    """Sum voxel weights along the depth (z) axis into (x, y) pixels."""
    if field3d.ndim != 3:
        raise ValueError("orthographic projection expects a 3D field")
    x, y, _ = field3d.shape
    if field3d.is_empty():
        return SparseField.empty((x, y))
    coords = field3d.coords()
    return SparseField.from_points((x, y), coords[:, :2], field3d.w)


def project_point(point):
    p = np.asarray(point, dtype=np.float64)
    return p[..., :2]


# --------------------------------------------------------------------------
# segment contours
# --------------------------------------------------------------------------


class MorphVariant:
    """Width multiplier applied perpendicular to a segment's projected axis."""

    def __init__(self, segment, width_scale, bounds=(0.25, 4.0)):
        width_scale = float(width_scale)
        if not (bounds[0] <= width_scale <= bounds[1]):
            raise ValueError(
                f"width_scale {width_scale} outside configured {bounds}")
        self.segment = str(segment)
        self.width_scale = width_scale

    def __repr__(self):
        return f"MorphVariant({self.segment!r}, {self.width_scale})"


def morph_project_segment(shape2d, proximal2d, distal2d, half_width):
    """Occluding-contour edge field of one segment.

    Cells whose distance to the projected axis lies in the band
    [half_width - 0.5, half_width + 0.5) get weight 1; a half_width under
    one cell degenerates to the axis polyline (distance <= 0.5), and a
    zero-length axis renders a circle outline. The band is half-open so the
    rule is deterministic; integer-geometry fixtures have no cells on the
    open boundary.
    """
    p = np.asarray(proximal2d, dtype=np.float64)
    d = np.asarray(distal2d, dtype=np.float64)
    r = float(half_width)
    if r < 0:
        raise ValueError("half_width must be nonnegative")
    pad = int(math.ceil(r + 1.0))
    lo = np.floor(np.minimum(p, d)).astype(np.int64) - pad
    hi = np.ceil(np.maximum(p, d)).astype(np.int64) + pad
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(shape2d, dtype=np.int64) - 1)
    if np.any(hi < lo):
        return SparseField.empty(shape2d)
    xs = np.arange(lo[0], hi[0] + 1)
    ys = np.arange(lo[1], hi[1] + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dist = _segment_distance(cells.astype(np.float64), p, d)
    if r < 1.0:
        sel = dist <= 0.5
    else:
        sel = (dist >= r - 0.5) & (dist < r + 0.5)
    if not np.any(sel):
        return SparseField.empty(shape2d)
    return SparseField.from_points(shape2d, cells[sel], 1.0)


def _segment_distance(cells, p, d):
    seg = d - p
    denom = float(seg @ seg)
    rel = cells - p
    if denom == 0.0:
        return np.linalg.norm(rel, axis=1)
    t = np.clip(rel @ seg / denom, 0.0, 1.0)
    closest = p + t[:, None] * seg
    return np.linalg.norm(cells - closest, axis=1)


def render_figure(shape2d, pose, base_widths, width_scales, azimuth=0.0,
                  elevation=0.0, shape3d=None, center=None):
    """Whole-figure edge render: the sum of per-segment contour fields.

    pose joints are rotated exactly (float loci) by the view, projected
    orthographically, then each segment contributes its capsule outline at
    half-width width_scales[name] * base_widths[name]. Overlapping contours
    add, matching the assembly-by-summation semantics of the circuit.
    """
    if shape3d is None:
        shape3d = (shape2d[0], shape2d[1], shape2d[1])
    parts = []
    for name, (prox, distal) in pose.joints.items():
        pts = rotate_points(np.stack([prox, distal]).astype(np.float64),
                            azimuth, elevation, shape3d, center)
        p2, d2 = project_point(pts[0]), project_point(pts[1])
        hw = float(width_scales[name]) * float(base_widths[name])
        parts.append(morph_project_segment(shape2d, p2, d2, hw))
    out = SparseField.empty(shape2d)
    if parts:
        from .fields import superpose
        out = superpose(shape2d, [(1.0, f) for f in parts])
    return out


# --------------------------------------------------------------------------
# circuit-facing family
# --------------------------------------------------------------------------


class SegmentContourFamily(TransformFamily):
    """Kind-bridging stage family between the 2D image and 3D voxel domains.

    Member j belongs to one (segment, width variant). Its backward action
    renders the variant's outline scaled by how much of the 3D field sits
    on the segment's per-view axis support; its forward action back-projects
    the image correlation of that outline onto the axis voxels. Components
    (one per live view hypothesis) are rank-1, so forward and backward are
    exact transposes of each other.
    """

    def __init__(self, shape2d, shape3d, members, groups, labels):
        # members: per index, list of (axis_field3d, outline_field2d) pairs
        super().__init__(shape2d, shape3d, len(members))
        self.members = members
        self.groups = np.asarray(groups, dtype=np.int64)
        self.labels = list(labels)

    def apply(self, j, field2d):
        comps = self.members[j]
        out = SparseField.empty(self.out_shape)
        terms = []
        for axis_field, outline in comps:
            w = outline.dot(field2d)
            if w > 0:
                terms.append((w, axis_field))
        if terms:
            from .fields import superpose
            out = superpose(self.out_shape, terms)
        return out

    def apply_adjoint(self, j, field3d):
        comps = self.members[j]
        terms = []
        for axis_field, outline in comps:
            w = axis_field.dot(field3d)
            if w > 0:
                terms.append((w, outline))
        if terms:
            from .fields import superpose
            return superpose(self.in_shape, terms)
        return SparseField.empty(self.in_shape)

    def describe(self, j):
        return self.labels[j]


def overlay_rgb(shape2d, layers):
    """Compose 2D fields into an (H, W, 3) uint8 image; layers is a list of
    (field, (r, g, b)) with each field normalized to its own max."""
    w, h = shape2d
    img = np.zeros((h, w, 3), dtype=np.float64)
    for field, color in layers:
        if field.is_empty():
            continue
        top = field.max_weight()
        for c, wt in zip(field.coords(), field.w):
            x, y = int(c[0]), int(c[1])
            lvl = wt / top
            for k in range(3):
                img[y, x, k] = max(img[y, x, k], lvl * color[k])
    return np.clip(img, 0, 255).astype(np.uint8)
