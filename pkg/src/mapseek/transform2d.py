"""Visual transform families over 2D edge maps: shifts, scales, rotations.

Scale and rotation use nearest-cell resampling. The forward direction
pushes each source cell to its mapped cell; the adjoint is the exact
transpose of that push (a gather over the precomputed cell map), not an
independent resample of the inverse parameter, so the engine's adjoint
identity holds exactly for every member.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import DisplacementFamily, TransformFamily
from .fields import SparseField

__all__ = [
    "VisualFamilySpec",
    "ResampleTransform",
    "ResampleFamily",
    "make_shift_family",
    "make_scale_family",
    "make_rot2d_family",
    "full_shift_offsets",
    "scale_ladder",
    "rotation_angles",
    "plant_visual_instance",
    "grid_center",
]


def grid_center(shape):
    """Geometric center of the grid, between cells for even extents."""
    return np.array([(n - 1) / 2.0 for n in shape], dtype=np.float64)


def _round_half_up(x):
    # deterministic nearest-cell rule; ties go toward +infinity
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


class ResampleTransform:
    """One invertible affine cell map c -> round(A (c - center) + center).

    apply() pushes source weights onto mapped cells (colliding cells sum);
    apply_adjoint() is the exact transpose, realized by a reverse lookup
    table built lazily from the full forward cell map.
    """

    __slots__ = ("shape", "matrix", "center", "_fmap", "_order", "_sorted_targets")

    def __init__(self, shape, matrix, center=None):
        self.shape = tuple(int(n) for n in shape)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        d = len(self.shape)
        if self.matrix.shape != (d, d):
            raise ValueError(f"matrix must be {d}x{d} for a {d}D grid")
        self.center = (grid_center(self.shape) if center is None
                       else np.asarray(center, dtype=np.float64))
        self._fmap = None
        self._order = None
        self._sorted_targets = None

    def _build_map(self):
        if self._fmap is not None:
            return
        shape = self.shape
        coords = np.indices(shape).reshape(len(shape), -1).T.astype(np.float64)
        mapped = (coords - self.center) @ self.matrix.T + self.center
        cells = _round_half_up(mapped)
        ok = np.ones(cells.shape[0], dtype=bool)
        for ax, n in enumerate(shape):
            ok &= (cells[:, ax] >= 0) & (cells[:, ax] < n)
        fmap = np.full(cells.shape[0], -1, dtype=np.int64)
        fmap[ok] = np.ravel_multi_index(tuple(cells[ok].T), shape)
        self._fmap = fmap

    def _build_reverse(self):
        if self._order is not None:
            return
        self._build_map()
        self._order = np.argsort(self._fmap, kind="stable")
        self._sorted_targets = self._fmap[self._order]

    def apply(self, field):
        if field.is_empty():
            return SparseField.empty(self.shape)
        self._build_map()
        targets = self._fmap[field.lin]
        keep = targets >= 0
        return SparseField._coalesce(self.shape, targets[keep], field.w[keep].copy())

    def apply_adjoint(self, field):
        if field.is_empty():
            return SparseField.empty(self.shape)
        self._build_reverse()
        st = self._sorted_targets
        left = np.searchsorted(st, field.lin, side="left")
        right = np.searchsorted(st, field.lin, side="right")
        counts = right - left
        total = int(counts.sum())
        if total == 0:
            return SparseField.empty(self.shape)
        # expand each target's preimage range into one flat index array
        starts = np.repeat(left, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        sources = self._order[starts + within]
        weights = np.repeat(field.w, counts)
        order = np.argsort(sources, kind="stable")
        # preimage sets of distinct targets are disjoint: no coalescing needed
        return SparseField(self.shape, sources[order], weights[order])


class ResampleFamily(TransformFamily):
    """Family of resample transforms sharing a grid and rotation/scale center."""

    def __init__(self, shape, matrices, params, center=None):
        super().__init__(shape, shape, len(matrices))
        self.matrices = matrices
        self.params = list(params)
        self.center = center
        self._members = {}

    def _member(self, j):
        t = self._members.get(j)
        if t is None:
            t = ResampleTransform(self.in_shape, self.matrices[j], self.center)
            self._members[j] = t
        return t

    def apply(self, j, field):
        return self._member(j).apply(field)

    def apply_adjoint(self, j, field):
        return self._member(j).apply_adjoint(field)

    def describe(self, j):
        return self.params[j]


# --------------------------------------------------------------------------
# family constructors
# --------------------------------------------------------------------------


def make_shift_family(shape, offsets):
    offsets = np.atleast_2d(np.asarray(offsets, dtype=np.int64))
    if not (offsets == 0).all(axis=1).any():
        raise ValueError("shift family must contain the identity offset (0, 0)")
    return DisplacementFamily(shape, offsets)


def make_scale_family(shape, factors, center=None):
    factors = [float(f) for f in factors]
    if not any(f == 1.0 for f in factors):
        raise ValueError("scale family must contain the identity factor 1.0")
    if any(f <= 0 for f in factors):
        raise ValueError("scale factors must be positive")
    d = len(shape)
    mats = [np.eye(d) * f for f in factors]
    return ResampleFamily(shape, mats, factors, center)


def make_rot2d_family(shape, angles_deg, center=None):
    angles = [float(a) for a in angles_deg]
    if not any(a % 360.0 == 0.0 for a in angles):
        raise ValueError("rotation family must contain the identity angle 0")
    mats = []
    for a in angles:
        r = math.radians(a)
        c, s = math.cos(r), math.sin(r)
        mats.append(np.array([[c, -s], [s, c]]))
    return ResampleFamily(shape, mats, angles, center)


def full_shift_offsets(width, height=None):
    """Every shift of a width x height field: one offset per cell."""
    height = width if height is None else height
    dx = np.arange(width) - width // 2
    dy = np.arange(height) - height // 2
    gx, gy = np.meshgrid(dx, dy, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.int64)


def scale_ladder(step=1.05, octaves=10):
    """Geometric scale ladder: `octaves` octaves at whole steps per octave.

    Steps per octave is floor(log 2 / log step); at the conventional 1.05
    step that is 14, giving 140 factors over 10 octaves with the identity
    at the ladder midpoint.
    """
    per_octave = int(math.floor(math.log(2.0) / math.log(step)))
    count = per_octave * int(octaves)
    lo = -(count // 2)
    return np.power(float(step), np.arange(lo, lo + count, dtype=np.float64))


def rotation_angles(step_deg=1.0):
    return np.arange(0.0, 360.0, float(step_deg))


class VisualFamilySpec:
    """Declarative spec for the three image-side families.

    shifts: iterable of (dx, dy); scales: geometric ladder of factors;
    rotations: angles in degrees. Each list must contain its identity and
    the scale/rotation ladders must be strictly monotone.
    """

    def __init__(self, shifts, scales, rotations):
        self.shifts = np.atleast_2d(np.asarray(shifts, dtype=np.int64))
        self.scales = np.asarray([float(s) for s in scales], dtype=np.float64)
        self.rotations = np.asarray([float(r) for r in rotations], dtype=np.float64)
        if not (self.shifts == 0).all(axis=1).any():
            raise ValueError("shifts must include (0, 0)")
        if 1.0 not in self.scales:
            raise ValueError("scales must include 1.0")
        if not np.any(self.rotations % 360.0 == 0.0):
            raise ValueError("rotations must include 0")
        for name, ladder in (("scales", self.scales), ("rotations", self.rotations)):
            if ladder.size > 1 and not np.all(np.diff(ladder) > 0):
                raise ValueError(f"{name} ladder must be strictly increasing")

    def build(self, shape, center=None):
        return [
            make_shift_family(shape, self.shifts),
            make_scale_family(shape, self.scales, center),
            make_rot2d_family(shape, self.rotations, center),
        ]

    def sizes(self):
        return [len(self.shifts), len(self.scales), len(self.rotations)]


def plant_visual_instance(template, families, indices):
    """Ground-truth fixture: the template pushed through the adjoints of the
    selected members, innermost stage last.

    Solving the resulting field with a circuit over the same families
    recovers `indices`, because the forward pass at those indices undoes
    the plant.
    """
    if len(families) != len(indices):
        raise ValueError("one index per family required")
    v = template
    for fam, j in zip(reversed(families), reversed(list(indices))):
        v = fam.apply_adjoint(int(j), v)
    return v
