"""Voxel-space articulation: skeletal chains, orientation families, FK and IK.

A segment's orientation library is a set of integer voxel displacements of
roughly the segment's length; each one is a transform that moves every
voxel of a field by that displacement (the articulation mapping for one
candidate orientation). Chains compose such mappings from a root locus;
inverse kinematics builds one circuit stage per segment and lets gain
competition pick the orientation indices that carry the proximal field
onto the target field.

Axis convention: voxel axes are (x, y, z) with y pointing up and z the
depth axis that the orthographic projection collapses.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .engine import Circuit, DisplacementFamily
from .fields import SparseField

__all__ = [
    "SegmentSpec",
    "SkeletonModel",
    "PoseSolution",
    "cone_displacements",
    "make_lambda_family",
    "forward_kinematics",
    "build_ik_circuit",
    "solve_chain_ik",
    "chain_handoff",
    "segment_axis_cells",
    "render_skeleton_field",
    "articulation_search_size",
    "load_skeleton",
    "OutOfBoundsError",
    "SkeletonError",
]

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class SkeletonError(ValueError):
    """Invalid skeleton definition (topology, cones, or missing fields)."""


class OutOfBoundsError(ValueError):
    """A kinematic chain left the voxel grid."""


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def cone_displacements(axis, half_angle_deg, count, length):
    """Integer displacements discretizing a cone of orientations.

    Deterministic spherical Fibonacci sampling of the cap around `axis`;
    sample 0 is the axis itself. Each unit direction is scaled by `length`
    and rounded per axis; when rounding drifts the magnitude more than half
    a voxel, the nearest integer corner that stays within half a voxel of
    the length is substituted. Samples with no valid integer displacement
    are dropped, as are duplicates (first occurrence kept).
    """
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise SkeletonError("cone axis must be nonzero")
    axis = axis / norm
    count = int(count)
    if count < 1:
        raise SkeletonError("cone count must be at least 1")
    half = math.radians(float(half_angle_deg))
    # orthonormal frame around the axis
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis[0]) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)

    dirs = [axis]
    for i in range(1, count):
        # area-uniform cap heights, rim reached at the last sample
        cos_t = 1.0 - (1.0 - math.cos(half)) * (i / max(count - 1, 1))
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        phi = i * _GOLDEN_ANGLE
        dirs.append(cos_t * axis + sin_t * (math.cos(phi) * u + math.sin(phi) * v))

    out = []
    seen = set()
    length = float(length)
    for d in dirs:
        disp = _best_integer_displacement(d, length)
        if disp is None:
            continue
        key = tuple(int(c) for c in disp)
        if key in seen:
            continue
        seen.add(key)
        out.append(disp)
    if not out:
        raise SkeletonError(
            f"no valid integer displacement for cone (length {length})")
    return np.array(out, dtype=np.int64)


def _best_integer_displacement(direction, length):
    """Integer vector near length*direction whose magnitude is within half a
    voxel of the segment length, or None."""
    target = np.asarray(direction, dtype=np.float64) * length
    cand = _round_half_up(target)
    if abs(np.linalg.norm(cand) - length) <= 0.5:
        return cand
    lo = np.floor(target).astype(np.int64)
    best, best_dot = None, -np.inf
    for corner in np.ndindex(2, 2, 2):
        c = lo + np.array(corner, dtype=np.int64)
        if abs(np.linalg.norm(c) - length) <= 0.5:
            d = float(np.dot(c, target))
            if d > best_dot:
                best, best_dot = c, d
    return best


class SegmentSpec:
    """One skeletal segment: name, length, parent attachment and its
    discretized orientation library (stored as integer displacements)."""

    def __init__(self, name, length, parent, displacements,
                 mass=None, base_width=1.0):
        self.name = str(name)
        self.length = float(length)
        self.parent = parent  # "root" or another segment's name
        self.displacements = np.atleast_2d(
            np.asarray(displacements, dtype=np.int64))
        if self.displacements.shape[0] < 1:
            raise SkeletonError(f"segment {name!r} has an empty orientation set")
        if self.displacements.shape[1] != 3:
            raise SkeletonError(f"segment {name!r} displacements must be 3D")
        mags = np.linalg.norm(self.displacements.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(mags - self.length) > 0.5)
        if bad.size:
            raise SkeletonError(
                f"segment {name!r}: displacement {bad[0]} has magnitude "
                f"{mags[bad[0]]:.3f}, more than half a voxel from length "
                f"{self.length}")
        self.mass = None if mass is None else float(mass)
        self.base_width = float(base_width)

    @property
    def orientation_set(self):
        """Unit direction per displacement."""
        d = self.displacements.astype(np.float64)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def __len__(self):
        return int(self.displacements.shape[0])

    def __repr__(self):
        return f"SegmentSpec({self.name!r}, n={len(self)}, length={self.length})"


class SkeletonModel:
    """Segment chains forming a forest rooted at a single voxel locus.

    chains is an ordered mapping chain name -> list of segment names; a
    chain's first segment attaches at the root or at the distal joint of a
    segment from an earlier chain (the spine-base pattern).
    """

    def __init__(self, root, segments, chains):
        self.root = np.asarray(root, dtype=np.int64)
        if self.root.shape != (3,):
            raise SkeletonError("root locus must be a 3-vector")
        self.segments = {}
        for seg in segments:
            if seg.name in self.segments:
                raise SkeletonError(f"duplicate segment name {seg.name!r}")
            self.segments[seg.name] = seg
        self.chains = {str(k): [str(s) for s in v] for k, v in chains.items()}
        self._validate()

    def _validate(self):
        in_chain = {}
        for cname, names in self.chains.items():
            if not names:
                raise SkeletonError(f"chain {cname!r} is empty")
            for s in names:
                if s not in self.segments:
                    raise SkeletonError(f"chain {cname!r} references unknown segment {s!r}")
                if s in in_chain:
                    raise SkeletonError(f"segment {s!r} appears in two chains")
                in_chain[s] = cname
        if set(in_chain) != set(self.segments):
            missing = set(self.segments) - set(in_chain)
            raise SkeletonError(f"segments not assigned to any chain: {sorted(missing)}")
        # parent links must form a forest rooted at the root locus, and must
        # agree with chain ordering (each segment follows its parent)
        placed = set()
        for cname, names in self.chains.items():
            first = self.segments[names[0]]
            if first.parent != "root" and first.parent not in placed:
                raise SkeletonError(
                    f"chain {cname!r} starts at {first.parent!r}, which is not "
                    "the root or a segment of an earlier chain")
            prev = names[0]
            for s in names[1:]:
                if self.segments[s].parent != prev:
                    raise SkeletonError(
                        f"segment {s!r} in chain {cname!r} must attach to {prev!r}")
                prev = s
            placed.update(names)

    def chain_of(self, segment_name):
        for cname, names in self.chains.items():
            if segment_name in names:
                return cname
        raise KeyError(segment_name)

    def segment_order(self):
        out = []
        for names in self.chains.values():
            out.extend(names)
        return out

    def canonical_indices(self):
        """The unarticulated pose: orientation 0 (the cone axis) everywhere."""
        return {name: 0 for name in self.segments}

    def to_dict(self):
        segs = []
        for names in self.chains.values():
            for s in names:
                seg = self.segments[s]
                segs.append({
                    "name": seg.name,
                    "length": seg.length,
                    "parent": seg.parent,
                    "displacements": seg.displacements.tolist(),
                    "mass": seg.mass,
                    "base_width": seg.base_width,
                })
        return {
            "root": self.root.tolist(),
            "segments": segs,
            "chains": [{"name": c, "segments": list(n)} for c, n in self.chains.items()],
        }


def _segment_from_dict(d):
    name = d["name"]
    if "displacements" in d:
        disp = d["displacements"]
    elif "cone" in d:
        cone = d["cone"]
        disp = cone_displacements(
            cone["axis"], cone["half_angle_deg"], cone["count"], d["length"])
    else:
        raise SkeletonError(f"segment {name!r} needs a cone or displacement list")
    return SegmentSpec(
        name, d["length"], d.get("parent", "root"), disp,
        mass=d.get("mass"), base_width=d.get("base_width", 1.0))


def load_skeleton(source):
    """Load a skeleton definition from a JSON path, file object or dict."""
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    try:
        segments = [_segment_from_dict(d) for d in doc["segments"]]
        chains = {c["name"]: c["segments"] for c in doc["chains"]}
        return SkeletonModel(doc["root"], segments, chains)
    except KeyError as exc:
        raise SkeletonError(f"skeleton file missing field {exc}") from None


# --------------------------------------------------------------------------
# forward kinematics
# --------------------------------------------------------------------------


class PoseSolution:
    """Per-segment orientation indices plus the joint loci they generate."""

    def __init__(self, indices, joints, degenerate=False):
        self.indices = {str(k): int(v) for k, v in indices.items()}
        self.joints = {str(k): (np.asarray(p, dtype=np.int64),
                                np.asarray(d, dtype=np.int64))
                       for k, (p, d) in joints.items()}
        self.degenerate = bool(degenerate)

    def end_effector(self, chain_names):
        return self.joints[chain_names[-1]][1]

    def __repr__(self):
        return f"PoseSolution({self.indices}, degenerate={self.degenerate})"


def forward_kinematics(model, indices, shape=None):
    """Joint loci for a full pose, composing displacements from the root.

    indices maps segment name to orientation index. With `shape` given,
    any joint leaving the grid raises OutOfBoundsError naming the segment.
    """
    joints = {}
    distal = {}
    for cname, names in model.chains.items():
        first = model.segments[names[0]]
        if first.parent == "root":
            cur = model.root.copy()
        else:
            if first.parent not in distal:
                raise SkeletonError(
                    f"chain {cname!r} origin {first.parent!r} not yet computed")
            cur = distal[first.parent].copy()
        for s in names:
            seg = model.segments[s]
            j = int(indices[s])
            if j < 0 or j >= len(seg):
                raise ValueError(f"orientation index {j} out of range for {s!r}")
            nxt = cur + seg.displacements[j]
            if shape is not None:
                for ax, n in enumerate(shape):
                    if nxt[ax] < 0 or nxt[ax] >= n:
                        raise OutOfBoundsError(
                            f"segment {s!r} leaves the grid on axis {ax}")
            joints[s] = (cur.copy(), nxt.copy())
            distal[s] = nxt
            cur = nxt
    return PoseSolution(indices, joints)


def segment_axis_cells(prox, distal):
    """Voxel cells along a segment axis, proximal to distal inclusive."""
    prox = np.asarray(prox, dtype=np.float64)
    distal = np.asarray(distal, dtype=np.float64)
    n = int(max(np.abs(distal - prox).max(), 1)) * 2 + 1
    t = np.linspace(0.0, 1.0, n)
    pts = prox[None, :] + t[:, None] * (distal - prox)[None, :]
    cells = _round_half_up(pts)
    _, first = np.unique(
        np.ravel_multi_index(tuple((cells - cells.min(axis=0)).T),
                             tuple(cells.max(axis=0) - cells.min(axis=0) + 1)),
        return_index=True)
    return cells[np.sort(first)]


def render_skeleton_field(shape, pose, segments=None, weight=1.0):
    """Sparse axis-voxel field of a pose (all segments, or a subset)."""
    coords = []
    for name, (p, d) in pose.joints.items():
        if segments is not None and name not in segments:
            continue
        cells = segment_axis_cells(p, d)
        ok = np.ones(cells.shape[0], dtype=bool)
        for ax, n in enumerate(shape):
            ok &= (cells[:, ax] >= 0) & (cells[:, ax] < n)
        coords.append(cells[ok])
    if not coords:
        return SparseField.empty(shape)
    allc = np.concatenate(coords)
    if allc.size == 0:
        return SparseField.empty(shape)
    return SparseField.from_points(shape, allc, np.full(allc.shape[0], weight))


# --------------------------------------------------------------------------
# inverse kinematics
# --------------------------------------------------------------------------


def make_lambda_family(shape, seg):
    """Articulation family for one segment: every orientation as a voxel
    displacement transform; the adjoint moves by the negated displacement."""
    return DisplacementFamily(shape, seg.displacements)


def build_ik_circuit(shape, model, chain_name, proximal, targets, masks=None,
                     *, rate=0.1, zero_threshold=1e-3, max_iterations=200,
                     stall_window=10, trace=False):
    """Circuit with one stage per chain segment.

    proximal seeds the forward path (hypotheses for the chain's first
    joint), targets the backward path (candidate end-effector voxels).
    masks, when given, maps segment name (or stage index) to a mask field
    installed on that stage.
    """
    from .engine import Stage

    names = model.chains[chain_name]
    if proximal.is_empty():
        raise ValueError("proximal field is empty")
    if targets.is_empty():
        raise ValueError("target field is empty")
    stages = []
    for i, s in enumerate(names):
        seg = model.segments[s]
        mask = None
        if masks:
            mask = masks.get(s, masks.get(i))
        stages.append(Stage(make_lambda_family(shape, seg),
                            rate=rate, mask=mask, label=s))
    return Circuit(stages, proximal, targets,
                   zero_threshold=zero_threshold,
                   max_iterations=max_iterations,
                   stall_window=stall_window, trace=trace)


def solve_chain_ik(shape, model, chain_name, proximal_locus, targets,
                   masks=None, **circuit_kwargs):
    """Run chain IK from a single proximal locus; returns (PoseSolution or
    None, circuit). None means no_solution or the iteration cap."""
    proximal = SparseField.impulse(shape, proximal_locus)
    circuit = build_ik_circuit(shape, model, chain_name, proximal, targets,
                               masks, **circuit_kwargs)
    status = circuit.run()
    if status != "converged":
        return None, circuit
    names = model.chains[chain_name]
    picked = circuit.solution_indices()
    indices = {s: int(j) for s, j in zip(names, picked)}
    joints = {}
    cur = np.asarray(proximal_locus, dtype=np.int64)
    for s in names:
        nxt = cur + model.segments[s].displacements[indices[s]]
        joints[s] = (cur.copy(), nxt.copy())
        cur = nxt
    return PoseSolution(indices, joints, degenerate=circuit.degenerate), circuit


def chain_handoff(source, shape=None):
    """Distal-locus field that seeds a downstream chain's forward path.

    Accepts a converged-or-running Circuit (surviving voxels of its last
    forward aggregate) or a PoseSolution plus the chain's last segment
    (an impulse at the resolved distal joint). An empty result propagates
    no-solution upstream.
    """
    if isinstance(source, Circuit):
        agg = source.forward_agg[-1]
        if agg is None or agg.is_empty():
            return SparseField.empty(source.stages[-1].family.out_shape)
        return agg
    if isinstance(source, tuple):
        pose, segment_name = source
        _, distal = pose.joints[segment_name]
        return SparseField.impulse(shape, distal)
    raise TypeError("handoff source must be a Circuit or (PoseSolution, segment)")


def articulation_search_size(groups, replication=1):
    """Total orientation-transform budget for a segment-group configuration.

    groups is an iterable of (segment_count, orientations_per_segment);
    the budget is replication * sum(count * orientations), the additive
    cost of testing every articulation mapping once.
    """
    total = 0
    for count, orients in groups:
        total += int(count) * int(orients)
    return total * int(replication)
