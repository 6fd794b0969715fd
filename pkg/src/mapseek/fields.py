"""Sparse nonnegative fields over rectangular 2D/3D grids.

A field stores only its nonzero cells, as a sorted array of linear cell
indices plus a parallel weight array. All weights are strictly positive;
a cell that would carry weight zero is simply absent. Fields are treated
as immutable once constructed and can be shared freely across circuits.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GridMismatchError",
    "SparseField",
    "correspondence",
    "superpose",
]


class GridMismatchError(ValueError):
    """Two fields with different grid shapes were combined."""


def _strides(shape):
    # row-major linearization factors, e.g. (H, 1) for shape (W, H)
    s = np.ones(len(shape), dtype=np.int64)
    for i in range(len(shape) - 2, -1, -1):
        s[i] = s[i + 1] * shape[i + 1]
    return s


class SparseField:
    __slots__ = ("shape", "lin", "w")

    def __init__(self, shape, lin, w):
        self.shape = tuple(int(n) for n in shape)
        self.lin = lin
        self.w = w

    # ---------------------------------------------------------- constructors

    @classmethod
    def empty(cls, shape):
        return cls(shape, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @classmethod
    def from_points(cls, shape, coords, weights):
        """Build a field from (N, d) integer coordinates and weights.

        Duplicate cells are summed, zero weights dropped. Raises on negative
        weights or out-of-bounds coordinates.
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        shape = tuple(int(n) for n in shape)
        if coords.size == 0:
            return cls.empty(shape)
        if coords.shape[1] != len(shape):
            raise GridMismatchError(
                f"coordinates have {coords.shape[1]} axes, grid has {len(shape)}"
            )
        weights = np.broadcast_to(
            np.asarray(weights, dtype=np.float64), (coords.shape[0],)
        )
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("field weights must be finite and nonnegative")
        for ax, n in enumerate(shape):
            if np.any(coords[:, ax] < 0) or np.any(coords[:, ax] >= n):
                raise ValueError(
                    f"coordinate out of bounds on axis {ax} (grid extent {n})"
                )
        lin = np.ravel_multi_index(tuple(coords.T), shape).astype(np.int64)
        return cls._coalesce(shape, lin, np.array(weights, dtype=np.float64))

    @classmethod
    def impulse(cls, shape, cell, weight=1.0):
        return cls.from_points(shape, [tuple(cell)], [float(weight)])

    @classmethod
    def from_dense(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        lin = np.flatnonzero(arr).astype(np.int64)
        w = arr.reshape(-1)[lin]
        if np.any(w < 0):
            raise ValueError("field weights must be nonnegative")
        return cls(arr.shape, lin, w)

    @classmethod
    def _coalesce(cls, shape, lin, w):
        """Sort, merge duplicate cells and drop zeros. Input arrays not kept."""
        if lin.size == 0:
            return cls.empty(shape)
        uniq, inv = np.unique(lin, return_inverse=True)
        merged = np.bincount(inv, weights=w, minlength=uniq.size)
        keep = merged > 0
        return cls(shape, uniq[keep], merged[keep])

    # ------------------------------------------------------------- accessors

    @property
    def ndim(self):
        return len(self.shape)

    def __len__(self):
        return int(self.lin.size)

    def is_empty(self):
        return self.lin.size == 0

    def coords(self):
        """Nonzero cells as an (N, d) int array, in linear-index order."""
        if self.lin.size == 0:
            return np.empty((0, len(self.shape)), dtype=np.int64)
        return np.stack(np.unravel_index(self.lin, self.shape), axis=1)

    def items(self):
        """Dict view {cell tuple: weight}, mainly for tests and debugging."""
        return {tuple(c): float(v) for c, v in zip(self.coords(), self.w)}

    def total(self):
        return float(self.w.sum())

    def to_dense(self):
        out = np.zeros(self.shape, dtype=np.float64)
        out.reshape(-1)[self.lin] = self.w
        return out

    def __repr__(self):
        return f"SparseField(shape={self.shape}, nnz={len(self)}, total={self.total():.4g})"

    # ------------------------------------------------------------ arithmetic

    def scaled(self, a):
        a = float(a)
        if a < 0:
            raise ValueError("scale factor must be nonnegative")
        if a == 0.0 or self.lin.size == 0:
            return SparseField.empty(self.shape)
        return SparseField(self.shape, self.lin, self.w * a)

    def _check(self, other):
        if self.shape != other.shape:
            raise GridMismatchError(f"grid mismatch: {self.shape} vs {other.shape}")

    def dot(self, other):
        """Inner product over shared cells; 0 when supports are disjoint."""
        self._check(other)
        a, b = (self, other) if len(self) <= len(other) else (other, self)
        if a.lin.size == 0 or b.lin.size == 0:
            return 0.0
        idx = np.searchsorted(b.lin, a.lin)
        idx_c = np.minimum(idx, b.lin.size - 1)
        hit = b.lin[idx_c] == a.lin
        if not np.any(hit):
            return 0.0
        return float(np.dot(a.w[hit], b.w[idx_c[hit]]))

    def mul(self, other):
        """Pointwise product (mask application). Missing cells count as zero."""
        self._check(other)
        a, b = (self, other) if len(self) <= len(other) else (other, self)
        if a.lin.size == 0 or b.lin.size == 0:
            return SparseField.empty(self.shape)
        idx = np.searchsorted(b.lin, a.lin)
        idx_c = np.minimum(idx, b.lin.size - 1)
        hit = b.lin[idx_c] == a.lin
        lin = a.lin[hit]
        w = a.w[hit] * b.w[idx_c[hit]]
        keep = w > 0
        return SparseField(self.shape, lin[keep], w[keep])

    def allclose(self, other, rtol=1e-9, atol=1e-12):
        if self.shape != other.shape or self.lin.size != other.lin.size:
            return False
        return bool(
            np.array_equal(self.lin, other.lin)
            and np.allclose(self.w, other.w, rtol=rtol, atol=atol)
        )

    def max_weight(self):
        return float(self.w.max()) if self.lin.size else 0.0


def correspondence(a, b):
    """Match score between two fields: their inner product over shared cells."""
    return a.dot(b)


def superpose(shape, terms, p=None):
    """Gain-weighted combination of fields on a common grid.

    terms is an iterable of (gain, field). With p=None this is the plain
    superposition sum(g * v); with p >= 1 it is the elementwise
    (sum((g*v)^p))^(1/p). Zero-gain terms contribute nothing; an empty term
    list yields the empty field.
    """
    shape = tuple(int(n) for n in shape)
    lins = []
    ws = []
    for gain, field in terms:
        gain = float(gain)
        if gain == 0.0 or field.is_empty():
            continue
        if field.shape != shape:
            raise GridMismatchError(f"grid mismatch: {field.shape} vs {shape}")
        lins.append(field.lin)
        ws.append(field.w * gain)
    if not lins:
        return SparseField.empty(shape)
    lin = np.concatenate(lins)
    w = np.concatenate(ws)
    if p is None:
        return SparseField._coalesce(shape, lin, w)
    p = float(p)
    if p < 1.0:
        raise ValueError("lp aggregation requires p >= 1")
    acc = SparseField._coalesce(shape, lin, np.power(w, p))
    return SparseField(acc.shape, acc.lin, np.power(acc.w, 1.0 / p))
