"""Edge-map and render file formats: PGM (P2/P5) in, CSV in/out, PPM (P6) out.

Edge maps are 2D sparse fields. PGM gray values are normalized to [0, 1];
zero pixels are dropped. The CSV dialect is a literal `x,y,w` header plus
one row per nonzero cell; the writer emits rows sorted by (x, y) and uses
repr() for weights so a save/load round trip is bit-identical.
"""

from __future__ import annotations

import numpy as np

from .fields import SparseField

__all__ = [
    "EdgeMapError",
    "load_edge_map",
    "save_edge_map_csv",
    "save_edge_map_pgm",
    "write_ppm",
]


class EdgeMapError(ValueError):
    """Malformed edge-map file. Carries the offending line or byte offset."""

    def __init__(self, message, path=None, line=None, byte=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if byte is not None:
            where.append(f"byte offset {byte}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.path = path
        self.line = line
        self.byte = byte


def load_edge_map(path, format=None):
    """Load a 2D edge map. Format inferred from the extension unless given."""
    path = str(path)
    fmt = format
    if fmt is None:
        low = path.lower()
        if low.endswith(".pgm"):
            fmt = "pgm"
        elif low.endswith(".csv"):
            fmt = "csv"
        else:
            raise EdgeMapError("cannot infer format from extension", path=path)
    if fmt == "pgm":
        return _load_pgm(path)
    if fmt == "csv":
        return _load_csv(path)
    raise EdgeMapError(f"unknown edge-map format {fmt!r}", path=path)


# ------------------------------------------------------------------- PGM in


def _pgm_tokens(data, path):
    """Yield (token, byte_offset, line) for PGM headers, skipping # comments."""
    i, line = 0, 1
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        if c.isspace():
            if c == b"\n":
                line += 1
            i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        yield data[start:i], start, line


def _load_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    toks = _pgm_tokens(data, path)

    def need(what):
        try:
            return next(toks)
        except StopIteration:
            raise EdgeMapError(f"unexpected end of file, expected {what}",
                               path=path, byte=len(data)) from None

    magic, off, line = need("magic number")
    if magic not in (b"P2", b"P5"):
        raise EdgeMapError(f"not a PGM file (magic {magic!r})",
                           path=path, line=line, byte=off)

    def need_int(what):
        tok, off, line = need(what)
        try:
            v = int(tok)
        except ValueError:
            raise EdgeMapError(f"bad {what} {tok!r}", path=path,
                               line=line, byte=off) from None
        if v <= 0:
            raise EdgeMapError(f"{what} must be positive, got {v}",
                               path=path, line=line, byte=off)
        return v, off, line

    width, _, _ = need_int("width")
    height, _, _ = need_int("height")
    maxval, moff, mline = need_int("maxval")
    if maxval > 65535:
        raise EdgeMapError(f"maxval {maxval} out of range", path=path,
                           line=mline, byte=moff)

    if magic == b"P2":
        vals = np.empty(width * height, dtype=np.float64)
        k = 0
        for tok, off, line in toks:
            if k >= vals.size:
                raise EdgeMapError("trailing data after pixel values",
                                   path=path, line=line, byte=off)
            try:
                v = int(tok)
            except ValueError:
                raise EdgeMapError(f"bad pixel value {tok!r}", path=path,
                                   line=line, byte=off) from None
            if v < 0 or v > maxval:
                raise EdgeMapError(f"pixel value {v} outside [0, {maxval}]",
                                   path=path, line=line, byte=off)
            vals[k] = v
            k += 1
        if k != vals.size:
            raise EdgeMapError(
                f"expected {vals.size} pixel values, found {k}",
                path=path, byte=len(data))
    else:
        # P5: single whitespace byte after maxval, then raw pixels
        _, off, _ = _find_raster(data, moff, len(str(maxval)))
        bpp = 1 if maxval < 256 else 2
        raster = data[off : off + width * height * bpp]
        if len(raster) != width * height * bpp:
            raise EdgeMapError(
                f"raster truncated: expected {width * height * bpp} bytes, "
                f"got {len(raster)}", path=path, byte=off + len(raster))
        dt = np.uint8 if bpp == 1 else np.dtype(">u2")
        vals = np.frombuffer(raster, dtype=dt).astype(np.float64)
        if np.any(vals > maxval):
            raise EdgeMapError("pixel value above maxval", path=path, byte=off)

    # pixel rows are raster rows; cell (x, y) = (column, row)
    img = vals.reshape(height, width) / float(maxval)
    ys, xs = np.nonzero(img)
    return SparseField.from_points(
        (width, height), np.stack([xs, ys], axis=1), img[ys, xs]
    )


def _find_raster(data, maxval_off, maxval_len):
    i = maxval_off + maxval_len
    if i >= len(data) or not data[i : i + 1].isspace():
        raise EdgeMapError("missing whitespace before raster", byte=i)
    return None, i + 1, None


# ------------------------------------------------------------------- CSV


def _load_csv(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "x,y,w":
        raise EdgeMapError("missing 'x,y,w' header", path=path, line=1)
    coords, weights = [], []
    max_x = max_y = -1
    for ln, row in enumerate(lines[1:], start=2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != 3:
            raise EdgeMapError(f"expected 3 fields, got {len(parts)}",
                               path=path, line=ln)
        try:
            x, y, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise EdgeMapError(f"bad row {row!r}", path=path, line=ln) from None
        if x < 0 or y < 0:
            raise EdgeMapError("negative coordinate", path=path, line=ln)
        if w < 0:
            raise EdgeMapError("negative weight", path=path, line=ln)
        coords.append((x, y))
        weights.append(w)
        max_x, max_y = max(max_x, x), max(max_y, y)
    if not coords:
        return SparseField.empty((1, 1))
    return SparseField.from_points((max_x + 1, max_y + 1), coords, weights)


def save_edge_map_csv(field, path, shape=None):
    """Write a 2D field as deterministic `x,y,w` CSV, rows sorted by (x, y)."""
    if field.ndim != 2:
        raise ValueError("CSV edge maps are 2D")
    rows = ["x,y,w"]
    for c, w in zip(field.coords(), field.w):
        rows.append(f"{int(c[0])},{int(c[1])},{w!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")


def save_edge_map_pgm(field, path, maxval=255):
    """Write a 2D field as P2 PGM, weights scaled so the max cell hits maxval."""
    if field.ndim != 2:
        raise ValueError("PGM edge maps are 2D")
    width, height = field.shape
    top = field.max_weight()
    img = np.zeros((height, width), dtype=np.int64)
    if top > 0:
        for c, w in zip(field.coords(), field.w):
            img[int(c[1]), int(c[0])] = int(round(w / top * maxval))
    lines = [f"P2", f"{width} {height}", f"{maxval}"]
    for row in img:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------- PPM out


def write_ppm(rgb, path):
    """Write an (H, W, 3) uint8 array as binary P6 PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
