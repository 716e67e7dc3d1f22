"""Image, mask and displacement-field I/O plus flow visualization.

Canonical formats: binary PGM (P5) for grayscale images and label masks,
PNG via Pillow for convenience, and the little-endian "DFLD" container
for deformation fields (magic, u32 width, u32 height, then row-major
f32 (x, y) absolute normalized coordinate pairs).
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

MIN_SIDE = 8  # smallest extent a 5x5 conv with two pyramid levels supports

_DFLD_MAGIC = b"DFLD"


class LoadError(IOError):
    pass


def normalize_intensity(arr):
    """Min-max rescale to [0,1]; constant input maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise LoadError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; '#' starts a comment
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(raw[start:i])
    i += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise LoadError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0:
        raise LoadError(f"{path}: zero-dimension PGM")
    if maxval <= 0 or maxval > 65535:
        raise LoadError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    body = raw[i : i + need]
    if len(body) < need:
        raise LoadError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.float32)


def load_image(path):
    """Load a grayscale PGM or PNG and min-max normalize it to [0,1]."""
    path = str(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
    except OSError as e:
        raise LoadError(f"cannot open image '{path}': {e}") from e
    if magic == b"P5":
        arr = _read_pgm(path)
    elif magic == b"\x89P":
        img = Image.open(path)
        if img.mode not in ("L", "I", "I;16", "F"):
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float32)
    else:
        raise LoadError(f"{path}: unsupported image format (expect PGM P5 or PNG)")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise LoadError(f"{path}: image must be at least {MIN_SIDE}x{MIN_SIDE} pixels")
    return normalize_intensity(arr)


def load_mask(path):
    """Load a label mask (raw 8-bit values, no normalization)."""
    path = str(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
    except OSError as e:
        raise LoadError(f"cannot open mask '{path}': {e}") from e
    if magic == b"P5":
        arr = _read_pgm(path)
    elif magic == b"\x89P":
        arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    else:
        raise LoadError(f"{path}: unsupported mask format")
    return arr.astype(np.uint8)


def save_image(image, path):
    """Save a [0,1] float image as 8-bit PGM or PNG by extension."""
    path = str(path)
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if path.endswith(".pgm"):
        h, w = u8.shape
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (w, h))
            f.write(u8.tobytes())
    else:
        Image.fromarray(u8, mode="L").save(path)


def save_mask(mask, path):
    path = str(path)
    u8 = np.asarray(mask, dtype=np.uint8)
    if path.endswith(".pgm"):
        h, w = u8.shape
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (w, h))
            f.write(u8.tobytes())
    else:
        Image.fromarray(u8, mode="L").save(path)


def save_displacement(field, path):
    """Write a deformation field ([2,H,W] normalized coords) as DFLD."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim == 4:
        field = field[0]
    if field.ndim != 3 or field.shape[0] != 2:
        raise ValueError("save_displacement expects a [2,H,W] field")
    if not np.all(np.isfinite(field)):
        raise ValueError("save_displacement: field contains non-finite values")
    h, w = field.shape[1], field.shape[2]
    interleaved = np.stack([field[0], field[1]], axis=-1)  # [H,W,2] -> (x,y) pairs
    try:
        with open(str(path), "wb") as f:
            f.write(_DFLD_MAGIC)
            f.write(struct.pack("<II", w, h))
            f.write(interleaved.astype("<f4").tobytes())
    except OSError as e:
        raise IOError(f"cannot write displacement file '{path}': {e}") from e


def load_displacement(path):
    """Read a DFLD file back into a [2,H,W] float32 field."""
    path = str(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise LoadError(f"cannot open displacement file '{path}': {e}") from e
    if raw[:4] != _DFLD_MAGIC:
        raise LoadError(f"{path}: bad magic, not a DFLD file")
    if len(raw) < 12:
        raise LoadError(f"{path}: truncated DFLD header")
    w, h = struct.unpack("<II", raw[4:12])
    need = 12 + h * w * 8
    if len(raw) < need:
        raise LoadError(f"{path}: truncated DFLD payload")
    pairs = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w, 2)
    return np.ascontiguousarray(pairs.transpose(2, 0, 1))


def _hsv_to_rgb(h, s, v):
    # h in [0,1), vectorized standard conversion
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_color(field):
    """Render displacement as an RGB image (hue = direction, white = still).

    Displacement u(x) = phi(x) - identity grid; hue from atan2(uy, ux),
    saturation from magnitude scaled by its 99th percentile.
    """
    from .pyramid import coord_grid

    field = np.asarray(field, dtype=np.float32)
    if field.ndim == 4:
        field = field[0]
    h, w = field.shape[1], field.shape[2]
    u = field - coord_grid(h, w)
    mag = np.hypot(u[0], u[1])
    scale = np.percentile(mag, 99.0)
    sat = np.clip(mag / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(mag)
    hue = (np.arctan2(u[1], u[0]) / (2.0 * np.pi)) % 1.0
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255.0).astype(np.uint8)


def save_flow_png(field, path):
    Image.fromarray(flow_to_color(field), mode="RGB").save(str(path))
