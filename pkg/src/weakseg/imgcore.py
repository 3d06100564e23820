"""Core raster types, PGM codec, and geometric resampling.

Images are 2-D float64 arrays of shape (height, width) with intensities in
[0, 1]. Binary masks are bool arrays, tri-label masks int8 arrays (see
``BG``/``FG``/``IGNORE``). Point coordinates are (x, y) with the center of
pixel (row r, col c) at (c + 0.5, r + 0.5). Affine transforms are 2x3
matrices mapping source coordinates to output coordinates.
"""

from __future__ import annotations

import numpy as np

# tri-mask labels
BG = 0
FG = 1
IGNORE = 2


class DecodeError(ValueError):
    """Raised on malformed PGM input."""


def validate_gray(img: np.ndarray) -> np.ndarray:
    """Check shape and [0,1] range; returns the array as float64."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected 2-D image, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("image intensities must be finite and in [0, 1]")
    return a


def validate_mask(mask: np.ndarray, shape=None) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ValueError("binary mask must have bool dtype")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    return m


def validate_trimask(mask: np.ndarray, shape=None) -> np.ndarray:
    m = np.asarray(mask)
    if not np.issubdtype(m.dtype, np.integer):
        raise ValueError("tri-mask must have integer dtype")
    if not np.all(np.isin(m, (BG, FG, IGNORE))):
        raise ValueError("tri-mask labels must be BG, FG or IGNORE")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    return m.astype(np.int8)


# ---------------------------------------------------------------------------
# PGM codec (P2 plain / P5 binary, maxval <= 255)

def _next_token(data: bytes, pos: int):
    """Skip whitespace/comments, return (token, position after token)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DecodeError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode P2 (ASCII) or P5 (binary) graymap bytes into a [0,1] image."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise DecodeError(f"bad magic {magic!r} at byte 0")
    pos = 2
    header = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        try:
            header.append(int(tok))
        except ValueError:
            raise DecodeError(f"non-numeric header token {tok!r} at byte {pos}")
    width, height, maxval = header
    if width < 1 or height < 1:
        raise DecodeError(f"bad dimensions {width}x{height}")
    if maxval < 1 or maxval > 255:
        raise DecodeError(f"unsupported maxval {maxval}")
    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        raster = data[pos:pos + n]
        if len(raster) < n:
            raise DecodeError(f"truncated raster at byte {len(data)}")
        values = np.frombuffer(raster, dtype=np.uint8, count=n)
    else:
        values = np.empty(n, dtype=np.uint8)
        for i in range(n):
            tok, pos = _next_token(data, pos)
            v = int(tok)
            if v < 0 or v > maxval:
                raise DecodeError(f"sample {v} out of range at byte {pos}")
            values[i] = v
    if values.max(initial=0) > maxval:
        raise DecodeError(f"sample exceeds maxval {maxval}")
    img = values.reshape(height, width).astype(np.float64) / maxval
    return img


def encode_pgm(img: np.ndarray) -> bytes:
    """Encode a [0,1] image as binary P5, maxval 255."""
    a = validate_gray(img)
    h, w = a.shape
    raster = np.rint(a * 255.0).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes()


# ---------------------------------------------------------------------------
# Affine transforms (2x3, row-major: out = M[:, :2] @ (x, y) + M[:, 2])

def affine_identity() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def affine_translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def affine_rotation(theta: float, center=(0.0, 0.0)) -> np.ndarray:
    """Counter-clockwise rotation by theta radians about a point."""
    c, s = np.cos(theta), np.sin(theta)
    cx, cy = center
    return np.array([
        [c, -s, cx - c * cx + s * cy],
        [s, c, cy - s * cx - c * cy],
    ])


def affine_scaling(sx: float, sy: float | None = None) -> np.ndarray:
    if sy is None:
        sy = sx
    return np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]])


def affine_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transform applying b first, then a."""
    m = np.empty((2, 3))
    m[:, :2] = a[:, :2] @ b[:, :2]
    m[:, 2] = a[:, :2] @ b[:, 2] + a[:, 2]
    return m


def affine_invert(t: np.ndarray) -> np.ndarray:
    lin = np.asarray(t, dtype=np.float64)[:, :2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if abs(det) < 1e-12:
        raise ValueError("singular affine transform")
    inv = np.linalg.inv(lin)
    m = np.empty((2, 3))
    m[:, :2] = inv
    m[:, 2] = -inv @ t[:, 2]
    return m


def affine_apply_points(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply the transform to an (n, 2) array of (x, y) points."""
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return p @ np.asarray(t)[:, :2].T + np.asarray(t)[:, 2]


# ---------------------------------------------------------------------------
# Resampling

def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     fill: float | None) -> np.ndarray:
    """Sample img at continuous (x, y) points. Out-of-grid neighbors read
    fill, or the clamped edge value when fill is None."""
    h, w = img.shape
    if fill is None:
        xs = np.clip(xs, 0.5, w - 0.5)
        ys = np.clip(ys, 0.5, h - 0.5)
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.where(inside, img[np.clip(yi, 0, h - 1),
                                        np.clip(xi, 0, w - 1)],
                            0.0 if fill is None else fill)
            out += wgt * vals
    return out


def resample(img: np.ndarray, target, method: str = "bilinear") -> np.ndarray:
    """Resize to target (width, height) with center-aligned sampling."""
    tw, th = int(target[0]), int(target[1])
    if tw < 1 or th < 1:
        raise ValueError(f"target dimensions must be >= 1, got {tw}x{th}")
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape
    if (tw, th) == (w, h):
        return a.copy()
    xs = (np.arange(tw) + 0.5) * (w / tw)
    ys = (np.arange(th) + 0.5) * (h / th)
    if method == "nearest":
        xi = np.minimum(np.floor(xs).astype(np.int64), w - 1)
        yi = np.minimum(np.floor(ys).astype(np.int64), h - 1)
        return a[np.ix_(yi, xi)]
    if method == "bilinear":
        gx, gy = np.meshgrid(xs, ys)
        return _bilinear_sample(a, gx, gy, fill=None)
    raise ValueError(f"unknown method {method!r}")


def resample_labels(mask: np.ndarray, target) -> np.ndarray:
    """Nearest-neighbor resize preserving the label set (bool or int masks)."""
    tw, th = int(target[0]), int(target[1])
    if tw < 1 or th < 1:
        raise ValueError(f"target dimensions must be >= 1, got {tw}x{th}")
    h, w = mask.shape
    xs = (np.arange(tw) + 0.5) * (w / tw)
    ys = (np.arange(th) + 0.5) * (h / th)
    xi = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    yi = np.minimum(np.floor(ys).astype(np.int64), h - 1)
    return mask[np.ix_(yi, xi)]


def apply_affine(img: np.ndarray, t: np.ndarray, out_dims,
                 fill: float = 0.0) -> np.ndarray:
    """Warp img by t; output pixel x takes the bilinear sample at t^-1(x)."""
    inv = affine_invert(t)
    ow, oh = int(out_dims[0]), int(out_dims[1])
    if ow < 1 or oh < 1:
        raise ValueError("output dimensions must be >= 1")
    gx, gy = np.meshgrid(np.arange(ow) + 0.5, np.arange(oh) + 0.5)
    sx = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
    sy = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
    return _bilinear_sample(np.asarray(img, dtype=np.float64), sx, sy, fill)
