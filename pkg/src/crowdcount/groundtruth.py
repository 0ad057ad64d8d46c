"""Ground-truth density maps from dot annotations, plus dataset ingestion.

A density map is a single-channel non-negative grid whose sum equals the
annotated object count: each point deposits a Gaussian (std ``sigma``)
truncated to a (2*ceil(4*sigma)+1)^2 window and renormalized after
truncation/border clipping, so every point contributes exactly 1.0.

File formats:
  * annotations — one JSON document per dataset:
      {"images": [{"file": "rel/path", "points": [[x, y], ...]}, ...]}
    coordinates are floats in pixel units, origin top-left;
  * images — binary PGM (P5) / PPM (P6), 8-bit;
  * density maps — 16-byte header (magic ``DMAP``, u32 h, u32 w,
    u32 reserved) followed by raw little-endian float32 rows.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError

DMAP_MAGIC = b"DMAP"


@dataclass
class DotAnnotation:
    image_id: str
    points: list  # [(x, y), ...] sub-pixel coordinates

    @property
    def count(self):
        return len(self.points)


_kernel_cache = {}


def _gaussian_kernel(sigma):
    """Discrete 2-D Gaussian truncated at 4*sigma, normalized to sum 1."""
    key = float(sigma)
    if key not in _kernel_cache:
        r = math.ceil(4 * sigma)
        ax = np.arange(-r, r + 1, dtype=np.float64)
        g1 = np.exp(-(ax**2) / (2.0 * sigma * sigma))
        k = np.outer(g1, g1)
        _kernel_cache[key] = (k / k.sum(), r)
    return _kernel_cache[key]


def generate_density_map(ann: DotAnnotation, h, w, sigma):
    """Deposit one renormalized Gaussian per point; returns (h, w) float32."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if h < 1 or w < 1:
        raise ValueError("map extents must be positive")
    kern, r = _gaussian_kernel(sigma)
    out = np.zeros((h, w), np.float64)
    for x, y in ann.points:
        # nearest pixel center; clamp slightly out-of-frame points
        px = min(max(int(round(x)), 0), w - 1)
        py = min(max(int(round(y)), 0), h - 1)
        top, left = py - r, px - r
        ks = kern[
            max(0, -top) : kern.shape[0] - max(0, py + r + 1 - h),
            max(0, -left) : kern.shape[1] - max(0, px + r + 1 - w),
        ]
        s = ks.sum()
        out[max(0, top) : py + r + 1, max(0, left) : px + r + 1] += ks / s
    return out.astype(np.float32)


def downsample_gt(d, factor=4):
    """Sum-pool a density map by ``factor``, zero-padding odd remainders
    so the count integral is preserved exactly."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return d.copy()
    h, w = d.shape
    hp = -h % factor
    wp = -w % factor
    if hp or wp:
        d = np.pad(d, ((0, hp), (0, wp)))
    pooled = kernels.sum_pool(d[None, None], factor)
    return pooled[0, 0]


def validate_points(ann: DotAnnotation, w, h, source=""):
    """Reject points further out of frame than 2x the image bounds."""
    for i, (x, y) in enumerate(ann.points):
        if not (-w <= x < 2 * w and -h <= y < 2 * h):
            where = f"{source}: " if source else ""
            raise DataError(
                f"{where}image {ann.image_id!r} point {i} ({x}, {y}) "
                f"is outside 2x the {w}x{h} image bounds"
            )


def parse_annotations(path):
    """Read the dataset JSON; returns a list of DotAnnotation."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: cannot parse annotations: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DataError(f'{path}: expected a top-level {{"images": [...]}} object')
    anns = []
    for rec_no, rec in enumerate(doc["images"]):
        if not isinstance(rec, dict) or "file" not in rec or "points" not in rec:
            raise DataError(f"{path}: record {rec_no} missing 'file' or 'points'")
        pts = []
        for i, p in enumerate(rec["points"]):
            if (
                not isinstance(p, (list, tuple))
                or len(p) != 2
                or not all(isinstance(v, (int, float)) for v in p)
            ):
                raise DataError(
                    f"{path}: record {rec_no} ({rec['file']}) point {i} "
                    f"is not an [x, y] number pair"
                )
            pts.append((float(p[0]), float(p[1])))
        anns.append(DotAnnotation(image_id=rec["file"], points=pts))
    return anns


def write_annotations(anns, path):
    doc = {
        "images": [
            {"file": a.image_id, "points": [[x, y] for x, y in a.points]}
            for a in anns
        ]
    }
    with open(path, "w") as f:
        json.dump(doc, f)


# ---- netpbm images ----


def _read_pnm_token(f):
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataError("unexpected end of file in header")
        if ch == b"#":  # comment to end of line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def load_image(path):
    """Decode an 8-bit binary PGM (P5) or PPM (P6) into a (1,C,H,W)
    float32 tensor of raw 0..255 values."""
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
            if magic not in (b"P5", b"P6"):
                raise DataError(f"unsupported image magic {magic!r} (need P5/P6)")
            w = int(_read_pnm_token(f))
            h = int(_read_pnm_token(f))
            maxval = int(_read_pnm_token(f))
            if maxval <= 0 or maxval > 255:
                raise DataError(f"unsupported maxval {maxval} (8-bit only)")
            channels = 1 if magic == b"P5" else 3
            raw = f.read(w * h * channels)
            if len(raw) != w * h * channels:
                raise DataError("truncated pixel data")
    except DataError as e:
        raise DataError(f"{path}: {e}") from None
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot read image: {e}") from None
    img = np.frombuffer(raw, np.uint8).reshape(h, w, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None]).astype(np.float32)


def write_pgm(gray, path):
    """Write a (H, W) uint8 array as binary PGM."""
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(gray, np.uint8).tobytes())


def normalize_image(x):
    """Map raw [0, 255] pixel values to [-1, 1] per channel."""
    return (x.astype(np.float32) / 127.5) - 1.0


# ---- density-map files ----


def write_dmap(d, path):
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC + struct.pack("<III", h, w, 0))
        f.write(np.ascontiguousarray(d, "<f4").tobytes())


def read_dmap(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != DMAP_MAGIC:
            raise DataError(f"{path}: not a DMAP file")
        h, w, _ = struct.unpack("<III", head[4:])
        raw = f.read(4 * h * w)
    if len(raw) != 4 * h * w:
        raise DataError(f"{path}: truncated DMAP payload")
    return np.frombuffer(raw, "<f4").reshape(h, w).copy()


def write_dmap_csv(d, path):
    np.savetxt(path, d, delimiter=",", fmt="%.6g")
