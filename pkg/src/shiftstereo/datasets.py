"""Synthetic random-dot stereogram generation and stereo-sample file I/O.

Stereograms are rendered from a cyclopean (middle-view) dot texture: a
piecewise-constant disparity field is projected into the left view at
+d/2 and into the right view at -d/2, so disparities are quantized to
even integers and the stereo constraint holds exactly. Left pixels that
no cyclopean point reaches, or whose cyclopean source is hidden in the
right view, carry +inf ground truth and are excluded from the validity
mask (they render as black holes in the left image).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError


@dataclass(frozen=True)
class RdsConfig:
    width: int = 96
    height: int = 96
    dot_density: float = 0.5
    num_shapes: int = 6
    disparity_range: tuple[int, int] = (6, 20)
    shape_kinds: tuple[str, ...] = ("rectangle", "ellipse")
    seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError("stereogram extents must be at least 16x16 "
                              "(shapes would be wider than the image)")
        if not 0.0 < self.dot_density < 1.0:
            raise ConfigError(f"dot_density must lie in (0, 1), got {self.dot_density}")
        lo, hi = self.disparity_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad disparity_range {self.disparity_range}")
        if hi >= self.width:
            raise ConfigError(f"max disparity {hi} must be below the width {self.width}")
        for kind in self.shape_kinds:
            if kind not in ("rectangle", "ellipse"):
                raise ConfigError(f"unknown shape kind {kind!r}")


@dataclass
class StereoSample:
    """Left/right images (C, H, W) normalized to [-1, 1], ground-truth
    disparity for the left view (+inf where occluded), and the validity mask."""

    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.left.shape[1]

    @property
    def width(self) -> int:
        return self.left.shape[2]


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to the [-1, 1] range the model consumes."""
    return ((raw - 0.5) / 0.5).astype(np.float32)


def denormalize_image(img: np.ndarray) -> np.ndarray:
    return np.clip(img * 0.5 + 0.5, 0.0, 1.0)


def _even(d: int) -> int:
    return d - (d % 2)


def _disparity_field(cfg: RdsConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    lo, hi = cfg.disparity_range
    disp = np.zeros((h, w), dtype=np.int64)
    max_half = max(3, min(h, w) // 4)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(cfg.num_shapes):
        kind = cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))]
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        hy = int(rng.integers(3, max_half + 1))
        hx = int(rng.integers(3, max_half + 1))
        d = _even(int(rng.integers(lo, hi + 1)))
        if kind == "rectangle":
            disp[max(cy - hy, 0):cy + hy + 1, max(cx - hx, 0):cx + hx + 1] = d
        else:
            inside = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0
            disp[inside] = d
    return disp


def _render_views(texture: np.ndarray, disp: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project the cyclopean texture into both views with a 1D z-buffer per row.

    Returns (left, right, gt, valid). Larger disparities (closer surfaces)
    win overlaps; winners are resolved per distinct disparity value in
    ascending order, so the ordering is deterministic.
    """
    h, w = texture.shape
    left = np.zeros((h, w), dtype=np.float32)
    right = np.zeros((h, w), dtype=np.float32)
    gt = np.full((h, w), np.inf, dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    xc = np.arange(w)
    for y in range(h):
        drow = disp[y]
        trow = texture[y]
        left_src = np.full(w, -1, dtype=np.int64)
        right_src = np.full(w, -1, dtype=np.int64)
        left_d = np.zeros(w, dtype=np.int64)
        for d_val in np.unique(drow):
            half = int(d_val) // 2
            sel = drow == d_val
            xl = xc[sel] + half
            keep = xl < w
            left_src[xl[keep]] = xc[sel][keep]
            left_d[xl[keep]] = d_val
            xr = xc[sel] - half
            keep = xr >= 0
            right_src[xr[keep]] = xc[sel][keep]
        filled = left_src >= 0
        left[y, filled] = trow[left_src[filled]]
        right_filled = right_src >= 0
        right[y, right_filled] = trow[right_src[right_filled]]
        # Valid: the same cyclopean column must have won both projections.
        xr_corr = left_src - left_d // 2
        both = filled & (xr_corr >= 0)
        cols = np.nonzero(both)[0]
        agree = right_src[xr_corr[cols]] == left_src[cols]
        ok = cols[agree]
        valid[y, ok] = True
        gt[y, ok] = left_d[ok]
    return left, right, gt, valid


def gen_rds(cfg: RdsConfig, count: int) -> list[StereoSample]:
    """Deterministic stereogram set; sample i uses an RNG derived from
    (cfg.seed, i), so any prefix of the set is stable under larger counts."""
    if count <= 0:
        raise ConfigError(f"count must be positive, got {count}")
    samples = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
        disp = _disparity_field(cfg, rng)
        texture = (rng.random((cfg.height, cfg.width)) < cfg.dot_density
                   ).astype(np.float32)
        left, right, gt, valid = _render_views(texture, disp)
        samples.append(StereoSample(
            left=normalize_image(left)[None],
            right=normalize_image(right)[None],
            gt=gt,
            valid=valid,
        ))
    return samples


# ---------------------------------------------------------------------------
# PFM (portable float map, grayscale "Pf")
# ---------------------------------------------------------------------------

def read_pfm(path: str) -> np.ndarray:
    """Read a grayscale PFM into an (H, W) float32 array (top row first)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ParseError(f"{path}: bad PFM magic {magic!r} (color 'PF' unsupported)")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ParseError(f"{path}: malformed PFM dimension line")
        try:
            width, height = int(dims[0]), int(dims[1])
        except ValueError:
            raise ParseError(f"{path}: non-integer PFM dimensions {dims}")
        if width <= 0 or height <= 0:
            raise ParseError(f"{path}: non-positive PFM dimensions {width}x{height}")
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise ParseError(f"{path}: malformed PFM scale line")
        if scale == 0:
            raise ParseError(f"{path}: PFM scale must be non-zero")
        payload = f.read(width * height * 4)
        if len(payload) != width * height * 4:
            raise ParseError(f"{path}: truncated PFM payload "
                             f"({len(payload)} of {width * height * 4} bytes)")
        endian = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(payload, dtype=endian).reshape(height, width)
        return data[::-1].astype(np.float32)  # rows are stored bottom-to-top


def write_pfm(values: np.ndarray, path: str) -> None:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ShapeError(f"write_pfm expects an (H, W) map, got shape {values.shape}")
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian payload
        f.write(values[::-1].astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# PNM (binary P5 grayscale / P6 RGB, 8-bit)
# ---------------------------------------------------------------------------

def _read_pnm_token(f, path):
    """One whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ParseError(f"{path}: truncated PNM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pnm(path: str) -> np.ndarray:
    """Read binary P5/P6 into (1, H, W) or (3, H, W) floats scaled to [0, 1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ParseError(f"{path}: unsupported PNM magic {magic!r}")
        width = int(_read_pnm_token(f, path))
        height = int(_read_pnm_token(f, path))
        maxval = int(_read_pnm_token(f, path))
        if maxval != 255:
            raise ParseError(f"{path}: only 8-bit PNM supported, maxval={maxval}")
        channels = 1 if magic == b"P5" else 3
        expected = width * height * channels
        payload = f.read(expected)
        if len(payload) != expected:
            raise ParseError(f"{path}: truncated PNM payload "
                             f"({len(payload)} of {expected} bytes)")
        data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
        return (data.transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_pnm(image: np.ndarray, path: str) -> None:
    """Write a (1, H, W) or (3, H, W) [0, 1] float image as binary P5/P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"write_pnm expects (1|3, H, W), got shape {image.shape}")
    channels, height, width = image.shape
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if channels == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{width} {height}\n255\n".encode("ascii"))
        f.write(quantized.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# dataset persistence and loading
# ---------------------------------------------------------------------------

LEFT_PATTERN = "left_%05d.pgm"
RIGHT_PATTERN = "right_%05d.pgm"
GT_PATTERN = "gt_%05d.pfm"


def save_samples(samples: list[StereoSample], out_dir: str,
                 manifest_name: str = "manifest.txt", start_index: int = 0) -> str:
    """Write samples plus a tab-separated left/right/gt manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples, start_index):
        left_path = os.path.join(out_dir, LEFT_PATTERN % i)
        right_path = os.path.join(out_dir, RIGHT_PATTERN % i)
        gt_path = os.path.join(out_dir, GT_PATTERN % i)
        write_pnm(denormalize_image(sample.left), left_path)
        write_pnm(denormalize_image(sample.right), right_path)
        write_pfm(sample.gt, gt_path)
        lines.append(f"{left_path}\t{right_path}\t{gt_path}")
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest_path


def read_manifest(path: str) -> list[tuple[str, ...]]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = tuple(line.split("\t"))
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated paths, "
                                 f"got {len(parts)}")
            entries.append(parts)
    return entries


def _read_image_any(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    if ext == ".pfm":
        return read_pfm(path)[None]
    raise ParseError(f"{path}: unsupported image extension {ext!r}")


def load_dataset(manifest_path: str, max_disparity: int) -> list[StereoSample]:
    """Load samples named by a manifest; the validity mask keeps pixels whose
    ground truth is finite and below ``max_disparity``."""
    samples = []
    for left_path, right_path, gt_path in read_manifest(manifest_path):
        for p in (left_path, right_path, gt_path):
            if not os.path.exists(p):
                raise ParseError(f"{manifest_path}: missing file {p}")
        left = normalize_image(_read_image_any(left_path))
        right = normalize_image(_read_image_any(right_path))
        gt = read_pfm(gt_path)
        if left.shape != right.shape:
            raise ShapeError(f"{left_path} vs {right_path}: image extents differ "
                             f"{left.shape} vs {right.shape}")
        if left.shape[1:] != gt.shape:
            raise ShapeError(f"{left_path} vs {gt_path}: image {left.shape[1:]} "
                             f"and ground truth {gt.shape} extents differ")
        valid = np.isfinite(gt) & (gt < max_disparity)
        samples.append(StereoSample(left=left, right=right, gt=gt, valid=valid))
    return samples
