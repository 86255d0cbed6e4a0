"""Positional-embedding grids and the cropped positional embedding (CPE).

Grid resizing uses the align-corners bilinear convention: output sample
``k`` of ``n`` sits at source coordinate ``k * (H - 1) / (n - 1)``.  Crops are
sampled the same way inside the crop rectangle, so a full-image crop at
matching sizes reproduces the grid.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

PE_KINDS = ("learnable", "sincos", "none")


@dataclass
class PEGrid:
    values: Tensor  # (H, W, D)
    kind: str = "learnable"

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ValueError(f"unknown PE kind {self.kind!r}")
        if self.values.ndim != 3:
            raise DimensionError(f"PE grid must be H x W x D, got {self.values.shape}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class CropRegion:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def aspect(self):
        return (self.x2 - self.x1) / (self.y2 - self.y1)

    def is_valid(self):
        return 0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0


FULL_REGION = CropRegion(0.0, 0.0, 1.0, 1.0)


@dataclass
class CpeConfig:
    upsample_size: int = 64
    scale_range: tuple = (0.1, 1.0)
    aspect_range: tuple = (0.5, 2.0)
    out_size: int = 14
    max_rejection_attempts: int = 100

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"scale_range must lie in (0, 1], got {self.scale_range}")
        alo, ahi = self.aspect_range
        if not 0.0 < alo <= ahi:
            raise ValueError(f"aspect_range must be positive and ordered, got {self.aspect_range}")
        if not 1 <= self.out_size <= self.upsample_size:
            raise ValueError("need 1 <= out_size <= upsample_size")
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be positive")


def _align_corners(n_out, n_in, lo=0.0, hi=1.0):
    """Source coordinates of ``n_out`` evenly spaced samples spanning [lo, hi]."""
    if n_out == 1:
        t = np.array([0.5 * (lo + hi)])
    else:
        t = lo + (hi - lo) * np.arange(n_out) / (n_out - 1)
    return t * (n_in - 1)


def _as_values(grid):
    return grid.values if isinstance(grid, PEGrid) else ad.as_tensor(grid)


def bilinear_resize(grid, out_h: int, out_w: int):
    """Align-corners bilinear resize of an (H, W, D) grid; differentiable.

    Accepts a :class:`PEGrid` (returns one of the same kind) or a raw tensor.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    values = _as_values(grid)
    h, w = values.shape[:2]
    ys = _align_corners(out_h, h)
    xs = _align_corners(out_w, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = ad.bilinear_sample(values, yy, xx)
    if isinstance(grid, PEGrid):
        return PEGrid(out, grid.kind)
    return out


def sample_crop_region(rng: np.random.Generator, cfg: CpeConfig) -> CropRegion:
    """Draw x1, y1 ~ U(0,1), x2 ~ U(x1,1), y2 ~ U(y1,1) until scale/aspect hold.

    Each attempt consumes four ``rng.uniform`` draws in the order x1, y1, x2,
    y2.  After ``cfg.max_rejection_attempts`` failures the full region is
    returned.
    """
    smin, smax = cfg.scale_range
    amin, amax = cfg.aspect_range
    for _ in range(cfg.max_rejection_attempts):
        x1 = rng.uniform(0.0, 1.0)
        y1 = rng.uniform(0.0, 1.0)
        x2 = rng.uniform(x1, 1.0)
        y2 = rng.uniform(y1, 1.0)
        if x2 <= x1 or y2 <= y1:
            continue
        region = CropRegion(x1, y1, x2, y2)
        if smin <= region.area <= smax and amin <= region.aspect <= amax:
            return region
    return FULL_REGION


def crop_coordinates(region: CropRegion, size: int, out_size: int):
    """Row/column source coordinates for an ``out_size`` lattice inside ``region``."""
    ys = _align_corners(out_size, size, region.y1, region.y2)
    xs = _align_corners(out_size, size, region.x1, region.x2)
    return np.meshgrid(ys, xs, indexing="ij")


def crop_resize(values, region: CropRegion, out_size: int):
    """Bilinearly sample an ``out_size`` square from ``region`` of an (H, W, D) grid."""
    values = ad.as_tensor(values)
    h, w = values.shape[:2]
    if h != w:
        raise DimensionError("crop_resize expects a square grid")
    yy, xx = crop_coordinates(region, h, out_size)
    return ad.bilinear_sample(values, yy, xx)


def cropped_positional_embedding(grid: PEGrid, cfg: CpeConfig, rng=None, region=None) -> PEGrid:
    """Upsample the grid, crop a random region, resize it back to ``out_size``.

    Pass ``region`` to bypass sampling (used for identity checks and replay).
    """
    if grid.kind != "learnable":
        raise ValueError("cropped positional embeddings need a learnable grid")
    if region is None:
        if rng is None:
            raise ad.ContractError("CPE needs an rng when no region is given")
        region = sample_crop_region(rng, cfg)
    up = bilinear_resize(grid.values, cfg.upsample_size, cfg.upsample_size)
    return PEGrid(crop_resize(up, region, cfg.out_size), "learnable")


def batched_cpe(values: Tensor, cfg: CpeConfig, regions) -> Tensor:
    """One CPE grid per region, stacked to (B, out, out, D) from a shared grid."""
    up = bilinear_resize(values, cfg.upsample_size, cfg.upsample_size)
    coords = [crop_coordinates(r, cfg.upsample_size, cfg.out_size) for r in regions]
    ys = np.stack([c[0] for c in coords])
    xs = np.stack([c[1] for c in coords])
    return ad.bilinear_sample(up, ys, xs)


def sincos_pe(h: int, w: int, d: int) -> PEGrid:
    """Fixed 2-D sinusoidal grid.

    Channels ``[0, d/2)`` encode the row, ``[d/2, d)`` the column; each half is
    ``d/4`` sines followed by ``d/4`` cosines at frequencies
    ``10000 ** (-k / (d/4))``.
    """
    if d % 4 != 0 or d <= 0:
        raise DimensionError(f"sincos embedding dim must be a positive multiple of 4, got {d}")
    q = d // 4
    freqs = 1.0 / 10000.0 ** (np.arange(q) / q)

    def axis_code(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    row = axis_code(h)  # (h, 2q)
    col = axis_code(w)  # (w, 2q)
    values = np.concatenate(
        [np.broadcast_to(row[:, None, :], (h, w, 2 * q)),
         np.broadcast_to(col[None, :, :], (h, w, 2 * q))],
        axis=2,
    )
    return PEGrid(Tensor(values), "sincos")


def zero_pe(h: int, w: int, d: int) -> PEGrid:
    return PEGrid(Tensor(np.zeros((h, w, d))), "none")


def pe_similarity_map(grid) -> np.ndarray:
    """Cosine similarity of every patch PE against every other: (H, W, H, W).

    ``out[r, c]`` is the tile for patch (r, c).  Zero-norm embeddings have
    similarity 0 with everything, themselves included.
    """
    v = _as_values(grid).data
    h, w, d = v.shape
    flat = v.reshape(h * w, d)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, flat / safe[:, None], 0.0)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, np.where(norms > 0, 1.0, 0.0))
    return sim.reshape(h, w, h, w)


# ---------------------------------------------------------------- serialization

def similarity_map_to_csv(sim: np.ndarray) -> str:
    """One tile per block (row-major over patches), blocks separated by a blank line."""
    h, w = sim.shape[:2]
    buf = io.StringIO()
    for r in range(h):
        for c in range(w):
            if r or c:
                buf.write("\n")
            for row in sim[r, c]:
                buf.write(",".join(repr(float(v)) for v in row))
                buf.write("\n")
    return buf.getvalue()


def similarity_map_from_csv(text: str) -> np.ndarray:
    blocks = [b for b in text.strip("\n").split("\n\n") if b.strip()]
    tiles = [np.array([[float(v) for v in line.split(",")] for line in b.strip("\n").split("\n")])
             for b in blocks]
    th, tw = tiles[0].shape
    n = len(tiles)
    if n != th * tw:
        raise ValueError(f"expected {th * tw} tiles of {th}x{tw}, found {n}")
    return np.stack(tiles).reshape(th, tw, th, tw)


def similarity_map_to_pgm(sim: np.ndarray, gap: int = 0) -> bytes:
    """Binary P5 image: tiles laid out row-major, value v -> round((v + 1) * 127.5)."""
    h, w = sim.shape[:2]
    th, tw = sim.shape[2:]
    H = h * th + (h - 1) * gap
    W = w * tw + (w - 1) * gap
    img = np.zeros((H, W), dtype=np.uint8)
    pix = np.rint((np.clip(sim, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    for r in range(h):
        for c in range(w):
            y0 = r * (th + gap)
            x0 = c * (tw + gap)
            img[y0:y0 + th, x0:x0 + tw] = pix[r, c]
    return b"P5\n%d %d\n255\n" % (W, H) + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)
