"""Procedural image-text pairs and multi-object region tasks.

Every image shows coloured glyphs over low-amplitude noise; every caption is
three token ids ``(shape, color, position)`` drawn from a fixed vocabulary.
All outputs are pure functions of ``(seed, image_size)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .scoring import RegionBox

SHAPES = ("square", "cross", "circle")
COLORS = ("red", "green", "blue")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")

PAD = 0
SHAPE_BASE = 1
COLOR_BASE = SHAPE_BASE + len(SHAPES)
POS_BASE = COLOR_BASE + len(COLORS)
VOCAB_USED = POS_BASE + len(POSITIONS)

HALF = 4  # glyph half-extent in pixels (9 x 9 footprint)


@dataclass
class SyntheticPair:
    image: np.ndarray  # (H, W, 3)
    tokens: tuple
    attributes: tuple  # (shape, color, position)


@dataclass
class RegionTask:
    image: np.ndarray
    boxes: list
    tokens: list
    attributes: list
    objectness: list
    proposals: list = field(default_factory=list)  # (box, object index, objectness)
    requested_k: int = 0

    @property
    def reduced(self):
        return len(self.boxes) < self.requested_k


def encode_tokens(shape: int, color: int, position: int) -> tuple:
    return (SHAPE_BASE + shape, COLOR_BASE + color, POS_BASE + position)


def decode_tokens(tokens) -> tuple:
    s, c, p = (int(t) for t in tokens)
    shape, color, pos = s - SHAPE_BASE, c - COLOR_BASE, p - POS_BASE
    if not (0 <= shape < len(SHAPES) and 0 <= color < len(COLORS) and 0 <= pos < len(POSITIONS)):
        raise ValueError(f"tokens {tokens} do not encode an attribute triple")
    return shape, color, pos


def category_tokens(shape: int, color: int) -> tuple:
    """Two-token category prompt (shape, color) used for region classification."""
    return (SHAPE_BASE + shape, COLOR_BASE + color)


def category_id(shape: int, color: int) -> str:
    return f"{SHAPES[shape]}-{COLORS[color]}"


def all_categories():
    return [(s, c) for s in range(len(SHAPES)) for c in range(len(COLORS))]


def novel_combinations(fraction: float = 0.2, split_seed: int = 0):
    """Deterministic held-out (shape, color) combinations."""
    cats = all_categories()
    n = max(1, int(round(fraction * len(cats)))) if fraction > 0 else 0
    order = np.random.default_rng(split_seed).permutation(len(cats))
    return sorted(cats[i] for i in order[:n])


def glyph_mask(shape: int) -> np.ndarray:
    r = np.arange(-HALF, HALF + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    if shape == 0:
        return np.ones_like(dy, dtype=bool)
    if shape == 1:
        return (np.abs(dy) <= 1) | (np.abs(dx) <= 1)
    if shape == 2:
        return dy * dy + dx * dx <= (HALF + 0.5) ** 2
    raise ValueError(f"unknown shape id {shape}")


def _background(rng, size):
    return rng.uniform(0.0, 0.25, size=(size, size, 3))


def _paint(image, shape, color, cy, cx):
    mask = glyph_mask(shape)
    ys, xs = np.nonzero(mask)
    ys = ys + cy - HALF
    xs = xs + cx - HALF
    image[ys, xs, :] = 0.1
    image[ys, xs, color] = 1.0
    return (ys.min(), xs.min(), ys.max(), xs.max())


def position_bin(cy, cx, size) -> int:
    half = size / 2.0
    return int(cy >= half) * 2 + int(cx >= half)


def gen_pair(seed: int, image_size: int = 32) -> SyntheticPair:
    rng = np.random.default_rng(seed)
    shape = int(rng.integers(len(SHAPES)))
    color = int(rng.integers(len(COLORS)))
    pos = int(rng.integers(len(POSITIONS)))
    image = _background(rng, image_size)
    q = image_size // 2
    qr, qc = divmod(pos, 2)
    jitter = max(0, min(2, q // 2 - HALF - 1))
    cy = qr * q + q // 2 + int(rng.integers(-jitter, jitter + 1))
    cx = qc * q + q // 2 + int(rng.integers(-jitter, jitter + 1))
    _paint(image, shape, color, cy, cx)
    return SyntheticPair(image=image, tokens=encode_tokens(shape, color, pos),
                         attributes=(shape, color, pos))


def centerness(box: RegionBox, px: float, py: float) -> float:
    """Localization quality of point (px, py) w.r.t. ``box``; 1 at the centre, 0 outside."""
    left, right = px - box.x1, box.x2 - px
    top, bottom = py - box.y1, box.y2 - py
    if min(left, right, top, bottom) <= 0:
        return 0.0
    return float(np.sqrt(min(left, right) / max(left, right) * min(top, bottom) / max(top, bottom)))


def gen_region_task(seed: int, k: int, image_size: int = 32, max_retries: int = 200,
                    jitter: float = 0.3) -> RegionTask:
    """Place up to ``k`` non-overlapping glyphs; each gets a box, tokens and objectness.

    Ground-truth boxes have objectness 1 (their own centre).  One jittered
    proposal per object is added, scored by the centerness of its centre
    inside the ground-truth box.  When placement fails within
    ``max_retries`` the task keeps fewer objects and ``reduced`` is True.
    """
    rng = np.random.default_rng(seed)
    image = _background(rng, image_size)
    occupied = np.zeros((image_size, image_size), dtype=bool)
    task = RegionTask(image=image, boxes=[], tokens=[], attributes=[], objectness=[],
                      requested_k=k)
    lo, hi = HALF + 1, image_size - HALF - 1
    for _ in range(k):
        shape = int(rng.integers(len(SHAPES)))
        color = int(rng.integers(len(COLORS)))
        placed = False
        for _ in range(max_retries):
            cy = int(rng.integers(lo, hi))
            cx = int(rng.integers(lo, hi))
            # one-pixel margin keeps boxes from touching
            if occupied[cy - HALF - 1:cy + HALF + 2, cx - HALF - 1:cx + HALF + 2].any():
                continue
            y0, x0, y1, x1 = _paint(image, shape, color, cy, cx)
            occupied[y0:y1 + 1, x0:x1 + 1] = True
            placed = True
            break
        if not placed:
            break
        box = RegionBox(x0 / image_size, y0 / image_size, (x1 + 1) / image_size, (y1 + 1) / image_size)
        pos = position_bin(cy + 0.5, cx + 0.5, image_size)
        task.boxes.append(box)
        task.tokens.append(encode_tokens(shape, color, pos))
        task.attributes.append((shape, color, pos))
        task.objectness.append(1.0)
    for i, box in enumerate(task.boxes):
        w, h = box.x2 - box.x1, box.y2 - box.y1
        dx, dy = rng.uniform(-jitter, jitter, size=2) * (w, h)
        prop = RegionBox(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy).clamped()
        o = centerness(box, 0.5 * (prop.x1 + prop.x2), 0.5 * (prop.y1 + prop.y2))
        task.proposals.append((prop, i, o))
    return task


def corpus_csv(seeds, image_size: int = 32) -> str:
    """One line per pair: seed, attribute ids, token ids."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["seed", "shape", "color", "position", "tok0", "tok1", "tok2"])
    for s in seeds:
        pair = gen_pair(int(s), image_size)
        w.writerow([int(s), *pair.attributes, *pair.tokens])
    return out.getvalue()


def training_seeds(start: int, count: int, novel=(), image_size: int = 32):
    """The first ``count`` seeds >= ``start`` whose (shape, color) is not held out."""
    novel = set(map(tuple, novel))
    out = []
    s = start
    while len(out) < count:
        shape, color, _ = gen_pair(s, image_size).attributes
        if (shape, color) not in novel:
            out.append(s)
        s += 1
    return out
