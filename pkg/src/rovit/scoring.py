"""Open-vocabulary detection scoring.

A region's VLM score ``z`` (softmaxed cosine against category text
embeddings) and detection score ``p`` are fused by a weighted geometric mean,
then scaled by objectness:

    s = z**(1 - a) * p**a        a = alpha for base, beta for novel categories
    S = o**delta * s

Background takes ``p`` as-is.  ``0**0`` is 1 throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

BACKGROUND = "background"


@dataclass
class ScoreConfig:
    alpha: float = 0.65
    beta: float = 0.3
    delta: float = 3.0
    tau_cls: float = 20.0
    base_ids: tuple = ()
    novel_ids: tuple = ()
    background_ids: tuple = (BACKGROUND,)

    def __post_init__(self):
        self.base_ids = tuple(str(c) for c in self.base_ids)
        self.novel_ids = tuple(str(c) for c in self.novel_ids)
        self.background_ids = tuple(str(c) for c in self.background_ids)
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if set(self.base_ids) & set(self.novel_ids):
            raise ValueError("base and novel category sets overlap")

    @classmethod
    def transfer(cls, **kw):
        """Every category treated as novel with (alpha, beta) = (0.0, 0.65)."""
        return cls(alpha=0.0, beta=0.65, **kw)


@dataclass(frozen=True)
class RegionBox:
    """Normalized box over the feature map, pixel-edge convention."""
    x1: float
    y1: float
    x2: float
    y2: float

    def clamped(self):
        return RegionBox(*(min(max(v, 0.0), 1.0) for v in (self.x1, self.y1, self.x2, self.y2)))

    @property
    def area(self):
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def iou(self, other: "RegionBox") -> float:
        ix = max(0.0, min(self.x2, other.x2) - max(self.x1, other.x1))
        iy = max(0.0, min(self.y2, other.y2) - max(self.y1, other.y1))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass
class CategoryScores:
    z: np.ndarray
    p: np.ndarray
    objectness: float
    combined: np.ndarray = field(default=None)
    final: np.ndarray = field(default=None)


def roi_coordinates(box: RegionBox, h: int, w: int, samples: int = 2, bins: int = 7):
    """RoI-Align sample points in feature-grid coordinates.

    The box is split into ``bins x bins`` bins with ``samples x samples``
    regularly spaced points per bin, i.e. a uniform lattice of ``bins *
    samples`` points per axis.  Cell ``j`` of a width-``w`` map spans
    ``[j/w, (j+1)/w]``; its centre is grid coordinate ``j``.
    """
    if samples < 1 or bins < 1:
        raise ValueError("samples and bins must be >= 1")
    b = box.clamped()
    if b.x2 <= b.x1 or b.y2 <= b.y1:
        raise ValueError(f"degenerate region box {box}")
    n = samples * bins
    t = (np.arange(n) + 0.5) / n
    ys = (b.y1 + t * (b.y2 - b.y1)) * h - 0.5
    xs = (b.x1 + t * (b.x2 - b.x1)) * w - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def region_pool(feature_map, box: RegionBox, samples: int = 2, bins: int = 7) -> Tensor:
    """RoI-Align over ``box`` averaged across its bins, (D,)."""
    fm = ad.as_tensor(feature_map)
    if fm.ndim != 3:
        raise DimensionError(f"feature map must be H x W x D, got {fm.shape}")
    h, w, d = fm.shape
    yy, xx = roi_coordinates(box, h, w, samples, bins)
    vals = ad.bilinear_sample(fm, yy, xx).reshape(-1, d)
    return vals.mean(axis=0)


def region_embed(feature_map, box: RegionBox, samples: int = 2, bins: int = 7) -> Tensor:
    """Unit-norm region embedding, (1, D).  ``samples=1, bins=1`` is point sampling."""
    pooled = region_pool(feature_map, box, samples, bins)
    return ad.l2_normalize(pooled.reshape(1, -1))


def vlm_scores(region_emb, text_embs, temperature) -> np.ndarray:
    """Softmax over categories of cosine / temperature."""
    r = np.asarray(getattr(region_emb, "data", region_emb), dtype=np.float64).reshape(-1)
    t = np.asarray(getattr(text_embs, "data", text_embs), dtype=np.float64)
    logits = t @ r / float(temperature)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def _geo(z, p, w):
    # the exact cases are returned as-is so they hold bit-for-bit
    if w == 0.0 or z == p:
        return z if w == 0.0 else p
    if w == 1.0:
        return p
    # 0**0 == 1 in numpy, matching the documented convention
    return np.power(z, 1.0 - w) * np.power(p, w)


def combine_scores(z, p, cfg: ScoreConfig, category_id) -> float:
    """Geometric-mean fusion for one category; background returns ``p``."""
    cid = str(category_id)
    if cid in cfg.background_ids:
        return float(p)
    if cid in cfg.base_ids:
        return float(_geo(z, p, cfg.alpha))
    if cid in cfg.novel_ids:
        return float(_geo(z, p, cfg.beta))
    raise KeyError(f"category {category_id!r} is neither base, novel nor background")


def apply_objectness(s, o, delta):
    """``o**delta * s``."""
    return np.power(o, delta) * s


def score_region(z, p, o, categories, cfg: ScoreConfig) -> CategoryScores:
    """Fuse per-category z, p and the region objectness into final scores.

    Background entries keep ``p`` without the objectness factor.
    """
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    combined = np.array([combine_scores(zi, pi, cfg, c) for zi, pi, c in zip(z, p, categories)])
    final = combined.copy()
    fg = np.array([str(c) not in cfg.background_ids for c in categories], dtype=bool)
    final[fg] = apply_objectness(combined[fg], o, cfg.delta)
    return CategoryScores(z=z, p=p, objectness=float(o), combined=combined, final=final)


def normalized_layer(x, w, b, tau_cls: float = 20.0, eps: float = 1e-6) -> Tensor:
    """``tau * cos(w_c, x) + b_c`` for each category row ``w_c``; differentiable.

    Norms below ``eps`` are replaced by ``eps`` (so a zero input or weight row
    yields logit ``b_c``).
    """
    x = ad.as_tensor(x)
    w = ad.as_tensor(w)
    xr = x.reshape(1, -1) if x.ndim == 1 else x
    if xr.shape[-1] != w.shape[-1]:
        raise DimensionError(f"feature dim {xr.shape[-1]} does not match weight dim {w.shape[-1]}")
    xn = ad.l2_normalize(xr, eps)
    wn = ad.l2_normalize(w, eps)
    out = ad.matmul(xn, wn.T) * tau_cls + b
    return out.reshape(-1) if x.ndim == 1 else out


# ---------------------------------------------------------------- CSV surface

def read_score_csv(text: str):
    """Parse ``region_id, z_<cat>..., p_<cat>..., o`` rows.

    Returns (categories, rows) where each row is (region_id, z, p, o).  A
    category may lack a ``z_`` column (background); its z is NaN.
    """
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if not header or header[0] != "region_id" or "o" not in header:
        raise ValueError("score CSV needs a region_id column first and an o column")
    pcols = [h[2:] for h in header if h.startswith("p_")]
    zcols = {h[2:] for h in header if h.startswith("z_")}
    unknown = zcols - set(pcols)
    if unknown:
        raise ValueError(f"z columns without matching p columns: {sorted(unknown)}")
    idx = {h: i for i, h in enumerate(header)}
    rows = []
    for rec in reader:
        if not rec or not "".join(rec).strip():
            continue
        z = np.array([float(rec[idx["z_" + c]]) if c in zcols else np.nan for c in pcols])
        p = np.array([float(rec[idx["p_" + c]]) for c in pcols])
        rows.append((rec[0].strip(), z, p, float(rec[idx["o"]])))
    return pcols, rows


def score_csv(text: str, cfg: ScoreConfig) -> str:
    """Final scores ``S_<cat>`` per region, categories in input column order."""
    categories, rows = read_score_csv(text)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["region_id"] + [f"S_{c}" for c in categories])
    for rid, z, p, o in rows:
        for arr, name in ((z, "z"), (p, "p")):
            vals = arr[~np.isnan(arr)]
            if np.any((vals < 0) | (vals > 1)):
                raise ValueError(f"region {rid}: {name} scores must lie in [0, 1]")
        if not 0.0 <= o <= 1.0:
            raise ValueError(f"region {rid}: objectness must lie in [0, 1]")
        for c, zi in zip(categories, z):
            if np.isnan(zi) and c not in cfg.background_ids:
                raise ValueError(f"region {rid}: category {c} has no z column")
        res = score_region(np.nan_to_num(z), p, o, categories, cfg)
        writer.writerow([rid] + [repr(float(v)) for v in res.final])
    return out.getvalue()
