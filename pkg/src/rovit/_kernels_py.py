"""Pure numpy versions of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``ROVIT_PURE_PYTHON=1`` is set.  Array layouts match the extension exactly:
grids are C-contiguous (G, H, W, D) float64, coordinates (G, N) float64 and
already clamped to the grid.
"""

import numpy as np


def _corners(ys, xs, h, w):
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    np.clip(y0, 0, h - 1, out=y0)
    np.clip(x0, 0, w - 1, out=x0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    return y0, x0, y1, x1, wy, wx


def bilinear_gather(grid, ys, xs):
    g, h, w, _ = grid.shape
    y0, x0, y1, x1, wy, wx = _corners(ys, xs, h, w)
    gi = np.arange(g)[:, None]
    top = grid[gi, y0, x0] * (1.0 - wx) + grid[gi, y0, x1] * wx
    bot = grid[gi, y1, x0] * (1.0 - wx) + grid[gi, y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def bilinear_scatter(grad, ys, xs, h, w):
    g, n, d = grad.shape
    y0, x0, y1, x1, wy, wx = _corners(ys, xs, h, w)
    out = np.zeros((g, h, w, d))
    gi = np.broadcast_to(np.arange(g)[:, None], (g, n))
    np.add.at(out, (gi, y0, x0), grad * (1.0 - wy) * (1.0 - wx))
    np.add.at(out, (gi, y0, x1), grad * (1.0 - wy) * wx)
    np.add.at(out, (gi, y1, x0), grad * wy * (1.0 - wx))
    np.add.at(out, (gi, y1, x1), grad * wy * wx)
    return out


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def focal_terms(logits, gamma):
    """Per-pair focal terms and their derivative w.r.t. the logit.

    Diagonal entries are the positive pairs.  With ``u = -x`` on the diagonal
    and ``u = x`` elsewhere, a term is ``sigmoid(u)**gamma * softplus(u)``.
    """
    b = logits.shape[0]
    sign = np.full(logits.shape, 1.0)
    sign[np.arange(b), np.arange(b)] = -1.0
    u = sign * logits
    s = _sigmoid(u)
    sp = np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    mod = s ** gamma
    terms = mod * sp
    dterms = sign * mod * (gamma * (1.0 - s) * sp + s)
    return terms, dterms
