"""Finite-difference verification of every differentiable path.

Each check builds a scalar from random inputs, runs ``backward`` and compares
every input's gradient with central differences.  Non-scalar outputs are
contracted with a fixed random weight tensor first, so every output
coordinate contributes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (DualEncoder, TextConfig, VitConfig, attention_block, image_forward,
                       text_forward)
from .losses import (LossConfig, focal_contrastive_loss, softmax_contrastive_loss,
                     total_contrastive_loss)
from .pe import CpeConfig, PEGrid, bilinear_resize, cropped_positional_embedding
from .scoring import RegionBox, normalized_layer, region_embed

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class Check:
    name: str
    make_inputs: Callable[[np.random.Generator], list]
    fn: Callable
    trials: int = 4


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    worst_input: int
    worst_coord: tuple
    passed: bool


def _contract(out, rng):
    if out.size == 1:
        return out.reshape(())
    w = rng.normal(size=out.shape)
    return (out * w).sum()


def check_gradients(fn, inputs, rng, h=STEP):
    """Return (max relative error, input index, coordinate) over all inputs.

    Each input's error is scaled by its own largest gradient, floored at the
    largest gradient of any input in the check.
    """
    seed = int(rng.integers(2**31))
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    loss = _contract(fn(*tensors), np.random.default_rng(seed))
    ad.backward(loss)
    pairs = []
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = Tensor(xi)
            return _contract(fn(*args), np.random.default_rng(seed)).item()
        pairs.append((tensors[i].grad, ad.finite_diff_grad(f, x, h)))
    floor = max((max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
                 for a, n in pairs), default=0.0)
    floor = max(floor, 1e-12)
    worst = (0.0, -1, ())
    for i, (analytic, numeric) in enumerate(pairs):
        err = ad.relative_error(analytic, numeric, floor)
        if err > worst[0] or worst[1] < 0:
            coord = np.unravel_index(int(np.argmax(np.abs(analytic - numeric))), numeric.shape) \
                if numeric.size else ()
            worst = (err, i, tuple(int(c) for c in coord))
    return worst


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _tiny_model(seed=0, pe_mode="learnable"):
    vit = VitConfig(image_size=8, patch_size=4, channels=1, dim=8, depth=1, heads=2,
                    mlp_ratio=2, pe_mode=pe_mode)
    text = TextConfig(vocab_size=12, max_len=4, dim=8, depth=1, heads=2, mlp_ratio=2)
    return DualEncoder.init(vit, text, CpeConfig(upsample_size=6, out_size=2), seed=seed,
                            tau_init=0.5, pe_std=0.5)


def _block_params(rng, d, hidden):
    names = ["ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
             "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
    shapes = [(d,), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,), (d, d), (d,), (d,), (d,),
              (d, hidden), (hidden,), (hidden, d), (d,)]
    return names, [rng.normal(0, 0.5, size=s) + (1.0 if n.endswith(".g") else 0.0)
                   for n, s in zip(names, shapes)]


def _attention_fn(names):
    def fn(x, *params):
        return attention_block(x, dict(zip(names, params)), heads=2)
    return fn


def _dual_encoder_check(kind):
    """End-to-end contrastive loss w.r.t. every encoder parameter (B=2, dim 8, depth 1)."""
    base = _tiny_model()
    names = list(base.params)
    cfg = LossConfig(kind=kind)

    def make(rng):
        m = _tiny_model(seed=int(rng.integers(1000)))
        images = rng.uniform(0, 1, size=(2, 8, 8, 1))
        tokens = [[1, 2, 3], [4, 5]]
        make.ctx = (images, tokens)
        return [m.params[k].data.copy() for k in names]

    def fn(*params):
        images, tokens = make.ctx
        m = DualEncoder(vit=base.vit, text=base.text, cpe=base.cpe, params=dict(zip(names, params)))
        return total_contrastive_loss(image_forward(m, images), text_forward(m, tokens), m.tau, cfg)

    return make, fn


def default_checks() -> list:
    d, hidden = 4, 8
    block_names, _ = _block_params(np.random.default_rng(0), d, hidden)
    cpe_cfg = CpeConfig(upsample_size=9, out_size=4)
    checks = [
        Check("matmul", lambda r: [_u(r, 3, 4), _u(r, 4, 2)], ad.matmul),
        Check("matmul_batched", lambda r: [_u(r, 2, 3, 4), _u(r, 4, 2)], ad.matmul),
        Check("add_broadcast", lambda r: [_u(r, 3, 4), _u(r, 4)], ad.add),
        Check("sub", lambda r: [_u(r, 3, 4), _u(r, 3, 1)], ad.sub),
        Check("mul_broadcast", lambda r: [_u(r, 2, 3), _u(r, 1, 3)], ad.mul),
        Check("div", lambda r: [_u(r, 2, 3), _u(r, 2, 3, lo=0.5, hi=2.0)], ad.div),
        Check("power", lambda r: [_u(r, 5, lo=0.5, hi=2.0)], lambda x: ad.power(x, -0.5)),
        Check("exp", lambda r: [_u(r, 5)], ad.exp),
        Check("log", lambda r: [_u(r, 5, lo=0.2, hi=2.0)], ad.log),
        Check("tanh", lambda r: [_u(r, 5)], ad.tanh),
        Check("sigmoid", lambda r: [_u(r, 5)], ad.sigmoid),
        Check("softplus", lambda r: [_u(r, 5)], ad.softplus),
        Check("gelu", lambda r: [_u(r, 5)], ad.gelu),
        Check("sum_axis", lambda r: [_u(r, 3, 4)], lambda x: ad.tsum(x, axis=1)),
        Check("mean", lambda r: [_u(r, 3, 4)], lambda x: ad.mean(x, axis=0, keepdims=True)),
        Check("reshape_transpose", lambda r: [_u(r, 2, 3, 4)],
              lambda x: x.transpose(2, 0, 1).reshape(4, 6)),
        Check("softmax", lambda r: [_u(r, 3, 5)], lambda x: ad.softmax(x, axis=1)),
        Check("log_softmax", lambda r: [_u(r, 3, 5)], lambda x: ad.log_softmax(x, axis=0)),
        Check("l2_normalize", lambda r: [_u(r, 3, 4)], ad.l2_normalize),
        Check("layer_norm", lambda r: [_u(r, 3, 6), _u(r, 6), _u(r, 6)], ad.layer_norm),
        Check("embedding", lambda r: [_u(r, 5, 3)], lambda t: ad.embedding(t, [[0, 2, 2], [4, 0, 1]])),
        Check("bilinear_resize", lambda r: [_u(r, 3, 4, 2)], lambda g: bilinear_resize(g, 5, 7)),
        Check("cpe_path", lambda r: [_u(r, 4, 4, 2)],
              lambda g: cropped_positional_embedding(PEGrid(g), cpe_cfg, np.random.default_rng(7)).values),
        Check("attention_block", lambda r: [_u(r, 2, 3, d)] + _block_params(r, d, hidden)[1],
              _attention_fn(block_names), trials=3),
        Check("region_embed", lambda r: [_u(r, 5, 6, 3)],
              lambda fm: region_embed(fm, RegionBox(0.1, 0.2, 0.7, 0.9))),
        Check("normalized_layer", lambda r: [_u(r, 1, 4), _u(r, 3, 4), _u(r, 3)],
              lambda x, w, b: normalized_layer(x, w, b, 20.0)),
        Check("softmax_loss", lambda r: [_unit_rows(r, 3, 4), _unit_rows(r, 3, 4), r.uniform(0.3, 1.0, size=())],
              softmax_contrastive_loss, trials=10),
        Check("focal_loss", lambda r: [_unit_rows(r, 3, 4), _unit_rows(r, 3, 4), r.uniform(0.3, 1.0, size=())],
              lambda v, l, t: focal_contrastive_loss(v, l, t, 2.0), trials=10),
        Check("focal_loss_gamma0", lambda r: [_unit_rows(r, 4, 3), _unit_rows(r, 4, 3), r.uniform(0.3, 1.0, size=())],
              lambda v, l, t: focal_contrastive_loss(v, l, t, 0.0), trials=4),
        Check("total_focal", lambda r: [_unit_rows(r, 3, 4), _unit_rows(r, 3, 4), r.uniform(0.3, 1.0, size=())],
              lambda v, l, t: total_contrastive_loss(v, l, t, LossConfig("focal", 1.5)), trials=4),
    ]
    for kind in ("softmax", "focal"):
        make, fn = _dual_encoder_check(kind)
        checks.append(Check(f"dual_encoder_{kind}", make, fn, trials=1))
    return checks


def run_checks(checks=None, seed=0, tol=TOLERANCE):
    rng = np.random.default_rng(seed)
    results = []
    for chk in checks or default_checks():
        worst = (0.0, -1, ())
        for _ in range(chk.trials):
            inputs = chk.make_inputs(rng)
            res = check_gradients(chk.fn, inputs, rng)
            if res[0] > worst[0] or worst[1] < 0:
                worst = res
        results.append(CheckResult(chk.name, chk.trials, worst[0], worst[1], worst[2], worst[0] < tol))
    return results


def gradcheck_all(seed=0, tol=TOLERANCE):
    """Run the default matrix; returns (results, seconds)."""
    t0 = time.perf_counter()
    results = run_checks(seed=seed, tol=tol)
    return results, time.perf_counter() - t0


def format_table(results) -> str:
    lines = ["check,trials,max_rel_err,worst_input,worst_coord,status"]
    for r in results:
        coord = ":".join(str(c) for c in r.worst_coord)
        lines.append(f"{r.name},{r.trials},{r.max_rel_err:.3e},{r.worst_input},{coord},"
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
