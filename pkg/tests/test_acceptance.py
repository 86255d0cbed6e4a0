"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line.

Runnable under pytest or directly: ``python tests/test_acceptance.py``.
"""

import csv
import math
import os
import subprocess
import sys
import tempfile
import time

import numpy as np
import pytest

from rovit import autodiff as ad
from rovit.ablation import final_loss
from rovit.config import RunConfig
from rovit.evaluate import eval_retrieval
from rovit.gradcheck import TOLERANCE, gradcheck_all
from rovit.losses import focal_contrastive_loss, softmax_contrastive_loss
from rovit.pe import FULL_REGION, CpeConfig, PEGrid, bilinear_resize, cropped_positional_embedding, sample_crop_region
from rovit.scoring import ScoreConfig, apply_objectness, combine_scores, normalized_layer
from rovit.train import build_model, pretrain


def _emit(n, title, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    capture = getattr(_emit, "capture", None)
    if capture is not None:
        with capture.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    _emit.capture = capsys
    yield
    _emit.capture = None


def _unit(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# independent double-loop oracles

def _naive_softmax(V, L, tau):
    b = len(V)
    S = [[sum(V[i][k] * L[j][k] for k in range(len(V[i]))) / tau for j in range(b)] for i in range(b)]
    total = 0.0
    for i in range(b):
        m = max(S[i])
        lse = m + math.log(sum(math.exp(s - m) for s in S[i]))
        total += lse - S[i][i]
    return total / b


def _naive_focal(V, L, tau, gamma):
    b = len(V)
    total = 0.0
    for i in range(b):
        for j in range(b):
            s = sum(V[i][k] * L[j][k] for k in range(len(V[i]))) / tau
            z = s if i == j else -s
            p = 1.0 / (1.0 + math.exp(-z))
            q = 1.0 / (1.0 + math.exp(z))  # 1 - p without cancellation
            total += -(q ** gamma) * math.log(p)
    return total / b


# 1
def test_gradient_oracle():
    results, seconds = gradcheck_all(seed=0)
    trials = sum(r.trials for r in results)
    worst = max(r.max_rel_err for r in results)
    names = {r.name for r in results}
    covered = {"softmax_loss", "focal_loss", "cpe_path", "region_embed", "normalized_layer"} <= names
    ok = all(r.passed for r in results) and worst < TOLERANCE and trials >= 100 and seconds < 60 and covered
    _emit(1, "gradient oracle", ok,
          f"{len(results)} checks, {trials} trials, max rel err {worst:.2e}, {seconds:.1f}s")


# 2
def test_loss_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for b in range(1, 9):
        for _ in range(10):
            V, L = _unit(rng, b, 8), _unit(rng, b, 8)
            tau = rng.uniform(0.1, 1.0)
            Vl, Ll = V.tolist(), L.tolist()
            worst = max(worst, abs(softmax_contrastive_loss(V, L, tau).item() - _naive_softmax(Vl, Ll, tau)))
            worst = max(worst, abs(focal_contrastive_loss(V, L, tau, 2.0).item() - _naive_focal(Vl, Ll, tau, 2.0)))
    # gamma = 0 reduces to binary cross-entropy on the pair labels
    V, L = _unit(rng, 5, 4), _unit(rng, 5, 4)
    S = V @ L.T / 0.4
    Y = np.eye(5)
    bce = np.sum(Y * np.logaddexp(0, -S) + (1 - Y) * np.logaddexp(0, S)) / 5
    bce_err = abs(focal_contrastive_loss(V, L, 0.4, 0.0).item() - bce)
    zero = np.zeros((1, 2))
    b1 = focal_contrastive_loss(zero, zero, 1.0, 2.0).item()
    E = np.ones((2, 3)) / math.sqrt(3)
    b2 = softmax_contrastive_loss(E, E, 1.0).item()
    ok = worst < 1e-12 and bce_err < 1e-12 and abs(b1 - 0.173287) < 1e-6 and abs(b2 - math.log(2)) < 1e-12
    _emit(2, "loss oracle equivalence", ok,
          f"max naive diff {worst:.1e}, BCE diff {bce_err:.1e}, B=1 term {b1:.6f}, B=2 uniform {b2:.12f}")


# 3
def test_cpe_identities():
    rng = np.random.default_rng(0)
    cfg = CpeConfig(upsample_size=14, out_size=14)
    grid = PEGrid(ad.Tensor(rng.normal(size=(14, 14, 8))))
    ident = float(np.max(np.abs(cropped_positional_embedding(grid, cfg, region=FULL_REGION).values.data
                                - grid.values.data)))
    crop_cfg = CpeConfig()
    crop_rng = np.random.default_rng(1)
    bad = 0
    for _ in range(100_000):
        r = sample_crop_region(crop_rng, crop_cfg)
        if not (r.is_valid() and 0.1 <= r.area <= 1.0 and 0.5 <= r.aspect <= 2.0):
            bad += 1
    a, b = rng.normal(size=(5, 7, 3)), rng.normal(size=(5, 7, 3))
    lin = np.max(np.abs(bilinear_resize(2.0 * a - 3.0 * b, 9, 4).data
                        - (2.0 * bilinear_resize(a, 9, 4).data - 3.0 * bilinear_resize(b, 9, 4).data)))
    const = np.max(np.abs(bilinear_resize(np.full((5, 7, 3), 1.7), 11, 3).data - 1.7))
    ok = ident < 1e-12 and bad == 0 and lin < 1e-10 and const < 1e-10
    _emit(3, "CPE identities", ok,
          f"full-crop diff {ident:.1e}, {bad} bad crops of 1e5, linearity {lin:.1e}, constant {const:.1e}")


# 4
def test_scoring_identities():
    cfg = ScoreConfig(base_ids=("a",), novel_ids=("n",))
    s = combine_scores(0.8, 0.5, cfg, "a")
    a1 = ScoreConfig(alpha=1.0, base_ids=("a",))
    exact = (combine_scores(0.3, 0.7, a1, "a") == 0.7
             and combine_scores(0.42, 0.42, cfg, "a") == 0.42 and combine_scores(0.42, 0.42, cfg, "n") == 0.42)
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=6), rng.normal(size=(4, 6)), rng.normal(size=4)
    scale = np.max(np.abs(normalized_layer(x, w, b).data - normalized_layer(123.4 * x, w, b).data))
    twenty = normalized_layer(np.array([3.0, 4.0]), np.array([[3.0, 4.0]]), np.zeros(1)).data[0]
    obj = apply_objectness(s, 1.0, 3.0) == s and apply_objectness(s, 0.37, 0.0) == s
    ok = abs(s - 0.5894) < 1e-4 and abs(s - 0.8 ** 0.35 * 0.5 ** 0.65) < 1e-6 and exact \
        and scale < 1e-10 and twenty == 20.0 and obj
    _emit(4, "scoring identities", ok,
          f"s={s:.6f}, exact cases {exact}, scale invariance {scale:.1e}, (3,4) logit {float(twenty)!r}, objectness {obj}")


# 5
@pytest.mark.parametrize("kind", ["softmax", "focal"])
def test_desk_scale_pretraining(kind):
    cfg = RunConfig().replace(loss__kind=kind, run__log_every=0)
    assert (cfg.run.batch_size, cfg.vit.dim, cfg.vit.depth, cfg.run.steps, cfg.run.seed) == (8, 32, 2, 2000, 0)
    t0 = time.perf_counter()
    res = pretrain(cfg)
    rep = eval_retrieval(res.model, 100, (1, 5), seed=cfg.run.eval_seed)
    seconds = time.perf_counter() - t0
    ratio = final_loss(res.losses) / res.losses[0]
    ok = ratio < 0.5 and rep.i2t[1] >= 0.05 and rep.t2i[1] >= 0.05 and seconds < 600
    _emit(5, f"desk-scale pretraining [{kind}]", ok,
          f"loss {res.losses[0]:.3f} -> {final_loss(res.losses):.3f} (ratio {ratio:.3f}), "
          f"R@1 i2t {rep.i2t[1]:.2f} t2i {rep.t2i[1]:.2f}, {seconds:.0f}s")


# 6
def test_ablation_harness():
    modes = ["learnable", "none", "sincos", "feat_crop_resize", "cpe"]
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "ab")
        proc = subprocess.run([sys.executable, "-m", "rovit", "ablate", "--out", out, "--steps", "40"],
                              capture_output=True, text=True)
        rows = list(csv.DictReader(open(os.path.join(out, "ablation.csv")))) if proc.returncode == 0 else []
    grid = {(r["pe_mode"], r["loss"]) for r in rows}
    expected = {(m, k) for m in modes for k in ("softmax", "focal")}
    ok = proc.returncode == 0 and grid == expected and len(rows) == 10 and "CPE" in proc.stdout
    _emit(6, "ablation harness", ok,
          f"exit {proc.returncode}, {len(rows)} rows, grid complete {grid == expected}, "
          f"table printed {'CPE' in proc.stdout}")


# 7
def test_determinism():
    cfg = RunConfig().replace(run__steps=30, run__log_every=0, vit__pe_mode="cpe")
    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        pretrain(cfg, a)
        pretrain(cfg, b)
        same = {n: open(os.path.join(a, n), "rb").read() == open(os.path.join(b, n), "rb").read()
                for n in ("checkpoint.rovt", "loss_trace.csv")}
    _emit(7, "determinism", all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()))


# 8
def test_freeze_contract():
    cfg = RunConfig().replace(run__steps=30, run__log_every=0, run__freeze_backbone=True)
    model = build_model(cfg)
    before = {k: v.data.tobytes() for k, v in model.params.items() if model.group_of(k) == "backbone"}
    res = pretrain(cfg, model=model)
    changed = [k for k in before if res.model.params[k].data.tobytes() != before[k]]
    trained = any(res.model.params[k].data.tobytes() != build_model(cfg).params[k].data.tobytes()
                  for k in res.model.params if k not in before)
    ok = not changed and trained and len(before) > 0
    _emit(8, "freeze contract", ok,
          f"{len(before)} backbone tensors, {len(changed)} changed, other params trained={trained}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
