"""PE-mode x loss-kind comparison runs on shared seeds."""

from __future__ import annotations

import csv
import io
import logging
import os

import numpy as np

from .config import RunConfig
from .encoders import PE_MODES
from .evaluate import eval_region_retrieval, eval_retrieval, region_score_config, region_tasks
from .losses import LOSS_KINDS
from .train import finetune_detector, pretrain
from .viz import export_pe_viz

log = logging.getLogger(__name__)

ABLATION_MODES = ("learnable", "none", "sincos", "feat_crop_resize", "cpe")
MODE_LABELS = {
    "learnable": "base PE",
    "none": "no PE",
    "sincos": "sincos PE",
    "feat_crop_resize": "feat crop-resize",
    "cpe": "CPE",
}

COLUMNS = ("pe_mode", "label", "loss", "steps", "seconds", "loss_start", "loss_final",
           "i2t_r1", "i2t_r5", "t2i_r1", "t2i_r5", "region_acc", "region_base_acc",
           "region_novel_acc", "region_gap", "localization")


def final_loss(losses, window=50):
    return float(np.mean(losses[-window:])) if losses else float("nan")


def run_one(cfg: RunConfig, pe_mode: str, kind: str, out_dir=None) -> dict:
    cfg = cfg.replace(vit__pe_mode=pe_mode, loss__kind=kind)
    run_dir = os.path.join(out_dir, f"{pe_mode}_{kind}") if out_dir else None
    res = pretrain(cfg, run_dir)
    model = res.model
    ret = eval_retrieval(model, cfg.run.eval_pairs, (1, 5), seed=cfg.run.eval_seed)
    score_cfg = region_score_config(cfg)
    head = None
    eval_model = model
    if cfg.region.use_detector:
        eval_model, head, _ = finetune_detector(model, cfg)
    reg = eval_region_retrieval(eval_model, region_tasks(cfg), score_cfg, head=head,
                                samples=cfg.region.samples,
                                bins=cfg.region.bins)
    if run_dir and pe_mode not in ("sincos", "none"):
        export_pe_viz(model, run_dir)
    return {
        "pe_mode": pe_mode, "label": MODE_LABELS.get(pe_mode, pe_mode), "loss": kind,
        "steps": cfg.run.steps, "seconds": res.seconds,
        "loss_start": res.losses[0] if res.losses else float("nan"),
        "loss_final": final_loss(res.losses),
        "i2t_r1": ret.i2t[1], "i2t_r5": ret.i2t[5], "t2i_r1": ret.t2i[1], "t2i_r5": ret.t2i[5],
        "region_acc": reg.accuracy, "region_base_acc": reg.base_accuracy,
        "region_novel_acc": reg.novel_accuracy, "region_gap": reg.mean_gap,
        "localization": reg.localization,
    }


def run_ablation(cfg: RunConfig, modes=ABLATION_MODES, kinds=LOSS_KINDS, out_dir=None):
    for m in modes:
        if m not in PE_MODES:
            raise ValueError(f"unknown pe mode {m!r}")
    rows = []
    for kind in kinds:
        for mode in modes:
            log.info("ablation run pe_mode=%s loss=%s", mode, kind)
            rows.append(run_one(cfg, mode, kind, out_dir))
    if out_dir:
        with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
            fh.write(rows_to_csv(rows))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def format_table(rows) -> str:
    head = f"{'pretraining':<18}{'loss':<9}{'final':>8}{'I2T@1':>8}{'T2I@1':>8}{'reg.acc':>9}{'novel':>8}{'loc':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['label']:<18}{r['loss']:<9}{r['loss_final']:>8.3f}{r['i2t_r1']:>8.2f}"
                     f"{r['t2i_r1']:>8.2f}{r['region_acc']:>9.3f}{r['region_novel_acc']:>8.3f}"
                     f"{r['localization']:>7.3f}")
    return "\n".join(lines)
