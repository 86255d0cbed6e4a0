"""Contrastive pretraining and detector-head finetuning loops."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import FinetuneConfig, RunConfig, dump_config
from .encoders import DualEncoder, image_features, image_forward, save_checkpoint, text_forward
from .losses import total_contrastive_loss
from .scoring import normalized_layer, region_pool
from .synthetic import (all_categories, category_tokens, gen_pair, gen_region_task,
                        novel_combinations)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and per-group lr multipliers.

    A multiplier of 0 leaves the parameter bit-identical.
    """

    def __init__(self, params: dict, lr, momentum=0.9, weight_decay=0.0,
                 group_of=None, multipliers=None, warmup_steps=0, clip_norm=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.group_of = group_of or (lambda name: "default")
        self.multipliers = multipliers or {}
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def current_lr(self):
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.t + 1) / self.warmup_steps)

    def _active(self):
        for name, p in self.params.items():
            mult = self.multipliers.get(self.group_of(name), 1.0)
            if p.grad is None or not p.requires_grad or mult == 0.0:
                continue
            yield name, p, mult

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p, _ in self._active())))

    def step(self):
        lr = self.current_lr()
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p, mult in self._active():
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - (lr * mult) * v
        self.t += 1

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class PretrainResult:
    model: DualEncoder
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def build_model(cfg: RunConfig) -> DualEncoder:
    return DualEncoder.init(vit=cfg.vit, text=cfg.text, cpe=cfg.cpe, seed=cfg.run.seed,
                            tau_init=cfg.run.tau_init, pe_std=cfg.run.pe_std)


def pair_stream(cfg: RunConfig):
    """Endless training pairs for ``cfg.run.seed``, skipping held-out combinations."""
    novel = set(novel_combinations(cfg.run.novel_fraction, cfg.run.split_seed))
    s = cfg.run.seed * 10_000_000
    while True:
        pair = gen_pair(s, cfg.vit.image_size)
        s += 1
        if (pair.attributes[0], pair.attributes[1]) in novel:
            continue
        yield pair


def group_multipliers(cfg: RunConfig):
    mult = {
        "backbone": cfg.optim.backbone_lr_mult,
        "text": cfg.optim.text_lr_mult,
        "temperature": cfg.optim.temperature_lr_mult,
    }
    if cfg.run.freeze_backbone:
        mult["backbone"] = 0.0
    if cfg.run.freeze_temperature:
        mult["temperature"] = 0.0
    return mult


def pretrain(cfg: RunConfig, out_dir=None, model: DualEncoder | None = None) -> PretrainResult:
    """Train the dual encoder on the synthetic stream; deterministic in ``cfg``.

    Parameters whose group multiplier is 0 (frozen backbone or temperature)
    are excluded from the tape entirely.  Writes ``checkpoint.rovt``,
    ``loss_trace.csv`` and ``config.txt`` to ``out_dir`` when given.
    """
    model = model or build_model(cfg)
    mult = group_multipliers(cfg)
    for name, p in model.params.items():
        p.requires_grad = mult.get(model.group_of(name), 1.0) != 0.0
    opt = SGD(model.params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay,
              model.group_of, mult, cfg.optim.warmup_steps, cfg.optim.clip_norm)
    stream = pair_stream(cfg)
    crop_rng = np.random.default_rng([cfg.run.seed, 1])
    result = PretrainResult(model=model)
    t0 = time.perf_counter()
    for step in range(cfg.run.steps):
        batch = [next(stream) for _ in range(cfg.run.batch_size)]
        images = np.stack([b.image for b in batch])
        V = image_forward(model, images, rng=crop_rng)
        L = text_forward(model, [b.tokens for b in batch])
        loss = total_contrastive_loss(V, L, model.tau, cfg.loss)
        value = loss.item()
        if not np.isfinite(value):
            ad.get_tape().clear()
            raise TrainingDiverged(step, value)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        result.losses.append(value)
        if cfg.run.log_every and (step % cfg.run.log_every == 0 or step == cfg.run.steps - 1):
            log.info("step %d loss %.5f tau %.4f", step, value, float(np.exp(model.params["logit_temp"].data)))
    for p in model.params.values():
        p.requires_grad = True
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_run(result, cfg, out_dir)
    return result


def write_run(result: PretrainResult, cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(result.model, os.path.join(out_dir, "checkpoint.rovt"))
    with open(os.path.join(out_dir, "loss_trace.csv"), "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(result.losses):
            fh.write(f"{i},{v!r}\n")
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))


# ---------------------------------------------------------------- detector head

@dataclass
class DetectorHead:
    """Linear projection of pooled region features, scored by a normalized layer."""
    params: dict
    tau_cls: float = 20.0

    @classmethod
    def init(cls, dim, tau_cls=20.0):
        return cls(params={
            "det.proj.w": Tensor(np.eye(dim), requires_grad=True, name="det.proj.w"),
            "det.proj.b": Tensor(np.zeros(dim), requires_grad=True, name="det.proj.b"),
        }, tau_cls=tau_cls)

    def logits(self, pooled, text_embs):
        h = pooled.reshape(1, -1) @ self.params["det.proj.w"] + self.params["det.proj.b"]
        return normalized_layer(h, text_embs, 0.0, self.tau_cls).reshape(-1)

    def probs(self, pooled, text_embs):
        return ad.softmax(self.logits(pooled, text_embs)).data


def category_embeddings(model: DualEncoder, categories=None) -> np.ndarray:
    categories = categories or all_categories()
    with ad.no_grad():
        return text_forward(model, [category_tokens(s, c) for s, c in categories]).data


def finetune_detector(model: DualEncoder, cfg: RunConfig, ft: FinetuneConfig | None = None):
    """Train a detector head on base-category ground-truth boxes.

    Works on a copy of ``model``.  Only the head trains when
    ``ft.freeze_backbone``; otherwise the image backbone moves at
    ``ft.backbone_lr_mult`` times the head rate.  The text tower is never
    updated.  Returns ``(model_copy, head, losses)``.
    """
    ft = ft or cfg.finetune
    model = model.copy()
    novel = set(novel_combinations(cfg.run.novel_fraction, cfg.run.split_seed))
    cats = all_categories()
    base = [c for c in cats if c not in novel]
    base_index = {c: i for i, c in enumerate(base)}
    T_base = Tensor(category_embeddings(model, base))
    head = DetectorHead.init(model.vit.dim, cfg.score.tau_cls)

    bb_mult = 0.0 if ft.freeze_backbone else ft.backbone_lr_mult
    for name, p in model.params.items():
        p.requires_grad = model.group_of(name) == "backbone" and bb_mult != 0.0
    params = dict(head.params)
    params.update({k: v for k, v in model.params.items() if model.group_of(k) == "backbone"})

    def group_of(name):
        return "head" if name.startswith("det.") else "backbone"

    opt = SGD(params, ft.lr, ft.momentum, 0.0, group_of, {"head": 1.0, "backbone": bb_mult})
    tasks = [gen_region_task(ft.seed + i, cfg.region.k, cfg.vit.image_size) for i in range(ft.n_tasks)]
    losses = []
    for step in range(ft.steps):
        task = tasks[step % len(tasks)]
        feats = image_features(model, task.image, model.eval_pe_mode)
        fm = feats.reshape(*feats.shape[1:])
        terms = []
        for box, (shape, color, _) in zip(task.boxes, task.attributes):
            if (shape, color) not in base_index:
                continue
            pooled = region_pool(fm, box, cfg.region.samples, cfg.region.bins)
            logp = ad.log_softmax(head.logits(pooled, T_base))
            onehot = np.zeros(len(base))
            onehot[base_index[(shape, color)]] = 1.0
            terms.append(-(logp * onehot).sum())
        if not terms:
            ad.get_tape().clear()
            continue
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
        losses.append(loss.item())
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    for p in model.params.values():
        p.requires_grad = True
    return model, head, losses
