"""Zero-shot image-text retrieval and region-level open-vocabulary evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .encoders import DualEncoder, image_features, image_forward, text_forward
from .scoring import ScoreConfig, region_embed, region_pool, score_region, vlm_scores
from .synthetic import (all_categories, category_id, category_tokens, gen_pair, gen_region_task,
                        novel_combinations)


@dataclass
class RetrievalReport:
    i2t: dict
    t2i: dict
    n_queries: int

    def rows(self):
        for k in sorted(self.i2t):
            yield k, self.i2t[k], self.t2i[k]

    def to_csv(self):
        lines = ["k,i2t_recall,t2i_recall,n_queries"]
        lines += [f"{k},{a!r},{b!r},{self.n_queries}" for k, a, b in self.rows()]
        return "\n".join(lines) + "\n"

    def summary(self):
        parts = [f"R@{k} i2t={a:.3f} t2i={b:.3f}" for k, a, b in self.rows()]
        return f"retrieval over {self.n_queries} queries: " + ", ".join(parts)


def match_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row.

    Entries strictly greater than the match rank above it; equal entries at a
    lower column index do too (ties go to the lower index).
    """
    diag = np.diag(sim)[:, None]
    n = sim.shape[1]
    lower = np.arange(n)[None, :] < np.arange(sim.shape[0])[:, None]
    return ((sim > diag) | ((sim == diag) & lower)).sum(axis=1)


def recall_at_k(sim: np.ndarray, ks) -> dict:
    ranks = match_ranks(sim)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def embed_pairs(model: DualEncoder, pairs, chunk=64):
    imgs, txts = [], []
    with ad.no_grad():
        for i in range(0, len(pairs), chunk):
            part = pairs[i:i + chunk]
            imgs.append(image_forward(model, np.stack([p.image for p in part]), model.eval_pe_mode).data)
            txts.append(text_forward(model, [p.tokens for p in part]).data)
    return np.concatenate(imgs), np.concatenate(txts)


def heldout_pairs(n: int, seed: int, image_size: int = 32):
    return [gen_pair(seed + i, image_size) for i in range(n)]


def eval_retrieval(model: DualEncoder, corpus, ks=(1, 5), seed: int = 9_000_000) -> RetrievalReport:
    """Recall@K in both directions; ``corpus`` is a list of pairs or a pair count."""
    if isinstance(corpus, int):
        corpus = heldout_pairs(corpus, seed, model.vit.image_size)
    if len(corpus) < max(ks):
        raise ValueError(f"corpus of {len(corpus)} pairs is smaller than K={max(ks)}")
    V, L = embed_pairs(model, corpus)
    return retrieval_from_embeddings(V, L, ks)


def retrieval_from_embeddings(V, L, ks=(1, 5)) -> RetrievalReport:
    sim = V @ L.T
    return RetrievalReport(i2t=recall_at_k(sim, ks), t2i=recall_at_k(sim.T, ks), n_queries=len(V))


# ---------------------------------------------------------------- region evaluation

@dataclass
class RegionReport:
    accuracy: float
    base_accuracy: float
    novel_accuracy: float
    mean_gap: float
    localization: float
    n_objects: int
    n_novel: int
    per_object: list = field(default_factory=list)

    def to_csv(self):
        keys = ("accuracy", "base_accuracy", "novel_accuracy", "mean_gap", "localization",
                "n_objects", "n_novel")
        return ",".join(keys) + "\n" + ",".join(repr(getattr(self, k)) for k in keys) + "\n"

    def summary(self):
        return (f"region top-1: all={self.accuracy:.3f} base={self.base_accuracy:.3f} "
                f"novel={self.novel_accuracy:.3f} (n={self.n_objects}, novel n={self.n_novel}); "
                f"mean S gap={self.mean_gap:.4f}; localization={self.localization:.3f}")


def region_score_config(cfg: RunConfig) -> ScoreConfig:
    novel = set(novel_combinations(cfg.run.novel_fraction, cfg.run.split_seed))
    cats = all_categories()
    sc = cfg.score
    return ScoreConfig(alpha=sc.alpha, beta=sc.beta, delta=sc.delta, tau_cls=sc.tau_cls,
                       base_ids=[category_id(*c) for c in cats if c not in novel],
                       novel_ids=[category_id(*c) for c in cats if c in novel],
                       background_ids=sc.background_ids)


def eval_region_retrieval(model: DualEncoder, tasks, cfg: ScoreConfig, head=None,
                          text_embs=None, samples: int = 2, bins: int = 7) -> RegionReport:
    """Score every ground-truth box and proposal against all categories.

    ``z`` comes from the region embedding; ``p`` from ``head`` when given,
    otherwise ``p = z``.  Top-1 accuracy is measured on ground-truth boxes.
    Localization counts objects whose best-scoring box (over all boxes in
    the image, for the object's own category) overlaps it with IoU >= 0.5,
    which is where objectness matters.
    """
    cats = all_categories()
    ids = [category_id(*c) for c in cats]
    novel_ids = set(cfg.novel_ids)
    if text_embs is None:
        with ad.no_grad():
            text_embs = text_forward(model, [category_tokens(s, c) for s, c in cats]).data
    tau = float(np.exp(model.params["logit_temp"].data))
    gaps, hits, hits_base, hits_novel, loc = [], [], [], [], []
    per_object = []
    with ad.no_grad():
        for task in tasks:
            fm = image_features(model, task.image, model.eval_pe_mode).data[0]
            boxes = [(b, i, o) for i, (b, o) in enumerate(zip(task.boxes, task.objectness))]
            boxes += list(task.proposals)
            finals = []
            for box, _, o in boxes:
                z = vlm_scores(region_embed(fm, box, samples, bins), text_embs, tau)
                if head is not None:
                    p = head.probs(region_pool(fm, box, samples, bins), text_embs)
                else:
                    p = z
                finals.append(score_region(z, p, o, ids, cfg).final)
            finals = np.array(finals)
            for j, (shape, color, _) in enumerate(task.attributes):
                true = cats.index((shape, color))
                S = finals[j]
                correct = int(np.argmax(S)) == true
                others = np.delete(S, true)
                gaps.append(S[true] - others.max())
                hits.append(correct)
                (hits_novel if ids[true] in novel_ids else hits_base).append(correct)
                best = int(np.argmax(finals[:, true]))
                bbox = boxes[best][0]
                loc.append(bbox.iou(task.boxes[j]) >= 0.5)
                per_object.append((ids[true], ids[int(np.argmax(S))], float(S[true])))

    def frac(x):
        return float(np.mean(x)) if x else float("nan")

    return RegionReport(accuracy=frac(hits), base_accuracy=frac(hits_base),
                        novel_accuracy=frac(hits_novel), mean_gap=frac(gaps),
                        localization=frac(loc), n_objects=len(hits), n_novel=len(hits_novel),
                        per_object=per_object)


def region_tasks(cfg: RunConfig):
    r = cfg.region
    return [gen_region_task(r.seed + i, r.k, cfg.vit.image_size) for i in range(r.n_tasks)]
