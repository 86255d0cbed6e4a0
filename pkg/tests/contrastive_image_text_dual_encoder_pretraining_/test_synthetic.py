import itertools
from collections import Counter

import numpy as np
import pytest

from rovit.synthetic import (COLORS, POSITIONS, SHAPES, corpus_csv, decode_tokens, encode_tokens,
                             gen_pair, gen_region_task, glyph_mask, novel_combinations)


def test_gen_pair_deterministic():
    a, b = gen_pair(123), gen_pair(123)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.tokens == b.tokens and a.attributes == b.attributes


def test_token_encoding_injective_and_round_trips():
    triples = list(itertools.product(range(len(SHAPES)), range(len(COLORS)), range(len(POSITIONS))))
    toks = {encode_tokens(*t) for t in triples}
    assert len(toks) == len(triples)
    for t in triples:
        assert decode_tokens(encode_tokens(*t)) == t
    with pytest.raises(ValueError):
        decode_tokens((0, 0, 0))


def test_marginals_uniform_over_1000_seeds():
    pairs = [gen_pair(s).attributes for s in range(1000)]
    for axis, n in enumerate((len(SHAPES), len(COLORS), len(POSITIONS))):
        counts = Counter(p[axis] for p in pairs)
        for k in range(n):
            assert abs(counts[k] / 1000 - 1 / n) <= 0.05


def test_image_renders_the_attributes():
    for seed in range(30):
        p = gen_pair(seed)
        shape, color, pos = p.attributes
        bright = p.image[:, :, color] == 1.0
        ys, xs = np.nonzero(bright)
        assert bright.sum() == glyph_mask(shape).sum()
        cy, cx = ys.mean(), xs.mean()
        assert int(cy >= 16) * 2 + int(cx >= 16) == pos
        other = [c for c in range(3) if c != color]
        assert np.all(p.image[ys, xs][:, other] == 0.1)


def test_region_boxes_disjoint():
    for seed in range(50):
        t = gen_region_task(seed, 4)
        for a, b in itertools.combinations(t.boxes, 2):
            assert a.iou(b) == 0.0
        assert len(t.boxes) == len(t.tokens) == len(t.attributes) == len(t.objectness)
        assert all(o == 1.0 for o in t.objectness)
        assert all(0.0 <= o <= 1.0 for _, _, o in t.proposals)


def test_single_object_box_contains_foreground():
    for seed in range(20):
        t = gen_region_task(seed, 1)
        (box,) = t.boxes
        fg = np.nonzero(t.image.max(axis=2) == 1.0)
        h = t.image.shape[0]
        y0, y1 = fg[0].min() / h, (fg[0].max() + 1) / h
        x0, x1 = fg[1].min() / h, (fg[1].max() + 1) / h
        assert (box.x1, box.y1, box.x2, box.y2) == (x0, y0, x1, y1)


def test_crowded_task_is_flagged():
    t = gen_region_task(0, 30, max_retries=5)
    assert t.reduced and len(t.boxes) < 30


def test_novel_split_is_deterministic_fifth():
    a = novel_combinations(0.2, 0)
    assert a == novel_combinations(0.2, 0)
    assert len(a) == 2


def test_corpus_csv():
    lines = corpus_csv(range(3)).strip().split("\n")
    assert lines[0] == "seed,shape,color,position,tok0,tok1,tok2"
    fields = [int(v) for v in lines[2].split(",")]
    p = gen_pair(1)
    assert fields == [1, *p.attributes, *p.tokens]
