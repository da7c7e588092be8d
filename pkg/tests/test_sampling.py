import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spwsd.data import ProposalBag
from spwsd.geometry import Box, iou_matrix
from spwsd.sampling import SamplerConfig, build_minibatch, match_proposals

from oracles import loop_iou


def random_bag(rng, image_id, n=30, d=3):
    xy = rng.uniform(0, 60, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(5, 40, (n, 2))])
    return ProposalBag(image_id, boxes, rng.normal(size=(n, d)), frozenset({1}), 100, 100)


def pseudo_from(bag, idx, label=1):
    return [(label, bag.box(idx))]


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"images_per_batch": 0}, {"batch_size": 1}, {"fg_fraction": 0.0}, {"fg_fraction": 1.0},
        {"bg_iou_low": 0.5}, {"bg_iou_high": 0.6},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)

    def test_budget(self):
        assert SamplerConfig().per_image_budget() == [64, 64]
        assert SamplerConfig(images_per_batch=3, batch_size=128).per_image_budget() == [43, 43, 42]


class TestBuild:
    def test_default_composition(self, rng):
        bags = [random_bag(rng, "a"), random_bag(rng, "b")]
        items = [(b, pseudo_from(b, 0)) for b in bags]
        batch = build_minibatch(items, SamplerConfig(), rng)
        assert len(batch) == 128
        assert batch.num_foreground <= 32
        assert len(batch) - batch.num_foreground >= 96

    def test_identity_match(self, rng):
        bag = random_bag(rng, "a", n=12)
        cfg = SamplerConfig(images_per_batch=1, batch_size=64)
        batch = build_minibatch([(bag, pseudo_from(bag, 4, label=3))], cfg, rng)
        hit = np.flatnonzero(np.all(batch.features == bag.features[4], axis=1))
        assert hit.size == 1
        assert batch.classes[hit[0]] == 3
        assert batch.targets[hit[0]].tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_disjoint_all_background(self, rng):
        boxes = np.array([[i * 3, 0, i * 3 + 2, 2] for i in range(10)], dtype=float)
        bag = ProposalBag("a", boxes, rng.normal(size=(10, 2)), frozenset({1}), 100, 100)
        cfg = SamplerConfig(images_per_batch=1, batch_size=16)
        batch = build_minibatch([(bag, [(1, Box(80, 80, 90, 90))])], cfg, rng)
        assert batch.num_foreground == 0 and len(batch) == 16
        assert batch.bg_fallback == ("a",)
        assert np.all(np.isnan(batch.targets))

    def test_fallback_logs_once(self, rng, caplog):
        caplog.set_level(logging.DEBUG, logger="spwsd.sampling")
        boxes = np.array([[0, 0, 2, 2], [5, 5, 7, 7]], dtype=float)
        bag = ProposalBag("lonely-image", boxes, np.zeros((2, 2)), frozenset({1}), 10, 10)
        cfg = SamplerConfig(images_per_batch=1, batch_size=4)
        for _ in range(3):
            build_minibatch([(bag, [(1, Box(0, 0, 2, 2))])], cfg, rng)
        levels = [r.levelno for r in caplog.records if "lonely-image" in r.getMessage()]
        assert levels == [logging.WARNING, logging.DEBUG, logging.DEBUG]

    def test_wrong_image_count(self, rng):
        bag = random_bag(rng, "a")
        with pytest.raises(ValueError):
            build_minibatch([(bag, pseudo_from(bag, 0))], SamplerConfig(), rng)

    def test_empty_pseudo_gt(self, rng):
        bag = random_bag(rng, "a")
        with pytest.raises(ValueError, match="pseudo"):
            build_minibatch([(bag, [])], SamplerConfig(images_per_batch=1, batch_size=8), rng)

    def test_multi_gt_matches_highest_iou(self):
        boxes = np.array([[0, 0, 10, 10], [20, 0, 30, 10]], dtype=float)
        gt = np.array([[0, 0, 10, 9], [19, 0, 30, 10], [0, 0, 10, 10]], dtype=float)
        best, best_iou = match_proposals(boxes, gt)
        assert best.tolist() == [2, 1]
        assert best_iou[0] == 1.0
        # exact tie goes to the lower index
        best, _ = match_proposals(boxes[:1], np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]]))
        assert best.tolist() == [0]

    def test_deterministic(self, rng):
        bags = [random_bag(rng, "a"), random_bag(rng, "b")]
        items = [(b, pseudo_from(b, 3)) for b in bags]
        one = build_minibatch(items, SamplerConfig(), np.random.default_rng(9))
        two = build_minibatch(items, SamplerConfig(), np.random.default_rng(9))
        assert np.array_equal(one.features, two.features) and np.array_equal(one.classes, two.classes)
        assert one.image_ids == two.image_ids


@given(
    seed=st.integers(0, 2**31),
    m=st.integers(1, 3),
    batch_size=st.integers(3, 80),
    fg_fraction=st.floats(0.05, 0.95),
    num_gt=st.integers(1, 3),
)
def test_sample_invariants(seed, m, batch_size, fg_fraction, num_gt):
    rng = np.random.default_rng(seed)
    cfg = SamplerConfig(images_per_batch=m, batch_size=batch_size, fg_fraction=fg_fraction)
    items = []
    for k in range(m):
        bag = random_bag(rng, f"img{k}", n=int(rng.integers(2, 25)))
        picks = rng.choice(bag.num_proposals, size=min(num_gt, bag.num_proposals), replace=False)
        items.append((bag, [(int(rng.integers(1, 4)), bag.box(int(i))) for i in picks]))
    batch = build_minibatch(items, cfg, rng)

    for (bag, gt), budget in zip(items, cfg.per_image_budget()):
        rows = np.array([i == bag.image_id for i in batch.image_ids])
        gt_boxes = [b.as_tuple() for _, b in gt]
        # each sampled row is a proposal of this image; recover its index by features
        n_fg = 0
        for feat, cls, target in zip(batch.features[rows], batch.classes[rows], batch.targets[rows]):
            idx = int(np.flatnonzero(np.all(bag.features == feat, axis=1))[0])
            overlaps = [loop_iou(bag.proposals[idx], g) for g in gt_boxes]
            best = max(overlaps)
            if cls > 0:
                n_fg += 1
                assert best >= cfg.fg_iou_min
                assert cls == gt[overlaps.index(best)][0]
                assert np.all(np.isfinite(target))
            elif bag.image_id in batch.bg_fallback:
                assert best < cfg.fg_iou_min
            else:
                assert cfg.bg_iou_low <= best < cfg.bg_iou_high
        fg_avail = int(np.sum(iou_matrix(bag.proposals, np.array(gt_boxes)).max(axis=1) >= cfg.fg_iou_min))
        quota = int(np.floor(fg_fraction * budget + 0.5))
        assert n_fg == min(quota, fg_avail)
        assert rows.sum() <= budget
