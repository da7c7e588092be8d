import json
import math
from dataclasses import replace

import numpy as np
import pytest

from spwsd.data import ProposalBag, WeaklyLabeledDataset, generate
from spwsd.detector import DetectorModel, forward
from spwsd.geometry import Box, iou_matrix, nms_indices
from spwsd.protocol import ProtocolConfig, PseudoLabel, run_self_paced, select_latent_box, sp_miner
from spwsd.sampling import SamplerConfig
from spwsd.variants import (
    VARIANTS,
    BagClassifier,
    OracleScorer,
    Variant,
    VariantSpec,
    complement_best,
    curriculum_order,
    describe_variants,
    init_pseudo_gt,
    make_miner,
    miml_mine,
    mil_mine,
    run_variant,
    siml_mine,
    static_entries,
    train_init,
    variant_spec,
)

from conftest import SMALL, random_model
from oracles import brute_class_best, brute_siml


def random_bag(rng, d, labels, n=None, image_id="a"):
    n = int(rng.integers(1, 15)) if n is None else n
    xy = rng.uniform(0, 40, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(2, 30, (n, 2))])
    return ProposalBag(image_id, boxes, rng.normal(size=(n, d)), frozenset(labels), 80, 80)


def random_labels(rng, c):
    k = int(rng.integers(1, c + 1))
    return {int(v) for v in rng.choice(np.arange(1, c + 1), size=k, replace=False)}


class TestFlagTable:
    def test_nine_distinct(self):
        assert len(VARIANTS) == 9 == len(Variant)
        combos = {tuple(v for k, v in s.to_dict().items() if k != "variant") for s in VARIANTS.values()}
        assert len(combos) == 9

    def test_round_trip(self):
        for spec in VARIANTS.values():
            assert VariantSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_parse(self):
        assert variant_spec("sp-all-cls").variant is Variant.SP_ALL_CLS
        with pytest.raises(ValueError, match="unknown variant"):
            variant_spec("SPX")

    def test_describe(self):
        text = describe_variants()
        assert all(v.value in text for v in Variant)
        assert "competition" in text.splitlines()[0]

    def test_definitions(self):
        sp = VARIANTS[Variant.SP]
        assert VARIANTS[Variant.SP_ALL_CLS] == replace(sp, variant=Variant.SP_ALL_CLS, class_selection="all")
        assert VARIANTS[Variant.SP_RND_CLS] == replace(sp, variant=Variant.SP_RND_CLS, class_selection="random")
        assert VARIANTS[Variant.NO_REG_TRAIN].test_regression
        assert not VARIANTS[Variant.NO_REG_TRAIN_TEST].test_regression
        assert VARIANTS[Variant.NO_REG_TRAIN_TEST].latent_source == "proposals"
        assert VARIANTS[Variant.MIL].image_selection == "all" and not VARIANTS[Variant.MIL].competition
        assert VARIANTS[Variant.CURRICULUM].latent_source == "static"


class TestMining:
    def test_mil_one_per_label(self, rng):
        model = random_model(5, 3, rng)
        bag = random_bag(rng, 3, {1, 3, 4})
        mined = make_miner(VARIANTS[Variant.MIL])(model, WeaklyLabeledDataset((bag,), 5, 3))
        assert sorted(p.label for p in mined) == [1, 3, 4]
        assert len(sp_miner()(model, WeaklyLabeledDataset((bag,), 5, 3))) <= 1

    def test_mil_single_class_equals_latent(self, rng):
        for _ in range(30):
            model = random_model(1, 3, rng)
            bag = random_bag(rng, 3, {1})
            s, z = mil_mine(model, bag, 1)
            assert (s, z, 1) == select_latent_box(model, bag)

    def test_mil_against_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            c, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            model = random_model(c, d, rng, scale=2.0)
            bag = random_bag(rng, d, random_labels(rng, c))
            grid = forward(model, bag)
            for y in bag.labels:
                s, z = mil_mine(model, bag, y)
                want = brute_class_best(grid.scores.tolist(), grid.boxes.tolist(), y)
                assert (s, z.as_tuple()) == want

    def test_siml_vacuous_pruning(self, rng):
        model = random_model(3, 2, rng)
        bag = random_bag(rng, 2, {1, 2, 3})
        grid = forward(model, bag)
        assert complement_best(grid, bag.labels).score == -math.inf
        assert [p.label for p in siml_mine(model, bag)] == [1, 2, 3]

    def test_siml_rule(self):
        # one-hot features make each proposal's softmax equal to a chosen distribution;
        # proposal 1 fixes s_o = 0.9 through the non-label class 2
        other = [0.05, 0.05, 0.9]
        for s1, kept in ((0.8, False), (0.95, True)):
            first = [1.0 - s1 - 0.01, s1, 0.01]
            model = DetectorModel.zeros(2, 2)
            model.w_cls[:, 0], model.w_cls[:, 1] = np.log(first), np.log(other)
            boxes = np.array([[0, 0, 5, 5], [10, 10, 15, 15]], dtype=float)
            bag = ProposalBag("a", boxes, np.eye(2), frozenset({1}), 20, 20)
            assert complement_best(forward(model, bag), bag.labels).score == pytest.approx(0.9)
            mined = siml_mine(model, bag)
            assert bool(mined) == kept
            if kept:
                assert mined[0].score == pytest.approx(0.95)

    def test_siml_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            c, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
            model = random_model(c, d, rng, scale=2.0)
            bag = random_bag(rng, d, random_labels(rng, c))
            grid = forward(model, bag)
            got = [(p.label, p.score, p.box.as_tuple()) for p in siml_mine(model, bag)]
            assert got == brute_siml(grid.scores.tolist(), grid.boxes.tolist(), bag.labels)

    def test_miml_two_instances(self):
        model = DetectorModel.zeros(2, 1)
        model.w_cls[1, 0] = 4.0  # feature drives class 1
        feats = [[1.0], [1.0], [-1.0]]
        boxes = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [20, 20, 30, 30]], dtype=float)
        bag = ProposalBag("a", boxes, np.array(feats), frozenset({1}), 100, 100)
        mined = miml_mine(model, bag)
        assert [p.box for p in mined] == [Box(0, 0, 10, 10), Box(50, 50, 60, 60)]

    def test_miml_none_above_complement(self):
        model = DetectorModel.zeros(2, 1)
        model.w_cls[2, -1] = 3.0  # the non-label class dominates everywhere
        bag = random_bag(np.random.default_rng(1), 1, {1}, n=5)
        assert miml_mine(model, bag) == []

    def test_miml_compositional(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            c, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
            model = random_model(c, d, rng, scale=2.0)
            bag = random_bag(rng, d, random_labels(rng, c))
            grid = forward(model, bag)
            s_o = complement_best(grid, bag.labels).score
            want = []
            for y in sorted(bag.labels):
                for i in nms_indices(grid.boxes[:, y - 1], grid.scores[:, y - 1], 0.3):
                    if grid.scores[i, y - 1] > s_o:
                        want.append((y, i))
            got = miml_mine(model, bag, 0.3)
            assert [(p.label, p.score) for p in got] == [(y, grid.scores[i, y - 1]) for y, i in want]
            assert all(p.score > s_o for p in got)


class TestInit:
    def test_one_box_per_label(self, small_splits):
        train, _ = small_splits
        gt = init_pseudo_gt(BagClassifier(train.num_classes, train.feature_dim).fit(train, steps=50), train)
        for bag in train:
            assert sorted(p.label for p in gt[bag.image_id]) == sorted(bag.labels)

    def test_argmax_over_proposals(self, small_splits):
        train, _ = small_splits
        scorer = BagClassifier(train.num_classes, train.feature_dim).fit(train, steps=50)
        gt = init_pseudo_gt(scorer, train)
        for bag in train.samples[:10]:
            scores = scorer.box_scores(bag)
            for p in gt[bag.image_id]:
                column = scores[:, p.label - 1].tolist()
                best = max(range(len(column)), key=lambda i: (column[i], -i))
                assert p.box == bag.box(best) and p.score == column[best]

    def test_oracle_scorer_localizes(self):
        ds = generate(replace(SMALL, num_images=60, max_objects=3, fg_proposals_per_object=4))
        gt = init_pseudo_gt(OracleScorer(ds), ds)
        checked = 0
        for bag in ds:
            objects = ds.objects(bag.image_id)
            for p in gt[bag.image_id]:
                same = np.array([o.box.as_tuple() for o in objects if o.label == p.label])
                if iou_matrix(bag.proposals, same).max() >= 0.5:
                    checked += 1
                    assert iou_matrix(p.box.to_array()[None], same).max() >= 0.5
        assert checked > 0

    def test_bag_classifier_learns_labels(self):
        ds = generate(replace(SMALL, num_images=120, signal=10.0))
        clf = BagClassifier(ds.num_classes, ds.feature_dim).fit(ds, steps=300)
        hits = 0
        for bag in ds:
            best = int(np.argmax(clf.box_scores(bag).max(axis=0))) + 1
            hits += best in bag.labels
        assert hits / len(ds) > 0.8

    def test_train_init_budget(self, small_splits):
        train, _ = small_splits
        gt = init_pseudo_gt(OracleScorer(train, noise=1.0), train)
        w0 = DetectorModel.zeros(train.num_classes, train.feature_dim)
        trained, losses = train_init(w0, train, gt, SamplerConfig(), epochs=2.0, seed=0)
        assert len(losses) == math.ceil(2 * len(train) / 2)
        assert w0 == DetectorModel.zeros(train.num_classes, train.feature_dim)
        assert trained != w0

    def test_curriculum_order(self):
        labels = {
            "a": [PseudoLabel("a", 0.2, Box(0, 0, 1, 1), 1), PseudoLabel("a", 0.9, Box(0, 0, 1, 1), 2)],
            "b": [PseudoLabel("b", 0.5, Box(0, 0, 1, 1), 1)],
            "c": [PseudoLabel("c", 0.5, Box(0, 0, 1, 1), 2)],
        }
        assert curriculum_order(labels) == ["a", "b", "c"]
        assert [e.score for e in static_entries(labels, _named_dataset(["a", "b", "c"]))] == [0.9, 0.5, 0.5]


def _named_dataset(ids):
    bags = tuple(ProposalBag(i, np.array([[0, 0, 1, 1.0]]), np.zeros((1, 1)), frozenset({1, 2}), 5, 5) for i in ids)
    return WeaklyLabeledDataset(bags, 2, 1)


@pytest.fixture(scope="module")
def setup(small_splits):
    train, _ = small_splits
    init = init_pseudo_gt(OracleScorer(train, noise=2.0, seed=1), train)
    w0 = DetectorModel.initialize(train.num_classes, train.feature_dim, np.random.default_rng(2))
    w0, _ = train_init(w0, train, init, SamplerConfig(), epochs=2.0, seed=0)
    return train, init, w0


class TestRunVariant:
    def test_sp_equals_run_self_paced(self, setup, tmp_path):
        train, init, w0 = setup
        cfg = ProtocolConfig(seed=3)
        run_self_paced(w0, train, cfg, checkpoint_dir=tmp_path / "a")
        run_variant("SP", w0, train, cfg, init_labels=init, checkpoint_dir=tmp_path / "b")
        for t in range(5):
            assert (tmp_path / "a" / f"W_{t}.ckpt").read_bytes() == (tmp_path / "b" / f"W_{t}.ckpt").read_bytes()

    def test_sp_all_cls(self, setup):
        train, init, w0 = setup
        _, records = run_variant("SP_ALL_CLS", w0, train, ProtocolConfig(), init_labels=init)
        assert all(r.classes == list(range(1, train.num_classes + 1)) for r in records)

    def test_sp_rnd_cls_seeded(self, setup):
        train, init, w0 = setup
        _, a = run_variant("SP_RND_CLS", w0, train, ProtocolConfig(seed=4), init_labels=init)
        _, b = run_variant("SP_RND_CLS", w0, train, ProtocolConfig(seed=4), init_labels=init)
        assert [r.classes for r in a] == [r.classes for r in b]
        assert [len(r.classes) for r in a] == [2, 3, 3, 4]  # round_half_up(r_t * 4)

    @pytest.mark.parametrize("name", ["NO_REG_TRAIN", "NO_REG_TRAIN_TEST"])
    def test_no_reg_boxes_are_proposals(self, setup, name):
        train, init, w0 = setup
        _, records = run_variant(name, w0, train, ProtocolConfig(), init_labels=init)
        for r in records:
            for e in r.training_set:
                props = train.bag(e.image_id).proposals
                for _, box in e.pseudo_gt:
                    assert np.any(np.all(props == box.to_array(), axis=1))

    def test_mil_keeps_everything(self, setup):
        train, init, w0 = setup
        _, records = run_variant("MIL", w0, train, ProtocolConfig(), init_labels=init)
        for r in records:
            assert r.n_t == len(train)
            assert len(r.pseudo_labels()) == sum(len(b.labels) for b in train)

    def test_mil_at_least_sp(self, setup):
        train, init, w0 = setup
        _, mil = run_variant("MIL", w0, train, ProtocolConfig(iterations=1), init_labels=init)
        _, sp = run_variant("SP", w0, train, ProtocolConfig(iterations=1), init_labels=init)
        assert len(mil[0].pseudo_labels()) >= len(sp[0].pseudo_labels())

    def test_curriculum_prefixes(self, setup):
        train, init, w0 = setup
        _, records = run_variant("CURRICULUM", w0, train, ProtocolConfig(), init_labels=init)
        order = curriculum_order(init)
        for r in records:
            ids = [e.image_id for e in r.training_set]
            assert ids == order[: len(ids)]
            assert len(ids) == math.floor(r.r * len(train) + 0.5)
            for e in r.training_set:
                assert list(e.pseudo_gt) == [(p.label, p.box) for p in init[e.image_id]]

    def test_curriculum_requires_init(self, setup):
        train, _, w0 = setup
        with pytest.raises(ValueError, match="initialization"):
            run_variant("CURRICULUM", w0, train, ProtocolConfig())

    @pytest.mark.parametrize("name", ["SP_SIML", "SP_MIML"])
    def test_relaxations_beat_complement(self, setup, name):
        train, init, w0 = setup
        models, records = run_variant(name, w0, train, ProtocolConfig(iterations=2), init_labels=init)
        for model, r in zip([w0] + models, records):
            for e in r.training_set:
                bag = train.bag(e.image_id)
                s_o = complement_best(forward(model, bag), bag.labels).score
                labels = [p for p in r.pseudo_labels() if p.image_id == e.image_id]
                assert labels and all(p.score > s_o and p.label in r.classes for p in labels)

    def test_relaxed_sp_reduces_to_mil(self, small_splits):
        """With r_1 = 1, no competition and no class selection, one iteration mines exactly the MIL set."""
        train, _ = small_splits
        model = DetectorModel.initialize(train.num_classes, train.feature_dim, np.random.default_rng(0), std=0.5)
        relaxed = replace(VARIANTS[Variant.SP], competition=False, class_selection="all", per_label_mining=True)
        cfg = ProtocolConfig(r1=1.0, iterations=1)
        _, a = run_variant(relaxed, model, train, cfg)
        _, b = run_variant("MIL", model, train, cfg)
        key = lambda r: sorted((p.image_id, p.label, p.box.as_tuple()) for p in r.pseudo_labels())
        assert key(a[0]) == key(b[0])
