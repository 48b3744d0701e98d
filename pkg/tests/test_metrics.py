import numpy as np
import pytest

import oracles
from aand import metrics


def random_pro_instance(seed, size=8, n_maps=2):
    rng = np.random.default_rng(seed)
    maps, gts = [], []
    for _ in range(n_maps):
        gt = (rng.uniform(size=(size, size)) < 0.3).astype(np.uint8)
        # a coarse quantisation produces plenty of tied scores
        m = np.round(rng.uniform(size=(size, size)) + 0.5 * gt, 1)
        maps.append(m)
        gts.append(gt)
    if not any(g.any() for g in gts):
        gts[0][0, 0] = 1
    return maps, gts


class TestAuroc:
    @pytest.mark.parametrize("seed", range(200))
    def test_matches_pair_count(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        assert metrics.auroc(scores, labels) == pytest.approx(oracles.pair_count_auroc(scores, labels), abs=1e-12)

    def test_worked_example(self):
        assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated_and_inverted(self):
        assert metrics.auroc([0, 1, 2, 3], [0, 0, 1, 1]) == 1.0
        assert metrics.auroc([3, 2, 1, 0], [0, 0, 1, 1]) == 0.0

    def test_all_ties(self):
        assert metrics.auroc(np.ones(6), [0, 1, 0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            metrics.auroc([0.1, 0.2], [1, 1])

    def test_monotone_invariance(self):
        rng = np.random.default_rng(0)
        s, y = rng.uniform(size=50), rng.integers(0, 2, 50)
        assert metrics.auroc(s, y) == metrics.auroc(np.exp(3 * s) - 7, y)


class TestPixelAuroc:
    def test_map_equal_to_mask(self):
        gt = np.zeros((5, 5))
        gt[1:3, 2:4] = 1
        assert metrics.pixel_auroc([gt], [gt]) == 1.0

    def test_constant_maps(self):
        gt = np.zeros((4, 4))
        gt[0, 0] = 1
        assert metrics.pixel_auroc([np.zeros((4, 4))], [gt]) == 0.5

    def test_pooled_equivalence(self):
        maps, gts = random_pro_instance(3)
        pooled = metrics.auroc(np.concatenate([m.ravel() for m in maps]), np.concatenate([g.ravel() for g in gts]))
        assert metrics.pixel_auroc(maps, gts) == pooled

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.pixel_auroc([np.zeros((3, 3))], [np.zeros((4, 4))])


class TestPro:
    @pytest.mark.parametrize("seed", range(50))
    def test_matches_threshold_sweep(self, seed):
        maps, gts = random_pro_instance(seed)
        assert metrics.pro(maps, gts) == pytest.approx(oracles.threshold_sweep_pro(maps, gts), abs=1e-9)

    def test_handcrafted_two_regions(self):
        gt = np.zeros((6, 6), np.uint8)
        gt[0:2, 0:2] = 1
        gt[3:6, 4] = 1
        score = np.array([
            [0.9, 0.8, 0.1, 0.0, 0.2, 0.1],
            [0.7, 0.6, 0.3, 0.1, 0.0, 0.2],
            [0.2, 0.1, 0.5, 0.2, 0.1, 0.0],
            [0.0, 0.3, 0.2, 0.1, 0.6, 0.1],
            [0.1, 0.0, 0.4, 0.2, 0.4, 0.3],
            [0.2, 0.1, 0.0, 0.1, 0.35, 0.2],
        ])
        expected = oracles.threshold_sweep_pro([score], [gt])
        assert metrics.pro([score], [gt]) == pytest.approx(expected, abs=1e-12)
        assert 0.5 < expected < 1.0

    def test_perfect_prediction(self):
        gt = np.zeros((6, 6))
        gt[2:4, 2:4] = 1
        assert metrics.pro([gt], [gt]) == 1.0

    def test_disjoint_prediction(self):
        gt = np.zeros((8, 8))
        gt[0, 0] = 1
        score = np.arange(64, dtype=float).reshape(8, 8)   # the region pixel scores lowest
        assert metrics.pro([score], [gt]) == 0.0

    def test_no_region_rejected(self):
        with pytest.raises(ValueError):
            metrics.pro([np.zeros((3, 3))], [np.zeros((3, 3))])

    def test_monotone_invariance(self):
        maps, gts = random_pro_instance(11)
        warped = [np.tanh(2 * m) + 5 for m in maps]
        assert metrics.pro(maps, gts) == pytest.approx(metrics.pro(warped, gts), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_region_labelling_matches_flood_fill(self, seed):
        mask = np.random.default_rng(seed).uniform(size=(8, 8)) < 0.45
        labels, count = metrics.label_regions(mask)
        regions = oracles.flood_fill_regions(mask)
        assert count == len(regions)
        ours = {frozenset(zip(*np.nonzero(labels == k))) for k in range(1, count + 1)}
        assert ours == {frozenset(r) for r in regions}

    def test_limit_validation(self):
        gt = np.eye(3)
        with pytest.raises(ValueError):
            metrics.pro([gt], [gt], fpr_limit=0.0)


class TestReport:
    def test_oracle_maps_score_one(self):
        rng = np.random.default_rng(0)
        masks = np.zeros((6, 8, 8), np.uint8)
        for i in range(3, 6):
            masks[i, rng.integers(0, 6):, rng.integers(0, 6):] = 1
        labels = np.array([0, 0, 0, 1, 1, 1])
        rep = metrics.evaluate_maps(masks.astype(float), masks, labels, name="toy")
        assert (rep.i_auc, rep.p_auc, rep.pro) == (1.0, 1.0, 1.0)
        assert (rep.n_normal, rep.n_abnormal) == (3, 3)

    def test_constant_maps_half(self):
        masks = np.zeros((4, 4, 4))
        masks[2:, 0, 0] = 1
        rep = metrics.evaluate_maps(np.zeros((4, 4, 4)), masks, [0, 0, 1, 1])
        assert rep.i_auc == 0.5 and rep.p_auc == 0.5

    def test_csv_header_and_rows(self, tmp_path):
        rep = metrics.EvalReport("stripes", 0.9, 0.8, 0.7, 10, 12, "abc")
        metrics.write_reports(tmp_path / "r.csv", [rep])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "class,i_auc,p_auc,pro,n_normal,n_abnormal,config_hash"
        assert lines[1] == "stripes,0.900000,0.800000,0.700000,10,12,abc"
