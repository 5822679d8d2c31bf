import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confcore.evaluation import (
    PatchPrediction,
    accuracy_vs_confidence_curve,
    aggregate_core,
    aggregate_cores,
    core_metrics,
    ece,
    mean_std,
    ood_auroc,
    patch_balanced_accuracy,
    read_curve_csv,
    roc_auc,
    write_curve_csv,
    write_reliability_csv,
)


def pp(prob, conf, core="c0", weak=1, true=None):
    return PatchPrediction(prob, conf, int(prob > 0.5), core, weak, true)


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def random_predictions(rng, n_cores=12, per_core=10):
    preds, labels = [], {}
    for c in range(n_cores):
        cid = f"c{c}"
        labels[cid] = c % 2
        for _ in range(per_core):
            preds.append(pp(float(rng.uniform()), float(rng.uniform()), cid, c % 2))
    return preds, labels


class TestEce:
    def test_perfect(self):
        value, report = ece([1.0] * 5, [1] * 5)
        assert value == 0.0
        assert report.total == 5

    def test_hand_binned_fixture(self):
        value, report = ece([0.95, 0.95, 0.65, 0.65], [1, 0, 1, 1])
        assert value == pytest.approx(0.4, abs=1e-12)
        counts = [b.count for b in report.bins]
        assert counts[9] == 2 and counts[6] == 2 and sum(counts) == 4

    def test_right_closed_edges(self):
        _, report = ece([0.0, 0.1, 0.3, 1.0], [1, 1, 1, 1])
        counts = [b.count for b in report.bins]
        assert counts[0] == 2  # 0 and 0.1 both in the first bin
        assert counts[2] == 1  # 0.3 belongs to (0.2, 0.3]
        assert counts[9] == 1

    def test_calibrated_large_sample(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0, 1, 10_000)
        correct = rng.uniform(0, 1, 10_000) < conf
        value, _ = ece(conf, correct)
        assert value < 0.02

    def test_empty(self):
        with pytest.raises(ValueError):
            ece([], [])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ece([1.2], [1])

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=200))
    def test_bounds_and_counts(self, pairs):
        conf, ok = zip(*pairs)
        value, report = ece(conf, ok)
        assert 0.0 <= value <= 1.0
        assert sum(b.count for b in report.bins) == report.total == len(pairs)

    def test_reliability_csv(self, tmp_path):
        _, report = ece([0.95, 0.65], [1, 0])
        write_reliability_csv(report, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "bin,n,conf,acc"
        assert len(lines) == 11


class TestAggregate:
    def test_all_confident(self):
        core = aggregate_core([pp(1.0, 1.0)] * 10, 0.9)
        assert core.status == "predicted" and core.score == 1.0

    def test_half_below_threshold(self):
        core = aggregate_core([pp(0.9, 0.5)] * 5 + [pp(0.9, 0.95)] * 5, 0.7)
        assert core.status == "uncertain"
        assert core.retained_fraction == 0.5
        assert core.score is None

    def test_mean_of_retained(self):
        kept = [pp(p, 0.95) for p in (0.2, 0.9, 0.9, 0.9, 0.9, 0.9)]
        dropped = [pp(0.1, 0.3)] * 4
        core = aggregate_core(kept + dropped, 0.7)
        assert core.status == "predicted"
        assert core.score == pytest.approx(4.7 / 6, abs=1e-12)
        assert round(core.score, 4) == 0.7833
        assert core.predicted_label == 1

    def test_exactly_sixty_percent_is_predicted(self):
        core = aggregate_core([pp(0.8, 0.9)] * 6 + [pp(0.8, 0.1)] * 4, 0.5)
        assert core.status == "predicted"

    def test_tau_zero_never_uncertain(self):
        rng = np.random.default_rng(1)
        preds, _ = random_predictions(rng)
        assert all(c.status == "predicted" for c in aggregate_cores(preds, 0.0))

    def test_empty_core(self):
        with pytest.raises(ValueError):
            aggregate_core([], 0.5)

    def test_dummy_rejected_patches_only_act_through_retained_fraction(self):
        rng = np.random.default_rng(2)
        preds, _ = random_predictions(rng, n_cores=20, per_core=10)
        tau = 0.3
        base = {c.core_id: c for c in aggregate_cores(preds, tau)}
        padded = preds + [pp(0.99, 0.0, f"c{i}") for i in range(20) for _ in range(2)]
        for c in aggregate_cores(padded, tau):
            b = base[c.core_id]
            kept = round(b.retained_fraction * 10)
            assert c.retained_fraction == pytest.approx(kept / 12)
            if c.status == "predicted":
                assert b.status == "predicted" and c.score == pytest.approx(b.score)
            elif b.status == "predicted":
                assert kept / 12 < 0.6 <= kept / 10


class TestCoreMetrics:
    def test_perfect(self):
        cores = [aggregate_core([pp(float(l), 1.0, f"k{i}")], 0.0) for i, l in enumerate([1, 1, 0, 0])]
        labels = {f"k{i}": l for i, l in enumerate([1, 1, 0, 0])}
        m = core_metrics(cores, labels)
        assert (m["auc"], m["sensitivity"], m["specificity"], m["balanced_accuracy"]) == (1.0, 1.0, 1.0, 1.0)

    @pytest.mark.parametrize("cancer,benign,expected", [
        ((0.9, 0.8), (0.6, 0.7), 1.0),
        ((0.9, 0.4), (0.6, 0.1), 0.75),
    ])
    def test_auc_examples(self, cancer, benign, expected):
        scores = list(cancer) + list(benign)
        labels = [1] * len(cancer) + [0] * len(benign)
        assert brute_auc(scores, labels) == expected
        assert roc_auc(scores, labels) == expected

    def test_auc_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            scores = rng.integers(0, 5, 15) / 4
            labels = rng.integers(0, 2, 15)
            if labels.min() == labels.max():
                continue
            assert roc_auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)

    def test_auc_monotone_transform_invariant(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(0.01, 1, 40)
        labels = rng.integers(0, 2, 40)
        assert roc_auc(scores, labels) == roc_auc(scores**2, labels)

    def test_uncertain_cores_excluded(self):
        cores = [
            aggregate_core([pp(0.9, 1.0, "a")], 0.5),
            aggregate_core([pp(0.1, 1.0, "b")], 0.5),
            aggregate_core([pp(0.9, 0.1, "c")], 0.5),
        ]
        m = core_metrics(cores, {"a": 1, "b": 0, "c": 0})
        assert m["rejected_cores"] == 1 and m["specificity"] == 1.0

    def test_single_class(self):
        cores = [aggregate_core([pp(0.9, 1.0, "a")], 0.0)]
        with pytest.raises(ValueError):
            core_metrics(cores, {"a": 1})


class TestPatchBalancedAccuracy:
    def test_all_correct(self):
        preds = [pp(0.9, 1, weak=1), pp(0.1, 1, weak=0)]
        assert patch_balanced_accuracy(preds) == 1.0

    def test_per_class_mean(self):
        preds = [pp(0.1, 1, weak=0)] * 2 + [pp(0.9, 1, weak=1), pp(0.1, 1, weak=1)]
        assert patch_balanced_accuracy(preds) == 0.75

    def test_oracle_source(self):
        preds = [pp(0.9, 1, weak=1, true=0), pp(0.1, 1, weak=1, true=1), pp(0.9, 1, weak=0, true=1)]
        assert patch_balanced_accuracy(preds, "true") == 0.25

    def test_random_is_half(self):
        rng = np.random.default_rng(5)
        labels = np.repeat([0, 1], 5000)
        preds = [pp(float(p), 1.0, weak=int(l)) for p, l in zip(rng.uniform(size=10_000), labels)]
        assert patch_balanced_accuracy(preds) == pytest.approx(0.5, abs=0.02)

    def test_single_class(self):
        with pytest.raises(ValueError):
            patch_balanced_accuracy([pp(0.9, 1, weak=1)])


class TestCurve:
    def test_tau_zero_keeps_everything(self):
        preds, labels = random_predictions(np.random.default_rng(6))
        point = accuracy_vs_confidence_curve(preds, [0.0], labels)[0]
        assert point.retained_cores == point.total_cores == 12
        assert point.balanced_accuracy is not None

    def test_total_rejection(self):
        preds, labels = random_predictions(np.random.default_rng(7))
        point = accuracy_vs_confidence_curve(preds, [1.0 + 1e-9], labels)[0]
        assert point.retained_cores == 0 and point.balanced_accuracy is None

    def test_retention_monotone(self):
        rng = np.random.default_rng(8)
        grid = np.linspace(0, 1, 21)
        for _ in range(100):
            preds, labels = random_predictions(rng, n_cores=int(rng.integers(2, 10)), per_core=int(rng.integers(1, 12)))
            retained = [p.retained_cores for p in accuracy_vs_confidence_curve(preds, grid, labels)]
            assert all(a >= b for a, b in zip(retained, retained[1:]))

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            accuracy_vs_confidence_curve([pp(0.5, 0.5)], [], {"c0": 1})

    def test_csv_roundtrip(self, tmp_path):
        preds, labels = random_predictions(np.random.default_rng(9))
        points = accuracy_vs_confidence_curve(preds, [0.0, 0.5, 1.0], labels)
        write_curve_csv(points, tmp_path / "c.csv")
        assert read_curve_csv(tmp_path / "c.csv") == points


def test_ood_auroc():
    assert ood_auroc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0


def test_mean_std_single_value():
    assert mean_std([0.7]) == (0.7, 0.0)
