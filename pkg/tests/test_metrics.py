"""AUROC/AUPRC against brute-force oracles, plus macro aggregation."""

import numpy as np
import pytest

from vqeeg.errors import UndefinedMetricError
from vqeeg.training import auprc, auroc, binary_report, macro_metrics


def auroc_pairwise_oracle(scores, labels) -> float:
    """All positive/negative pairs; ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def auprc_rank_walk_oracle(scores, labels) -> float:
    """Precision at each positive's rank, averaged over positives."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx] == 1:
            hits += 1
            total += hits / rank
    return total / y.sum()


class TestAuroc:
    def test_spec_example(self):
        value = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert value == 0.75
        assert value == auroc_pairwise_oracle([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])

    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties_give_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(4, 40))
            scores = rng.choice([0.1, 0.25, 0.5, 0.6, 0.9], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            assert auroc(scores, labels) == auroc_pairwise_oracle(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == base
        assert auroc(3.0 * scores + 7.0, labels) == base
        assert auroc(scores ** 3, labels) == base  # odd power keeps order

    def test_complement_identity(self):
        rng = np.random.default_rng(2)
        scores = rng.choice([0.2, 0.5, 0.8], size=30)
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(scores, 1 - labels) == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.9], [1, 1])

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(size=10_000)
        labels = rng.integers(0, 2, size=10_000)
        assert abs(auroc(scores, labels) - 0.5) < 0.02


class TestAuprc:
    def test_spec_example(self):
        value = auprc([0.9, 0.8, 0.7], [1, 0, 1])
        assert abs(value - (0.5 * 1.0 + 0.5 * (2 / 3))) < 1e-12
        assert abs(value - auprc_rank_walk_oracle([0.9, 0.8, 0.7], [1, 0, 1])) < 1e-12

    def test_all_positives_ranked_first(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_matches_rank_walk_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(3, 30))
            scores = rng.choice([0.1, 0.4, 0.7, 0.9], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                continue
            assert abs(auprc(scores, labels)
                       - auprc_rank_walk_oracle(scores, labels)) < 1e-12

    def test_random_scores_approach_positive_rate(self):
        rng = np.random.default_rng(5)
        n = 10_000
        labels = (rng.uniform(size=n) < 0.3).astype(int)
        scores = rng.uniform(size=n)
        assert abs(auprc(scores, labels) - 0.3) < 0.05

    def test_no_positives_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auprc([0.5, 0.6], [0, 0])


class TestMacroMetrics:
    def test_two_class_symmetric_equals_binary(self):
        rng = np.random.default_rng(6)
        p1 = rng.uniform(size=40)
        scores = np.stack([1 - p1, p1], axis=1)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        report = macro_metrics(scores, labels)
        assert report.auroc == pytest.approx(auroc(p1, labels))

    def test_one_separable_two_at_chance(self):
        rng = np.random.default_rng(7)
        n = 900
        labels = np.repeat([0, 1, 2], n // 3)
        scores = rng.uniform(size=(n, 3))
        scores[labels == 0, 0] += 10.0  # class 0 perfectly separable
        report = macro_metrics(scores, labels)
        expected = (1.0 + 0.5 + 0.5) / 3
        assert abs(report.auroc - expected) < 0.03

    def test_permuting_class_ids_invariant(self):
        rng = np.random.default_rng(8)
        scores = rng.uniform(size=(60, 3))
        labels = rng.integers(0, 3, size=60)
        labels[:3] = [0, 1, 2]
        base = macro_metrics(scores, labels)
        perm = np.array([2, 0, 1])
        permuted = macro_metrics(scores[:, perm], perm.argsort()[labels])
        assert permuted.auroc == pytest.approx(base.auroc)
        assert permuted.auprc == pytest.approx(base.auprc)

    def test_absent_class_skipped_with_warning(self):
        rng = np.random.default_rng(9)
        scores = rng.uniform(size=(30, 3))
        labels = rng.integers(0, 2, size=30)  # class 2 never appears
        labels[:2] = [0, 1]
        report = macro_metrics(scores, labels)
        assert 2 not in report.per_class
        assert any("class 2" in w for w in report.warnings)


class TestBinaryReport:
    def test_confusion_at_half(self):
        report = binary_report([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0])
        assert report.confusion == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
        assert 0.0 <= report.auroc <= 1.0
        assert report.sample_count == 4

    def test_text_rendering(self):
        report = binary_report([0.9, 0.1], [1, 0])
        text = report.to_text()
        assert "AUROC: 1.0" in text
        assert "confusion@0.5" in text
