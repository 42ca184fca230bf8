"""N-gram extraction, naive Bayes fitting/scoring, ranking, localization."""

import numpy as np
import pytest

from vqeeg.errors import ConfigError, UndefinedMetricError
from vqeeg.features import PatchConfig
from vqeeg.model import TokenGrid
from vqeeg.analysis import (
    NgramFeature,
    extract_ngrams,
    localize,
    nb_binary_score,
    nb_fit,
    nb_score,
    read_token_grid,
    top_features,
    write_token_grid,
)
from vqeeg.training import auroc


def grid(rows, k=64) -> TokenGrid:
    return TokenGrid(np.asarray(rows), codebook_size=k)


class TestExtractNgrams:
    def test_bigram_enumeration(self):
        counts, _ = extract_ngrams(grid([[5, 7, 5, 7]]), n_set=(2,))
        assert counts == {(5, 7): 2, (7, 5): 1}

    def test_constant_row_trigram(self):
        counts, _ = extract_ngrams(grid([[3, 3, 3]]), n_set=(3,))
        assert counts == {(3, 3, 3): 1}

    def test_count_arithmetic(self):
        g = grid(np.random.default_rng(0).integers(0, 8, size=(3, 12)))
        counts, positions = extract_ngrams(g, n_set=(2, 3, 4))
        expected = 3 * sum(12 - n + 1 for n in (2, 3, 4))
        assert sum(counts.values()) == expected
        assert len(positions) == expected

    def test_short_rows_skip_large_n(self):
        counts, _ = extract_ngrams(grid([[1, 2]]), n_set=(2, 3, 4))
        assert counts == {(1, 2): 1}

    def test_positions_recorded_per_channel(self):
        _, positions = extract_ngrams(grid([[1, 2, 3], [4, 5, 6]]), n_set=(3,))
        assert {(p.channel, p.start_patch) for p in positions} == {(0, 0), (1, 0)}

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ConfigError):
            extract_ngrams(grid([[1, 2, 3]]), n_set=(5,))


def two_grid_fixture():
    """Class A has f1 = (1,2) three times and f2 = (3,4) once; class B has
    f2 twice. Matches the smoothing worked example."""
    a = grid([[1, 2, 1, 2, 1, 2, 3, 4]])  # (1,2) x3, (3,4) x1 ... plus extras
    return a


class TestNaiveBayes:
    def fit_worked_example(self, alpha=1.0):
        # Vocabulary {f1=(1,2), f2=(3,4)}; counts A: f1=3, f2=1; B: f1=0, f2=2.
        grids = [grid([[1, 2], [1, 2]]), grid([[1, 2], [3, 4]]),
                 grid([[3, 4], [3, 4]])]
        labels = [0, 0, 1]
        return nb_fit(grids, labels, alpha=alpha, n_set=(2,))

    def test_smoothing_formula(self):
        model = self.fit_worked_example()
        assert np.exp(model.log_prob((1, 2), 0)) == pytest.approx(4 / 6)
        assert np.exp(model.log_prob((1, 2), 1)) == pytest.approx(1 / 4)
        assert np.exp(model.log_prob((3, 4), 0)) == pytest.approx(2 / 6)
        assert np.exp(model.log_prob((3, 4), 1)) == pytest.approx(3 / 4)

    def test_alpha_dominance_limit(self):
        model = self.fit_worked_example(alpha=1e9)
        for tokens in ((1, 2), (3, 4)):
            for cls in (0, 1):
                assert np.exp(model.log_prob(tokens, cls)) == pytest.approx(
                    1 / 2, rel=1e-6)

    def test_duplicating_grids_preserves_probabilities(self):
        base = self.fit_worked_example()
        grids = [grid([[1, 2], [1, 2]]), grid([[1, 2], [3, 4]]),
                 grid([[3, 4], [3, 4]])]
        doubled = nb_fit(grids * 2, [0, 0, 1] * 2, alpha=1.0, n_set=(2,))
        for tokens in ((1, 2), (3, 4)):
            for cls in (0, 1):
                # counts scale but alpha does not: ratios stay close, and the
                # unsmoothed ratios are identical
                unsmoothed_base = base.feature_counts[cls].get(tokens, 0.0) \
                    / max(base.class_totals[cls], 1.0)
                unsmoothed_doubled = doubled.feature_counts[cls].get(tokens, 0.0) \
                    / max(doubled.class_totals[cls], 1.0)
                assert unsmoothed_base == pytest.approx(unsmoothed_doubled)
        assert base.log_priors == doubled.log_priors

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            nb_fit([grid([[1, 2]])], [0], n_set=(2,))

    def test_empty_training_rejected(self):
        with pytest.raises(ConfigError):
            nb_fit([], [], n_set=(2,))

    def test_score_favors_matching_class(self):
        model = self.fit_worked_example()
        scores, predicted = nb_score(model, grid([[1, 2]]))
        assert predicted == 0
        assert scores[0] > scores[1]

    def test_empty_features_return_priors(self):
        model = self.fit_worked_example()
        scores, _ = nb_score(model, grid([[9]]))  # width 1: no bigrams
        assert scores[0] == pytest.approx(model.log_priors[0])
        assert scores[1] == pytest.approx(model.log_priors[1])

    def test_unseen_features_stay_finite(self):
        model = self.fit_worked_example()
        scores, _ = nb_score(model, grid([[60, 61, 62, 63]]))
        assert all(np.isfinite(v) for v in scores.values())

    def test_posterior_ordering_shift_invariant(self):
        model = self.fit_worked_example()
        g = grid([[1, 2, 3, 4]])
        scores, predicted = nb_score(model, g)
        shifted = {c: s + 123.0 for c, s in scores.items()}
        assert max(shifted, key=shifted.get) == predicted

    def test_presence_mode(self):
        grids = [grid([[1, 2, 1, 2]]), grid([[3, 4, 3, 4]])]
        model = nb_fit(grids, [0, 1], n_set=(2,), mode="presence")
        # presence binarizes: (1,2) appears "once" for class 0
        assert model.feature_counts[0][(1, 2)] == 1


class TestTopFeatures:
    def test_worked_example_ranking(self):
        grids = [grid([[1, 2], [1, 2]]), grid([[1, 2], [3, 4]]),
                 grid([[3, 4], [3, 4]])]
        model = nb_fit(grids, [0, 0, 1], alpha=1.0, n_set=(2,))
        ranked = top_features(model, target_class=0, k=2)
        assert ranked[0][0].tokens == (1, 2)
        assert ranked[0][1] == pytest.approx(np.log((4 / 6) / (1 / 4)))
        assert ranked[1][0].tokens == (3, 4)
        assert ranked[1][1] == pytest.approx(np.log((2 / 6) / (3 / 4)))

    def test_symmetric_counts_zero_llr(self):
        grids = [grid([[1, 2]]), grid([[1, 2]])]
        model = nb_fit(grids, [0, 1], n_set=(2,))
        ranked = top_features(model, target_class=1, k=5)
        assert all(abs(llr) < 1e-12 for _, llr in ranked)

    def test_k_larger_than_vocabulary(self):
        grids = [grid([[1, 2]]), grid([[3, 4]])]
        model = nb_fit(grids, [0, 1], n_set=(2,))
        assert len(top_features(model, 0, k=100)) == 2

    def test_planted_bigram_recovery(self):
        """Class 1 = class 0 plus one planted bigram: NB separates at
        AUROC > 0.95 and the top feature is the plant."""
        rng = np.random.default_rng(10)
        plant = (41, 17)
        grids, labels = [], []
        for i in range(280):
            tokens = rng.integers(0, 10, size=(2, 8))
            label = i % 2
            if label == 1:
                c = int(rng.integers(0, 2))
                s = int(rng.integers(0, 7))
                tokens[c, s:s + 2] = plant
            grids.append(grid(tokens))
            labels.append(label)
        model = nb_fit(grids[:200], labels[:200], n_set=(2,))
        scores = [nb_binary_score(model, g) for g in grids[200:]]
        assert auroc(scores, labels[200:]) > 0.95
        best = top_features(model, target_class=1, k=1)
        assert best[0][0].tokens == plant


class TestLocalize:
    def test_span_arithmetic(self):
        cfg = PatchConfig(256, 256)
        g = grid([[0, 0, 0, 5, 7, 0, 0, 0, 0, 0, 0, 0]], k=8)
        feature = NgramFeature((5, 7), 0)
        report = localize(g, [(feature, 1.5)], cfg, ["Fz"], window_id="w0")
        assert len(report.entries) == 1
        e = report.entries[0]
        assert e.channel_label == "Fz"
        assert e.start_s == pytest.approx(3 * 256 / 250)
        assert e.end_s == pytest.approx(min(4 * 256 / 250 + 256 / 250, 12.0))
        assert e.llr == 1.5

    def test_no_matches_empty_report(self):
        cfg = PatchConfig(256, 256)
        g = grid([[0] * 12], k=8)
        report = localize(g, [(NgramFeature((5, 7), 0), 1.0)], cfg, ["Cz"])
        assert report.entries == []

    def test_spans_stay_inside_window(self):
        cfg = PatchConfig(256, 256)
        rows = np.random.default_rng(11).integers(0, 4, size=(3, 12))
        g = grid(rows, k=8)
        counts, _ = extract_ngrams(g, n_set=(2, 3))
        feats = [(NgramFeature(t, i), 1.0) for i, t in enumerate(counts)]
        report = localize(g, feats, cfg, ["Fz", "Cz", "Pz"])
        for e in report.entries:
            assert 0.0 <= e.start_s < e.end_s <= 12.0

    def test_every_entry_matches_grid(self):
        cfg = PatchConfig(256, 256)
        rows = np.random.default_rng(12).integers(0, 3, size=(2, 12))
        g = grid(rows, k=8)
        labels = ["Fz", "Pz"]
        feats = [(NgramFeature((1, 2), 0), 2.0)]
        report = localize(g, feats, cfg, labels)
        for e in report.entries:
            c = labels.index(e.channel_label)
            start = int(round(e.start_s * 250 / 256))
            np.testing.assert_array_equal(rows[c, start:start + 2], [1, 2])


class TestTokenGridCsv:
    def test_round_trip(self, tmp_path):
        g = grid(np.random.default_rng(13).integers(0, 16, size=(3, 5)), k=16)
        labels = ["Fz", "Cz", "Pz"]
        path = tmp_path / "tokens.csv"
        write_token_grid(g, labels, path)
        back, back_labels = read_token_grid(path, 16)
        np.testing.assert_array_equal(back.indices, g.indices)
        assert back_labels == labels
