"""Token-space interpretability: n-gram features over code assignments, a
multinomial naive-Bayes classifier with Laplace smoothing, discriminative-
pattern ranking, and time-localized event reports.

N-grams are contiguous token runs within one channel's row; counts are
pooled across channels for classification while positions are kept per
channel for localization.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .features import PatchConfig, patch_time_span
from .model import TokenGrid

DEFAULT_NGRAM_SIZES = (2, 3, 4)


@dataclass(frozen=True)
class NgramFeature:
    """A channel-agnostic token tuple with its vocabulary id."""

    tokens: tuple[int, ...]
    feature_id: int

    def __post_init__(self):
        if not 2 <= len(self.tokens) <= 4:
            raise ConfigError(f"n-gram length must be 2..4, got {len(self.tokens)}")

    def __str__(self) -> str:
        return "|".join(str(t) for t in self.tokens)


@dataclass
class NgramOccurrence:
    channel: int
    start_patch: int
    tokens: tuple[int, ...]


def extract_ngrams(grid: TokenGrid, n_set=DEFAULT_NGRAM_SIZES
                   ) -> tuple[Counter, list[NgramOccurrence]]:
    """All contiguous n-grams per channel row, for each n in n_set.

    Returns channel-pooled counts plus per-occurrence positions. Sizes
    larger than the row are skipped.
    """
    sizes = sorted(set(int(n) for n in n_set))
    for n in sizes:
        if not 2 <= n <= 4:
            raise ConfigError(f"n-gram sizes must lie in 2..4, got {n}")
    counts: Counter = Counter()
    positions: list[NgramOccurrence] = []
    rows, width = grid.indices.shape
    for c in range(rows):
        row = grid.indices[c]
        for n in sizes:
            for start in range(width - n + 1):
                tokens = tuple(int(t) for t in row[start:start + n])
                counts[tokens] += 1
                positions.append(NgramOccurrence(c, start, tokens))
    return counts, positions


@dataclass
class NaiveBayesModel:
    """Multinomial naive Bayes over pooled n-gram counts."""

    class_ids: list[int]
    log_priors: dict[int, float]
    feature_counts: dict[int, dict[tuple, float]]
    class_totals: dict[int, float]
    vocabulary: dict[tuple, int]  # token tuple -> feature id
    alpha: float
    n_set: tuple[int, ...]
    mode: str = "counts"

    def log_prob(self, tokens: tuple, class_id: int) -> float:
        """Smoothed log P(feature | class); unseen features get the floor."""
        count = self.feature_counts[class_id].get(tokens, 0.0)
        denom = self.class_totals[class_id] + self.alpha * len(self.vocabulary)
        return float(np.log((count + self.alpha) / denom))

    def feature(self, tokens: tuple) -> NgramFeature:
        return NgramFeature(tokens, self.vocabulary[tokens])


def _grid_counts(grid: TokenGrid, n_set, mode: str) -> Counter:
    counts, _ = extract_ngrams(grid, n_set)
    if mode == "presence":
        return Counter({k: 1 for k in counts})
    return counts


def nb_fit(grids: list[TokenGrid], labels, alpha: float = 1.0,
           n_set=DEFAULT_NGRAM_SIZES, mode: str = "counts") -> NaiveBayesModel:
    """Fit class priors and Laplace-smoothed feature likelihoods.

    mode "counts" uses multinomial occurrence counts; "presence" binarizes
    each grid's features before counting.
    """
    if mode not in ("counts", "presence"):
        raise ConfigError(f"mode must be 'counts' or 'presence', got {mode!r}")
    labels = [int(l) for l in labels]
    if len(grids) != len(labels):
        raise ConfigError("grid/label counts disagree")
    if not grids:
        raise ConfigError("cannot fit on an empty training set")
    class_ids = sorted(set(labels))
    if len(class_ids) < 2:
        raise UndefinedMetricError("naive Bayes needs at least two classes")

    feature_counts: dict[int, Counter] = {c: Counter() for c in class_ids}
    class_counts = Counter(labels)
    for grid, label in zip(grids, labels):
        feature_counts[label].update(_grid_counts(grid, n_set, mode))

    vocab_tuples = sorted(set().union(*[set(fc) for fc in feature_counts.values()]),
                          key=lambda t: (len(t), t))
    vocabulary = {t: i for i, t in enumerate(vocab_tuples)}
    total = len(labels)
    return NaiveBayesModel(
        class_ids=class_ids,
        log_priors={c: float(np.log(class_counts[c] / total)) for c in class_ids},
        feature_counts={c: dict(fc) for c, fc in feature_counts.items()},
        class_totals={c: float(sum(fc.values())) for c, fc in feature_counts.items()},
        vocabulary=vocabulary,
        alpha=alpha,
        n_set=tuple(sorted(set(int(n) for n in n_set))),
        mode=mode,
    )


def nb_score(model: NaiveBayesModel, grid: TokenGrid
             ) -> tuple[dict[int, float], int]:
    """Per-class log posteriors (up to the shared evidence) and the argmax.

    Ties resolve to the lower class id; smoothing keeps every score finite.
    """
    counts = _grid_counts(grid, model.n_set, model.mode)
    scores = {}
    for c in model.class_ids:
        score = model.log_priors[c]
        for tokens, count in counts.items():
            score += count * model.log_prob(tokens, c)
        scores[c] = score
    best = max(model.class_ids, key=lambda c: (scores[c], -c))
    return scores, best


def nb_binary_score(model: NaiveBayesModel, grid: TokenGrid,
                    positive_class: int = 1) -> float:
    """Log-posterior margin of `positive_class` over the rest (pooled)."""
    scores, _ = nb_score(model, grid)
    others = [s for c, s in scores.items() if c != positive_class]
    return scores[positive_class] - max(others)


def _rest_log_prob(model: NaiveBayesModel, tokens: tuple, target: int) -> float:
    """Smoothed log P(feature | not target): complement classes pooled."""
    count = sum(model.feature_counts[c].get(tokens, 0.0)
                for c in model.class_ids if c != target)
    denom = sum(model.class_totals[c] for c in model.class_ids if c != target) \
        + model.alpha * len(model.vocabulary)
    return float(np.log((count + model.alpha) / denom))


def top_features(model: NaiveBayesModel, target_class: int, k: int = 3
                 ) -> list[tuple[NgramFeature, float]]:
    """Features ranked by log-likelihood ratio for the target class.

    Ties break by higher target-class count, then by lower feature id.
    """
    if target_class not in model.class_ids:
        raise ConfigError(f"class {target_class} was not in the training set")
    ranked = []
    for tokens, fid in model.vocabulary.items():
        llr = model.log_prob(tokens, target_class) \
            - _rest_log_prob(model, tokens, target_class)
        target_count = model.feature_counts[target_class].get(tokens, 0.0)
        ranked.append((llr, target_count, -fid, tokens))
    ranked.sort(key=lambda item: (item[0], item[1], item[2]), reverse=True)
    return [(model.feature(tokens), llr)
            for llr, _, _, tokens in ranked[:max(k, 0)]]


@dataclass
class LocalizationEntry:
    window_id: str
    channel_label: str
    start_s: float
    end_s: float
    feature: NgramFeature
    llr: float


@dataclass
class LocalizationReport:
    """Per-window matches of discriminative patterns, best first."""

    entries: list[LocalizationEntry] = field(default_factory=list)

    def spans(self) -> list[tuple[float, float]]:
        return [(e.start_s, e.end_s) for e in self.entries]


def localize(grid: TokenGrid, features: list[tuple[NgramFeature, float]],
             cfg: PatchConfig, channel_labels: list[str],
             window_id: str = "") -> LocalizationReport:
    """Scan each channel row for the given features; every match maps to the
    union of its patches' time spans."""
    rows, width = grid.indices.shape
    if len(channel_labels) != rows:
        raise ConfigError(f"{len(channel_labels)} labels for {rows} channels")
    entries = []
    for feature, llr in features:
        tokens = np.asarray(feature.tokens)
        n = len(tokens)
        if n > width:
            continue
        for c in range(rows):
            row = grid.indices[c]
            for start in range(width - n + 1):
                if np.array_equal(row[start:start + n], tokens):
                    begin_s, _ = patch_time_span(start, cfg)
                    _, end_s = patch_time_span(start + n - 1, cfg)
                    entries.append(LocalizationEntry(
                        window_id, channel_labels[c], begin_s, end_s,
                        feature, llr))
    entries.sort(key=lambda e: (-e.llr, e.channel_label, e.start_s,
                                str(e.feature)))
    return LocalizationReport(entries)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def write_token_grid(grid: TokenGrid, channel_labels: list[str], path) -> None:
    """CSV with header (channel, patch_0 ... patch_{N-1}), one channel/row."""
    rows, width = grid.indices.shape
    if len(channel_labels) != rows:
        raise ConfigError(f"{len(channel_labels)} labels for {rows} channels")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["channel"] + [f"patch_{i}" for i in range(width)])
        for label, row in zip(channel_labels, grid.indices):
            writer.writerow([label] + [int(t) for t in row])


def read_token_grid(path, codebook_size: int | None = None
                    ) -> tuple[TokenGrid, list[str]]:
    """Load a token grid CSV; without a known codebook size, the smallest
    size covering the observed indices is assumed."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:1] != ["channel"]:
        raise ConfigError(f"not a token grid CSV: {path}")
    labels = [r[0] for r in rows[1:]]
    indices = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    if codebook_size is None:
        codebook_size = int(indices.max()) + 1 if indices.size else 1
    return TokenGrid(indices, codebook_size), labels


def write_localization_csv(reports: list[LocalizationReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["window_id", "channel", "start_s", "end_s",
                         "feature", "llr"])
        for report in reports:
            for e in report.entries:
                writer.writerow([e.window_id, e.channel_label,
                                 repr(e.start_s), repr(e.end_s),
                                 str(e.feature), repr(e.llr)])
