"""Expert-score aggregation and the nonparametric test battery:
per-model/per-criterion means with best-flagging, Kruskal-Wallis with tie
correction, Dunn's pairwise post hoc z tests, and boxplot/radar exports."""

import csv
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy.stats import chi2

from .errors import DataError, ValidationError

CRITERIA = ("OR", "CS", "CB", "CR", "RT", "CTB", "TB", "BS", "OS", "AA", "MC", "HP")

CRITERION_NAMES = {
    "OR": "Overall Realism",
    "CS": "Clarity and Sharpness",
    "CB": "Contrast and Brightness",
    "CR": "Crowns",
    "RT": "Roots",
    "CTB": "Cortical Bone",
    "TB": "Trabecular Bone",
    "BS": "Bone Shape",
    "OS": "Occlusal Space",
    "AA": "Absence of Artifacts",
    "MC": "Mandibular Canal",
    "HP": "Hard Palate",
}

SCORE_MIN, SCORE_MAX = 1, 5


@dataclass
class ScoreRecord:
    rater_id: str
    image_id: str
    model_id: str
    scores: dict  # criterion -> int in 1..5
    timestamp: str = ""

    def validate(self):
        missing = [c for c in CRITERIA if c not in self.scores]
        if missing:
            raise ValidationError(
                f"record ({self.rater_id}, {self.image_id}) missing criteria {missing}")
        for crit in CRITERIA:
            val = self.scores[crit]
            if not isinstance(val, (int, np.integer)) or not SCORE_MIN <= val <= SCORE_MAX:
                raise ValidationError(
                    f"record ({self.rater_id}, {self.image_id}) has invalid "
                    f"{crit} score {val!r} (must be an integer in 1..5)")


def _round2(value):
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ScoreTable:
    models: list  # ordered model ids
    means: dict  # (model, criterion) -> raw mean
    counts: dict  # (model, criterion) -> sample count
    best: dict = field(default_factory=dict)  # criterion -> set of best models (ties kept)

    def formatted(self, model, criterion):
        return _round2(self.means[(model, criterion)])

    def row(self, model):
        return [self.means[(model, c)] for c in CRITERIA]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", *CRITERIA])
            for m in self.models:
                writer.writerow([m] + [self.formatted(m, c) for c in CRITERIA])

    def best_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["criterion", "best_models"])
            for c in CRITERIA:
                writer.writerow([c, "|".join(sorted(self.best[c]))])


def aggregate_means(records) -> ScoreTable:
    """Arithmetic mean per (model, criterion); per-criterion argmax gets the
    best flag, with ties all flagged."""
    records = list(records)
    if not records:
        raise DataError("no score records to aggregate")
    for r in records:
        r.validate()
    models = sorted({r.model_id for r in records})
    sums = {}
    counts = {}
    for r in records:
        for c in CRITERIA:
            key = (r.model_id, c)
            sums[key] = sums.get(key, 0) + r.scores[c]
            counts[key] = counts.get(key, 0) + 1
    means = {key: sums[key] / counts[key] for key in sums}
    best = {}
    for c in CRITERIA:
        top = max(means[(m, c)] for m in models)
        best[c] = {m for m in models if means[(m, c)] == top}
    return ScoreTable(models, means, counts, best)


# ---------------------------------------------------------------------------
# rank-based tests
# ---------------------------------------------------------------------------

def _rank_with_ties(values):
    """Average ranks (1-based); returns (ranks, tie sizes)."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ties = []
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        if j > i:
            ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def _check_groups(groups):
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise DataError("need at least 2 groups")
    for i, g in enumerate(groups):
        if g.size == 0:
            raise DataError(f"group {i} is empty")
    return groups


def kruskal_wallis(groups):
    """Tie-corrected H and its chi-square p-value (k - 1 dof)."""
    groups = _check_groups(groups)
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks, ties = _rank_with_ties(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        start += g.size
        h += r.sum() ** 2 / g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    tie_term = sum(t ** 3 - t for t in ties)
    denom = 1.0 - tie_term / (n ** 3 - n)
    if denom <= 0.0:
        return 0.0, 1.0  # every observation tied
    h /= denom
    p = float(chi2.sf(h, len(groups) - 1))
    return float(h), p


@dataclass
class DunnResult:
    group_names: list
    p_matrix: np.ndarray  # symmetric, unit diagonal
    z_matrix: np.ndarray
    h: float
    p_kw: float
    correction: str


def dunn_test(groups, correction="none", group_names=None) -> DunnResult:
    """Pairwise z statistics from mean ranks with tie-corrected variance;
    two-sided p-values, optionally Bonferroni- or Holm-adjusted."""
    if correction not in ("none", "bonferroni", "holm"):
        raise DataError(f"unknown correction {correction!r}")
    groups = _check_groups(groups)
    k = len(groups)
    names = list(group_names) if group_names else [f"group{i + 1}" for i in range(k)]
    if len(names) != k:
        raise DataError("group_names length must match the number of groups")
    h, p_kw = kruskal_wallis(groups)

    pooled = np.concatenate(groups)
    n = pooled.size
    ranks, ties = _rank_with_ties(pooled)
    mean_ranks = []
    start = 0
    for g in groups:
        mean_ranks.append(ranks[start:start + g.size].mean())
        start += g.size
    tie_term = sum(t ** 3 - t for t in ties)
    variance_base = n * (n + 1) / 12.0 - tie_term / (12.0 * (n - 1))

    z = np.zeros((k, k))
    p_raw = np.zeros((k, k))
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            se = math.sqrt(variance_base * (1.0 / groups[i].size + 1.0 / groups[j].size))
            zij = (mean_ranks[i] - mean_ranks[j]) / se if se > 0 else 0.0
            pij = math.erfc(abs(zij) / math.sqrt(2.0))  # two-sided normal tail
            z[i, j] = z[j, i] = zij
            p_raw[i, j] = p_raw[j, i] = pij
            pairs.append((i, j))

    m = len(pairs)
    p_adj = p_raw.copy()
    if correction == "bonferroni":
        for i, j in pairs:
            p_adj[i, j] = p_adj[j, i] = min(1.0, p_raw[i, j] * m)
    elif correction == "holm":
        ordered = sorted(pairs, key=lambda ij: p_raw[ij])
        running = 0.0
        for rank, (i, j) in enumerate(ordered):
            val = min(1.0, (m - rank) * p_raw[i, j])
            running = max(running, val)
            p_adj[i, j] = p_adj[j, i] = running
    np.fill_diagonal(p_adj, 1.0)
    return DunnResult(names, p_adj, z, h, p_kw, correction)


def write_dunn_csv(result: DunnResult, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + result.group_names)
        for i, name in enumerate(result.group_names):
            writer.writerow([name] + [f"{result.p_matrix[i, j]:.8f}"
                                      for j in range(len(result.group_names))])


# ---------------------------------------------------------------------------
# plot-data exports
# ---------------------------------------------------------------------------

def five_number_summary(values):
    """(min, Q1, median, Q3, max) with linearly interpolated quartiles."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(v.min()), float(q1), float(med), float(q3), float(v.max())


def export_plot_data(records, boxplot_path=None, radar_path=None):
    """Boxplot five-number summaries and radar mean vectors per model,
    criteria ordered as the score-table columns."""
    table = aggregate_means(records)
    grouped = {}
    for r in records:
        for c in CRITERIA:
            grouped.setdefault((r.model_id, c), []).append(r.scores[c])
    box_rows = []
    for m in table.models:
        for c in CRITERIA:
            box_rows.append((m, c) + five_number_summary(grouped[(m, c)]))
    radar_rows = [(m, *table.row(m)) for m in table.models]
    if boxplot_path:
        with open(boxplot_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "criterion", "min", "q1", "median", "q3", "max"])
            for row in box_rows:
                writer.writerow(row)
    if radar_path:
        with open(radar_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", *CRITERIA])
            for row in radar_rows:
                writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
    return box_rows, radar_rows


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def write_scores_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rater_id", "image_id", "model_id", *CRITERIA, "timestamp"])
        for r in records:
            writer.writerow([r.rater_id, r.image_id, r.model_id]
                            + [r.scores[c] for c in CRITERIA] + [r.timestamp])


def read_scores_csv(path):
    """Read score records; lines starting with '#' are metadata comments."""
    records = []
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(rows):
        try:
            scores = {c: int(row[c]) for c in CRITERIA}
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad score row {row}: {exc}") from exc
        rec = ScoreRecord(row["rater_id"], row["image_id"], row["model_id"],
                          scores, row.get("timestamp", ""))
        rec.validate()
        records.append(rec)
    return records
