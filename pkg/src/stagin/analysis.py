"""
Attention interpretation.

Temporal side: column-mean of each layer's self-attention matrix gives a
per-window weight; windows above ``alpha`` standard deviations are
"attended"; their binary FC matrices are clustered with k-means and cluster
occupancy is compared between two groups with a chi-square test.

Spatial side: each subject's node-attention sequence is regressed on a
task/rest design; the contrast ``c = [1, -1]`` is tested across subjects per
node with a one-sided t-test, Bonferroni-corrected over nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import (EmptyAttendedSet, NotStochastic, RankDeficientDesign, TooFewSamples,
                     TooFewSubjects, ZeroExpected)
from .fcgraph import ICN_NAMES, UNKNOWN_ICN, upper_triangle


# ------------------------------------------------------------------ temporal attention

def temporal_attention_vector(z_time_mat: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Column mean of a row-stochastic (T, T) matrix; works on stacks (..., T, T)."""
    z = np.asarray(z_time_mat, dtype=np.float64)
    rows = z.sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > tol) or np.any(z < -tol):
        raise NotStochastic(f"rows must sum to 1 (worst deviation {np.max(np.abs(rows - 1.0)):.3g})")
    return z.mean(axis=-2)


@dataclass
class TemporalAttentionSummary:
    z_time: np.ndarray                   # (K, T)
    alpha: float
    attended_per_layer: list[np.ndarray]
    attended: np.ndarray                 # union over layers
    degenerate: list[bool] = field(default_factory=list)


def attended_timepoints(z_time: np.ndarray, alpha: float = 1.0, centered: bool = False):
    """Indices with ``z_time > alpha * std`` (sample std).

    ``centered=True`` uses ``mean + alpha * std`` instead.  Returns
    ``(indices, degenerate)`` where ``degenerate`` flags a zero spread, in
    which case every index is returned.
    """
    z = np.asarray(z_time, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise TooFewSamples("attended timepoints need a vector of length >= 2")
    sigma = z.std(ddof=1)
    if sigma == 0.0:
        return np.arange(z.size), True
    cut = alpha * sigma + (z.mean() if centered else 0.0)
    return np.flatnonzero(z > cut), False


def summarize_temporal(z_time_mat: np.ndarray, alpha: float = 1.0, centered: bool = False):
    """Per-layer and union attended sets from a (K, T, T) record."""
    zt = temporal_attention_vector(z_time_mat)
    per_layer, flags = [], []
    for k in range(zt.shape[0]):
        idx, flag = attended_timepoints(zt[k], alpha, centered)
        per_layer.append(idx)
        flags.append(flag)
    union = np.unique(np.concatenate(per_layer)) if per_layer else np.zeros(0, np.int64)
    return TemporalAttentionSummary(zt, alpha, per_layer, union, flags)


def point_biserial(values: np.ndarray, indicator: np.ndarray) -> float:
    """Pearson correlation between a continuous vector and a 0/1 indicator."""
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(indicator, dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


# ------------------------------------------------------------------ k-means

@dataclass
class ClusterResult:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list[float]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.choice(len(x), p=d2 / total)) if total > 0 else int(rng.integers(len(x)))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(samples: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 0.0) -> ClusterResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when assignments no longer change or after ``max_iter`` sweeps.  An
    empty cluster is re-seeded at the point farthest from its current centroid.
    ``inertia_history[i]`` is the inertia after the i-th assignment step.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or len(x) < k or k < 1:
        raise TooFewSamples(f"{len(x)} samples for k={k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    history: list[float] = []
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new_assign = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(len(x)), assign].argmax())
                centroids[j] = x[far]
                assign[far] = j
        if tol and len(history) > 1 and history[-2] - history[-1] <= tol:
            break
    # final consistent assignment and inertia against the last centroids
    d = _sq_dists(x, centroids)
    assign = d.argmin(axis=1)
    final = float(d[np.arange(len(x)), assign].sum())
    if final < history[-1]:
        history.append(final)
    return ClusterResult(k, centroids, assign, history, it)


def inertia(samples: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    diff = np.asarray(samples, dtype=np.float64) - centroids[assignments]
    return float((diff * diff).sum())


# ------------------------------------------------------------------ group comparison

@dataclass
class GroupRatioTable:
    counts: np.ndarray            # (k, 2): column 0 = group 0, column 1 = group 1
    ratios: np.ndarray            # (k, 2): counts normalized per group column
    order: np.ndarray             # clusters sorted by descending group1/group0 ratio
    group_values: tuple

    def sorted_rows(self):
        for j in self.order:
            r0, r1 = self.ratios[j]
            yield int(j), int(self.counts[j, 0]), int(self.counts[j, 1]), float(r0), float(r1)


def cluster_group_ratio(assignments, groups, k: int) -> GroupRatioTable:
    """Per-cluster counts of attended matrices by (binary) group.

    Groups may be any two values; the smaller sorts as group 0.  Ratio columns
    sum to 1 for every group that is present.
    """
    assignments = np.asarray(assignments)
    groups = np.asarray(groups)
    if assignments.size == 0:
        raise EmptyAttendedSet("no attended matrices to tabulate")
    values = tuple(sorted(np.unique(groups).tolist()))
    if len(values) > 2:
        raise ValueError(f"groups must be binary, got {values}")
    if len(values) == 1:
        values = (values[0], None) if values[0] != 1 else (None, values[0])
    counts = np.zeros((k, 2), dtype=np.int64)
    for col, g in enumerate(values):
        if g is None:
            continue
        counts[:, col] = np.bincount(assignments[groups == g], minlength=k)[:k]
    totals = counts.sum(axis=0, keepdims=True)
    ratios = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(ratios[:, 0] > 0, ratios[:, 1] / ratios[:, 0], np.inf)
    rel = np.nan_to_num(rel, nan=0.0)
    order = np.argsort(-rel, kind="stable")
    return GroupRatioTable(counts, ratios, order, values)


def chi2_sf(x: float, dof: int) -> float:
    """Chi-square survival function via the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def chi_square_independence(table) -> tuple[float, int, float]:
    """Pearson chi-square on a k x 2 contingency table.

    Rows with no counts in either column are dropped before testing.
    """
    t = np.asarray(table, dtype=np.float64)
    t = t[t.sum(axis=1) > 0]
    t = t[:, t.sum(axis=0) > 0] if t.size else t
    if t.size == 0 or t.shape[1] < 2 or t.shape[0] < 1:
        raise ZeroExpected("table has an empty group column")
    expected = t.sum(axis=1, keepdims=True) * t.sum(axis=0, keepdims=True) / t.sum()
    if np.any(expected <= 0):
        raise ZeroExpected("zero expected count")
    stat = float(((t - expected) ** 2 / expected).sum())
    dof = (t.shape[0] - 1) * (t.shape[1] - 1)
    p = chi2_sf(stat, dof) if dof > 0 else 1.0
    return stat, dof, p


# ------------------------------------------------------------------ GLM

def glm_fit(z: np.ndarray, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares ``z = M beta + e`` per column of ``z`` (T, N); returns (beta (2, N), residuals)."""
    m = np.asarray(design, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if m.ndim != 2 or z.shape[0] != m.shape[0]:
        raise ValueError(f"design {m.shape} does not match data {z.shape}")
    if np.linalg.matrix_rank(m) < m.shape[1]:
        raise RankDeficientDesign("design matrix is not full column rank")
    beta, *_ = np.linalg.lstsq(m, z, rcond=None)
    return beta, z - m @ beta


def t_sf(t: np.ndarray, dof: int) -> np.ndarray:
    """Upper tail of Student's t via the regularized incomplete beta."""
    t = np.asarray(t, dtype=np.float64)
    tail = 0.5 * special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return np.where(t > 0, tail, 1.0 - tail)


@dataclass
class GlmResult:
    effects: np.ndarray          # (S, N) contrast values c^T beta per subject
    t_values: np.ndarray
    p_raw: np.ndarray
    p_fwe: np.ndarray
    significant: np.ndarray
    level: float
    contrast: tuple = (1.0, -1.0)


def contrast_test(betas: np.ndarray, contrast=(1.0, -1.0), level: float = 0.05) -> GlmResult:
    """One-sided one-sample t-test of ``c^T beta > 0`` across subjects per node.

    ``betas`` is (S, 2, N).  P-values are Bonferroni-corrected over the N nodes.
    """
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 3:
        raise ValueError(f"betas must be (subjects, 2, nodes), got {b.shape}")
    s, _, n = b.shape
    if s < 2:
        raise TooFewSubjects("contrast test needs at least two subjects")
    c = np.asarray(contrast, dtype=np.float64)
    eff = np.einsum("j,sjn->sn", c, b)
    mean = eff.mean(axis=0)
    sd = eff.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / math.sqrt(s))
    t = np.where(sd > 0, t, np.where(mean > 0, np.inf, np.where(mean < 0, -np.inf, 0.0)))
    p = np.where(np.isfinite(t), t_sf(np.where(np.isfinite(t), t, 0.0), s - 1),
                 np.where(t > 0, 0.0, 1.0))
    p = np.where((sd == 0) & (mean == 0), 1.0, p)
    p_fwe = np.minimum(1.0, n * p)
    return GlmResult(eff, t, p, p_fwe, np.flatnonzero(p_fwe < level), level, tuple(c))


def subject_betas(z_space_seqs: Sequence[np.ndarray], design: np.ndarray) -> np.ndarray:
    """Stack per-subject GLM estimates: input (T, N) sequences, output (S, 2, N)."""
    return np.stack([glm_fit(z, design)[0] for z in z_space_seqs])


def icn_proportion(significant, icn_labels: Sequence[str]) -> tuple[dict[str, float], bool]:
    """Share of significant nodes per ICN (plus ``unknown``); flag is True for an empty set."""
    names = list(ICN_NAMES) + [UNKNOWN_ICN]
    sig = list(np.asarray(significant, dtype=np.int64))
    if not sig:
        return {k: 0.0 for k in names}, True
    counts = {k: 0 for k in names}
    for i in sig:
        lab = icn_labels[i]
        counts[lab if lab in counts else UNKNOWN_ICN] += 1
    return {k: counts[k] / len(sig) for k in names}, False


# ------------------------------------------------------------------ spatial attention summaries

def mean_spatial_attention(z_space: np.ndarray) -> np.ndarray:
    """Average node attention over time: (K, T, N) -> (K, N)."""
    return np.asarray(z_space, dtype=np.float64).mean(axis=-2)


def top_percentile_nodes(values: np.ndarray, percentile: float = 5.0) -> np.ndarray:
    """Indices of the ``ceil(N * p / 100)`` largest entries, in descending order."""
    v = np.asarray(values, dtype=np.float64)
    count = max(1, math.ceil(v.size * percentile / 100.0 - 1e-9))
    return np.argsort(-v, kind="stable")[:count]


# ------------------------------------------------------------------ pipelines

@dataclass
class RestAnalysis:
    clusters: ClusterResult
    table: GroupRatioTable
    chi2: tuple[float, int, float]
    n_attended: int
    attended_groups: np.ndarray
    attended_subjects: np.ndarray
    attended_windows: np.ndarray


def rest_pipeline(records, adjacencies: Sequence[np.ndarray], groups, k: int = 7, alpha: float = 1.0,
                  seed: int = 0, layer: Optional[int] = None, centered: bool = False,
                  features: Optional[Sequence[np.ndarray]] = None) -> RestAnalysis:
    """Attended windows -> k-means on vectorized FC -> group ratio table -> chi-square.

    ``records`` are per-subject AttentionRecords; ``adjacencies`` the matching
    (T, N, N) graphs.  ``layer=None`` pools the union of per-layer attended
    sets.  ``features`` optionally replaces the binary adjacency (e.g. with
    continuous correlations) for clustering.
    """
    rows, grp, subj, wins = [], [], [], []
    groups = np.asarray(groups)
    for i, (rec, adj) in enumerate(zip(records, adjacencies)):
        summary = summarize_temporal(rec.z_time_mat, alpha, centered)
        idx = summary.attended if layer is None else summary.attended_per_layer[layer]
        source = features[i] if features is not None else adj
        vec = upper_triangle(np.asarray(source, dtype=np.float64))
        rows.append(vec[idx])
        grp.append(np.full(len(idx), groups[i]))
        subj.append(np.full(len(idx), i))
        wins.append(idx)
    x = np.concatenate(rows) if rows else np.zeros((0, 1))
    if len(x) == 0:
        raise EmptyAttendedSet("no attended windows in any subject")
    g = np.concatenate(grp)
    result = kmeans(x, k, seed=seed)
    table = cluster_group_ratio(result.assignments, g, k)
    return RestAnalysis(result, table, chi_square_independence(table.counts), len(x), g,
                        np.concatenate(subj), np.concatenate(wins))


@dataclass
class TaskAnalysis:
    glm: GlmResult
    proportions: dict
    empty: bool
    betas: np.ndarray


def task_pipeline(z_space_seqs: Sequence[np.ndarray], design: np.ndarray, icn_labels: Sequence[str],
                  level: float = 0.05, contrast=(1.0, -1.0)) -> TaskAnalysis:
    """Per-subject GLM on (T, N) attention sequences, then the across-subject contrast test."""
    betas = subject_betas(z_space_seqs, design)
    glm = contrast_test(betas, contrast, level)
    props, empty = icn_proportion(glm.significant, icn_labels)
    return TaskAnalysis(glm, props, empty, betas)


def window_design(task_indicator: np.ndarray, window_ends: np.ndarray, gamma: int) -> np.ndarray:
    """(T, 2) design of task / rest columns from a per-timepoint indicator (majority per window)."""
    ind = np.array([float(np.mean(task_indicator[e - gamma:e]) > 0.5) for e in window_ends])
    return np.stack([ind, 1.0 - ind], axis=1)


# ------------------------------------------------------------------ CSV output

def write_csv(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_design_csv(path: str | Path) -> np.ndarray:
    """T rows of two binary columns; an optional non-numeric header row is skipped."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    m = np.array([[float(v) for v in r] for r in rows])
    if m.ndim != 2 or m.shape[1] != 2:
        raise ValueError(f"design must have two columns, got shape {m.shape}")
    return m


def write_ratio_table(path, table: GroupRatioTable) -> None:
    write_csv(path, ["cluster", "count_group0", "count_group1", "ratio_group0", "ratio_group1"],
              table.sorted_rows())


def write_glm_table(path, result: GlmResult, roi_labels: Sequence[str], icn_labels: Sequence[str]) -> None:
    sig = set(result.significant.tolist())
    rows = ((roi_labels[i], icn_labels[i], float(result.t_values[i]), float(result.p_raw[i]),
             float(result.p_fwe[i]), int(i in sig)) for i in range(len(result.t_values)))
    write_csv(path, ["roi", "icn", "t", "p", "p_fwe", "significant"], rows)


def write_icn_table(path, proportions: dict) -> None:
    write_csv(path, ["icn", "proportion"], ((k, float(v)) for k, v in proportions.items()))
