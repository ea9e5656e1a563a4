"""
Sliding-window dynamic functional-connectivity graphs.

An ROI timeseries (N regions x Tmax timepoints) is standardized per region,
cut into windows of length ``gamma`` every ``stride`` timepoints, turned into
one Pearson correlation matrix per window, and binarized by keeping the top
``edge_percentile`` percent of the off-diagonal correlations of each window.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AllDegenerate, DegenerateWarning, WindowTooLong, WindowTooShort

ICN_NAMES = ("VN", "SMN", "DAN", "SVN", "LN", "CCN", "DMN")
UNKNOWN_ICN = "unknown"


@dataclass
class RoiTimeseries:
    """Region signals with their labels.

    Parameters
    ----------
    values : np.ndarray
        Array of shape (N, Tmax); rows are ROIs, columns are timepoints.
    roi_labels, icn_labels : sequence of str
        One entry per ROI.  ICN labels are one of ``ICN_NAMES`` or ``"unknown"``.
    repetition_time_s : float
        Sampling interval in seconds.
    degenerate : np.ndarray, optional
        Boolean mask of ROIs found to be constant by :func:`standardize`.
    """

    values: np.ndarray
    roi_labels: Sequence[str]
    icn_labels: Sequence[str]
    repetition_time_s: float = 0.72
    degenerate: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D (N, Tmax), got shape {self.values.shape}")
        n, t_max = self.values.shape
        if n < 2 or t_max < 2:
            raise ValueError(f"need at least 2 ROIs and 2 timepoints, got {self.values.shape}")
        self.roi_labels = list(self.roi_labels)
        self.icn_labels = list(self.icn_labels)
        if len(self.roi_labels) != n or len(self.icn_labels) != n:
            raise ValueError(
                f"label counts ({len(self.roi_labels)}, {len(self.icn_labels)}) must equal N={n}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values contain NaN or Inf")
        if not self.repetition_time_s > 0:
            raise ValueError("repetition_time_s must be positive")

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]

    @property
    def t_max(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "RoiTimeseries":
        return RoiTimeseries(values, self.roi_labels, self.icn_labels,
                             self.repetition_time_s, self.degenerate)


@dataclass(frozen=True)
class WindowConfig:
    gamma: int = 50
    stride: int = 3
    edge_percentile: float = 30.0

    def __post_init__(self):
        if int(self.gamma) != self.gamma or self.gamma < 2:
            raise ValueError(f"gamma must be an integer >= 2, got {self.gamma}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")
        if not 0 < self.edge_percentile < 100:
            raise ValueError(f"edge_percentile must lie in (0, 100), got {self.edge_percentile}")


@dataclass
class FcMatrix:
    r: np.ndarray
    window_start: int
    window_end: int
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class DynamicGraph:
    """Sequence of binary adjacency matrices, one per window.

    ``adjacency`` has shape (T, N, N) and dtype uint8; ``window_ends`` holds the
    exclusive end column of every window.
    """

    adjacency: np.ndarray
    window_ends: np.ndarray
    n_nodes: int
    source: Optional[RoiTimeseries] = None

    @property
    def n_windows(self) -> int:
        return self.adjacency.shape[0]


def standardize(ts: RoiTimeseries) -> RoiTimeseries:
    """Z-score every ROI across time (sample standard deviation).

    Constant ROIs are set to zero, marked in ``degenerate`` and reported with a
    :class:`DegenerateWarning`.
    """
    x = ts.values
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = centered.std(axis=1, ddof=1, keepdims=True)
    scale = np.abs(x).max(axis=1, keepdims=True)
    degenerate = (std <= 1e-12 * np.maximum(scale, 1e-300)).ravel()
    if degenerate.all():
        raise AllDegenerate("every ROI is constant over time")
    out = np.where(degenerate[:, None], 0.0, centered / np.where(std > 0, std, 1.0))
    # second pass removes the O(eps) residual mean left by the first
    out = out - out.mean(axis=1, keepdims=True)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} constant ROI(s) set to zero: "
            f"{[ts.roi_labels[i] for i in np.flatnonzero(degenerate)]}",
            DegenerateWarning,
            stacklevel=2,
        )
    result = ts.with_values(out)
    result.degenerate = degenerate
    return result


def window_count(t_max: int, gamma: int, stride: int) -> int:
    return (t_max - gamma) // stride


def sliding_windows(ts: RoiTimeseries | int, cfg: WindowConfig) -> list[tuple[int, int]]:
    """Half-open column ranges ``[t*S, t*S + gamma)`` for ``t < floor((Tmax-gamma)/S)``."""
    t_max = ts if isinstance(ts, (int, np.integer)) else ts.t_max
    if cfg.gamma > t_max:
        raise WindowTooLong(f"window length {cfg.gamma} exceeds series length {t_max}")
    n = window_count(t_max, cfg.gamma, cfg.stride)
    if n < 1:
        raise WindowTooLong(
            f"no complete window: floor(({t_max} - {cfg.gamma}) / {cfg.stride}) = {n}"
        )
    return [(t * cfg.stride, t * cfg.stride + cfg.gamma) for t in range(n)]


def _correlate_windows(windows: np.ndarray):
    """Pearson correlation for a stack of windows shaped (..., N, L)."""
    centered = windows - windows.mean(axis=-1, keepdims=True)
    ss = np.einsum("...nl,...nl->...n", centered, centered)
    raw_ss = np.einsum("...nl,...nl->...n", windows, windows)
    degenerate = ss <= 1e-20 * raw_ss + 1e-300
    norm = np.sqrt(np.where(degenerate, 1.0, ss))
    unit = np.where(degenerate[..., None], 0.0, centered / norm[..., None])
    r = unit @ np.swapaxes(unit, -1, -2)
    r = np.clip(r, -1.0, 1.0)
    r = 0.5 * (r + np.swapaxes(r, -1, -2))
    n = r.shape[-1]
    diag = np.where(degenerate, 0.0, 1.0)
    r[..., np.arange(n), np.arange(n)] = diag
    return r, degenerate


def correlation_matrix(ts: RoiTimeseries, start: int, end: int) -> FcMatrix:
    if end - start < 2:
        raise WindowTooShort(f"window [{start}, {end}) has fewer than 2 timepoints")
    if start < 0 or end > ts.t_max:
        raise WindowTooLong(f"window [{start}, {end}) outside [0, {ts.t_max})")
    r, degenerate = _correlate_windows(ts.values[:, start:end])
    if degenerate.any():
        warnings.warn(
            f"window [{start}, {end}): {int(degenerate.sum())} zero-variance ROI(s), correlation set to 0",
            DegenerateWarning,
            stacklevel=2,
        )
    return FcMatrix(r=r, window_start=start, window_end=end, degenerate=degenerate)


def _edge_count(n_pairs: int, edge_percentile: float) -> int:
    return max(1, math.ceil(n_pairs * edge_percentile / 100.0 - 1e-9))


def threshold_adjacency(fc: FcMatrix | np.ndarray, edge_percentile: float = 30.0) -> np.ndarray:
    """Binarize a correlation matrix (or a stack of them) by its top percentile.

    The pool is the strict upper triangle.  The cutoff is the value of the
    ``ceil(M * p / 100)``-th largest entry and every entry equal to it is kept,
    so ties never depend on ordering.  The result is symmetric with a zero
    diagonal.
    """
    r = fc.r if isinstance(fc, FcMatrix) else np.asarray(fc, dtype=np.float64)
    squeeze = r.ndim == 2
    if squeeze:
        r = r[None]
    n = r.shape[-1]
    iu, ju = np.triu_indices(n, k=1)
    vals = r[:, iu, ju]
    k = _edge_count(vals.shape[1], edge_percentile)
    cutoff = -np.partition(-vals, k - 1, axis=1)[:, k - 1]
    keep = vals >= cutoff[:, None]
    flat = (vals.max(axis=1) == vals.min(axis=1)) & (vals.shape[1] > 1)
    if flat.any():
        warnings.warn(
            f"{int(flat.sum())} matrix/matrices with all-equal off-diagonal values: every edge kept",
            DegenerateWarning,
            stacklevel=2,
        )
    adj = np.zeros(r.shape, dtype=np.uint8)
    adj[:, iu, ju] = keep
    adj[:, ju, iu] = keep
    return adj[0] if squeeze else adj


def windowed_correlations(ts: RoiTimeseries, cfg: WindowConfig) -> tuple[np.ndarray, np.ndarray]:
    """All window correlation matrices at once: returns (R of shape (T, N, N), window_ends)."""
    windows = sliding_windows(ts, cfg)
    n = len(windows)
    view = np.lib.stride_tricks.sliding_window_view(ts.values, cfg.gamma, axis=1)
    stack = np.swapaxes(view[:, : n * cfg.stride : cfg.stride], 0, 1)
    r, degenerate = _correlate_windows(stack)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.any(axis=1).sum())} window(s) contain zero-variance ROIs",
            DegenerateWarning,
            stacklevel=2,
        )
    ends = np.array([e for _, e in windows], dtype=np.int64)
    return r, ends


def build_dynamic_graph(ts: RoiTimeseries, cfg: WindowConfig) -> DynamicGraph:
    r, ends = windowed_correlations(ts, cfg)
    adj = threshold_adjacency(r, cfg.edge_percentile)
    return DynamicGraph(adjacency=adj, window_ends=ends, n_nodes=ts.n_rois, source=ts)


def upper_triangle(adjacency: np.ndarray) -> np.ndarray:
    """Vectorized strict upper triangle of (..., N, N) matrices."""
    n = adjacency.shape[-1]
    iu, ju = np.triu_indices(n, k=1)
    return adjacency[..., iu, ju]


# ---------------------------------------------------------------- CSV ingest

def sidecar_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_roi_csv(path: str | Path, tr_s: Optional[float] = None) -> RoiTimeseries:
    """Load a Tmax x N CSV (row 1 ROI labels, row 2 ICN labels) and its JSON sidecar."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 4:
        raise ValueError(f"{path}: expected two label rows and at least two timepoints")
    roi_labels, icn_labels = rows[0], rows[1]
    values = np.array([[float(v) for v in row] for row in rows[2:]], dtype=np.float64)
    if tr_s is None:
        side = sidecar_path(path)
        tr_s = json.loads(side.read_text())["tr_s"] if side.exists() else 0.72
    return RoiTimeseries(values.T, roi_labels, icn_labels, float(tr_s))


def write_roi_csv(ts: RoiTimeseries, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ts.roi_labels)
        writer.writerow(ts.icn_labels)
        for row in ts.values.T:
            writer.writerow([repr(float(v)) for v in row])
    sidecar_path(path).write_text(json.dumps({"tr_s": ts.repetition_time_s}) + "\n")
