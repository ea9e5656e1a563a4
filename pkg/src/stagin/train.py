"""
Supervised training with cross-validation.

The objective is ``cross_entropy + lambda * ortho``.  Learning rate follows a
one-cycle schedule (linear warmup, cosine decay) driving an Adam update.
Training batches are random fixed-length time slices of the subjects' series;
evaluation runs on the unsliced series.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import grad
from .errors import ClassTooSmall, OutOfRange, ShapeMismatch, SingleClass, SliceTooLong
from .fcgraph import RoiTimeseries, WindowConfig, build_dynamic_graph, standardize
from .model import ModelConfig, ModelState, forward, init_state, loss_terms

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    minibatch_size: int = 3
    lr_base: float = 5e-4
    lr_peak: float = 1e-3
    lr_final: float = 5e-7
    warmup_frac: float = 0.2
    slice_len: Optional[int] = 600
    folds: int = 5
    seed: int = 0
    eval_every_epoch: bool = True

    def violations(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.minibatch_size < 1:
            out.append("minibatch_size must be >= 1")
        if not 0 < self.warmup_frac < 1:
            out.append("warmup_frac must lie in (0, 1)")
        if not 0 < self.lr_final < self.lr_base < self.lr_peak:
            out.append("need 0 < lr_final < lr_base < lr_peak")
        if self.slice_len is not None and self.slice_len < 2:
            out.append("slice_len must be >= 2")
        if self.folds < 2:
            out.append("folds must be >= 2")
        return out

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))


# ------------------------------------------------------------------ schedule & optimizer

def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp base->peak over the warmup fraction, then cosine decay peak->final.

    The last step (``total_steps - 1``) lands exactly on ``lr_final``.
    """
    if not 0 <= step < total_steps:
        raise OutOfRange(f"step {step} outside [0, {total_steps})")
    warm = int(round(cfg.warmup_frac * total_steps))
    if step < warm:
        return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * step / warm
    span = total_steps - 1 - warm
    if span <= 0:
        return cfg.lr_final if step == total_steps - 1 and warm > 0 else cfg.lr_peak
    progress = (step - warm) / span
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, lr: float, state: AdamState):
    """Bias-corrected Adam update applied in place to ``params`` (Tensors)."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ------------------------------------------------------------------ data handling

def random_time_slice(ts: RoiTimeseries, slice_len: int, rng: np.random.Generator) -> RoiTimeseries:
    if slice_len > ts.t_max:
        raise SliceTooLong(f"slice of {slice_len} from a series of {ts.t_max}")
    start = int(rng.integers(0, ts.t_max - slice_len + 1))
    return ts.with_values(ts.values[:, start:start + slice_len])


@dataclass
class FoldSplit:
    train: list[np.ndarray]
    test: list[np.ndarray]
    class_counts: list[dict]


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldSplit:
    """Deal each class's shuffled members round-robin into ``k`` folds.

    The dealing offset carries over between classes so fold sizes stay within
    one of each other, and every fold holds floor or ceil of ``n_c / k`` members
    of class ``c``.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ClassTooSmall("stratified splitting needs at least two classes")
    small = [(c, n) for c, n in zip(classes, counts) if n < k]
    if small:
        raise ClassTooSmall(f"classes with fewer than k={k} members: {small}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        fold_of[members] = (offset + np.arange(len(members))) % k
        offset += len(members)
    train, test, counts_out = [], [], []
    for f in range(k):
        test_idx = np.flatnonzero(fold_of == f)
        train_idx = np.flatnonzero(fold_of != f)
        test.append(test_idx)
        train.append(train_idx)
        counts_out.append({
            "train": {int(c): int(np.sum(labels[train_idx] == c)) for c in classes},
            "test": {int(c): int(np.sum(labels[test_idx] == c)) for c in classes},
        })
    return FoldSplit(train, test, counts_out)


@dataclass
class Dataset:
    """Standardized subject series with integer class labels."""

    series: list[RoiTimeseries]
    labels: np.ndarray
    subject_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.series:
            raise ValueError("dataset is empty")
        if len(self.series) != len(self.labels):
            raise ValueError("one label per subject required")
        n = {s.n_rois for s in self.series}
        if len(n) != 1:
            raise ShapeMismatch(f"subjects disagree on node count: {sorted(n)}")
        if not self.subject_ids:
            self.subject_ids = [f"sub-{i:04d}" for i in range(len(self.series))]

    @classmethod
    def from_raw(cls, series: Sequence[RoiTimeseries], labels, subject_ids=None) -> "Dataset":
        return cls([standardize(s) for s in series], labels, list(subject_ids or []))

    @property
    def n_nodes(self) -> int:
        return self.series[0].n_rois

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def make_batch(series: Sequence[RoiTimeseries], wcfg: WindowConfig):
    """Stack equal-length subjects into (adjacency, series, window_ends)."""
    graphs = [build_dynamic_graph(s, wcfg) for s in series]
    lengths = {s.t_max for s in series}
    if len(lengths) != 1:
        raise ShapeMismatch(f"batch mixes series lengths {sorted(lengths)}")
    adjacency = np.stack([g.adjacency for g in graphs]).astype(np.float64)
    stacked = np.stack([s.values.T for s in series])
    return adjacency, stacked, graphs[0].window_ends


# ------------------------------------------------------------------ metrics

def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (midranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUROC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def multiclass_auroc(probs: np.ndarray, labels) -> float:
    """Binary AUROC on class-1 probability, or macro one-vs-rest for C > 2."""
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], labels)
    vals = [auroc(probs[:, c], (labels == c).astype(int))
            for c in range(probs.shape[1]) if 0 < np.sum(labels == c) < len(labels)]
    if not vals:
        raise SingleClass("AUROC needs at least two classes present")
    return float(np.mean(vals))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ loops

def predict(state: ModelState, dataset: Dataset, indices, wcfg: WindowConfig, batch_size: int = 16):
    """Eval-mode forward on the unsliced series.  Returns (probs, attention records)."""
    indices = np.asarray(indices)
    probs = np.zeros((len(indices), state.config.n_classes))
    records = [None] * len(indices)
    by_len: dict[int, list[int]] = {}
    for pos, i in enumerate(indices):
        by_len.setdefault(dataset.series[i].t_max, []).append(pos)
    for positions in by_len.values():
        for start in range(0, len(positions), batch_size):
            chunk = positions[start:start + batch_size]
            adj, series, ends = make_batch([dataset.series[indices[p]] for p in chunk], wcfg)
            out = forward(adj, series, ends, state, train=False)
            probs[chunk] = softmax_np(out.logits.data)
            for j, p in enumerate(chunk):
                records[p] = out.attention.subject(j)
    return probs, records


@dataclass
class FoldResult:
    fold: int
    state: ModelState
    test_indices: np.ndarray
    probs: np.ndarray
    acc: float
    auroc: float


@dataclass
class TrainResult:
    folds: list[FoldResult]
    records: list[dict]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.acc for f in self.folds])

    @property
    def aurocs(self) -> np.ndarray:
        return np.array([f.auroc for f in self.folds])

    def summary(self) -> dict:
        acc, au = self.accuracies, self.aurocs
        return {"acc_mean": float(acc.mean()), "acc_std": float(acc.std()),
                "auroc_mean": float(au.mean()), "auroc_std": float(au.std()),
                "per_fold": [{"fold": f.fold, "acc": f.acc, "auroc": f.auroc} for f in self.folds]}


def _evaluate(state, dataset, test_idx, wcfg):
    probs, _ = predict(state, dataset, test_idx, wcfg)
    y = dataset.labels[test_idx]
    acc = float(np.mean(probs.argmax(axis=1) == y))
    try:
        au = multiclass_auroc(probs, y)
    except SingleClass:
        au = float("nan")
    return probs, acc, au


def train_fold(dataset: Dataset, train_idx, test_idx, model_cfg: ModelConfig, train_cfg: TrainConfig,
               wcfg: WindowConfig, fold: int = 0, on_record=None) -> FoldResult:
    seed = train_cfg.seed
    state = init_state(model_cfg, seed=seed * 1000 + fold)
    rng = np.random.default_rng([seed, fold])
    params = state.parameters()
    adam = AdamState()
    steps_per_epoch = math.ceil(len(train_idx) / train_cfg.minibatch_size)
    total = steps_per_epoch * train_cfg.epochs
    step = 0
    probs, acc, au = None, float("nan"), float("nan")
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        sums = np.zeros(3)
        lr = train_cfg.lr_base
        for start in range(0, len(order), train_cfg.minibatch_size):
            idx = order[start:start + train_cfg.minibatch_size]
            subjects = [dataset.series[i] for i in idx]
            if train_cfg.slice_len is not None:
                length = min(train_cfg.slice_len, min(s.t_max for s in subjects))
                subjects = [random_time_slice(s, length, rng) for s in subjects]
            adj, series, ends = make_batch(subjects, wcfg)
            out = forward(adj, series, ends, state, train=True, rng=rng)
            total_loss, xent, ortho = loss_terms(out, dataset.labels[idx], model_cfg.lambda_ortho)
            grads = grad(total_loss, params)
            lr = one_cycle_lr(step, total, train_cfg)
            adam_step(params, grads, lr, adam)
            sums += (xent.item(), ortho.item(), 1.0)
            step += 1
        loss_xent, loss_ortho = sums[0] / sums[2], sums[1] / sums[2]
        last = epoch == train_cfg.epochs - 1
        if train_cfg.eval_every_epoch or last:
            probs, acc, au = _evaluate(state, dataset, test_idx, wcfg)
        record = {"fold": fold, "epoch": epoch, "lr": lr, "loss_xent": loss_xent,
                  "loss_ortho": loss_ortho,
                  "loss": loss_xent + model_cfg.lambda_ortho * loss_ortho,
                  "acc": acc if (train_cfg.eval_every_epoch or last) else None,
                  "auroc": au if (train_cfg.eval_every_epoch or last) else None}
        log.info("fold %d epoch %d  xent %.4f  ortho %.4f  acc %.3f  auroc %.3f  (%.1fs)",
                 fold, epoch, loss_xent, loss_ortho, acc, au, time.perf_counter() - t0)
        if on_record is not None:
            on_record(record)
    return FoldResult(fold, state, np.asarray(test_idx), probs, acc, au)


def train_model(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                wcfg: Optional[WindowConfig] = None, metrics_path: Optional[str | Path] = None,
                folds: Optional[Sequence[int]] = None) -> TrainResult:
    """Stratified k-fold training; returns per-fold states and metrics.

    Each fold trains from its own seeded initialization and is evaluated on
    its held-out subjects after every epoch (reporting only; no early stopping).
    """
    wcfg = wcfg or WindowConfig()
    if model_cfg.n_nodes != dataset.n_nodes:
        raise ShapeMismatch(f"model expects {model_cfg.n_nodes} nodes, data has {dataset.n_nodes}")
    split = stratified_kfold(dataset.labels, train_cfg.folds, train_cfg.seed)
    records: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        def on_record(rec):
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()

        results = []
        for f in (folds if folds is not None else range(train_cfg.folds)):
            results.append(train_fold(dataset, split.train[f], split.test[f], model_cfg, train_cfg,
                                      wcfg, fold=f, on_record=on_record))
    finally:
        if sink:
            sink.close()
    return TrainResult(results, records)


def config_dict(cfg) -> dict:
    return asdict(cfg)
