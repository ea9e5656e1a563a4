"""Quick invariant checks run by ``stagin selftest``."""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import analysis as an
from .autodiff import Tensor, grad_check, ops
from .fcgraph import RoiTimeseries, WindowConfig, build_dynamic_graph, standardize
from .model import ModelConfig, forward, gin_layer, init_state, loss_terms, ortho_loss
from .train import auroc


def _gradients(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    checks = [
        lambda: ops.reduce_sum(ops.gelu(ops.matmul(x, w))),
        lambda: ops.reduce_sum(ops.mul(ops.softmax_last_dim(x), x)),
        lambda: ops.reduce_sum(ops.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))),
        lambda: ops.frobenius_norm(ops.tanh(x)),
    ]
    return max(grad_check(f, [x, w]) for f in checks)


def toy_adjacency() -> np.ndarray:
    """(2, 3, 4, 4) toy graphs for gradient checks."""
    edges = [[(0, 1), (1, 2)], [(0, 1), (2, 3), (1, 3)], [(0, 2)],
             [(1, 2), (2, 3), (0, 3)], [(0, 1), (0, 2), (0, 3)], [(1, 3), (2, 3)]]
    adj = np.zeros((6, 4, 4))
    for t, es in enumerate(edges):
        for i, j in es:
            adj[t, i, j] = adj[t, j, i] = 1.0
    return adj.reshape(2, 3, 4, 4)


def _model_grad(rng):
    cfg = ModelConfig(n_nodes=4, n_classes=2, n_layers=2, hidden_dim=8)
    state = init_state(cfg, seed=1)
    # at eps = 0 adjacent nodes with equal closed neighbourhoods get equal
    # features; the Gram max then ties and the ortho loss has a kink
    state.params["gin0.eps"].data[...] = 0.15
    state.params["gin1.eps"].data[...] = -0.1
    adj = toy_adjacency()
    series = rng.normal(size=(2, 10, 4))
    ends = np.array([4, 6, 8])
    point = [state.params["gin0.eps"], state.params["readout1.w2"], state.params["head.w"]]

    def f():
        out = forward(adj, series, ends, state, train=False)
        return loss_terms(out, [0, 1], 0.3)[0]
    return grad_check(f, point)


def _gin_equivalence(rng):
    cfg = ModelConfig(n_nodes=8, n_classes=2, n_layers=1, hidden_dim=5)
    state = init_state(cfg, seed=2)
    p, b = state.sub("gin0"), state.sub_buffers("gin0")
    p["eps"].data[...] = 0.3
    x = rng.normal(size=(8, 5))
    a = np.triu((rng.random((8, 8)) > 0.6).astype(float), 1)
    a = a + a.T
    out = gin_layer(x, a, p, b).data
    agg = np.array([(1.3) * x[v] + sum(x[u] for u in range(8) if a[v, u]) for v in range(8)])
    ref = gin_layer(agg, np.zeros((8, 8)), {**p, "eps": Tensor(np.array(0.0))}, b).data
    return float(np.abs(out - ref).max())


def _ortho(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
    return max(abs(ortho_loss(c * q.T).item()) for c in (0.1, 1.0, 10.0))


def _stochastic(rng):
    cfg = ModelConfig(n_nodes=6, n_classes=2, n_layers=2, hidden_dim=4, readout="garo")
    state = init_state(cfg, seed=3)
    ts = standardize(RoiTimeseries(rng.normal(size=(6, 40)), [str(i) for i in range(6)], ["unknown"] * 6))
    g = build_dynamic_graph(ts, WindowConfig(10, 3, 30.0))
    rec = forward(g.adjacency[None], ts.values.T[None], g.window_ends, state).attention
    rows = np.abs(rec.z_time_mat.sum(-1) - 1).max()
    cols = np.abs(an.temporal_attention_vector(rec.z_time_mat).sum(-1) - 1).max()
    inside = bool(np.all((rec.z_space >= 0) & (rec.z_space <= 1)))
    return max(rows, cols) if inside else np.inf


def _auroc(rng):
    worst = 0.0
    for _ in range(50):
        s = rng.integers(0, 5, size=12).astype(float)
        y = np.r_[np.zeros(6), np.ones(6)]
        pairs = [(1.0 if a > b else 0.5 if a == b else 0.0)
                 for a, b in itertools.product(s[y == 1], s[y == 0])]
        worst = max(worst, abs(auroc(s, y) - np.mean(pairs)))
    return worst


def _chi2(rng):
    return abs(an.chi2_sf(3.841458820694124, 1) - 0.05)


CHECKS = [
    ("primitive gradients", _gradients, 1e-4),
    ("model loss gradient", _model_grad, 1e-4),
    ("GIN matrix vs node form", _gin_equivalence, 1e-6),
    ("ortho loss on scaled orthonormal", _ortho, 1e-10),
    ("attention stochasticity", _stochastic, 1e-5),
    ("AUROC vs all pairs", _auroc, 1e-12),
    ("chi-square 0.95 quantile", _chi2, 1e-6),
]


def run_selftest(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok_all = True
    out(f"{'check':36s} {'value':>12s} {'tolerance':>10s}  result")
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        value = float(fn(rng))
        ok = value < tol
        ok_all &= ok
        out(f"{name:36s} {value:12.3e} {tol:10.0e}  {'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
    return ok_all
