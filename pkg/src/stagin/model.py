"""
Spatio-temporal attention GIN over dynamic FC graphs.

Layout convention: node features are stored node-major, one row per node, so a
graph's feature matrix is ``X`` of shape (N, D) and a batch of dynamic graphs is
(B, T, N, D).  ``X`` is the transpose of the channel-major D x N matrix used in
the usual matrix statement of GIN; weight matrices keep that statement's
orientation (``W_key`` is D x D, ``W2`` of SERO is N x D, the node-feature map
is D x (N + D)) and are applied as ``X @ W.T``.

Per timepoint ``t`` and layer ``k``::

    X0(t)   = one_hot_embedding + W_time @ eta(t)          (eta: GRU over the series)
    Xk(t)   = MLP_k(((1 + eps_k) I + A(t)) X_{k-1}(t))
    z_k(t)  = readout attention over nodes, in [0, 1]^N
    h_k(t)  = X_k(t)^T z_k(t)
    out_k   = TransformerEncoder_k(h_k(1..T))              (Z_time_k: T x T)
    h_dyn   = concat_k sum_t out_k(t)
    logits  = head(dropout(h_dyn))
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .errors import DegenerateInput, IndexOutOfRange, ShapeMismatch

READOUTS = ("garo", "sero", "mean")


@dataclass
class ModelConfig:
    n_nodes: int
    n_classes: int
    n_layers: int = 4
    hidden_dim: int = 128
    readout: str = "sero"
    lambda_ortho: float = 1e-5
    dropout_rep: float = 0.5
    dropout_attn: float = 0.1
    use_timestamp: bool = True

    def __post_init__(self):
        self.readout = self.readout.lower()
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("n_nodes", "n_classes", "n_layers", "hidden_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                out.append(f"{name} must be a positive integer, got {v}")
        if self.n_nodes < 2:
            out.append("n_nodes must be >= 2")
        if self.n_classes < 2:
            out.append("n_classes must be >= 2")
        if self.readout not in READOUTS:
            out.append(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.lambda_ortho < 0:
            out.append("lambda_ortho must be >= 0")
        for name in ("dropout_rep", "dropout_attn"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"{name} must lie in [0, 1)")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    """Learnable parameters (ordered) plus non-learnable batchnorm statistics."""

    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def sub_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.buffers.items() if k.startswith(prefix + ".")}


# ------------------------------------------------------------------ initialization

def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered parameter manifest (names and shapes)."""
    n, d, c, k_layers = cfg.n_nodes, cfg.hidden_dim, cfg.n_classes, cfg.n_layers
    shapes: list[tuple[str, tuple]] = []
    if cfg.use_timestamp:
        shapes += [("timestamp.w_ih", (3 * d, n)), ("timestamp.w_hh", (3 * d, d)),
                   ("timestamp.b_ih", (3 * d,)), ("timestamp.b_hh", (3 * d,))]
    shapes.append(("node.w", (d, n + d) if cfg.use_timestamp else (d, n)))
    for k in range(cfg.n_layers):
        g = f"gin{k}"
        shapes += [(f"{g}.eps", ()),
                   (f"{g}.lin1.w", (d, d)), (f"{g}.lin1.b", (d,)),
                   (f"{g}.bn1.gamma", (d,)), (f"{g}.bn1.beta", (d,)),
                   (f"{g}.lin2.w", (d, d)), (f"{g}.lin2.b", (d,)),
                   (f"{g}.bn2.gamma", (d,)), (f"{g}.bn2.beta", (d,))]
        r = f"readout{k}"
        if cfg.readout == "garo":
            shapes += [(f"{r}.w_key", (d, d)), (f"{r}.w_query", (d, d))]
        elif cfg.readout == "sero":
            shapes += [(f"{r}.w1", (d, d)), (f"{r}.bn.gamma", (d,)), (f"{r}.bn.beta", (d,)),
                       (f"{r}.w2", (n, d))]
        tp = f"temporal{k}"
        for proj in ("q", "k", "v", "o"):
            shapes += [(f"{tp}.w{proj}", (d, d)), (f"{tp}.b{proj}", (d,))]
        shapes += [(f"{tp}.ln1.gamma", (d,)), (f"{tp}.ln1.beta", (d,)),
                   (f"{tp}.ff1.w", (d, d)), (f"{tp}.ff1.b", (d,)),
                   (f"{tp}.ff2.w", (d, d)), (f"{tp}.ff2.b", (d,)),
                   (f"{tp}.ln2.gamma", (d,)), (f"{tp}.ln2.beta", (d,))]
    shapes += [("head.w", (c, k_layers * d)), ("head.b", (c,))]
    return shapes


def buffer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d = cfg.hidden_dim
    shapes = []
    for k in range(cfg.n_layers):
        for bn in ("bn1", "bn2"):
            shapes += [(f"gin{k}.{bn}.running_mean", (d,)), (f"gin{k}.{bn}.running_var", (d,))]
        if cfg.readout == "sero":
            shapes += [(f"readout{k}.bn.running_mean", (d,)), (f"readout{k}.bn.running_var", (d,))]
    return shapes


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Fan-in uniform weights, zero biases and eps, unit norm scales."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            value = np.ones(shape)
        elif leaf in ("beta", "eps") or leaf.startswith("b"):
            value = np.zeros(shape)
        else:
            value = _uniform(rng, shape, shape[1])
        params[name] = Tensor(value, requires_grad=True, name=name)
    buffers = {name: (np.ones(shape) if name.endswith("var") else np.zeros(shape))
               for name, shape in buffer_shapes(cfg)}
    return ModelState(cfg, params, buffers)


# ------------------------------------------------------------------ building blocks

def affine(x, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 1:
        y = ops.reshape(ops.matmul(ops.reshape(x, (1, x.shape[0])), ops.transpose(w)), (w.shape[0],))
        return ops.add(y, b) if b is not None else y
    y = ops.matmul(x, ops.transpose(w))
    return ops.add(y, b) if b is not None else y


def encode_timestamps(series, window_ends, p: dict[str, Tensor]) -> Tensor:
    """GRU hidden state at the last column of every window.

    ``series`` is (B, L, N) (time-major per subject, standardized); the GRU runs
    once from the first column and ``eta[:, t]`` is its state at column
    ``window_ends[t] - 1``.  Returns (B, T, D).
    """
    series = series if isinstance(series, Tensor) else Tensor(np.asarray(series, dtype=np.float64))
    if series.ndim == 2:
        series = ops.reshape(series, (1,) + series.shape)
    ends = np.asarray(window_ends, dtype=np.int64)
    length = series.shape[1]
    if ends.size == 0 or ends.min() < 1 or ends.max() > length:
        raise IndexOutOfRange(f"window ends must lie in [1, {length}], got {ends.min()}..{ends.max()}")
    last = int(ends.max())
    if last < length:
        series = ops.index_select(series, np.arange(last), axis=1)
    states = ops.gru(series, p["w_ih"], p["w_hh"], p["b_ih"], p["b_hh"])
    return ops.index_select(states, ends - 1, axis=1)


def node_features(eta: Optional[Tensor], w: Tensor, n_nodes: int, batch_shape=()) -> Tensor:
    """Columns ``W [e_v || eta(t)]`` laid out as rows: returns (..., N, D).

    Equivalent to ``W_left.T + 1 (W_right eta)^T`` where ``W = [W_left | W_right]``.
    With ``eta=None`` only the one-hot part is used (``w`` may then be D x N).
    """
    left = ops.transpose(ops.index_select(w, np.arange(n_nodes), axis=1))
    if eta is None:
        if batch_shape:
            return ops.add(left, np.zeros(tuple(batch_shape) + (1, w.shape[0])))
        return left
    right = ops.index_select(w, np.arange(n_nodes, w.shape[1]), axis=1)
    proj = ops.matmul(eta, ops.transpose(right))
    proj = ops.reshape(proj, proj.shape[:-1] + (1, proj.shape[-1]))
    return ops.add(left, proj)


def gin_layer(x, adj, p: dict[str, Tensor], buffers: Optional[dict[str, np.ndarray]] = None, *,
              train: bool = False, activation: Callable = ops.gelu, batchnorm: bool = True) -> Tensor:
    """Sum-aggregation GIN layer with a two-layer MLP combine.

    Propagation uses ``(1 + eps) I + A`` so that the matrix form agrees with the
    node-wise update ``h_v <- MLP((1 + eps) h_v + sum_{u in N(v)} h_u)``.
    Each affine map is followed by batchnorm then ``activation``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    adj = adj if isinstance(adj, Tensor) else Tensor(np.asarray(adj, dtype=x.data.dtype))
    if adj.shape[-1] != x.shape[-2] or adj.shape[-2] != x.shape[-2]:
        raise ShapeMismatch(f"gin_layer: features {x.shape} with adjacency {adj.shape}")
    agg = ops.add(ops.add(x, ops.mul(x, p["eps"])), ops.matmul(adj, x))
    h = affine(agg, p["lin1.w"], p["lin1.b"])
    if batchnorm:
        h = ops.batchnorm(h, p["bn1.gamma"], p["bn1.beta"], buffers["bn1.running_mean"],
                          buffers["bn1.running_var"], train=train)
    h = activation(h)
    h = affine(h, p["lin2.w"], p["lin2.b"])
    if batchnorm:
        h = ops.batchnorm(h, p["bn2.gamma"], p["bn2.beta"], buffers["bn2.running_mean"],
                          buffers["bn2.running_var"], train=train)
    return activation(h)


def readout_mean(x) -> Tensor:
    """Average of node vectors: (..., N, D) -> (..., D)."""
    return ops.reduce_mean(x, axis=-2)


def readout_sum(x) -> Tensor:
    return ops.reduce_sum(x, axis=-2)


def _attend(x: Tensor, z: Tensor, *, train: bool, rng, p_drop: float) -> Tensor:
    # z: (..., N) attention; dropout hits the attention values before pooling
    zd = ops.dropout(z, p_drop, train=train, rng=rng)
    zrow = ops.reshape(zd, zd.shape[:-1] + (1, zd.shape[-1]))
    h = ops.matmul(zrow, x)
    return ops.reshape(h, h.shape[:-2] + (h.shape[-1],))


def garo(x, p: dict[str, Tensor], *, train: bool = False, rng=None, p_drop: float = 0.0):
    """Key-query node attention with the mean-pooled graph vector as query.

    Returns ``(z_space, h_tilde)`` of shapes (..., N) and (..., D).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = x.shape[-1]
    keys = affine(x, p["w_key"])
    query = affine(ops.reduce_mean(x, axis=-2, keepdims=True), p["w_query"])
    logits = ops.scale(ops.matmul(keys, ops.transpose(query)), 1.0 / math.sqrt(d))
    z = ops.sigmoid(ops.reshape(logits, logits.shape[:-1]))
    return z, _attend(x, z, train=train, rng=rng, p_drop=p_drop)


def sero(x, p: dict[str, Tensor], buffers: dict[str, np.ndarray], *, train: bool = False,
         rng=None, p_drop: float = 0.0):
    """Squeeze-excitation node attention computed from the mean-pooled graph vector."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeezed = readout_mean(x)
    e = affine(squeezed, p["w1"])
    e = ops.batchnorm(e, p["bn.gamma"], p["bn.beta"], buffers["bn.running_mean"],
                      buffers["bn.running_var"], train=train)
    e = ops.gelu(e)
    z = ops.sigmoid(affine(e, p["w2"]))
    return z, _attend(x, z, train=train, rng=rng, p_drop=p_drop)


def ortho_loss(x, floor: Optional[float] = None) -> Tensor:
    """``|| G / max(G) - I ||_F`` with ``G`` the Gram matrix of node vectors.

    Works per matrix on stacked input (..., N, D) and returns shape (...).
    A (near) zero matrix raises DegenerateInput unless ``floor`` is given, in
    which case ``max(G)`` is clamped from below at ``floor`` instead.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    gram = ops.matmul(x, ops.transpose(x))
    m = ops.elementwise_max_reduce(gram)
    if floor is not None:
        # m + relu(floor - m) == max(m, floor)
        m = ops.add(m, ops.relu(ops.sub(Tensor(np.full(m.shape, floor)), m)))
    elif np.any(m.data <= 1e-12):
        raise DegenerateInput("orthogonal regularization needs a nonzero feature matrix")
    m = ops.reshape(m, m.shape + (1, 1))
    n = x.shape[-2]
    return ops.frobenius_norm(ops.sub(ops.div(gram, m), np.eye(n)))


def transformer_encoder(seq, p: dict[str, Tensor], *, train: bool = False, rng=None,
                        p_drop: float = 0.0):
    """Single-head post-norm encoder block over (..., T, D).

    Returns ``(out, Z_time)``; ``Z_time`` is the post-softmax attention matrix
    (..., T, T) before any attention dropout.
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    d = seq.shape[-1]
    q = affine(seq, p["wq"], p["bq"])
    k = affine(seq, p["wk"], p["bk"])
    v = affine(seq, p["wv"], p["bv"])
    scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d))
    z_time = ops.softmax_last_dim(scores)
    attended = ops.matmul(ops.dropout(z_time, p_drop, train=train, rng=rng), v)
    attended = affine(attended, p["wo"], p["bo"])
    x = ops.layernorm(ops.add(seq, attended), p["ln1.gamma"], p["ln1.beta"])
    ff = affine(ops.gelu(affine(x, p["ff1.w"], p["ff1.b"])), p["ff2.w"], p["ff2.b"])
    out = ops.layernorm(ops.add(x, ff), p["ln2.gamma"], p["ln2.beta"])
    return out, z_time


def assemble_representation(outs, *, train: bool = False, rng=None, p_drop: float = 0.0) -> Tensor:
    """Sum each layer's attended sequence over time and concatenate the layers."""
    per_layer = [ops.reduce_sum(o, axis=-2) for o in outs]
    h = per_layer[0] if len(per_layer) == 1 else ops.concat(per_layer, axis=-1)
    return ops.dropout(h, p_drop, train=train, rng=rng)


# ------------------------------------------------------------------ full model

@dataclass
class AttentionRecord:
    """Attention captured during a forward pass (batched over subjects).

    z_space : (B, K, T, N); z_time_mat : (B, K, T, T); h_dyn : (B, K*D).
    """

    z_space: np.ndarray
    z_time_mat: np.ndarray
    h_dyn: np.ndarray

    def subject(self, i: int) -> "AttentionRecord":
        return AttentionRecord(self.z_space[i], self.z_time_mat[i], self.h_dyn[i])


@dataclass
class ForwardOutput:
    logits: Tensor
    attention: AttentionRecord
    ortho: Tensor
    graph_features: list = field(default_factory=list)


def forward(adjacency, series, window_ends, state: ModelState, *, train: bool = False,
            rng: Optional[np.random.Generator] = None, keep_features: bool = False) -> ForwardOutput:
    """Run the model on a batch of dynamic graphs.

    Parameters
    ----------
    adjacency : array (B, T, N, N)
        Binary adjacency per subject and window.
    series : array (B, L, N)
        Standardized ROI signals, time-major; needed only with timestamp encoding.
    window_ends : array (T,)
        Exclusive end column of every window (shared across the batch).
    train : bool
        Batch statistics and dropout when True; deterministic when False.
    """
    cfg = state.config
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim == 3:
        adjacency = adjacency[None]
    bsz, t_len, n, _ = adjacency.shape
    if n != cfg.n_nodes:
        raise ShapeMismatch(f"graphs have {n} nodes, model expects {cfg.n_nodes}")
    if train and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    if cfg.use_timestamp:
        series = np.asarray(series, dtype=np.float64)
        if series.ndim == 2:
            series = series[None]
        if series.shape[0] != bsz or series.shape[2] != n:
            raise ShapeMismatch(f"series {series.shape} does not match graphs {adjacency.shape}")
        eta = encode_timestamps(Tensor(series), window_ends, state.sub("timestamp"))
        if eta.shape[1] != t_len:
            raise ShapeMismatch(f"{eta.shape[1]} window ends for {t_len} graphs")
        x = node_features(eta, state.params["node.w"], n)
    else:
        x = node_features(None, state.params["node.w"], n, batch_shape=(bsz, t_len))

    adj_t = Tensor(adjacency)
    outs, z_spaces, z_times, orthos, feats = [], [], [], [], []
    for k in range(cfg.n_layers):
        x = gin_layer(x, adj_t, state.sub(f"gin{k}"), state.sub_buffers(f"gin{k}"), train=train)
        if keep_features:
            feats.append(x)
        # all-identical nodes in a train batch give zero batchnorm output; floor instead of failing
        orthos.append(ortho_loss(x, floor=1e-12))
        if cfg.readout == "garo":
            z, h = garo(x, state.sub(f"readout{k}"), train=train, rng=rng, p_drop=cfg.dropout_attn)
        elif cfg.readout == "sero":
            z, h = sero(x, state.sub(f"readout{k}"), state.sub_buffers(f"readout{k}"), train=train,
                        rng=rng, p_drop=cfg.dropout_attn)
        else:
            h = readout_mean(x)
            z = Tensor(np.full((bsz, t_len, n), 1.0 / n))
        out, z_time = transformer_encoder(h, state.sub(f"temporal{k}"), train=train, rng=rng,
                                          p_drop=cfg.dropout_attn)
        outs.append(out)
        z_spaces.append(z.data)
        z_times.append(z_time.data)

    h_dyn = assemble_representation(outs, train=train, rng=rng, p_drop=cfg.dropout_rep)
    logits = affine(h_dyn, state.params["head.w"], state.params["head.b"])
    ortho = ops.reduce_mean(ops.stack(orthos, axis=0))
    record = AttentionRecord(
        z_space=np.stack(z_spaces, axis=1),
        z_time_mat=np.stack(z_times, axis=1),
        h_dyn=h_dyn.data.copy(),
    )
    return ForwardOutput(logits=logits, attention=record, ortho=ortho, graph_features=feats)


def loss_terms(output: ForwardOutput, labels, lambda_ortho: float) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(total, cross_entropy, ortho)`` with total = xent + lambda * ortho."""
    xent = ops.cross_entropy_with_logits(output.logits, labels)
    total = ops.add(xent, ops.scale(output.ortho, lambda_ortho)) if lambda_ortho else xent
    return total, xent, output.ortho


# ------------------------------------------------------------------ framelet view

@dataclass
class FrameletCheck:
    """Explicit encoder/decoder matrices of a stack of linear-or-ReLU GIN layers.

    Node vectors are stacked into ``x = Vec([x_1, ..., x_N])`` (node-major).
    Layer ``k`` maps ``Vec(H^(k-1))`` to ``Sigma^(k) E^(k)^T Vec(H^(k-1))`` with
    ``E^(k) = P_k^T kron W_k`` for propagation ``P_k = (1 + eps_k) I + A`` and
    right-multiplied weight ``W_k`` (D_in x D_out).  The channel-major stacking
    writes the same operator as ``W kron P^T``; the two differ by a fixed
    permutation.  The mean readout decodes with ``phi_mean^T kron I_D``, whose
    columns do not depend on the input.
    """

    encoders: list[np.ndarray]
    masks: list[np.ndarray]
    decoder: np.ndarray

    def features(self, x_vec: np.ndarray) -> list[np.ndarray]:
        out, v = [], x_vec
        for e, m in zip(self.encoders, self.masks):
            v = m * (e.T @ v)
            out.append(v)
        return out

    def readout(self, x_vec: np.ndarray) -> np.ndarray:
        return self.decoder @ self.features(x_vec)[-1]


def framelet_expansion(x0: np.ndarray, adjacency: np.ndarray, weights: list[np.ndarray],
                       eps: list[float], activation: str = "identity") -> FrameletCheck:
    """Build the encoder/decoder matrices for input ``x0`` (N x D0).

    ``activation`` is ``"identity"`` (all masks one) or ``"relu"`` (masks read
    off the activation pattern of a forward pass on ``x0``).
    """
    n = x0.shape[0]
    eye = np.eye(n)
    encoders, masks = [], []
    h = x0
    for w, e in zip(weights, eps):
        prop = (1.0 + e) * eye + adjacency
        pre = prop @ h @ w
        encoders.append(np.kron(prop.T, w))
        if activation == "identity":
            mask = np.ones(pre.size)
            h = pre
        elif activation == "relu":
            mask = (pre > 0).astype(np.float64).reshape(-1)
            h = np.maximum(pre, 0.0)
        else:
            raise ValueError(f"unsupported activation {activation!r}")
        masks.append(mask)
    d_out = weights[-1].shape[1]
    phi = np.full((1, n), 1.0 / n)
    return FrameletCheck(encoders, masks, np.kron(phi, np.eye(d_out)))
