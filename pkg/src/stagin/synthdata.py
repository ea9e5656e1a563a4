"""
Planted-signal synthetic datasets with known ground truth.

Nodes are split into equal blocks ("networks").  Each latent state has a
block-structured correlation template; a subject's signal at time ``t`` is a
Gaussian draw from the active state's covariance plus white noise.

Two dataset styles are produced:

``rest``
    States switch by a Markov dwell process.  Subjects fall in two groups
    (+1 / -1); group +1 has the planted between-block coupling raised by
    ``group_effect`` and, optionally, a preference for ``planted_state``.
``task``
    All subjects share a block schedule of task and rest periods.  During task
    blocks the class-specific template is active, otherwise a common rest
    template.  The class label is the prediction target.

:func:`attention_glm_dataset` generates spatial-attention sequences directly
for the GLM recovery check.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NotSPD
from .fcgraph import ICN_NAMES, RoiTimeseries, write_roi_csv

MIN_EIG = 1e-6
BLOCK_ICNS = ("DMN", "SMN", "VN", "DAN", "CCN", "LN", "SVN")


@dataclass
class SynthConfig:
    """Generator settings.  ``style`` is ``"rest"`` or ``"task"``."""

    n_subjects: int = 200
    n_nodes: int = 32
    n_blocks: int = 4
    t_max: int = 400
    tr_s: float = 0.72
    n_states: int = 4
    style: str = "rest"
    rho_in: float = 0.6
    rho_low: float = 0.2
    rho_out: float = 0.1
    group_effect: float = 0.2
    planted_blocks: tuple = (0, 1)
    occupancy_bias: float = 0.0
    planted_state: int = 0
    mean_dwell: float = 20.0
    n_classes: int = 2
    task_schedule: Optional[list] = None
    task_coupling: float = 0.5
    noise_std: float = 0.5
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        for name in ("n_subjects", "n_nodes", "n_blocks", "t_max", "n_states", "n_classes"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.n_nodes % max(self.n_blocks, 1):
            out.append("n_nodes must be divisible by n_blocks")
        if self.n_blocks > len(BLOCK_ICNS):
            out.append(f"at most {len(BLOCK_ICNS)} blocks")
        if self.style not in ("rest", "task"):
            out.append("style must be 'rest' or 'task'")
        if self.group_effect < 0:
            out.append("group_effect must be >= 0")
        if not 0 <= self.occupancy_bias < 1:
            out.append("occupancy_bias must lie in [0, 1)")
        if self.mean_dwell < 1:
            out.append("mean_dwell must be >= 1")
        if self.noise_std < 0:
            out.append("noise_std must be >= 0")
        if not self.tr_s > 0:
            out.append("tr_s must be positive")
        for name in ("rho_in", "rho_low", "rho_out", "task_coupling"):
            if not -1 < getattr(self, name) < 1:
                out.append(f"{name} must lie in (-1, 1)")
        if len(self.planted_blocks) != 2 or max(self.planted_blocks) >= self.n_blocks:
            out.append("planted_blocks must name two existing blocks")
        if not 0 <= self.planted_state < self.n_states:
            out.append("planted_state out of range")
        return out

    def __post_init__(self):
        self.planted_blocks = tuple(self.planted_blocks)
        if self.task_schedule is not None:
            self.task_schedule = [tuple(b) for b in self.task_schedule]
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def block_size(self) -> int:
        return self.n_nodes // self.n_blocks

    def schedule(self) -> list[tuple[str, int, int]]:
        """Task blocks as (label, onset, duration); default alternates 30 on / 30 off."""
        if self.task_schedule is not None:
            return list(self.task_schedule)
        return [("task", onset, 30) for onset in range(20, self.t_max - 30 + 1, 60)]


@dataclass
class GroundTruth:
    """What the generator planted for one dataset."""

    labels: list[int]
    groups: list[int]
    states: list[list[int]]
    task_indicator: list[int]
    block_of_node: list[int]
    responsive_nodes: list[int]
    subject_ids: list[str]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


# ------------------------------------------------------------------ templates

def block_of_node(cfg: SynthConfig) -> np.ndarray:
    return np.repeat(np.arange(cfg.n_blocks), cfg.block_size)


def node_labels(cfg: SynthConfig) -> tuple[list[str], list[str]]:
    blocks = block_of_node(cfg)
    rois = [f"roi{i:03d}" for i in range(cfg.n_nodes)]
    icns = [BLOCK_ICNS[b] if BLOCK_ICNS[b] in ICN_NAMES else "unknown" for b in blocks]
    return rois, icns


def ensure_spd(c: np.ndarray, min_eig: float = MIN_EIG) -> np.ndarray:
    """Diagonal loading until the smallest eigenvalue exceeds ``min_eig``."""
    c = 0.5 * (c + c.T)
    if not np.all(np.isfinite(c)):
        raise NotSPD("template has non-finite entries")
    lo = np.linalg.eigvalsh(c)[0]
    if lo <= min_eig:
        c = c + (2 * min_eig - lo) * np.eye(len(c))
        lo = np.linalg.eigvalsh(c)[0]
        if lo <= min_eig:
            raise NotSPD(f"diagonal loading left minimum eigenvalue {lo:.3g}")
    return c


def block_template(cfg: SynthConfig, strong_blocks, coupled_pairs=(), coupling: float = 0.0) -> np.ndarray:
    """Correlation matrix: ``rho_in`` inside strong blocks, ``rho_low`` inside the
    others, ``rho_out`` between blocks, ``coupling`` on the listed block pairs."""
    blocks = block_of_node(cfg)
    same = blocks[:, None] == blocks[None, :]
    strong = np.isin(blocks, list(strong_blocks))
    c = np.where(same, cfg.rho_low, cfg.rho_out)
    c[same & strong[:, None]] = cfg.rho_in
    for a, b in coupled_pairs:
        mask = (blocks[:, None] == a) & (blocks[None, :] == b)
        c[mask | mask.T] = coupling
    np.fill_diagonal(c, 1.0)
    return c


def plant_group_effect(template: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Raise the planted between-block coupling by ``group_effect`` (capped below 0.95)."""
    blocks = block_of_node(cfg)
    a, b = cfg.planted_blocks
    mask = (blocks[:, None] == a) & (blocks[None, :] == b)
    mask = mask | mask.T
    out = template.copy()
    out[mask] = np.minimum(out[mask] + cfg.group_effect, 0.949)
    return out


def make_templates(cfg: SynthConfig) -> dict[str, list[np.ndarray]]:
    """Covariance templates keyed by condition.

    rest style: ``{"group0": [...], "group1": [...]}`` with ``n_states`` matrices
    each; state ``s`` makes blocks ``s`` and ``s+1`` (mod n_blocks) strong.
    task style: ``{"rest": [one], "class0": [one], ...}``; class ``c`` couples
    block ``c`` with block ``c + n_blocks//2``.
    """
    nb = cfg.n_blocks
    if cfg.style == "rest":
        base = [block_template(cfg, {s % nb, (s + 1) % nb}) for s in range(cfg.n_states)]
        return {"group0": [ensure_spd(t) for t in base],
                "group1": [ensure_spd(plant_group_effect(t, cfg)) for t in base]}
    out = {"rest": [ensure_spd(block_template(cfg, set()))]}
    for c in range(cfg.n_classes):
        a, b = c % nb, (c + nb // 2) % nb
        pairs = [(a, b)] if a != b else []
        out[f"class{c}"] = [ensure_spd(block_template(cfg, {a, b}, pairs, cfg.task_coupling))]
    return out


def responsive_nodes(cfg: SynthConfig) -> list[int]:
    """Nodes whose coupling changes in task blocks (union over classes)."""
    if cfg.style != "task":
        return []
    blocks = block_of_node(cfg)
    nb = cfg.n_blocks
    used = {c % nb for c in range(cfg.n_classes)} | {(c + nb // 2) % nb for c in range(cfg.n_classes)}
    return [int(i) for i in np.flatnonzero(np.isin(blocks, sorted(used)))]


# ------------------------------------------------------------------ state sequences

def markov_states(cfg: SynthConfig, rng: np.random.Generator, prefer: Optional[int] = None) -> np.ndarray:
    """Piecewise-constant state path with geometric dwell times.

    On a switch the next state is drawn uniformly from the others, except that
    with probability ``occupancy_bias`` the preferred state is chosen.
    """
    stay = 1.0 - 1.0 / cfg.mean_dwell
    states = np.empty(cfg.t_max, dtype=np.int64)
    s = int(rng.integers(cfg.n_states))
    for t in range(cfg.t_max):
        if t and cfg.n_states > 1 and rng.random() > stay:
            others = [x for x in range(cfg.n_states) if x != s]
            if prefer is not None and prefer != s and rng.random() < cfg.occupancy_bias:
                s = prefer
            else:
                s = int(rng.choice(others))
        states[t] = s
    return states


def task_indicator(cfg: SynthConfig) -> np.ndarray:
    ind = np.zeros(cfg.t_max, dtype=np.int64)
    for _, onset, duration in cfg.schedule():
        ind[int(onset):int(onset) + int(duration)] = 1
    return ind


def window_task_indicator(indicator: np.ndarray, window_ends: np.ndarray, gamma: int) -> np.ndarray:
    """1 where most of a window's timepoints lie in task blocks."""
    return np.array([int(indicator[e - gamma:e].mean() > 0.5) for e in window_ends])


# ------------------------------------------------------------------ simulation

def simulate_subject(templates: list[np.ndarray], states: np.ndarray, cfg: SynthConfig,
                     seed: int) -> RoiTimeseries:
    """Gaussian draws from the active template's covariance plus white noise."""
    rng = np.random.default_rng(seed)
    chols = [np.linalg.cholesky(t) for t in templates]
    draws = rng.standard_normal((cfg.t_max, cfg.n_nodes))
    noise = rng.standard_normal((cfg.t_max, cfg.n_nodes)) * cfg.noise_std
    x = np.empty((cfg.t_max, cfg.n_nodes))
    for s, chol in enumerate(chols):
        sel = states == s
        x[sel] = draws[sel] @ chol.T
    rois, icns = node_labels(cfg)
    return RoiTimeseries((x + noise).T, rois, icns, cfg.tr_s)


def _balanced(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate(cfg: SynthConfig) -> tuple[list[RoiTimeseries], GroundTruth]:
    """In-memory dataset: subject series and ground truth."""
    rng = np.random.default_rng(cfg.seed)
    templates = make_templates(cfg)
    series, states_all, labels, groups = [], [], [], []
    indicator = task_indicator(cfg) if cfg.style == "task" else np.zeros(cfg.t_max, np.int64)
    if cfg.style == "rest":
        labels_arr = _balanced(cfg.n_subjects, 2, rng)
    else:
        labels_arr = _balanced(cfg.n_subjects, cfg.n_classes, rng)
    for i in range(cfg.n_subjects):
        seed = cfg.seed + i
        label = int(labels_arr[i])
        if cfg.style == "rest":
            sub_rng = np.random.default_rng([seed, 1])
            prefer = cfg.planted_state if label == 1 and cfg.occupancy_bias > 0 else None
            states = markov_states(cfg, sub_rng, prefer)
            temps = templates[f"group{label}"]
            groups.append(1 if label == 1 else -1)
        else:
            # state 0 = rest template, state 1 = this class's task template
            states = indicator.copy()
            temps = templates["rest"] + templates[f"class{label}"]
            groups.append(label)
        series.append(simulate_subject(temps, states, cfg, seed))
        states_all.append(states.tolist())
        labels.append(label)
    truth = GroundTruth(
        labels=labels, groups=groups, states=states_all, task_indicator=indicator.tolist(),
        block_of_node=block_of_node(cfg).tolist(), responsive_nodes=responsive_nodes(cfg),
        subject_ids=[f"sub-{i:04d}" for i in range(cfg.n_subjects)],
    )
    return series, truth


def config_to_json(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["planted_blocks"] = list(cfg.planted_blocks)
    if cfg.task_schedule is not None:
        d["task_schedule"] = [list(b) for b in cfg.task_schedule]
    return d


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write one CSV (+ sidecar) per subject and ``manifest.json``; returns the manifest path.

    Manifest schema::

        {"config": {...SynthConfig...},
         "subjects": [{"id", "file", "label"}, ...],
         "truth": {...GroundTruth...}}
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, truth = generate(cfg)
    subjects = []
    for sid, ts, label in zip(truth.subject_ids, series, truth.labels):
        name = f"{sid}.csv"
        write_roi_csv(ts, out_dir / name)
        subjects.append({"id": sid, "file": name, "label": label})
    manifest = {"config": config_to_json(cfg), "subjects": subjects, "truth": truth.to_json()}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> tuple[SynthConfig, GroundTruth, list[dict]]:
    data = json.loads(Path(path).read_text())
    return SynthConfig(**data["config"]), GroundTruth.from_json(data["truth"]), data["subjects"]


# ------------------------------------------------------------------ attention-level generator

@dataclass
class AttentionGlmData:
    z_space: np.ndarray          # (S, T, N) in [0, 1]
    design: np.ndarray           # (T, 2) task / rest indicator columns
    responsive: list[int]
    icn_labels: list[str] = field(default_factory=list)


def attention_glm_dataset(n_subjects: int = 50, n_nodes: int = 32, t_len: int = 120,
                          responsive: Optional[list[int]] = None, effect: float = 0.15,
                          noise_std: float = 0.1, block: int = 15, seed: int = 0) -> AttentionGlmData:
    """Spatial-attention sequences with planted task-locked increases.

    Each node's attention is ``sigmoid(b + effect' * task(t) + noise)`` where
    ``effect'`` is nonzero only for ``responsive`` nodes.  The subject baseline
    ``b`` varies per node so that raw levels carry no information.
    """
    rng = np.random.default_rng(seed)
    responsive = list(range(4)) if responsive is None else list(responsive)
    task = ((np.arange(t_len) // block) % 2 == 1).astype(np.float64)
    design = np.stack([task, 1.0 - task], axis=1)
    z = np.empty((n_subjects, t_len, n_nodes))
    gain = np.zeros(n_nodes)
    gain[responsive] = 1.0
    for s in range(n_subjects):
        base = rng.normal(0.0, 0.5, size=n_nodes)
        amp = effect * (1.0 + 0.3 * rng.standard_normal(n_nodes)) * gain * 4.0
        logits = base[None, :] + task[:, None] * amp[None, :] + noise_std * 4.0 * rng.standard_normal((t_len, n_nodes))
        z[s] = 1.0 / (1.0 + np.exp(-logits))
    cfg = SynthConfig(n_subjects=1, n_nodes=n_nodes, n_blocks=4 if n_nodes % 4 == 0 else 1)
    return AttentionGlmData(z, design, responsive, node_labels(cfg)[1])
