"""
Command-line entry point.

Every subcommand resolves its settings as: built-in defaults, then the JSON
file given by ``--config``, then ``STAGIN_SEED`` for the seed, then explicit
flags.  The resolved settings are validated as a whole (every violation is
reported at once) and written to ``<out>/resolved_config.json``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, StaginError
from .fcgraph import WindowConfig, build_dynamic_graph, read_roi_csv, standardize
from .model import READOUTS, ModelConfig

log = logging.getLogger("stagin")

WINDOW_DEFAULTS = {"gamma": 50, "stride": 3, "edge_percentile": 30.0}
MODEL_DEFAULTS = {"n_layers": 4, "hidden_dim": 128, "readout": "sero", "lambda_ortho": 1e-5,
                  "dropout_rep": 0.5, "dropout_attn": 0.1, "use_timestamp": True}
TRAIN_DEFAULTS = {"epochs": 30, "minibatch_size": 3, "lr_base": 5e-4, "lr_peak": 1e-3,
                  "lr_final": 5e-7, "warmup_frac": 0.2, "slice_len": 600, "folds": 5}
SYNTH_DEFAULTS = {"style": "rest", "n_subjects": 200, "n_nodes": 32, "n_blocks": 4, "t_max": 400,
                  "tr_s": 0.72, "n_states": 4, "group_effect": 0.2, "occupancy_bias": 0.0,
                  "planted_state": 0, "mean_dwell": 20.0, "n_classes": 2, "noise_std": 0.5}
ANALYSIS_DEFAULTS = {"alpha": 1.0, "k": [7, 5, 3], "centered": False, "fwe_level": 0.05,
                     "percentile": 5.0, "layer": None, "continuous": False}

COMMAND_DEFAULTS = {
    "synth": {**SYNTH_DEFAULTS},
    "graphs": {**WINDOW_DEFAULTS},
    "train": {**WINDOW_DEFAULTS, **MODEL_DEFAULTS, **TRAIN_DEFAULTS, "dump_attention": True},
    "eval": {**WINDOW_DEFAULTS},
    "analyze-time": {**WINDOW_DEFAULTS, **ANALYSIS_DEFAULTS},
    "analyze-space": {**WINDOW_DEFAULTS, **ANALYSIS_DEFAULTS},
    "plot": {"subject": 0, "layer": 0, "alpha": 1.0},
    "selftest": {},
}
# keys that are paths or run plumbing, not validated settings
PLUMBING = {"command", "config", "out", "data", "checkpoint", "attention", "design", "verbose"}


def _bool(text: str) -> bool:
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x]


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors: exit code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stagin", description="Attention GIN models on dynamic functional-connectivity graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file with settings (flags override it)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    def window(sp):
        sp.add_argument("--gamma", type=int, default=None, help="window length (timepoints)")
        sp.add_argument("--stride", type=int, default=None)
        sp.add_argument("--edge-percentile", type=float, default=None)

    s = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(s)
    s.add_argument("--style", choices=("rest", "task"), default=None)
    for name, typ in (("n-subjects", int), ("n-nodes", int), ("n-blocks", int), ("t-max", int),
                      ("tr-s", float), ("n-states", int), ("group-effect", float),
                      ("occupancy-bias", float), ("planted-state", int), ("mean-dwell", float),
                      ("n-classes", int), ("noise-std", float)):
        s.add_argument(f"--{name}", type=typ, default=None)

    g = sub.add_parser("graphs", help="build dynamic graphs (DFCG files)")
    common(g)
    window(g)
    g.add_argument("--data", required=True, help="dataset manifest.json or a single ROI CSV")

    t = sub.add_parser("train", help="cross-validated training")
    common(t)
    window(t)
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--readout", choices=READOUTS, default=None)
    t.add_argument("--layers", dest="n_layers", type=int, default=None)
    t.add_argument("--hidden-dim", type=int, default=None)
    t.add_argument("--lambda-ortho", type=float, default=None)
    t.add_argument("--dropout-rep", type=float, default=None)
    t.add_argument("--dropout-attn", type=float, default=None)
    t.add_argument("--timestamp", dest="use_timestamp", type=_bool, default=None,
                   help="use the GRU timestamp encoder (true/false)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", dest="minibatch_size", type=int, default=None)
    t.add_argument("--lr-base", type=float, default=None)
    t.add_argument("--lr-peak", type=float, default=None)
    t.add_argument("--lr-final", type=float, default=None)
    t.add_argument("--warmup-frac", type=float, default=None)
    t.add_argument("--slice-len", type=int, default=None)
    t.add_argument("--folds", type=int, default=None)
    t.add_argument("--dump-attention", type=_bool, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint and dump attention")
    common(e)
    window(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)

    for name, helptext in (("analyze-time", "temporal attention -> FC-state clusters"),
                           ("analyze-space", "spatial attention -> GLM contrast")):
        a = sub.add_parser(name, help=helptext)
        common(a)
        window(a)
        a.add_argument("--data", required=True, help="dataset manifest.json")
        a.add_argument("--attention", required=True, nargs="+", help="one or more .attn files")
        a.add_argument("--alpha", type=float, default=None)
        a.add_argument("--layer", type=int, default=None)
        a.add_argument("--fwe-level", type=float, default=None)
        a.add_argument("--percentile", type=float, default=None)
        if name == "analyze-time":
            a.add_argument("--k", type=_int_list, default=None, help="comma-separated cluster counts")
            a.add_argument("--centered", type=_bool, default=None)
            a.add_argument("--continuous", type=_bool, default=None,
                           help="cluster correlation values instead of binary edges")
        else:
            a.add_argument("--design", help="design CSV (T rows, task/rest columns)")

    pl = sub.add_parser("plot", help="render attention figures for one subject")
    common(pl)
    pl.add_argument("--attention", required=True, nargs="+")
    pl.add_argument("--subject", type=int, default=None)
    pl.add_argument("--layer", type=int, default=None)
    pl.add_argument("--alpha", type=float, default=None)

    st = sub.add_parser("selftest", help="run quick invariant checks")
    common(st, out_required=False)
    return p


# ------------------------------------------------------------------ config resolution

def resolve_config(args: argparse.Namespace, environ=None) -> dict:
    """Merge defaults, the ``--config`` file, ``STAGIN_SEED`` and explicit flags."""
    environ = os.environ if environ is None else environ
    cfg: dict[str, Any] = dict(COMMAND_DEFAULTS[args.command])
    cfg["seed"] = 0
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read --config: {exc}"]) from exc
        if not isinstance(from_file, dict):
            raise ConfigError(["--config must hold a JSON object"])
        unknown = sorted(set(from_file) - set(cfg) - PLUMBING)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        cfg.update({k: v for k, v in from_file.items() if k not in PLUMBING})
    if environ.get("STAGIN_SEED"):
        try:
            cfg["seed"] = int(environ["STAGIN_SEED"])
        except ValueError as exc:
            raise ConfigError([f"STAGIN_SEED must be an integer, got {environ['STAGIN_SEED']!r}"]) from exc
    for key, value in vars(args).items():
        if key in PLUMBING or value is None:
            continue
        cfg[key] = value
    return cfg


def _collect(factory, kwargs, problems: list[str]):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.extend(str(exc).split("; "))
        return None


def _pick(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def validate(command: str, cfg: dict) -> list[str]:
    """Every violation in the resolved settings (empty when valid)."""
    from .synthdata import SynthConfig
    from .train import TrainConfig

    problems: list[str] = []
    if command in ("graphs", "train", "eval", "analyze-time", "analyze-space"):
        _collect(WindowConfig, _pick(cfg, WindowConfig), problems)
    if command == "train":
        m = {k: cfg[k] for k in MODEL_DEFAULTS}
        _collect(ModelConfig, {"n_nodes": 2, "n_classes": 2, **m}, problems)
        _collect(TrainConfig, _pick(cfg, TrainConfig), problems)
    if command == "synth":
        _collect(SynthConfig, _pick(cfg, SynthConfig), problems)
    if command in ("analyze-time", "analyze-space"):
        if cfg["alpha"] < 0:
            problems.append("alpha must be >= 0")
        if not 0 < cfg["fwe_level"] < 1:
            problems.append("fwe_level must lie in (0, 1)")
        if not 0 < cfg["percentile"] <= 100:
            problems.append("percentile must lie in (0, 100]")
        if any(k < 1 for k in cfg.get("k", [1])):
            problems.append("every k must be >= 1")
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        problems.append("seed must be a non-negative integer")
    return problems


def write_resolved(cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    return path


# ------------------------------------------------------------------ data helpers

def load_dataset(manifest_path: str | Path):
    """Read a dataset manifest; returns (Dataset of standardized series, manifest dict)."""
    from .train import Dataset

    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    series = [read_roi_csv(root / s["file"]) for s in data["subjects"]]
    labels = [s["label"] for s in data["subjects"]]
    ids = [s["id"] for s in data["subjects"]]
    return Dataset.from_raw(series, labels, ids), data


def _window(cfg: dict) -> WindowConfig:
    return WindowConfig(cfg["gamma"], cfg["stride"], cfg["edge_percentile"])


def _load_attention_files(paths):
    from .formats import load_attention

    records, subjects, meta0 = [], [], None
    for p in paths:
        recs, meta = load_attention(p)
        records += recs
        subjects += meta.get("subjects", list(range(len(recs))))
        meta0 = meta0 or meta
    return records, subjects, meta0 or {}


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: dict, args) -> int:
    from .synthdata import SynthConfig, generate_dataset

    sc = SynthConfig(**_pick(cfg, SynthConfig))
    path = generate_dataset(sc, args.out)
    print(f"wrote {sc.n_subjects} subjects and {path}")
    return 0


def cmd_graphs(cfg: dict, args) -> int:
    from .analysis import write_csv
    from .formats import save_dynamic_graph

    out = Path(args.out)
    wcfg = _window(cfg)
    data = Path(args.data)
    if data.suffix == ".json":
        ds, _ = load_dataset(data)
        items = list(zip(ds.subject_ids, ds.series))
    else:
        items = [(data.stem, standardize(read_roi_csv(data)))]
    rows = []
    for sid, ts in items:
        g = build_dynamic_graph(ts, wcfg)
        save_dynamic_graph(g, out / f"{sid}.dfcg")
        rows.append((sid, g.n_windows, g.n_nodes, float(g.adjacency.mean(axis=0).sum() / (g.n_nodes * (g.n_nodes - 1)))))
    write_csv(out / "graphs.csv", ["subject", "n_windows", "n_nodes", "density"], rows)
    ends = build_dynamic_graph(items[0][1], wcfg).window_ends
    write_csv(out / "window_ends.csv", ["window", "end"], enumerate(ends.tolist()))
    print(f"{len(rows)} subject(s), {rows[0][1]} graphs each")
    return 0


def cmd_train(cfg: dict, args) -> int:
    from .formats import save_attention, save_checkpoint
    from .train import TrainConfig, predict, stratified_kfold, train_model

    out = Path(args.out)
    ds, _ = load_dataset(args.data)
    wcfg = _window(cfg)
    mcfg = ModelConfig(n_nodes=ds.n_nodes, n_classes=ds.n_classes, **{k: cfg[k] for k in MODEL_DEFAULTS})
    tcfg = TrainConfig(seed=cfg["seed"], **{k: cfg[k] for k in TRAIN_DEFAULTS})
    result = train_model(ds, mcfg, tcfg, wcfg, metrics_path=out / "metrics.jsonl")
    split = stratified_kfold(ds.labels, tcfg.folds, tcfg.seed)
    for fr in result.folds:
        meta = {"seed": cfg["seed"], "fold": fr.fold, "test_indices": split.test[fr.fold].tolist(),
                "window": {"gamma": wcfg.gamma, "stride": wcfg.stride, "edge_percentile": wcfg.edge_percentile}}
        save_checkpoint(fr.state, out / f"fold{fr.fold}.stgn", meta)
        if cfg["dump_attention"]:
            _, recs = predict(fr.state, ds, fr.test_indices, wcfg)
            save_attention(recs, out / f"fold{fr.fold}.attn",
                           {"seed": cfg["seed"], "fold": fr.fold, "subjects": fr.test_indices.tolist()})
    summary = result.summary()
    summary["seed"] = cfg["seed"]
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"accuracy {summary['acc_mean']:.4f} +/- {summary['acc_std']:.4f}   "
          f"auroc {summary['auroc_mean']:.4f} +/- {summary['auroc_std']:.4f}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    from .analysis import write_csv
    from .formats import load_checkpoint, save_attention
    from .train import multiclass_auroc, predict
    from .errors import SingleClass

    out = Path(args.out)
    ds, _ = load_dataset(args.data)
    state, meta = load_checkpoint(args.checkpoint)
    idx = np.asarray(meta.get("test_indices", range(len(ds.series))), dtype=np.int64)
    probs, recs = predict(state, ds, idx, _window(cfg))
    y = ds.labels[idx]
    pred = probs.argmax(axis=1)
    acc = float(np.mean(pred == y))
    try:
        au = multiclass_auroc(probs, y)
    except SingleClass:
        au = None
    write_csv(out / "predictions.csv", ["subject", "label", "prediction"] + [f"p{c}" for c in range(probs.shape[1])],
              ([ds.subject_ids[i], int(y[j]), int(pred[j])] + [float(v) for v in probs[j]] for j, i in enumerate(idx)))
    save_attention(recs, out / "eval.attn", {"seed": cfg["seed"], "subjects": idx.tolist()})
    (out / "metrics.json").write_text(json.dumps({"acc": acc, "auroc": au, "n": int(len(idx)),
                                                  "seed": cfg["seed"]}, sort_keys=True) + "\n")
    print(f"accuracy {acc:.4f}  auroc {au if au is None else round(au, 4)}  on {len(idx)} subjects")
    return 0


def cmd_analyze_time(cfg: dict, args) -> int:
    from . import analysis as an
    from .fcgraph import windowed_correlations
    from .plotting import plot_group_ratios

    out = Path(args.out)
    ds, _ = load_dataset(args.data)
    records, subjects, _ = _load_attention_files(args.attention)
    wcfg = _window(cfg)
    adjs = [build_dynamic_graph(ds.series[i], wcfg).adjacency for i in subjects]
    feats = [windowed_correlations(ds.series[i], wcfg)[0] for i in subjects] if cfg["continuous"] else None
    groups = ds.labels[subjects]
    rows = []
    for k in cfg["k"]:
        res = an.rest_pipeline(records, adjs, groups, k=k, alpha=cfg["alpha"], seed=cfg["seed"],
                               layer=cfg["layer"], centered=cfg["centered"], features=feats)
        an.write_ratio_table(out / f"cluster_ratio_k{k}.csv", res.table)
        plot_group_ratios(res.table, out / f"cluster_ratio_k{k}.svg")
        stat, dof, p = res.chi2
        rows.append((k, res.n_attended, stat, dof, p))
        print(f"k={k}: {res.n_attended} attended windows, chi2={stat:.3f} dof={dof} p={p:.3g}")
    an.write_csv(out / "chi_square.csv", ["k", "n_attended", "statistic", "dof", "p"], rows)
    return 0


def cmd_analyze_space(cfg: dict, args) -> int:
    from . import analysis as an
    from .plotting import plot_bars

    out = Path(args.out)
    ds, manifest = load_dataset(args.data)
    records, subjects, _ = _load_attention_files(args.attention)
    wcfg = _window(cfg)
    ends = build_dynamic_graph(ds.series[subjects[0]], wcfg).window_ends
    if args.design:
        design = an.read_design_csv(args.design)
    else:
        indicator = np.asarray(manifest["truth"]["task_indicator"])
        design = an.window_design(indicator, ends, wcfg.gamma)
    layers = range(records[0].z_space.shape[0]) if cfg["layer"] is None else [cfg["layer"]]
    roi = ds.series[0].roi_labels
    icn = ds.series[0].icn_labels
    for k in layers:
        seqs = [r.z_space[k] for r in records]
        res = an.task_pipeline(seqs, design, icn, level=cfg["fwe_level"])
        an.write_glm_table(out / f"glm_layer{k}.csv", res.glm, roi, icn)
        an.write_icn_table(out / f"icn_proportion_layer{k}.csv", res.proportions)
        plot_bars(list(res.proportions), list(res.proportions.values()), out / f"icn_proportion_layer{k}.svg",
                  ylabel="proportion")
        top = an.top_percentile_nodes(an.mean_spatial_attention(np.stack(seqs)).mean(axis=0), cfg["percentile"])
        an.write_csv(out / f"top_attention_layer{k}.csv", ["rank", "roi", "icn"],
                     ((r, roi[i], icn[i]) for r, i in enumerate(top)))
        print(f"layer {k}: {len(res.glm.significant)} significant ROIs")
    return 0


def cmd_plot(cfg: dict, args) -> int:
    from .analysis import attended_timepoints, temporal_attention_vector
    from .plotting import plot_time_attention_matrix, plot_time_attention_vector

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, subjects, _ = _load_attention_files(args.attention)
    i, k = cfg["subject"], cfg["layer"]
    if not 0 <= i < len(records):
        raise ConfigError([f"subject {i} outside [0, {len(records)})"])
    rec = records[i]
    plot_time_attention_matrix(rec.z_time_mat[k], out / f"z_time_matrix_s{i}_l{k}.svg")
    zt = temporal_attention_vector(rec.z_time_mat)
    plot_time_attention_vector(zt, out / f"z_time_s{i}.svg", threshold=cfg["alpha"] * zt[k].std(ddof=1))
    idx, _ = attended_timepoints(zt[k], cfg["alpha"])
    print(f"subject {subjects[i]} layer {k}: {len(idx)} attended windows of {zt.shape[1]}")
    return 0


def cmd_selftest(cfg: dict, args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(seed=cfg["seed"]) else 2


COMMANDS = {"synth": cmd_synth, "graphs": cmd_graphs, "train": cmd_train, "eval": cmd_eval,
            "analyze-time": cmd_analyze_time, "analyze-space": cmd_analyze_space, "plot": cmd_plot,
            "selftest": cmd_selftest}


def main(argv: Optional[list[str]] = None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        problems = validate(args.command, cfg)
        if problems:
            raise ConfigError(problems)
        if args.out:
            write_resolved({"command": args.command, **cfg}, Path(args.out))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return 1
    except (StaginError, OSError, KeyError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
