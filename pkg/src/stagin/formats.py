"""
Binary file formats.

DFCG (dynamic graph)::

    b"DFCG" | version u32 | N u32 | T u32 | T x packed upper triangle

  Each upper triangle holds the N(N-1)/2 strict upper-triangle bits of one
  adjacency matrix in row-major order, packed least-significant-bit first and
  padded to a whole byte.

STGN (checkpoint) and ATTN (attention dump) share one container::

    magic (4 bytes) | version u32 | header length u32 | JSON header | float32 blobs

  The JSON header is UTF-8 with sorted keys and holds a ``manifest`` list of
  ``{"name", "shape", "kind"}`` entries; blobs follow in manifest order as
  little-endian float32.  All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .fcgraph import DynamicGraph
from .model import AttentionRecord, ModelConfig, ModelState, buffer_shapes, parameter_shapes

DFCG_MAGIC = b"DFCG"
STGN_MAGIC = b"STGN"
ATTN_MAGIC = b"ATTN"
VERSION = 1


# ------------------------------------------------------------------ DFCG

def dfcg_bytes(adjacency: np.ndarray) -> bytes:
    adjacency = np.asarray(adjacency)
    t, n, _ = adjacency.shape
    iu, ju = np.triu_indices(n, k=1)
    parts = [struct.pack("<4sIII", DFCG_MAGIC, VERSION, n, t)]
    for a in adjacency:
        parts.append(np.packbits(a[iu, ju].astype(np.uint8), bitorder="little").tobytes())
    return b"".join(parts)


def parse_dfcg(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise FormatError("DFCG blob shorter than its header")
    magic, version, n, t = struct.unpack_from("<4sIII", blob, 0)
    if magic != DFCG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DFCG_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DFCG version {version}")
    m = n * (n - 1) // 2
    per = (m + 7) // 8
    if len(blob) != 16 + t * per:
        raise FormatError(f"DFCG size {len(blob)} does not match N={n}, T={t}")
    iu, ju = np.triu_indices(n, k=1)
    adj = np.zeros((t, n, n), dtype=np.uint8)
    for i in range(t):
        chunk = np.frombuffer(blob, dtype=np.uint8, count=per, offset=16 + i * per)
        bits = np.unpackbits(chunk, count=m, bitorder="little")
        adj[i, iu, ju] = bits
        adj[i, ju, iu] = bits
    return adj


def save_dynamic_graph(graph: DynamicGraph, path: str | Path) -> None:
    Path(path).write_bytes(dfcg_bytes(graph.adjacency))


def load_dynamic_graph(path: str | Path, window_ends: Optional[np.ndarray] = None) -> DynamicGraph:
    """Window ends are not stored in DFCG; pass them to restore a complete graph."""
    adj = parse_dfcg(Path(path).read_bytes())
    ends = np.asarray(window_ends, dtype=np.int64) if window_ends is not None else np.zeros(0, np.int64)
    return DynamicGraph(adjacency=adj, window_ends=ends, n_nodes=adj.shape[1])


# ------------------------------------------------------------------ float32 container

def container_bytes(magic: bytes, meta: dict, arrays: list[tuple[str, np.ndarray, str]]) -> bytes:
    manifest = [{"name": name, "shape": list(np.shape(a)), "kind": kind} for name, a, kind in arrays]
    header = dict(meta)
    header["manifest"] = manifest
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<4sII", magic, VERSION, len(hbytes)), hbytes]
    for _, a, _ in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_container(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12:
        raise FormatError("container shorter than its header")
    got, version, hlen = struct.unpack_from("<4sII", blob, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(blob):
            raise FormatError(f"truncated blob for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last blob")
    return header, arrays


# ------------------------------------------------------------------ STGN checkpoints

def checkpoint_bytes(state: ModelState, meta: Optional[dict] = None) -> bytes:
    arrays = [(name, state.params[name].data, "param") for name, _ in parameter_shapes(state.config)]
    arrays += [(name, state.buffers[name], "buffer") for name, _ in buffer_shapes(state.config)]
    header = {"config": state.config.to_dict(), "meta": meta or {}}
    return container_bytes(STGN_MAGIC, header, arrays)


def parse_checkpoint(blob: bytes) -> tuple[ModelState, dict]:
    header, arrays = parse_container(blob, STGN_MAGIC)
    cfg = ModelConfig(**header["config"])
    params, buffers = {}, {}
    for entry in header["manifest"]:
        value = arrays[entry["name"]].astype(np.float64)
        if entry["kind"] == "param":
            params[entry["name"]] = Tensor(value, requires_grad=True, name=entry["name"])
        else:
            buffers[entry["name"]] = value
    expected = [name for name, _ in parameter_shapes(cfg)]
    if list(params) != expected:
        raise FormatError("checkpoint parameter manifest does not match its config")
    return ModelState(cfg, params, buffers), header.get("meta", {})


def save_checkpoint(state: ModelState, path: str | Path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, meta))


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    return parse_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------------ ATTN dumps

def attention_bytes(records: list[AttentionRecord], meta: dict) -> bytes:
    """One entry per subject: ``s{i}.z_space`` (K,T,N), ``s{i}.z_time_mat`` (K,T,T), ``s{i}.h_dyn``."""
    arrays = []
    for i, rec in enumerate(records):
        arrays += [(f"s{i}.z_space", rec.z_space, "z_space"),
                   (f"s{i}.z_time_mat", rec.z_time_mat, "z_time_mat"),
                   (f"s{i}.h_dyn", rec.h_dyn, "h_dyn")]
    header = {"meta": meta, "n_subjects": len(records)}
    return container_bytes(ATTN_MAGIC, header, arrays)


def parse_attention(blob: bytes) -> tuple[list[AttentionRecord], dict]:
    header, arrays = parse_container(blob, ATTN_MAGIC)
    records = []
    for i in range(header["n_subjects"]):
        records.append(AttentionRecord(
            z_space=arrays[f"s{i}.z_space"].astype(np.float64),
            z_time_mat=arrays[f"s{i}.z_time_mat"].astype(np.float64),
            h_dyn=arrays[f"s{i}.h_dyn"].astype(np.float64),
        ))
    return records, header.get("meta", {})


def save_attention(records: list[AttentionRecord], path: str | Path, meta: dict) -> None:
    Path(path).write_bytes(attention_bytes(records, meta))


def load_attention(path: str | Path) -> tuple[list[AttentionRecord], dict]:
    return parse_attention(Path(path).read_bytes())
