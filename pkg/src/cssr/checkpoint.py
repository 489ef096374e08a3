"""Binary checkpoints: config snapshot, named float64 tensors, optional score statistics.

Layout (all integers little-endian)::

    b"CSSR1"  u8 version  u64 total_length
    u32 config_length  config JSON (UTF-8, sorted keys)
    u32 record_count
    record*: u16 name_length  name  u8 rank  u64 dims[rank]  f64 values[prod(dims)]

The config block holds ``{"config": TrainConfig fields, "meta": free-form}``.
Score statistics are stored as ordinary records under the ``stats/`` prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .data import DataError
from .scoring import SCORE_IDS, ScoreStats

MAGIC = b"CSSR1"
VERSION = 1
HEADER = struct.Struct("<5sBQ")
STATS_PREFIX = "stats/"


class CheckpointError(DataError):
    pass


def _record(name: str, value: np.ndarray) -> bytes:
    value = np.asarray(value, dtype="<f8")
    raw = name.encode("utf-8")
    out = struct.pack("<H", len(raw)) + raw + struct.pack("<B", value.ndim)
    out += struct.pack(f"<{value.ndim}Q", *value.shape)
    return out + np.ascontiguousarray(value).tobytes()


def _stats_records(stats: ScoreStats) -> Dict[str, np.ndarray]:
    recs = {
        "mu": stats.mu,
        "mu_tilde": stats.mu_tilde,
        "gram_templates": stats.gram_templates,
        "gram_power": np.array(float(stats.gram_power)),
        "weights": np.array(stats.weights, dtype=float),
        "empty_classes": np.array(stats.empty_classes, dtype=float),
    }
    if stats.calibrated:
        recs["means"] = np.array([stats.means[k] for k in SCORE_IDS])
        recs["stds"] = np.array([stats.stds[k] for k in SCORE_IDS])
    if stats.threshold is not None:
        recs["threshold"] = np.array(stats.threshold)
    return {STATS_PREFIX + k: v for k, v in recs.items()}


def encode(config: dict, tensors: Dict[str, np.ndarray], stats: Optional[ScoreStats] = None) -> bytes:
    records = dict(tensors)
    if stats is not None:
        records.update(_stats_records(stats))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(cfg)) + cfg + struct.pack("<I", len(records))
    body += b"".join(_record(name, records[name]) for name in sorted(records))
    return HEADER.pack(MAGIC, VERSION, HEADER.size + len(body)) + body


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated {what} at offset {self.pos}: "
                                  f"need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def decode(buf: bytes, path="<bytes>") -> Tuple[dict, Dict[str, np.ndarray]]:
    r = _Reader(buf, path)
    magic, version, total = r.unpack("5sBQ", "header")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 5, expected {VERSION}")
    if total != len(buf):
        raise CheckpointError(f"{path}: length field at offset 6 says {total} bytes, file has {len(buf)}")
    (cfg_len,) = r.unpack("I", "config length")
    start = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block at offset {start}: {exc}") from exc
    (count,) = r.unpack("I", "record count")
    records = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("H", "record name length")
        name = r.take(name_len, "record name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("B", f"rank of {name!r}")
        dims = r.unpack(f"{rank}Q", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(8 * n, f"values of {name!r} (record at offset {at})")
        records[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return config, records


def _stats_from_records(records: Dict[str, np.ndarray], mode: str) -> Optional[ScoreStats]:
    rec = {k[len(STATS_PREFIX):]: v for k, v in records.items() if k.startswith(STATS_PREFIX)}
    if not rec:
        return None
    means = dict(zip(SCORE_IDS, map(float, rec["means"]))) if "means" in rec else {}
    stds = dict(zip(SCORE_IDS, map(float, rec["stds"]))) if "stds" in rec else {}
    return ScoreStats(mu=rec["mu"], mu_tilde=rec["mu_tilde"], gram_templates=rec["gram_templates"],
                      gram_power=int(rec["gram_power"]), mode=mode, means=means, stds=stds,
                      weights=tuple(float(w) for w in rec["weights"]),
                      threshold=float(rec["threshold"]) if "threshold" in rec else None,
                      empty_classes=tuple(int(c) for c in rec["empty_classes"]))


def _first_difference(a, b, prefix: str = "") -> Optional[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            diff = _first_difference(a.get(key), b.get(key), f"{prefix}{key}.")
            if diff:
                return diff
        return None
    return None if a == b else f"{prefix.rstrip('.')} (checkpoint {a!r}, expected {b!r})"


@dataclass
class Checkpoint:
    model: Any
    stats: Optional[ScoreStats]
    config: Any  # TrainConfig
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(model, stats: Optional[ScoreStats], path, config, meta: Optional[dict] = None) -> Path:
    """Write ``model`` parameters, the TrainConfig ``config``, optional ``stats`` and ``meta``."""
    path = Path(path)
    block = {"config": config.to_dict(), "meta": meta or {}}
    path.write_bytes(encode(block, model.graph.state(), stats))
    return path


def load_checkpoint(path, expected_config=None) -> Checkpoint:
    """Rebuild the model; rejects a checkpoint whose config differs from ``expected_config``."""
    from .train import TrainConfig, build_model

    path = Path(path)
    block, records = decode(path.read_bytes(), path)
    if not isinstance(block, dict) or "config" not in block:
        raise CheckpointError(f"{path}: config block has no 'config' entry")
    cfg_dict, meta = block["config"], block.get("meta", {})
    if expected_config is not None:
        diff = _first_difference(cfg_dict, expected_config.to_dict())
        if diff:
            raise CheckpointError(f"{path}: config mismatch in field {diff}")
    try:
        config = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    model = build_model(config)
    params = {k: v for k, v in records.items() if not k.startswith(STATS_PREFIX)}
    missing = set(model.graph.params) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    try:
        model.graph.load_state(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return Checkpoint(model, _stats_from_records(records, model.mode), config, meta)
