"""Metrics (newline-delimited JSON) and binary parameter checkpoints."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BadMagic, TruncatedFile
from .model import Group, GroupedParams

CHECKPOINT_MAGIC = b"LLAPCKPT"
CHECKPOINT_VERSION = 1
METRIC_KEYS = ("seed", "kind", "objective", "tying", "lambda", "evidence", "test_nll", "jitter", "converged",
               "extras")
FLAG_NORMALISED, FLAG_BIAS = 1, 2


@dataclass
class MetricsRecord:
    seed: int
    kind: str
    objective: str
    tying: str
    lam: dict = field(default_factory=dict)
    evidence: float | None = None
    test_nll: float | None = None
    jitter: float = 0.0
    converged: bool = True
    extras: dict = field(default_factory=dict)

    def to_json_dict(self):
        """Plain-JSON form; non-finite numbers become null and are listed in ``extras["nonfinite"]``."""
        flagged = []
        raw = asdict(self)
        out = {
            "seed": raw["seed"],
            "kind": raw["kind"],
            "objective": raw["objective"],
            "tying": raw["tying"],
            "lambda": raw["lam"],
            "evidence": raw["evidence"],
            "test_nll": raw["test_nll"],
            "jitter": raw["jitter"],
            "converged": bool(raw["converged"]),
            "extras": raw["extras"],
        }
        out = {k: _clean(v, k, flagged) for k, v in out.items()}
        if flagged:
            out["extras"] = {**out["extras"], "nonfinite": sorted(set(flagged))}
        return out


def _clean(value, path, flagged):
    if isinstance(value, dict):
        return {str(k): _clean(v, f"{path}.{k}", flagged) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_clean(v, f"{path}[{i}]", flagged) for i, v in enumerate(value)]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            flagged.append(path)
            return None
        return value
    return value


def dumps_record(record):
    return json.dumps(record.to_json_dict(), sort_keys=False, allow_nan=False)


def write_metrics(records, path, append=False):
    """One JSON object per line, keys exactly ``METRIC_KEYS``; an empty set gives an empty file."""
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_checkpoint(params, path):
    """Binary layout (little-endian): magic, u32 version, u32 group count, descriptors, f64 values."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.groups))]
    for g in params.groups:
        name = g.name.encode("utf-8")
        flags = (FLAG_NORMALISED if g.normalised else 0) | (FLAG_BIAS if g.bias else 0)
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<QQB", g.start, g.length, flags))
    parts.append(np.ascontiguousarray(params.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedFile(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    groups = []
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise TruncatedFile(f"{path}: truncated group name")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        start, length, flags = take("<QQB")
        groups.append(Group(name, start, length, bool(flags & FLAG_NORMALISED), bool(flags & FLAG_BIAS)))
    total = sum(g.length for g in groups)
    if len(raw) - pos != 8 * total:
        raise TruncatedFile(f"{path}: expected {total} values, found {(len(raw) - pos) / 8:g}")
    values = np.frombuffer(raw, dtype="<f8", count=total, offset=pos).astype(np.float64)
    return GroupedParams(values, groups)


def write_curve(path, x, mean, std):
    """CSV with columns x, mean, std (scalar inputs and outputs)."""
    x, mean, std = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (x, mean, std))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,mean,std\n")
        for row in zip(x, mean, std):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
