"""Binary dataset files (``*.mdra``) and checkpoints (``*.ckpt``).

Dataset layout, little-endian::

    magic "MDRA1" | u16 version | u8 scenario | u8 ndims | 4 x u32 dims | u64 count | u64 seed
    count x per-sample float64 payload

CF dims are ``(L, K, M)``; each sample holds AP coordinates ``[L, 2]``, UE
coordinates ``[K, 2]`` and channels ``[K, L, M]``. MA dims are ``(N, K)``;
each sample holds CP coordinates ``[N, 2]`` and channels ``[K, N]``.
Complex entries are stored as interleaved (re, im) pairs, row-major.

Checkpoint layout::

    magic "MDCK1" | u16 version | 64-byte config hash (hex) | u64 header length
    JSON header (config, metadata, array names and shapes) | float64 arrays
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .scenarios.cf import CfInstance
from .scenarios.ma import MaInstance

DATA_MAGIC = b"MDRA1"
CKPT_MAGIC = b"MDCK1"
DATA_VERSION = 1
CKPT_VERSION = 1
HEADER = struct.Struct("<5sHBB4IQQ")
SCENARIO_IDS = {"cf": 1, "ma": 2}


class FormatError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


def _complex_to_f64(z: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(z, dtype="<c16").view("<f8")


def write_dataset(path: str | Path, inst: CfInstance | MaInstance, seed: int) -> None:
    n = len(inst)
    if isinstance(inst, CfInstance):
        _, K, L, M = inst.h.shape
        scenario, dims = "cf", (L, K, M)
        parts = [inst.ap_pos.reshape(n, -1), inst.ue_pos.reshape(n, -1), _complex_to_f64(inst.h).reshape(n, -1)]
    elif isinstance(inst, MaInstance):
        _, K, N = inst.h.shape
        scenario, dims = "ma", (N, K)
        parts = [inst.positions.reshape(n, -1), _complex_to_f64(inst.h).reshape(n, -1)]
    else:
        raise TypeError(f"unsupported instance type {type(inst).__name__}")
    padded = tuple(dims) + (0,) * (4 - len(dims))
    head = HEADER.pack(DATA_MAGIC, DATA_VERSION, SCENARIO_IDS[scenario], len(dims), *padded, n, seed)
    payload = np.concatenate([np.asarray(p, dtype="<f8") for p in parts], axis=1)
    with open(path, "wb") as f:
        f.write(head)
        f.write(np.ascontiguousarray(payload).tobytes())


def read_dataset(path: str | Path) -> tuple[str, CfInstance | MaInstance, int]:
    """Returns ``(scenario, instance batch, seed)``."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, sid, ndims, d0, d1, d2, d3, n, seed = HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported version {version}")
    scenario = {v: k for k, v in SCENARIO_IDS.items()}.get(sid)
    if scenario is None:
        raise FormatError(f"unknown scenario id {sid}")
    if scenario == "cf":
        L, K, M = d0, d1, d2
        sizes = [L * 2, K * 2, K * L * M * 2]
    else:
        N, K = d0, d1
        sizes = [N * 2, K * N * 2]
    per = sum(sizes)
    body = np.frombuffer(raw, dtype="<f8", offset=HEADER.size)
    if body.size != n * per:
        raise FormatError(f"payload holds {body.size} values, header implies {n * per}")
    body = body.reshape(n, per)
    cuts = np.cumsum([0] + sizes)
    chunks = [body[:, a:b].copy() for a, b in zip(cuts[:-1], cuts[1:])]
    if scenario == "cf":
        h = chunks[2].view("<c16").reshape(n, K, L, M)
        inst = CfInstance(h.astype(np.complex128), chunks[0].reshape(n, L, 2), chunks[1].reshape(n, K, 2))
    else:
        h = chunks[1].view("<c16").reshape(n, K, N)
        inst = MaInstance(h.astype(np.complex128), chunks[0].reshape(n, N, 2))
    return scenario, inst, int(seed)


def write_checkpoint(
    path: str | Path, config: dict, config_hash: str, arrays: dict[str, np.ndarray], meta: dict[str, Any]
) -> None:
    names = list(arrays)
    shapes = [list(np.shape(arrays[k])) for k in names]
    header = json.dumps({"config": config, "meta": meta, "arrays": names, "shapes": shapes}).encode()
    h = config_hash.encode()
    if len(h) != 64:
        raise ValueError("config hash must be 64 hex characters")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + h + struct.pack("<Q", len(header)))
        f.write(header)
        for k in names:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def read_checkpoint(path: str | Path, expected_hash: str | None = None) -> tuple[dict, str, dict[str, np.ndarray], dict]:
    """Returns ``(config, config hash, arrays, metadata)``; raises on a hash mismatch."""
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:5]!r}")
    (version,) = struct.unpack_from("<H", raw, 5)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config_hash = raw[7:71].decode()
    if expected_hash is not None and config_hash != expected_hash:
        raise ConfigMismatchError("checkpoint was written for a different scenario/model configuration")
    (hlen,) = struct.unpack_from("<Q", raw, 71)
    header = json.loads(raw[79 : 79 + hlen])
    offset = 79 + hlen
    arrays = {}
    for name, shape in zip(header["arrays"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError("trailing bytes after the last array")
    return header["config"], config_hash, arrays, header["meta"]
