"""Binary snapshot of the trained prompts.

Layout: the 8-byte magic ``FEDPGP1\\n``, a little-endian uint64 header length,
a UTF-8 JSON header listing each array's name and shape, then the arrays as
raw little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError
from .prompt import FullRankAdapter, LowRankAdapter

MAGIC = b"FEDPGP1\n"


def collect_arrays(p_G: np.ndarray, adapters: dict[int, object]) -> dict[str, np.ndarray]:
    arrays = {"p_G": p_G}
    for cid in sorted(adapters):
        a = adapters[cid]
        if isinstance(a, LowRankAdapter):
            arrays[f"client{cid}.U"] = a.U
            arrays[f"client{cid}.V"] = a.V
        elif isinstance(a, FullRankAdapter):
            arrays[f"client{cid}.D"] = a.D
    return arrays


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(header)), header]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise InvalidParameterError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    pos = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        if pos + n > len(blob):
            raise InvalidParameterError("checkpoint is truncated")
        arrays[entry["name"]] = np.frombuffer(blob[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(blob):
        raise InvalidParameterError("trailing bytes after checkpoint arrays")
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
