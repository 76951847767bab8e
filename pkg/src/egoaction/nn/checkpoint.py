"""Named-parameter checkpoints: ``<stem>.bin`` (little-endian float32) + ``<stem>.json`` index."""
import hashlib
import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None) -> str:
    """Write ``{name: array}``; returns the sha256 of the payload."""
    path = Path(path)
    index, chunks, offset = {}, [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        b = arr.tobytes()
        chunks.append(b)
        offset += len(b)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(
        {"params": index, "sha256": digest, "meta": meta or {}}, indent=1, sort_keys=True))
    return digest


def load_checkpoint(path):
    """Returns (params, meta); raises CheckpointError on a hash mismatch."""
    path = Path(path)
    try:
        index = json.loads(path.with_suffix(".json").read_text())
        payload = path.with_suffix(".bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file {e.filename}") from e
    if hashlib.sha256(payload).hexdigest() != index["sha256"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    params = {}
    for name, ent in index["params"].items():
        n = int(np.prod(ent["shape"], dtype=np.int64))
        params[name] = np.frombuffer(payload, dtype="<f4", count=n,
                                     offset=ent["offset"]).reshape(ent["shape"]).copy()
    return params, index["meta"]


def checkpoint_hash(path) -> str:
    return json.loads(Path(path).with_suffix(".json").read_text())["sha256"]
