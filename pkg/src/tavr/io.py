"""Binary tensor files, checkpoints and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MAGIC = b"TAVR"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sII")


class TensorFileError(Exception):
    """Raised for malformed or truncated tensor files."""


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    data = np.ascontiguousarray(a, dtype="<f4")
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + data.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TensorFileError("file shorter than header")
    magic, version, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFileError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    off = _HEAD.size
    if len(buf) < off + 8 * rank:
        raise TensorFileError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * n:
        raise TensorFileError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array):
    _atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_jsonl(path, records: Iterable[dict]):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write(path, text.encode("utf-8"))


def write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "tavr-checkpoint"


def save_checkpoint(directory, params: dict, meta: dict) -> list:
    """Write each parameter as a tensor file plus manifest.json; returns the files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, files = [], []
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]))
        fname = f"{name}.tavr"
        write_tensor(d / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
        files.append(str(d / fname))
    manifest = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION, "params": entries, **meta}
    write_json(d / "manifest.json", manifest)
    files.append(str(d / "manifest.json"))
    return files


def load_checkpoint(directory) -> tuple:
    """Returns (params as name -> float32 array, manifest dict)."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TensorFileError(f"no checkpoint manifest in {d}") from None
    except json.JSONDecodeError as e:
        raise TensorFileError(f"corrupt checkpoint manifest: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise TensorFileError("not a checkpoint manifest")
    params = {}
    for e in manifest["params"]:
        arr = read_tensor(d / e["file"])
        if list(arr.shape) != e["shape"]:
            raise TensorFileError(f"shape mismatch for {e['name']}")
        params[e["name"]] = arr
    return params, manifest


# ---------------------------------------------------------------- provenance

def code_revision() -> str:
    """Package version plus a digest of the package sources."""
    from . import __version__
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    command: list
    config_hash: str
    seed: int
    revision: str = field(default_factory=code_revision)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    outputs: list = field(default_factory=list)

    def finish(self, path, outputs: Iterable[str] = ()):
        self.outputs = sorted(set(self.outputs) | {str(o) for o in outputs})
        self.finished = time.time()
        write_json(path, asdict(self))
