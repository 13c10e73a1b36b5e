"""Binary checkpoint container.

Layout: ``b"BECKPT01"``, ``<u4`` version, ``<u4`` manifest length, the
manifest as sorted-key UTF-8 JSON, then the tensor payloads back to back in
little-endian order. The manifest records name, shape, dtype and payload
offset of every tensor plus free-form JSON metadata (estimator kind,
hyperparameters, RNG state).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"BECKPT01"
VERSION = 1
PAYLOAD_DTYPE = "<f8"
_HEADER = struct.Struct("<II")


@dataclass
class Checkpoint:
    kind: str
    arrays: dict
    meta: dict = field(default_factory=dict)


def _encode_manifest(ckpt):
    entries, offset = [], 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": PAYLOAD_DTYPE,
                        "offset": offset})
        offset += arr.size * 8
    doc = {"kind": ckpt.kind, "meta": ckpt.meta, "tensors": entries}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt):
    manifest = _encode_manifest(ckpt)
    parts = [MAGIC, _HEADER.pack(VERSION, len(manifest)), manifest]
    for name in sorted(ckpt.arrays):
        parts.append(np.ascontiguousarray(ckpt.arrays[name], dtype=PAYLOAD_DTYPE).tobytes())
    return b"".join(parts)


def from_bytes(buf):
    """Parse a checkpoint; every size is validated before any array is built."""
    head = len(MAGIC) + _HEADER.size
    if len(buf) < head:
        raise FormatError(f"checkpoint truncated: {len(buf)} bytes, header needs {head}", len(buf))
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:len(MAGIC)]!r}", 0)
    version, mlen = _HEADER.unpack_from(buf, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    if len(buf) < head + mlen:
        raise FormatError("checkpoint truncated inside manifest", len(buf))
    try:
        doc = json.loads(buf[head:head + mlen].decode("utf-8"))
        tensors = doc["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}", head) from None
    base = head + mlen
    expected = 0
    for t in tensors:
        if t.get("dtype") != PAYLOAD_DTYPE or t.get("offset") != expected:
            raise FormatError(f"tensor {t.get('name')!r}: bad dtype or offset", base + expected)
        expected += int(np.prod(t["shape"], dtype=np.int64)) * 8
    if len(buf) != base + expected:
        raise FormatError(f"payload is {len(buf) - base} bytes, manifest describes {expected}",
                          len(buf))
    arrays = {}
    for t in tensors:
        n = int(np.prod(t["shape"], dtype=np.int64))
        start = base + t["offset"]
        arrays[t["name"]] = np.frombuffer(buf, PAYLOAD_DTYPE, n, start).astype(
            np.float64).reshape(t["shape"])
    return Checkpoint(doc["kind"], arrays, doc.get("meta", {}))


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())


# -- estimator (de)serialization --------------------------------------------------

def _estimator_classes():
    from .rptok import RandomProjectionTokenizer
    from .sdtok import SelfDistilledTokenizer
    from .ssl_model import AudioClassifier, MaskedAudioModel
    return {"random_projection": RandomProjectionTokenizer,
            "self_distilled": SelfDistilledTokenizer,
            "ssl_model": MaskedAudioModel,
            "classifier": AudioClassifier}


def _kind_of(est):
    for kind, cls in _estimator_classes().items():
        if type(est) is cls:
            return kind
    raise TypeError(f"cannot checkpoint {type(est).__name__}")


def estimator_checkpoint(est):
    kind = _kind_of(est)
    params = {k: v for k, v in est.get_params(deep=False).items() if k != "backbone"}
    meta = {"params": params}
    if kind == "random_projection":
        arrays = est.state_arrays()
    else:
        arrays = est.state_arrays()
        meta["state"] = est.state_meta()
    return Checkpoint(kind, arrays, meta)


def estimator_from_checkpoint(ckpt):
    classes = _estimator_classes()
    if ckpt.kind not in classes:
        raise FormatError(f"unknown checkpoint kind {ckpt.kind!r}")
    est = classes[ckpt.kind](**ckpt.meta["params"])
    if ckpt.kind == "random_projection":
        return est.load_state_arrays(ckpt.arrays)
    return est.load_state(ckpt.arrays, ckpt.meta["state"])


def save_estimator(path, est):
    return save_checkpoint(path, estimator_checkpoint(est))


def load_estimator(path):
    return estimator_from_checkpoint(load_checkpoint(path))
