"""Little-endian binary containers for fbank caches, token and target files."""

import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

FBANK_MAGIC = b"BEFBANK1"
TOKENS_MAGIC = b"BETOKS01"
TARGETS_MAGIC = b"BETGTS01"

TARGET_KINDS = ("ssl_last_layer", "finetuned_logits")


def _read(path):
    return Path(path).read_bytes()


def _check_magic(buf, magic):
    if len(buf) < len(magic):
        raise FormatError("file shorter than magic", offset=len(buf))
    if buf[: len(magic)] != magic:
        raise FormatError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}", offset=0)


def _payload(buf, offset, count, dtype):
    need = offset + count * np.dtype(dtype).itemsize
    if len(buf) != need:
        raise FormatError(f"payload size mismatch: file has {len(buf)} bytes, header implies {need}",
                          offset=min(len(buf), need))
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def write_fbank(path, frames):
    frames = np.asarray(frames)
    n, m = frames.shape
    with open(path, "wb") as fh:
        fh.write(FBANK_MAGIC)
        fh.write(struct.pack("<II", n, m))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_fbank(path):
    buf = _read(path)
    _check_magic(buf, FBANK_MAGIC)
    if len(buf) < 16:
        raise FormatError("truncated fbank header", offset=len(buf))
    n, m = struct.unpack_from("<II", buf, 8)
    return _payload(buf, 16, n * m, "<f4").reshape(n, m).astype(np.float64)


def write_tokens(path, labels, n_codes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_codes):
        raise ValueError(f"labels must lie in [0, {n_codes})")
    with open(path, "wb") as fh:
        fh.write(TOKENS_MAGIC)
        fh.write(struct.pack("<II", n_codes, labels.size))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def read_tokens(path):
    """Return ``(labels, n_codes)``."""
    buf = _read(path)
    _check_magic(buf, TOKENS_MAGIC)
    if len(buf) < 16:
        raise FormatError("truncated token header", offset=len(buf))
    k, t = struct.unpack_from("<II", buf, 8)
    labels = _payload(buf, 16, t, "<u4").astype(np.int64)
    if labels.size and labels.max() >= k:
        raise FormatError(f"label {labels.max()} exceeds codebook size {k}", offset=16)
    return labels, k


def write_targets(path, targets, kind):
    targets = np.asarray(targets)
    t, d = targets.shape
    with open(path, "wb") as fh:
        fh.write(TARGETS_MAGIC)
        fh.write(struct.pack("<IIB", t, d, TARGET_KINDS.index(kind)))
        fh.write(np.ascontiguousarray(targets, dtype="<f4").tobytes())


def read_targets(path):
    """Return ``(targets, kind)``."""
    buf = _read(path)
    _check_magic(buf, TARGETS_MAGIC)
    if len(buf) < 17:
        raise FormatError("truncated target header", offset=len(buf))
    t, d, kind = struct.unpack_from("<IIB", buf, 8)
    if kind >= len(TARGET_KINDS):
        raise FormatError(f"unknown target kind byte {kind}", offset=16)
    return _payload(buf, 17, t * d, "<f4").reshape(t, d).astype(np.float64), TARGET_KINDS[kind]
