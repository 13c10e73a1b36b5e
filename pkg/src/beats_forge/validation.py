"""Input validation helpers shared by the estimators."""

import numpy as np

from .exceptions import ShapeError


def as_patch_array(x):
    """Patch matrix of a PatchSequence / array-like as float64 (T, D)."""
    arr = getattr(x, "patches", x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"patch sequence must be 2-D (T, D), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("patch sequence contains NaN or Inf")
    return arr


def check_patch_sequences(X, patch_dim):
    """Validate a collection of patch sequences.

    Accepts a list of 2-D arrays / PatchSequence objects, or a 3-D array.
    Returns ``(list_of_arrays, lengths)``.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    seqs = [as_patch_array(x) for x in X]
    for i, s in enumerate(seqs):
        if s.shape[1] != patch_dim:
            raise ShapeError(f"sequence {i}: patch width {s.shape[1]} != {patch_dim}")
    return seqs, [len(s) for s in seqs]


def check_targets(targets, lengths, name="targets"):
    """Per-clip (T, d) teacher targets matching the sequence lengths."""
    out = []
    for i, (t, n) in enumerate(zip(targets, lengths)):
        t = np.asarray(getattr(t, "vectors", t), dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != n:
            raise ShapeError(f"{name}[{i}] has shape {t.shape}, expected ({n}, d)")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"{name}[{i}] contains NaN or Inf")
        out.append(t)
    if len(out) != len(lengths):
        raise ShapeError(f"{len(out)} {name} for {len(lengths)} sequences")
    return out


def length_batches(lengths, batch_size, rng=None):
    """Index batches grouping equal-length sequences; shuffled when ``rng`` given."""
    groups = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    batches = []
    for n in sorted(groups):
        idx = np.array(groups[n])
        if rng is not None:
            idx = rng.permutation(idx)
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches
