"""Frozen random-projection tokenizer.

Each 256-dim patch is projected by a fixed random matrix and labeled with
the index of the nearest vector in a fixed random codebook.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError
from .features import PATCH_DIM
from .validation import check_patch_sequences

_MASK64 = (1 << 64) - 1


def splitmix64(state):
    """One SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** seeded through SplitMix64.

    Normal deviates come from Box-Muller on pairs of 53-bit uniforms, emitting
    the cosine branch then the sine branch.
    """

    def __init__(self, seed):
        sm = int(seed) & _MASK64
        self.s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            self.s.append(out)

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self.s = [s0, s1, s2, s3]
        return result

    def uniforms(self, n):
        """``n`` doubles in [0, 1)."""
        nxt = self.next_u64
        return np.array([nxt() >> 11 for _ in range(n)], dtype=np.float64) * 2.0 ** -53

    def standard_normal(self, n):
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]


def nearest_code(points, codebook):
    """Index of the squared-Euclidean nearest codebook row; ties -> smallest index.

    Distances are screened with the expanded form and every near-minimal
    candidate is re-scored with the direct difference, so ties are judged on
    ``sum((v - p) ** 2)`` exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    d = (np.sum(points ** 2, axis=1, keepdims=True) - 2.0 * points @ codebook.T
         + np.sum(codebook ** 2, axis=1)[None, :])
    best = d.min(axis=1, keepdims=True)
    scale = np.abs(np.sum(points ** 2, axis=1, keepdims=True)) + np.max(
        np.sum(codebook ** 2, axis=1)) + 1.0
    close = d <= best + 1e-9 * scale
    labels = np.argmin(d, axis=1)
    for row in np.nonzero(close.sum(axis=1) > 1)[0]:
        cand = np.nonzero(close[row])[0]
        exact = np.sum((codebook[cand] - points[row]) ** 2, axis=1)
        labels[row] = cand[np.argmin(exact)]
    return labels.astype(np.int64)


@dataclass
class TokenSequence:
    labels: np.ndarray
    n_codes: int
    clip_id: str = ""

    def __len__(self):
        return len(self.labels)


class RandomProjectionTokenizer(TransformerMixin, BaseEstimator):
    """Label patches by nearest neighbour after a frozen random projection.

    Parameters
    ----------
    n_codes : int
        Codebook size K.
    code_dim : int
        Projection / codebook width.
    seed : int
        Seed of the xoshiro256** stream; the projection is drawn first (row
        major, ``patch_dim x code_dim``), then the codebook (row major).
    patch_dim : int
        Input patch width.
    """

    def __init__(self, n_codes=1024, code_dim=256, seed=0, patch_dim=PATCH_DIM):
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.seed = seed
        self.patch_dim = patch_dim

    def fit(self, X=None, y=None):
        if self.n_codes < 2:
            raise ConfigError(f"n_codes must be >= 2, got {self.n_codes}")
        if self.code_dim < 1:
            raise ConfigError(f"code_dim must be >= 1, got {self.code_dim}")
        gen = Xoshiro256(self.seed)
        self.projection_ = gen.standard_normal(self.patch_dim * self.code_dim).reshape(
            self.patch_dim, self.code_dim)
        self.codebook_ = gen.standard_normal(self.n_codes * self.code_dim).reshape(
            self.n_codes, self.code_dim)
        self.projection_.flags.writeable = False
        self.codebook_.flags.writeable = False
        return self

    def tokenize(self, patches):
        """Labels for one patch sequence."""
        check_is_fitted(self, "codebook_")
        (x,), _ = check_patch_sequences([patches], self.patch_dim)
        labels = nearest_code(x @ self.projection_, self.codebook_)
        return TokenSequence(labels, self.n_codes, getattr(patches, "clip_id", ""))

    def transform(self, X):
        """List of label arrays, one per patch sequence."""
        return [self.tokenize(x).labels for x in X]

    def state_arrays(self):
        check_is_fitted(self, "codebook_")
        return {"projection": self.projection_, "codebook": self.codebook_}

    def load_state_arrays(self, arrays):
        self.projection_ = np.array(arrays["projection"], dtype=np.float64)
        self.codebook_ = np.array(arrays["codebook"], dtype=np.float64)
        self.projection_.flags.writeable = False
        self.codebook_.flags.writeable = False
        return self


def new_seeded(seed, n_codes=1024, code_dim=256):
    return RandomProjectionTokenizer(n_codes=n_codes, code_dim=code_dim, seed=seed).fit()
