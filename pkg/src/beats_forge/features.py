"""Waveform loading, log-mel filterbanks, normalization and 16x16 patching."""

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import FormatError, ShapeError, StatsError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 128
LOW_FREQ = 20.0
HIGH_FREQ = 8000.0
LOG_FLOOR = 1e-10
POVEY_EXPONENT = 0.85
PATCH = 16
PATCH_DIM = PATCH * PATCH
FREQ_PATCHES = N_MELS // PATCH


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FbankMatrix:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class NormStats:
    mean: float
    std: float
    corpus_id: str = ""


# Filterbank statistics of the large-scale corpus used by the reference models.
AUDIOSET_STATS = NormStats(mean=15.41663, std=6.55582, corpus_id="audioset")


@dataclass
class PatchSequence:
    patches: np.ndarray
    grid: tuple
    n_frames: int
    clip_id: str = field(default="")

    def __len__(self):
        return self.patches.shape[0]


# -- WAV I/O -------------------------------------------------------------------

def _parse_wav(buf):
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file", offset=0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if body + size > len(buf):
            if cid == b"data":
                size = len(buf) - body
            else:
                raise FormatError(f"chunk {cid!r} overruns file", offset=pos)
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too small", offset=pos)
            fmt = struct.unpack_from("<HHIIHH", buf, body) + (pos,)
            if fmt[0] == 0xFFFE and size >= 40:
                (sub,) = struct.unpack_from("<H", buf, body + 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError("missing fmt chunk", offset=12)
    if data is None:
        raise FormatError("missing data chunk", offset=pos)
    codec, channels, rate, _, block_align, bits, fmt_pos = fmt
    if codec != 1 or bits != 16:
        raise FormatError(f"unsupported codec {codec} with {bits} bits; need 16-bit PCM",
                          offset=fmt_pos + 8)
    if channels < 1:
        raise FormatError("zero channels", offset=fmt_pos + 10)
    start, size = data
    n = size // (2 * channels)
    pcm = np.frombuffer(buf, dtype="<i2", count=n * channels, offset=start)
    return pcm.reshape(n, channels)[:, 0], rate


def resample_linear(samples, rate_in, rate_out=SAMPLE_RATE):
    """Linear-interpolation resampling (lossy; no anti-alias filter)."""
    samples = np.asarray(samples, dtype=np.float64)
    if rate_in == rate_out or len(samples) < 2:
        return samples.copy()
    n_out = int(math.floor((len(samples) - 1) * rate_out / rate_in)) + 1
    t = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t, np.arange(len(samples)), samples)


def load_wav(path):
    """Read a 16-bit PCM WAV (first channel) as a 16 kHz :class:`Waveform`."""
    pcm, rate = _parse_wav(Path(path).read_bytes())
    samples = pcm.astype(np.float64) / 32768.0
    return Waveform(resample_linear(samples, rate), SAMPLE_RATE)


def write_wav(path, waveform):
    """Write mono 16-bit PCM; samples are clipped to [-1, 1)."""
    x = np.clip(np.asarray(waveform.samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2")
    data = pcm.tobytes()
    rate = int(waveform.sample_rate)
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


# -- filterbank ------------------------------------------------------------------

def mel_scale(freq):
    return 1127.0 * np.log(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (np.exp(np.asarray(mel, dtype=np.float64) / 1127.0) - 1.0)


def povey_window(length=FRAME_LENGTH):
    n = np.arange(length)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / (length - 1))) ** POVEY_EXPONENT


def mel_edges(n_mels=N_MELS, low=LOW_FREQ, high=HIGH_FREQ):
    """Left, center and right mel coordinates of each triangular filter."""
    lo, hi = mel_scale(low), mel_scale(high)
    delta = (hi - lo) / (n_mels + 1)
    left = lo + delta * np.arange(n_mels)
    return left, left + delta, left + 2.0 * delta


def mel_center_frequencies(n_mels=N_MELS):
    return inverse_mel_scale(mel_edges(n_mels)[1])


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Triangular weights, shape (n_mels, n_fft // 2 + 1), built in the mel domain."""
    left, center, right = mel_edges(n_mels)
    mel = mel_scale(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)[None, :]
    up = (mel - left[:, None]) / (center - left)[:, None]
    down = (right[:, None] - mel) / (right - center)[:, None]
    return np.clip(np.minimum(up, down), 0.0, None)


_WINDOW = povey_window()
_MEL = mel_filterbank()


def n_frames_for(num_samples):
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def compute_fbank(waveform):
    """128-bin natural-log mel energies, 25 ms frames every 10 ms (snip edges)."""
    if waveform.sample_rate != SAMPLE_RATE:
        raise ShapeError(f"expected {SAMPLE_RATE} Hz audio, got {waveform.sample_rate}")
    x = np.asarray(waveform.samples, dtype=np.float64)
    if len(x) < FRAME_LENGTH:
        raise ShapeError(f"waveform has {len(x)} samples; minimum is {FRAME_LENGTH}")
    n = n_frames_for(len(x))
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_SHIFT * np.arange(n)[:, None]
    frames = x[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    spec = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT)) ** 2
    energies = spec @ _MEL.T
    return FbankMatrix(np.log(np.maximum(energies, LOG_FLOOR)))


def _as_frames(f):
    return f.frames if isinstance(f, FbankMatrix) else np.asarray(f, dtype=np.float64)


def normalize_fbank(fbank, stats):
    """Map to mean 0 / std 0.5: ``(f - mean) / (2 * std)``."""
    if not stats.std > 0:
        raise StatsError(f"normalization std must be positive, got {stats.std}")
    return FbankMatrix((_as_frames(fbank) - stats.mean) / (2.0 * stats.std))


def compute_dataset_stats(fbanks, corpus_id=""):
    """Mean/std over every cell, merged clip by clip (Chan's parallel update)."""
    count, mean, m2 = 0, 0.0, 0.0
    for f in fbanks:
        a = _as_frames(f).reshape(-1)
        if a.size == 0:
            continue
        n_b = a.size
        mean_b = float(a.mean())
        m2_b = float(np.sum((a - mean_b) ** 2))
        total = count + n_b
        delta = mean_b - mean
        mean += delta * n_b / total
        m2 += m2_b + delta * delta * count * n_b / total
        count = total
    if count == 0:
        raise StatsError("cannot compute statistics of an empty corpus")
    std = math.sqrt(m2 / count)
    # Rounding leaves ~1e-15 residue on constant corpora; treat that as zero.
    if std <= 1e-12 * max(1.0, abs(mean)):
        std = 0.0
        warnings.warn("corpus filterbank has zero variance; normalization will fail",
                      RuntimeWarning, stacklevel=2)
    return NormStats(mean=mean, std=std, corpus_id=corpus_id)


# -- patches ---------------------------------------------------------------------

def patchify(fbank, pad_value=0.0, clip_id=""):
    """Split (T_f, 128) features into flattened 16x16 patches, time-major."""
    f = _as_frames(fbank)
    if f.ndim != 2 or f.shape[1] != N_MELS:
        raise ShapeError(f"fbank must have {N_MELS} columns, got shape {f.shape}")
    n = f.shape[0]
    rows = -(-n // PATCH)
    padded = np.full((rows * PATCH, N_MELS), pad_value, dtype=np.float64)
    padded[:n] = f
    patches = (padded.reshape(rows, PATCH, FREQ_PATCHES, PATCH)
               .transpose(0, 2, 1, 3)
               .reshape(rows * FREQ_PATCHES, PATCH_DIM))
    return PatchSequence(patches, (rows, FREQ_PATCHES), n, clip_id)


def unpatchify(seq):
    rows, cols = seq.grid
    f = (np.asarray(seq.patches).reshape(rows, cols, PATCH, PATCH)
         .transpose(0, 2, 1, 3)
         .reshape(rows * PATCH, cols * PATCH))
    return FbankMatrix(f[: seq.n_frames])


class FbankExtractor(TransformerMixin, BaseEstimator):
    """Waveforms -> normalized patch sequences.

    Parameters
    ----------
    stats : NormStats or None
        Fixed normalization statistics. When None, ``fit`` estimates them
        from the training waveforms.
    pad_value : float
        Fill for the time padding up to a multiple of 16 frames.
    """

    def __init__(self, stats=None, pad_value=0.0):
        self.stats = stats
        self.pad_value = pad_value

    def fit(self, X=None, y=None):
        if self.stats is not None:
            self.stats_ = self.stats
        elif X is None:
            raise StatsError("no fixed stats given and no waveforms to estimate them from")
        else:
            self.stats_ = compute_dataset_stats(compute_fbank(_as_waveform(w)) for w in X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return [patchify(normalize_fbank(compute_fbank(_as_waveform(w)), self.stats_),
                         self.pad_value)
                for w in X]


def _as_waveform(w):
    if isinstance(w, Waveform):
        return w
    if hasattr(w, "waveform"):
        return w.waveform
    return Waveform(np.asarray(w, dtype=np.float64), SAMPLE_RATE)
