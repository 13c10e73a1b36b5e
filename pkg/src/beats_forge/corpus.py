"""Deterministic synthetic labeled audio and waveform disturbances."""

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .features import SAMPLE_RATE, Waveform, load_wav, write_wav

KINDS = ("tone", "chirp", "am_noise", "clicks", "harmonic")


@dataclass
class SynthClassSpec:
    """One synthetic sound class.

    ``band`` is the (low, high) fundamental band in Hz; for ``clicks`` it is
    the click rate range in clicks per second.
    """

    class_id: int
    kind: str
    band: tuple
    amplitude: tuple = (0.1, 0.5)
    duration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        lo, hi = self.band
        if not 0 < lo <= hi:
            raise ConfigError(f"class {self.class_id}: invalid band {self.band}")
        if self.kind != "clicks" and hi >= SAMPLE_RATE / 2:
            raise ConfigError(f"class {self.class_id}: band exceeds Nyquist")


DEFAULT_CLASSES = (
    SynthClassSpec(0, "tone", (400.0, 600.0)),
    SynthClassSpec(1, "chirp", (1500.0, 3000.0)),
    SynthClassSpec(2, "am_noise", (4000.0, 5000.0)),
    SynthClassSpec(3, "clicks", (8.0, 12.0)),
    SynthClassSpec(4, "harmonic", (150.0, 250.0)),
)


@dataclass
class LabeledClip:
    waveform: Waveform
    class_id: int
    clip_id: str
    disturbance: str = "clean"


@dataclass
class Corpus:
    clips: list
    valid_ids: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.clips)

    @property
    def train(self):
        return [c for c in self.clips if c.clip_id not in self.valid_ids]

    @property
    def valid(self):
        return [c for c in self.clips if c.clip_id in self.valid_ids]

    @property
    def labels(self):
        return np.array([c.class_id for c in self.clips])


def _check_distinct(specs):
    ids = [s.class_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate class ids in {ids}")
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if a.kind == b.kind and a.band[0] <= b.band[1] and b.band[0] <= a.band[1]:
                raise ConfigError(f"classes {a.class_id} and {b.class_id} overlap: same kind "
                                  f"{a.kind!r} with bands {a.band} and {b.band}")


def _synthesize(spec, rng):
    n = int(round(spec.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    lo, hi = spec.band
    amp = rng.uniform(*spec.amplitude)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if spec.kind == "tone":
        x = np.sin(2.0 * np.pi * rng.uniform(lo, hi) * t + phase)
    elif spec.kind == "chirp":
        span = hi - lo
        f0 = rng.uniform(lo, lo + span / 3.0)
        f1 = rng.uniform(hi - span / 3.0, hi)
        inst = f0 + (f1 - f0) * t / spec.duration
        x = np.sin(2.0 * np.pi * np.cumsum(inst) / SAMPLE_RATE + phase)
    elif spec.kind == "am_noise":
        spectrum = np.fft.rfft(rng.normal(size=n))
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        carrier = np.fft.irfft(spectrum, n)
        carrier /= np.max(np.abs(carrier)) + 1e-12
        rate = rng.uniform(4.0, 8.0)
        x = carrier * (0.5 + 0.5 * np.sin(2.0 * np.pi * rate * t + phase))
    elif spec.kind == "clicks":
        x = np.zeros(n)
        period = int(SAMPLE_RATE / rng.uniform(lo, hi))
        start = int(rng.integers(0, period))
        decay = np.exp(-np.arange(80) / 12.0)
        for pos in range(start, n - 80, period):
            x[pos:pos + 80] += decay * rng.choice([-1.0, 1.0])
    else:
        f0 = rng.uniform(lo, hi)
        x = sum(np.sin(2.0 * np.pi * k * f0 * t + phase * k) / k for k in range(1, 6))
        x /= np.max(np.abs(x))
    background = rng.normal(0.0, 1e-3, size=n)
    return amp * x + background


def split_valid_ids(clip_ids_by_class, fraction=0.2):
    """Per class, the ``fraction`` of clip ids with the smallest SHA-256 digests."""
    valid = set()
    for ids in clip_ids_by_class.values():
        ranked = sorted(ids, key=lambda cid: hashlib.sha256(cid.encode()).hexdigest())
        valid.update(ranked[: int(round(fraction * len(ranked)))])
    return frozenset(valid)


def generate_corpus(specs=DEFAULT_CLASSES, n_per_class=20, seed=0):
    """Synthesize ``n_per_class`` clips per class; pure function of its inputs."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    specs = list(specs)
    _check_distinct(specs)
    clips, by_class = [], {}
    for spec in specs:
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, spec.seed, spec.class_id, i])
            clip_id = f"c{spec.class_id:02d}_{i:04d}"
            clips.append(LabeledClip(Waveform(_synthesize(spec, rng)), spec.class_id, clip_id))
            by_class.setdefault(spec.class_id, []).append(clip_id)
    return Corpus(clips, split_valid_ids(by_class))


def signal_power(x):
    return float(np.mean(np.asarray(x) ** 2))


def disturb(clip, kind, params, seed=0):
    """Return a disturbed copy of ``clip``.

    ``noise``: additive Gaussian noise at exactly ``params["snr_db"]``.
    ``echo``: ``y[n] = x[n] + gain * x[n - delay]`` with ``delay_ms`` and ``gain``.
    """
    x = np.asarray(clip.waveform.samples, dtype=np.float64)
    rate = clip.waveform.sample_rate
    if kind == "noise":
        snr = float(params["snr_db"])
        if not 0.0 <= snr <= 40.0:
            raise ConfigError(f"snr_db must lie in [0, 40], got {snr}")
        rng = np.random.default_rng([seed, 7919])
        noise = rng.normal(size=x.shape)
        target = signal_power(x) / 10.0 ** (snr / 10.0)
        noise *= np.sqrt(target / signal_power(noise))
        y, tag = x + noise, f"noise({snr:g}dB)"
    elif kind == "echo":
        delay_ms, gain = float(params["delay_ms"]), float(params["gain"])
        if not 10.0 <= delay_ms <= 100.0:
            raise ConfigError(f"delay_ms must lie in [10, 100], got {delay_ms}")
        if not 0.0 < gain <= 0.9:
            raise ConfigError(f"gain must lie in (0, 0.9], got {gain}")
        d = int(round(delay_ms * rate / 1000.0))
        y = x.copy()
        y[d:] += gain * x[:-d]
        tag = f"echo({delay_ms:g}ms,{gain:g})"
    else:
        raise ConfigError(f"unknown disturbance {kind!r}")
    return LabeledClip(Waveform(y, rate), clip.class_id, clip.clip_id, tag)


def default_disturbances(clip, seed=0):
    """The echo + 20 dB noise pair used for token agreement."""
    return [disturb(clip, "echo", {"delay_ms": 50.0, "gain": 0.5}, seed),
            disturb(clip, "noise", {"snr_db": 20.0}, seed)]


MANIFEST_FIELDS = ("clip_id", "path", "class", "disturbance", "split")


def write_corpus(corpus, out_dir):
    """Write WAV files and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for clip in corpus.clips:
            rel = Path("wav") / f"{clip.clip_id}.wav"
            write_wav(out / rel, clip.waveform)
            split = "valid" if clip.clip_id in corpus.valid_ids else "train"
            writer.writerow((clip.clip_id, rel.as_posix(), clip.class_id, clip.disturbance, split))
    return manifest


def read_manifest(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = [f for f in ("clip_id", "path", "class") if rows and f not in rows[0]]
    if missing:
        raise ConfigError(f"{path}: manifest lacks columns {missing}")
    return rows


def read_corpus(manifest):
    """Load a corpus from a manifest CSV (paths relative to the manifest)."""
    manifest = Path(manifest)
    clips, valid = [], set()
    for row in read_manifest(manifest):
        wav = load_wav(manifest.parent / row["path"])
        clips.append(LabeledClip(wav, int(row["class"]), row["clip_id"],
                                 row.get("disturbance") or "clean"))
        if row.get("split") == "valid":
            valid.add(row["clip_id"])
    return Corpus(clips, frozenset(valid))
