"""Iteration orchestration, evaluation probes and run bookkeeping.

A run is described by one JSON config (see ``DEFAULT_CONFIG`` and the README
for the schema). Each stage writes into ``<out>/<stage name>/``:

    tokenizer.ckpt          sub-stage a (plus targets/*.tgt for distilled tokenizers)
    tokens/<clip>.tok       sub-stage b
    model.ckpt              sub-stage c
    classifier.ckpt         sub-stage d (only when the stage fine-tunes)
    metrics.json            sub-stage e
    *_metrics.csv           per-step training logs
    progress.json           completed sub-stages and the stage config hash
"""

import copy
import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import normalized_mutual_info_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .checkpoint import load_estimator, save_estimator
from .corpus import DEFAULT_CLASSES, default_disturbances, generate_corpus, read_corpus
from .exceptions import ConfigError, ContractError, DependencyError, FormatError
from .features import AUDIOSET_STATS, FbankExtractor
from .io import read_tokens, write_targets, write_tokens
from .rptok import RandomProjectionTokenizer
from .sdtok import SelfDistilledTokenizer, codebook_utilization
from .ssl_model import AudioClassifier, MaskedAudioModel

SUBSTAGES = ("a", "b", "c", "d", "e")
TOKENIZER_KINDS = ("random_projection", "self_distilled")
TEACHER_KINDS = ("pretrained", "finetuned")

DEFAULT_STAGES = [
    {"name": "iter1", "iteration": 1, "tokenizer_kind": "random_projection", "teacher": None,
     "teacher_kind": "pretrained", "pretrain_steps": None, "finetune": False, "seed": 0},
    {"name": "iter2", "iteration": 2, "tokenizer_kind": "self_distilled", "teacher": "iter1",
     "teacher_kind": "pretrained", "pretrain_steps": None, "finetune": True, "seed": 0},
    {"name": "iter3", "iteration": 3, "tokenizer_kind": "self_distilled", "teacher": "iter2",
     "teacher_kind": "pretrained", "pretrain_steps": None, "finetune": False, "seed": 0},
    {"name": "iter3plus", "iteration": 3, "tokenizer_kind": "self_distilled", "teacher": "iter2",
     "teacher_kind": "finetuned", "pretrain_steps": None, "finetune": False, "seed": 0},
]

DEFAULT_CONFIG = {
    "out": "runs/default",
    "corpus": {"n_per_class": 20, "seed": 0, "manifest": None},
    "features": {"stats": "corpus"},
    "random_projection": {"n_codes": 64, "code_dim": 256},
    "self_distilled": {
        "n_codes": 64, "code_dim": 32, "hidden": 64, "encoder_depth": 2, "estimator_depth": 1,
        "heads": 4, "mlp_ratio": 4.0, "max_patches": 64, "steps": 400, "batch_size": 8,
        "lr": 1e-3, "warmup_steps": 20, "weight_decay": 0.01, "dropout": 0.0, "decay": 0.99,
        "ema_eps": 1e-5, "codebook_mode": "ema", "estimator_input": "raw",
        "dead_code_epochs": 2,
    },
    "model": {
        "depth": 2, "hidden": 64, "heads": 4, "mlp_ratio": 4.0, "predictor_depth": 2,
        "max_patches": 64, "deepnorm": True, "mask_fill": "zeros", "mask_ratio": 0.75,
        "steps": 2000, "batch_size": 8, "lr": 5e-4, "warmup_steps": 100,
        "weight_decay": 0.01, "dropout": 0.0,
    },
    "finetune": {
        "steps": 300, "batch_size": 8, "lr": 1e-3, "warmup_steps": 20, "weight_decay": 0.01,
        "mixup_alpha": 0.0, "specaug_time": 0.0, "specaug_freq": 0.0, "layer_decay": 1.0,
        "layer_drop": 0.0, "dropout": 0.0,
    },
    "probe": {"C": 1.0, "max_iter": 5000},
    "stages": DEFAULT_STAGES,
}

_STAGE_KEYS = set(DEFAULT_STAGES[0])


# -- config handling ------------------------------------------------------------

def _check_keys(cfg, schema, where):
    for key, value in cfg.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(schema[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {where}{key} must be an object")
        if isinstance(schema[key], dict):
            _check_keys(value, schema[key], f"{where}{key}.")


def _merge(base, new):
    out = copy.deepcopy(base)
    for key, value in new.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def make_config(user=None):
    """Defaults merged with ``user``; unknown keys are rejected."""
    user = user or {}
    _check_keys(user, DEFAULT_CONFIG, "")
    cfg = _merge(DEFAULT_CONFIG, user)
    IterationPlan.from_config(cfg)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return make_config(doc)


def _coerce(value, default, key):
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


def apply_override(cfg, assignment):
    """Apply ``dotted.key=value`` (value parsed as JSON, else taken as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node, schema = cfg, DEFAULT_CONFIG
    for p in parts[:-1]:
        if not isinstance(schema, dict) or p not in schema or not isinstance(schema[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node, schema = node[p], schema[p]
    leaf = parts[-1]
    if not isinstance(schema, dict) or leaf not in schema:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(schema[leaf], dict):
        raise ConfigError(f"{key} is a section; override one of its keys")
    node[leaf] = _coerce(value, schema[leaf], key)
    return cfg


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def worker_count():
    """Worker cap from ``BEATS_FORGE_THREADS`` (default: CPU count)."""
    raw = os.environ.get("BEATS_FORGE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BEATS_FORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BEATS_FORGE_THREADS must be a positive integer, got {raw!r}")
    return n


# -- plan -----------------------------------------------------------------------

@dataclass
class StageSpec:
    name: str
    iteration: int
    tokenizer_kind: str
    teacher: str = None
    teacher_kind: str = "pretrained"
    pretrain_steps: int = None
    finetune: bool = False
    seed: int = 0


@dataclass
class IterationPlan:
    stages: list
    output_dir: Path

    @classmethod
    def from_config(cls, cfg):
        raw = cfg.get("stages") or []
        if not raw:
            raise ConfigError("plan has no stages")
        stages = []
        for i, s in enumerate(raw):
            if not isinstance(s, dict):
                raise ConfigError(f"stage {i} must be an object")
            unknown = set(s) - _STAGE_KEYS
            if unknown:
                raise ConfigError(f"stage {i}: unknown keys {sorted(unknown)}")
            stages.append(StageSpec(**s))
        plan = cls(stages, Path(cfg.get("out") or "."))
        plan.validate()
        return plan

    def validate(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate stage names {names}")
        for i, s in enumerate(self.stages):
            if s.tokenizer_kind not in TOKENIZER_KINDS:
                raise ConfigError(f"stage {s.name}: tokenizer_kind must be one of {TOKENIZER_KINDS}")
            if s.teacher_kind not in TEACHER_KINDS:
                raise ConfigError(f"stage {s.name}: teacher_kind must be one of {TEACHER_KINDS}")
            if i == 0 and (s.tokenizer_kind != "random_projection" or s.iteration != 1):
                raise ConfigError("the first stage must be iteration 1 with random_projection")
            if s.tokenizer_kind == "random_projection":
                if s.iteration != 1 or s.teacher is not None:
                    raise ConfigError(f"stage {s.name}: random_projection stages are iteration 1 "
                                      f"and take no teacher")
                continue
            earlier = {t.name: t for t in self.stages[:i]}
            teacher = earlier.get(s.teacher)
            if teacher is None:
                raise ConfigError(f"stage {s.name}: teacher {s.teacher!r} is not an earlier stage")
            if teacher.iteration != s.iteration - 1:
                raise ConfigError(f"stage {s.name} (iteration {s.iteration}) must be taught by an "
                                  f"iteration {s.iteration - 1} stage, got {teacher.name}")
            if s.teacher_kind == "finetuned" and not teacher.finetune:
                raise ConfigError(f"stage {s.name}: teacher {teacher.name} does not fine-tune")

    def index(self, stage):
        """Resolve a 1-based stage number or a stage name to a 0-based index."""
        if isinstance(stage, str) and not stage.isdigit():
            for i, s in enumerate(self.stages):
                if s.name == stage:
                    return i
            raise ConfigError(f"no stage named {stage!r}")
        i = int(stage) - 1
        if not 0 <= i < len(self.stages):
            raise ConfigError(f"stage {stage} out of range 1..{len(self.stages)}")
        return i

    def stage_dir(self, i):
        return self.output_dir / self.stages[i].name


# -- data context ---------------------------------------------------------------

@dataclass
class DataContext:
    """Corpus, features and split of one run (pure function of the config)."""

    clips: list
    patches: list
    labels: np.ndarray
    is_valid: np.ndarray
    extractor: FbankExtractor

    @classmethod
    def from_config(cls, cfg):
        ccfg, fcfg = cfg["corpus"], cfg["features"]
        if ccfg.get("manifest"):
            corpus = read_corpus(ccfg["manifest"])
        else:
            corpus = generate_corpus(DEFAULT_CLASSES, ccfg["n_per_class"], ccfg["seed"])
        clips = sorted(corpus.clips, key=lambda c: c.clip_id)
        is_valid = np.array([c.clip_id in corpus.valid_ids for c in clips])
        if fcfg["stats"] == "audioset":
            extractor = FbankExtractor(stats=AUDIOSET_STATS).fit()
        elif fcfg["stats"] == "corpus":
            extractor = FbankExtractor().fit([c.waveform for c, v in zip(clips, is_valid) if not v])
        else:
            raise ConfigError(f"features.stats must be 'corpus' or 'audioset', got {fcfg['stats']!r}")
        patches = extractor.transform([c.waveform for c in clips])
        for c, p in zip(clips, patches):
            p.clip_id = c.clip_id
        return cls(clips, patches, np.array([c.class_id for c in clips]), is_valid, extractor)

    def split(self, which):
        mask = self.is_valid if which == "valid" else ~self.is_valid
        idx = np.nonzero(mask)[0]
        return [self.patches[i] for i in idx], self.labels[idx], idx


# -- evaluation -----------------------------------------------------------------

def _as_model(model):
    if isinstance(model, (str, Path)):
        model = load_estimator(model)
    if hasattr(model, "transform"):
        return model
    raise ConfigError(f"cannot probe a {type(model).__name__}")


def linear_probe(model, train_X, train_y, valid_X, valid_y, C=1.0, max_iter=5000):
    """Held-out accuracy of a linear classifier on frozen mean-pooled features."""
    model = _as_model(model)
    if len(np.unique(train_y)) < 2:
        raise ConfigError("linear probe needs at least two classes in the training split")
    if len(valid_X) == 0:
        raise ConfigError("linear probe needs a non-empty validation split")
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter))
    clf.fit(model.transform(train_X), train_y)
    return float(clf.score(model.transform(valid_X), valid_y))


def majority_tokens(token_seqs):
    """Most frequent token of each clip (ties -> smallest token)."""
    return np.array([np.bincount(np.asarray(t)).argmax() for t in token_seqs])


def token_class_nmi(token_seqs, class_labels):
    """NMI (arithmetic normalisation) between clip-majority tokens and classes.

    A constant tokenizer carries no class information and scores 0, including
    the degenerate single-class case that the plain formula leaves undefined.
    """
    if len(token_seqs) == 0:
        raise ValueError("token_class_nmi needs at least one clip")
    majority = majority_tokens(token_seqs)
    if len(np.unique(majority)) == 1:
        return 0.0
    return float(normalized_mutual_info_score(np.asarray(class_labels), majority))


def token_agreement(clean_seqs, disturbed_seqs):
    """Mean fraction of positions whose tokens are unchanged by the disturbance."""
    if len(clean_seqs) == 0:
        raise ValueError("token_agreement needs at least one clip")
    rates = []
    for a, b in zip(clean_seqs, disturbed_seqs):
        a, b = np.asarray(a), np.asarray(b)
        if a.shape != b.shape:
            raise ContractError(f"disturbed sequence length {b.shape} != clean {a.shape}")
        rates.append(np.mean(a == b))
    return float(np.mean(rates))


@dataclass
class TokenQualityReport:
    utilization: float
    perplexity: float
    nmi: float
    agreement: float

    def as_dict(self):
        return {"utilization": self.utilization, "perplexity": self.perplexity,
                "nmi": self.nmi, "agreement": self.agreement}


def token_quality(tokenizer, clips, extractor, disturbance_seed=0):
    """Utilisation / NMI / disturbance agreement of ``tokenizer`` on labeled clips."""
    if len(clips) == 0:
        raise ValueError("token_quality needs a non-empty corpus")
    clean = tokenizer.transform(extractor.transform([c.waveform for c in clips]))
    used, ppl = codebook_utilization(clean, tokenizer.n_codes)
    disturbed_clips, repeats = [], []
    for c in clips:
        variants = default_disturbances(c, disturbance_seed)
        disturbed_clips.extend(variants)
        repeats.append(len(variants))
    disturbed = tokenizer.transform(extractor.transform([c.waveform for c in disturbed_clips]))
    paired_clean = [seq for seq, r in zip(clean, repeats) for _ in range(r)]
    return TokenQualityReport(used, ppl, token_class_nmi(clean, [c.class_id for c in clips]),
                              token_agreement(paired_clean, disturbed))


# -- artifacts ------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_metrics_csv(path, history):
    """One row per logged step; columns are the union of metric names, ``step`` first."""
    keys = sorted({k for row in history for k in row} - {"step"})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + keys)
        for i, row in enumerate(history):
            writer.writerow([row.get("step", i)] + [repr(float(row[k])) if k in row else ""
                                                     for k in keys])
    return Path(path)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def save(self, path):
        doc = {"config_hash": self.config_hash, "seeds": self.seeds, "stages": self.stages}
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path, verify=True):
        path = Path(path)
        doc = json.loads(path.read_text())
        out = cls(doc["config_hash"], doc.get("seeds", {}), doc.get("stages", {}))
        if verify:
            for name, entry in out.stages.items():
                for rel, digest in entry.get("hashes", {}).items():
                    f = path.parent / rel
                    if not f.exists():
                        raise FormatError(f"stage {name}: missing artifact {f}")
                    if sha256_file(f) != digest:
                        raise FormatError(f"stage {name}: hash mismatch for {f}")
        return out


def _progress(stage_dir):
    p = stage_dir / "progress.json"
    return json.loads(p.read_text()) if p.exists() else None


def _mark(stage_dir, digest, completed):
    (stage_dir / "progress.json").write_text(
        json.dumps({"config_hash": digest, "completed": completed}, indent=2) + "\n")


def _teacher_path(plan, stage):
    tdir = plan.output_dir / stage.teacher
    return tdir / ("classifier.ckpt" if stage.teacher_kind == "finetuned" else "model.ckpt")


def stage_hash(cfg, plan, i):
    stage = plan.stages[i]
    body = {k: v for k, v in cfg.items() if k not in ("out", "stages")}
    body["stage"] = vars(stage)
    if stage.teacher is not None:
        tp = _teacher_path(plan, stage)
        if not tp.exists():
            raise DependencyError(f"stage {stage.name} needs teacher checkpoint {tp}; "
                                  f"run stage {stage.teacher} first")
        body["teacher_sha256"] = sha256_file(tp)
    return config_hash(body)


def _tokenizer_for(cfg, stage):
    if stage.tokenizer_kind == "random_projection":
        return RandomProjectionTokenizer(seed=stage.seed, **cfg["random_projection"])
    return SelfDistilledTokenizer(seed=stage.seed, **cfg["self_distilled"])


def run_iteration(cfg, stage, data=None, force=False, log=None, until="e"):
    """Run (or resume) one stage through sub-stage ``until``.

    Returns the stage's run-manifest entry once sub-stage ``e`` is complete,
    otherwise the list of completed sub-stages.
    """
    if until not in SUBSTAGES:
        raise ConfigError(f"until must be one of {SUBSTAGES}")
    plan = IterationPlan.from_config(cfg)
    i = plan.index(stage)
    spec = plan.stages[i]
    sdir = plan.stage_dir(i)
    digest = stage_hash(cfg, plan, i)
    progress = _progress(sdir)
    if progress is not None and not force and progress["config_hash"] != digest:
        raise ContractError(f"{sdir} was produced by a different configuration "
                            f"(hash {progress['config_hash'][:12]} != {digest[:12]}); "
                            f"refusing to resume")
    done = [] if force or progress is None else list(progress["completed"])
    sdir.mkdir(parents=True, exist_ok=True)
    _mark(sdir, digest, done)
    say = log or (lambda msg: None)
    data = data or DataContext.from_config(cfg)
    train_X, train_y, train_idx = data.split("train")
    valid_X, valid_y, _ = data.split("valid")

    def finish(step):
        done.append(step)
        _mark(sdir, digest, done)

    def reached(step):
        return SUBSTAGES.index(step) >= SUBSTAGES.index(until)

    # (a) tokenizer
    tok_path = sdir / "tokenizer.ckpt"
    if "a" in done:
        tokenizer = load_estimator(tok_path)
    else:
        say(f"[{spec.name}] a: tokenizer ({spec.tokenizer_kind})")
        tokenizer = _tokenizer_for(cfg, spec)
        if spec.tokenizer_kind == "random_projection":
            tokenizer.fit()
        else:
            teacher = load_estimator(_teacher_path(plan, spec))
            targets = teacher.teacher_targets(train_X)
            tdir = sdir / "targets"
            tdir.mkdir(exist_ok=True)
            kind = targets[0].kind
            for p, t in zip(train_X, targets):
                write_targets(tdir / f"{p.clip_id}.tgt", t.vectors, kind)
            tokenizer.fit(train_X, targets)
            write_metrics_csv(sdir / "tokenizer_metrics.csv", tokenizer.history_)
        save_estimator(tok_path, tokenizer)
        finish("a")
    if reached("a"):
        return done

    # (b) tokens for every clip, ordered by clip id
    tok_dir = sdir / "tokens"
    if "b" in done:
        tokens = [read_tokens(tok_dir / f"{p.clip_id}.tok")[0] for p in data.patches]
    else:
        say(f"[{spec.name}] b: tokenize {len(data.patches)} clips")
        tok_dir.mkdir(exist_ok=True)
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            tokens = list(pool.map(lambda p: tokenizer.tokenize(p).labels, data.patches))
        for p, t in zip(data.patches, tokens):
            write_tokens(tok_dir / f"{p.clip_id}.tok", t, tokenizer.n_codes)
        finish("b")
    if reached("b"):
        return done

    # (c) masked-label pre-training
    model_path = sdir / "model.ckpt"
    if "c" in done:
        model = load_estimator(model_path)
    else:
        mcfg = dict(cfg["model"])
        if spec.pretrain_steps is not None:
            mcfg["steps"] = spec.pretrain_steps
        say(f"[{spec.name}] c: pre-train {mcfg['steps']} steps")
        model = MaskedAudioModel(n_codes=tokenizer.n_codes, seed=spec.seed, **mcfg)
        model.fit(train_X, [tokens[j] for j in train_idx])
        write_metrics_csv(sdir / "pretrain_metrics.csv", model.history_)
        save_estimator(model_path, model)
        finish("c")
    if reached("c"):
        return done

    # (d) optional fine-tuning
    clf_path = sdir / "classifier.ckpt"
    if spec.finetune and "d" not in done:
        say(f"[{spec.name}] d: fine-tune {cfg['finetune']['steps']} steps")
        clf = AudioClassifier(backbone=model, seed=spec.seed, **cfg["finetune"])
        clf.fit(train_X, train_y)
        write_metrics_csv(sdir / "finetune_metrics.csv", clf.history_)
        save_estimator(clf_path, clf)
        finish("d")
    if reached("d"):
        return done

    # (e) evaluation and manifest
    metrics_path = sdir / "metrics.json"
    if "e" not in done:
        say(f"[{spec.name}] e: evaluate")
        metrics = {
            "probe_accuracy": linear_probe(model, train_X, train_y, valid_X, valid_y,
                                           **cfg["probe"]),
            "tokens": token_quality(tokenizer, data.clips, data.extractor, spec.seed).as_dict(),
        }
        if spec.finetune:
            clf = load_estimator(clf_path)
            metrics["finetune_accuracy"] = float(clf.score(valid_X, valid_y))
        metrics_path.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
        finish("e")
    return _record(cfg, plan, i, digest)


def _record(cfg, plan, i, digest):
    spec = plan.stages[i]
    sdir = plan.stage_dir(i)
    root = plan.output_dir
    files = {"tokenizer": "tokenizer.ckpt", "model": "model.ckpt", "metrics": "metrics.json"}
    if spec.finetune:
        files["classifier"] = "classifier.ckpt"
    logs = sorted(p.name for p in sdir.glob("*_metrics.csv"))
    rel = {k: (sdir / v).relative_to(root).as_posix() for k, v in files.items()}
    log_rel = [(sdir / name).relative_to(root).as_posix() for name in logs]
    entry = {"config_hash": digest, "seed": spec.seed, "checkpoints": rel, "metric_logs": log_rel,
             "hashes": {p: sha256_file(root / p) for p in list(rel.values()) + log_rel}}
    mpath = root / "run_manifest.json"
    run_hash = config_hash({k: v for k, v in cfg.items() if k != "out"})
    manifest = RunManifest.load(mpath, verify=False) if mpath.exists() else RunManifest(run_hash)
    if manifest.config_hash != run_hash:
        manifest = RunManifest(run_hash)
    manifest.seeds[spec.name] = spec.seed
    manifest.stages[spec.name] = entry
    manifest.save(mpath)
    return entry


def run_plan(cfg, log=None):
    """Run every stage in order, sharing one data context."""
    plan = IterationPlan.from_config(cfg)
    data = DataContext.from_config(cfg)
    return {s.name: run_iteration(cfg, s.name, data=data, log=log) for s in plan.stages}

