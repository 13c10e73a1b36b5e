"""ViT-style audio backbone: masked label prediction and classification heads."""

import copy
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .exceptions import ConfigError, ModeError, NonFiniteError, ShapeError
from .features import (FREQ_PATCHES, N_MELS, PATCH, PATCH_DIM, FbankMatrix, PatchSequence,
                       patchify, unpatchify)
from .numcore.nn import LayerNorm, Linear, Module, TransformerStack, parameter
from .sdtok import TeacherTargets
from .validation import as_patch_array, check_patch_sequences, length_batches


@dataclass
class BackboneConfig:
    depth: int = 12
    hidden: int = 768
    heads: int = 8
    patch_dim: int = PATCH_DIM
    max_patches: int = 512
    mlp_ratio: float = 4.0
    deepnorm: bool = True
    predictor_depth: int = 2
    n_codes: int = 1024
    mask_fill: str = "zeros"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.mask_fill not in ("zeros", "learned"):
            raise ConfigError(f"mask_fill must be 'zeros' or 'learned', got {self.mask_fill!r}")


@dataclass
class MaskSpec:
    masked: np.ndarray
    total: int
    ratio: float

    @property
    def unmasked(self):
        return np.setdiff1d(np.arange(self.total), self.masked)


@dataclass
class MixupBatch:
    inputs: np.ndarray
    labels: np.ndarray
    lam: float
    partner: np.ndarray


class Backbone(Module):
    """Patch projection + learned absolute positions + post-norm DeepNorm stack."""

    def __init__(self, cfg, rng):
        self.patch_proj = Linear(cfg.patch_dim, cfg.hidden, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.max_patches, cfg.hidden)))
        self.ln_in = LayerNorm(cfg.hidden)
        norm = "post" if cfg.deepnorm else "pre"
        self.stack = TransformerStack(cfg.hidden, cfg.depth, cfg.heads, rng, cfg.mlp_ratio, norm)
        self.max_patches = cfg.max_patches

    def __call__(self, x, positions, rng=None, dropout=0.0, layer_drop=0.0, return_all=False):
        positions = np.asarray(positions)
        if positions.size and positions.max() >= self.max_patches:
            raise ShapeError(f"position {positions.max()} exceeds max_patches {self.max_patches}")
        h = self.ln_in(self.patch_proj(x) + self.pos_embed[positions])
        return self.stack(h, rng, dropout, layer_drop, return_all)


class LabelPredictor(Module):
    """Full-length transformer over scattered representations -> K logits."""

    def __init__(self, cfg, rng):
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.max_patches, cfg.hidden)))
        self.mask_token = (parameter(rng.normal(0.0, 0.02, size=cfg.hidden))
                           if cfg.mask_fill == "learned" else None)
        self.stack = TransformerStack(cfg.hidden, cfg.predictor_depth, cfg.heads, rng,
                                      cfg.mlp_ratio, norm="pre")
        self.head = Linear(cfg.hidden, cfg.n_codes, rng)

    def __call__(self, full, masked_indicator=None, rng=None, dropout=0.0):
        t = full.shape[1]
        h = full + self.pos_embed[:t]
        if self.mask_token is not None and masked_indicator is not None:
            h = h + nc.Tensor(masked_indicator[..., None]) * self.mask_token
        return self.head(self.stack(h, rng, dropout))


class AudioSSLModel(Module):
    """Backbone plus either a label predictor (pretrain) or a classifier (finetune)."""

    def __init__(self, cfg, rng):
        self.config = cfg
        self.backbone = Backbone(cfg, rng)
        self.predictor = LabelPredictor(cfg, rng)
        self.classifier = None

    @property
    def mode(self):
        return "finetune" if self.classifier is not None else "pretrain"

    def attach_classifier(self, n_classes, rng):
        self.predictor = None
        self.classifier = Linear(self.config.hidden, n_classes, rng)
        self.classifier.weight.data[:] = rng.normal(0.0, 0.02, size=self.classifier.weight.shape)
        return self

    def layer_ids(self):
        """Per-parameter depth index: 0 embeddings, i + 1 block i, depth + 1 heads."""
        depth = len(self.backbone.stack.blocks)
        ids = []
        for name, _ in self.named_parameters():
            if name.startswith("backbone.stack.blocks."):
                ids.append(int(name.split(".")[3]) + 1)
            elif name.startswith("backbone."):
                ids.append(0)
            else:
                ids.append(depth + 1)
        return ids


# -- masking and pre-training ---------------------------------------------------

def mask_count(total, ratio):
    """Half-up rounded ``ratio * total`` clamped to [1, total - 1]."""
    return min(max(int(math.floor(ratio * total + 0.5)), 1), total - 1)


def sample_mask(total, ratio=0.75, rng=None):
    """Uniformly choose ``mask_count(total, ratio)`` positions without replacement."""
    if total < 2:
        raise ShapeError(f"need at least 2 patches to mask, got {total}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    rng = rng if rng is not None else np.random.default_rng()
    chosen = rng.choice(total, size=mask_count(total, ratio), replace=False)
    return MaskSpec(np.sort(chosen), total, ratio)


def _batch_inputs(x):
    x = x.data if isinstance(x, nc.Tensor) else np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def _as_masks(masks):
    return [masks] if isinstance(masks, MaskSpec) else list(masks)


def encode_unmasked(model, X, masks, rng=None, dropout=0.0):
    """Encode only the unmasked patches at their own positions -> (B, T - |M|, H)."""
    xb = _batch_inputs(X)
    masks = _as_masks(masks)
    if len(masks) != xb.shape[0] or any(m.total != xb.shape[1] for m in masks):
        raise ShapeError(f"masks do not match input batch of shape {xb.shape}")
    keep = np.stack([m.unmasked for m in masks])
    xu = nc.gather_rows(nc.Tensor(xb), keep)
    return model.backbone(xu, keep, rng, dropout)


def predict_labels(model, unmasked_repr, masks, rng=None, dropout=0.0):
    """Scatter unmasked representations, zero-fill masked slots, predict K logits."""
    if model.predictor is None:
        raise ModeError("model has no label predictor (fine-tuning mode)")
    masks = _as_masks(masks)
    keep = np.stack([m.unmasked for m in masks])
    total = masks[0].total
    full = nc.scatter_rows(unmasked_repr, keep, total)
    indicator = np.zeros((len(masks), total))
    for b, m in enumerate(masks):
        indicator[b, m.masked] = 1.0
    return model.predictor(full, indicator, rng, dropout)


def mam_loss(logits, targets, masks):
    """Mean cross-entropy over masked positions only."""
    logits = nc.as_tensor(logits)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    masks = _as_masks(masks)
    targets = np.asarray(getattr(targets, "labels", targets))
    if targets.ndim == 1:
        targets = targets[None]
    if targets.shape != logits.shape[:2] or len(masks) != logits.shape[0]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    if any(len(m.masked) == 0 for m in masks):
        raise ShapeError("mask is empty")
    idx = np.stack([m.masked for m in masks])
    picked = nc.gather_rows(logits, idx)
    flat = picked.reshape(-1, logits.shape[-1])
    tgt = np.take_along_axis(targets, idx, axis=1).reshape(-1)
    return nc.softmax_cross_entropy(flat, tgt)


def pretrain_step(model, xb, labels, optimizer, rng, mask_ratio=0.75, dropout=0.0, lr=None):
    """mask -> encode -> predict -> loss -> backward -> AdamW. Returns metrics."""
    xb = _batch_inputs(xb)
    labels = np.asarray(labels)
    masks = [sample_mask(xb.shape[1], mask_ratio, rng) for _ in range(xb.shape[0])]
    if lr is not None:
        optimizer.lr = lr
    optimizer.zero_grad()
    r_u = encode_unmasked(model, xb, masks, rng, dropout)
    logits = predict_labels(model, r_u, masks, rng, dropout)
    loss = mam_loss(logits, labels, masks)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"pre-training loss is {value}")
    nc.backward(loss)
    optimizer.step()
    idx = np.stack([m.masked for m in masks])
    pred = np.take_along_axis(logits.data.argmax(axis=-1), idx, axis=1)
    acc = float(np.mean(pred == np.take_along_axis(labels, idx, axis=1)))
    return {"loss": value, "accuracy": acc, "lr": optimizer.lr}


# -- fine-tuning -------------------------------------------------------------------

def encode_full(model, X, rng=None, dropout=0.0, layer_drop=0.0):
    xb = _batch_inputs(X)
    positions = np.broadcast_to(np.arange(xb.shape[1]), xb.shape[:2])
    return model.backbone(nc.Tensor(xb), positions, rng, dropout, layer_drop)


def classifier_logits(model, X, rng=None, dropout=0.0, layer_drop=0.0):
    """``MeanPool(W_c R)`` -> (B, C)."""
    if model.classifier is None:
        raise ModeError("model has no classifier head attached")
    r = encode_full(model, X, rng, dropout, layer_drop)
    return nc.mean_pool(model.classifier(r), axis=1)


def finetune_forward(model, X, multilabel=False):
    """Class probabilities: softmax (single-label) or elementwise sigmoid."""
    with nc.no_grad():
        logits = classifier_logits(model, X)
    return nc.sigmoid(logits).data if multilabel else nc.softmax(logits, axis=-1).data


def finetune_loss(logits, labels, mode="ce_single"):
    """Soft-label cross-entropy (``ce_single``) or mean BCE (``bce_multi``)."""
    if mode == "ce_single":
        return nc.soft_cross_entropy(logits, labels)
    if mode == "bce_multi":
        return nc.binary_cross_entropy_with_logits(logits, labels)
    raise ConfigError(f"unknown fine-tune loss mode {mode!r}")


def mixup(inputs, labels, alpha=0.8, rng=None, lam=None):
    """Convex combination with a shuffled partner, weight ``lam ~ Beta(alpha, alpha)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = inputs.shape[0]
    if n < 2 or (lam is None and alpha <= 0):
        return MixupBatch(inputs.copy(), labels.copy(), 1.0, np.arange(n))
    rng = rng if rng is not None else np.random.default_rng()
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    partner = rng.permutation(n)
    return MixupBatch(lam * inputs + (1.0 - lam) * inputs[partner],
                      lam * labels + (1.0 - lam) * labels[partner], float(lam), partner)


def _stripe(length, max_width, rng):
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, length - width + 1))
    return start, width


def specaugment(fbank, time_frac=0.3, freq_frac=0.3, rng=None, fill=0.0):
    """Fill one time stripe and one frequency stripe with ``fill``.

    Stripe widths are uniform on ``[0, floor(frac * size)]`` and starts are
    uniform over every position where the stripe fits.
    """
    f = np.array(fbank.frames if isinstance(fbank, FbankMatrix) else fbank, dtype=np.float64)
    if not (0.0 <= time_frac < 1.0 and 0.0 <= freq_frac < 1.0):
        raise ConfigError("specaugment fractions must lie in [0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    n_t, n_f = f.shape
    t0, tw = _stripe(n_t, int(time_frac * n_t), rng)
    f0, fw = _stripe(n_f, int(freq_frac * n_f), rng)
    f[t0:t0 + tw, :] = fill
    f[:, f0:f0 + fw] = fill
    return FbankMatrix(f)


def _grid_of(x):
    if hasattr(x, "grid"):
        return x.grid, x.n_frames
    t = len(as_patch_array(x))
    rows = t // FREQ_PATCHES
    return (rows, FREQ_PATCHES), rows * PATCH


def augment_patches(x, time_frac, freq_frac, rng):
    """SpecAugment applied in the feature domain, then re-patched."""
    arr = as_patch_array(x)
    grid, n_frames = _grid_of(x)
    if grid[1] * PATCH != N_MELS or arr.shape[1] != PATCH_DIM:
        return arr
    f = unpatchify(PatchSequence(arr, grid, n_frames))
    return patchify(specaugment(f, time_frac, freq_frac, rng)).patches


def extract_teacher_targets(model, X, kind="ssl_last_layer"):
    """Per-patch distillation targets for one sequence."""
    x = as_patch_array(X)
    with nc.no_grad():
        if kind == "ssl_last_layer":
            if model.mode != "pretrain":
                raise ModeError("ssl_last_layer targets need a pre-trained (not fine-tuned) model")
            return TeacherTargets(encode_full(model, x).data[0], kind)
        if kind == "finetuned_logits":
            if model.mode != "finetune":
                raise ModeError("finetuned_logits targets need a fine-tuned model")
            logits = classifier_logits(model, x).data[0]
            return TeacherTargets(np.repeat(logits[None], len(x), axis=0), kind)
    raise ConfigError(f"unknown target kind {kind!r}")


# -- estimators ----------------------------------------------------------------------

class MaskedAudioModel(TransformerMixin, BaseEstimator):
    """Masked Audio Modeling pre-training on tokenizer labels.

    ``fit(X, tokens)`` pre-trains; ``transform(X)`` returns mean-pooled
    clip representations from the full (unmasked) forward pass.
    """

    def __init__(self, n_codes=1024, depth=12, hidden=768, heads=8, mlp_ratio=4.0,
                 predictor_depth=2, max_patches=512, patch_dim=PATCH_DIM, deepnorm=True,
                 mask_fill="zeros", mask_ratio=0.75, steps=1000, batch_size=8, lr=5e-4,
                 warmup_steps=0, weight_decay=0.01, dropout=0.1, seed=0):
        self.n_codes = n_codes
        self.depth = depth
        self.hidden = hidden
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.predictor_depth = predictor_depth
        self.max_patches = max_patches
        self.patch_dim = patch_dim
        self.deepnorm = deepnorm
        self.mask_fill = mask_fill
        self.mask_ratio = mask_ratio
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.seed = seed

    def config(self):
        return BackboneConfig(self.depth, self.hidden, self.heads, self.patch_dim,
                              self.max_patches, self.mlp_ratio, self.deepnorm,
                              self.predictor_depth, self.n_codes, self.mask_fill)

    def initialize(self):
        """Fresh seeded weights and optimizer, no training."""
        self.rng_ = np.random.default_rng(self.seed)
        self.model_ = AudioSSLModel(self.config(), self.rng_)
        self.optimizer_ = nc.AdamW(self.model_.parameters(), lr=self.lr,
                                   weight_decay=self.weight_decay)
        self.step_ = 0
        self.history_ = []
        return self

    def fit(self, X, tokens):
        seqs, lengths = check_patch_sequences(X, self.patch_dim)
        labels = [np.asarray(getattr(t, "labels", t)) for t in tokens]
        for i, (lab, n) in enumerate(zip(labels, lengths)):
            if lab.shape != (n,):
                raise ShapeError(f"tokens[{i}] has shape {lab.shape}, expected ({n},)")
            if lab.size and (lab.min() < 0 or lab.max() >= self.n_codes):
                raise ShapeError(f"tokens[{i}] outside [0, {self.n_codes})")
        self.initialize()
        return self.run(seqs, labels, self.steps)

    def run(self, seqs, labels, n_steps):
        lengths = [len(s) for s in seqs]
        done = 0
        while done < n_steps:
            for idx in length_batches(lengths, self.batch_size, self.rng_):
                if done >= n_steps:
                    break
                lr = nc.linear_warmup_decay(self.step_, self.steps, self.warmup_steps, self.lr)
                xb = np.stack([seqs[i] for i in idx])
                yb = np.stack([labels[i] for i in idx])
                m = pretrain_step(self.model_, xb, yb, self.optimizer_, self.rng_,
                                  self.mask_ratio, self.dropout, lr)
                m["step"] = self.step_
                self.history_.append(m)
                self.step_ += 1
                done += 1
        return self

    def representations(self, patches):
        """Per-patch last-layer outputs (T, hidden)."""
        check_is_fitted(self, "model_")
        with nc.no_grad():
            return encode_full(self.model_, as_patch_array(patches)).data[0]

    def transform(self, X):
        return np.stack([self.representations(x).mean(axis=0) for x in X])

    def teacher_targets(self, X):
        check_is_fitted(self, "model_")
        return [extract_teacher_targets(self.model_, x, "ssl_last_layer") for x in X]

    def state_arrays(self):
        check_is_fitted(self, "model_")
        arrays = {f"model.{k}": v for k, v in self.model_.state_dict().items()}
        arrays.update({f"optim.{k}": v for k, v in self.optimizer_.state_arrays().items()})
        return arrays

    def state_meta(self):
        return {"step": self.step_, "optim_step": self.optimizer_.state.step,
                "optim_lr": self.optimizer_.lr, "rng": self.rng_.bit_generator.state}

    def load_state(self, arrays, meta):
        self.initialize()
        self.model_.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        self.optimizer_.load_state_arrays({k[6:]: v for k, v in arrays.items()
                                           if k.startswith("optim.")}, meta["optim_step"])
        self.optimizer_.lr = meta["optim_lr"]
        self.step_ = meta["step"]
        self.rng_.bit_generator.state = meta["rng"]
        return self


class AudioClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes a backbone with a mean-pooled linear head.

    Parameters
    ----------
    backbone : MaskedAudioModel or None
        Pre-trained model to start from (copied, never modified). When None a
        freshly initialised backbone of ``backbone_params`` is used.
    multilabel : bool
        ``y`` is a (n, C) multi-hot matrix and BCE is used.
    mixup_alpha, specaug_time, specaug_freq : float
        Augmentation strengths (0 disables).
    layer_decay : float
        Layer-wise learning-rate decay factor.
    """

    def __init__(self, backbone=None, backbone_params=None, multilabel=False, steps=500,
                 batch_size=8, lr=1e-4, warmup_steps=0, weight_decay=0.01, mixup_alpha=0.0,
                 specaug_time=0.0, specaug_freq=0.0, layer_decay=1.0, layer_drop=0.0,
                 dropout=0.0, seed=0):
        self.backbone = backbone
        self.backbone_params = backbone_params
        self.multilabel = multilabel
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.mixup_alpha = mixup_alpha
        self.specaug_time = specaug_time
        self.specaug_freq = specaug_freq
        self.layer_decay = layer_decay
        self.layer_drop = layer_drop
        self.dropout = dropout
        self.seed = seed

    def _encode_labels(self, y):
        if self.multilabel:
            y = np.asarray(y, dtype=np.float64)
            if y.ndim != 2:
                raise ShapeError(f"multilabel targets must be (n, C), got {y.shape}")
            self.classes_ = np.arange(y.shape[1])
            return y
        self.classes_, inv = np.unique(np.asarray(y), return_inverse=True)
        return np.eye(len(self.classes_))[inv]

    def initialize(self, n_classes):
        self.rng_ = np.random.default_rng(self.seed)
        if self.backbone is not None:
            check_is_fitted(self.backbone, "model_")
            self.model_ = copy.deepcopy(self.backbone.model_)
        else:
            params = dict(self.backbone_params or {})
            params.setdefault("seed", self.seed)
            self.model_ = MaskedAudioModel(**params).initialize().model_
        self.model_.attach_classifier(n_classes, self.rng_)
        depth = len(self.model_.backbone.stack.blocks)
        scales = [self.layer_decay ** (depth + 1 - i) for i in self.model_.layer_ids()]
        self.optimizer_ = nc.AdamW(self.model_.parameters(), lr=self.lr,
                                   weight_decay=self.weight_decay, lr_scales=scales)
        self.history_ = []
        return self

    def fit(self, X, y):
        if self.backbone is not None:
            patch_dim = self.backbone.patch_dim
        else:
            patch_dim = (self.backbone_params or {}).get("patch_dim", PATCH_DIM)
        seqs, lengths = check_patch_sequences(X, patch_dim)
        targets = self._encode_labels(y)
        if len(targets) != len(seqs):
            raise ShapeError(f"{len(seqs)} sequences but {len(targets)} labels")
        if targets.shape[1] < 2 and not self.multilabel:
            raise ConfigError("need at least two classes")
        self.initialize(targets.shape[1])
        mode = "bce_multi" if self.multilabel else "ce_single"
        step = 0
        while step < self.steps:
            for idx in length_batches(lengths, self.batch_size, self.rng_):
                if step >= self.steps:
                    break
                if self.specaug_time or self.specaug_freq:
                    xb = np.stack([augment_patches(X[i] if not isinstance(X, np.ndarray)
                                                   else seqs[i], self.specaug_time,
                                                   self.specaug_freq, self.rng_) for i in idx])
                else:
                    xb = np.stack([seqs[i] for i in idx])
                batch = mixup(xb, targets[idx], self.mixup_alpha, self.rng_)
                self.optimizer_.lr = nc.cosine_warmup(step, self.steps, self.warmup_steps,
                                                      self.lr)
                self.optimizer_.zero_grad()
                logits = classifier_logits(self.model_, batch.inputs, self.rng_, self.dropout,
                                           self.layer_drop)
                loss = finetune_loss(logits, batch.labels, mode)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"fine-tuning loss is {loss.item()} at step {step}")
                nc.backward(loss)
                self.optimizer_.step()
                self.history_.append({"step": step, "loss": loss.item(), "lr": self.optimizer_.lr})
                step += 1
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        with nc.no_grad():
            return np.stack([classifier_logits(self.model_, as_patch_array(x)).data[0]
                             for x in X])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return np.stack([finetune_forward(self.model_, as_patch_array(x), self.multilabel)[0]
                         for x in X])

    def predict(self, X):
        proba = self.predict_proba(X)
        if self.multilabel:
            return (proba >= 0.5).astype(int)
        return self.classes_[np.argmax(proba, axis=1)]

    def teacher_targets(self, X):
        check_is_fitted(self, "model_")
        return [extract_teacher_targets(self.model_, x, "finetuned_logits") for x in X]

    def state_arrays(self):
        check_is_fitted(self, "model_")
        return {f"model.{k}": v for k, v in self.model_.state_dict().items()}

    def state_meta(self):
        return {"classes": self.classes_.tolist(), "rng": self.rng_.bit_generator.state,
                "backbone_config": vars(self.model_.config)}

    def load_state(self, arrays, meta):
        self.rng_ = np.random.default_rng(self.seed)
        cfg = BackboneConfig(**meta["backbone_config"])
        self.model_ = AudioSSLModel(cfg, np.random.default_rng(0))
        self.model_.attach_classifier(len(meta["classes"]), np.random.default_rng(0))
        self.model_.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        self.classes_ = np.array(meta["classes"])
        self.rng_.bit_generator.state = meta["rng"]
        self.optimizer_ = nc.AdamW(self.model_.parameters(), lr=self.lr,
                                   weight_decay=self.weight_decay)
        return self
