"""Self-distilled VQ tokenizer.

A transformer encoder maps patches to vectors that are quantized against an
l2-normalized codebook; a small transformer estimator reads the quantized
sequence and is trained to match a teacher model's per-patch outputs under a
cosine objective. The codebook follows an exponential moving average of the
normalized encoder outputs assigned to each code.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .features import PATCH_DIM
from .io import TARGET_KINDS
from .numcore.nn import Linear, Module, TransformerStack, parameter
from .rptok import TokenSequence, nearest_code
from .validation import check_patch_sequences, check_targets, length_batches


@dataclass
class TeacherTargets:
    vectors: np.ndarray
    kind: str = "ssl_last_layer"

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"unknown target kind {self.kind!r}")


class SequenceTransformer(Module):
    """Linear in -> learned positions -> pre-norm stack -> linear out."""

    def __init__(self, d_in, hidden, d_out, depth, heads, max_len, rng, mlp_ratio=4.0):
        self.proj_in = Linear(d_in, hidden, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(max_len, hidden)))
        self.stack = TransformerStack(hidden, depth, heads, rng, mlp_ratio, norm="pre")
        self.proj_out = Linear(hidden, d_out, rng)

    def __call__(self, x, rng=None, dropout=0.0):
        t = x.shape[1]
        if t > self.pos_embed.shape[0]:
            raise ShapeError(f"sequence length {t} exceeds max_patches {self.pos_embed.shape[0]}")
        h = self.proj_in(x) + self.pos_embed[:t]
        return self.proj_out(self.stack(h, rng, dropout))


def quantize(codebook, encoded):
    """Nearest code under l2-normalized distance.

    Returns ``(labels, quantized)`` where ``quantized`` holds the raw codebook
    rows of the selected codes.
    """
    codebook = np.asarray(getattr(codebook, "data", codebook), dtype=np.float64)
    encoded = np.asarray(getattr(encoded, "data", encoded), dtype=np.float64)
    if encoded.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"encoded width {encoded.shape[-1]} != codebook width {codebook.shape[-1]}")
    flat = encoded.reshape(-1, encoded.shape[-1])
    labels = nearest_code(nc.l2_normalize(flat).data, nc.l2_normalize(codebook).data)
    labels = labels.reshape(encoded.shape[:-1])
    return labels, codebook[labels]


def straight_through(encoded, quantized):
    """Forward value ``quantized``; gradient copied unchanged to ``encoded``."""
    encoded = nc.as_tensor(encoded)
    quantized = np.asarray(getattr(quantized, "data", quantized), dtype=np.float64)
    if quantized.shape != encoded.shape:
        raise ShapeError(f"straight_through: {encoded.shape} vs {quantized.shape}")
    return nc.Tensor._make(quantized.copy(), (encoded,), lambda g: (g,))


def distill_loss(outputs, targets, encoded, selected_codes):
    """Objective to minimise, summed over patches.

    ``sum_t -cos(o_t, ô_t) + |sg[l2 e_t] - l2 v_t|^2 + |l2 e_t - sg[l2 v_t]|^2``.
    Returns ``(total, parts)`` with the three summed terms in ``parts``.
    """
    outputs, encoded = nc.as_tensor(outputs), nc.as_tensor(encoded)
    selected_codes = nc.as_tensor(selected_codes)
    targets = nc.as_tensor(getattr(targets, "vectors", targets))
    if outputs.shape != targets.shape:
        raise ShapeError(f"estimator output {outputs.shape} vs targets {targets.shape}")
    if encoded.shape != selected_codes.shape:
        raise ShapeError(f"encoded {encoded.shape} vs codes {selected_codes.shape}")
    cos = nc.cosine_similarity(outputs, targets).sum()
    ne, nv = nc.l2_normalize(encoded), nc.l2_normalize(selected_codes)
    codebook_term = ((nc.stop_gradient(ne) - nv) ** 2).sum()
    commit_term = ((ne - nc.stop_gradient(nv)) ** 2).sum()
    total = codebook_term + commit_term - cos
    return total, {"cosine": cos, "codebook": codebook_term, "commitment": commit_term}


class CodebookEma:
    """EMA codebook accumulators with Laplace-smoothed counts."""

    def __init__(self, codebook, decay=0.99, eps=1e-5):
        codebook = np.asarray(codebook, dtype=np.float64)
        self.decay = float(decay)
        self.eps = float(eps)
        self.cluster_size = np.ones(codebook.shape[0])
        self.embed_sum = codebook.copy()

    @property
    def n_codes(self):
        return self.cluster_size.shape[0]

    def smoothed_counts(self):
        total = self.cluster_size.sum()
        k = self.n_codes
        return (self.cluster_size + self.eps) / (total + k * self.eps) * total

    def codebook(self):
        return self.embed_sum / self.smoothed_counts()[:, None]

    def update(self, labels, normalized):
        """Fold one batch of assignments in; returns the new codebook."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        normalized = np.asarray(normalized, dtype=np.float64).reshape(len(labels), -1)
        counts = np.bincount(labels, minlength=self.n_codes).astype(np.float64)
        sums = np.zeros_like(self.embed_sum)
        np.add.at(sums, labels, normalized)
        g = self.decay
        self.cluster_size = g * self.cluster_size + (1.0 - g) * counts
        self.embed_sum = g * self.embed_sum + (1.0 - g) * sums
        return self.codebook()

    def reseed(self, code, vector):
        size = float(self.cluster_size.mean())
        self.cluster_size[code] = size
        self.embed_sum[code] = np.asarray(vector) * size


def ema_update(state, labels, normalized):
    return state.update(labels, normalized)


def codebook_utilization(token_corpus, n_codes):
    """``(used_fraction, perplexity)`` of the empirical code distribution."""
    seqs = [np.asarray(getattr(t, "labels", t)).reshape(-1) for t in token_corpus]
    labels = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("codebook_utilization needs a non-empty token corpus")
    counts = np.bincount(labels, minlength=n_codes).astype(np.float64)
    p = counts[counts > 0] / labels.size
    return float(np.count_nonzero(counts) / n_codes), float(np.exp(-np.sum(p * np.log(p))))


class SelfDistilledTokenizer(TransformerMixin, BaseEstimator):
    """Tokenizer distilled from a teacher's per-patch outputs.

    Parameters
    ----------
    n_codes, code_dim : int
        Codebook size and width.
    hidden : int or None
        Transformer width of encoder and estimator (defaults to ``code_dim``).
    encoder_depth, estimator_depth, heads : int
        Transformer shapes.
    steps, batch_size, lr, warmup_steps, weight_decay, dropout :
        Optimisation schedule (linear warmup then linear decay).
    decay, ema_eps : float
        EMA codebook decay and count smoothing.
    codebook_mode : {"ema", "grad"}
        ``"grad"`` trains the codebook by backprop through both penalty terms.
    estimator_input : {"raw", "normalized"}
        Whether the estimator reads raw or l2-normalized codebook rows.
    dead_code_epochs : int
        Re-seed codes unused for this many consecutive epochs (0 disables).
    """

    def __init__(self, n_codes=1024, code_dim=256, hidden=None, encoder_depth=12,
                 estimator_depth=3, heads=8, mlp_ratio=4.0, max_patches=512,
                 patch_dim=PATCH_DIM, steps=1000, batch_size=8, lr=5e-5, warmup_steps=0,
                 weight_decay=0.01, dropout=0.1, decay=0.99, ema_eps=1e-5,
                 codebook_mode="ema", estimator_input="raw", dead_code_epochs=2, seed=0):
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.hidden = hidden
        self.encoder_depth = encoder_depth
        self.estimator_depth = estimator_depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.max_patches = max_patches
        self.patch_dim = patch_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.decay = decay
        self.ema_eps = ema_eps
        self.codebook_mode = codebook_mode
        self.estimator_input = estimator_input
        self.dead_code_epochs = dead_code_epochs
        self.seed = seed

    # -- construction ---------------------------------------------------------

    def initialize(self, target_dim):
        """Build fresh networks, codebook and optimizer for ``target_dim`` targets."""
        if self.codebook_mode not in ("ema", "grad"):
            raise ConfigError(f"codebook_mode must be 'ema' or 'grad', got {self.codebook_mode!r}")
        if self.estimator_input not in ("raw", "normalized"):
            raise ConfigError(f"estimator_input must be 'raw' or 'normalized'")
        if self.n_codes < 2:
            raise ConfigError("n_codes must be >= 2")
        hidden = self.hidden or self.code_dim
        rng = np.random.default_rng(self.seed)
        self.target_dim_ = int(target_dim)
        self.encoder_ = SequenceTransformer(self.patch_dim, hidden, self.code_dim,
                                            self.encoder_depth, self.heads, self.max_patches,
                                            rng, self.mlp_ratio)
        self.estimator_ = SequenceTransformer(self.code_dim, hidden, self.target_dim_,
                                              self.estimator_depth, self.heads,
                                              self.max_patches, rng, self.mlp_ratio)
        self.codebook_ = nc.Tensor(rng.normal(size=(self.n_codes, self.code_dim)),
                                   requires_grad=self.codebook_mode == "grad")
        self.ema_ = CodebookEma(self.codebook_.data, self.decay, self.ema_eps)
        params = self.encoder_.parameters() + self.estimator_.parameters()
        if self.codebook_mode == "grad":
            params.append(self.codebook_)
        self.optimizer_ = nc.AdamW(params, lr=self.lr, betas=(0.9, 0.98),
                                   weight_decay=self.weight_decay)
        self.rng_ = rng
        self.step_ = 0
        self.epoch_ = 0
        self.unused_epochs_ = np.zeros(self.n_codes, dtype=np.int64)
        self.history_ = []
        self._epoch_usage = np.zeros(self.n_codes, dtype=bool)
        self._last_encoded = None
        return self

    def trainable_parameters(self):
        check_is_fitted(self, "encoder_")
        return self.optimizer_.params

    # -- forward pieces ---------------------------------------------------------

    def _encode_tensor(self, x, train=False):
        rng = self.rng_ if train else None
        return self.encoder_(x, rng, self.dropout if train else 0.0)

    def encode(self, patches):
        """Encoder outputs (T, code_dim) for one patch sequence."""
        check_is_fitted(self, "encoder_")
        (x,), _ = check_patch_sequences([patches], self.patch_dim)
        with nc.no_grad():
            return self._encode_tensor(nc.Tensor(x[None]))[0].data

    def forward_loss(self, xb, tb, train=True):
        """Differentiable batch objective (mean per patch) and metrics."""
        enc = self._encode_tensor(nc.Tensor(xb), train)
        labels, eq = quantize(self.codebook_.data, enc.data)
        selected = self.codebook_[labels] if self.codebook_mode == "grad" else nc.Tensor(eq)
        est_in = nc.l2_normalize(nc.Tensor(eq)).data if self.estimator_input == "normalized" else eq
        out = self.estimator_(straight_through(enc, est_in), self.rng_ if train else None,
                              self.dropout if train else 0.0)
        total, parts = distill_loss(out, nc.Tensor(tb), enc, selected)
        n = labels.size
        # In EMA mode the codebook term is constant wrt every trainable tensor.
        objective = total * (1.0 / n)
        metrics = {
            "loss": float(total.data) / n,
            "cosine": float(parts["cosine"].data) / n,
            "codebook_term": float(parts["codebook"].data) / n,
            "commitment": float(parts["commitment"].data) / n,
        }
        return objective, metrics, labels, enc.data

    def train_step(self, xb, tb, lr=None):
        """One optimisation step plus one EMA codebook update on a batch."""
        check_is_fitted(self, "encoder_")
        xb = np.asarray(xb, dtype=np.float64)
        tb = np.asarray(tb, dtype=np.float64)
        if lr is not None:
            self.optimizer_.lr = lr
        self.optimizer_.zero_grad()
        objective, metrics, labels, enc = self.forward_loss(xb, tb, train=True)
        if not math.isfinite(metrics["loss"]):
            raise NonFiniteError(f"tokenizer loss is {metrics['loss']} at step {self.step_}: "
                                 f"{metrics}")
        nc.backward(objective)
        self.optimizer_.step()
        if self.codebook_mode == "ema":
            normed = nc.l2_normalize(nc.Tensor(enc.reshape(-1, enc.shape[-1]))).data
            self.codebook_.data = self.ema_.update(labels, normed)
        self._epoch_usage[np.unique(labels)] = True
        self._last_encoded = enc.reshape(-1, enc.shape[-1])
        _, metrics["perplexity"] = codebook_utilization([labels], self.n_codes)
        metrics["step"] = self.step_
        metrics["lr"] = self.optimizer_.lr
        self.step_ += 1
        return metrics

    def _end_epoch(self):
        used = self._epoch_usage
        self.unused_epochs_ = np.where(used, 0, self.unused_epochs_ + 1)
        self.epoch_ += 1
        if self.dead_code_epochs <= 0 or self.codebook_mode != "ema":
            return
        dead = np.nonzero(self.unused_epochs_ >= self.dead_code_epochs)[0]
        if dead.size and self._last_encoded is not None:
            src = self._last_encoded
            picks = self.rng_.integers(0, len(src), size=dead.size)
            vecs = nc.l2_normalize(nc.Tensor(src[picks])).data
            for code, vec in zip(dead, vecs):
                self.ema_.reseed(code, vec)
            self.codebook_.data = self.ema_.codebook()
            self.unused_epochs_[dead] = 0

    def fit(self, X, targets):
        """Train on patch sequences ``X`` against per-patch teacher ``targets``."""
        seqs, lengths = check_patch_sequences(X, self.patch_dim)
        tgts = check_targets(targets, lengths)
        dims = {t.shape[1] for t in tgts}
        if len(dims) != 1:
            raise ShapeError(f"inconsistent target widths {sorted(dims)}")
        self.initialize(dims.pop())
        self.run(seqs, tgts, self.steps)
        return self

    def run(self, seqs, tgts, n_steps):
        """Continue training for ``n_steps`` steps over the given data."""
        lengths = [len(s) for s in seqs]
        total = self.steps
        done = 0
        while done < n_steps:
            for idx in length_batches(lengths, self.batch_size, self.rng_):
                if done >= n_steps:
                    break
                lr = nc.linear_warmup_decay(self.step_, total, self.warmup_steps, self.lr)
                xb = np.stack([seqs[i] for i in idx])
                tb = np.stack([tgts[i] for i in idx])
                self.history_.append(self.train_step(xb, tb, lr=lr))
                done += 1
            else:
                self._end_epoch()
                self._epoch_usage = np.zeros(self.n_codes, dtype=bool)
        return self

    # -- inference ----------------------------------------------------------------

    def tokenize(self, patches):
        """Labels from encoder + quantizer; the estimator is not used."""
        labels, _ = quantize(self.codebook_.data, self.encode(patches))
        return TokenSequence(labels, self.n_codes, getattr(patches, "clip_id", ""))

    def transform(self, X):
        return [self.tokenize(x).labels for x in X]

    def estimate(self, patches):
        """Estimator outputs for one sequence (diagnostics / distillation sanity)."""
        check_is_fitted(self, "encoder_")
        enc = self.encode(patches)
        _, eq = quantize(self.codebook_.data, enc)
        if self.estimator_input == "normalized":
            eq = nc.l2_normalize(nc.Tensor(eq)).data
        with nc.no_grad():
            return self.estimator_(nc.Tensor(eq[None]))[0].data

    def mean_cosine(self, X, targets):
        """Mean cos(o_t, ô_t) over all patches of ``X``."""
        seqs, lengths = check_patch_sequences(X, self.patch_dim)
        tgts = check_targets(targets, lengths)
        vals = [nc.cosine_similarity(nc.Tensor(self.estimate(s)), nc.Tensor(t)).data
                for s, t in zip(seqs, tgts)]
        return float(np.mean(np.concatenate(vals)))

    # -- persistence ------------------------------------------------------------

    def state_arrays(self):
        check_is_fitted(self, "encoder_")
        arrays = {f"encoder.{k}": v for k, v in self.encoder_.state_dict().items()}
        arrays.update({f"estimator.{k}": v for k, v in self.estimator_.state_dict().items()})
        arrays["codebook"] = self.codebook_.data.copy()
        arrays["ema.cluster_size"] = self.ema_.cluster_size.copy()
        arrays["ema.embed_sum"] = self.ema_.embed_sum.copy()
        arrays["unused_epochs"] = self.unused_epochs_.astype(np.float64)
        arrays.update({f"optim.{k}": v for k, v in self.optimizer_.state_arrays().items()})
        return arrays

    def state_meta(self):
        return {"target_dim": self.target_dim_, "step": self.step_, "epoch": self.epoch_,
                "optim_step": self.optimizer_.state.step, "optim_lr": self.optimizer_.lr,
                "rng": self.rng_.bit_generator.state}

    def load_state(self, arrays, meta):
        self.initialize(meta["target_dim"])
        self.encoder_.load_state_dict({k[8:]: v for k, v in arrays.items()
                                       if k.startswith("encoder.")})
        self.estimator_.load_state_dict({k[10:]: v for k, v in arrays.items()
                                         if k.startswith("estimator.")})
        self.codebook_.data = np.array(arrays["codebook"], dtype=np.float64)
        self.ema_.cluster_size = np.array(arrays["ema.cluster_size"], dtype=np.float64)
        self.ema_.embed_sum = np.array(arrays["ema.embed_sum"], dtype=np.float64)
        self.unused_epochs_ = np.asarray(arrays["unused_epochs"]).astype(np.int64)
        self.optimizer_.load_state_arrays({k[6:]: v for k, v in arrays.items()
                                           if k.startswith("optim.")}, meta["optim_step"])
        self.optimizer_.lr = meta["optim_lr"]
        self.step_ = meta["step"]
        self.epoch_ = meta["epoch"]
        self.rng_.bit_generator.state = meta["rng"]
        return self
