import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import manual_forward as mf
from beats_forge import numcore as nc
from beats_forge.diagnostics import tokenizer_composite
from beats_forge.exceptions import ConfigError, NonFiniteError, ShapeError
from beats_forge.sdtok import (CodebookEma, SelfDistilledTokenizer, SequenceTransformer,
                               TeacherTargets, codebook_utilization, distill_loss, ema_update,
                               quantize, straight_through)


def tiny(**kw):
    params = dict(n_codes=8, code_dim=4, hidden=8, encoder_depth=1, estimator_depth=1,
                  heads=2, mlp_ratio=2.0, max_patches=16, patch_dim=12, steps=20, batch_size=4,
                  lr=1e-3, dropout=0.0, seed=0)
    params.update(kw)
    return SelfDistilledTokenizer(**params)


def toy_data(n=8, t=6, d_in=12, d_out=5, seed=0):
    rng = np.random.default_rng(seed)
    return ([rng.normal(size=(t, d_in)) for _ in range(n)],
            [rng.normal(size=(t, d_out)) for _ in range(n)])


def manual_sequence_transformer(state, x, heads):
    """Independent numpy forward of a depth-1 pre-norm SequenceTransformer."""
    h = x @ state["proj_in.weight"] + state["proj_in.bias"] + state["pos_embed"][:len(x)]
    h = mf.pre_norm_block(h, mf.sub(state, "stack.blocks.0."), heads)
    h = mf.layer_norm(h, state["stack.final_ln.weight"], state["stack.final_ln.bias"])
    return h @ state["proj_out.weight"] + state["proj_out.bias"]


class TestEncode:
    def test_manual_forward(self):
        rng = np.random.default_rng(3)
        net = SequenceTransformer(3, 4, 2, depth=1, heads=2, max_len=4, rng=rng, mlp_ratio=2.0)
        state = {k: rng.normal(size=v.shape) for k, v in net.state_dict().items()}
        net.load_state_dict(state)
        x = rng.normal(size=(2, 3))
        with nc.no_grad():
            out = net(nc.Tensor(x[None])).data[0]
        np.testing.assert_allclose(out, manual_sequence_transformer(state, x, 2), atol=1e-10,
                                   rtol=0)

    def test_shape_and_determinism(self):
        X, T = toy_data()
        tok = tiny().fit(X, T)
        e1, e2 = tok.encode(X[0]), tok.encode(X[0].copy())
        assert e1.shape == (6, 4) and np.array_equal(e1, e2)
        assert tok.encode(np.zeros((11, 12))).shape == (11, 4)

    def test_shape_mismatch(self):
        X, T = toy_data()
        tok = tiny().fit(X, T)
        with pytest.raises(ShapeError):
            tok.encode(np.zeros((4, 11)))
        with pytest.raises(ShapeError):
            tok.encode(np.zeros((17, 12)))


class TestQuantize:
    def test_parallel_vector_any_scale(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(6, 5))
        for scale in (1e-3, 1.0, 250.0):
            labels, rows = quantize(v, scale * v[3:4])
            assert labels.tolist() == [3]
            np.testing.assert_array_equal(rows, v[3:4])

    def test_brute_force_and_cosine_oracles(self):
        rng = np.random.default_rng(1)
        v, e = rng.normal(size=(16, 6)), rng.normal(size=(50, 6))
        labels, _ = quantize(v, e)
        nv = v / np.linalg.norm(v, axis=1, keepdims=True)
        ne = e / np.linalg.norm(e, axis=1, keepdims=True)
        brute = [min(range(16), key=lambda i: float(np.sum((nv[i] - x) ** 2))) for x in ne]
        assert labels.tolist() == brute
        assert labels.tolist() == np.argmax(ne @ nv.T, axis=1).tolist()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32))
    def test_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        v, e = rng.normal(size=(12, 4)), rng.normal(size=(20, 4))
        scales = np.exp(rng.uniform(-5, 5, size=(20, 1)))
        assert np.array_equal(quantize(v, e)[0], quantize(v, e * scales)[0])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            quantize(np.zeros((4, 3)), np.zeros((2, 2)))


class TestStraightThrough:
    def test_forward_is_quantized(self):
        e = nc.Tensor(np.array([[0.1, 0.2]]), requires_grad=True)
        q = np.array([[3.0, -1.0]])
        assert np.array_equal(straight_through(e, q).data, q)

    def test_identity_backward(self):
        e = nc.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        out = straight_through(e, np.zeros((3, 4)))
        nc.backward(out.sum(), params=[e])
        assert np.array_equal(e.grad, np.ones((3, 4)))

    def test_gradient_copied_exactly(self):
        rng = np.random.default_rng(2)
        e = nc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        c = rng.normal(size=(3, 4))
        out = straight_through(e, rng.normal(size=(3, 4)))
        loss = (out.tanh() * c).sum()
        nc.backward(loss, params=[e])
        assert np.array_equal(e.grad, (1 - np.tanh(out.data) ** 2) * c)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            straight_through(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_composite_gradient(self):
        assert tokenizer_composite(0).error < 1e-4


class TestDistillLoss:
    def test_perfect_match(self):
        rng = np.random.default_rng(0)
        o = rng.normal(size=(5, 3))
        v = rng.normal(size=(5, 4))
        total, parts = distill_loss(o, o * 2.0, v * 3.0, v)
        assert total.item() == pytest.approx(-5.0, abs=1e-12)
        assert parts["codebook"].item() == pytest.approx(0.0, abs=1e-24)

    def test_orthogonal_outputs(self):
        o = np.array([[1.0, 0.0], [0.0, 2.0]])
        t = np.array([[0.0, 1.0], [3.0, 0.0]])
        e = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
        assert distill_loss(o, t, e, e)[0].item() == pytest.approx(0.0, abs=1e-12)

    def test_direct_formula(self):
        rng = np.random.default_rng(4)
        o, t, e, v = (rng.normal(size=s) for s in [(3, 5), (3, 5), (3, 4), (3, 4)])
        expected = 0.0
        for i in range(3):
            cos = o[i] @ t[i] / (np.linalg.norm(o[i]) * np.linalg.norm(t[i]))
            le, lv = e[i] / np.linalg.norm(e[i]), v[i] / np.linalg.norm(v[i])
            expected += -cos + 2.0 * np.sum((le - lv) ** 2)
        total, parts = distill_loss(o, TeacherTargets(t), e, v)
        assert abs(total.item() - expected) < 1e-10
        assert parts["codebook"].item() == pytest.approx(parts["commitment"].item())

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            distill_loss(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            distill_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 2)))

    def test_target_kind_validated(self):
        with pytest.raises(ConfigError):
            TeacherTargets(np.zeros((2, 2)), "logits")


class TestEma:
    def test_decay_one_keeps_codebook(self):
        v = np.random.default_rng(0).normal(size=(4, 3))
        state = CodebookEma(v, decay=1.0)
        out = ema_update(state, [0, 0, 2], np.ones((3, 3)))
        np.testing.assert_allclose(out, v, rtol=1e-9)

    def test_single_step_closed_form(self):
        v = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
        state = CodebookEma(v, decay=0.99, eps=1e-5)
        x = np.array([[0.6, 0.8]])
        out = state.update([1], x)
        # Hand arithmetic: counts (0.99, 1.0, 0.99), total 2.98.
        counts = np.array([0.99, 0.99 + 0.01, 0.99])
        sums = np.array([[0.99, 0.0], [0.006, 1.98 + 0.008], [2.97, 2.97]])
        smooth = (counts + 1e-5) / (2.98 + 3e-5) * 2.98
        assert np.max(np.abs(out - sums / smooth[:, None])) < 1e-12
        assert np.max(np.abs(state.cluster_size - counts)) < 1e-15

    def test_unassigned_direction_kept(self):
        v = np.random.default_rng(1).normal(size=(5, 3))
        state = CodebookEma(v)
        out = state.update([0, 0, 1], np.random.default_rng(2).normal(size=(3, 3)))
        for i in (2, 3, 4):
            cos = out[i] @ v[i] / (np.linalg.norm(out[i]) * np.linalg.norm(v[i]))
            assert cos == pytest.approx(1.0, abs=1e-12)

    def test_counts_positive_after_smoothing(self):
        state = CodebookEma(np.ones((3, 2)), decay=0.0)
        state.update([0, 0], np.ones((2, 2)))
        assert np.all(state.smoothed_counts() > 0)

    def test_fixed_point_monotone(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(6, 4))
        x = rng.normal(size=(30, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        labels, _ = quantize(v, x)
        means = {k: x[labels == k].mean(axis=0) for k in np.unique(labels)}
        state = CodebookEma(v)
        dist = []
        for _ in range(50):
            cb = state.update(labels, x)
            dist.append(np.mean([np.linalg.norm(cb[k] - m) for k, m in means.items()]))
        assert all(b <= a + 1e-15 for a, b in zip(dist, dist[1:]))
        assert dist[-1] < dist[0]


class TestUtilization:
    def test_constant(self):
        assert codebook_utilization([[3, 3, 3]], 8) == (0.125, 1.0)

    def test_uniform(self):
        used, ppl = codebook_utilization([np.arange(8), np.arange(8)], 8)
        assert used == 1.0 and ppl == pytest.approx(8.0)

    def test_histogram_oracle(self):
        rng = np.random.default_rng(0)
        seqs = [rng.integers(0, 20, size=rng.integers(1, 30)) for _ in range(10)]
        flat = np.concatenate(seqs)
        counts = {k: int(np.sum(flat == k)) for k in range(32)}
        p = [c / len(flat) for c in counts.values() if c]
        used, ppl = codebook_utilization(seqs, 32)
        assert used == len(p) / 32
        assert abs(ppl - math.exp(-sum(q * math.log(q) for q in p))) < 1e-9

    def test_empty(self):
        with pytest.raises(ValueError):
            codebook_utilization([], 8)


class TestTraining:
    def test_loss_decreases(self):
        rng = np.random.default_rng(7)
        X = [rng.normal(size=(8, 12)) for _ in range(64)]
        teacher = rng.normal(size=(12, 5))
        T = [np.tanh(x @ teacher) for x in X]
        tok = tiny(steps=200, batch_size=8, lr=2e-3).fit(X, T)
        loss = np.array([h["loss"] for h in tok.history_])
        avg = np.convolve(loss, np.ones(50) / 50, mode="valid")
        assert avg[-1] < avg[0] - 0.05
        assert np.polyfit(np.arange(len(avg)), avg, 1)[0] < 0

    def test_zero_lr_freezes_parameters_not_codebook(self):
        X, T = toy_data()
        tok = tiny(lr=0.0)
        tok.initialize(5)
        before = [p.data.copy() for p in tok.trainable_parameters()]
        cb = tok.codebook_.data.copy()
        tok.train_step(np.stack(X[:4]), np.stack(T[:4]), lr=0.0)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, tok.trainable_parameters()))
        assert not np.array_equal(cb, tok.codebook_.data)

    def test_metrics_reproducible(self):
        X, T = toy_data()
        a, b = tiny(dropout=0.1).fit(X, T), tiny(dropout=0.1).fit(X, T)
        assert a.history_ == b.history_
        assert set(a.history_[0]) >= {"loss", "cosine", "perplexity"}

    def test_nan_aborts(self):
        X, T = toy_data()
        tok = tiny()
        tok.initialize(5)
        tok.encoder_.proj_in.weight.data[:] = np.nan
        with pytest.raises(NonFiniteError):
            tok.train_step(np.stack(X[:2]), np.stack(T[:2]))

    def test_grad_mode_trains_codebook(self):
        X, T = toy_data()
        tok = tiny(codebook_mode="grad", steps=5).fit(X, T)
        assert tok.codebook_ in tok.trainable_parameters()

    def test_bad_options(self):
        X, T = toy_data()
        with pytest.raises(ConfigError):
            tiny(codebook_mode="kmeans").fit(X, T)
        with pytest.raises(ShapeError):
            tiny().fit(X, [t[:3] for t in T])

    def test_dead_codes_reseeded(self):
        X, T = toy_data(n=4)
        tok = tiny(n_codes=64, steps=12, batch_size=4, dead_code_epochs=2).fit(X, T)
        # Every code unused in two consecutive epochs was moved to an encoder output.
        assert tok.unused_epochs_.max() < 2

    def test_distillation_beats_untrained(self):
        rng = np.random.default_rng(8)
        teacher = rng.normal(size=(12, 5))
        X = [rng.normal(size=(8, 12)) for _ in range(48)]
        T = [np.tanh(x @ teacher) for x in X]
        trained = tiny(steps=150, batch_size=8, lr=2e-3).fit(X[:40], T[:40])
        untrained = tiny(steps=0).fit(X[:40], T[:40])
        assert trained.mean_cosine(X[40:], T[40:]) > untrained.mean_cosine(X[40:], T[40:])


@pytest.fixture(scope="module")
def fitted():
    X, T = toy_data()
    return tiny().fit(X, T), X


class TestTokenize:
    def test_repeatable(self, fitted):
        tok, X = fitted
        assert np.array_equal(tok.tokenize(X[0]).labels, tok.tokenize(X[0]).labels)

    def test_no_cross_clip_dependence(self, fitted):
        tok, X = fitted
        alone = tok.transform([X[0]])[0]
        together = tok.transform([X[0], X[1]])[0]
        assert np.array_equal(alone, together)

    def test_compositional_oracle(self, fitted):
        tok, X = fitted
        for x in X:
            labels, _ = quantize(tok.codebook_.data, tok.encode(x))
            assert np.array_equal(tok.tokenize(x).labels, labels)
