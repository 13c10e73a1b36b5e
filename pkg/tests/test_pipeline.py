import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beats_forge.exceptions import ConfigError, ContractError, DependencyError, FormatError
from beats_forge.pipeline import (DataContext, IterationPlan, RunManifest, apply_override,
                                  config_hash, linear_probe, load_config, make_config,
                                  read_metrics_csv, run_iteration, token_agreement,
                                  token_class_nmi, token_quality, worker_count, write_metrics_csv)
from beats_forge.sdtok import codebook_utilization
from beats_forge.ssl_model import MaskedAudioModel


TINY = {
    "corpus": {"n_per_class": 4},
    "random_projection": {"n_codes": 16, "code_dim": 32},
    "self_distilled": {"n_codes": 16, "code_dim": 8, "hidden": 16, "encoder_depth": 1,
                       "heads": 2, "steps": 8, "warmup_steps": 2},
    "model": {"depth": 1, "hidden": 16, "heads": 2, "predictor_depth": 1, "steps": 80,
              "warmup_steps": 5, "lr": 2e-3},
    "finetune": {"steps": 4, "warmup_steps": 1},
    "stages": [
        {"name": "s1", "iteration": 1, "tokenizer_kind": "random_projection", "finetune": True},
        {"name": "s2", "iteration": 2, "tokenizer_kind": "self_distilled", "teacher": "s1",
         "teacher_kind": "finetuned", "pretrain_steps": 4},
    ],
}


def tiny_config(out, **sections):
    user = json.loads(json.dumps(TINY))
    for k, v in sections.items():
        user[k] = v if not isinstance(v, dict) else {**user.get(k, {}), **v}
    user["out"] = str(out)
    return make_config(user)


@pytest.fixture(scope="module")
def data():
    return DataContext.from_config(make_config(TINY))


@pytest.fixture(scope="module")
def stage1(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    entry = run_iteration(cfg, "s1", data=data)
    return cfg, out, entry


# -- configuration -------------------------------------------------------------

class TestConfig:
    def test_defaults_complete(self):
        cfg = make_config()
        assert cfg["model"]["steps"] == 2000 and len(cfg["stages"]) == 4
        assert [s["name"] for s in cfg["stages"]] == ["iter1", "iter2", "iter3", "iter3plus"]

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lrr"):
            make_config({"model": {"lrr": 1.0}})
        with pytest.raises(ConfigError):
            make_config({"optimizer": {}})

    def test_override_type_checked(self):
        cfg = make_config()
        assert apply_override(cfg, "model.steps=10")["model"]["steps"] == 10
        assert apply_override(cfg, "model.lr=1e-3")["model"]["lr"] == 1e-3
        assert apply_override(cfg, "out=elsewhere")["out"] == "elsewhere"
        with pytest.raises(ConfigError):
            apply_override(cfg, "model.steps=ten")
        with pytest.raises(ConfigError):
            apply_override(cfg, "model.nope=1")
        with pytest.raises(ConfigError):
            apply_override(cfg, "model.steps")

    def test_load_errors(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(p)
        p.write_text(json.dumps({"model": {"steps": 5}}))
        assert load_config(p)["model"]["steps"] == 5

    def test_hash_is_canonical(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("BEATS_FORGE_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("BEATS_FORGE_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()


class TestPlan:
    def stages(self, *extra):
        return [{"name": "a", "iteration": 1, "tokenizer_kind": "random_projection"}, *extra]

    def test_first_stage_random(self):
        with pytest.raises(ConfigError):
            make_config({"stages": [{"name": "a", "iteration": 1,
                                     "tokenizer_kind": "self_distilled"}]})

    def test_teacher_must_be_previous_iteration(self):
        bad = {"name": "b", "iteration": 3, "tokenizer_kind": "self_distilled", "teacher": "a"}
        with pytest.raises(ConfigError, match="iteration"):
            make_config({"stages": self.stages(bad)})
        later = {"name": "b", "iteration": 2, "tokenizer_kind": "self_distilled", "teacher": "c"}
        with pytest.raises(ConfigError):
            make_config({"stages": self.stages(later)})

    def test_finetuned_teacher_needs_finetune(self):
        b = {"name": "b", "iteration": 2, "tokenizer_kind": "self_distilled", "teacher": "a",
             "teacher_kind": "finetuned"}
        with pytest.raises(ConfigError, match="fine-tune"):
            make_config({"stages": self.stages(b)})

    def test_index(self):
        plan = IterationPlan.from_config(make_config())
        assert plan.index(1) == 0 and plan.index("2") == 1 and plan.index("iter3plus") == 3
        with pytest.raises(ConfigError):
            plan.index(9)


# -- stage execution -----------------------------------------------------------

class TestRunIteration:
    def test_stage1_artifacts(self, stage1):
        _, out, entry = stage1
        sdir = out / "s1"
        for name in ("tokenizer.ckpt", "model.ckpt", "classifier.ckpt", "metrics.json",
                     "pretrain_metrics.csv", "finetune_metrics.csv"):
            assert (sdir / name).exists()
        assert len(list((sdir / "tokens").glob("*.tok"))) == 20
        assert set(entry["checkpoints"]) == {"tokenizer", "model", "classifier", "metrics"}
        RunManifest.load(out / "run_manifest.json")

    def test_loss_trend(self, stage1):
        _, out, _ = stage1
        rows = read_metrics_csv(out / "s1" / "pretrain_metrics.csv")
        assert [r["step"] for r in rows] == list(range(80))
        loss = np.array([r["loss"] for r in rows])
        assert np.polyfit(np.arange(len(loss)), loss, 1)[0] < 0
        assert loss[-20:].mean() < loss[:20].mean()
        header = (out / "s1" / "pretrain_metrics.csv").read_text().splitlines()[0]
        assert header == "step,accuracy,loss,lr"

    def test_metrics_ranges(self, stage1):
        _, out, _ = stage1
        m = json.loads((out / "s1" / "metrics.json").read_text())
        assert 0.0 <= m["probe_accuracy"] <= 1.0
        assert 0.0 <= m["tokens"]["nmi"] <= 1.0 and 0.0 <= m["tokens"]["agreement"] <= 1.0

    def test_rerun_bit_identical(self, stage1, data, tmp_path):
        _, out, _ = stage1
        run_iteration(tiny_config(tmp_path), "s1", data=data)
        for name in ("tokenizer.ckpt", "model.ckpt", "classifier.ckpt", "metrics.json"):
            assert (tmp_path / "s1" / name).read_bytes() == (out / "s1" / name).read_bytes()

    def test_completed_stage_not_recomputed(self, stage1, data):
        cfg, out, entry = stage1
        before = (out / "s1" / "model.ckpt").stat().st_mtime_ns
        assert run_iteration(cfg, "s1", data=data) == entry
        assert (out / "s1" / "model.ckpt").stat().st_mtime_ns == before

    def test_hash_mismatch_refuses(self, stage1, data):
        _, out, _ = stage1
        changed = tiny_config(out, model={"lr": 1e-2})
        with pytest.raises(ContractError, match="refusing"):
            run_iteration(changed, "s1", data=data)

    def test_missing_teacher(self, data, tmp_path):
        with pytest.raises(DependencyError):
            run_iteration(tiny_config(tmp_path), "s2", data=data)

    def test_partial_then_resume(self, stage1, data, tmp_path):
        cfg = tiny_config(tmp_path)
        assert run_iteration(cfg, "s1", data=data, until="b") == ["a", "b"]
        assert not (tmp_path / "s1" / "model.ckpt").exists()
        run_iteration(cfg, "s1", data=data)
        _, out, _ = stage1
        assert (tmp_path / "s1" / "model.ckpt").read_bytes() == \
            (out / "s1" / "model.ckpt").read_bytes()

    def test_stage2_with_finetuned_teacher(self, stage1, data, tmp_path):
        cfg, out, _ = stage1
        entry = run_iteration(cfg, "s2", data=data)
        targets = sorted((out / "s2" / "targets").glob("*.tgt"))
        assert len(targets) == int((~data.is_valid).sum())
        assert (out / "s2" / "tokenizer_metrics.csv").exists()
        assert set(json.loads((out / "run_manifest.json").read_text())["stages"]) == {"s1", "s2"}
        assert "classifier" not in entry["checkpoints"]

    def test_manifest_detects_tampering(self, stage1, tmp_path):
        _, out, _ = stage1
        doc = json.loads((out / "run_manifest.json").read_text())
        for entry in doc["stages"].values():
            for rel in entry["hashes"]:
                (tmp_path / rel).parent.mkdir(parents=True, exist_ok=True)
                (tmp_path / rel).write_bytes((out / rel).read_bytes())
        (tmp_path / "run_manifest.json").write_text(json.dumps(doc))
        RunManifest.load(tmp_path / "run_manifest.json")
        (tmp_path / "s1" / "metrics.json").write_text("{}")
        with pytest.raises(FormatError, match="hash"):
            RunManifest.load(tmp_path / "run_manifest.json")


# -- evaluation ------------------------------------------------------------------

def contingency_nmi(a, b):
    """Arithmetic-mean NMI straight from the contingency table."""
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    ua, ub = np.unique(a), np.unique(b)
    table = np.array([[np.sum((a == x) & (b == y)) for y in ub] for x in ua], float)
    pxy = table / n
    px, py = pxy.sum(axis=1), pxy.sum(axis=0)
    mi = sum(pxy[i, j] * math.log(pxy[i, j] / (px[i] * py[j]))
             for i in range(len(ua)) for j in range(len(ub)) if pxy[i, j] > 0)
    ha = -sum(p * math.log(p) for p in px)
    hb = -sum(p * math.log(p) for p in py)
    return mi / ((ha + hb) / 2)


class TestTokenMetrics:
    def test_constant_tokens(self):
        seqs = [np.full(10, 3) for _ in range(12)]
        assert token_class_nmi(seqs, np.arange(12) % 4) == 0.0
        assert token_agreement(seqs, seqs) == 1.0

    def test_class_tokens(self):
        labels = np.arange(15) % 5
        assert token_class_nmi([np.full(7, c) for c in labels], labels) == pytest.approx(1.0)

    def test_contingency_oracle(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, size=60)
        seqs = [np.where(rng.uniform(size=9) < 0.7, c * 2, rng.integers(0, 12, 9))
                for c in labels]
        majority = [np.bincount(s).argmax() for s in seqs]
        assert abs(token_class_nmi(seqs, labels) - contingency_nmi(labels, majority)) < 1e-9

    def test_majority_tie_breaks_low(self):
        assert token_class_nmi([[2, 1], [0, 3], [1, 2]], [0, 1, 0]) == pytest.approx(
            contingency_nmi([0, 1, 0], [1, 0, 1]))

    def test_agreement_fraction(self):
        assert token_agreement([[1, 2, 3, 4]], [[1, 0, 3, 0]]) == 0.5
        with pytest.raises(ContractError):
            token_agreement([[1, 2]], [[1]])

    def test_empty(self):
        with pytest.raises(ValueError):
            token_class_nmi([], [])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 32), st.integers(2, 40), st.integers(1, 20))
    def test_report_bounds(self, seed, k, n):
        rng = np.random.default_rng(seed)
        seqs = [rng.integers(0, k, size=rng.integers(1, 12)) for _ in range(n)]
        other = [np.where(rng.uniform(size=len(s)) < 0.5, s, rng.integers(0, k, len(s)))
                 for s in seqs]
        nmi = token_class_nmi(seqs, rng.integers(0, 3, size=n))
        agree = token_agreement(seqs, other)
        used, ppl = codebook_utilization(seqs, k)
        assert 0.0 <= nmi <= 1.0 + 1e-12 and 0.0 <= agree <= 1.0
        assert 0.0 < used <= 1.0 and 1.0 - 1e-12 <= ppl <= k + 1e-9


class ConstantTokenizer:
    n_codes = 4

    def transform(self, X):
        return [np.zeros(len(x.patches), int) for x in X]


def test_token_quality_constant(data):
    report = token_quality(ConstantTokenizer(), data.clips[:6], data.extractor)
    assert report.nmi == 0.0 and report.agreement == 1.0 and report.utilization == 0.25
    with pytest.raises(ValueError):
        token_quality(ConstantTokenizer(), [], data.extractor)


@pytest.fixture(scope="module")
def backbone():
    return MaskedAudioModel(n_codes=4, depth=1, hidden=16, heads=2, predictor_depth=1,
                            max_patches=8, patch_dim=16, seed=0).initialize()


class TestProbe:
    def test_chance_with_uninformative_labels(self, backbone):
        # Labels drawn independently of the inputs: nothing to learn.
        rng = np.random.default_rng(1)
        X = [rng.normal(size=(8, 16)) for _ in range(600)]
        y = np.tile(np.arange(5), 120)
        rng.shuffle(y)
        acc = linear_probe(backbone, X[:300], y[:300], X[300:], y[300:])
        assert abs(acc - 0.2) <= 3 * math.sqrt(0.2 * 0.8 / 300)

    def test_deterministic(self, backbone):
        rng = np.random.default_rng(2)
        X = [rng.normal(size=(8, 16)) + (i % 2) for i in range(40)]
        y = np.arange(40) % 2
        a = linear_probe(backbone, X[:30], y[:30], X[30:], y[30:])
        assert a == linear_probe(backbone, X[:30], y[:30], X[30:], y[30:])
        assert a == 1.0

    def test_single_class(self, backbone):
        X = [np.zeros((8, 16))] * 4
        with pytest.raises(ConfigError):
            linear_probe(backbone, X, np.zeros(4), X, np.zeros(4))

    def test_empty_validation(self, backbone):
        X = [np.zeros((8, 16)), np.ones((8, 16))]
        with pytest.raises(ConfigError, match="validation"):
            linear_probe(backbone, X, [0, 1], [], [])

    def test_from_checkpoint_path(self, stage1, data):
        _, out, _ = stage1
        trX, trY, _ = data.split("train")
        vaX, vaY, _ = data.split("valid")
        direct = json.loads((out / "s1" / "metrics.json").read_text())["probe_accuracy"]
        assert linear_probe(out / "s1" / "model.ckpt", trX, trY, vaX, vaY) == direct


def test_metrics_csv_round_trip(tmp_path):
    hist = [{"step": 0, "loss": 1.5, "lr": 0.1}, {"step": 1, "loss": 1.25, "lr": 0.2}]
    write_metrics_csv(tmp_path / "m.csv", hist)
    assert read_metrics_csv(tmp_path / "m.csv") == hist
