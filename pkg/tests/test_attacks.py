import numpy as np
import pytest

from spoofbench import models as mdl
from spoofbench import nn
from spoofbench.attacks import (AttackConfig, generate_attack_set, ifgsm,
                                ifgsm_ensemble, load_attack_manifest,
                                save_attack_set, _attack_batch)
from spoofbench.audio import Label, Split, Waveform, synth_corpus
from spoofbench.errors import LengthError
from spoofbench.features import variant_config

SR = 16000


def make_model(name="LFCC60", family=mdl.ModelFamily.CONV2D_RESIDUAL,
               input_len=16384, seed=1):
    return mdl.init_model(mdl.ModelSpec(family, variant_config(name),
                                        input_len, seed=seed))


@pytest.fixture(scope="module")
def trained_small():
    train_c = synth_corpus(12, 16384, SR, seed=5, split=Split.TRAIN)
    test_c = synth_corpus(12, 16384, SR, seed=5, split=Split.TEST)
    cfg = mdl.TrainConfig(epochs=6, batch_size=8, learning_rate=1e-3, seed=3)
    model = mdl.train(make_model(seed=2), train_c, cfg, heldout=test_c)
    return model, test_c


class TestAttackConfig:
    def test_alpha_at_most_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.01, alpha=0.02, iterations=5)

    def test_positive_iterations(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.1, alpha=0.01, iterations=0)


class TestSingleStepOracle:
    def test_matches_closed_form(self):
        # hand-built linear surrogate on a 4-sample wave: after one step
        # the adversary is clamp(x - alpha*sign(w), box), computed by hand
        class LinearModel:
            class spec:
                input_len = 4
            model_id = "linear"

        weights = np.array([0.5, -2.0, 0.0, 1.0], dtype=np.float32)

        def fake_loss_grad(model, x, target, need_param_grads=False):
            b = x.shape[0]
            grad = np.tile(weights, (b, 1)).astype(x.dtype)
            return np.zeros(b, dtype=x.dtype), grad, np.zeros((b, 2), x.dtype)

        import spoofbench.attacks as atk
        orig = atk._loss_grad_batch
        atk._loss_grad_batch = fake_loss_grad
        try:
            x0 = np.array([[0.5, -0.98, 0.2, 0.99]], dtype=np.float32)
            cfg = AttackConfig(epsilon=0.05, alpha=0.03, iterations=1)
            out = atk._attack_batch([LinearModel()], x0, cfg)
        finally:
            atk._loss_grad_batch = orig
        expected = np.clip(
            x0 - 0.03 * np.sign(weights),
            np.maximum(x0 - 0.05, -1.0), np.minimum(x0 + 0.05, 1.0))
        np.testing.assert_allclose(out, expected)
        # sign(0) convention: the zero-gradient coordinate is untouched
        assert out[0, 2] == x0[0, 2]
        # [-1, 1] clamp engaged on the last coordinate
        assert out[0, 3] <= 1.0


class TestIfgsm:
    def test_epsilon_ball_and_range(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[0]
        cfg = AttackConfig(epsilon=0.08, alpha=0.001, iterations=10)
        ex = ifgsm(model, clip.wave, cfg)
        delta = ex.wave.samples - clip.wave.samples
        assert np.abs(delta).max() <= cfg.epsilon + 1e-6
        assert np.abs(ex.wave.samples).max() <= 1.0

    def test_deterministic(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[1]
        cfg = AttackConfig(epsilon=0.05, alpha=0.002, iterations=8)
        a = ifgsm(model, clip.wave, cfg)
        b = ifgsm(model, clip.wave, cfg)
        np.testing.assert_array_equal(a.wave.samples, b.wave.samples)
        assert a.success_on_source == b.success_on_source

    def test_success_semantics(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[2]
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=20)
        ex = ifgsm(model, clip.wave, cfg)
        pred = mdl.forward(model, ex.wave).argmax()
        assert ex.success_on_source == (pred == 0)

    def test_length_mismatch(self, trained_small):
        model, _ = trained_small
        with pytest.raises(LengthError):
            ifgsm(model, Waveform(np.zeros(100, dtype=np.float32), SR),
                  AttackConfig(0.1, 0.01, 1))

    def test_projection_idempotent(self):
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-0.9, 0.9, 64).astype(np.float32)
        eps = np.float32(0.05)
        lo, hi = np.maximum(x0 - eps, -1), np.minimum(x0 + eps, 1)
        feasible = np.clip(x0 + rng.uniform(-0.05, 0.05, 64).astype(np.float32),
                           lo, hi)
        np.testing.assert_array_equal(np.clip(feasible, lo, hi), feasible)


class TestEnsemble:
    def test_single_member_reduces_to_ifgsm(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[0]
        cfg = AttackConfig(epsilon=0.05, alpha=0.002, iterations=6)
        solo = ifgsm(model, clip.wave, cfg)
        ens = ifgsm_ensemble([model], clip.wave, cfg)
        np.testing.assert_array_equal(solo.wave.samples, ens.wave.samples)

    def test_duplicated_member_same_signs(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[0]
        cfg = AttackConfig(epsilon=0.05, alpha=0.002, iterations=6)
        once = ifgsm_ensemble([model], clip.wave, cfg)
        twice = ifgsm_ensemble([model, model], clip.wave, cfg)
        np.testing.assert_array_equal(once.wave.samples, twice.wave.samples)

    def test_member_success_recorded(self, trained_small):
        model, test_c = trained_small
        clip = test_c.by_label(Label.SPOOF)[0]
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=10)
        ex = ifgsm_ensemble([model], clip.wave, cfg)
        assert set(ex.member_success) == {model.model_id}
        assert ex.success_on_source == all(ex.member_success.values())

    def test_mismatched_lengths_rejected(self, trained_small):
        model, test_c = trained_small
        other = make_model(input_len=2048, seed=9)
        with pytest.raises(LengthError):
            ifgsm_ensemble([model, other], test_c.clips[0].wave,
                           AttackConfig(0.1, 0.01, 1))


class TestGenerateAttackSet:
    def test_only_correct_spoofs_attacked(self, trained_small):
        model, test_c = trained_small
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=5)
        examples = generate_attack_set(model, test_c, cfg)
        spoof_ids = sorted(c.id for c in test_c.by_label(Label.SPOOF))
        _, errors = mdl.evaluate(model, test_c)
        eligible = [i for i in spoof_ids if i not in errors]
        assert [ex.source_id for ex in examples] == eligible

    def test_every_example_in_ball(self, trained_small):
        model, test_c = trained_small
        originals = {c.id: c.wave.samples for c in test_c.clips}
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=5)
        for ex in generate_attack_set(model, test_c, cfg):
            delta = ex.wave.samples - originals[ex.source_id]
            assert np.abs(delta).max() <= cfg.epsilon + 1e-6
            assert np.abs(ex.wave.samples).max() <= 1.0

    def test_hopeless_source_raises(self):
        # a constant-output surrogate misclassifies every spoof clip
        test_c = synth_corpus(4, 16384, SR, seed=8, split=Split.TEST)
        model = make_model(seed=4)
        head = dict(model.net.walk())["head"]
        head.params["weight"][...] = 0.0
        head.params["bias"][...] = np.array([100.0, 0.0])  # always bona fide
        with pytest.raises(ValueError, match="misclassifies every spoof"):
            generate_attack_set(model, test_c, AttackConfig(0.1, 0.01, 1))

    def test_length_mismatch_rejected(self, trained_small):
        model, _ = trained_small
        longer = synth_corpus(2, 32768, SR, seed=9, split=Split.TEST)
        with pytest.raises(LengthError):
            generate_attack_set(model, longer, AttackConfig(0.1, 0.01, 1))


class TestPersistence:
    def test_manifest_round_trip(self, trained_small, tmp_path):
        model, test_c = trained_small
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=4)
        examples = generate_attack_set(model, test_c, cfg)
        manifest = save_attack_set(examples, cfg, tmp_path / "set")
        rows = load_attack_manifest(manifest)
        assert len(rows) == len(examples)
        assert rows[0]["source_model"] == model.model_id
        assert float(rows[0]["epsilon"]) == cfg.epsilon
        assert {r["success"] for r in rows} <= {"0", "1"}
        assert (tmp_path / "set" / "wav").exists()

    def test_deterministic_bytes(self, trained_small, tmp_path):
        model, test_c = trained_small
        cfg = AttackConfig(epsilon=0.08, alpha=0.002, iterations=4)
        blobs = []
        for i in range(2):
            examples = generate_attack_set(model, test_c, cfg)
            manifest = save_attack_set(examples, cfg, tmp_path / f"s{i}")
            blobs.append(manifest.read_bytes())
        assert blobs[0] == blobs[1]
