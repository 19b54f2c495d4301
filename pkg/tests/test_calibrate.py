"""Losses, optimizers, pretraining, and the three calibration routines."""

import math

import numpy as np
import pytest

from conftest import assert_grads_close, central_difference
from simplexcal.calibrate import (
    Adam,
    TrainConfig,
    calibrate_dirichlet_ts,
    calibrate_scalar_ts,
    calibrate_sts,
    cross_entropy_loss,
    dirichlet_ts_nll,
    pretrain,
    sts_nll,
)
from simplexcal.data import TaskSpec, gen_gaussian_task
from simplexcal.distributions import ConcreteParams, concrete_log_density
from simplexcal.errors import ArgumentError, CalibrationError, DomainError
from simplexcal.mixup import MixupConfig
from simplexcal.models import MlpModel, StsModel, TemperatureBranch, apply_layers
from simplexcal.numcore.rng import Rng
from simplexcal.numcore.special import log_gamma
from simplexcal.numcore.tape import Tape, clamp_min, reshape, softplus


def small_pipeline(seed=1, overlap=1.2, per_class=(60, 30, 30), hidden=(16, 16)):
    task = TaskSpec(classes=3, per_class=per_class, overlap=overlap, seed=7)
    train, val, test = gen_gaussian_task(task)
    streams = Rng(seed).split(2)
    clf = MlpModel.build(2, list(hidden), 3, cut_index=2, rng=streams[0])
    branch = TemperatureBranch.build(clf.feature_dim, [16, 8], rng=streams[1])
    return train, val, test, clf, branch


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((5, 4))
        labels = np.array([0, 1, 2, 3, 0])
        assert float(cross_entropy_loss(logits, labels)) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_is_tiny_and_finite(self):
        loss = float(cross_entropy_loss(np.array([[10.0, -10.0]]), np.array([0])))
        assert 0 < loss < 1e-8
        assert math.isfinite(loss)

    def test_equals_negative_predictive_log_likelihood(self, rng):
        # dual-path identity: the cross entropy must equal the negative log
        # of the softmax marginal, which is what ties pretraining to the
        # simplex model's location parameter
        for _ in range(20):
            logits = np.asarray(rng.normal((16, 3))) * 3
            labels = np.asarray(rng.integers(0, 3, 16))
            from simplexcal.numcore.special import softmax_rows

            probs = softmax_rows(logits)
            nll = -np.mean(np.log(probs[np.arange(16), labels]))
            assert float(cross_entropy_loss(logits, labels)) == pytest.approx(nll, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ArgumentError):
            cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


class TestPretrain:
    def test_separable_blobs_reach_high_accuracy(self):
        task = TaskSpec(classes=2, per_class=(50, 10, 10), overlap=0.1, seed=5)
        train, _, _ = gen_gaussian_task(task)
        clf = MlpModel.build(2, [16, 16], 2, 2, Rng(0))
        cfg = TrainConfig(optimizer="sgd-momentum", lr=0.1, batch_size=128, epochs=200, seed=9)
        trace = pretrain(clf, train, cfg)
        assert not trace.diverged
        acc = np.mean(np.argmax(clf.forward_logits(train.inputs), axis=1) == train.labels)
        assert acc >= 0.99
        assert trace.epoch_losses[-1] <= trace.epoch_losses[0]

    def test_zero_epochs_is_a_no_op(self):
        train, _, _, clf, _ = small_pipeline()
        before = [p.copy() for p in clf.parameters()]
        trace = pretrain(clf, train, TrainConfig(epochs=0, seed=1))
        assert trace.epoch_losses == []
        for a, b in zip(before, clf.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_fixed_seed_reproducible(self):
        cfg = TrainConfig(optimizer="adam", lr=1e-3, batch_size=32, epochs=5, seed=3)
        finals = []
        for _ in range(2):
            train, _, _, clf, _ = small_pipeline(seed=2)
            pretrain(clf, train, cfg)
            finals.append([p.copy() for p in clf.parameters()])
        for a, b in zip(*finals):
            np.testing.assert_array_equal(a, b)


class TestStsNll:
    def test_matches_concrete_log_density_up_to_constant(self, rng):
        # Eq-form loss omits the parameter-free ln (K-1)! of the density
        for k in (2, 3, 5):
            labels = np.asarray([np.asarray(rng.uniform(k)) for _ in range(8)])
            labels = labels / labels.sum(axis=1, keepdims=True)
            labels = np.clip(labels, 1e-4, 1 - 1e-4)
            labels /= labels.sum(axis=1, keepdims=True)
            log_alpha = np.asarray(rng.normal((8, k))) * 2
            lam = np.abs(np.asarray(rng.normal(8))) + 0.3
            loss = float(sts_nll(labels, log_alpha, lam))
            per_sample = [
                -concrete_log_density(labels[i], ConcreteParams(log_alpha[i], float(lam[i])))
                for i in range(8)
            ]
            expected = np.mean(per_sample) + log_gamma(float(k))
            assert loss == pytest.approx(expected, abs=1e-10)

    def test_hand_value_symmetric_k2(self):
        loss = float(sts_nll(np.array([[0.5, 0.5]]), np.zeros((1, 2)), np.array([1.0])))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_boundary_label_rejected(self):
        with pytest.raises(DomainError):
            sts_nll(np.array([[0.0, 1.0]]), np.zeros((1, 2)), np.array([1.0]))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(DomainError):
            sts_nll(np.array([[0.4, 0.6]]), np.zeros((1, 2)), np.array([0.0]))

    def test_gradient_through_branch_matches_finite_differences(self, rng):
        feats = np.asarray(rng.normal((6, 4)))
        labels = np.asarray([np.asarray(rng.uniform(3)) for _ in range(6)])
        labels = np.clip(labels / labels.sum(axis=1, keepdims=True), 1e-3, 1 - 1e-3)
        labels /= labels.sum(axis=1, keepdims=True)
        log_alpha = np.asarray(rng.normal((6, 3)))
        branch = TemperatureBranch.build(4, [5], Rng(31))
        branch.layers[-1].W[:] = np.asarray(rng.normal((5, 1))) * 0.4  # un-zero the head
        params = branch.parameters()

        def forward(weight_pairs=None):
            raw = reshape(apply_layers(branch.layers, feats, weights=weight_pairs), (6,))
            lam = clamp_min(softplus(raw), 1e-4)
            return sts_nll(labels, log_alpha, lam)

        tape = Tape()
        pairs = [(tape.var(l.W), tape.var(l.b)) for l in branch.layers]
        flat = [v for pair in pairs for v in pair]
        analytic = tape.grad(forward(pairs), flat)
        numeric = central_difference(lambda: float(forward()), params)
        assert_grads_close(analytic, numeric)


class TestCalibrateSts:
    def run_small(self, epochs=25):
        train, val, test, clf, branch = small_pipeline()
        pretrain(clf, train, TrainConfig(optimizer="adam", lr=5e-3, batch_size=64, epochs=40, seed=11))
        model = StsModel(clf, branch)
        mix = MixupConfig(beta=1.0, r=5, s=4)
        cfg = TrainConfig(optimizer="adam", lr=1e-3, batch_size=20, epochs=epochs, seed=13)
        return model, val, test, mix, cfg

    def test_predictions_identical_before_and_after(self):
        model, val, test, mix, cfg = self.run_small()
        before = model.predict_class(test.inputs).copy()
        clf_bytes = [p.tobytes() for p in model.classifier.parameters()]
        calibrate_sts(model, val, mix, cfg)
        np.testing.assert_array_equal(model.predict_class(test.inputs), before)
        for p, original in zip(model.classifier.parameters(), clf_bytes):
            assert p.tobytes() == original

    def test_loss_trends_down(self):
        model, val, _, mix, cfg = self.run_small(epochs=40)
        trace = calibrate_sts(model, val, mix, cfg)
        assert not trace.diverged
        assert np.mean(trace.epoch_losses[-10:]) < np.mean(trace.epoch_losses[:10])

    def test_zero_epochs_leaves_branch_untouched(self):
        model, val, _, mix, cfg = self.run_small(epochs=0)
        before = [p.copy() for p in model.branch.parameters()]
        calibrate_sts(model, val, mix, cfg)
        for a, b in zip(before, model.branch.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_divergence_raises_calibration_error(self):
        model, val, _, mix, cfg = self.run_small(epochs=1)
        model.branch.layers[-1].b[:] = 1e9  # forces an astronomically large temperature
        with pytest.raises(CalibrationError) as err:
            calibrate_sts(model, val, mix, cfg)
        assert err.value.trace is not None
        assert err.value.trace.diverged


class TestScalarTs:
    def make_calibrated_logits(self, n=6000, seed=17):
        # two 1-D gaussians, unit variance, means +-1: the true log odds of
        # class 1 is exactly 2x, so (0, 2x) are calibrated logits
        rng = Rng(seed)
        labels = np.asarray(rng.integers(0, 2, n))
        x = np.asarray(rng.normal(n)) + (2.0 * labels - 1.0)
        logits = np.column_stack([np.zeros(n), 2.0 * x])
        return logits, labels

    def test_recovers_unit_temperature(self):
        logits, labels = self.make_calibrated_logits()
        assert calibrate_scalar_ts(logits, labels) == pytest.approx(1.0, abs=0.05)

    def test_recovers_scale_factor(self):
        logits, labels = self.make_calibrated_logits()
        assert calibrate_scalar_ts(logits * 5.0, labels) == pytest.approx(5.0, abs=0.25)

    def test_argmax_unchanged_by_any_temperature(self):
        logits, _ = self.make_calibrated_logits(n=500)
        base = np.argmax(logits, axis=1)
        for t in (0.05, 1.0, 19.0):
            np.testing.assert_array_equal(np.argmax(logits / t, axis=1), base)


class TestDirichletTs:
    def test_unit_temperature_recovers_dirichlet_nll(self, rng):
        from simplexcal.distributions import DirichletParams, dirichlet_log_density

        labels = np.asarray([np.asarray(rng.uniform(3)) for _ in range(5)])
        labels = np.clip(labels / labels.sum(axis=1, keepdims=True), 1e-3, 1 - 1e-3)
        labels /= labels.sum(axis=1, keepdims=True)
        logits = np.asarray(rng.normal((5, 3)))
        loss = float(dirichlet_ts_nll(labels, logits, np.ones(5)))
        direct = -np.mean([
            dirichlet_log_density(labels[i], DirichletParams(np.exp(logits[i])))
            for i in range(5)
        ])
        assert loss == pytest.approx(direct, abs=1e-12)

    def test_hand_assembled_three_terms(self):
        g = np.array([[0.3, -0.2]])
        pi = np.array([[0.4, 0.6]])
        t = 0.7
        e = np.exp(g[0] / t)
        expected = (
            -log_gamma(e.sum())
            + log_gamma(e[0]) + log_gamma(e[1])
            - (e[0] - 1) * math.log(0.4) - (e[1] - 1) * math.log(0.6)
        )
        assert float(dirichlet_ts_nll(pi, g, np.array([t]))) == pytest.approx(expected, abs=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        feats = np.asarray(rng.normal((5, 4)))
        labels = np.asarray([np.asarray(rng.uniform(3)) for _ in range(5)])
        labels = np.clip(labels / labels.sum(axis=1, keepdims=True), 1e-2, 1 - 1e-2)
        labels /= labels.sum(axis=1, keepdims=True)
        logits = np.asarray(rng.normal((5, 3)))
        branch = TemperatureBranch.build(4, [5], Rng(37))
        branch.layers[-1].W[:] = np.asarray(rng.normal((5, 1))) * 0.4  # un-zero the head
        params = branch.parameters()

        def forward(weight_pairs=None):
            raw = reshape(apply_layers(branch.layers, feats, weights=weight_pairs), (5,))
            t = clamp_min(softplus(raw), 1e-4)
            return dirichlet_ts_nll(labels, logits, t)

        tape = Tape()
        pairs = [(tape.var(l.W), tape.var(l.b)) for l in branch.layers]
        flat = [v for pair in pairs for v in pair]
        analytic = tape.grad(forward(pairs), flat)
        numeric = central_difference(lambda: float(forward()), params)
        assert_grads_close(analytic, numeric)

    def test_exponent_cap_keeps_loss_finite(self):
        labels = np.array([[0.5, 0.5]])
        logits = np.array([[500.0, -500.0]])
        loss = float(dirichlet_ts_nll(labels, logits, np.array([0.01])))
        assert math.isfinite(loss)

    def test_small_run_decreases_mean_confidence(self):
        # the documented failure mode: annealed-Dirichlet calibration drifts
        # toward underconfidence
        train, val, test, clf, _ = small_pipeline()
        pretrain(clf, train, TrainConfig(optimizer="adam", lr=5e-3, batch_size=64, epochs=60, seed=19))
        branch = TemperatureBranch.build(clf.feature_dim, [128, 64], rng=Rng(41))
        model = StsModel(clf, branch)
        probs_pre = model.predictive_distribution(test.inputs)
        conf_pre = probs_pre.max(axis=1).mean()
        mix = MixupConfig(beta=1.0, r=5, s=4)
        cfg = TrainConfig(optimizer="adam", lr=1e-6, batch_size=20, epochs=1200, seed=23)
        calibrate_dirichlet_ts(model, val, mix, cfg)
        t = model.temperature(test.inputs)
        assert np.mean(t) > 1.0  # annealed concentrations drift toward flatness
        from simplexcal.numcore.special import softmax_rows

        conf_post = softmax_rows(clf.forward_logits(test.inputs) / t[:, None]).max(axis=1).mean()
        assert conf_post < conf_pre


class TestAdamOptimizer:
    def test_converges_on_quadratic(self):
        p = [np.array([5.0, -3.0])]
        opt = Adam(p, weight_decay=0.0)
        for _ in range(2000):
            opt.step(p, [2.0 * p[0]], lr=0.01)
        np.testing.assert_allclose(p[0], 0.0, atol=1e-4)
