"""Acceptance suite: one test per release criterion, each printing a
pass/fail line with the measured values.

The heavyweight end-to-end pipelines are shared through module-scoped
fixtures; everything is seeded, so reruns are exactly reproducible.
"""

import json
import math
import os

import numpy as np
import pytest

import _oracles as oracle
from conftest import assert_grads_close, central_difference
from simplexcal.calibrate import (
    TrainConfig,
    cross_entropy_loss,
    dirichlet_ts_nll,
    sts_nll,
)
from simplexcal.data import TaskSpec, bayes_accuracy, gen_gaussian_task
from simplexcal.distributions import (
    ConcreteParams,
    DirichletParams,
    concrete_sample_batch,
)
from simplexcal.errors import CalibrationError
from simplexcal.experiment import (
    ExperimentConfig,
    MetricSettings,
    ModelSpec,
    run_calibrate,
    run_evaluate,
    run_ood,
    run_pretrain,
)
from simplexcal.metrics import ece
from simplexcal.mixup import MixupConfig, multi_mixup_step, stratified_minibatches
from simplexcal.models import TemperatureBranch, apply_layers, load_checkpoint
from simplexcal.numcore.rng import Rng
from simplexcal.numcore.special import softmax_rows
from simplexcal.numcore.tape import Tape, clamp_min, reshape, softplus


def report_line(num, name, detail):
    print(f"[PASS] criterion {num}: {name} -- {detail}")


TRIALS = (1, 2, 3, 4, 5)

# Bayes-0.85 construction: small train split + Adam overfits into clear
# overconfidence, which is the regime calibration is for
DIRECTIONAL_TASK = TaskSpec(
    classes=3, dim=2, per_class=(100, 333, 333), overlap=1.28, seed=7
)

DIRECTIONAL_CONFIG = dict(
    task=DIRECTIONAL_TASK,
    model=ModelSpec(hidden=(64, 64), cut_index=2, branch_hidden=(128, 64)),
    pretrain=TrainConfig(optimizer="adam", lr=1e-3, weight_decay=1e-4,
                         batch_size=128, epochs=400),
    calibration=TrainConfig(optimizer="adam", lr=1e-3, weight_decay=5e-4,
                            batch_size=100, epochs=150),
    dirichlet=TrainConfig(optimizer="adam", lr=1e-6, weight_decay=5e-4,
                          batch_size=100, epochs=2500),
    mixup=MixupConfig(beta=1.0, r=10, s=10),
    beta_grid=(0.2, 0.3, 0.4, 0.6, 1.0),
    metrics=MetricSettings(mc_samples=30, ece_bins=10, mc_std_repeats=10),
    trial_seeds=TRIALS,
)


@pytest.fixture(scope="module")
def directional_run(tmp_path_factory):
    """Pretrain + sts(beta grid) + dirichlet-ts + evaluate over 5 trials."""
    out = str(tmp_path_factory.mktemp("directional"))
    config = ExperimentConfig(output_dir=out, **DIRECTIONAL_CONFIG)
    run_pretrain(config)
    sts_ckpts = run_calibrate(config, "sts")
    dir_ckpts = run_calibrate(config, "dirichlet-ts")
    report, _ = run_evaluate(config, sts_ckpts + dir_ckpts)
    return config, report


def rows_by_method(report, method):
    return sorted(
        (r for r in report["trials"] if r["method"] == method),
        key=lambda r: r["trial_seed"],
    )


def test_criterion_01_accuracy_preservation(tmp_path):
    # default 3-class Gaussian task; equality must be exact over all trials
    config = ExperimentConfig(
        output_dir=str(tmp_path / "out"),
        pretrain=TrainConfig(optimizer="sgd-momentum", lr=0.1, momentum=0.9,
                             weight_decay=5e-4, batch_size=128, epochs=100),
        calibration=TrainConfig(optimizer="adam", lr=1e-3, weight_decay=5e-4,
                                batch_size=100, epochs=60),
        mixup=MixupConfig(beta=1.0, r=10, s=10),
        metrics=MetricSettings(mc_samples=30, mc_std_repeats=10),
        trial_seeds=TRIALS,
    )
    pre_paths = run_pretrain(config)
    post_paths = run_calibrate(config, "sts")
    _, _, test = gen_gaussian_task(config.task)
    gaps = []
    for pre_path, post_path in zip(pre_paths, post_paths):
        pre_model, _ = load_checkpoint(pre_path)
        post_model, _ = load_checkpoint(post_path)
        acc_pre = float(np.mean(pre_model.predict_class(test.inputs) == test.labels))
        acc_post = float(np.mean(post_model.predict_class(test.inputs) == test.labels))
        gaps.append(abs(acc_pre - acc_post))
        np.testing.assert_array_equal(
            pre_model.predict_class(test.inputs), post_model.predict_class(test.inputs)
        )
    assert gaps == [0.0] * len(TRIALS)
    report_line(1, "accuracy preservation", f"accuracy gap exactly 0 in {len(TRIALS)}/5 trials")


def test_criterion_02_corollary_identity(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(2, 8))
        logits = np.asarray(rng.normal((n, k))) * 4
        labels = np.asarray(rng.integers(0, k, n))
        ce = float(cross_entropy_loss(logits, labels))
        probs = softmax_rows(logits)
        nll = -float(np.mean(np.log(probs[np.arange(n), labels])))
        worst = max(worst, abs(ce - nll))
    assert worst < 1e-12
    report_line(2, "cross-entropy equals predictive NLL", f"max gap {worst:.2e} over 100 batches")


def test_criterion_03_marginalization(rng):
    n = 200_000
    worst = 0.0
    for k, log_alpha in ((2, np.array([0.7, -0.4])), (3, np.array([0.5, -0.3, 0.1]))):
        target = softmax_rows(log_alpha[None, :])[0]
        for lam in (0.3, 1.0, 3.0):
            draws = concrete_sample_batch(ConcreteParams(log_alpha, lam), n, rng)
            counts = np.bincount(np.argmax(draws, axis=1), minlength=k) / n
            worst = max(worst, float(np.abs(counts - target).max()))
            assert np.abs(counts - target).max() < 0.01
    report_line(3, "argmax marginal equals softmax for all temperatures",
                f"max deviation {worst:.4f} (tol 0.01, 200k draws)")


def test_criterion_04_density_correctness(rng):
    # normalization on the K=2 simplex edge (quadrature oracle valid for lam >= 1)
    for log_alpha, lam in (((0.0, 0.0), 1.0), ((1.0, -0.5), 2.0)):
        mass = oracle.quad_edge(lambda p1: oracle.concrete_density_k2(p1, log_alpha, lam))
        assert abs(mass - 1.0) < 1e-3
    mu = np.array([2.5, 1.5])
    mass = oracle.quad_edge(lambda p1: oracle.dirichlet_density_k2(p1, mu))
    assert abs(mass - 1.0) < 1e-3
    # sampler histogram against the density
    log_alpha, lam = np.array([0.6, -0.2]), 1.5
    draws = concrete_sample_batch(ConcreteParams(log_alpha, lam), 200_000, rng)
    tv = oracle.histogram_tv_distance(
        draws[:, 0], lambda p1: oracle.concrete_density_k2(p1, log_alpha, lam)
    )
    assert tv < 0.02
    report_line(4, "densities normalize and sampler matches density",
                f"TV distance {tv:.4f} (tol 0.02)")


def test_criterion_05_gradient_correctness(rng):
    checked = 0

    def fd_check(build, params):
        def value():
            return float(build(None))

        tape = Tape()
        pairs = [(tape.var(w), tape.var(b)) for w, b in params]
        flat = [v for pair in pairs for v in pair]
        analytic = tape.grad(build(pairs), flat)
        numeric = central_difference(value, [a for pair in params for a in pair])
        assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-8)

    def random_net(rng, in_dim, widths, out_dim):
        dims = [in_dim, *widths, out_dim]
        return [
            (np.asarray(rng.normal((dims[i], dims[i + 1]))) * 0.5,
             np.asarray(rng.normal(dims[i + 1])) * 0.2)
            for i in range(len(dims) - 1)
        ]

    def interior_labels(rng, n, k):
        raw = np.abs(np.asarray(rng.normal((n, k)))) + 0.1
        lab = raw / raw.sum(axis=1, keepdims=True)
        lab = np.clip(lab, 1e-3, 1 - 1e-3)
        return lab / lab.sum(axis=1, keepdims=True)

    def net_layers(params):
        from simplexcal.models import Layer

        return [
            Layer(w, b, "relu" if i < len(params) - 1 else "linear")
            for i, (w, b) in enumerate(params)
        ]

    # cross-entropy through a full classifier
    for _ in range(8):
        n, k = int(rng.integers(3, 10)), int(rng.integers(2, 5))
        x = np.asarray(rng.normal((n, 3))) * 2
        labels = np.asarray(rng.integers(0, k, n))
        params = random_net(rng, 3, [int(rng.integers(3, 7))], k)
        layers = net_layers(params)

        def build(pairs, layers=layers, x=x, labels=labels):
            return cross_entropy_loss(apply_layers(layers, x, weights=pairs), labels)

        fd_check(build, params)
        checked += 1

    # calibration NLL and the Dirichlet baseline through a softplus branch;
    # configurations stay in the smooth training regime (temperatures away
    # from the clamp floor, concentrations below the exponent cap) where the
    # losses are differentiable and finite differences are meaningful
    for loss_kind in ("sts", "dirichlet"):
        for _ in range(6):
            n, k = int(rng.integers(3, 8)), int(rng.integers(2, 5))
            feats = np.asarray(rng.normal((n, 4)))
            labels = interior_labels(rng, n, k)
            logits = np.asarray(rng.normal((n, k)))
            params = random_net(rng, 4, [5], 1)
            params = [(w * 0.5, b * 0.5) for w, b in params]
            params[-1] = (params[-1][0], params[-1][1] + 0.8)
            layers = net_layers(params)

            def build(pairs, layers=layers, feats=feats, labels=labels, logits=logits,
                      kind=loss_kind, n=n):
                raw = reshape(apply_layers(layers, feats, weights=pairs), (n,))
                lam = clamp_min(softplus(raw), 1e-4)
                if kind == "sts":
                    return sts_nll(labels, logits, lam)
                return dirichlet_ts_nll(labels, logits, lam)

            fd_check(build, params)
            checked += 1

    assert checked >= 20
    report_line(5, "all trainable paths match finite differences",
                f"{checked} random configurations at rel tol 1e-5")


def test_criterion_06_directional_calibration(directional_run, rng):
    config, report = directional_run
    bayes = bayes_accuracy(config.task, 300_000, rng)
    assert abs(bayes - 0.85) < 0.02
    rows = rows_by_method(report, "sts")
    assert len(rows) == len(TRIALS)
    improved = sum(r["ece_post"] <= r["ece_pre"] for r in rows)
    mean_pre = float(np.mean([r["ece_pre"] for r in rows]))
    mean_post = float(np.mean([r["ece_post"] for r in rows]))
    assert improved >= 4
    assert mean_post < mean_pre
    betas = [r["chosen_beta"] for r in rows]
    report_line(6, "validation-selected-beta calibration lowers test ECE",
                f"bayes {bayes:.3f}; improved {improved}/5; "
                f"mean ECE {mean_pre:.4f} -> {mean_post:.4f}; betas {betas}")


def test_criterion_07_dirichlet_underconfidence(directional_run):
    _, report = directional_run
    dir_rows = rows_by_method(report, "dirichlet-ts")
    sts_rows = rows_by_method(report, "sts")
    assert len(dir_rows) == len(TRIALS)
    hits = 0
    for d, s in zip(dir_rows, sts_rows):
        underconfident = d["mean_confidence_post"] < d["mean_confidence_pre"]
        worse_than_sts = d["ece_post"] > s["ece_post"]
        hits += underconfident and worse_than_sts
    assert hits >= 4
    mean_drop = float(np.mean(
        [d["mean_confidence_pre"] - d["mean_confidence_post"] for d in dir_rows]
    ))
    report_line(7, "annealed-Dirichlet baseline drifts underconfident and loses",
                f"{hits}/5 trials underconfident and worse than sts; mean conf drop {mean_drop:.4f}")


def test_criterion_08_ece_oracle(rng):
    conf = np.array([0.95, 0.95, 0.55, 0.55])
    correct = np.array([1.0, 0.0, 1.0, 0.0])
    hand = ece(conf, correct)
    assert hand == pytest.approx(0.25, abs=1e-15)
    n = 50_000
    c = 0.5 + 0.5 * np.asarray(rng.uniform(n))
    hits = (np.asarray(rng.uniform(n)) < c).astype(float)
    calibrated = ece(c, hits)
    assert calibrated < 0.02
    report_line(8, "ECE oracle", f"hand case {hand}; calibrated stream {calibrated:.4f} at N=50k")


def test_criterion_09_ood_direction(tmp_path):
    # separable construction: tight clusters; the OOD cluster sits at the
    # centroid of the class means, 5.7 task sigmas from every class
    task = TaskSpec(classes=3, dim=2, per_class=(300, 200, 200), overlap=0.35, seed=7)
    far = TaskSpec(classes=3, dim=2, per_class=(100, 150, 150), overlap=0.35,
                   seed=8, mean_radius=0.0)
    resample = TaskSpec(classes=3, dim=2, per_class=(100, 150, 150), overlap=0.35, seed=99)
    base = dict(
        task=task,
        model=ModelSpec(hidden=(64, 64), cut_index=2, branch_hidden=(128, 64)),
        pretrain=TrainConfig(optimizer="adam", lr=1e-3, weight_decay=1e-4,
                             batch_size=128, epochs=300),
        calibration=TrainConfig(optimizer="adam", lr=1e-3, weight_decay=5e-4,
                                batch_size=100, epochs=150),
        mixup=MixupConfig(beta=0.4, r=10, s=10),
        metrics=MetricSettings(mc_samples=30, mc_std_repeats=10),
        trial_seeds=(1,),
    )
    config = ExperimentConfig(output_dir=str(tmp_path / "out"), ood_task=far, **base)
    run_pretrain(config)
    ckpt = run_calibrate(config, "sts")[0]
    far_report = run_ood(config, ckpt)
    import dataclasses

    near_config = dataclasses.replace(config, ood_task=resample)
    near_report = run_ood(near_config, ckpt)
    for rep in (far_report, near_report):
        assert set(rep["detectors"]) == {"confidence", "differential_entropy"}
    de_far = far_report["detectors"]["differential_entropy"]["auroc"]
    de_near = near_report["detectors"]["differential_entropy"]["auroc"]
    assert de_far > 0.9
    assert 0.45 <= de_near <= 0.55
    report_line(9, "differential entropy separates far-cluster OOD",
                f"far AUROC {de_far:.3f} (>0.9); resample AUROC {de_near:.3f} (in [0.45, 0.55])")


def test_criterion_10_multi_mixup_contract():
    k, r, s = 3, 10, 10
    xs = np.repeat(np.eye(k), 40, axis=0)
    ys = np.repeat(np.arange(k), 40)
    from simplexcal.data import LabeledDataset

    ds = LabeledDataset(xs, ys, k)
    cfg = MixupConfig(beta=1.0, r=r, s=s)
    rng = Rng(77)
    total = 0
    coord_sum = np.zeros(k)
    exact_weight_rows = 0
    steps = 1000  # 1000 steps x 100 pairs = 100k samples
    for _ in range(steps):
        batch = multi_mixup_step(stratified_minibatches(ds, r, rng), cfg, rng)
        assert batch.inputs.shape == (s * r, k)
        assert batch.labels.min() >= cfg.label_clamp
        assert batch.labels.max() <= 1 - cfg.label_clamp
        for i in range(s):
            w = batch.weights[i]
            rows = batch.labels[i * r : (i + 1) * r]
            if w.min() >= cfg.label_clamp and w.max() <= 1 - cfg.label_clamp:
                assert np.array_equal(rows, np.tile(w, (r, 1)))
                exact_weight_rows += r
        coord_sum += batch.labels.mean(axis=0)
        total += batch.labels.shape[0]
    assert total == 100_000
    mean = coord_sum / steps
    assert np.abs(mean - 1.0 / k).max() < 0.01
    report_line(10, "multi-mixup contract",
                f"{total} samples; labels equal weights on {exact_weight_rows} unclamped rows; "
                f"coordinate mean deviation {np.abs(mean - 1/k).max():.4f}")


def test_criterion_11_pipeline_determinism(tmp_path):
    config = ExperimentConfig(
        output_dir=str(tmp_path / "out"),
        task=TaskSpec(classes=3, dim=2, per_class=(60, 40, 40), overlap=1.0, seed=3),
        model=ModelSpec(hidden=(16, 16), cut_index=2, branch_hidden=(16,)),
        pretrain=TrainConfig(optimizer="sgd-momentum", lr=0.1, batch_size=64, epochs=30),
        calibration=TrainConfig(optimizer="adam", lr=1e-3, batch_size=30, epochs=20),
        mixup=MixupConfig(beta=1.0, r=10, s=3),
        beta_grid=(0.5, 1.0),
        metrics=MetricSettings(mc_samples=15, mc_std_repeats=5),
        trial_seeds=(1, 2, 3),
    )
    blobs = []
    for _ in range(2):
        run_pretrain(config)
        ckpts = run_calibrate(config, "sts")
        ckpts += run_calibrate(config, "scalar-ts")
        run_evaluate(config, ckpts)
        out = config.resolved_output_dir()
        chunks = [open(os.path.join(out, "report.json"), "rb").read()]
        for t in (1, 2, 3):
            chunks.append(open(os.path.join(out, f"calibrated_sts_seed{t}.ckpt"), "rb").read())
        blobs.append(b"".join(chunks))
    assert blobs[0] == blobs[1]
    report_line(11, "pipeline determinism",
                f"byte-identical report and checkpoints over {len(blobs)} reruns")
