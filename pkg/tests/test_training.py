"""Losses and the training loop: hand-checkable values, gradient correctness
through both steppers, sampling edge cases, determinism, and checkpointing."""
import math

import numpy as np
import pytest

from phnn import autodiff as ad
from phnn import data as dt
from phnn import models as md
from phnn import physics as ph
from phnn import training as tr
from phnn.integrators import StepperConfig
from phnn.models import Regularizer
from test_models import handwired_harmonic_phnn_s, tiny_phnn_s

RK2 = StepperConfig("rk2", 0.01)
DG = StepperConfig("dg", 0.01)


@pytest.fixture(scope="module")
def bundle():
    return dt.build_bundle(ph.harmonic(), dt.DataConfig(n_eval=30, n_infer=5),
                           n_train=25, seed=3)


def small_batch(bundle, n=8):
    return bundle.train.x[:n], bundle.train.u[:n], bundle.train.x_next[:n]


def test_loss_discrete_zero_for_perfect_model(bundle):
    m = tiny_phnn_s(1)
    x, u, _ = small_batch(bundle)
    for cfg in (RK2, DG):
        x_next = np.asarray(md.eval_g(m, x, u, cfg))
        val = tr.loss_discrete(m, (x, u, x_next), cfg)
        assert float(val) <= 1e-12


def test_loss_discrete_identity_model(bundle):
    m = md.build_model(md.NODE, "small", ph.harmonic(), 0)
    m = m.with_params(m.params.with_values(np.zeros(m.params.size)))
    x, u, x_next = small_batch(bundle)
    val = float(tr.loss_discrete(m, (x, u, x_next), RK2))
    expected = np.mean(np.sum(np.abs(x_next - x), axis=-1)) / RK2.h
    assert val == pytest.approx(expected, rel=1e-14)
    assert val >= 0.0


def test_loss_continuous_handwired_and_zero(bundle):
    ho = ph.harmonic()
    x, u, _ = small_batch(bundle)
    xdot = ph.true_dynamics(ho, x, u)[0]
    m = handwired_harmonic_phnn_s(ho)
    assert float(tr.loss_continuous(m, x, u, xdot)) <= 1e-20
    zero = md.build_model(md.NODE, "small", ho, 0)
    zero = zero.with_params(zero.params.with_values(np.zeros(zero.params.size)))
    assert float(tr.loss_continuous(zero, x, u, xdot)) == \
        pytest.approx(np.mean(np.sum(xdot**2, -1)), rel=1e-14)


def test_loss_regularized_reduces_to_discrete(bundle):
    m = tiny_phnn_s(2)
    batch = small_batch(bundle)
    base = float(tr.loss_discrete(m, batch, RK2))
    assert float(tr.loss_regularized(m, batch, RK2, Regularizer.none())) == base
    assert float(tr.loss_regularized(m, batch, RK2, Regularizer("cn", 0.0))) == base


def test_loss_regularized_sr_vanishes_on_underdamped_truth(bundle):
    m = handwired_harmonic_phnn_s()
    batch = small_batch(bundle)
    base = float(tr.loss_discrete(m, batch, DG))
    reg = float(tr.loss_regularized(m, batch, DG, Regularizer.named("sr")))
    assert abs(reg - base) <= 1e-4 * 1e-10  # lambda_sr times a ~0 penalty


@pytest.mark.parametrize("scheme", ["rk2", "dg"])
@pytest.mark.parametrize("reg", ["none", "sn", "cn", "sr"])
def test_gradients_match_fd_on_tiny_model(bundle, scheme, reg):
    m = tiny_phnn_s(4)
    cfg = StepperConfig(scheme, 0.01)
    batch = small_batch(bundle, 6)
    regularizer = Regularizer.named(reg) if reg != "none" else Regularizer.none()

    def objective(leaves):
        return tr.loss_regularized(m, batch, cfg, regularizer, leaves)

    val, g = ad.value_and_grad(objective, m.params)
    step = 1e-5
    floor = 64.0 * abs(val) * np.finfo(np.float64).eps / step
    idx = np.random.default_rng(0).choice(m.params.size, 20, replace=False)
    for i in idx:
        vp, vm = m.params.values.copy(), m.params.values.copy()
        vp[i] += step
        vm[i] -= step
        fp, _ = ad.value_and_grad(objective, m.params.with_values(vp))
        fm, _ = ad.value_and_grad(objective, m.params.with_values(vm))
        fd = (fp - fm) / (2 * step)
        assert abs(g[i] - fd) <= 1e-3 * abs(fd) + floor + 1e-10, (scheme, reg, i)


def test_ld_gradient_small_phnn_matches_fd(bundle):
    # the documented engine-level oracle: full small model, one batch
    m = md.build_model(md.PHNN_S, "small", ph.harmonic(), 11)
    batch = small_batch(bundle, 16)

    def objective(leaves):
        return tr.loss_discrete(m, batch, DG, leaves)

    val, g = ad.value_and_grad(objective, m.params)
    step = 1e-5
    rng = np.random.default_rng(1)
    for i in rng.choice(m.params.size, 30, replace=False):
        vp, vm = m.params.values.copy(), m.params.values.copy()
        vp[i] += step
        vm[i] -= step
        fp, _ = ad.value_and_grad(objective, m.params.with_values(vp))
        fm, _ = ad.value_and_grad(objective, m.params.with_values(vm))
        fd = (fp - fm) / (2 * step)
        assert abs(g[i] - fd) <= 1e-4 * max(abs(fd), 1e-3), i


def test_batch_sampling_with_replacement_never_out_of_range(bundle):
    sub = dt.subset_bundle(bundle, 5)
    cfg = tr.TrainConfig(stepper=RK2, steps=3, batch_size=64, seed=0, eval_every=1)
    m = md.build_model(md.NODE, "small", ph.harmonic(), 0)
    trained, log = tr.train_run(m, sub, cfg)
    assert log.aborted_at is None
    assert len(log.steps) >= 3


def test_zero_steps_leaves_model_unchanged(bundle):
    m = tiny_phnn_s(5)
    cfg = tr.TrainConfig(stepper=RK2, steps=0, seed=0)
    trained, log = tr.train_run(m, bundle, cfg)
    assert np.array_equal(trained.params.values, m.params.values)
    assert log.steps == [0]


def test_training_is_deterministic(bundle):
    cfg = tr.TrainConfig(stepper=DG, steps=25, batch_size=16, seed=9, eval_every=10)
    runs = []
    for _ in range(2):
        m = md.build_model(md.PHNN_S, "small", ph.harmonic(), 21)
        trained, log = tr.train_run(m, bundle, cfg)
        runs.append((trained.params.values.copy(), list(log.train_loss)))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_training_decreases_loss(bundle):
    cfg = tr.TrainConfig(stepper=RK2, steps=300, batch_size=32, seed=2, eval_every=50)
    m = md.build_model(md.PHNN_S, "small", ph.harmonic(), 0)
    trained, log = tr.train_run(m, bundle, cfg)
    evals = [v for v in log.eval_loss if not math.isnan(v)]
    assert evals[-1] < evals[0]
    assert min(evals) < 0.5 * evals[0]


def test_best_checkpoint_selected(bundle):
    cfg = tr.TrainConfig(stepper=RK2, steps=40, batch_size=16, seed=3, eval_every=10)
    m = md.build_model(md.PHNN_S, "small", ph.harmonic(), 1)
    trained, log = tr.train_run(m, bundle, cfg)
    arrays = {n: trained.params.array(n) for n in trained.params.names()}
    ev = tr._eval_loss(trained, bundle.eval, cfg.stepper, arrays)
    finite = [v for v in log.eval_loss if not math.isnan(v)]
    assert ev == pytest.approx(min(finite), rel=1e-12)


def test_metric_log_matches_diagnostics_when_handwired(bundle):
    m = handwired_harmonic_phnn_s()
    x, u, _ = small_batch(bundle, 12)
    cond, spec, stiff = tr.batch_jacobian_stats(m, x, u)
    d = ph.closed_form_diagnostics(ph.harmonic(), x, u)
    assert cond == pytest.approx(np.mean(d.condition_number), abs=1e-8)
    assert spec == pytest.approx(np.mean(d.spectral_norm), abs=1e-8)
    assert stiff == pytest.approx(np.mean(d.stiffness_ratio), abs=1e-8)


def test_numeric_failure_preserves_last_good_checkpoint(bundle):
    m = tiny_phnn_s(6)
    huge = m.params.with_values(m.params.values * 1e160)  # energy overflows
    cfg = tr.TrainConfig(stepper=DG, steps=5, seed=0, eval_every=1)
    with np.errstate(over="ignore", invalid="ignore"):
        trained, log = tr.train_run(m.with_params(huge), bundle, cfg)
    assert log.aborted_at == 0
    assert np.array_equal(trained.params.values, huge.values)


def test_metric_log_monotone_steps():
    log = tr.MetricLog()
    log.append(0, 1.0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        log.append(0, 1.0, 1.0, 1.0, 1.0, 1.0)


def test_metric_log_csv_round_trip(tmp_path):
    log = tr.MetricLog()
    log.append(0, math.nan, 4.0, 1.0, 2.0, 3.0)
    log.append(50, 1.5, math.nan, 1.1, 2.1, 3.1)
    path = tmp_path / "m.csv"
    log.to_csv(path)
    rows = np.genfromtxt(path, delimiter=",", names=True)
    assert rows["step"].tolist() == [0.0, 50.0]
    assert rows["eval_loss"][0] == 4.0
    assert math.isnan(rows["eval_loss"][1])
