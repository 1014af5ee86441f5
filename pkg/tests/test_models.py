"""Model families: structural power identities for arbitrary parameters,
Jacobian correctness, penalty closed forms, and the discrete wrappers."""
import numpy as np
import pytest

from phnn import autodiff as ad
from phnn import models as md
from phnn import nets, physics as ph
from phnn.integrators import StepperConfig
from phnn.models import Regularizer


def tiny_phnn_s(seed=0, width=4):
    specs = {
        "LH": nets.MLPSpec(2, 3, width, 2),
        "Lz": nets.MLPSpec(1, 1, width, 2),
        "Kz": nets.MLPSpec(1, 0, width, 2),
    }
    params = nets.build_params(specs, seed)
    return md.DynamicsModel(md.PHNN_S, "tiny", params, specs, ph.harmonic().S.copy(), "harmonic")


def tiny_phnn_jr(seed=0, width=4):
    specs = {
        "LH": nets.MLPSpec(2, 3, width, 2),
        "LR": nets.MLPSpec(3, 6, width, 2),
    }
    params = nets.build_params(specs, seed)
    return md.DynamicsModel(md.PHNN_JR, "tiny", params, specs, ph.harmonic().J.copy(), "harmonic")


def handwired_harmonic_phnn_s(spec=None):
    """PHNN-S whose heads reproduce the analytic harmonic oscillator exactly.

    The energy head's definiteness shift is folded into the constant factor so
    the implemented energy equals the analytic one to machine precision.
    """
    spec = spec or ph.harmonic()
    model = tiny_phnn_s(0)
    vals = model.params.values.copy()
    vals[:] = 0.0
    p = model.params.with_values(vals)
    eps = nets.HAMILTONIAN_EPS
    lh_b = p.array("LH.b2")
    lh_b[:] = [np.sqrt(spec.k1 - eps), 0.0, np.sqrt(1.0 / spec.m - eps)]
    lz_b = p.array("Lz.b2")
    lz_b[:] = [np.sqrt(spec.damping.c)]
    return model.with_params(p)


def test_build_model_shapes_and_counts():
    ho = ph.harmonic()
    m = md.build_model(md.PHNN_S, "small", ho, 0)
    assert m.params.size == 852
    assert np.array_equal(m.interconnection, ho.S)
    mj = md.build_model(md.PHNN_JR, "small", ho, 0)
    assert mj.params.size == 371 + 438
    mn = md.build_model(md.NODE, "small", ho, 0)
    assert mn.params.size == 746
    assert mn.interconnection is None


def test_phnn_s_rest_state():
    m = tiny_phnn_s(3)
    xd, w, y = md.eval_f(m, np.zeros(2), np.zeros(1))
    assert np.array_equal(xd, np.zeros(2))
    assert np.array_equal(w, np.zeros(1))


def test_phnn_s_power_identity_random_models():
    rng = np.random.default_rng(0)
    for seed in range(20):
        m = md.build_model(md.PHNN_S, "small", ph.harmonic(), seed)
        x = rng.normal(0, 0.7, size=(50, 2))
        u = rng.normal(0, 2, size=(50, 1))
        xd, w, y = md.eval_f(m, x, u)
        arrays = m.param_map()
        gh = nets.hamiltonian_head(m.specs["LH"], arrays, x)[1]
        z = nets.z_head(m.specs["Lz"], m.specs["Kz"], arrays, w)
        res = np.abs(np.sum(gh * xd, -1) + np.sum(z * w, -1) + np.sum(u * y, -1))
        assert res.max() < 1e-12


def test_phnn_jr_power_identity_random_models():
    rng = np.random.default_rng(1)
    for seed in range(20):
        m = md.build_model(md.PHNN_JR, "small", ph.self_sustained(), seed)
        x = rng.normal(0, 0.7, size=(50, 2))
        u = rng.normal(0, 2, size=(50, 1))
        xd, _, y = md.eval_f(m, x, u)
        arrays = m.param_map()
        gh = nets.hamiltonian_head(m.specs["LH"], arrays, x)[1]
        r = nets.r_head(m.specs["LR"], arrays, x, u)
        e = np.concatenate([gh, u], axis=-1)
        res = np.abs(np.sum(gh * xd, -1) + np.sum(u * y, -1)
                     + np.einsum("bi,bij,bj->b", e, r, e))
        assert res.max() < 1e-12


def test_handwired_model_matches_analytic_jacobian():
    ho = ph.harmonic()
    m = handwired_harmonic_phnn_s(ho)
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.6, 0.6, size=(100, 2))
    u = rng.uniform(-2, 2, size=(100, 1))
    jac = np.asarray(md.state_jacobian(m, x, u))
    ref = ph.true_state_jacobian(ho, x, u)
    assert np.max(np.abs(jac - ref)) < 1e-10
    # and the vector fields agree
    xd_m = md.eval_f(m, x, u)[0]
    xd_t = ph.true_dynamics(ho, x, u)[0]
    assert np.max(np.abs(xd_m - xd_t)) < 1e-12


def test_state_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for seed in range(10):
        kind = (md.PHNN_S, md.PHNN_JR, md.NODE)[seed % 3]
        m = md.build_model(kind, "small", ph.harmonic(), seed)
        x = rng.normal(0, 0.7, size=(100, 2))
        u = rng.normal(0, 1, size=(100, 1))
        jac = np.asarray(md.state_jacobian(m, x, u))
        e = 1e-6
        fd = np.stack([
            (np.asarray(md.eval_f(m, x + e * np.eye(2)[j], u)[0])
             - np.asarray(md.eval_f(m, x - e * np.eye(2)[j], u)[0])) / (2 * e)
            for j in range(2)
        ], axis=-1)
        worst = max(worst, np.max(np.abs(jac - fd) / np.maximum(np.abs(fd), 1.0)))
    assert worst < 1e-6


def test_zero_weight_node_is_identity_step():
    m = md.build_model(md.NODE, "small", ph.harmonic(), 0)
    m = m.with_params(m.params.with_values(np.zeros(m.params.size)))
    x = np.array([[0.3, -0.1]])
    u = np.zeros((1, 1))
    assert np.array_equal(np.asarray(md.state_jacobian(m, x, u)), np.zeros((1, 2, 2)))
    out = md.eval_g(m, x, u, StepperConfig("rk2", 0.01))
    assert np.array_equal(out, x)


def test_node_has_no_dg_path():
    m = md.build_model(md.NODE, "small", ph.harmonic(), 0)
    with pytest.raises(ValueError):
        md.eval_g(m, np.zeros((1, 2)), np.zeros((1, 1)), StepperConfig("dg", 0.01))


def test_rk2_wrapper_matches_stepper():
    from phnn import integrators as it
    m = tiny_phnn_s(5)
    x = np.random.default_rng(4).normal(0, 0.3, size=(6, 2))
    u = np.zeros((6, 1))
    cfg = StepperConfig("rk2", 0.01)
    direct = it.rk2_step(lambda xx, uu: md.eval_f(m, xx, uu)[0], x, u, cfg.h)
    assert np.array_equal(md.eval_g(m, x, u, cfg), direct)


def test_dg_rollout_energy_nonincreasing_for_random_models():
    cfg = StepperConfig("dg", 0.01)
    rng = np.random.default_rng(5)
    for seed in range(5):
        m = md.build_model(md.PHNN_S, "small", ph.harmonic(), 100 + seed)
        sys = md.stepper_system(m)
        x = rng.normal(0, 0.5, size=(10, 2))
        u = np.zeros((10, 1))
        prev = sys.hamiltonian(x)
        for _ in range(50):
            x = md.eval_g(m, x, u, cfg)
            h = sys.hamiltonian(x)
            assert np.all(h <= prev + 10 * cfg.dg_tol)
            prev = h


def test_penalty_identity_matrix():
    eye = np.eye(2)
    assert md.jacobian_penalty(eye, "sn") == pytest.approx(1.0, abs=1e-15)
    assert md.jacobian_penalty(eye, "cn") == pytest.approx(1.0, rel=1e-5)
    assert md.jacobian_penalty(eye, "sr") == pytest.approx(0.0, abs=1e-11)


def test_penalty_diagonal_two_one():
    dm = np.diag([2.0, 1.0])
    assert md.jacobian_penalty(dm, "sn") == pytest.approx(2.0, abs=1e-14)
    assert md.jacobian_penalty(dm, "cn") == pytest.approx(4.0, rel=1e-5)
    assert md.jacobian_penalty(dm, "sr") == pytest.approx(1.0, rel=1e-5)


def test_penalty_complex_pair_equal_real_parts():
    jac = ph.true_state_jacobian(ph.harmonic(), np.zeros((1, 2)))[0]
    assert md.jacobian_penalty(jac, "sr") == pytest.approx(0.0, abs=1e-12)


def test_penalties_match_numeric_oracle():
    rng = np.random.default_rng(6)
    jac = rng.normal(size=(2000, 2, 2))
    sv = np.linalg.svd(jac, compute_uv=False)
    ev = np.linalg.eigvals(jac)
    re = np.abs(ev.real)
    keep = (sv[:, 1] > 1e-2) & (re.min(1) > 1e-2)
    jac, sv, re = jac[keep], sv[keep], re[keep]
    sn = np.asarray(md.jacobian_penalty(jac, "sn"))
    cn = np.asarray(md.jacobian_penalty(jac, "cn"))
    sr = np.asarray(md.jacobian_penalty(jac, "sr"))
    tol = lambda ref: 1e-10 * np.maximum(1.0, np.abs(ref))
    ref_sn = sv[:, 0]
    ref_cn = (sv[:, 0] / (sv[:, 1] + 1e-6)) ** 2
    ref_sr = (re.max(1) / (re.min(1) + 1e-6) - 1.0) ** 2
    assert np.all(np.abs(sn - ref_sn) <= tol(ref_sn))
    assert np.all(np.abs(cn - ref_cn) <= tol(ref_cn))
    assert np.all(np.abs(sr - ref_sr) <= tol(ref_sr))


def test_penalty_zero_matrix_is_safe():
    z = np.zeros((2, 2))
    assert md.jacobian_penalty(z, "sn") == 0.0
    assert md.jacobian_penalty(z, "cn") == 0.0
    assert np.isfinite(md.jacobian_penalty(z, "sr"))


def test_penalty_gradient_through_jacobian_third_order():
    """d(penalty(J(theta)))/dtheta against finite differences: the deepest
    differentiation path the losses use."""
    x = np.random.default_rng(7).normal(0, 0.5, size=(4, 2))
    u = np.zeros((4, 1))
    for kind in ("sn", "cn", "sr"):
        for make, seed in ((tiny_phnn_s, 8), (tiny_phnn_jr, 9)):
            m = make(seed)

            def objective(leaves):
                jac = md.state_jacobian(m, x, u, leaves)
                return ad.mean_all(md.jacobian_penalty(jac, kind))

            val, g = ad.value_and_grad(objective, m.params)
            step = 1e-5
            # central differences cannot resolve derivatives below the
            # rounding floor ulp(value)/step; tolerate that noise explicitly
            fd_floor = 64.0 * abs(val) * np.finfo(np.float64).eps / step
            idx = np.random.default_rng(seed).choice(m.params.size, 25, replace=False)
            for i in idx:
                vp, vm = m.params.values.copy(), m.params.values.copy()
                vp[i] += step
                vm[i] -= step
                fp, _ = ad.value_and_grad(objective, m.params.with_values(vp))
                fm, _ = ad.value_and_grad(objective, m.params.with_values(vm))
                fd = (fp - fm) / (2 * step)
                assert abs(g[i] - fd) <= 1e-3 * abs(fd) + fd_floor + 1e-10, (kind, seed, i)


def test_regularizer_defaults():
    assert Regularizer.named("sn").lam == 1e-6
    assert Regularizer.named("cn").lam == 1e-6
    assert Regularizer.named("sr").lam == 1e-4
    assert Regularizer.none().lam == 0.0
    assert Regularizer.named("cn", 0.5).lam == 0.5
    with pytest.raises(ValueError):
        Regularizer.named("bogus")
    with pytest.raises(ValueError):
        Regularizer("sn", -1.0)
