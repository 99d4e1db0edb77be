import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from nsdelab import privacy as pv
from nsdelab.nets import DriftNet, Layer
from nsdelab.privacy import Accountant, OutOfRegimeError, PrivacySpec, PrivacyWarning

mpmath.mp.dps = 40


def mp_gauss(S, eps, delta):
    return mpmath.sqrt(2 * mpmath.log(mpmath.mpf(1.25) / delta)) * S / eps


def test_gaussian_worked_value():
    # sqrt(2 ln 25)
    assert pv.calibrate_sigma_gaussian(1.0, 1 - 1e-12, 0.05) == pytest.approx(2.537272, abs=5e-7)
    assert pv.calibrate_sigma_gaussian(0.0, 0.5, 0.05) == 0.0
    assert pv.calibrate_sigma_gaussian(2.0, 0.5, 0.01) == 2 * pv.calibrate_sigma_gaussian(1.0, 0.5, 0.01)


def test_sde_worked_value_and_boundaries():
    got = pv.calibrate_sigma_sde(1.0, 1.0, 0.5, 1e-5)
    assert got == pytest.approx(float(mp_gauss(1, mpmath.mpf("0.5"), mpmath.mpf("1e-5"))), rel=1e-12)
    # quoted approximation 9.689608; the exact closed form is 9.6896105...
    assert got == pytest.approx(9.689608, rel=1e-5)
    assert pv.calibrate_sigma_sde(0.0, 3.0, 0.5, 1e-5) == 0.0
    assert pv.calibrate_sigma_sde(1.0, 1.0, 0.5, 1.25) == 0.0


def test_training_worked_value():
    cal = pv.calibrate_sigma_training(100, 1.0, 1.0, 8.0, 1e-5, 1e-5)
    exact = 4 * mpmath.sqrt(100 * mpmath.log(mpmath.mpf(125000)) * mpmath.log(mpmath.mpf(100000))) / 8
    assert cal.sigma == pytest.approx(float(exact), rel=1e-12)
    # quoted approximation 58.1196; the exact closed form is 58.11981...
    assert cal.sigma == pytest.approx(58.1196, rel=1e-5)
    assert cal.delta_total == pytest.approx(100 * 1e-5 + 1e-5)
    assert not cal.vacuous
    assert any("regime" in n for n in cal.warnings)
    assert float(cal) == cal.sigma


def test_training_sqrt_k_scaling():
    a = pv.calibrate_sigma_training(4, 1.0, 1.0, 0.5, 1e-5, 1e-5).sigma
    b = pv.calibrate_sigma_training(1, 1.0, 1.0, 0.5, 1e-5, 1e-5).sigma
    assert a == pytest.approx(2 * b, rel=1e-15)


def test_training_vacuous_warns():
    with pytest.warns(PrivacyWarning):
        cal = pv.calibrate_sigma_training(200_000, 1.0, 1.0, 0.5, 1e-5, 1e-5)
    assert cal.vacuous


@pytest.mark.parametrize("eps", [0.0, 1.0, 1.5, -0.1])
def test_out_of_regime(eps):
    with pytest.raises(OutOfRegimeError):
        pv.calibrate_sigma_gaussian(1.0, eps, 1e-5)
    with pytest.raises(OutOfRegimeError):
        pv.calibrate_sigma_sde(1.0, 1.0, eps, 1e-5)


def test_bad_inputs():
    with pytest.raises(ValueError):
        pv.calibrate_sigma_gaussian(-1.0, 0.5, 1e-5)
    with pytest.raises(ValueError):
        pv.calibrate_sigma_gaussian(1.0, 0.5, 0.0)
    with pytest.raises(ValueError):
        pv.calibrate_sigma_training(0, 1.0, 1.0, 0.5, 1e-5, 1e-5)
    with pytest.raises(ValueError):
        pv.calibrate_sigma_training(1, 1.0, 1.0, 0.5, 1e-5, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(0.01, 0.99), st.floats(1e-12, 1.0))
def test_gaussian_matches_mpmath(S, eps, delta):
    got = pv.calibrate_sigma_gaussian(S, eps, delta)
    want = float(mp_gauss(mpmath.mpf(S), mpmath.mpf(eps), mpmath.mpf(delta)))
    assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(0.01, 10.0), st.floats(0.01, 0.99), st.floats(1e-10, 0.5))
def test_epsilon_of_sigma_inverts_calibration(T, L, eps, delta):
    sigma = pv.calibrate_sigma_sde(T, L, eps, delta)
    assert pv.epsilon_of_sigma(sigma, T * L, delta) == pytest.approx(eps, rel=1e-12)


def test_calibrated_sigma_bounds_gaussian_tail():
    # Pr[loss > eps] for the Gaussian mechanism is Phi(Delta/(2 sigma) - eps sigma/Delta)
    for eps, delta in [(0.2, 1e-2), (0.5, 1e-5), (0.9, 1e-3)]:
        sigma = pv.calibrate_sigma_gaussian(1.0, eps, delta)
        tail = stats.norm.sf(eps * sigma - 1 / (2 * sigma))
        assert tail <= delta


# ---------------------------------------------------------------- composition


def test_strong_composition_worked_value():
    e, d = pv.account_strong_composition(1, 0.1, 1e-6, 1e-6)
    want = 0.1 * mpmath.sqrt(2 * mpmath.log(mpmath.mpf(10) ** 6)) + mpmath.mpf("0.1") * mpmath.expm1(mpmath.mpf("0.1"))
    assert e == pytest.approx(float(want), rel=1e-12)
    assert e == pytest.approx(0.536170, rel=1e-5)
    assert d == pytest.approx(2e-6)


def rdp_oracle(K, sigma_rel, delta):
    f = lambda a: K * a / (2 * sigma_rel**2) + math.log(1 / delta) / (a - 1)
    dense = np.linspace(1.0 + 1e-3, 512, 2_000_001)
    return float(np.min(K * dense / (2 * sigma_rel**2) + math.log(1 / delta) / (dense - 1))), f


def test_rdp_worked_value_against_dense_grid():
    got = pv.account_rdp(1, 1.0, 1e-5)
    want, f = rdp_oracle(1, 1.0, 1e-5)
    assert got == pytest.approx(want, rel=1e-3)
    assert got == pytest.approx(5.2985, rel=1e-3)
    cont = optimize.minimize_scalar(f, bounds=(1.0001, 512), method="bounded").fun
    assert got >= cont - 1e-12


def test_gdp_delta_oracle():
    assert pv.gdp_delta(0.0, 1.0) == pytest.approx(0.382925, rel=1e-5)
    for eps in [0.0, 0.5, 2.0, 7.0]:
        for mu in [0.3, 1.0, 3.0]:
            want = stats.norm.cdf(-eps / mu + mu / 2) - math.exp(eps) * stats.norm.cdf(-eps / mu - mu / 2)
            assert pv.gdp_delta(eps, mu) == pytest.approx(want, rel=1e-6, abs=1e-15)


def test_gdp_bisection_solves_delta():
    eps = pv.account_gdp(4, 2.0, 1e-5)
    assert pv.gdp_delta(eps, 1.0) == pytest.approx(1e-5, rel=1e-6)
    assert pv.account_gdp(1, 1e6, 0.4) == 0.0


@pytest.mark.parametrize("method", ["strong_composition", "rdp", "gdp"])
def test_accountants_monotone(method):
    for sr in [0.7, 1.0, 3.0]:
        acc = Accountant(method, sr, 1e-5)
        eps = [acc.epsilon(K) for K in [1, 2, 5, 10, 50]]
        assert all(a <= b for a, b in zip(eps, eps[1:]))
    for K in [1, 10]:
        eps = [Accountant(method, sr, 1e-5).epsilon(K) for sr in [0.5, 1.0, 2.0, 8.0]]
        assert all(a >= b for a, b in zip(eps, eps[1:]))


def test_accountant_steps_and_ledger():
    acc = Accountant("RDP", 2.0, 1e-5)
    assert acc.epsilon() == 0.0
    acc.step(3)
    assert acc.steps == 3 and len(acc.ledger) == 3
    assert acc.ledger[-1] == pv.account_rdp(3, 2.0, 1e-5)
    d = acc.to_dict()
    assert d["method"] == "rdp" and d["steps"] == 3
    strong = Accountant("StrongComposition", 2.0, 1e-6, delta_prime=1e-5)
    strong.step(4)
    assert strong.delta_total == pytest.approx(4e-6 + 1e-5)
    assert Accountant("gdp", 0.0, 1e-5, steps=1).epsilon() == math.inf
    with pytest.raises(ValueError):
        Accountant("prv", 1.0, 1e-5)


def test_privacy_spec_validation():
    assert PrivacySpec(accountant="GDP").to_dict()["accountant"] == "GDP"
    with pytest.raises(ValueError):
        PrivacySpec(delta=0.0)
    with pytest.raises(ValueError):
        PrivacySpec(L=-1.0)
    with pytest.raises(ValueError):
        PrivacySpec(accountant="moments")


# ---------------------------------------------------------------- Lipschitz


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_spectral_norm_matches_svd(m, n, seed):
    W = np.random.default_rng(seed).normal(size=(m, n))
    assert pv.spectral_norm(W, iters=2000, tol=1e-14) == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-6)


def test_spectral_norm_zero():
    assert pv.spectral_norm(np.zeros((3, 3))) == 0.0


def test_lipschitz_drops_time_row():
    W0 = np.vstack([np.eye(2) * 2.0, [[100.0, 100.0]]])
    net = DriftNet([Layer(W0, np.zeros(2), "tanh"), Layer(np.eye(2) * 3.0, np.zeros(2), "identity")], True)
    assert pv.estimate_lipschitz(net) == pytest.approx(6.0, rel=1e-9)
    net.time_conditioning = False
    assert pv.estimate_lipschitz(net) > 100


def test_lipschitz_bounds_empirical_ratio():
    rng = np.random.default_rng(0)
    layers = [Layer(rng.normal(size=(3, 5)), rng.normal(size=5), "tanh"), Layer(rng.normal(size=(5, 3)), np.zeros(3), "identity")]
    net = DriftNet(layers, False)
    L = pv.estimate_lipschitz(net)

    def f(h):
        return np.tanh(h @ layers[0].weights + layers[0].bias) @ layers[1].weights

    for _ in range(200):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert np.linalg.norm(f(a) - f(b)) <= L * np.linalg.norm(a - b) * (1 + 1e-9)


# ---------------------------------------------------------------- audit


def test_audit_passes_calibrated_mechanism():
    sigma = pv.calibrate_sigma_gaussian(1.0, 0.5, 1e-3)
    rep = pv.privacy_loss_audit(sigma, 1.0, 0.5, 1e-3, n_samples=200_000, seed=1)
    assert rep.passed
    assert rep.expected_mean == pytest.approx(1 / (2 * sigma**2))


def test_audit_fails_undersized_noise():
    sigma = pv.calibrate_sigma_gaussian(1.0, 0.5, 1e-3) / 4
    rep = pv.privacy_loss_audit(sigma, 1.0, 0.5, 1e-3, n_samples=200_000, seed=1)
    assert not rep.passed


def test_audit_rejects_bad_args():
    with pytest.raises(ValueError):
        pv.privacy_loss_audit(0.0, 1.0, 0.5, 1e-3)


def test_no_warning_in_regime():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pv.calibrate_sigma_training(10, 1.0, 1.0, 0.5, 1e-5, 1e-5)
