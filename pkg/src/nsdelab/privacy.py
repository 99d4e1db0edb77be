"""Noise calibration, composition accountants, Lipschitz bounds and a loss audit.

Conventions: ``sigma`` is an absolute noise standard deviation; accountants
take ``sigma_rel = sigma / S`` (noise-to-sensitivity ratio) so they are
independent of model scale. For an SDE block the sensitivity is ``T * L``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from .nets import DriftNet

__all__ = [
    "OutOfRegimeError",
    "PrivacyWarning",
    "TrainingCalibration",
    "PrivacySpec",
    "calibrate_sigma_gaussian",
    "calibrate_sigma_sde",
    "calibrate_sigma_training",
    "epsilon_of_sigma",
    "account_strong_composition",
    "account_rdp",
    "account_gdp",
    "gdp_delta",
    "RDP_ALPHAS",
    "ACCOUNTANTS",
    "Accountant",
    "spectral_norm",
    "estimate_lipschitz",
    "AuditReport",
    "privacy_loss_audit",
]


class OutOfRegimeError(ValueError):
    """The Gaussian-mechanism bound is only proved for 0 < epsilon < 1."""


class PrivacyWarning(UserWarning):
    pass


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise OutOfRegimeError(f"epsilon must lie in (0, 1), got {eps}")


def calibrate_sigma_gaussian(S: float, eps: float, delta: float) -> float:
    """Minimal sigma = sqrt(2 ln(1.25/delta)) * S / eps."""
    _check_eps(eps)
    if S < 0:
        raise ValueError("sensitivity must be >= 0")
    if not 0.0 < delta <= 1.25:
        raise ValueError("delta must lie in (0, 1.25]")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * S / eps


def calibrate_sigma_sde(T: float, L_f: float, eps: float, delta: float) -> float:
    """Diffusion scale making the time-T SDE map (eps, delta)-DP; sensitivity T * L_f."""
    if T < 0 or L_f < 0:
        raise ValueError("T and L_f must be >= 0")
    return calibrate_sigma_gaussian(T * L_f, eps, delta)


def epsilon_of_sigma(sigma: float, S: float, delta: float) -> float:
    """Per-step epsilon implied by ``sigma`` (inverse of the Gaussian bound).

    Conservative: the bound is only proved for results below 1.
    """
    if sigma <= 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) * S / sigma


@dataclass(frozen=True)
class TrainingCalibration:
    sigma: float
    epsilon: float
    delta_total: float
    warnings: tuple[str, ...] = ()

    @property
    def vacuous(self) -> bool:
        return self.delta_total >= 1.0

    def __float__(self) -> float:
        return self.sigma


def calibrate_sigma_training(
    K: int, T: float, L: float, eps_prime: float, delta: float, delta_prime: float
) -> TrainingCalibration:
    """sigma = 4 sqrt(K ln(1.25/delta) ln(1/delta')) * T L / eps'.

    The guarantee is (eps', K delta + delta')-DP over K iterations.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if T <= 0 or L <= 0 or eps_prime <= 0:
        raise ValueError("T, L and eps' must be > 0")
    if not (0 < delta < 1 and 0 < delta_prime < 1):
        raise ValueError("delta and delta' must lie in (0, 1)")
    sigma = 4.0 * math.sqrt(K * math.log(1.25 / delta) * math.log(1.0 / delta_prime)) * T * L / eps_prime
    delta_total = K * delta + delta_prime
    notes = []
    if delta_total >= 1.0:
        notes.append(f"K*delta + delta' = {delta_total:g} >= 1: the guarantee is vacuous")
        warnings.warn(notes[-1], PrivacyWarning, stacklevel=2)
    if eps_prime >= 1.0:
        notes.append("eps' >= 1 lies outside the regime where the per-step bound is proved")
    return TrainingCalibration(sigma, eps_prime, delta_total, tuple(notes))


@dataclass(frozen=True)
class PrivacySpec:
    """Privacy parameters of an NSDE training run.

    ``delta`` is the per-step failure probability and ``delta_prime`` the
    composition slack; ``L`` fixes the drift Lipschitz bound (None estimates
    it during training). ``epsilon_prime`` and ``K`` record a calibration
    target when sigma came from :func:`calibrate_sigma_training`.
    """

    delta: float = 1e-5
    delta_prime: float = 1e-5
    accountant: str = "strong_composition"
    L: float | None = None
    per_iteration: bool = False
    epsilon_prime: float | None = None
    K: int | None = None

    def __post_init__(self) -> None:
        if not (0 < self.delta < 1 and 0 < self.delta_prime < 1):
            raise ValueError("delta and delta' must lie in (0, 1)")
        if self.L is not None and self.L <= 0:
            raise ValueError("L must be > 0")
        Accountant(self.accountant, 1.0, self.delta)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- accountants


def account_strong_composition(K: int, eps: float, delta: float, delta_prime: float) -> tuple[float, float]:
    """(eps sqrt(2K ln(1/delta')) + K eps (e^eps - 1), K delta + delta')."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if not (0 < delta < 1 and 0 < delta_prime < 1):
        raise ValueError("delta and delta' must lie in (0, 1)")
    eps_total = eps * math.sqrt(2.0 * K * math.log(1.0 / delta_prime)) + K * eps * math.expm1(eps)
    return eps_total, K * delta + delta_prime


RDP_ALPHAS = np.arange(1.25, 512.0 + 0.125, 0.25)


def account_rdp(K: int, sigma_rel: float, delta: float) -> float:
    """Gaussian-mechanism RDP composed K times, converted to (eps, delta) on a fixed alpha grid."""
    if K < 1 or sigma_rel <= 0 or not 0 < delta < 1:
        raise ValueError("need K >= 1, sigma_rel > 0, delta in (0, 1)")
    a = RDP_ALPHAS
    eps = K * a / (2.0 * sigma_rel**2) + math.log(1.0 / delta) / (a - 1.0)
    return float(eps.min())


def gdp_delta(eps: float, mu: float) -> float:
    """delta(eps) of a mu-GDP mechanism."""
    if mu <= 0:
        return 0.0
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    # e^eps * Phi(b) evaluated in log space to survive large eps
    return float(ndtr(a) - math.exp(eps + log_ndtr(b)))


def account_gdp(K: int, sigma_rel: float, delta: float, tol: float = 1e-12) -> float:
    """eps solving delta = Phi(-eps/mu + mu/2) - e^eps Phi(-eps/mu - mu/2), mu = sqrt(K)/sigma_rel."""
    if K < 1 or sigma_rel <= 0 or not 0 < delta < 1:
        raise ValueError("need K >= 1, sigma_rel > 0, delta in (0, 1)")
    mu = math.sqrt(K) / sigma_rel
    if gdp_delta(0.0, mu) <= delta:
        return 0.0
    lo, hi = 0.0, 100.0
    if gdp_delta(hi, mu) > delta:
        return hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gdp_delta(mid, mu) > delta:
            lo = mid
        else:
            hi = mid
    return hi


ACCOUNTANTS = ("strong_composition", "rdp", "gdp")


@dataclass
class Accountant:
    """Running composition ledger for a fixed per-step Gaussian mechanism.

    ``delta`` is the per-step failure probability for strong composition and
    the target total delta for RDP/GDP.
    """

    method: str
    sigma_rel: float
    delta: float
    delta_prime: float = 1e-5
    steps: int = 0
    ledger: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.method = self.method.lower().replace("-", "_")
        aliases = {"strongcomposition": "strong_composition", "strong": "strong_composition"}
        self.method = aliases.get(self.method, self.method)
        if self.method not in ACCOUNTANTS:
            raise ValueError(f"unknown accountant {self.method!r}; choose from {ACCOUNTANTS}")

    @property
    def eps_step(self) -> float:
        return epsilon_of_sigma(self.sigma_rel, 1.0, self.delta)

    def epsilon(self, K: int | None = None) -> float:
        K = self.steps if K is None else K
        if K == 0:
            return 0.0
        if self.sigma_rel <= 0:
            return math.inf
        if self.method == "strong_composition":
            return account_strong_composition(K, self.eps_step, self.delta, self.delta_prime)[0]
        if self.method == "rdp":
            return account_rdp(K, self.sigma_rel, self.delta)
        return account_gdp(K, self.sigma_rel, self.delta)

    @property
    def delta_total(self) -> float:
        if self.method == "strong_composition":
            return self.steps * self.delta + self.delta_prime
        return self.delta

    def step(self, n: int = 1) -> float:
        for _ in range(n):
            self.steps += 1
            self.ledger.append(self.epsilon())
        return self.ledger[-1] if self.ledger else 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sigma_rel": self.sigma_rel,
            "delta": self.delta,
            "delta_prime": self.delta_prime,
            "steps": self.steps,
            "epsilon": self.epsilon(),
            "delta_total": self.delta_total,
        }


# ---------------------------------------------------------------- Lipschitz


def spectral_norm(W: np.ndarray, iters: int = 200, tol: float = 1e-9, seed: int = 0) -> float:
    """Largest singular value by power iteration on W^T W."""
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0 or not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = W @ v
        w = W.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        s_new = math.sqrt(nw)
        if abs(s_new - s) <= tol * s_new:
            s = s_new
            break
        s = s_new
    return float(np.linalg.norm(W @ v))


def estimate_lipschitz(net: DriftNet) -> float:
    """Upper bound on the state-to-state Lipschitz constant of a drift net.

    Product of layer spectral norms; for time-conditioned nets the row of the
    first weight matrix fed by ``t`` is dropped.
    """
    L = 1.0
    for i, layer in enumerate(net.layers):
        W = np.asarray(layer.weights)
        if i == 0 and net.time_conditioning:
            W = W[:-1]
        # weights are stored (fan_in, fan_out); spectral norm is transpose-invariant
        L *= spectral_norm(W)
    return L


# ---------------------------------------------------------------- audit


@dataclass(frozen=True)
class AuditReport:
    p_hat: float
    threshold: float
    passed: bool
    loss_mean: float
    loss_var: float
    expected_mean: float
    expected_var: float
    n_samples: int


def privacy_loss_audit(
    sigma: float, Delta: float, eps: float, delta: float, n_samples: int = 1_000_000, seed: int = 0
) -> AuditReport:
    """Monte Carlo privacy loss of the scalar Gaussian mechanism on inputs 0 and Delta.

    Output y ~ N(0, sigma^2); the loss is log p_0(y) - log p_Delta(y). Passes
    when the empirical Pr[loss > eps] is within three binomial standard errors
    of delta.
    """
    if sigma <= 0 or Delta <= 0:
        raise ValueError("sigma and Delta must be > 0")
    y = np.random.default_rng(seed).normal(0.0, sigma, n_samples)
    loss = ((y - Delta) ** 2 - y**2) / (2.0 * sigma**2)
    p_hat = float(np.mean(loss > eps))
    threshold = delta + 3.0 * math.sqrt(delta * (1.0 - delta) / n_samples)
    return AuditReport(
        p_hat=p_hat,
        threshold=threshold,
        passed=p_hat <= threshold,
        loss_mean=float(loss.mean()),
        loss_var=float(loss.var(ddof=1)),
        expected_mean=Delta**2 / (2.0 * sigma**2),
        expected_var=Delta**2 / sigma**2,
        n_samples=n_samples,
    )
