"""Time integrators for ODE and SDE blocks, unrolled onto an autodiff tape.

Drift functions take ``(h, t)`` with ``h`` a :class:`~nsdelab.autodiff.Var`
of shape ``(batch, dim)`` and return a ``Var`` of the same shape. Every
accepted step is built from tape ops, so gradients with respect to the
initial state and the drift parameters come from an ordinary
:func:`~nsdelab.autodiff.backward` call on a downstream scalar.

The SDE solvers use the constant diffusion ``(sigma / sqrt(T)) * I``; the
Wiener increments are drawn up front from the config's ``noise_seed`` and
enter the tape as constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, Var, add, scale

__all__ = [
    "SolverConfig",
    "SolveTrace",
    "SolveResult",
    "SolverDivergenceError",
    "StiffnessError",
    "ode_solve",
    "dopri5_solve",
    "sde_solve",
    "solve",
    "sigma_of",
]

Drift = Callable[[Var, float], Var]

_METHOD_ALIASES = {
    "euler": "euler",
    "rk4": "rk4",
    "dopri5": "dopri5",
    "euler_maruyama": "euler_maruyama",
    "eulermaruyama": "euler_maruyama",
    "stochastic_rk4": "stochastic_rk4",
    "stochasticrk4": "stochastic_rk4",
}
DETERMINISTIC = ("euler", "rk4", "dopri5")
STOCHASTIC = ("euler_maruyama", "stochastic_rk4")


class SolverDivergenceError(RuntimeError):
    """The state became non-finite."""

    def __init__(self, time_index: int, t: float):
        self.time_index = time_index
        self.t = t
        super().__init__(f"non-finite state at step {time_index} (t={t:.6g})")


class StiffnessError(RuntimeError):
    """Adaptive step size collapsed below the underflow threshold."""


def sigma_of(k: float, T: float, s: float) -> float:
    """Noise intensity ``k / sqrt(T / s)`` from stochasticity level, horizon and steps per unit time."""
    if T <= 0 or s <= 0:
        raise ValueError(f"T and s must be positive (got T={T}, s={s})")
    if k < 0:
        raise ValueError(f"k must be non-negative (got {k})")
    return k * math.sqrt(s / T)


@dataclass(frozen=True)
class SolverConfig:
    """Integrator options.

    ``s`` is the number of steps per unit time, so fixed-step methods take
    ``T * s`` steps of size ``1 / s``. The SDE noise intensity is
    ``sigma_of(k, T, s)`` unless ``sigma`` is given explicitly.
    """

    method: str = "euler"
    T: float = 1.0
    s: int = 16
    rtol: float = 1e-5
    atol: float = 1e-5
    k: float = 0.0
    noise_seed: int = 0
    sigma: float | None = None

    def __post_init__(self) -> None:
        key = self.method.lower().replace("-", "_")
        if key not in _METHOD_ALIASES:
            raise ValueError(f"unknown solver method {self.method!r}")
        object.__setattr__(self, "method", _METHOD_ALIASES[key])
        if not self.T > 0:
            raise ValueError(f"T must be positive (got {self.T})")
        if self.s <= 0:
            raise ValueError(f"s must be positive (got {self.s})")
        if self.method != "dopri5":
            n = self.T * self.s
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"T*s must be a positive integer (got {n})")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.k < 0:
            raise ValueError(f"k must be non-negative (got {self.k})")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be non-negative (got {self.sigma})")

    @property
    def n_steps(self) -> int:
        return int(round(self.T * self.s))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def stochastic(self) -> bool:
        return self.method in STOCHASTIC

    @property
    def noise_sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return sigma_of(self.k, self.T, self.s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class SolveTrace:
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    noise: list[np.ndarray] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "times": self.times,
                "state_norms": [float(np.linalg.norm(s)) for s in self.states],
                "steps": self.steps,
            }
        )


@dataclass
class SolveResult:
    state: Var
    trace: SolveTrace

    @property
    def value(self) -> np.ndarray:
        return self.state.value


def _start(h0, tape: Tape | None) -> Var:
    if isinstance(h0, Var):
        return h0
    return (tape or Tape()).const(np.atleast_2d(np.asarray(h0, dtype=np.float64)))


def _check_finite(h: Var, i: int, t: float) -> None:
    if not np.isfinite(h.value).all():
        raise SolverDivergenceError(i, t)


def _euler_incr(f: Drift, h: Var, t: float, dt: float) -> Var:
    return scale(f(h, t), dt)


def _rk4_incr(f: Drift, h: Var, t: float, dt: float) -> Var:
    half = 0.5 * dt
    k1 = f(h, t)
    k2 = f(add(h, scale(k1, half)), t + half)
    k3 = f(add(h, scale(k2, half)), t + half)
    k4 = f(add(h, scale(k3, dt)), t + dt)
    acc = add(add(k1, scale(k2, 2.0)), add(scale(k3, 2.0), k4))
    return scale(acc, dt / 6.0)


_INCREMENTS = {
    "euler": _euler_incr,
    "rk4": _rk4_incr,
    "euler_maruyama": _euler_incr,
    "stochastic_rk4": _rk4_incr,
}


def ode_solve(f: Drift, h0, cfg: SolverConfig, tape: Tape | None = None) -> SolveResult:
    """Fixed-step Euler or classical RK4 over ``[0, T]``; Dopri5 is dispatched to :func:`dopri5_solve`."""
    if cfg.method == "dopri5":
        return dopri5_solve(f, h0, cfg, tape)
    if cfg.method not in ("euler", "rk4"):
        raise ValueError(f"ode_solve needs a deterministic method, got {cfg.method!r}")
    incr = _INCREMENTS[cfg.method]
    h = _start(h0, tape)
    n, dt = cfg.n_steps, cfg.dt
    trace = SolveTrace(times=[0.0], states=[h.value])
    for i in range(n):
        t = cfg.T * i / n
        h = add(h, incr(f, h, t, dt))
        _check_finite(h, i + 1, t + dt)
        trace.times.append(cfg.T * (i + 1) / n)
        trace.states.append(h.value)
    return SolveResult(h, trace)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

_SAFETY = 0.9
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5
_MIN_FACTOR, _MAX_FACTOR = 0.2, 5.0


def _lincomb(h: Var, ks: list[Var], coeffs, dt: float) -> Var:
    acc = None
    for k, c in zip(ks, coeffs):
        if c == 0.0:
            continue
        term = scale(k, c * dt)
        acc = term if acc is None else add(acc, term)
    return h if acc is None else add(h, acc)


def _dopri_stages(f: Drift, h: Var, t: float, dt: float) -> list[Var]:
    ks: list[Var] = []
    for i in range(6):
        hi = _lincomb(h, ks, _A[i], dt) if i else h
        ks.append(f(hi, t + _C[i] * dt))
    return ks


def dopri5_solve(
    f: Drift,
    h0,
    cfg: SolverConfig,
    tape: Tape | None = None,
    grid: list[float] | None = None,
) -> SolveResult:
    """Adaptive Dormand-Prince 5(4) with a PI step-size controller.

    Steps whose RMS-weighted error norm exceeds 1 are rejected (their tape
    nodes stay dead). Passing ``grid`` replays a previously accepted time
    grid without adaptation, which is what finite-difference checks need.
    """
    h = _start(h0, tape)
    T = cfg.T
    trace = SolveTrace(times=[0.0], states=[h.value])

    if grid is not None:
        for i in range(len(grid) - 1):
            t, dt = grid[i], grid[i + 1] - grid[i]
            ks = _dopri_stages(f, h, t, dt)
            h = _lincomb(h, ks, _B5, dt)
            _check_finite(h, i + 1, grid[i + 1])
            trace.times.append(grid[i + 1])
            trace.states.append(h.value)
            trace.steps.append({"t": t, "dt": dt, "error": None, "accepted": True})
        return SolveResult(h, trace)

    t = 0.0
    dt = T
    err_prev = 1e-4
    n_accepted = 0
    while t < T:
        dt = min(dt, T - t)
        if dt < 1e-12 * T:
            raise StiffnessError(f"step size {dt:.3g} underflowed at t={t:.6g}")
        ks = _dopri_stages(f, h, t, dt)
        y5 = _lincomb(h, ks, _B5, dt)
        errvec = dt * sum(e * k.value for e, k in zip(_E, ks) if e != 0.0)
        # seventh stage for the embedded error estimate
        k7 = f(y5, t + dt)
        errvec = errvec + dt * _E[6] * k7.value
        tol = cfg.atol + cfg.rtol * np.maximum(np.abs(h.value), np.abs(y5.value))
        err = float(np.sqrt(np.mean((errvec / tol) ** 2)))
        if not math.isfinite(err):
            raise SolverDivergenceError(n_accepted + 1, t + dt)
        if err <= 1.0:
            t_new = T if T - (t + dt) <= 1e-14 * T else t + dt
            trace.steps.append({"t": t, "dt": t_new - t, "error": err, "accepted": True})
            t = t_new
            h = y5
            n_accepted += 1
            _check_finite(h, n_accepted, t)
            trace.times.append(t)
            trace.states.append(h.value)
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** (-_ALPHA) * err_prev**_BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
        else:
            trace.steps.append({"t": t, "dt": dt, "error": err, "accepted": False})
            factor = max(_MIN_FACTOR, _SAFETY * err ** (-0.2))
        dt *= factor
    return SolveResult(h, trace)


def sde_solve(
    f: Drift,
    h0,
    cfg: SolverConfig,
    tape: Tape | None = None,
    noise: list[np.ndarray] | None = None,
) -> SolveResult:
    """Euler-Maruyama or RK4-drift-plus-additive-noise over ``[0, T]``.

    Each step adds ``(sigma / sqrt(T)) * w`` with ``w ~ N(0, dt I)``.
    ``noise`` replays stored increments ``w`` (e.g. ``trace.noise``) instead
    of drawing from ``cfg.noise_seed``.
    """
    if cfg.method not in STOCHASTIC:
        raise ValueError(f"sde_solve needs a stochastic method, got {cfg.method!r}")
    sigma = cfg.noise_sigma
    incr = _INCREMENTS[cfg.method]
    h = _start(h0, tape)
    n, dt = cfg.n_steps, cfg.dt
    g = sigma / math.sqrt(cfg.T)
    if sigma > 0 and noise is None:
        rng = np.random.default_rng(cfg.noise_seed)
        sd = math.sqrt(dt)
        noise = [rng.standard_normal(h.shape) * sd for _ in range(n)]
    trace = SolveTrace(times=[0.0], states=[h.value], noise=list(noise) if sigma > 0 else [])
    tape_ = h.tape
    for i in range(n):
        t = cfg.T * i / n
        h = add(h, incr(f, h, t, dt))
        if sigma > 0:
            h = add(h, tape_.const(g * noise[i]))
        _check_finite(h, i + 1, t + dt)
        trace.times.append(cfg.T * (i + 1) / n)
        trace.states.append(h.value)
    return SolveResult(h, trace)


def solve(f: Drift, h0, cfg: SolverConfig, tape: Tape | None = None) -> SolveResult:
    """Dispatch on ``cfg.method``."""
    if cfg.stochastic:
        return sde_solve(f, h0, cfg, tape)
    return ode_solve(f, h0, cfg, tape)
