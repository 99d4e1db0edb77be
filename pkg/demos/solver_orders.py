"""Empirical convergence orders of the integrators on dh/dt = -h.

Halving the step should cut Euler's error by 2 and RK4's by 16. Dopri5
instead adapts its own steps to a tolerance; the trace shows where.

    python3 demos/solver_orders.py
"""

import math

import numpy as np

from nsdelab import autodiff as ad
from nsdelab.solvers import SolverConfig, ode_solve, sde_solve


def decay(h, t):
    return ad.scale(h, -1.0)


def main():
    exact = math.exp(-1.0)
    steps = [8, 16, 32, 64, 128]
    for method in ("euler", "rk4"):
        errs = [abs(ode_solve(decay, [[1.0]], SolverConfig(method, T=1.0, s=s)).value[0, 0] - exact) for s in steps]
        slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
        print(f"{method:>5}: errors {' '.join(f'{e:.1e}' for e in errs)}  order ~ {slope:.2f}")

    for rtol in (1e-4, 1e-6, 1e-8):
        res = ode_solve(decay, [[1.0]], SolverConfig("dopri5", rtol=rtol, atol=rtol))
        rejected = sum(not s["accepted"] for s in res.trace.steps)
        err = abs(res.value[0, 0] - exact)
        print(f"dopri5 rtol={rtol:.0e}: error {err:.1e}, {len(res.trace.times) - 1} steps, {rejected} rejected")

    # Pure diffusion: the final state should be N(0, sigma^2).
    def zero(h, t):
        return ad.scale(h, 0.0)

    cfg = SolverConfig("euler_maruyama", T=1.0, s=16, k=0.5, noise_seed=0)
    out = sde_solve(zero, np.zeros((100_000, 1)), cfg).value
    print(f"\nEuler-Maruyama, zero drift, sigma={cfg.noise_sigma:g}: sample variance {out.var():.4f}")


if __name__ == "__main__":
    main()
