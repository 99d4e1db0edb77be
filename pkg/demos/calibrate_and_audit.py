"""How much diffusion does an NSDE block need, and does the bound hold up?

Walks from the single-release Gaussian bound to a whole training run, then
checks the calibrated noise empirically by sampling the privacy loss.

    python3 demos/calibrate_and_audit.py
"""

from nsdelab.privacy import (
    Accountant,
    calibrate_sigma_gaussian,
    calibrate_sigma_sde,
    calibrate_sigma_training,
    privacy_loss_audit,
)
from nsdelab.solvers import sigma_of


def main():
    # One release of a function with unit sensitivity.
    sigma = calibrate_sigma_gaussian(S=1.0, eps=0.5, delta=1e-5)
    print(f"Gaussian mechanism, S=1, eps=0.5, delta=1e-5: sigma = {sigma:.6f}")

    # An SDE block integrated to T with an L-Lipschitz drift has sensitivity T*L.
    for T, L in [(1.0, 1.0), (2.0, 1.0), (1.0, 3.0)]:
        print(f"  SDE block T={T:g}, L={L:g}: sigma = {calibrate_sigma_sde(T, L, 0.5, 1e-5):.4f}")

    # Training composes K releases.
    cal = calibrate_sigma_training(K=100, T=1.0, L=1.0, eps_prime=8.0, delta=1e-5, delta_prime=1e-5)
    print(f"\n100 iterations at eps'=8: sigma = {cal.sigma:.4f}, total delta = {cal.delta_total:.2e}")
    for note in cal.warnings:
        print(f"  note: {note}")

    # The stochasticity level k used in experiments maps to sigma through the step count.
    print("\nk, T, s -> sigma")
    for k, T, s in [(0.3, 1, 16), (0.5, 1, 16), (1.0, 1, 64), (2.0, 1, 16)]:
        print(f"  {k:>4g} {T:>2g} {s:>3g} -> {sigma_of(k, T, s):.3g}")

    # Three accountants on the same per-step mechanism.
    print("\nepsilon after K steps (sigma_rel = 4, delta = 1e-5)")
    print("     K   strong      rdp      gdp")
    for K in [1, 10, 100, 1000]:
        row = [Accountant(m, 4.0, 1e-5).epsilon(K) for m in ("strong_composition", "rdp", "gdp")]
        print(f"{K:>6d} " + " ".join(f"{e:8.3f}" for e in row))

    # Empirical check: the loss exceeds eps with probability at most delta.
    print("\nprivacy-loss audit, 1e6 draws each")
    for eps, delta in [(0.2, 1e-2), (0.5, 1e-3), (0.9, 1e-5)]:
        s = calibrate_sigma_gaussian(1.0, eps, delta)
        ok = privacy_loss_audit(s, 1.0, eps, delta, seed=1)
        half = privacy_loss_audit(s / 2, 1.0, eps, delta, seed=1)
        print(
            f"  eps={eps:<4g} delta={delta:<6g} Pr[loss>eps]={ok.p_hat:.2e} ({'pass' if ok.passed else 'FAIL'})"
            f"   half sigma: {half.p_hat:.2e} ({'pass' if half.passed else 'fail'})"
        )


if __name__ == "__main__":
    main()
