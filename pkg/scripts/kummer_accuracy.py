"""Accuracy and speed of log Z(kappa) and its derivative against quadrature.

Z(kappa) = int_0^1 exp(kappa t^2) dt. The reference integrates
exp(kappa (t^2 - 1)) with adaptive quadrature, so it stays finite for large
kappa, and adds kappa back in the log.

    python scripts/kummer_accuracy.py --points 60
"""

import argparse
import time

import numpy as np
from scipy import integrate

from jointseg.distributions import KAPPA_MAX, kummer_logz


def reference(kappa):
    f = integrate.quad(lambda t: np.exp(kappa * (t * t - 1.0)), 0.0, 1.0, epsabs=0, epsrel=1e-13, limit=200)[0]
    g = integrate.quad(lambda t: t * t * np.exp(kappa * (t * t - 1.0)), 0.0, 1.0, epsabs=0, epsrel=1e-13,
                       limit=200)[0]
    return kappa + np.log(f), g / f


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=40, help="log-spaced kappa values")
    ap.add_argument("--kmax", type=float, default=min(KAPPA_MAX, 1e4))
    args = ap.parse_args()

    kappas = np.concatenate([[0.0], np.logspace(-3, np.log10(args.kmax), args.points)])
    print(f"{'kappa':>12} {'logZ':>22} {'rel err':>10} {'dlogZ':>20} {'rel err':>10}")
    worst = [0.0, 0.0]
    for k in kappas:
        logz, dlogz = kummer_logz(float(k))
        ref, dref = reference(float(k))
        e1 = abs(logz - ref) / abs(ref) if ref else abs(logz)
        e2 = abs(dlogz - dref) / abs(dref)
        worst = [max(worst[0], e1), max(worst[1], e2)]
        print(f"{k:12.4g} {logz:22.15g} {e1:10.2e} {dlogz:20.15g} {e2:10.2e}")
    print(f"worst relative error: logZ {worst[0]:.2e}, dlogZ {worst[1]:.2e}")

    grid = np.random.default_rng(0).uniform(0.0, args.kmax, 1_000_000)
    start = time.perf_counter()
    kummer_logz(grid)
    print(f"vectorized: {1e9 * (time.perf_counter() - start) / grid.size:.1f} ns per value")


if __name__ == "__main__":
    main()
