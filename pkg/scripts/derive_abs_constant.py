"""Derive the closed value of the abs-terminal preset at x = 0.

For terminal |x| with zero driver, u(T - tau, 0) = sup over gamma in
[sigma_lo^2, sigma_hi^2] of E|sqrt(gamma tau) N|.  This script evaluates
the Gaussian absolute moment by adaptive quadrature on a fine gamma grid,
takes the maximum by brute force and compares it with
sigma_hi * sqrt(2 tau / pi).  The constant printed last is what the tests use.
"""

import math

import numpy as np
from scipy import integrate

SIGMA_LO2, SIGMA_HI2 = 1.0, 4.0


def abs_moment(var: float) -> float:
    dens = lambda z: abs(z) * math.exp(-z * z / (2 * var)) / math.sqrt(2 * math.pi * var)
    val, _ = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
    return val


def main() -> None:
    gammas = np.linspace(SIGMA_LO2, SIGMA_HI2, 301)
    for tau in (1.0, 0.75, 0.5, 0.25):
        vals = np.array([abs_moment(g * tau) for g in gammas])
        best = int(np.argmax(vals))
        closed = math.sqrt(SIGMA_HI2) * math.sqrt(2 * tau / math.pi)
        print(f"tau={tau:<5} argmax gamma={gammas[best]:.3f}  sup={vals[best]:.12f}  closed={closed:.12f}"
              f"  monotone={bool(np.all(np.diff(vals) > 0))}")
    print(f"u(0,0) for T=1: {math.sqrt(SIGMA_HI2) * math.sqrt(2 / math.pi):.12f}")


if __name__ == "__main__":
    main()
