"""Upper half-plane geometry behind the Green function contraction estimates.

The central quantity is

    gamma(xi, zeta) = |xi - zeta|^2 / (Im xi * Im zeta)

for xi, zeta in the open upper half-plane H.  It is a monotone function of the
hyperbolic distance, invariant under real shifts and positive rescalings, and
exactly invariant under the inversion w -> -1/w.  The recursion step for
truncated Green functions,

    w -> -1/(z - d + w),

is therefore a strict gamma-contraction for Im z > 0: the real shift z - d
costs nothing, and passing from (xi, zeta) to (z - c + xi, z - d + zeta)
multiplies gamma by Im xi * Im zeta / (Im(z-c+xi) * Im(z-d+zeta)) < 1 while
turning the centers c, d into additive mismatch terms.
"""

from __future__ import annotations

import numpy as np

# Points this close to the real axis are rejected outright; the quantities
# below all divide by imaginary parts.
IM_FLOOR = 1e-300


def _check_upper(w, name: str) -> None:
    if np.any(np.imag(w) < IM_FLOOR):
        raise ValueError(f"{name} must lie in the open upper half-plane "
                         f"(Im >= {IM_FLOOR:g})")


def gamma(xi, zeta):
    """|xi - zeta|^2 / (Im xi * Im zeta) for points in the upper half-plane.

    Accepts scalars or numpy arrays (broadcasting).  Raises ValueError if any
    point has imaginary part below the floor.
    """
    _check_upper(xi, "xi")
    _check_upper(zeta, "zeta")
    d = np.subtract(xi, zeta)
    return (np.real(d) ** 2 + np.imag(d) ** 2) / (np.imag(xi) * np.imag(zeta))


def c0_bound(zeta, lam):
    """Constant c0(zeta, lambda) in the shifted-comparison inequality.

        gamma(xi, zeta) <= c0(zeta, lambda) * (gamma(xi, zeta + lambda) + 1)

    holds for every xi in H, with

        c0 = (1 + Im(lambda)/Im(zeta)) * (1 + 2|lambda|/Im(zeta + lambda))^2.

    Requires zeta and zeta + lambda in the upper half-plane (lambda itself may
    have negative imaginary part).
    """
    _check_upper(zeta, "zeta")
    shifted = np.add(zeta, lam)
    _check_upper(shifted, "zeta + lambda")
    first = 1.0 + np.imag(lam) / np.imag(zeta)
    second = 1.0 + 2.0 * np.abs(lam) / np.imag(shifted)
    return first * second ** 2


def mobius_step(z, effective_degree, children_sum):
    """One step of the Green function recursion: -1/(z - d + sum).

    ``z`` is the spectral parameter (Im z > 0), ``effective_degree`` the real
    degree offset d, ``children_sum`` the sum of truncated Green values over
    forward neighbors (closed upper half-plane: 0 is allowed for leaves).
    Returns a point in H.

    The arithmetic runs through numpy complex128 so results are bitwise
    consistent with the vectorized recursion kernels.
    """
    z = np.complex128(z)
    s = np.complex128(children_sum)
    if np.imag(z) < IM_FLOOR and np.imag(s) < IM_FLOOR:
        raise ValueError("need Im z > 0 or Im children_sum > 0")
    w = z - np.float64(effective_degree) + s
    out = np.complex128(-1.0) / w
    if np.imag(out) <= 0.0:
        # cannot happen for valid inputs; guards against degenerate rounding
        raise ArithmeticError("recursion step left the upper half-plane")
    return complex(out)
