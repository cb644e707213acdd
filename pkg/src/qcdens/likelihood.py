"""Penalized log-likelihood, its exact gradient, and built-in targets.

The log-likelihood of data X under the model "f(X) is distributed as the
known target with log-density H" is

    ll(theta) = sum_k log|J(X_k)| + H(f(X_k)).

Its derivative in a parameter direction is
``sum_k div u(Y_k) + <u(Y_k), grad H(Y_k)>`` with Y_k = f(X_k) and u the
direction's perturbation field.  The four affine directions have closed
forms (u = db + (da/a)(zeta - b), div u = 2 Re(da/a)); every basis
coefficient direction needs one dbar-solve, and those share the Newton
inverse, the pullback plan and the FFTs through a batched path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import beltrami
from .deformation import DeformationState, evaluate
from .dilatation import BasisSpec, ParamVector, nu_factors, _bump_grid, _phase_table
from .grid import apply_plan, field_plan

__all__ = [
    "TargetDensity",
    "gaussian_target",
    "halfg_target",
    "loglike",
    "grad_loglike",
    "penalty",
    "penalty_grad",
]


@dataclass
class TargetDensity:
    """A known target law: log-density H and gradient of H.

    Both callables act on complex point arrays (z = x + iy); the gradient
    is returned as the complex field H_x + i H_y so that the Euclidean dot
    product <u, grad H> is ``Re(u * conj(grad))``.  ``mean`` and ``scale``
    summarize the law for the affine moment-matching initializer.
    """

    name: str
    logpdf: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    mean: complex
    scale: float


def gaussian_target(sigma: float) -> TargetDensity:
    """Radially symmetric bivariate normal with mean 0."""
    s2 = sigma * sigma
    const = -np.log(2.0 * np.pi * s2)

    def logpdf(z):
        z = np.asarray(z, dtype=np.complex128)
        return const - (z.real ** 2 + z.imag ** 2) / (2.0 * s2)

    def grad(z):
        z = np.asarray(z, dtype=np.complex128)
        return -z / s2

    return TargetDensity(name=f"gaussian({sigma:g})", logpdf=logpdf, grad=grad,
                         mean=0.0 + 0.0j, scale=sigma)


# Softened half-normal: x2 is N(0, 1/2); x1 is a mixture of half-normals
# glued at 0, with weights chosen so the density is C^1 across the seam.
HALFG_SIGMA_MINUS = 0.5
HALFG_SIGMA_PLUS = 1.0 / 50.0
HALFG_GAMMA = 1.0 / (1.0 + HALFG_SIGMA_MINUS / HALFG_SIGMA_PLUS)  # = 1/26
HALFG_SIGMA2 = 0.5


def halfg_target() -> TargetDensity:
    sm, sp, gam = HALFG_SIGMA_MINUS, HALFG_SIGMA_PLUS, HALFG_GAMMA
    s2 = HALFG_SIGMA2
    # 2 gamma phi_{sp}(0) = 2 (1-gamma) phi_{sm}(0): one shared seam value.
    log_plus = np.log(2.0 * gam / (np.sqrt(2.0 * np.pi) * sp))
    log_minus = np.log(2.0 * (1.0 - gam) / (np.sqrt(2.0 * np.pi) * sm))
    log_c2 = -0.5 * np.log(2.0 * np.pi * s2 * s2)

    def logpdf(z):
        z = np.asarray(z, dtype=np.complex128)
        x, y = z.real, z.imag
        lx = np.where(x >= 0,
                      log_plus - x * x / (2.0 * sp * sp),
                      log_minus - x * x / (2.0 * sm * sm))
        return lx + log_c2 - y * y / (2.0 * s2 * s2)

    def grad(z):
        z = np.asarray(z, dtype=np.complex128)
        x, y = z.real, z.imag
        gx = np.where(x >= 0, -x / (sp * sp), -x / (sm * sm))
        return gx + 1j * (-y / (s2 * s2))

    # Mixture moments: E X1 = sqrt(2/pi) (gam*sp - (1-gam)*sm), Var per axis
    # averaged into a scalar scale for the affine initializer.
    ex1 = np.sqrt(2.0 / np.pi) * (gam * sp - (1.0 - gam) * sm)
    ex1sq = gam * sp * sp + (1.0 - gam) * sm * sm
    var1 = ex1sq - ex1 * ex1
    scale = float(np.sqrt(0.5 * (var1 + s2 * s2)))
    return TargetDensity(name="halfg-target", logpdf=logpdf, grad=grad,
                         mean=complex(ex1, 0.0), scale=scale)


def loglike(state: DeformationState, X, target: TargetDensity) -> float:
    """sum_k log|J(X_k)| + H(f(X_k))."""
    Y, logJ = evaluate(state, X)
    return float(np.sum(logJ) + np.sum(target.logpdf(Y)))


def _affine_entries(Y: np.ndarray, G: np.ndarray, a: complex, b: complex) -> np.ndarray:
    m = Y.shape[0]
    out = np.empty(4)
    for i, (da, db) in enumerate(((1.0, 0.0), (1j, 0.0), (0.0, 1.0), (0.0, 1j))):
        if da != 0:
            u = (da / a) * (Y - b)
            div = 2.0 * np.real(da / a)
        else:
            u = np.full_like(Y, db)
            div = 0.0
        out[i] = m * div + np.sum(np.real(u * np.conj(G)))
    return out


def grad_loglike(state: DeformationState, X, target: TargetDensity,
                 chunk_freqs: int | None = None) -> np.ndarray:
    """Exact likelihood gradient, aligned with the flattened theta layout.

    All coefficient directions are solved against the same frozen state:
    one Newton inversion and one pullback plan are shared, and the solves
    run as a batch of FFTs (chunked to bound memory).
    """
    basis = state.basis
    theta = state.theta
    X = np.asarray(X, dtype=np.complex128)
    Y, _ = evaluate(state, X)
    G = target.grad(Y)

    out = np.empty(basis.dim)
    out[:4] = _affine_entries(Y, G, theta.a, theta.b)

    tspec = beltrami.target_spec_for(theta, basis, state.spec.n)
    beltrami.assert_support_contained(state, tspec)
    warm = None
    if state.inv_cache is not None and state.inv_cache[0] == tspec:
        warm = state.inv_cache[1]
    inv = beltrami.invert_map(state, tspec, z0=warm)
    state.inv_cache = (tspec, inv.z)
    plan = beltrami.make_pullback_plan(state, inv)
    y_plan = field_plan(tspec, Y - theta.b)

    S1, S2 = nu_factors(state.phi)
    T = _bump_grid(basis, state.spec)
    tab = _phase_table(basis, state.spec)
    freqs = basis.frequencies()
    n = state.spec.n
    if chunk_freqs is None:
        chunk_freqs = max(8, (1 << 21) // (n * n))

    conjG = np.conj(G)
    for q0 in range(0, basis.n_freq, chunk_freqs):
        q1 = min(q0 + chunk_freqs, basis.n_freq)
        k1 = freqs[q0:q1, 0] + basis.N
        k2 = freqs[q0:q1, 1] + basis.N
        ET = (tab[k2][:, :, None] * tab[k1][:, None, :]) * T
        A = ET * S1
        B = np.conj(ET) * S2
        nus = np.empty((2 * (q1 - q0), n, n), dtype=np.complex128)
        nus[0::2] = A - B
        nus[1::2] = 1j * (A + B)
        g = beltrami.apply_pullback(plan, nus)
        u, du, _ = beltrami.solve_field_batch(tspec, g, theta.a, theta.b,
                                              0.0, 0.0, record_residual=False)
        uY = apply_plan(u, y_plan)
        duY = apply_plan(du, y_plan)
        entries = 2.0 * np.real(duY).sum(axis=-1) + np.real(uY * conjG).sum(axis=-1)
        out[4 + 2 * q0:4 + 2 * q1] = entries
    return out


def penalty(theta: ParamVector, basis: BasisSpec) -> float:
    """Spline-type quadratic penalty sum (k1^2+k2^2)^2 (a_k^2 + b_k^2).

    The affine parameters and the (0,0) frequency carry no penalty.
    """
    w = basis.penalty_weights()
    return float(np.sum(w * theta.coeffs ** 2))


def penalty_grad(theta: ParamVector, basis: BasisSpec) -> np.ndarray:
    out = np.zeros(basis.dim)
    out[4:] = 2.0 * basis.penalty_weights() * theta.coeffs
    return out
