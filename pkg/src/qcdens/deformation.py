"""Discrete deformation state: stepping, rebuilding, and evaluation.

The map f is carried on the source grid together with its z-derivative.
A parameter step theta -> theta + eps*dtheta updates

    f   <- f + eps * u o f
    f_z <- f_z * (1 + eps * du o f + eps * nu conj(mu) / (1 - |mu|^2))

where u solves dbar(u) = L(nu) with the affine pins, and nu is the
first-order dilatation perturbation.  States are treated as immutable;
step and rebuild return new states.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import beltrami
from .dilatation import (
    BasisSpec,
    ParamVector,
    eval_phi,
    eval_phi_coeffs,
    perturb_nu,
    phi_to_mu,
    save_theta,
)
from .errors import NonpositiveJacobian, NonzeroCoefficients, OrientationLoss, RebuildDiverged
from .grid import GridSpec, field_eval, fd_wirtinger_interior, _mesh

__all__ = [
    "DeformationState",
    "init_affine",
    "step",
    "rebuild",
    "evaluate",
    "beltrami_residual",
    "save_state_snapshot",
]

DEFAULT_BELTRAMI_TOL = 5e-3
DEFAULT_REBUILD_STEPS = 100


@lru_cache(maxsize=64)
def _disk_mask(basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    m = np.abs(_mesh(spec)) < basis.L
    m.flags.writeable = False
    return m


@dataclass
class DeformationState:
    """theta together with the cached fields phi, mu, f, f_z."""

    theta: ParamVector
    basis: BasisSpec
    spec: GridSpec
    phi: np.ndarray
    mu: np.ndarray
    f: np.ndarray
    f_z: np.ndarray
    step_count: int = 0
    residual: float | None = None
    inv_cache: tuple | None = None  # (target GridSpec, preimage grid)

    def support_mask(self) -> np.ndarray:
        return _disk_mask(self.basis, self.spec)

    def jacobian_min(self) -> float:
        J = np.abs(self.f_z) ** 2 * (1.0 - np.abs(self.mu) ** 2)
        return float(J.min())


def init_affine(theta: ParamVector, basis: BasisSpec, spec: GridSpec) -> DeformationState:
    """The exact affine state f = a z + b (requires zero coefficients)."""
    if np.any(theta.coeffs != 0.0):
        raise NonzeroCoefficients("init_affine requires all basis coefficients zero")
    Z = spec.mesh()
    return DeformationState(
        theta=theta,
        basis=basis,
        spec=spec,
        phi=spec.zeros(),
        mu=spec.zeros(),
        f=theta.a * Z + theta.b,
        f_z=np.full((spec.n, spec.n), theta.a, dtype=np.complex128),
    )


def step(state: DeformationState, dvec: np.ndarray, eps: float) -> DeformationState:
    """Advance the state along the direction ``dvec`` (flattened theta
    layout: da1, da2, db1, db2, coefficient direction) by step size eps.

    Raises OrientationLoss when the updated Jacobian is not positive at
    every node; the caller is expected to retract the step.
    """
    dvec = np.asarray(dvec, dtype=np.float64)
    theta = state.theta
    da = complex(dvec[0], dvec[1])
    db = complex(dvec[2], dvec[3])
    dcoef = dvec[4:]

    a_new = theta.a + eps * da
    if a_new == 0:
        raise OrientationLoss("affine scale hit zero")
    theta_new = ParamVector(a=a_new, b=theta.b + eps * db,
                            coeffs=theta.coeffs + eps * dcoef)
    phi_new = eval_phi(theta_new, state.basis, state.spec)
    mu_new = phi_to_mu(phi_new)

    inv_cache = state.inv_cache
    if np.any(dcoef != 0.0):
        dphi = eval_phi_coeffs(dcoef, state.basis, state.spec)
        nu = perturb_nu(state.phi, dphi)
        tspec = beltrami.target_spec_for(theta, state.basis, state.spec.n)
        beltrami.assert_support_contained(state, tspec)
        warm = None
        if state.inv_cache is not None and state.inv_cache[0] == tspec:
            warm = state.inv_cache[1]
        inv = beltrami.invert_map(state, tspec, z0=warm)
        plan = beltrami.make_pullback_plan(state, inv)
        g = beltrami.apply_pullback(plan, nu)
        u, du, _ = beltrami.solve_field_batch(tspec, g, theta.a, theta.b, da, db,
                                              record_residual=False)
        # Compose u at the node images (b-centered coordinates).  Images
        # near the target-grid margin blend smoothly into the closed-form
        # affine part of u; beyond the margin only the affine part survives
        # (the source term is zero out there, so the discarded tail is the
        # solve's analytic ambiguity).
        lim = tspec.L - 2.0 * tspec.h
        img = state.f - theta.b
        s = np.maximum(np.abs(img.real), np.abs(img.imag)) / lim
        t = np.clip((1.0 - s) / 0.2, 0.0, 1.0)
        w = t * t * (3.0 - 2.0 * t)
        u_at = db + (da / theta.a) * img
        du_at = np.full(img.shape, da / theta.a, dtype=np.complex128)
        inside = s < 1.0
        wi = w[inside]
        u_at[inside] += wi * (field_eval(tspec, u, img[inside]) - u_at[inside])
        du_at[inside] += wi * (field_eval(tspec, du, img[inside]) - du_at[inside])
        amp = 1.0 - np.abs(state.mu) ** 2
        fz_factor = 1.0 + eps * du_at + eps * nu * np.conj(state.mu) / amp
        inv_cache = (tspec, inv.z)
    else:
        # Pure affine direction: the update is exact, no solve needed.
        u_at = beltrami.eval_affine_u(theta.a, theta.b, da, db, state.f)
        fz_factor = 1.0 + eps * (da / theta.a)

    f_new = state.f + eps * u_at
    fz_new = state.f_z * fz_factor
    if not (np.all(np.isfinite(f_new)) and np.all(np.isfinite(fz_new))):
        raise OrientationLoss("step produced non-finite map values")

    new = DeformationState(
        theta=theta_new,
        basis=state.basis,
        spec=state.spec,
        phi=phi_new,
        mu=mu_new,
        f=f_new,
        f_z=fz_new,
        step_count=state.step_count + 1,
        inv_cache=inv_cache,
    )
    if new.jacobian_min() <= 0.0:
        raise OrientationLoss("Jacobian lost positivity at a grid node")
    return new


def rebuild(
    theta: ParamVector,
    basis: BasisSpec,
    spec: GridSpec,
    M: int = DEFAULT_REBUILD_STEPS,
    beltrami_tol: float = DEFAULT_BELTRAMI_TOL,
) -> DeformationState:
    """Reconstruct f^theta from scratch along the linear coefficient path.

    Integrates theta_t = (a, b, t * coeffs), t: 0 -> 1, in M equal Euler
    steps starting from the exact affine state (the affine part needs no
    integration).  The final Beltrami residual is checked against
    ``beltrami_tol``.
    """
    if M < 1:
        raise ValueError("rebuild needs at least one path step")
    state = init_affine(ParamVector.zeros(basis, a=theta.a, b=theta.b), basis, spec)
    if np.all(theta.coeffs == 0.0):
        state.residual = beltrami_residual(state)
        return state
    dvec = np.concatenate([[0.0, 0.0, 0.0, 0.0], theta.coeffs])
    eps = 1.0 / M
    for _ in range(M):
        state = step(state, dvec, eps)
    # Remove the accumulated floating-point drift of the path parameter.
    state.theta = theta
    state.phi = eval_phi(theta, basis, spec)
    state.mu = phi_to_mu(state.phi)
    state.step_count = 0
    res = beltrami_residual(state)
    state.residual = res
    if not np.isfinite(res) or res > beltrami_tol:
        raise RebuildDiverged(
            f"Beltrami residual {res:.3e} exceeds tolerance {beltrami_tol:.1e} "
            f"after rebuild with M={M}"
        )
    return state


def beltrami_residual(state: DeformationState) -> float:
    """Relative residual ||dbar f - mu d f|| / ||d f|| near the support.

    Measured with fourth-order centered differences: f is not periodic
    (affine tail), so a spectral estimate would ring.  The norm covers
    |z| <= 1.5 L_basis, the dilatation support disk plus a wide margin
    containing all data and evaluation windows; the far field carries the
    solve's accepted analytic ambiguity, not Beltrami error, and is
    excluded.
    """
    d, dbar, mask = fd_wirtinger_interior(state.spec, state.f)
    mask = mask & (np.abs(_mesh(state.spec)) <= 1.5 * state.basis.L)
    num = np.linalg.norm((dbar - state.mu * d)[mask])
    den = np.linalg.norm(d[mask])
    return float(num / max(den, 1e-300))


def evaluate(state: DeformationState, X) -> tuple[np.ndarray, np.ndarray]:
    """Map data points: returns (Y = f(X), log |J|(X)).

    J = |f_z|^2 (1 - |mu|^2) from interpolated fields; positivity is an
    invariant of valid states, so J <= 0 here is a fatal inconsistency.
    """
    X = np.asarray(X, dtype=np.complex128)
    Y = field_eval(state.spec, state.f, X)
    fz = field_eval(state.spec, state.f_z, X)
    mu = field_eval(state.spec, state.mu, X)
    J = np.abs(fz) ** 2 * (1.0 - np.abs(mu) ** 2)
    if np.any(J <= 0.0) or not np.all(np.isfinite(J)):
        raise NonpositiveJacobian("non-positive Jacobian at a data point")
    return Y, np.log(J)


def save_state_snapshot(path_prefix: str, state: DeformationState,
                        M: int = DEFAULT_REBUILD_STEPS) -> None:
    """Persist theta plus the rebuild recipe (f itself is reproducible)."""
    save_theta(f"{path_prefix}.qtheta", state.theta, state.basis)
    with open(f"{path_prefix}.rebuild", "w", encoding="ascii") as fh:
        fh.write(f"grid_n = {state.spec.n}\n")
        fh.write(f"grid_L = {state.spec.L!r}\n")
        fh.write(f"path_steps = {M}\n")
