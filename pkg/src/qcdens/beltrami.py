"""The perturbation vector field u: pushforward, dbar-inversion, pinning.

Given a deformation state with dilatation mu and derivative f_z, a
perturbation nu of mu induces a vector field u on the image plane with

    dbar u = g,   g = { nu / (1 - |mu|^2) * f_z / conj(f_z) } o f^{-1},

pinned by u(b) = db and u(a+b) = da + db.  The right-hand side g is
obtained by deforming the graph of the braced field with f (numerically:
Newton inversion of f on the target grid, then pullback interpolation).
The equation is inverted through a latent potential w with u = d(w) and
lap(w) = 4 g on a periodic target grid.  A periodic solve cannot carry
the grid mean of g, so the mean is split onto a compactly supported
radial bump chi whose dbar-potential is known in closed form
(M(r)/(pi zeta) with M the mass of chi inside radius r, which decays
like 1/zeta exactly as the Cauchy transform of the carried mass would).
The affine ambiguity of the remainder is removed by the two pinning
conditions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dilatation import BasisSpec, ParamVector
from .errors import (
    DegeneratePinning,
    InverseMapFailure,
    PointOutsideGrid,
    TargetGridOverflow,
)
from .grid import (
    ComplexGrid,
    GridSpec,
    apply_plan,
    field_eval,
    field_plan,
    fd_wirtinger_interior,
    spectral_tables,
    write_qgrid,
)

__all__ = [
    "VectorField",
    "InverseMap",
    "target_spec_for",
    "invert_map",
    "PullbackPlan",
    "make_pullback_plan",
    "apply_pullback",
    "l_operator",
    "solve_field_batch",
    "solve_u",
    "divergence_at",
    "dump_vector_field",
]

# Target-plane fields are sampled in coordinates centered at b
# (eta = zeta - b): translations of b then leave the whole discrete
# computation invariant, and scalings of a stay self-similar because the
# grid half-width is proportional to |a|.  The support image can overshoot
# the conformal radius |a| L substantially at strong dilatations, hence
# the factor 2 allowance, padded again by 2 for periodic separation.
TARGET_SUPPORT_FACTOR = 2.0
TARGET_PAD = 2.0


@dataclass
class VectorField:
    """u and du = d(u) on the target grid, with pinning metadata.

    Grid samples live at the b-centered coordinates eta = zeta - b.
    ``dbar_residual`` is the relative interior finite-difference residual
    of dbar(u) against the right-hand side it was solved for.
    """

    spec: GridSpec
    u: np.ndarray
    du: np.ndarray
    a: complex
    b: complex
    da: complex
    db: complex
    dbar_residual: float


@dataclass
class InverseMap:
    """Preimages of the target grid nodes under the deformation."""

    spec: GridSpec            # target grid
    z: np.ndarray             # preimage estimates, shape (n, n)
    support: np.ndarray       # bool: converged preimage inside the basis disk
    active: np.ndarray        # bool: nodes where Newton was attempted


def target_spec_for(theta: ParamVector, basis: BasisSpec, n: int) -> GridSpec:
    """Image-plane grid (in b-centered coordinates) sized to the state:
    resolves the support image even when |a| shrinks the data far below
    the source scale."""
    half = TARGET_PAD * TARGET_SUPPORT_FACTOR * abs(theta.a) * basis.L
    return GridSpec(L=half, n=n)


def assert_support_contained(state, tspec: GridSpec) -> None:
    """The image of the dilatation support disk must sit inside the target
    grid with an interpolation margin; anything else silently truncates g."""
    img = state.f[state.support_mask()] - state.theta.b
    if img.size == 0:
        return
    lim = tspec.L - 2.0 * tspec.h
    reach = max(np.abs(img.real).max(), np.abs(img.imag).max())
    if reach > lim:
        raise TargetGridOverflow(
            f"support image reaches {reach:.4g}, target grid margin {lim:.4g}"
        )


def invert_map(
    state,
    tspec: GridSpec,
    z0: np.ndarray | None = None,
    max_iter: int = 40,
    tol_factor: float = 1e-10,
) -> InverseMap:
    """Newton inversion of f at every target node that can matter.

    Seeds from ``z0`` (previous inverse) when given, otherwise from the
    affine inverse (zeta - b)/a.  The Newton step uses the full real
    Jacobian of f written with Wirtinger derivatives,
    ``dz = (conj(f_z) r - f_zbar conj(r)) / (|f_z|^2 - |f_zbar|^2)``
    with ``f_zbar = mu f_z``.  Nodes whose preimage lands outside the
    basis disk are excluded from the support (the source term vanishes
    there); failure to converge inside the disk raises, since it signals
    a non-injective discrete map.
    """
    theta = state.theta
    basis = state.basis
    src = state.spec
    eta = tspec.mesh()                   # b-centered image coordinates
    zeta = eta + theta.b
    seed = z0 if z0 is not None else eta / theta.a

    # Only nodes whose preimage could reach the basis disk need solving.
    active = np.abs(seed) <= 1.6 * basis.L
    idx = np.flatnonzero(active.ravel())
    z = seed.ravel()[idx].astype(np.complex128)
    target = zeta.ravel()[idx]

    lim = src.L - src.h
    tol = tol_factor * basis.L
    step_cap = 0.25 * basis.L

    def clamp(w):
        return np.clip(w.real, -lim, lim) + 1j * np.clip(w.imag, -lim, lim)

    z = clamp(z)
    r = target - field_eval(src, state.f, z, clip=True)
    err = np.abs(r)
    converged = err <= tol
    for _ in range(max_iter):
        if converged.all():
            break
        fz = field_eval(src, state.f_z, z, clip=True)
        fzb = field_eval(src, state.mu, z, clip=True) * fz
        det = np.abs(fz) ** 2 - np.abs(fzb) ** 2
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        dz = (np.conj(fz) * r - fzb * np.conj(r)) / det
        mag = np.abs(dz)
        big = mag > step_cap
        if big.any():
            dz[big] *= step_cap / mag[big]
        dz[converged] = 0.0
        # Backtrack nodes whose residual would grow (Newton on the
        # interpolated map can overshoot near strong curvature).
        for _ in range(4):
            z_try = clamp(z + dz)
            r_try = target - field_eval(src, state.f, z_try, clip=True)
            err_try = np.abs(r_try)
            worse = (~converged) & (err_try > err)
            if not worse.any():
                break
            dz[worse] *= 0.5
        z = z_try
        r = r_try
        err = np.where(converged, err, err_try)
        converged = err <= tol

    inside = np.abs(z) < basis.L
    bad = inside & ~converged
    if bad.any():
        raise InverseMapFailure(
            f"{int(bad.sum())} target nodes inside the dilatation support "
            "did not converge under Newton inversion"
        )

    z_full = seed.copy()
    z_full.ravel()[idx] = z
    support = np.zeros((tspec.n, tspec.n), dtype=bool)
    support.ravel()[idx] = inside & converged
    return InverseMap(spec=tspec, z=z_full, support=support, active=active)


@dataclass
class PullbackPlan:
    """Gather plan computing ``{nu * base} o f^{-1}`` for many nu at once.

    The interpolation weights are fused with the base field
    ``base = f_z / (conj(f_z) (1 - |mu|^2))`` evaluated at the gather
    corners, so each direction costs four gathers and a weighted sum.
    """

    tspec: GridSpec
    support_idx: np.ndarray            # flat target-node indices
    corner_idx: tuple
    corner_wb: tuple                   # weight * base at each corner


def make_pullback_plan(state, inv: InverseMap) -> PullbackPlan:
    support_idx = np.flatnonzero(inv.support.ravel())
    pts = inv.z.ravel()[support_idx]
    plan = field_plan(state.spec, pts)
    base = state.f_z / (np.conj(state.f_z) * (1.0 - np.abs(state.mu) ** 2))
    flat = base.ravel()
    wb = tuple(w * flat[i] for w, i in zip(plan.weights, plan.flat_idx))
    return PullbackPlan(inv.spec, support_idx, plan.flat_idx, wb)


def apply_pullback(plan: PullbackPlan, nu: np.ndarray) -> np.ndarray:
    """Map dilatation-plane fields nu (stackable) to target-plane g."""
    flat = nu.reshape(*nu.shape[:-2], -1)
    vals = plan.corner_wb[0] * flat[..., plan.corner_idx[0]]
    for k in (1, 2, 3):
        vals += plan.corner_wb[k] * flat[..., plan.corner_idx[k]]
    n = plan.tspec.n
    g = np.zeros((*nu.shape[:-2], n * n), dtype=np.complex128)
    g[..., plan.support_idx] = vals
    return g.reshape(*nu.shape[:-2], n, n)


def l_operator(nu: np.ndarray, state, tspec: GridSpec | None = None,
               inv: InverseMap | None = None) -> np.ndarray:
    """Pushforward of nu / (1-|mu|^2) * f_z/conj(f_z) to the image plane.

    Zero wherever the preimage leaves the dilatation support disk.
    """
    if tspec is None:
        tspec = inv.spec if inv is not None else target_spec_for(state.theta, state.basis, state.spec.n)
    assert_support_contained(state, tspec)
    if inv is None:
        inv = invert_map(state, tspec)
    return apply_pullback(make_pullback_plan(state, inv), np.asarray(nu))


@lru_cache(maxsize=64)
def _mean_carrier(tspec: GridSpec):
    """Unit-mass radial bump chi with its closed-form dbar-potential.

    chi(r) = 3/(pi rho^2) (1 - (r/rho)^2)^2 inside radius rho = L/4;
    u0 = M(r)/(pi zeta) satisfies dbar(u0) = chi and d(u0) =
    chi conj(zeta)/zeta - M/(pi zeta^2), with M the enclosed chi-mass.
    """
    Z = tspec.mesh()
    rho = 0.25 * tspec.L
    s2 = (Z.real ** 2 + Z.imag ** 2) / (rho * rho)
    inside = s2 < 1.0
    chi = np.where(inside, 3.0 / (np.pi * rho * rho) * (1.0 - s2) ** 2, 0.0)
    M = np.where(inside, s2 * (3.0 - 3.0 * s2 + s2 * s2), 1.0)
    origin = np.abs(Z) < 1e-300
    Zs = np.where(origin, 1.0, Z)
    u0 = np.where(origin, 0.0, M / (np.pi * Zs))
    du0 = np.where(origin, 0.0, chi * np.conj(Zs) / Zs - M / (np.pi * Zs * Zs))
    for a in (chi, u0, du0):
        a.flags.writeable = False
    return chi, u0, du0, float(chi.sum())


def _fd_dbar_residual(tspec: GridSpec, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    _, dbar, mask = fd_wirtinger_interior(tspec, u)
    r = (dbar - g)[..., mask]
    gm = g[..., mask]
    num = np.sqrt(np.sum(np.abs(r) ** 2, axis=-1))
    den = np.sqrt(np.sum(np.abs(gm) ** 2, axis=-1))
    return num / np.maximum(den, 1e-300)


def solve_field_batch(
    tspec: GridSpec,
    g: np.ndarray,
    a: complex,
    b: complex,
    da,
    db,
    record_residual: bool = True,
):
    """Solve dbar(u) = g with pins u(b)=db, u(a+b)=da+db; batched over
    leading axes of ``g``.  Returns (u, du, residuals|None).

    u = d(w) + I u0 + alpha + beta zeta, where I chi carries the grid mean
    of g (chi, u0 from :func:`_mean_carrier`), lap(w) = 4(g - I chi) is
    solved periodically, and (alpha, beta) enforce the pins exactly.
    """
    if a == 0:
        raise DegeneratePinning("affine pinning requires a != 0")
    if not np.all(np.isfinite(g)):
        raise ValueError("solve requires a finite right-hand side")
    t = spectral_tables(tspec)
    chi, u0, du0, chi_sum = _mean_carrier(tspec)
    I = g.sum(axis=(-2, -1)) / chi_sum
    I_ = I[..., None, None] if np.ndim(I) else I
    ghat = np.fft.fft2(g - I_ * chi)
    ghat[..., 0, 0] = 0.0
    what = -4.0 * ghat * t.inv_k2
    u = np.fft.ifft2(t.d_sym * what)
    du = np.fft.ifft2((t.d_sym * t.d_sym) * what)

    Z = tspec.mesh()                    # eta = zeta - b
    u += I_ * u0
    du += I_ * du0

    # Pins sit at eta = 0 (zeta = b) and eta = a (zeta = a + b).
    pin_plan = field_plan(tspec, np.array([0.0, a], dtype=np.complex128))
    upins = apply_plan(u, pin_plan)
    u1 = upins[..., 0]
    u2 = upins[..., 1]
    beta = (da - (u2 - u1)) / a
    alpha = db - u1
    beta_ = beta[..., None, None] if np.ndim(beta) else beta
    alpha_ = alpha[..., None, None] if np.ndim(alpha) else alpha
    u += alpha_ + beta_ * Z
    du += beta_

    res = _fd_dbar_residual(tspec, u, g) if record_residual else None
    return u, du, res


def solve_u(g, theta: ParamVector, da: complex, db: complex,
            tspec: GridSpec | None = None) -> VectorField:
    """Public single-field solve; accepts a ComplexGrid or a raw array."""
    if isinstance(g, ComplexGrid):
        tspec = g.spec
        g = g.values
    if tspec is None:
        raise ValueError("a target GridSpec is required for raw arrays")
    u, du, res = solve_field_batch(tspec, np.asarray(g, dtype=np.complex128),
                                   theta.a, theta.b, da, db)
    return VectorField(spec=tspec, u=u, du=du, a=theta.a, b=theta.b,
                       da=complex(da), db=complex(db),
                       dbar_residual=float(res))


def divergence_at(vf: VectorField, pts) -> np.ndarray:
    """div u = 2 Re(d u) at image-plane points zeta (raises outside the
    grid margin)."""
    pts = np.asarray(pts, dtype=np.complex128) - vf.b
    return 2.0 * np.real(field_eval(vf.spec, vf.du, pts))


def field_at(vf: VectorField, pts) -> np.ndarray:
    """u evaluated at image-plane points zeta."""
    pts = np.asarray(pts, dtype=np.complex128) - vf.b
    return field_eval(vf.spec, vf.u, pts)


def dump_vector_field(vf: VectorField, path_u, path_residual=None) -> None:
    """Debug dump of u (and optionally dbar(u) residual field) as QGRID."""
    write_qgrid(path_u, vf.spec, vf.u)
    if path_residual is not None:
        _, dbar, _ = fd_wirtinger_interior(vf.spec, vf.u)
        write_qgrid(path_residual, vf.spec, dbar)


def eval_affine_u(a: complex, b: complex, da: complex, db: complex, zeta):
    """The closed-form affine part db + (da/a)(zeta - b)."""
    return db + (da / a) * (np.asarray(zeta) - b)
