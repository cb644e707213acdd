"""Dilatation fields: truncated Fourier basis, phi -> mu, and perturbations.

A dilatation is parameterized by ``phi = sum_k (a_k + i b_k) E_k T`` where
``E_k = exp(i 2 pi (k1 x + k2 y) / 2L)`` runs over frequencies
``(k1, k2) in [-N, N]^2``, ``T`` is a radial bump supported on the disk of
radius L, and the bounded field ``mu = phi / (1 + |phi|)`` is the complex
dilatation proper (``|mu| < 1`` everywhere by construction).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .grid import GridSpec, _axis

__all__ = [
    "BasisSpec",
    "ParamVector",
    "DilatationField",
    "bump",
    "eval_phi",
    "basis_element",
    "phi_to_mu",
    "perturb_nu",
    "nu_factors",
    "save_theta",
    "load_theta",
]

# Below this threshold phi is treated as exactly zero when forming the
# conj(dphi) term of the perturbation (the term is dropped there).
PHI_ZERO_TOL = 1e-14


@dataclass(frozen=True)
class BasisSpec:
    """Truncated Fourier dilatation basis of order N with support radius L."""

    N: int
    L: float

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("basis order must be >= 0")
        if not self.L > 0:
            raise ValueError("basis support radius must be positive")

    @property
    def n_freq(self) -> int:
        return (2 * self.N + 1) ** 2

    @property
    def n_coeffs(self) -> int:
        # one real and one imaginary coefficient per frequency
        return 2 * self.n_freq

    @property
    def dim(self) -> int:
        """Total parameter count including the four affine entries."""
        return 4 + self.n_coeffs

    def frequencies(self) -> np.ndarray:
        """Frequency pairs (k1, k2), lexicographic, shape (n_freq, 2)."""
        return _frequencies(self)

    def penalty_weights(self) -> np.ndarray:
        """Per-coefficient weights (k1^2 + k2^2)^2, aligned with coeffs."""
        return _penalty_weights(self)


@lru_cache(maxsize=64)
def _frequencies(basis: BasisSpec) -> np.ndarray:
    r = np.arange(-basis.N, basis.N + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    out = np.stack([k1.ravel(), k2.ravel()], axis=1)
    out.flags.writeable = False
    return out

@lru_cache(maxsize=64)
def _penalty_weights(basis: BasisSpec) -> np.ndarray:
    f = _frequencies(basis).astype(np.float64)
    w = (f[:, 0] ** 2 + f[:, 1] ** 2) ** 2
    out = np.repeat(w, 2)
    out.flags.writeable = False
    return out


@dataclass
class ParamVector:
    """Affine part (a, b) plus real basis coefficients.

    ``coeffs`` has length ``2 (2N+1)^2`` and is ordered lexicographically in
    (k1, k2) with the real-part coefficient before the imaginary-part one.
    Membership requires ``a != 0``.
    """

    a: complex
    b: complex
    coeffs: np.ndarray

    def __post_init__(self):
        self.a = complex(self.a)
        self.b = complex(self.b)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.a == 0:
            raise ValueError("affine scale a must be nonzero")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")

    @property
    def complex_coeffs(self) -> np.ndarray:
        """One complex coefficient a_k + i b_k per frequency."""
        return self.coeffs[0::2] + 1j * self.coeffs[1::2]

    def to_array(self) -> np.ndarray:
        """Flatten to (a1, a2, b1, b2, coeffs...)."""
        head = [self.a.real, self.a.imag, self.b.real, self.b.imag]
        return np.concatenate([head, self.coeffs])

    @classmethod
    def from_array(cls, vec: np.ndarray) -> "ParamVector":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(a=vec[0] + 1j * vec[1], b=vec[2] + 1j * vec[3], coeffs=vec[4:].copy())

    @classmethod
    def zeros(cls, basis: BasisSpec, a: complex = 1.0, b: complex = 0.0) -> "ParamVector":
        return cls(a=a, b=b, coeffs=np.zeros(basis.n_coeffs))

    def with_coeffs(self, coeffs: np.ndarray) -> "ParamVector":
        return replace(self, coeffs=np.asarray(coeffs, dtype=np.float64))


@dataclass
class DilatationField:
    """phi and mu = phi/(1+|phi|) sampled on a grid."""

    phi: np.ndarray
    mu: np.ndarray


def bump(x, y, L: float):
    """Radial taper ``T = 1 - ((x^2+y^2)/L^2)^4`` inside the disk, 0 outside."""
    s = (np.asarray(x) ** 2 + np.asarray(y) ** 2) / (L * L)
    return np.where(s < 1.0, 1.0 - s ** 4, 0.0)


@lru_cache(maxsize=64)
def _bump_grid(basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    ax = _axis(spec)
    X, Y = np.meshgrid(ax, ax, indexing="xy")
    T = bump(X, Y, basis.L)
    T.flags.writeable = False
    return T


@lru_cache(maxsize=64)
def _phase_table(basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    """exp(i pi k x / L) for k = -N..N on the grid axis, shape (2N+1, n)."""
    ax = _axis(spec)
    ks = np.arange(-basis.N, basis.N + 1)
    tab = np.exp(1j * np.pi * np.outer(ks, ax) / basis.L)
    tab.flags.writeable = False
    return tab


def eval_phi_coeffs(coeffs: np.ndarray, basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    """Evaluate ``sum_k (a_k + i b_k) E_k T`` for a raw coefficient array."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (basis.n_coeffs,):
        raise ValueError(
            f"coefficient vector has length {coeffs.shape}, basis needs {basis.n_coeffs}"
        )
    m = 2 * basis.N + 1
    C = (coeffs[0::2] + 1j * coeffs[1::2]).reshape(m, m)  # C[i1, i2]
    tab = _phase_table(basis, spec)
    # val[iy, ix] = sum_{i1,i2} C[i1,i2] tab[i1,ix] tab[i2,iy]
    tmp = C.T @ tab          # (i2, ix)
    val = tab.T @ tmp        # (iy, ix)
    return _bump_grid(basis, spec) * val


def eval_phi(theta: ParamVector, basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    """phi on the grid; identically zero outside the radius-L disk."""
    return eval_phi_coeffs(theta.coeffs, basis, spec)


def basis_element(j: int, basis: BasisSpec, spec: GridSpec) -> np.ndarray:
    """The j-th basis field (even j: E_k T, odd j: i E_k T)."""
    if not 0 <= j < basis.n_coeffs:
        raise ValueError(f"basis index {j} out of range")
    k1, k2 = basis.frequencies()[j // 2]
    tab = _phase_table(basis, spec)
    E = np.outer(tab[k2 + basis.N], tab[k1 + basis.N])  # [iy, ix]
    elem = _bump_grid(basis, spec) * E
    return 1j * elem if j % 2 else elem


def phi_to_mu(phi: np.ndarray) -> np.ndarray:
    """mu = phi / (1 + |phi|); strictly inside the unit disk pointwise."""
    return phi / (1.0 + np.abs(phi))


def nu_factors(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shared multipliers (S1, S2) with nu = dphi*S1 - conj(dphi)*S2.

    S2 is set to zero where phi vanishes, matching the convention that the
    second perturbation term is dropped on the zero set of phi.
    """
    ap = np.abs(phi)
    denom = 2.0 * (1.0 + ap) ** 2
    S1 = (2.0 + ap) / denom
    safe = np.where(ap < PHI_ZERO_TOL, 1.0, ap)
    S2 = np.where(ap < PHI_ZERO_TOL, 0.0, phi * phi / (safe * denom))
    return S1, S2


def perturb_nu(phi: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """First-order change of mu under phi -> phi + eps*dphi.

    nu = dphi (2+|phi|) / (2(1+|phi|)^2) - conj(dphi) phi^2 / (2|phi|(1+|phi|)^2)
    with the second term zero wherever phi = 0.  Satisfies
    ``|nu| <= |dphi| / (1+|phi|)`` pointwise.
    """
    S1, S2 = nu_factors(np.asarray(phi))
    dphi = np.asarray(dphi)
    return dphi * S1 - np.conj(dphi) * S2


# ---------------------------------------------------------------------------
# QTHETA serialization (used for warm starts across penalty levels)


def save_theta(path, theta: ParamVector, basis: BasisSpec) -> None:
    """Write theta as ASCII: header ``QTHETA N L`` then one float per line
    (a1, a2, b1, b2, coeffs...), using shortest round-trip printing."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"QTHETA {basis.N} {basis.L!r}\n")
        for v in theta.to_array():
            fh.write(f"{float(v)!r}\n")


def load_theta(path) -> tuple[ParamVector, BasisSpec]:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "QTHETA":
            raise ValueError(f"not a QTHETA file: {path}")
        basis = BasisSpec(N=int(header[1]), L=float(header[2]))
        vals = np.array([float(line) for line in fh if line.strip()])
    if vals.size != basis.dim:
        raise ValueError(f"QTHETA payload has {vals.size} values, expected {basis.dim}")
    return ParamVector.from_array(vals), basis
