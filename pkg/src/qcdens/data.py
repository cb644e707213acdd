"""Synthetic examples: samplers, true densities, KDE baseline, metrics.

Three sampling distributions are provided (halfg, stroke, waffle), each a
push-forward of Gaussian draws through an explicit map, together with
their exact densities:

* halfg: closed form (a sheared half-normal with a curved sharp edge),
* stroke: globally invertible triangular map, single-branch change of
  variables,
* waffle: non-injective map; the density is a sum over all preimage
  branches found by bracketed root solving of two scalar equations.

Sampling uses the counter-based Philox generator with Box-Muller normal
variates (no ziggurat), so draws are reproducible bit-for-bit across
platforms given (example, n, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import BranchSearchIncomplete, NegativeDensity
from .grid import GridSpec, quad

__all__ = [
    "Dataset",
    "DensityGrid",
    "sample",
    "sample_halfg",
    "sample_stroke",
    "sample_waffle",
    "true_density",
    "density_grid",
    "kde",
    "kde_oracle_ise",
    "metrics",
    "Metrics",
    "EXAMPLES",
    "WINDOWS",
    "save_dataset",
    "load_dataset",
]

EXAMPLES = ("halfg", "stroke", "waffle")

# Metric/plot evaluation half-widths; these capture all but O(1e-4) of the
# true mass for each example.
WINDOWS = {"halfg": 2.5, "stroke": 2.0, "waffle": 2.5}

BRANCH_RANGE = 6.0  # preimage search range for the waffle equations


@dataclass
class Dataset:
    """Sampled points (n, 2) with provenance."""

    points: np.ndarray
    example: str
    seed: int

    @property
    def z(self) -> np.ndarray:
        """Points as complex numbers x + iy."""
        return self.points[:, 0] + 1j * self.points[:, 1]


@dataclass
class DensityGrid:
    """Nonnegative density samples on an evaluation window."""

    spec: GridSpec
    values: np.ndarray

    def mass(self) -> float:
        return quad(self.spec, self.values)


# ---------------------------------------------------------------------------
# reproducible normals


def _normals(gen: np.random.Generator, size: int) -> np.ndarray:
    """Standard normals via Box-Muller from Philox uniforms.

    z1 = sqrt(-2 log(1-u1)) cos(2 pi u2), z2 = ... sin(2 pi u2); 1-u1 lies
    in (0, 1] so the log is safe.
    """
    m = (size + 1) // 2
    u1 = 1.0 - gen.random(m)
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:size]


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _edge_shift(u):
    """h(u) = sin(5u)/15 - u tanh(u)/3, the halfg edge curve."""
    return np.sin(5.0 * u) / 15.0 - u * np.tanh(u) / 3.0


def sample_halfg(n: int, seed: int) -> Dataset:
    """Half-plane-rejected N(0, (1/2)^2 I) sheared along a curved edge.

    Every sampled point satisfies x1 - h(x2) <= 0.
    """
    gen = _generator(seed)
    xs = []
    got = 0
    while got < n:
        block = _normals(gen, 4 * max(n - got, 16)) * 0.5
        z1 = block[0::2]
        z2 = block[1::2]
        keep = z1 <= 0.0
        pts = np.stack([z1[keep], z2[keep]], axis=1)
        xs.append(pts)
        got += pts.shape[0]
    raw = np.concatenate(xs, axis=0)[:n]
    out = np.empty_like(raw)
    out[:, 0] = raw[:, 0] + _edge_shift(raw[:, 1])
    out[:, 1] = raw[:, 1]
    return Dataset(points=out, example="halfg", seed=seed)


def sample_stroke(n: int, seed: int) -> Dataset:
    """Standard normal pair through (x1/2, (3+2tanh x1) x2/20 - 4/5 sin x1)."""
    gen = _generator(seed)
    block = _normals(gen, 2 * n)
    x1 = block[0::2]
    x2 = block[1::2]
    out = np.stack([
        x1 / 2.0,
        (3.0 + 2.0 * np.tanh(x1)) * x2 / 20.0 - 0.8 * np.sin(x1),
    ], axis=1)
    return Dataset(points=out, example="stroke", seed=seed)


WAFFLE_S = 0.5


def _waffle_map(x1, x2):
    c = 2.0 * np.pi * WAFFLE_S
    y1 = (2.0 / 3.0) * (x1 + np.sin(2.0 * np.pi * x1) / c)
    y2 = (2.0 / 3.0) * (x2 + np.cos(2.0 * np.pi * x2) / c + (x1 / 3.0) ** 2)
    return y1, y2


def sample_waffle(n: int, seed: int) -> Dataset:
    gen = _generator(seed)
    block = _normals(gen, 2 * n)
    y1, y2 = _waffle_map(block[0::2], block[1::2])
    return Dataset(points=np.stack([y1, y2], axis=1), example="waffle", seed=seed)


def sample(example: str, n: int, seed: int) -> Dataset:
    fns = {"halfg": sample_halfg, "stroke": sample_stroke, "waffle": sample_waffle}
    if example not in fns:
        raise ValueError(f"unknown example {example!r}")
    return fns[example](n, seed)


# ---------------------------------------------------------------------------
# true densities


def _halfg_density(pts: np.ndarray) -> np.ndarray:
    # Sheared half-normal with per-axis sd 1/2 (the sampler's law): the
    # shear has unit Jacobian, the rejection doubles the half-plane mass.
    u = pts[:, 0] - _edge_shift(pts[:, 1])
    v = pts[:, 1]
    dens = (4.0 / np.pi) * np.exp(-2.0 * (u * u + v * v))
    return np.where(u <= 0.0, dens, 0.0)


def _stroke_density(pts: np.ndarray) -> np.ndarray:
    x1 = 2.0 * pts[:, 0]
    th = 3.0 + 2.0 * np.tanh(x1)
    x2 = (pts[:, 1] + 0.8 * np.sin(x1)) * 20.0 / th
    detJ = 0.5 * th / 20.0
    phi2 = np.exp(-0.5 * (x1 * x1 + x2 * x2)) / (2.0 * np.pi)
    return phi2 / detJ


# The two scalar waffle equations x + sin(2 pi x)/pi = c and
# x + cos(2 pi x)/pi = c are solved per monotone segment; segment
# boundaries are the known critical points of each function.
_SIN_FORM = {
    "f": lambda x: x + np.sin(2.0 * np.pi * x) / np.pi,
    "fp": lambda x: 1.0 + 2.0 * np.cos(2.0 * np.pi * x),
    "phases": (1.0 / 3.0, 2.0 / 3.0),
}
_COS_FORM = {
    "f": lambda x: x + np.cos(2.0 * np.pi * x) / np.pi,
    "fp": lambda x: 1.0 - 2.0 * np.sin(2.0 * np.pi * x),
    "phases": (1.0 / 12.0, 5.0 / 12.0),
}


def _branch_roots(c: np.ndarray, form) -> tuple[np.ndarray, np.ndarray]:
    """All preimages of each c under the form's map, as (roots, valid).

    Roots lie within 1/pi of c, so six candidate monotone segments around
    floor(c) suffice.  Raises BranchSearchIncomplete when the search
    window would extend past +-BRANCH_RANGE.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.size and np.max(np.abs(c)) > BRANCH_RANGE - 1.0 / np.pi - 1e-9:
        raise BranchSearchIncomplete(
            f"preimage bracket for |c| = {np.max(np.abs(c)):.4g} reaches the "
            f"+-{BRANCH_RANGE:g} search boundary"
        )
    f, fp = form["f"], form["fp"]
    p0, p1 = form["phases"]
    base = np.floor(c)
    m = c.shape[0]
    roots = np.zeros((m, 6))
    valid = np.zeros((m, 6), dtype=bool)
    for j, (dk, lo_p, hi_p) in enumerate([
        (-1.0, p0, p1), (-1.0, p1, 1.0 + p0),
        (0.0, p0, p1), (0.0, p1, 1.0 + p0),
        (1.0, p0, p1), (1.0, p1, 1.0 + p0),
    ]):
        lo = base + dk + lo_p
        hi = base + dk + hi_p
        flo = f(lo) - c
        fhi = f(hi) - c
        brk = flo * fhi <= 0.0
        if not brk.any():
            continue
        li = lo[brk].copy()
        hi_ = hi[brk].copy()
        fl = flo[brk].copy()
        cc = c[brk]
        for _ in range(18):  # bisect the bracket below Newton's basin
            mid = 0.5 * (li + hi_)
            fm = f(mid) - cc
            left = (fl * fm) <= 0.0
            hi_ = np.where(left, mid, hi_)
            li = np.where(left, li, mid)
            fl = np.where(left, fl, fm)
        x = 0.5 * (li + hi_)
        for _ in range(4):
            d = fp(x)
            d = np.where(np.abs(d) < 1e-14, 1e-14, d)
            x = np.clip(x - (f(x) - cc) / d, li, hi_)
        roots[brk, j] = x
        valid[:, j] = brk
    # A root exactly at a segment endpoint can be bracketed twice; drop
    # duplicates so the branch sum does not double count.
    order = np.argsort(roots + np.where(valid, 0.0, 1e9), axis=1)
    rs = np.take_along_axis(roots, order, axis=1)
    vs = np.take_along_axis(valid, order, axis=1)
    dup = np.zeros_like(vs)
    dup[:, 1:] = vs[:, 1:] & vs[:, :-1] & (np.abs(rs[:, 1:] - rs[:, :-1]) < 1e-9)
    vs &= ~dup
    return rs, vs


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pushforward_1d(c: np.ndarray, form, chunk: int = 1 << 20) -> np.ndarray:
    """Density of f(X), X standard normal, at the values c (branch sum)."""
    c = np.asarray(c, dtype=np.float64)
    out = np.zeros(c.shape[0])
    fp = form["fp"]
    for s in range(0, c.shape[0], chunk):
        cs = c[s:s + chunk]
        roots, valid = _branch_roots(cs, form)
        pi_, ri = np.nonzero(valid)
        x = roots[pi_, ri]
        w = _INV_SQRT_2PI * np.exp(-0.5 * x * x) / np.abs(fp(x))
        out[s:s + chunk] = np.bincount(pi_, weights=w, minlength=cs.shape[0])
    return out


def _waffle_density(pts: np.ndarray) -> np.ndarray:
    """Branch-sum waffle density at arbitrary points.

    p(y) = (3/2)^2 sum_{x1} phi(x1)/|u'(x1)| * q_v(1.5 y2 - x1^2/9)
    where u, v are the two scalar maps and q_v is the 1-D pushforward
    density of v under a standard normal.
    """
    y1 = pts[:, 0]
    y2 = pts[:, 1]
    roots1, valid1 = _branch_roots(1.5 * y1, _SIN_FORM)
    pi_, ri = np.nonzero(valid1)
    x1 = roots1[pi_, ri]
    w1 = _INV_SQRT_2PI * np.exp(-0.5 * x1 * x1) / np.abs(_SIN_FORM["fp"](x1))
    q = _pushforward_1d(1.5 * y2[pi_] - x1 * x1 / 9.0, _COS_FORM)
    return 2.25 * np.bincount(pi_, weights=w1 * q, minlength=pts.shape[0])


def true_density(example: str, pts) -> np.ndarray:
    """Exact sampling density at the given (m, 2) points."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if example == "halfg":
        return _halfg_density(pts)
    if example == "stroke":
        return _stroke_density(pts)
    if example == "waffle":
        return _waffle_density(pts)
    raise ValueError(f"unknown example {example!r}")


def _waffle_density_grid(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Waffle density on a product grid, shaped (len(ys), len(xs)).

    Exploits the product structure: the x1 branches depend only on the
    column value, so each branch contributes a full row-vector of the 1-D
    pushforward density.
    """
    roots1, valid1 = _branch_roots(1.5 * xs, _SIN_FORM)
    ci, ri = np.nonzero(valid1)
    x1 = roots1[ci, ri]
    w1 = _INV_SQRT_2PI * np.exp(-0.5 * x1 * x1) / np.abs(_SIN_FORM["fp"](x1))
    c2 = 1.5 * ys[None, :] - (x1 * x1 / 9.0)[:, None]
    q = _pushforward_1d(c2.ravel(), _COS_FORM).reshape(c2.shape)
    out = np.zeros((ys.shape[0], xs.shape[0]))
    np.add.at(out.T, ci, 2.25 * w1[:, None] * q)
    return out


def density_grid(example: str, spec: GridSpec, supersample: int = 1) -> DensityGrid:
    """True density sampled on a window grid.

    With ``supersample = s > 1`` each node carries the average of an s x s
    subcell stencil; this keeps the midpoint quadrature honest across the
    halfg edge jump and the waffle fold ridges.
    """
    ax = spec.axis()
    if supersample <= 1:
        if example == "waffle":
            vals = _waffle_density_grid(ax, ax)
        else:
            X, Y = np.meshgrid(ax, ax, indexing="xy")
            vals = true_density(example, np.stack([X.ravel(), Y.ravel()], axis=1))
            vals = vals.reshape(spec.n, spec.n)
        return DensityGrid(spec=spec, values=vals)
    s = int(supersample)
    offs = (np.arange(s) + 0.5) / s * spec.h - spec.h / 2.0
    fine = (ax[:, None] + offs[None, :]).ravel()
    if example == "waffle":
        vv = _waffle_density_grid(fine, fine)
    else:
        X, Y = np.meshgrid(fine, fine, indexing="xy")
        vv = true_density(example, np.stack([X.ravel(), Y.ravel()], axis=1))
        vv = vv.reshape(fine.size, fine.size)
    vals = vv.reshape(spec.n, s, spec.n, s).mean(axis=(1, 3))
    return DensityGrid(spec=spec, values=vals)


# ---------------------------------------------------------------------------
# kernel density estimation


def kde(data: np.ndarray, bandwidth: float, spec: GridSpec) -> DensityGrid:
    """Isotropic Gaussian product-kernel estimate on the window grid."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    data = np.asarray(data, dtype=np.float64)
    ax = spec.axis()
    c = 1.0 / (np.sqrt(2.0 * np.pi) * bandwidth)
    Ax = c * np.exp(-0.5 * ((ax[None, :] - data[:, 0, None]) / bandwidth) ** 2)
    Ay = c * np.exp(-0.5 * ((ax[None, :] - data[:, 1, None]) / bandwidth) ** 2)
    vals = (Ay.T @ Ax) / data.shape[0]
    return DensityGrid(spec=spec, values=vals)


def kde_oracle_ise(data: np.ndarray, truth: DensityGrid,
                   n_bandwidths: int = 25) -> tuple[float, float, DensityGrid]:
    """Oracle bandwidth: minimize ISE against the known truth over a log
    grid of bandwidths in [0.005, 1.0].  A benchmarking device."""
    spec = truth.spec
    best = None
    for bw in np.geomspace(0.005, 1.0, n_bandwidths):
        est = kde(data, bw, spec)
        ise = quad(spec, (est.values - truth.values) ** 2)
        if best is None or ise < best[1]:
            best = (float(bw), float(ise), est)
    return best


# ---------------------------------------------------------------------------
# error metrics


@dataclass
class Metrics:
    ise: float
    hellinger_sq: float
    hellinger: float
    l1: float


def metrics(p: DensityGrid, q: DensityGrid) -> Metrics:
    """ISE, squared Hellinger (and its root), and L1 distance.

    Hellinger is reported both squared (H^2 = 0.5 integral (sqrt p - sqrt q)^2)
    and as H = sqrt(H^2); comparisons in the benchmark use H^2.
    """
    if p.spec != q.spec:
        raise ValueError("metrics need a common evaluation window")
    for g in (p, q):
        if np.min(g.values) < -1e-12:
            raise NegativeDensity(f"density grid has min {np.min(g.values):.3e}")
    pv = np.clip(p.values, 0.0, None)
    qv = np.clip(q.values, 0.0, None)
    diff = pv - qv
    ise = quad(p.spec, diff * diff)
    h2 = 0.5 * quad(p.spec, (np.sqrt(pv) - np.sqrt(qv)) ** 2)
    l1 = quad(p.spec, np.abs(diff))
    return Metrics(ise=ise, hellinger_sq=h2, hellinger=float(np.sqrt(max(h2, 0.0))), l1=l1)


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(path, ds: Dataset) -> None:
    """CSV with header x,y and full float precision."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in ds.points:
            w.writerow([repr(float(x)), repr(float(y))])


def load_dataset(path, example: str = "", seed: int = -1) -> Dataset:
    with open(path, "r", newline="", encoding="ascii") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["x", "y"]:
            raise ValueError(f"bad dataset header {header!r}")
        pts = np.array([[float(a), float(b)] for a, b in r])
    return Dataset(points=pts, example=example, seed=seed)
