"""Quasi-Newton minimization of -loglike + lambda * penalty.

The optimizer is a BFGS adaptation with a hard step-length cap: proposals
longer than the cap are shrunk trust-region style by inflating the
Hessian diagonal until the model-optimal step fits the ball.  Steps that
fail to decrease the objective are retracted and the target length is
halved; after ``max_halvings`` failures the deformation is rebuilt from
scratch and the attempt repeats once.  A second failure terminates the
run.  The deformation is also rebuilt after every ``rebuild_every``
accepted steps to shed accumulated first-order update error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import deformation
from .data import DensityGrid, Metrics, metrics
from .deformation import DeformationState, evaluate, rebuild, step
from .dilatation import BasisSpec, ParamVector
from .errors import OrientationLoss, RebuildDiverged, TargetGridOverflow
from .grid import GridSpec
from .likelihood import TargetDensity, grad_loglike, loglike, penalty, penalty_grad

__all__ = [
    "OptimizerConfig",
    "TraceRow",
    "FitResult",
    "LambdaRecord",
    "default_lambda_grid",
    "bfgs_minimize",
    "bfgs_fit",
    "lambda_sweep",
    "fitted_density",
    "moment_match_affine",
]


def default_lambda_grid() -> np.ndarray:
    """10^1.5, 10^1.25, ..., 10^-3 (descending)."""
    return 10.0 ** np.arange(1.5, -3.001, -0.25)


@dataclass
class OptimizerConfig:
    max_step_len: float = 0.02
    hessian_init_diag: float = 1000.0
    max_halvings: int = 10
    rebuild_every: int = 10
    max_iters: int = 500
    lambda_grid: np.ndarray = field(default_factory=default_lambda_grid)
    rebuild_steps: int = deformation.DEFAULT_REBUILD_STEPS
    beltrami_tol: float = deformation.DEFAULT_BELTRAMI_TOL
    grad_tol: float = 1e-6

    def __post_init__(self):
        self.lambda_grid = np.asarray(self.lambda_grid, dtype=np.float64)
        if np.any(np.diff(self.lambda_grid) >= 0):
            raise ValueError("lambda grid must be strictly descending")
        for name in ("max_step_len", "hessian_init_diag", "max_halvings",
                     "rebuild_every", "max_iters", "rebuild_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TraceRow:
    iter: int
    objective: float
    grad_norm: float
    step_len: float
    halvings: int
    rebuilt: bool


@dataclass
class LambdaRecord:
    lam: float
    theta: ParamVector
    objective: float
    n_iters: int
    termination: str
    trace: list
    residual: float | None = None
    metrics: Metrics | None = None


@dataclass
class FitResult:
    records: list
    selected: int

    @property
    def best(self) -> LambdaRecord:
        return self.records[self.selected]


# ---------------------------------------------------------------------------
# step proposal


def _propose_step(H: np.ndarray, grad: np.ndarray, cap: float) -> np.ndarray:
    """Quasi-Newton step, shrunk into the cap ball by diagonal inflation.

    Bisects the inflation parameter until the step length lies within one
    percent of the cap (or below it).
    """
    p = np.linalg.solve(H, -grad)
    norm = np.linalg.norm(p)
    if norm <= cap:
        return p
    lo = 0.0
    hi = 1.0
    while True:
        p_hi = np.linalg.solve(H + hi * np.eye(H.shape[0]), -grad)
        if np.linalg.norm(p_hi) <= cap:
            break
        lo = hi
        hi *= 4.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        p_mid = np.linalg.solve(H + mid * np.eye(H.shape[0]), -grad)
        nm = np.linalg.norm(p_mid)
        if nm > cap:
            lo = mid
        else:
            hi = mid
            if nm >= (1.0 - 0.01) * cap:
                break
    return np.linalg.solve(H + hi * np.eye(H.shape[0]), -grad)


def _bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> bool:
    """In-place BFGS update of the Hessian estimate; skipped (returning
    False) when the curvature condition fails."""
    sy = float(s @ y)
    if sy <= 1e-12:
        return False
    Hs = H @ s
    H -= np.outer(Hs, Hs) / float(s @ Hs)
    H += np.outer(y, y) / sy
    return True


# ---------------------------------------------------------------------------
# generic minimizer (unit-testable against pure functions)


def bfgs_minimize(fun, grad, x0: np.ndarray, H0: np.ndarray, cfg: OptimizerConfig):
    """The same protocol on a plain function: used for unit testing the
    stepping logic against closed-form minima."""
    x = np.asarray(x0, dtype=np.float64).copy()
    H = np.asarray(H0, dtype=np.float64).copy()
    f = fun(x)
    g = grad(x)
    trace = []
    termination = "max_iters"
    for it in range(cfg.max_iters):
        if np.linalg.norm(g) < cfg.grad_tol * (1.0 + abs(f)):
            termination = "gradient"
            break
        length = cfg.max_step_len
        accepted = False
        halvings = 0
        for halvings in range(cfg.max_halvings + 1):
            p = _propose_step(H, g, length)
            fx = fun(x + p)
            if fx < f:
                accepted = True
                break
            length *= 0.5
        if not accepted:
            termination = "double_failure"
            break
        gx = grad(x + p)
        _bfgs_update(H, p, gx - g)
        x = x + p
        f = fx
        g = gx
        trace.append(TraceRow(it, f, float(np.linalg.norm(g)),
                              float(np.linalg.norm(p)), halvings, False))
    return x, f, H, trace, termination


# ---------------------------------------------------------------------------
# the deformation fit


class _Problem:
    """Objective/gradient plumbing for one penalty level."""

    def __init__(self, X, target, basis, spec, lam, cfg):
        self.X = X
        self.target = target
        self.basis = basis
        self.spec = spec
        self.lam = lam
        self.cfg = cfg

    def objective(self, state: DeformationState) -> float:
        return -loglike(state, self.X, self.target) + self.lam * penalty(state.theta, self.basis)

    def gradient(self, state: DeformationState) -> np.ndarray:
        return -grad_loglike(state, self.X, self.target) + self.lam * penalty_grad(state.theta, self.basis)

    def rebuild(self, theta: ParamVector) -> DeformationState:
        return rebuild(theta, self.basis, self.spec, M=self.cfg.rebuild_steps,
                       beltrami_tol=self.cfg.beltrami_tol)


def bfgs_fit(X, target: TargetDensity, basis: BasisSpec, spec: GridSpec,
             lam: float, theta_init: ParamVector, H_init: np.ndarray,
             cfg: OptimizerConfig):
    """Minimize -loglike + lam * penalty from theta_init.

    Returns (theta_hat, H, trace, state, termination).  A failed rebuild
    is recorded as the termination reason rather than raised.
    """
    prob = _Problem(np.asarray(X, dtype=np.complex128), target, basis, spec, lam, cfg)
    try:
        state = prob.rebuild(theta_init)
    except RebuildDiverged:
        return theta_init, H_init.copy(), [], None, "rebuild_diverged"
    H = np.asarray(H_init, dtype=np.float64).copy()
    obj = prob.objective(state)
    grad = prob.gradient(state)
    trace: list[TraceRow] = []
    accepted = 0
    exhausted_once = False
    termination = "max_iters"

    for it in range(cfg.max_iters):
        if np.linalg.norm(grad) < cfg.grad_tol * (1.0 + abs(obj)):
            termination = "gradient"
            break
        length = cfg.max_step_len
        new_state = None
        halvings = 0
        for halvings in range(cfg.max_halvings + 1):
            p = _propose_step(H, grad, length)
            try:
                cand = step(state, p, 1.0)
                cand_obj = prob.objective(cand)
            except (OrientationLoss, TargetGridOverflow):
                cand = None
                cand_obj = np.inf
            if cand is not None and cand_obj < obj:
                new_state = cand
                break
            length *= 0.5

        if new_state is None:
            if exhausted_once:
                termination = "double_failure"
                break
            # Store the current estimate, recompute from scratch, retry.
            try:
                state = prob.rebuild(state.theta)
            except RebuildDiverged:
                termination = "rebuild_diverged"
                break
            obj = prob.objective(state)
            grad = prob.gradient(state)
            exhausted_once = True
            continue

        accepted += 1
        exhausted_once = False
        rebuilt = False
        state = new_state
        obj = cand_obj
        if accepted % cfg.rebuild_every == 0:
            try:
                state = prob.rebuild(state.theta)
            except RebuildDiverged:
                termination = "rebuild_diverged"
                trace.append(TraceRow(it, obj, float(np.linalg.norm(grad)),
                                      float(np.linalg.norm(p)), halvings, True))
                break
            obj = prob.objective(state)
            rebuilt = True
        new_grad = prob.gradient(state)
        _bfgs_update(H, p, new_grad - grad)
        grad = new_grad
        trace.append(TraceRow(it, obj, float(np.linalg.norm(grad)),
                              float(np.linalg.norm(p)), halvings, rebuilt))
    return state.theta if state is not None else theta_init, H, trace, state, termination


def moment_match_affine(X, target: TargetDensity, basis: BasisSpec) -> ParamVector:
    """Affine pre-fit: match the empirical mean and scalar covariance scale
    of the data to the target's."""
    X = np.asarray(X, dtype=np.complex128)
    mean = X.mean()
    spread = float(np.sqrt(0.5 * np.mean(np.abs(X - mean) ** 2)))
    a = target.scale / max(spread, 1e-12)
    b = target.mean - a * mean
    return ParamVector.zeros(basis, a=a, b=b)


def lambda_sweep(X, target: TargetDensity, basis: BasisSpec, spec: GridSpec,
                 cfg: OptimizerConfig, truth: DensityGrid | None = None,
                 theta_init: ParamVector | None = None) -> FitResult:
    """Fit every penalty level from largest to smallest with warm starts.

    Both theta and the Hessian estimate carry over between levels.  When a
    truth grid is supplied, each fit is scored (ISE, Hellinger, L1) and
    the level minimizing ISE is selected (oracle selection).
    """
    X = np.asarray(X, dtype=np.complex128)
    theta = theta_init if theta_init is not None else moment_match_affine(X, target, basis)
    H = cfg.hessian_init_diag * np.eye(basis.dim)
    records = []
    for lam in cfg.lambda_grid:
        theta, H, trace, state, term = bfgs_fit(X, target, basis, spec, float(lam),
                                                theta, H, cfg)
        rec = LambdaRecord(lam=float(lam), theta=theta,
                           objective=trace[-1].objective if trace else np.nan,
                           n_iters=len(trace), termination=term, trace=trace)
        if state is not None and truth is not None:
            final = rebuild(theta, basis, spec, M=cfg.rebuild_steps,
                            beltrami_tol=cfg.beltrami_tol)
            rec.residual = final.residual
            est = fitted_density(final, target, truth.spec)
            rec.metrics = metrics(est, truth)
        records.append(rec)
    scored = [i for i, r in enumerate(records) if r.metrics is not None]
    if scored:
        selected = min(scored, key=lambda i: records[i].metrics.ise)
    else:
        selected = int(np.argmin([r.objective for r in records]))
    return FitResult(records=records, selected=selected)


def fitted_density(state: DeformationState, target: TargetDensity,
                   window: GridSpec) -> DensityGrid:
    """The estimated density |J| exp(H o f) on the evaluation window."""
    Z = window.mesh()
    Y, logJ = evaluate(state, Z.ravel())
    vals = np.exp(logJ + target.logpdf(Y)).reshape(window.n, window.n)
    return DensityGrid(spec=window, values=vals)
