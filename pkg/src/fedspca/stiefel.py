"""Stiefel and generalized Stiefel geometry plus a Wolfe line search.

A point carries the standard metric (w^T w = I) when ``G`` is None and the
generalized metric (w^T G w = I) otherwise. ``G`` is always a symmetric
projector here, so it is never inverted or square-rooted on the hot path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import DeflationDegeneracyError, DimensionError, NumericalError, SingularityError

CHOL_JITTER = 1e-10
_EPS = np.finfo(np.float64).eps


def sym(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"sym needs a square matrix, got shape {A.shape}")
    return 0.5 * (A + A.T)


def _qr_positive(X):
    Q, R = np.linalg.qr(X, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


_GS_MAX_COLS = 8


def _gram_schmidt(Y, rel_tol):
    """Twice-iterated classical Gram-Schmidt; returns None on a (near) dependent column.

    For small r this is cheaper than LAPACK QR and yields the same Q factor
    (the one with positive diag(R)).
    """
    Q = np.array(Y, dtype=np.float64)
    for j in range(Q.shape[1]):
        q = Q[:, j]
        scale = np.sqrt(q @ q)
        if j:
            B = Q[:, :j]
            q = q - B @ (B.T @ q)
            q = q - B @ (B.T @ q)
        nq = np.sqrt(q @ q)
        if not nq > rel_tol * max(scale, 1e-300):
            return None
        Q[:, j] = q / nq
    return Q


def qf(X) -> np.ndarray:
    """Q factor of the thin QR decomposition, normalised so diag(R) >= 0."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] <= _GS_MAX_COLS:
        Q = _gram_schmidt(X, 1e-8)
        if Q is not None:
            return Q
    return _qr_positive(X)[0]


def _check_shapes(w, X):
    if w.shape != X.shape:
        raise DimensionError(f"shape mismatch: point {w.shape} vs matrix {X.shape}")


def project_tangent(w, X, G=None) -> np.ndarray:
    """Orthogonal projection of X onto the tangent space at w.

    Standard metric: X - w sym(w^T X). Generalized: X - w sym(w^T G X).
    """
    w = np.asarray(w, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_shapes(w, X)
    GX = X if G is None else G @ X
    return X - w @ sym(w.T @ GX)


def retract_qf(w, V) -> np.ndarray:
    """QR retraction qf(w + V); raises when w + V loses column rank."""
    w = np.asarray(w, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    _check_shapes(w, V)
    return _retract_qf(w + V)


def _retract_qf(Y):
    if not np.all(np.isfinite(Y)):
        raise NumericalError("non-finite retraction input")
    if Y.shape[1] <= _GS_MAX_COLS:
        Q = _gram_schmidt(Y, 1e-12)
        if Q is None:
            raise SingularityError("w + V is rank deficient")
        return Q
    Q, R = _qr_positive(Y)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * max(np.linalg.norm(Y), 1.0):
        raise SingularityError("w + V is rank deficient")
    return Q


def retract_cholqr(w, theta, zeta, G) -> np.ndarray:
    """Cholesky QR retraction onto {w : w^T G w = I}.

    Factor (w + theta zeta)^T G (w + theta zeta) = R^T R and return
    (w + theta zeta) R^{-1}. A jitter of 1e-10 I is added once if the plain
    factorization fails.
    """
    w = np.asarray(w, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    _check_shapes(w, zeta)
    Y = w + theta * zeta
    if not np.all(np.isfinite(Y)):
        raise NumericalError("non-finite retraction input")
    Z = sym(Y.T @ (G @ Y))
    try:
        R = scipy.linalg.cholesky(Z, lower=False)
    except np.linalg.LinAlgError:
        try:
            R = scipy.linalg.cholesky(Z + CHOL_JITTER * np.eye(Z.shape[0]), lower=False)
        except np.linalg.LinAlgError as exc:
            raise DeflationDegeneracyError(
                "Cholesky of (w + theta zeta)^T G (w + theta zeta) failed after jitter") from exc
    # Y R^{-1} == solve(R^T, Y^T)^T
    return scipy.linalg.solve_triangular(R, Y.T, trans="T", lower=False).T


def retract(w, V, G=None) -> np.ndarray:
    if G is None:
        return _retract_qf(w + V)
    return retract_cholqr(w, 1.0, V, G)


def _proj(w, X, G):
    GX = X if G is None else G @ X
    S = w.T @ GX
    return X - w @ (0.5 * (S + S.T))


class LineSearchCondition(str, enum.Enum):
    WOLFE = "wolfe"
    ARMIJO = "armijo-fallback"
    MAX_STEPS = "max-steps"


@dataclass(frozen=True)
class LineSearchResult:
    theta: float
    w_next: np.ndarray
    f_next: float
    n_evals: int
    condition: LineSearchCondition
    grad_norm: float
    slope: float = 0.0


def riemannian_grad(grad_f, w, G=None):
    return project_tangent(w, grad_f(w), G)


def line_search(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    w0,
    params,
    G=None,
    initial_step: float | None = None,
    f0: float | None = None,
) -> LineSearchResult:
    """One steepest-descent step on the manifold with a strong Wolfe step size.

    The step is bracketed from ``initial_step`` (default ``params.initial_step``)
    by doubling and refined by bisection. If no Wolfe point is found within
    ``params.max_linesearch_steps`` trials, the best Armijo point seen is
    used, then plain backtracking; if that also fails the point is returned
    unchanged with condition MAX_STEPS. Trial steps whose predicted change in
    ``f`` is below floating-point resolution are not tried. The curvature test compares
    ``zeta`` with the Riemannian gradient at the trial point directly,
    without vector transport.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    c1, c2 = params.c1, params.c2
    max_steps = params.max_linesearch_steps
    theta0 = params.initial_step if initial_step is None else initial_step

    f0 = f(w0) if f0 is None else f0
    g0 = _proj(w0, grad_f(w0), G)
    n_evals = 1
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise NumericalError("non-finite objective or gradient at line-search start")
    gnorm = float(np.linalg.norm(g0))
    if gnorm <= params.tol_inner:
        return LineSearchResult(0.0, w0, f0, n_evals, LineSearchCondition.ARMIJO, gnorm)

    zeta = -g0
    slope0 = float(np.vdot(g0, zeta))

    def phi(theta):
        nonlocal n_evals
        n_evals += 1
        try:
            w = retract(w0, theta * zeta, G)
        except NumericalError:
            return None, np.inf
        value = f(w)
        return w, (value if np.isfinite(value) else np.inf)

    def dphi(w):
        g = _proj(w, grad_f(w), G)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient during line search")
        return float(np.vdot(g, zeta))

    def armijo(theta, value):
        return value <= f0 + c1 * theta * slope0

    # steps whose predicted change is below roundoff in f0 carry no information
    theta_floor = _EPS * max(abs(f0), 1.0) / -slope0

    best = None  # (theta, w, f) lowest Armijo point seen

    def note(theta, w, value):
        nonlocal best
        if w is not None and armijo(theta, value) and (best is None or value < best[2]):
            best = (theta, w, value)

    def accept(theta, w, value, cond):
        return LineSearchResult(theta, w, value, n_evals, cond, gnorm, slope0)

    steps = 0
    prev_theta, prev_f = 0.0, f0
    theta = theta0
    lo = hi = None
    while steps < max_steps:
        steps += 1
        w, value = phi(theta)
        note(theta, w, value)
        if not armijo(theta, value) or (steps > 1 and value >= prev_f):
            lo, hi, f_lo = prev_theta, theta, prev_f
            break
        d = dphi(w)
        if abs(d) <= -c2 * slope0:
            return accept(theta, w, value, LineSearchCondition.WOLFE)
        if d >= 0:
            lo, hi, f_lo = theta, prev_theta, value
            break
        prev_theta, prev_f = theta, value
        theta *= 2.0

    if lo is not None:
        while steps < max_steps and abs(hi - lo) > theta_floor:
            steps += 1
            mid = 0.5 * (lo + hi)
            w, value = phi(mid)
            note(mid, w, value)
            if not armijo(mid, value) or value >= f_lo:
                hi = mid
                continue
            d = dphi(w)
            if abs(d) <= -c2 * slope0:
                return accept(mid, w, value, LineSearchCondition.WOLFE)
            if d * (hi - lo) >= 0:
                hi = lo
            lo, f_lo = mid, value

    if best is not None:
        return accept(*best, LineSearchCondition.ARMIJO)

    theta = theta0
    for _ in range(max_steps):
        theta *= 0.5
        if theta < theta_floor:
            break
        w, value = phi(theta)
        if w is not None and armijo(theta, value):
            return accept(theta, w, value, LineSearchCondition.ARMIJO)
    return accept(0.0, w0, f0, LineSearchCondition.MAX_STEPS)
