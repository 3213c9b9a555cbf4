"""Penalized weighted multinomial logistic regression.

Minimizes over intercepts ``b`` (C-1) and coefficient vectors ``u_c`` (C-1, d)::

    NLL(b, u) + l1 * sum_c ( ||u_c||_1 + ||M u_c||_1 )

where ``NLL = -sum_i w_i sum_c T_ic log p_ic`` with class ``C`` as reference,
``T`` one-hot or soft targets and ``M`` an optional linear map (the second
term is dropped when ``M`` is None).  Designs are centered and scaled
internally and the penalty applies to the standardized coefficients.

Without a penalty the problem is solved by damped Newton.  With one, each
outer step minimizes the local quadratic model plus the exact L1 term (ADMM on
a small dense problem) and backtracks on the true objective: a proximal Newton
method.  Between steps, the zero pattern of the current ``F u_c`` is frozen and
the remaining smooth problem solved by Newton ("polish"); a polished point that
passes a KKT check ends the solve.  The best of (warm start, Newton iterates,
polished iterates) is returned, so a warm start is never made worse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, null_space
from scipy.optimize import lsq_linear
from scipy.special import logsumexp

from .exceptions import ConfigurationError, NumericInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Standardizer:
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, per_column: bool = True) -> "Standardizer":
        m = X.mean(axis=0)
        sd = X.std(axis=0)
        if per_column:
            s = np.where(sd > 1e-12 * (1 + np.abs(m)), sd, 1.0)
        else:
            rms = float(np.sqrt(np.mean(sd**2)))
            s = np.full(X.shape[1], rms if rms > 0 else 1.0)
        return cls(m, s)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.center) / self.scale

    def to_standard(self, b: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return b + U @ self.center, U * self.scale

    def to_original(self, b: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Uo = U / self.scale
        return b - Uo @ self.center, Uo


@dataclass(frozen=True, eq=False)
class SolverState:
    """Standardized iterate and its penalized image ``z`` (exact zeros), for warm starts."""

    theta: np.ndarray
    z: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SolverResult:
    intercepts: np.ndarray
    coefs: np.ndarray
    objective: float
    converged: bool
    iterations: int
    state: SolverState
    polished: bool = False


# --- smooth part -----------------------------------------------------------


def _probs(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    full = np.concatenate([scores, np.zeros((scores.shape[0], 1))], axis=1)
    logp = full - logsumexp(full, axis=1, keepdims=True)
    return logp, np.exp(logp)


def _nll_parts(
    thetas: Sequence[np.ndarray],
    Zs: Sequence[np.ndarray],
    T: np.ndarray,
    w: np.ndarray,
    hessian: bool = True,
):
    """Value, flat gradient and Hessian of the weighted NLL.

    Class ``c`` has its own design ``Zs[c]`` (column 0 the intercept) and
    parameter ``thetas[c]``.
    """
    scores = np.column_stack([Z @ th for Z, th in zip(Zs, thetas)])
    logp, p = _probs(scores)
    f = -float(np.sum(w * np.sum(T * logp, axis=1)))
    wt = w * T.sum(axis=1)
    R = w[:, None] * T[:, :-1] - wt[:, None] * p[:, :-1]
    grad = np.concatenate([-(Z.T @ R[:, c]) for c, Z in enumerate(Zs)])
    if not hessian:
        return f, grad, None
    sizes = [Z.shape[1] for Z in Zs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    H = np.empty((offs[-1], offs[-1]))
    C1 = len(Zs)
    for a in range(C1):
        for b in range(a, C1):
            v = wt * ((a == b) * p[:, a] - p[:, a] * p[:, b])
            blk = (Zs[a] * v[:, None]).T @ Zs[b]
            H[offs[a] : offs[a + 1], offs[b] : offs[b + 1]] = blk
            if a != b:
                H[offs[b] : offs[b + 1], offs[a] : offs[a + 1]] = blk.T
    return f, grad, H


def weighted_nll(theta: np.ndarray, designs: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted multinomial NLL and its gradient.

    ``theta`` is ``(C-1, d+1)`` with the intercept in column 0 and ``designs``
    is ``(n, d)`` without an intercept column.
    """
    Z = np.column_stack([np.ones(designs.shape[0]), designs])
    thetas = list(np.asarray(theta, dtype=float))
    f, g, _ = _nll_parts(thetas, [Z] * len(thetas), targets, weights, hessian=False)
    return f, g.reshape(np.shape(theta))


def _newton(fun, x0: np.ndarray, max_iter: int, tol: float = 1e-10):
    """Damped Newton with Armijo backtracking. Returns (x, f, converged, iters)."""
    x = x0.copy()
    f, g, H = fun(x, True)
    for it in range(1, max_iter + 1):
        # near-separable data make H almost singular; a tiny ridge keeps the
        # step finite without changing well-conditioned solves
        ridge = 1e-10 * max(float(np.max(np.abs(np.diag(H)))), 1e-300)
        try:
            step = -np.linalg.solve(H + ridge * np.eye(H.shape[0]), g)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        with np.errstate(all="ignore"):
            dec = -float(g @ step)
        if not np.isfinite(dec) or dec <= 0:
            step, dec = -g, float(g @ g)
        if dec / 2 <= tol * (1 + abs(f)):
            return x, f, True, it - 1
        t = 1.0
        while True:
            xn = x + t * step
            with np.errstate(all="ignore"):
                fn = fun(xn, False)[0]
            if np.isfinite(fn) and fn <= f - 1e-4 * t * dec:
                break
            t *= 0.5
            if t < 1e-12:
                return x, f, False, it
        x = xn
        f, g, H = fun(x, True)
    return x, f, False, max_iter


def _soft(x: np.ndarray, k: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - k, 0.0)


# --- solver ----------------------------------------------------------------


class _Problem:
    """Standardized problem data shared by the three routes."""

    def __init__(self, Xs, T, w, l1, M):
        self.n, self.d = Xs.shape
        self.C1 = T.shape[1] - 1
        self.Z = np.column_stack([np.ones(self.n), Xs])
        self.T, self.w, self.l1 = T, w, l1
        self.F = None if M is None else np.vstack([np.eye(self.d), M])

    def penalty(self, theta: np.ndarray) -> float:
        if self.l1 == 0:
            return 0.0
        U = theta[:, 1:]
        total = np.abs(U).sum()
        if self.F is not None:
            total += np.abs(U @ self.F[self.d :].T).sum()
        return self.l1 * float(total)

    def smooth(self, theta: np.ndarray) -> float:
        scores = self.Z @ theta.T
        logp, _ = _probs(scores)
        return -float(np.sum(self.w * np.sum(self.T * logp, axis=1)))

    def objective(self, theta: np.ndarray) -> float:
        return self.smooth(theta) + self.penalty(theta)

    def smooth_fun(self, extra=None):
        C1, d1 = self.C1, self.d + 1

        def fun(x, need_h):
            th = x.reshape(C1, d1)
            f, g, H = _nll_parts(list(th), [self.Z] * C1, self.T, self.w, need_h)
            if extra is not None:
                f, g, H = extra(th, f, g, H, need_h)
            return f, g, H

        return fun


def _newton_route(prob: _Problem, theta0, max_iter, tol):
    x, f, conv, it = _newton(prob.smooth_fun(), theta0.ravel(), max_iter, tol)
    return x.reshape(theta0.shape), conv, it


def _block_operator(prob: _Problem) -> np.ndarray:
    """``E`` with ``E @ theta.ravel()`` the stacked penalized vectors ``F u_c``."""
    C1, d1 = prob.C1, prob.d + 1
    F = _operator(prob)
    Fi = np.column_stack([np.zeros(F.shape[0]), F])
    return np.kron(np.eye(C1), Fi)


def _quadratic_l1(H, rhs, E, l1, z0, max_iter=2000, tol=1e-10):
    """ADMM for ``min 1/2 x'Hx - rhs'x + l1 ||E x||_1``.

    ``rho`` starts at the mean curvature and is rebalanced every 10
    iterations when the residuals differ by more than 10x.
    Returns ``(x, z)`` where ``z`` approximates ``E x`` with exact zeros.
    """
    n = H.shape[0]
    EtE = E.T @ E
    rho = max(float(np.trace(H)) / n, 1e-8)
    ridge = 1e-12 * max(float(np.max(np.abs(np.diag(H)))), 1.0)
    z = z0.copy()
    u = np.zeros_like(z)
    fac = cho_factor(H + rho * EtE + ridge * np.eye(n))
    for it in range(1, max_iter + 1):
        x = cho_solve(fac, rhs + rho * E.T @ (z - u))
        Ex = E @ x
        z_old = z
        z = _soft(Ex + u, l1 / rho)
        u = u + Ex - z
        r = float(np.linalg.norm(Ex - z))
        sd = rho * float(np.linalg.norm(E.T @ (z - z_old)))
        if r <= tol * (1 + max(np.linalg.norm(Ex), np.linalg.norm(z))) and sd <= tol * (
            1 + rho * float(np.linalg.norm(E.T @ u))
        ):
            break
        if it % 10 == 0 and (r > 10 * sd or sd > 10 * r):
            f = 2.0 if r > sd else 0.5
            rho *= f
            u /= f
            fac = cho_factor(H + rho * EtE + ridge * np.eye(n))
    return x, z


def _prox_newton_step(prob: _Problem, theta: np.ndarray, E: np.ndarray, z0: np.ndarray):
    """Proximal Newton direction with backtracking on the full objective.

    Returns ``(theta_new, z, decrease)``; ``decrease`` is the model decrease
    (nonpositive) used as the stopping measure.
    """
    x = theta.ravel()
    f, g, H = prob.smooth_fun()(x, True)
    xh, z = _quadratic_l1(H, H @ x - g, E, prob.l1, z0)
    dx = xh - x
    pen = lambda v: prob.l1 * float(np.abs(E @ v).sum())
    dec = float(g @ dx) + pen(xh) - pen(x)
    obj = f + pen(x)
    t = 1.0
    while t > 1e-10:
        xn = x + t * dx
        with np.errstate(all="ignore"):
            on = prob.objective(xn.reshape(theta.shape))
        if np.isfinite(on) and on <= obj + 1e-4 * t * min(dec, 0.0):
            return xn.reshape(theta.shape), z, dec
        t *= 0.5
    return theta, z, 0.0


def _operator(prob: _Problem) -> np.ndarray:
    return np.eye(prob.d) if prob.F is None else prob.F


def _polish(prob: _Problem, theta: np.ndarray, pattern: np.ndarray, max_iter: int = 50):
    """Freeze the zero pattern of ``F u_c`` and solve the smooth remainder.

    ``pattern`` is ``(C1, rows of F)``: zeros mark constrained rows, nonzero
    entries supply the sign of the (now linear) penalty term.
    """
    C1, d1 = theta.shape
    d = d1 - 1
    F = _operator(prob)
    Ns, lins, Zs, phis = [], [], [], []
    for c in range(C1):
        zero = pattern[c] == 0
        N = null_space(F[zero]) if zero.any() else np.eye(d)
        Ns.append(N)
        lins.append(np.concatenate([[0.0], prob.l1 * (N.T @ (F.T @ np.sign(pattern[c])))]))
        Zs.append(np.column_stack([prob.Z[:, 0], prob.Z[:, 1:] @ N]))
        phis.append(np.concatenate([[theta[c, 0]], N.T @ theta[c, 1:]]))
    offs = np.concatenate([[0], np.cumsum([len(p) for p in phis])])
    lin = np.concatenate(lins)

    def fun(x, need_h):
        parts = [x[offs[c] : offs[c + 1]] for c in range(C1)]
        f, g, H = _nll_parts(parts, Zs, prob.T, prob.w, need_h)
        return f + float(lin @ x), g + lin, H

    x, _, _, _ = _newton(fun, np.concatenate(phis), max_iter, 1e-15)
    out = np.empty_like(theta)
    for c in range(C1):
        part = x[offs[c] : offs[c + 1]]
        out[c, 0] = part[0]
        u = Ns[c] @ part[1:]
        u[pattern[c][:d] == 0] = 0.0
        out[c, 1:] = u
    return out


def _certify(prob: _Problem, theta: np.ndarray, pattern: np.ndarray, tol: float) -> bool:
    """KKT check: is there a subgradient certifying ``theta`` as optimal?

    On rows of ``F u_c`` fixed at zero the subgradient is searched in
    ``[-1, 1]`` by bounded least squares; the remaining rows must keep the
    sign recorded in ``pattern``.
    """
    C1, d1 = theta.shape
    F = _operator(prob)
    _, g, _ = prob.smooth_fun()(theta.ravel(), False)
    g = g.reshape(C1, d1)
    scale = max(1.0, prob.l1, float(np.abs(g).max()))
    if np.abs(g[:, 0]).max() > tol * scale:
        return False
    for c in range(C1):
        zero = pattern[c] == 0
        Fu = F[~zero] @ theta[c, 1:]
        sgn = np.sign(pattern[c][~zero])
        if np.any(np.sign(Fu) != sgn):
            return False
        rhs = -g[c, 1:] - prob.l1 * (F[~zero].T @ sgn)
        if zero.any():
            A = prob.l1 * F[zero].T
            res = lsq_linear(A, rhs, bounds=(-1.0, 1.0), method="bvls")
            resid = A @ res.x - rhs
        else:
            resid = rhs
        if np.abs(resid).max() > tol * scale:
            return False
    return True


def solve_pwmlr(
    designs,
    targets,
    weights,
    l1_weight: float = 0.0,
    penalty_map=None,
    *,
    warm_start: Optional[tuple[np.ndarray, np.ndarray]] = None,
    warm_state: Optional[SolverState] = None,
    standardizer: Optional[Standardizer] = None,
    max_iter: Optional[int] = None,
    tol: float = 1e-6,
) -> SolverResult:
    """Fit a penalized weighted multinomial logit with class ``C`` as reference.

    Parameters
    ----------
    designs : (n, d) array
    targets : (n, C) array
        One-hot or soft labels; rows need not be normalized.
    weights : (n,) array
        Nonnegative observation weights, not all zero.
    l1_weight : float
        Penalty weight on the standardized coefficients.
    penalty_map : (m, d) array, optional
        Linear map ``M`` whose image is additionally L1-penalized. When given,
        columns are standardized with one common scale so that the penalized
        structure is preserved.
    warm_start : tuple, optional
        ``(intercepts, coefs)`` on the original scale.
    warm_state : SolverState, optional
        State returned by a previous call on the same designs; takes
        precedence over ``warm_start``.
    max_iter : int, optional
        Newton iterations (unpenalized) or first-order iterations (penalized);
        defaults to 100 and 500.

    Returns
    -------
    SolverResult
        Intercepts and coefficients on the original scale, the objective at
        that point and a convergence flag.
    """
    X = np.asarray(designs, dtype=float)
    T = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ConfigurationError("designs must be an (n, d) array with d >= 1")
    if T.ndim != 2 or T.shape[0] != X.shape[0] or T.shape[1] < 2:
        raise ConfigurationError("targets must be (n, C) with C >= 2")
    if w.shape[0] != X.shape[0]:
        raise ConfigurationError("weights length differs from n")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T)) and np.all(np.isfinite(w))):
        raise NumericInputError("non-finite solver input")
    if np.any(w < 0) or not np.any(w > 0):
        raise ConfigurationError("weights must be nonnegative and not all zero")
    if l1_weight < 0:
        raise ConfigurationError("l1_weight must be nonnegative")
    M = None if penalty_map is None else np.asarray(penalty_map, dtype=float)
    if M is not None and M.shape[1] != X.shape[1]:
        raise ConfigurationError("penalty_map must have d columns")

    std = standardizer or Standardizer.fit(X, per_column=M is None)
    prob = _Problem(std.transform(X), T, w, float(l1_weight), M if l1_weight > 0 else None)
    C1, d = T.shape[1] - 1, X.shape[1]

    z = None
    if warm_state is not None:
        theta0 = warm_state.theta.copy()
        m = _operator(prob).shape[0]
        if warm_state.z is not None and warm_state.z.shape == (C1 * m,):
            z = warm_state.z.copy()
    elif warm_start is not None:
        b, U = std.to_standard(np.asarray(warm_start[0], float), np.asarray(warm_start[1], float))
        theta0 = np.column_stack([b, U])
    else:
        theta0 = np.zeros((C1, d + 1))
    if theta0.shape != (C1, d + 1):
        raise ConfigurationError("warm start has the wrong shape")

    best_obj, best = prob.objective(theta0), theta0
    polished = converged = False
    iters = 0
    if l1_weight == 0:
        theta, converged, iters = _newton_route(prob, theta0, max_iter or 100, 1e-12)
        obj = prob.objective(theta)
        if obj <= best_obj:
            best_obj, best = obj, theta
    else:
        budget = max_iter or 100
        E = _block_operator(prob)
        theta = theta0
        z = z if z is not None else E @ theta0.ravel()
        pattern = z.reshape(C1, -1)
        while True:
            cand = _polish(prob, theta, pattern)
            obj = prob.objective(cand)
            if np.isfinite(obj) and obj <= best_obj:
                best_obj, best = obj, cand
                if _certify(prob, cand, pattern, tol):
                    polished = converged = True
                    break
            if iters >= budget:
                break
            theta, z, dec = _prox_newton_step(prob, best, E, z)
            pattern = z.reshape(C1, -1)
            iters += 1
            obj = prob.objective(theta)
            if obj <= best_obj:
                best_obj, best = obj, theta
            if -dec <= tol * (1 + abs(best_obj)):
                converged = True
                cand = _polish(prob, theta, pattern)
                obj = prob.objective(cand)
                if np.isfinite(obj) and obj <= best_obj:
                    best_obj, best = obj, cand
                    polished = True
                break

    b, U = std.to_original(best[:, 0], best[:, 1:])
    return SolverResult(
        intercepts=b,
        coefs=U,
        objective=float(best_obj),
        converged=bool(converged),
        iterations=int(iters),
        state=SolverState(best, z),
        polished=polished,
    )


def pwmlr_objective(
    designs,
    targets,
    weights,
    intercepts,
    coefs,
    l1_weight: float = 0.0,
    penalty_map=None,
    standardizer: Optional[Standardizer] = None,
) -> float:
    """Objective of :func:`solve_pwmlr` at original-scale parameters."""
    X = np.asarray(designs, dtype=float)
    M = None if penalty_map is None else np.asarray(penalty_map, dtype=float)
    std = standardizer or Standardizer.fit(X, per_column=M is None)
    prob = _Problem(
        std.transform(X),
        np.asarray(targets, dtype=float),
        np.asarray(weights, dtype=float),
        float(l1_weight),
        M if l1_weight > 0 else None,
    )
    b, U = std.to_standard(np.asarray(intercepts, float), np.asarray(coefs, float))
    return prob.objective(np.column_stack([b, U]))
