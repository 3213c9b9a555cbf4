"""B-spline bases, curve projection, cross-Gram matrices and finite-difference
derivative operators.

Everything here is immutable once built. Basis evaluation is delegated to
:func:`scipy.interpolate.BSpline.design_matrix`; the rest is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import ConfigurationError, DomainError, OperatorError, RankError

#: block_d1 is rejected as singular above this condition number.
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """Clamped B-spline system of a given order on a closed interval.

    Parameters
    ----------
    order : int
        Polynomial degree + 1.
    dim : int
        Number of basis functions.
    domain : tuple of float
        ``(t_min, t_max)``.
    knots : ndarray
        Knot vector of length ``dim + order`` with ``order``-fold boundary knots.
    """

    order: int
    dim: int
    domain: tuple[float, float]
    knots: np.ndarray = field(repr=False)

    @property
    def degree(self) -> int:
        return self.order - 1

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def __call__(self, t) -> np.ndarray:
        """Evaluate all basis functions at the points ``t``; returns ``(len(t), dim)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.domain
        if t.size and (np.any(~np.isfinite(t)) or t.min() < lo or t.max() > hi):
            raise DomainError(f"evaluation points must lie in [{lo}, {hi}]")
        if t.size == 0:
            return np.zeros((0, self.dim))
        return BSpline.design_matrix(t, self.knots, self.degree).toarray()

    def integrals(self) -> np.ndarray:
        """Closed-form integrals of each basis function over the domain."""
        return (self.knots[self.order:] - self.knots[: self.dim]) / self.order

    def greville(self) -> np.ndarray:
        """Greville abscissae; the coefficients of ``f(t) = t`` for ``order >= 2``."""
        k = self.order
        if k == 1:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array([self.knots[j + 1 : j + k].mean() for j in range(self.dim)])

    def same_as(self, other: "BSplineBasis") -> bool:
        return (
            self.order == other.order
            and self.dim == other.dim
            and self.domain == other.domain
            and np.array_equal(self.knots, other.knots)
        )


@dataclass(frozen=True, eq=False)
class CurveCoefficients:
    coeffs: np.ndarray
    basis_dim: int
    residual_rms: float = 0.0

    def __post_init__(self):
        if len(self.coeffs) != self.basis_dim:
            raise ValueError("coefficient length does not match basis dimension")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite curve coefficients")


@dataclass(frozen=True, eq=False)
class CrossGram:
    matrix: np.ndarray
    quadrature_nodes: int


@dataclass(frozen=True, eq=False)
class DerivativeOperator:
    """Finite-difference derivative matrices of a basis at ``eval_points``.

    ``block_d1 @ coeffs`` approximates the ``d1``-th derivative of the expansion
    at each evaluation point, likewise ``block_d2``.  ``chain`` maps the first
    block's output onto the second's: ``block_d2 == chain @ block_d1``.
    """

    d1: int
    d2: int
    eval_points: np.ndarray
    block_d1: np.ndarray
    block_d2: np.ndarray
    block_d1_inverse: np.ndarray
    chain: np.ndarray
    condition_number: float

    @property
    def stacked(self) -> np.ndarray:
        """The ``2*dim x dim`` matrix ``[block_d1; block_d2]``."""
        return np.vstack([self.block_d1, self.block_d2])

    @property
    def dim(self) -> int:
        return self.block_d1.shape[1]


def make_basis(order: int, dim: int, domain: tuple[float, float] = (0.0, 1.0)) -> BSplineBasis:
    """Clamped B-spline basis with uniformly spaced interior knots."""
    order, dim = int(order), int(dim)
    if order < 1:
        raise ConfigurationError(f"order must be >= 1, got {order}")
    if dim < order:
        raise ConfigurationError(f"dim ({dim}) must be >= order ({order})")
    lo, hi = float(domain[0]), float(domain[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
        raise ConfigurationError(f"degenerate domain [{lo}, {hi}]")
    inner = np.linspace(lo, hi, dim - order + 2)
    knots = np.concatenate([np.full(order - 1, lo), inner, np.full(order - 1, hi)])
    return BSplineBasis(order=order, dim=dim, domain=(lo, hi), knots=knots)


def eval_basis(basis: BSplineBasis, t: float) -> np.ndarray:
    return basis(np.array([t], dtype=float))[0]


def _check_grid(basis: BSplineBasis, grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise ValueError("grid must be one-dimensional")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    return grid


def projection_matrix(basis: BSplineBasis, grid) -> np.ndarray:
    """Least-squares projector ``P`` with ``coeffs = P @ samples``."""
    grid = _check_grid(basis, grid)
    if grid.size < basis.dim:
        raise RankError(
            f"underdetermined projection: {grid.size} samples for {basis.dim} basis functions"
        )
    B = basis(grid)
    rank = np.linalg.matrix_rank(B)
    if rank < basis.dim:
        raise RankError(f"singular normal matrix: design rank {rank} < {basis.dim}")
    return np.linalg.pinv(B)


def project_curve(basis: BSplineBasis, grid, samples) -> CurveCoefficients:
    """Least-squares coefficients of one sampled curve in ``basis``."""
    samples = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if samples.shape != grid.shape:
        raise ValueError("grid and samples lengths differ")
    P = projection_matrix(basis, grid)
    c = P @ samples
    resid = basis(grid) @ c - samples
    return CurveCoefficients(c, basis.dim, float(np.sqrt(np.mean(resid**2))))


def project_curves(basis: BSplineBasis, grid, curves) -> np.ndarray:
    """Row-wise least-squares projection of an ``(n, len(grid))`` array."""
    curves = np.asarray(curves, dtype=float)
    return curves @ projection_matrix(basis, grid).T


def reconstruct(basis: BSplineBasis, coeffs, grid) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.dim:
        raise ValueError(f"expected {basis.dim} coefficients, got {coeffs.shape[-1]}")
    return coeffs @ basis(grid).T


def _gauss_nodes(breaks: np.ndarray, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    half = 0.5 * (breaks[1:] - breaks[:-1])
    return (np.outer(half, x) + mid[:, None]).ravel(), np.outer(half, w).ravel()


def cross_gram(basis_a: BSplineBasis, basis_b: BSplineBasis) -> CrossGram:
    """Matrix of ``integral b_a(t) b_b(t) dt`` by Gauss-Legendre per knot span.

    ``order_a + order_b`` nodes per span integrate the piecewise polynomial
    product exactly.
    """
    if basis_a.domain != basis_b.domain:
        raise ConfigurationError(
            f"cross-Gram needs identical domains, got {basis_a.domain} and {basis_b.domain}"
        )
    breaks = np.union1d(basis_a.breakpoints(), basis_b.breakpoints())
    n_nodes = basis_a.order + basis_b.order
    t, w = _gauss_nodes(breaks, n_nodes)
    Ba, Bb = basis_a(t), basis_b(t)
    G = (Ba * w[:, None]).T @ Bb
    if basis_a.same_as(basis_b):
        G = 0.5 * (G + G.T)
    return CrossGram(G, n_nodes)


def default_eval_points(basis: BSplineBasis) -> np.ndarray:
    """``dim`` equally spaced points, offset half a spacing from each end."""
    lo, hi = basis.domain
    h = (hi - lo) / basis.dim
    return lo + h * (np.arange(basis.dim) + 0.5)


def fd_weights(offsets, d: int) -> np.ndarray:
    """Weights ``w`` with ``sum(w * f(x + offsets)) ~ f^(d)(x)`` for unit spacing."""
    offsets = np.asarray(offsets, dtype=float)
    m = offsets.size
    V = np.vander(offsets, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[d] = factorial(d)
    return np.linalg.solve(V, rhs)


def difference_block(basis: BSplineBasis, d: int, eval_points=None) -> np.ndarray:
    """Rows are the ``d``-th finite difference of the basis at each point.

    Differences run along the (uniform) evaluation grid: central stencils in
    the interior and shifted one-sided stencils near the ends.
    """
    if eval_points is None:
        eval_points = default_eval_points(basis)
    pts = _check_grid(basis, eval_points)
    B = basis(pts)
    m = pts.size
    if d == 0:
        return B
    if m < 2:
        raise OperatorError("finite differences need at least two evaluation points")
    steps = np.diff(pts)
    h = steps.mean()
    if not np.allclose(steps, h, rtol=1e-9, atol=0.0):
        raise OperatorError("finite differences need equally spaced evaluation points")
    width = d + 1 if d % 2 == 0 else d + 2
    if width > m:
        raise OperatorError(f"{m} evaluation points cannot support a {d}-th difference")
    half = width // 2
    rows = np.empty((m, basis.dim))
    for j in range(m):
        start = min(max(j - half, 0), m - width)
        idx = np.arange(start, start + width)
        w = fd_weights(idx - j, d) / h**d
        rows[j] = w @ B[idx]
    return rows


def derivative_operator(
    basis: BSplineBasis, d1: int = 0, d2: int = 2, eval_points=None
) -> DerivativeOperator:
    """Build the stacked derivative operator ``[A^(d1); A^(d2)]`` for ``basis``.

    Raises
    ------
    OperatorError
        If the derivative orders are invalid or ``block_d1`` is numerically
        singular. Any ``d1 >= 1`` is singular for a clamped basis because the
        constant function lies in its kernel.
    """
    d1, d2 = int(d1), int(d2)
    if not 0 <= d1 < d2 < basis.order:
        raise OperatorError(
            f"need 0 <= d1 < d2 < order, got d1={d1}, d2={d2}, order={basis.order}"
        )
    if eval_points is None:
        eval_points = default_eval_points(basis)
    eval_points = np.asarray(eval_points, dtype=float)
    if eval_points.size != basis.dim:
        raise OperatorError(f"need {basis.dim} evaluation points, got {eval_points.size}")
    A1 = difference_block(basis, d1, eval_points)
    A2 = difference_block(basis, d2, eval_points)
    cond = float(np.linalg.cond(A1))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise OperatorError(f"block_d1 is singular (condition number {cond:.3e})")
    A1_inv = np.linalg.inv(A1)
    return DerivativeOperator(
        d1=d1,
        d2=d2,
        eval_points=eval_points,
        block_d1=A1,
        block_d2=A2,
        block_d1_inverse=A1_inv,
        chain=A2 @ A1_inv,
        condition_number=cond,
    )
