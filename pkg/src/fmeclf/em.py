"""EM fitting of functional mixture-of-experts classifiers.

Four variants share one E-step and one weighted multinomial solver:

``fme-em``
    maximum likelihood on the plain designs ``(r_i, x_i)``;
``fme-em-lasso``
    L1 on the plain basis coefficients ``zeta_k``, ``eta_kg``;
``ifme-em``
    derivative-form designs ``(s_i, v_i)`` with L1 on the stacked derivative
    vectors ``[omega; chain @ omega]``;
``fmlr``
    a single multinomial logit on ``x_i`` (no gating, no EM).

Penalties act on standardized coefficients (see :mod:`fmeclf.solver`), so the
penalized log-likelihood reported in the trace is
``loglik - chi * pen_gating - lambda * pen_experts`` on that scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .basis import cross_gram, projection_matrix
from .data import FunctionalDataset, correct_classification_rate, split
from .exceptions import ConfigurationError, DegenerateComponentError
from .model import (
    BasisConfig,
    DesignBundle,
    ExpertParams,
    FmeModel,
    GatingParams,
    Parameterization,
    joint_log_terms,
    log_likelihood,
    predict,
)
from .solver import SolverState, Standardizer, solve_pwmlr

logger = logging.getLogger(__name__)

#: a component whose responsibilities all fall below this is degenerate.
DEGENERATE_TAU = 1e-8


class Variant(str, Enum):
    FME_EM = "fme-em"
    FME_EM_LASSO = "fme-em-lasso"
    IFME_EM = "ifme-em"
    FMLR = "fmlr"

    @property
    def parameterization(self) -> Parameterization:
        if self is Variant.IFME_EM:
            return Parameterization.DERIVATIVE
        return Parameterization.PLAIN

    @property
    def label(self) -> str:
        return {"fme-em": "FME-EM", "fme-em-lasso": "FME-EM-Lasso", "ifme-em": "iFME-EM", "fmlr": "FMLR"}[
            self.value
        ]


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.

    ``basis.domain`` may be None, in which case the dataset's grid range is
    used. ``newton_max_iter`` caps the Newton steps of an unpenalized M-step
    and ``solver_max_iter`` the proximal Newton steps of a penalized one.
    """

    variant: Variant = Variant.FME_EM
    K: int = 2
    chi: float = 0.0
    lam: float = 0.0
    basis: BasisConfig = field(default_factory=lambda: BasisConfig(domain=None))
    max_em_iters: int = 1000
    em_rel_tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    solver_tol: float = 1e-6
    solver_max_iter: int = 100
    newton_max_iter: int = 50

    def resolved(self) -> "FitConfig":
        """Apply the variant's forced settings."""
        v = Variant(self.variant)
        cfg = replace(self, variant=v)
        if v is Variant.FMLR:
            cfg = replace(cfg, K=1, chi=0.0)
        elif v is Variant.FME_EM:
            cfg = replace(cfg, chi=0.0, lam=0.0)
        if cfg.K < 1:
            raise ConfigurationError("K must be >= 1")
        if cfg.chi < 0 or cfg.lam < 0:
            raise ConfigurationError("chi and lambda must be nonnegative")
        if cfg.n_restarts < 1:
            raise ConfigurationError("n_restarts must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        return {
            "variant": Variant(self.variant).value,
            "K": self.K,
            "chi": self.chi,
            "lambda": self.lam,
            "basis": self.basis.to_dict(),
            "max_em_iters": self.max_em_iters,
            "em_rel_tol": self.em_rel_tol,
            "n_restarts": self.n_restarts,
            "seed": self.seed,
            "solver_tol": self.solver_tol,
            "solver_max_iter": self.solver_max_iter,
            "newton_max_iter": self.newton_max_iter,
        }


@dataclass(frozen=True, eq=False)
class FitReport:
    model: FmeModel
    trace: list
    converged: bool
    iterations: int
    restart: int
    log_likelihood: float
    penalized_log_likelihood: float
    sparsity: dict
    restart_objectives: list
    failed_restarts: int = 0
    solver_nonconverged: int = 0
    tau: Optional[np.ndarray] = None


# --- designs ---------------------------------------------------------------


def resolve_basis(basis: BasisConfig, dataset: FunctionalDataset) -> BasisConfig:
    if basis.domain is None:
        return replace(basis, domain=dataset.domain)
    return basis


def build_designs(
    dataset: FunctionalDataset,
    basis: BasisConfig,
    parameterization: Parameterization = Parameterization.PLAIN,
    curve_coeffs: Optional[np.ndarray] = None,
) -> DesignBundle:
    """Project curves and form the gating/expert design vectors.

    Plain: ``r_i = Gram(b_r, b_p)^T x_i`` and ``x_i = Gram(b_r, b_q)^T x_i``.
    Derivative form additionally applies ``(A^(d1))^{-T}``.
    """
    basis = resolve_basis(basis, dataset)
    lo, hi = basis.domain
    if dataset.grid[0] < lo or dataset.grid[-1] > hi:
        raise ConfigurationError(
            f"dataset grid [{dataset.grid[0]}, {dataset.grid[-1]}] exceeds domain [{lo}, {hi}]"
        )
    b_r = basis.curve_basis()
    if curve_coeffs is None:
        curve_coeffs = dataset.curves @ projection_matrix(b_r, dataset.grid).T
    gating = curve_coeffs @ cross_gram(b_r, basis.gating_basis()).matrix
    expert = curve_coeffs @ cross_gram(b_r, basis.expert_basis()).matrix
    par = Parameterization(parameterization)
    if par is Parameterization.DERIVATIVE:
        op_p, op_q = basis.operators()
        gating = gating @ op_p.block_d1_inverse
        expert = expert @ op_q.block_d1_inverse
    return DesignBundle(gating, expert, dataset.labels, dataset.G, par, curves=curve_coeffs)


# --- E and M steps ---------------------------------------------------------


def e_step(model: FmeModel, designs: DesignBundle) -> tuple[np.ndarray, float]:
    """Posterior expert memberships ``tau`` and the observed log-likelihood."""
    J = joint_log_terms(model, designs)
    ll = logsumexp(J, axis=1, keepdims=True)
    return np.exp(J - ll), float(ll.sum())


@dataclass
class _Context:
    """Per-fit constants: standardizers and penalty maps of both networks."""

    config: FitConfig
    std_g: Optional[Standardizer]
    std_e: Standardizer
    map_p: Optional[np.ndarray]
    map_q: Optional[np.ndarray]
    basis: BasisConfig

    @classmethod
    def build(cls, designs: DesignBundle, config: FitConfig, basis: BasisConfig) -> "_Context":
        ifme = config.variant is Variant.IFME_EM
        map_p = map_q = None
        if ifme:
            op_p, op_q = basis.operators()
            map_p, map_q = op_p.chain, op_q.chain
        std_g = Standardizer.fit(designs.gating, per_column=not ifme) if config.K > 1 else None
        std_e = Standardizer.fit(designs.expert, per_column=not ifme)
        return cls(config, std_g, std_e, map_p, map_q, basis)

    def block_penalty(self, coefs: np.ndarray, std: Standardizer, weight: float, M) -> float:
        if weight == 0 or coefs.size == 0:
            return 0.0
        U = coefs * std.scale
        total = np.abs(U).sum()
        if M is not None:
            total += np.abs(U @ M.T).sum()
        return weight * float(total)

    def penalty(self, model: FmeModel) -> float:
        c = self.config
        pen = 0.0
        if self.std_g is not None:
            pen += self.block_penalty(model.gating.coefs, self.std_g, c.chi, self.map_p)
        pen += self.block_penalty(
            model.experts.coefs.reshape(-1, model.experts.dim), self.std_e, c.lam, self.map_q
        )
        return pen


def _context(designs, config, basis=None) -> _Context:
    config = config.resolved()
    basis = basis or config.basis
    return _Context.build(designs, config, basis)


def m_step_gating(
    tau: np.ndarray,
    designs: DesignBundle,
    config: FitConfig,
    previous: Optional[GatingParams] = None,
    state: Optional[SolverState] = None,
    _ctx: Optional[_Context] = None,
):
    """Softmax gating fit to soft targets ``tau``; returns ``(params, solver_result)``."""
    ctx = _ctx or _context(designs, config)
    cfg = ctx.config
    K = tau.shape[1]
    par = designs.parameterization
    if K == 1:
        return GatingParams.zeros(1, designs.gating.shape[1], par), None
    warm = None if previous is None else (previous.intercepts, previous.coefs)
    res = solve_pwmlr(
        designs.gating,
        tau,
        np.ones(designs.n),
        cfg.chi,
        ctx.map_p if cfg.chi > 0 else None,
        warm_start=warm,
        warm_state=state,
        standardizer=ctx.std_g,
        max_iter=cfg.solver_max_iter if cfg.chi > 0 else cfg.newton_max_iter,
        tol=cfg.solver_tol,
    )
    return GatingParams(res.intercepts, res.coefs, par), res


def m_step_experts(
    tau: np.ndarray,
    designs: DesignBundle,
    config: FitConfig,
    previous: Optional[ExpertParams] = None,
    states: Optional[Sequence[Optional[SolverState]]] = None,
    _ctx: Optional[_Context] = None,
):
    """One weighted multinomial fit per expert, weights ``tau[:, k]``.

    An expert with no responsibility mass keeps its previous parameters.
    Returns ``(params, list of solver results or None)``.
    """
    ctx = _ctx or _context(designs, config)
    cfg = ctx.config
    K = tau.shape[1]
    par = designs.parameterization
    q = designs.expert.shape[1]
    prev = previous or ExpertParams.zeros(K, designs.G, q, par)
    Y = designs.onehot()
    b = prev.intercepts.copy()
    U = prev.coefs.copy()
    results = []
    for k in range(K):
        wk = tau[:, k]
        if not np.any(wk > 0):
            results.append(None)
            continue
        res = solve_pwmlr(
            designs.expert,
            Y,
            wk,
            cfg.lam,
            ctx.map_q if cfg.lam > 0 else None,
            warm_start=(prev.intercepts[k], prev.coefs[k]),
            warm_state=None if states is None else states[k],
            standardizer=ctx.std_e,
            max_iter=cfg.solver_max_iter if cfg.lam > 0 else cfg.newton_max_iter,
            tol=cfg.solver_tol,
        )
        b[k], U[k] = res.intercepts, res.coefs
        results.append(res)
    return ExpertParams(b, U, par), results


# --- EM driver -------------------------------------------------------------


def initial_responsibilities(curve_coeffs: np.ndarray, K: int, seed: int, restart: int) -> np.ndarray:
    """Smoothed k-means partition of the curve coefficients (0.9 on the assigned expert).

    Restart 0 uses a plain seeded k-means; later restarts reseed and then
    reassign a random 20% of the observations.
    """
    n = curve_coeffs.shape[0]
    if K == 1:
        return np.ones((n, 1))
    rng = np.random.default_rng([seed, restart])
    _, labels = kmeans2(curve_coeffs, K, minit="++", seed=rng)
    if restart > 0:
        flip = rng.random(n) < 0.2
        labels = np.where(flip, rng.integers(0, K, size=n), labels)
    counts = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(counts == 0):
        labels[rng.integers(0, n)] = k
    tau = np.full((n, K), 0.1 / (K - 1))
    tau[np.arange(n), labels] = 0.9
    return tau


def sparsity_summary(model: FmeModel) -> dict:
    out = {
        "gating_nonzero": [int(np.count_nonzero(c)) for c in model.gating.coefs],
        "expert_nonzero": [[int(np.count_nonzero(c)) for c in blk] for blk in model.experts.coefs],
        "coefficients": int(model.gating.coefs.size + model.experts.coefs.size),
    }
    if model.parameterization is Parameterization.DERIVATIVE:
        from .model import coefficient_functions

        cf = coefficient_functions(model, np.array(model.config.domain))
        out["gating_d2_nonzero"] = [int(np.count_nonzero(r)) for r in cf.gating_d2]
        out["expert_d2_nonzero"] = [[int(np.count_nonzero(r)) for r in blk] for blk in cf.experts_d2]
    return out


def degrees_of_freedom(model: FmeModel) -> int:
    """Nonzero free parameters, intercepts included."""
    return int(
        model.gating.intercepts.size
        + np.count_nonzero(model.gating.coefs)
        + model.experts.intercepts.size
        + np.count_nonzero(model.experts.coefs)
    )


@dataclass
class _Run:
    model: FmeModel
    trace: list
    converged: bool
    iterations: int
    objective: float
    loglik: float
    tau: np.ndarray
    solver_nonconverged: int


def _make_model(gating, experts, ctx: _Context) -> FmeModel:
    return FmeModel(gating, experts, ctx.basis, None, ctx.config.variant.value)


def run_em(designs: DesignBundle, tau0: np.ndarray, config: FitConfig, basis: BasisConfig) -> _Run:
    """EM from initial responsibilities ``tau0`` (M-step first)."""
    cfg = config.resolved()
    ctx = _Context.build(designs, cfg, basis)
    K = cfg.K
    bad = 0

    def count(res):
        nonlocal bad
        for r in res if isinstance(res, list) else [res]:
            if r is not None and not r.converged:
                bad += 1

    gating, gres = m_step_gating(tau0, designs, cfg, _ctx=ctx)
    experts, eres = m_step_experts(tau0, designs, cfg, _ctx=ctx)
    count(gres)
    count(eres)
    g_state = None if gres is None else gres.state
    e_states = [None if r is None else r.state for r in eres]
    model = _make_model(gating, experts, ctx)
    J = joint_log_terms(model, designs)
    lse = logsumexp(J, axis=1, keepdims=True)
    ll = float(lse.sum())
    obj = ll - ctx.penalty(model)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iters + 1):
        tau = np.exp(J - lse)
        dead = np.flatnonzero(tau.max(axis=0) < DEGENERATE_TAU)
        if dead.size:
            raise DegenerateComponentError(f"expert(s) {list(dead + 1)} lost all responsibility")
        gating, gres = m_step_gating(tau, designs, cfg, gating, g_state, _ctx=ctx)
        experts, eres = m_step_experts(tau, designs, cfg, experts, e_states, _ctx=ctx)
        count(gres)
        count(eres)
        if gres is not None:
            g_state = gres.state
        e_states = [e_states[k] if r is None else r.state for k, r in enumerate(eres)]
        model = _make_model(gating, experts, ctx)
        J = joint_log_terms(model, designs)
        lse = logsumexp(J, axis=1, keepdims=True)
        ll = float(lse.sum())
        new = ll - ctx.penalty(model)
        trace.append(new)
        if abs(new - obj) / (1 + abs(new)) < cfg.em_rel_tol:
            obj = new
            converged = True
            break
        obj = new
    if K == 1:
        converged = True
    return _Run(model, trace, converged, it, obj, ll, np.exp(J - lse), bad)


def _fit_fmlr(designs: DesignBundle, cfg: FitConfig, basis: BasisConfig) -> FitReport:
    ctx = _Context.build(designs, cfg, basis)
    res = solve_pwmlr(
        designs.expert,
        designs.onehot(),
        np.ones(designs.n),
        cfg.lam,
        None,
        standardizer=ctx.std_e,
        max_iter=cfg.solver_max_iter if cfg.lam > 0 else max(cfg.newton_max_iter, 100),
        tol=cfg.solver_tol,
    )
    par = designs.parameterization
    model = _make_model(
        GatingParams.zeros(1, designs.gating.shape[1], par),
        ExpertParams(res.intercepts[None, :], res.coefs[None, :, :], par),
        ctx,
    )
    ll = log_likelihood(model, designs)
    obj = ll - ctx.penalty(model)
    return FitReport(
        model=model,
        trace=[obj],
        converged=res.converged,
        iterations=res.iterations,
        restart=0,
        log_likelihood=ll,
        penalized_log_likelihood=obj,
        sparsity=sparsity_summary(model),
        restart_objectives=[obj],
        solver_nonconverged=0 if res.converged else 1,
        tau=np.ones((designs.n, 1)),
    )


def fit(dataset: FunctionalDataset, config: FitConfig, designs: Optional[DesignBundle] = None) -> FitReport:
    """Fit one variant with ``n_restarts`` initializations; keep the best.

    Raises
    ------
    ConfigurationError
        For ``K > n`` or an empty dataset.
    DegenerateComponentError
        If every restart collapsed an expert.
    """
    cfg = config.resolved()
    if dataset.n < 1:
        raise ConfigurationError("empty dataset")
    if cfg.K > dataset.n:
        raise ConfigurationError(f"K={cfg.K} exceeds n={dataset.n}")
    basis = resolve_basis(cfg.basis, dataset)
    if designs is None:
        designs = build_designs(dataset, basis, cfg.variant.parameterization)
    if cfg.variant is Variant.FMLR:
        return _fit_fmlr(designs, cfg, basis)

    coeffs = designs.curves if designs.curves is not None else designs.expert
    runs, objectives, failed = [], [], 0
    for r in range(cfg.n_restarts):
        tau0 = initial_responsibilities(coeffs, cfg.K, cfg.seed, r)
        try:
            run = run_em(designs, tau0, cfg, basis)
        except DegenerateComponentError as exc:
            logger.warning("restart %d failed: %s", r, exc)
            failed += 1
            runs.append(None)
            objectives.append(float("-inf"))
            continue
        runs.append(run)
        objectives.append(run.objective)
    if all(r is None for r in runs):
        raise DegenerateComponentError("all restarts produced a degenerate expert")
    best = int(np.argmax(objectives))
    run = runs[best]
    return FitReport(
        model=run.model,
        trace=run.trace,
        converged=run.converged,
        iterations=run.iterations,
        restart=best,
        log_likelihood=run.loglik,
        penalized_log_likelihood=run.objective,
        sparsity=sparsity_summary(run.model),
        restart_objectives=objectives,
        failed_restarts=failed,
        solver_nonconverged=run.solver_nonconverged,
        tau=run.tau,
    )


# --- hyperparameter selection ----------------------------------------------


class Criterion(str, Enum):
    BIC = "bic"
    VALIDATION_CCR = "val-ccr"


@dataclass(frozen=True, eq=False)
class Selection:
    chi: float
    lam: float
    K: int
    table: list


def bic(report: FitReport, n: int) -> float:
    return -2.0 * report.log_likelihood + degrees_of_freedom(report.model) * np.log(n)


def select_hyperparams(
    dataset: FunctionalDataset,
    variant,
    chi_grid: Sequence[float],
    lambda_grid: Sequence[float],
    K_grid: Sequence[int],
    criterion=Criterion.BIC,
    base: FitConfig = FitConfig(),
    seed: int = 0,
) -> Selection:
    """Grid search over ``(chi, lambda, K)`` by BIC (min) or held-out CCR (max).

    Ties go to the sparser setting: larger penalties first, then smaller K.
    """
    variant = Variant(variant)
    criterion = Criterion(criterion)
    if not (len(chi_grid) and len(lambda_grid) and len(K_grid)):
        raise ConfigurationError("hyperparameter grids must be nonempty")
    if criterion is Criterion.VALIDATION_CCR:
        train, valid = split(dataset, 0.25, seed)
    else:
        train, valid = dataset, None
    basis = resolve_basis(base.basis, dataset)
    designs = build_designs(train, basis, variant.parameterization)
    vdesigns = None
    if valid is not None:
        vdesigns = build_designs(valid, basis, variant.parameterization)
    rows = []
    for K in K_grid:
        for chi in chi_grid:
            for lam in lambda_grid:
                cfg = replace(base, variant=variant, K=int(K), chi=float(chi), lam=float(lam), basis=basis)
                row = {"K": int(K), "chi": float(chi), "lambda": float(lam)}
                try:
                    rep = fit(train, cfg, designs)
                except DegenerateComponentError:
                    row.update(score=float("nan"), df=None)
                    rows.append(row)
                    continue
                row["df"] = degrees_of_freedom(rep.model)
                row["log_likelihood"] = rep.log_likelihood
                if criterion is Criterion.BIC:
                    row["score"] = bic(rep, train.n)
                else:
                    pred = predict(rep.model, vdesigns.gating, vdesigns.expert).labels
                    row["score"] = correct_classification_rate(pred, valid.labels)
                rows.append(row)
    valid_rows = [r for r in rows if np.isfinite(r["score"])]
    if not valid_rows:
        raise DegenerateComponentError("no grid point produced a usable fit")
    sign = 1.0 if criterion is Criterion.BIC else -1.0
    best_score = min(sign * r["score"] for r in valid_rows)
    tol = 1e-9 * (1 + abs(best_score))
    tied = [r for r in valid_rows if sign * r["score"] <= best_score + tol]
    tied.sort(key=lambda r: (-r["chi"], -r["lambda"], r["K"]))
    win = tied[0]
    return Selection(win["chi"], win["lambda"], win["K"], rows)
