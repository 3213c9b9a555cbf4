"""Forward inference for functional mixture-of-experts classifiers.

The gating network is a softmax over ``K`` components with component ``K`` as
the reference (zero score); each expert is a multinomial logit over ``G``
classes with class ``G`` as the reference.  Parameters exist in two forms:

* ``PLAIN`` -- basis coefficients of the coefficient functions, paired with
  the designs ``r_i`` (gating) and ``x_i`` (experts);
* ``DERIVATIVE`` -- derivative samples ``A^(d1) zeta`` of the coefficient
  functions, paired with the designs ``s_i = A^(d1)^{-T} r_i`` and
  ``v_i = A^(d1)^{-T} x_i``.

Both give the same linear scores, so every function below is shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .basis import BSplineBasis, DerivativeOperator, derivative_operator, make_basis
from .exceptions import ConfigurationError, NumericInputError

MODEL_FORMAT = "fmeclf-model"
MODEL_VERSION = 1

#: derivative samples with magnitude below this fraction of the block's
#: largest entry are reported as exact zeros.
ZERO_TOL = 1e-9


class Parameterization(str, Enum):
    PLAIN = "plain"
    DERIVATIVE = "derivative"


@dataclass(frozen=True)
class BasisConfig:
    """Dimensions of the three bases and the derivative orders.

    ``r`` is the dimension of the basis the curves are projected on, ``p`` that
    of the gating coefficient functions and ``q`` that of the expert ones.
    """

    r: int = 15
    p: int = 15
    q: int = 15
    order: int = 4
    domain: tuple[float, float] = (0.0, 1.0)
    d1: int = 0
    d2: int = 2

    def curve_basis(self) -> BSplineBasis:
        return make_basis(self.order, self.r, self.domain)

    def gating_basis(self) -> BSplineBasis:
        return make_basis(self.order, self.p, self.domain)

    def expert_basis(self) -> BSplineBasis:
        return make_basis(self.order, self.q, self.domain)

    def operators(self) -> tuple[DerivativeOperator, DerivativeOperator]:
        return (
            derivative_operator(self.gating_basis(), self.d1, self.d2),
            derivative_operator(self.expert_basis(), self.d1, self.d2),
        )

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "p": self.p,
            "q": self.q,
            "order": self.order,
            "domain": None if self.domain is None else list(self.domain),
            "d1": self.d1,
            "d2": self.d2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisConfig":
        d = dict(d)
        if d.get("domain") is not None:
            d["domain"] = tuple(float(v) for v in d["domain"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GatingParams:
    """Free gating blocks for components ``1..K-1``.

    ``coefs[k]`` is ``zeta_k`` (plain) or ``omega_k^(d1)`` (derivative form).
    """

    intercepts: np.ndarray
    coefs: np.ndarray
    parameterization: Parameterization = Parameterization.PLAIN

    def __post_init__(self):
        a = np.asarray(self.intercepts, dtype=float).reshape(-1)
        c = np.asarray(self.coefs, dtype=float)
        if c.ndim != 2 or c.shape[0] != a.size:
            raise ConfigurationError("gating coefs must have shape (K-1, p)")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
            raise NumericInputError("non-finite gating parameters")
        object.__setattr__(self, "intercepts", a)
        object.__setattr__(self, "coefs", c)

    @property
    def K(self) -> int:
        return self.intercepts.size + 1

    @property
    def dim(self) -> int:
        return self.coefs.shape[1]

    @classmethod
    def zeros(cls, K: int, p: int, parameterization=Parameterization.PLAIN) -> "GatingParams":
        return cls(np.zeros(K - 1), np.zeros((K - 1, p)), parameterization)


@dataclass(frozen=True, eq=False)
class ExpertParams:
    """Expert blocks: ``intercepts`` is ``(K, G-1)``, ``coefs`` is ``(K, G-1, q)``."""

    intercepts: np.ndarray
    coefs: np.ndarray
    parameterization: Parameterization = Parameterization.PLAIN

    def __post_init__(self):
        b = np.asarray(self.intercepts, dtype=float)
        c = np.asarray(self.coefs, dtype=float)
        if b.ndim != 2 or c.ndim != 3 or c.shape[:2] != b.shape:
            raise ConfigurationError("expert parameters must be (K, G-1) and (K, G-1, q)")
        if b.shape[1] < 1:
            raise ConfigurationError("experts need G >= 2 classes")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise NumericInputError("non-finite expert parameters")
        object.__setattr__(self, "intercepts", b)
        object.__setattr__(self, "coefs", c)

    @property
    def K(self) -> int:
        return self.intercepts.shape[0]

    @property
    def G(self) -> int:
        return self.intercepts.shape[1] + 1

    @property
    def dim(self) -> int:
        return self.coefs.shape[2]

    @classmethod
    def zeros(cls, K: int, G: int, q: int, parameterization=Parameterization.PLAIN):
        return cls(np.zeros((K, G - 1)), np.zeros((K, G - 1, q)), parameterization)


@dataclass(frozen=True, eq=False)
class FmeModel:
    gating: GatingParams
    experts: ExpertParams
    config: BasisConfig = field(default_factory=BasisConfig)
    operators: Optional[tuple[DerivativeOperator, DerivativeOperator]] = None
    variant: str = "fme-em"

    def __post_init__(self):
        if self.gating.K != self.experts.K:
            raise ConfigurationError(
                f"gating has {self.gating.K} components but there are {self.experts.K} experts"
            )
        if self.gating.parameterization != self.experts.parameterization:
            raise ConfigurationError("gating and expert parameterizations differ")
        if self.parameterization is Parameterization.DERIVATIVE and self.operators is None:
            object.__setattr__(self, "operators", self.config.operators())

    @property
    def parameterization(self) -> Parameterization:
        return self.gating.parameterization

    @property
    def K(self) -> int:
        return self.experts.K

    @property
    def G(self) -> int:
        return self.experts.G


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """Per-observation gating and expert design vectors plus labels in ``1..G``."""

    gating: np.ndarray
    expert: np.ndarray
    labels: np.ndarray
    G: int
    parameterization: Parameterization = Parameterization.PLAIN
    curves: Optional[np.ndarray] = None

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gating, dtype=float))
        e = np.atleast_2d(np.asarray(self.expert, dtype=float))
        y = np.asarray(self.labels, dtype=int).reshape(-1)
        if not (g.shape[0] == e.shape[0] == y.size):
            raise ConfigurationError("design blocks and labels disagree on n")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(e))):
            raise NumericInputError("non-finite design entries")
        if y.size and (y.min() < 1 or y.max() > self.G):
            raise ConfigurationError(f"labels must lie in 1..{self.G}")
        object.__setattr__(self, "gating", g)
        object.__setattr__(self, "expert", e)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.size

    def onehot(self) -> np.ndarray:
        Y = np.zeros((self.n, self.G))
        Y[np.arange(self.n), self.labels - 1] = 1.0
        return Y

    def subset(self, idx) -> "DesignBundle":
        return replace(
            self,
            gating=self.gating[idx],
            expert=self.expert[idx],
            labels=self.labels[idx],
            curves=None if self.curves is None else self.curves[idx],
        )


# --- inference -------------------------------------------------------------


def _as_design(design, dim: int) -> np.ndarray:
    X = np.asarray(design, dtype=float)
    if X.shape[-1] != dim:
        raise ConfigurationError(f"design length {X.shape[-1]} != parameter length {dim}")
    if not np.all(np.isfinite(X)):
        raise NumericInputError("non-finite design")
    return X


def log_softmax_ref(scores: np.ndarray) -> np.ndarray:
    """Log-probabilities of ``[scores, 0]`` along the last axis."""
    full = np.concatenate([scores, np.zeros(scores.shape[:-1] + (1,))], axis=-1)
    return full - logsumexp(full, axis=-1, keepdims=True)


def log_gating_probs(gating: GatingParams, design) -> np.ndarray:
    X = _as_design(design, gating.dim)
    return log_softmax_ref(gating.intercepts + X @ gating.coefs.T)


def gating_probs(gating: GatingParams, design) -> np.ndarray:
    """Mixing proportions ``pi_k`` for one design vector (or a stack of them)."""
    return np.exp(log_gating_probs(gating, design))


def log_expert_probs_all(experts: ExpertParams, design) -> np.ndarray:
    """``(..., K, G)`` log class probabilities of every expert."""
    X = _as_design(design, experts.dim)
    scores = experts.intercepts + np.einsum("...j,kgj->...kg", X, experts.coefs)
    return log_softmax_ref(scores)


def expert_probs(experts: ExpertParams, k: int, design) -> np.ndarray:
    """Class probabilities of expert ``k`` (1-based)."""
    if not 1 <= k <= experts.K:
        raise IndexError(f"expert index {k} outside 1..{experts.K}")
    X = _as_design(design, experts.dim)
    scores = experts.intercepts[k - 1] + X @ experts.coefs[k - 1].T
    return np.exp(log_softmax_ref(scores))


def _check_parameterization(model: FmeModel, parameterization) -> None:
    if parameterization is not None and Parameterization(parameterization) != model.parameterization:
        raise ConfigurationError(
            f"designs are {Parameterization(parameterization).value} but the model is "
            f"{model.parameterization.value}"
        )


def mixture_class_probs(model: FmeModel, gating_design, expert_design, parameterization=None):
    """``sum_k pi_k * P(y | expert k)`` as a class simplex (or a stack of them)."""
    _check_parameterization(model, parameterization)
    lg = log_gating_probs(model.gating, gating_design)
    le = log_expert_probs_all(model.experts, expert_design)
    return np.exp(logsumexp(lg[..., :, None] + le, axis=-2))


def joint_log_terms(model: FmeModel, designs: DesignBundle) -> np.ndarray:
    """``log pi_k(i) + log P(y_i | i, k)`` as an ``(n, K)`` array."""
    _check_parameterization(model, designs.parameterization)
    lg = log_gating_probs(model.gating, designs.gating)
    le = log_expert_probs_all(model.experts, designs.expert)
    return lg + le[np.arange(designs.n), :, designs.labels - 1]


def log_likelihood(model: FmeModel, designs: DesignBundle) -> float:
    if designs.n == 0:
        raise ConfigurationError("empty design bundle")
    return float(logsumexp(joint_log_terms(model, designs), axis=1).sum())


def _l1_blocks(coefs: np.ndarray, op: Optional[DerivativeOperator]) -> float:
    total = float(np.abs(coefs).sum())
    if op is not None:
        total += float(np.abs(coefs @ op.chain.T).sum())
    return total


def penalty_value(model: FmeModel, chi: float, lam: float) -> float:
    """Lasso penalty on the free coefficient blocks; intercepts are never penalized.

    In derivative form each block is the stacked derivative vector, i.e. both
    ``omega^(d1)`` and ``chain @ omega^(d1)`` enter the L1 norm.
    """
    if chi < 0 or lam < 0:
        raise ConfigurationError("penalty weights must be nonnegative")
    op_p = op_q = None
    if model.parameterization is Parameterization.DERIVATIVE:
        op_p, op_q = model.operators
    return chi * _l1_blocks(model.gating.coefs, op_p) + lam * _l1_blocks(
        model.experts.coefs.reshape(-1, model.experts.dim), op_q
    )


@dataclass(frozen=True, eq=False)
class Prediction:
    labels: np.ndarray
    class_probs: np.ndarray
    cluster_probs: np.ndarray


def predict(model: FmeModel, gating_design, expert_design, parameterization=None) -> Prediction:
    """Bayes-rule labels (1-based, ties to the smaller class) with the gating prior."""
    probs = mixture_class_probs(model, gating_design, expert_design, parameterization)
    return Prediction(
        labels=np.argmax(probs, axis=-1) + 1,
        class_probs=probs,
        cluster_probs=gating_probs(model.gating, gating_design),
    )


# --- coefficient functions -------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientCurves:
    """Sampled gating/expert coefficient functions.

    ``gating`` has shape ``(K-1, len(grid))`` and ``experts`` ``(K, G-1, len(grid))``.
    The ``*_d1`` / ``*_d2`` arrays hold the operator derivative samples at
    ``eval_points`` and ``*_d1_grid`` / ``*_d2_grid`` their piecewise-linear
    interpolation onto ``grid``.
    """

    grid: np.ndarray
    eval_points_p: np.ndarray
    eval_points_q: np.ndarray
    gating: np.ndarray
    experts: np.ndarray
    gating_d1: np.ndarray
    gating_d2: np.ndarray
    experts_d1: np.ndarray
    experts_d2: np.ndarray

    def _on_grid(self, samples, points):
        flat = samples.reshape(-1, samples.shape[-1])
        out = np.array([np.interp(self.grid, points, row) for row in flat])
        return out.reshape(samples.shape[:-1] + (self.grid.size,))

    @property
    def gating_d1_grid(self):
        return self._on_grid(self.gating_d1, self.eval_points_p)

    @property
    def gating_d2_grid(self):
        return self._on_grid(self.gating_d2, self.eval_points_p)

    @property
    def experts_d1_grid(self):
        return self._on_grid(self.experts_d1, self.eval_points_q)

    @property
    def experts_d2_grid(self):
        return self._on_grid(self.experts_d2, self.eval_points_q)


def _snap(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.size:
        a[np.abs(a) <= ZERO_TOL * np.abs(a).max()] = 0.0
    return a


def plain_coefficients(model: FmeModel) -> tuple[np.ndarray, np.ndarray]:
    """Basis coefficients ``(zeta, eta)`` regardless of the stored form."""
    if model.parameterization is Parameterization.PLAIN:
        return model.gating.coefs, model.experts.coefs
    op_p, op_q = model.operators
    zeta = model.gating.coefs @ op_p.block_d1_inverse.T
    eta = model.experts.coefs @ op_q.block_d1_inverse.T
    return zeta, eta


def coefficient_functions(model: FmeModel, grid) -> CoefficientCurves:
    grid = np.asarray(grid, dtype=float)
    cfg = model.config
    zeta, eta = plain_coefficients(model)
    op_p, op_q = model.operators if model.operators is not None else cfg.operators()
    gating = zeta @ cfg.gating_basis()(grid).T
    experts = eta @ cfg.expert_basis()(grid).T
    if model.parameterization is Parameterization.DERIVATIVE:
        g1, e1 = model.gating.coefs, model.experts.coefs
        g2 = _snap(g1 @ op_p.chain.T) if g1.size else g1.copy()
        e2 = np.stack([_snap(blk @ op_q.chain.T) for blk in e1]) if e1.size else e1.copy()
    else:
        g1, g2 = zeta @ op_p.block_d1.T, zeta @ op_p.block_d2.T
        e1, e2 = eta @ op_q.block_d1.T, eta @ op_q.block_d2.T
    return CoefficientCurves(
        grid=grid,
        eval_points_p=op_p.eval_points,
        eval_points_q=op_q.eval_points,
        gating=gating,
        experts=experts,
        gating_d1=np.asarray(g1),
        gating_d2=np.asarray(g2),
        experts_d1=np.asarray(e1),
        experts_d2=np.asarray(e2),
    )


def to_derivative_form(model: FmeModel) -> FmeModel:
    """Map a plain model onto the equivalent derivative-form model."""
    if model.parameterization is Parameterization.DERIVATIVE:
        return model
    op_p, op_q = model.config.operators()
    D = Parameterization.DERIVATIVE
    return FmeModel(
        GatingParams(model.gating.intercepts, model.gating.coefs @ op_p.block_d1.T, D),
        ExpertParams(model.experts.intercepts, model.experts.coefs @ op_q.block_d1.T, D),
        model.config,
        (op_p, op_q),
        model.variant,
    )


def to_plain_form(model: FmeModel) -> FmeModel:
    if model.parameterization is Parameterization.PLAIN:
        return model
    zeta, eta = plain_coefficients(model)
    P = Parameterization.PLAIN
    return FmeModel(
        GatingParams(model.gating.intercepts, zeta, P),
        ExpertParams(model.experts.intercepts, eta, P),
        model.config,
        None,
        model.variant,
    )


# --- serialization ---------------------------------------------------------


def model_to_dict(model: FmeModel) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": model.variant,
        "parameterization": model.parameterization.value,
        "K": model.K,
        "G": model.G,
        "basis_config": model.config.to_dict(),
        "gating": {
            "intercepts": model.gating.intercepts.tolist(),
            "coefs": model.gating.coefs.tolist(),
        },
        "experts": {
            "intercepts": model.experts.intercepts.tolist(),
            "coefs": model.experts.coefs.tolist(),
        },
        "operators": None,
    }
    if model.operators is not None:
        doc["operators"] = {
            name: {
                "d1": op.d1,
                "d2": op.d2,
                "eval_points": op.eval_points.tolist(),
                "block_d1": op.block_d1.tolist(),
                "block_d2": op.block_d2.tolist(),
            }
            for name, op in zip(("gating", "expert"), model.operators)
        }
    return doc


def _operator_from_dict(d: dict) -> DerivativeOperator:
    A1 = np.array(d["block_d1"], dtype=float)
    A2 = np.array(d["block_d2"], dtype=float)
    A1_inv = np.linalg.inv(A1)
    return DerivativeOperator(
        d1=int(d["d1"]),
        d2=int(d["d2"]),
        eval_points=np.array(d["eval_points"], dtype=float),
        block_d1=A1,
        block_d2=A2,
        block_d1_inverse=A1_inv,
        chain=A2 @ A1_inv,
        condition_number=float(np.linalg.cond(A1)),
    )


def model_from_dict(doc: dict) -> FmeModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigurationError("not a model document")
    if doc.get("version") != MODEL_VERSION:
        raise ConfigurationError(f"unsupported model document version {doc.get('version')}")
    par = Parameterization(doc["parameterization"])
    K, G = int(doc["K"]), int(doc["G"])
    cfg = BasisConfig.from_dict(doc["basis_config"])
    g_coefs = np.array(doc["gating"]["coefs"], dtype=float).reshape(K - 1, cfg.p)
    gating = GatingParams(np.array(doc["gating"]["intercepts"], dtype=float), g_coefs, par)
    e_coefs = np.array(doc["experts"]["coefs"], dtype=float).reshape(K, G - 1, cfg.q)
    experts = ExpertParams(
        np.array(doc["experts"]["intercepts"], dtype=float).reshape(K, G - 1), e_coefs, par
    )
    ops = None
    if doc.get("operators"):
        ops = (
            _operator_from_dict(doc["operators"]["gating"]),
            _operator_from_dict(doc["operators"]["expert"]),
        )
    return FmeModel(gating, experts, cfg, ops, doc.get("variant", "fme-em"))


def dumps_model(model: FmeModel) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def loads_model(text: str) -> FmeModel:
    return model_from_dict(json.loads(text))
