"""Functional datasets: file format, synthetic generator, splitting and metrics.

The ``matrix_csv`` layout is::

    label,t_1,t_2,...,t_T
    3,x_1,x_2,...,x_T
    ...

UTF-8, comma separated, LF line endings, no quoting; numbers are written with
17 significant digits so that a save/load round trip is exact.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import BSplineBasis, make_basis, project_curves
from .exceptions import ConfigurationError, DataError


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """``n`` curves sampled on a common grid with class labels in ``1..G``."""

    grid: np.ndarray
    curves: np.ndarray
    labels: np.ndarray
    G: int
    clusters: Optional[np.ndarray] = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).reshape(-1)
        curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        labels = np.asarray(self.labels).reshape(-1)
        if labels.size and not np.all(labels == np.round(labels)):
            raise DataError("labels must be integers")
        labels = labels.astype(int)
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise DataError("grid must be strictly increasing with at least two points")
        if curves.shape != (labels.size, grid.size):
            raise DataError(f"curves have shape {curves.shape}, expected ({labels.size}, {grid.size})")
        if labels.size < 1:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(curves)) or not np.all(np.isfinite(grid)):
            raise DataError("non-finite samples")
        if int(self.G) < 2 or labels.min() < 1 or labels.max() > int(self.G):
            raise DataError(f"labels must lie in 1..{self.G} with G >= 2")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "G", int(self.G))
        if self.clusters is not None:
            object.__setattr__(self, "clusters", np.asarray(self.clusters, dtype=int).reshape(-1))

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    def subset(self, idx) -> "FunctionalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            curves=self.curves[idx],
            labels=self.labels[idx],
            clusters=None if self.clusters is None else self.clusters[idx],
        )


# --- matrix_csv ------------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.17g" % x


def dumps_dataset(dataset: FunctionalDataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(["label"] + [_fmt(t) for t in dataset.grid]) + "\n")
    for y, row in zip(dataset.labels, dataset.curves):
        buf.write(",".join([str(int(y))] + [_fmt(v) for v in row]) + "\n")
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: FunctionalDataset, path) -> None:
    atomic_write(path, dumps_dataset(dataset))


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col}: non-numeric cell {cell!r}") from None
    if not np.isfinite(v):
        raise DataError(f"row {row}, column {col}: non-finite value {cell!r}")
    return v


def loads_dataset(text: str, G: Optional[int] = None) -> FunctionalDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError("empty file")
    header = lines[0].rstrip("\r").split(",")
    if header[0].strip() != "label":
        raise DataError("row 1, column 1: header must start with 'label'")
    grid = np.array([_parse_float(c, 1, j + 2) for j, c in enumerate(header[1:])])
    if grid.size < 2:
        raise DataError("row 1: header declares fewer than two grid values")
    if np.unique(grid).size != grid.size:
        raise DataError("row 1: duplicate grid values")
    if np.any(np.diff(grid) <= 0):
        raise DataError("row 1: grid values must be increasing")
    labels, curves = [], []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split(",")
        if len(cells) != grid.size + 1:
            raise DataError(f"row {i}: expected {grid.size + 1} cells, found {len(cells)}")
        try:
            y = int(cells[0])
        except ValueError:
            raise DataError(f"row {i}, column 1: label {cells[0]!r} is not an integer") from None
        if y < 1 or (G is not None and y > G):
            raise DataError(f"row {i}, column 1: label {y} outside 1..{G if G else 'G'}")
        labels.append(y)
        curves.append([_parse_float(c, i, j + 2) for j, c in enumerate(cells[1:])])
    if not labels:
        raise DataError("file has no data rows")
    labels = np.array(labels)
    G = int(G) if G is not None else max(2, int(labels.max()))
    return FunctionalDataset(grid, np.array(curves), labels, G)


def load_dataset(path, format: str = "matrix_csv", G: Optional[int] = None) -> FunctionalDataset:
    if format != "matrix_csv":
        raise ConfigurationError(f"unsupported dataset format {format!r}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise DataError(f"{path} is not valid UTF-8") from None
    return loads_dataset(text, G)


# --- metrics and splitting -------------------------------------------------


def correct_classification_rate(predicted, actual) -> float:
    predicted = np.asarray(predicted).reshape(-1)
    actual = np.asarray(actual).reshape(-1)
    if predicted.size != actual.size:
        raise ValueError(f"length mismatch: {predicted.size} vs {actual.size}")
    if actual.size == 0:
        raise ValueError("empty label vectors")
    return float(np.mean(predicted == actual))


def split(dataset: FunctionalDataset, test_fraction: float, seed: int = 0):
    """Label-stratified train/test split; deterministic for a given seed."""
    n = dataset.n
    if not 0 < test_fraction < 1 or n * min(test_fraction, 1 - test_fraction) < 1:
        raise ConfigurationError(f"degenerate test fraction {test_fraction} for n={n}")
    rng = np.random.default_rng(seed)
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    classes = np.unique(dataset.labels)
    members = {g: rng.permutation(np.flatnonzero(dataset.labels == g)) for g in classes}
    quota = {g: members[g].size * n_test / n for g in classes}
    take = {g: int(np.floor(quota[g])) for g in classes}
    # largest remainders get the leftover slots; ties broken at random
    short = n_test - sum(take.values())
    order = sorted(classes, key=lambda g: (-(quota[g] - take[g]), rng.random()))
    for g in order[:short]:
        take[g] += 1
    test = np.sort(np.concatenate([members[g][: take[g]] for g in classes]))
    train = np.setdiff1d(np.arange(n), test)
    return dataset.subset(train), dataset.subset(test)


# --- synthetic generator ---------------------------------------------------

_ALPHA_NODES = ((0.0, -4.0), (0.5, 4.0), (1.0, -2.0))

_RAMP = ((0.0, -1.0), (1.0, 1.0))
_TENT = ((0.0, -0.5), (0.5, 1.0), (1.0, -0.5))
_NEG_RAMP = tuple((t, -v) for t, v in _RAMP)
_NEG_TENT = tuple((t, -v) for t, v in _TENT)

# Smooth random shapes added to every curve; they carry the class signal.
_FACTOR_NODES = (_RAMP, _TENT)

# Expert coefficient-function shapes before scaling, index [cluster][class].
# The second cluster flips every sign, so no single linear logit fits both.
_BETA_NODES = ((_RAMP, _TENT), (_NEG_RAMP, _NEG_TENT))


@dataclass(frozen=True)
class SimConfig:
    """Generator settings; defaults reproduce the benchmark's shape (G=3, K=2).

    Curve coefficients are ``mean_k + sum_l xi_l f_l + e`` with
    ``xi_l ~ N(0, factor_var)``, ``f_l`` the basis coefficients of the
    piecewise-linear ``factor_nodes`` shapes and ``e ~ N(0, coef_var I)``.
    ``expert_scale`` multiplies the expert coefficient functions. With
    ``center_experts`` each expert's intercepts are shifted so that its
    cluster's mean curve scores zero; ``expert_intercepts`` is added on top.
    """

    n_train: int = 300
    n_test: int = 200
    noise_var: float = 1.0
    grid_len: int = 100
    domain: tuple[float, float] = (0.0, 1.0)
    r: int = 15
    order: int = 4
    coef_var: float = 0.5
    factor_var: float = 4.0
    factor_nodes: tuple = _FACTOR_NODES
    bump_amplitude: float = 10.0
    bump_center: float = 0.5
    bump_width: float = 0.2
    alpha_intercept: float = 0.0
    alpha_nodes: tuple = _ALPHA_NODES
    expert_scale: float = 30.0
    expert_intercepts: tuple = ((0.0, 0.0), (0.0, 0.0))
    center_experts: bool = True
    beta_nodes: tuple = _BETA_NODES
    seed: int = 0

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ConfigurationError("noise_var must be positive")
        if self.coef_var < 0 or self.factor_var < 0:
            raise ConfigurationError("variances must be nonnegative")
        lo, hi = self.domain
        nodes = [t for t, _ in self.alpha_nodes]
        nodes += [t for cl in self.beta_nodes for fn in cl for t, _ in fn]
        nodes += [t for fn in self.factor_nodes for t, _ in fn]
        if min(nodes) < lo or max(nodes) > hi:
            raise ConfigurationError("coefficient-function nodes must lie inside the domain")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_train and n_test must be positive")

    @property
    def K(self) -> int:
        return len(self.beta_nodes)

    @property
    def G(self) -> int:
        return len(self.beta_nodes[0]) + 1


def _piecewise_linear(nodes, t) -> np.ndarray:
    x = np.array([a for a, _ in nodes], dtype=float)
    y = np.array([b for _, b in nodes], dtype=float)
    return np.interp(t, x, y)


def integrate_against_basis(basis: BSplineBasis, nodes) -> np.ndarray:
    """``integral b_j(t) f(t) dt`` for a piecewise-linear ``f`` given by nodes.

    Gauss-Legendre on every span between knots and nodes is exact here.
    """
    breaks = np.union1d(basis.breakpoints(), [a for a, _ in nodes])
    lo, hi = basis.domain
    breaks = breaks[(breaks >= lo) & (breaks <= hi)]
    x, w = np.polynomial.legendre.leggauss(basis.order + 1)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    half = 0.5 * (breaks[1:] - breaks[:-1])
    t = (np.outer(half, x) + mid[:, None]).ravel()
    wt = np.outer(half, w).ravel()
    return (basis(t) * (wt * _piecewise_linear(nodes, t))[:, None]).sum(axis=0)


@dataclass(frozen=True, eq=False)
class SimTruth:
    """Generative parameters expressed on the curve basis.

    A curve with coefficients ``c`` has gating scores
    ``gating_intercepts + gating_weights @ c`` and expert-``k`` class scores
    ``expert_intercepts[k] + expert_weights[k] @ c`` (reference category last).
    """

    config: SimConfig
    basis: BSplineBasis
    cluster_means: np.ndarray
    factors: np.ndarray
    gating_intercepts: np.ndarray
    gating_weights: np.ndarray
    expert_intercepts: np.ndarray
    expert_weights: np.ndarray

    def class_probs(self, coeffs: np.ndarray) -> np.ndarray:
        """Mixture class probabilities for curve coefficient rows ``coeffs``."""
        from .model import log_softmax_ref
        from scipy.special import logsumexp

        lg = log_softmax_ref(self.gating_intercepts + coeffs @ self.gating_weights.T)
        se = self.expert_intercepts + np.einsum("nj,kgj->nkg", coeffs, self.expert_weights)
        le = log_softmax_ref(se)
        return np.exp(logsumexp(lg[:, :, None] + le, axis=1))

    def oracle_predict(self, dataset: FunctionalDataset) -> np.ndarray:
        """Bayes rule with the true parameters applied to the projected observed curves."""
        coeffs = project_curves(self.basis, dataset.grid, dataset.curves)
        return np.argmax(self.class_probs(coeffs), axis=1) + 1

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "generator": "fmeclf-sim",
            "version": 1,
            "n_train": cfg.n_train,
            "n_test": cfg.n_test,
            "noise_var": cfg.noise_var,
            "seed": cfg.seed,
            "grid_len": cfg.grid_len,
            "domain": list(cfg.domain),
            "r": cfg.r,
            "order": cfg.order,
            "coef_var": cfg.coef_var,
            "factor_var": cfg.factor_var,
            "factor_nodes": [[list(p) for p in fn] for fn in cfg.factor_nodes],
            "alpha_nodes": [list(p) for p in cfg.alpha_nodes],
            "beta_nodes": [[[list(p) for p in fn] for fn in cl] for cl in cfg.beta_nodes],
            "expert_scale": cfg.expert_scale,
            "cluster_means": self.cluster_means.tolist(),
            "factors": self.factors.tolist(),
            "gating_intercepts": self.gating_intercepts.tolist(),
            "gating_weights": self.gating_weights.tolist(),
            "expert_intercepts": self.expert_intercepts.tolist(),
            "expert_weights": self.expert_weights.tolist(),
        }


def make_truth(config: SimConfig) -> SimTruth:
    basis = make_basis(config.order, config.r, config.domain)
    g = basis.greville()
    bump = config.bump_amplitude * np.exp(
        -(((g - config.bump_center) / config.bump_width) ** 2)
    )
    means = np.stack([bump, -bump])
    fine = np.linspace(config.domain[0], config.domain[1], 20 * config.r)
    factors = project_curves(
        basis, fine, np.array([_piecewise_linear(fn, fine) for fn in config.factor_nodes])
    ).reshape(len(config.factor_nodes), basis.dim)
    gw = integrate_against_basis(basis, config.alpha_nodes)[None, :]
    ew = np.array(
        [
            [config.expert_scale * integrate_against_basis(basis, fn) for fn in cluster]
            for cluster in config.beta_nodes
        ]
    )
    ei = np.array(config.expert_intercepts, dtype=float)
    if config.center_experts:
        ei = ei - np.einsum("kgj,kj->kg", ew, means[: ew.shape[0]])
    return SimTruth(
        config=config,
        basis=basis,
        cluster_means=means,
        factors=factors,
        gating_intercepts=np.array([config.alpha_intercept]),
        gating_weights=gw,
        expert_intercepts=ei,
        expert_weights=ew,
    )


@dataclass(frozen=True, eq=False)
class Latent:
    """Unobserved quantities behind a simulated sample."""

    coeffs: np.ndarray
    gating_probs: np.ndarray
    class_probs: np.ndarray


def draw(truth: SimTruth, n: int, grid: np.ndarray, rng: np.random.Generator):
    """Draw ``n`` labelled noisy curves; returns ``(dataset, latent)``."""
    cfg = truth.config
    from .model import log_softmax_ref

    group = rng.integers(0, truth.cluster_means.shape[0], size=n)
    xi = np.sqrt(cfg.factor_var) * rng.standard_normal((n, truth.factors.shape[0]))
    coeffs = (
        truth.cluster_means[group]
        + xi @ truth.factors
        + np.sqrt(cfg.coef_var) * rng.standard_normal((n, truth.basis.dim))
    )
    pg = np.exp(log_softmax_ref(truth.gating_intercepts + coeffs @ truth.gating_weights.T))
    z = np.array([rng.choice(pg.shape[1], p=p) for p in pg])
    se = truth.expert_intercepts[z] + np.einsum("nj,ngj->ng", coeffs, truth.expert_weights[z])
    py = np.exp(log_softmax_ref(se))
    y = np.array([rng.choice(py.shape[1], p=p) for p in py]) + 1
    clean = coeffs @ truth.basis(grid).T
    noisy = clean + np.sqrt(cfg.noise_var) * rng.standard_normal(clean.shape)
    ds = FunctionalDataset(grid, noisy, y, cfg.G, clusters=z + 1)
    return ds, Latent(coeffs, pg, truth.class_probs(coeffs))


def simulate(config: SimConfig = SimConfig()):
    """Draw train and test sets from the generator.

    Returns
    -------
    train, test : FunctionalDataset
        Both carry the latent cluster labels in ``clusters``.
    truth : SimTruth
    """
    truth = make_truth(config)
    grid = np.linspace(config.domain[0], config.domain[1], config.grid_len)
    rng = np.random.default_rng(config.seed)
    train, _ = draw(truth, config.n_train, grid, rng)
    test, _ = draw(truth, config.n_test, grid, rng)
    return train, test, truth
