"""Small random functional classification problems shared by the test modules."""

import numpy as np

from fmeclf.data import FunctionalDataset
from fmeclf.model import BasisConfig

SMALL_BASIS = BasisConfig(r=6, p=6, q=6, order=4, domain=(0.0, 1.0))


def random_dataset(seed, n=60, G=3, T=40, dim=6, noise=0.3, label_noise=0.4):
    """Curves from two latent groups, labels from group-specific logits with random flips.

    The flips keep the classes overlapping, so maximum-likelihood fits exist.
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, T)
    basis = BasisConfig(r=dim, p=dim, q=dim).curve_basis()
    group = rng.integers(0, 2, n)
    centers = rng.normal(scale=2.0, size=(2, dim))
    coeffs = centers[group] + rng.normal(size=(n, dim))
    curves = coeffs @ basis(grid).T + noise * rng.normal(size=(n, T))
    w = rng.normal(size=(2, G, dim)) * 0.2
    s = np.einsum("nj,ngj->ng", coeffs, w[group])
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    y = np.array([rng.choice(G, p=pi) for pi in p])
    flip = rng.random(n) < label_noise
    y = np.where(flip, rng.integers(0, G, n), y)
    # every class present
    y[:G] = np.arange(G)
    return FunctionalDataset(grid, curves, y + 1, G, clusters=group + 1)
