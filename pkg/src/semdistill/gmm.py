"""Diagonal-covariance Gaussian mixtures.

All density work happens in the log domain. Well-separated components in a
few dozen dimensions underflow float64 long before anything interesting
happens, so products of pdfs are never formed directly.

    q(z) = sum_k pi_k N(z; mu_k, diag(sigma_k^2))

The collision probability int q^2 has a closed form through pairwise
component overlaps, which gives the order-2 Renyi entropy without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError

SCALE_FLOOR = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """K-component mixture with per-dimension standard deviations.

    Parameters
    ----------
    weights : array (K,)
        Mixing proportions, non-negative and summing to one.
    means : array (K, d)
    scales : array (K, d)
        Standard deviations. Values below ``scale_floor`` are raised to it.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    scale_floor: float = SCALE_FLOOR

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        sd = np.array(self.scales, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if sd.ndim == 1:
            sd = sd[:, None]
        if w.size < 1:
            raise ValueError("mixture needs at least one component")
        if mu.shape[0] != w.size or sd.shape != mu.shape or mu.shape[1] < 1:
            raise ValueError(
                f"inconsistent mixture shapes: weights {w.shape}, "
                f"means {mu.shape}, scales {sd.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be a probability vector (sum={w.sum()!r})")
        if not self.scale_floor > 0:
            raise ValueError("scale_floor must be positive")
        sd = np.maximum(sd, self.scale_floor)
        for name, arr in (("weights", w), ("means", mu), ("scales", sd)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass(frozen=True)
class CollisionMatrix:
    """Pairwise overlaps N(mu_i; mu_j, Sigma_i + Sigma_j), kept in log form."""

    log_entries: np.ndarray

    @property
    def entries(self) -> np.ndarray:
        return np.exp(self.log_entries)


def _as_points(mixture: GaussianMixture, z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != mixture.dim:
        raise DimensionError(
            f"dimension mismatch: mixture has d={mixture.dim}, got points of shape {z.shape}"
        )
    return z2, single


def component_log_pdf(mixture: GaussianMixture, z) -> np.ndarray:
    """log N(z_n; mu_k, diag sigma_k^2) for every point and component, shape (n, K)."""
    z2, _ = _as_points(mixture, z)
    u = (z2[:, None, :] - mixture.means[None, :, :]) / mixture.scales[None, :, :]
    return (
        -0.5 * np.sum(u * u, axis=-1)
        - np.sum(np.log(mixture.scales), axis=-1)[None, :]
        - 0.5 * mixture.dim * LOG_2PI
    )


def log_density(mixture: GaussianMixture, z):
    """log q(z). Accepts a single point (d,) or a batch (n, d)."""
    z2, single = _as_points(mixture, z)
    out = logsumexp(component_log_pdf(mixture, z2) + mixture.log_weights[None, :], axis=1)
    return float(out[0]) if single else out


def responsibilities(mixture: GaussianMixture, z) -> np.ndarray:
    """Posterior component probabilities for each point, shape (n, K)."""
    z2, _ = _as_points(mixture, z)
    lc = component_log_pdf(mixture, z2) + mixture.log_weights[None, :]
    return np.exp(lc - logsumexp(lc, axis=1, keepdims=True))


def collision_matrix(mixture: GaussianMixture) -> CollisionMatrix:
    var = mixture.scales**2
    pair_var = var[:, None, :] + var[None, :, :]
    diff = mixture.means[:, None, :] - mixture.means[None, :, :]
    log_k = -0.5 * np.sum(diff * diff / pair_var + np.log(pair_var), axis=-1)
    log_k -= 0.5 * mixture.dim * LOG_2PI
    # exact symmetry regardless of summation order
    log_k = 0.5 * (log_k + log_k.T)
    return CollisionMatrix(log_k)


def renyi2_entropy(mixture: GaussianMixture) -> float:
    """H_2(q) = -log(pi^T K pi), with the quadratic form summed by log-sum-exp.

    Cost is O(K^2 d).
    """
    lw = mixture.log_weights
    terms = lw[:, None] + lw[None, :] + collision_matrix(mixture).log_entries
    return float(-logsumexp(terms))


def mixture_mean(mixture: GaussianMixture) -> np.ndarray:
    return mixture.weights @ mixture.means


def sample(mixture: GaussianMixture, rng_seed, n: int) -> np.ndarray:
    """Draw ``n`` points, shape (n, d).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    comp = rng.choice(mixture.n_components, size=n, p=mixture.weights)
    eps = rng.standard_normal((n, mixture.dim))
    return mixture.means[comp] + mixture.scales[comp] * eps


def permuted(mixture: GaussianMixture, order) -> GaussianMixture:
    order = np.asarray(order)
    return GaussianMixture(
        mixture.weights[order], mixture.means[order], mixture.scales[order], mixture.scale_floor
    )
