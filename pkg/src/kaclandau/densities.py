"""Gaussian mixtures on R^(3N) with closed-form derivatives.

These are the analytic test densities for all dissipation checks: strictly
positive, rapidly decaying, exactly marginalizable and samplable, with
gradients, Hessians and the third-derivative contractions needed by the
Gateaux calculus available per sample batch.
"""

import math
from dataclasses import dataclass

import numpy as np

from .seeding import MC_FUNCTIONAL, substream


@dataclass
class FunctionalEstimate:
    """Monte Carlo value with its standard error."""

    value: float
    std_error: float
    n_samples: int

    def __add__(self, other):
        if isinstance(other, FunctionalEstimate):
            return FunctionalEstimate(self.value + other.value,
                                      math.hypot(self.std_error, other.std_error),
                                      min(self.n_samples, other.n_samples))
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, FunctionalEstimate):
            return FunctionalEstimate(self.value - other.value,
                                      math.hypot(self.std_error, other.std_error),
                                      min(self.n_samples, other.n_samples))
        return NotImplemented


def estimate_from_samples(values) -> FunctionalEstimate:
    values = np.asarray(values, dtype=float)
    n = values.size
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return FunctionalEstimate(float(values.mean()), se, n)


class GaussianMixture:
    """Mixture sum_k w_k N(mu_k, Sigma_k) on R^d."""

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        if self.means.ndim != 2:
            raise ValueError("means must be (K, d)")
        self.n_components, self.dim = self.means.shape
        if self.weights.shape != (self.n_components,):
            raise ValueError("weights shape mismatch")
        if self.covs.shape != (self.n_components, self.dim, self.dim):
            raise ValueError("covs shape mismatch")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        self.weights = self.weights / self.weights.sum()
        self._chol = np.linalg.cholesky(self.covs)  # raises if not SPD
        self.precisions = np.stack([np.linalg.inv(c) for c in self.covs])
        # log normalization constants
        logdets = 2.0 * np.log(np.einsum("kii->ki", self._chol)).sum(axis=1)
        self._lognorm = -0.5 * (self.dim * np.log(2.0 * np.pi) + logdets)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["covs"])

    # -- core evaluation ----------------------------------------------------

    def _component_logpdfs(self, V):
        """Log densities of each component, shape (n, K)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        y = V[:, None, :] - self.means[None, :, :]          # (n, K, d)
        u = np.einsum("kab,nkb->nka", self.precisions, y)  # precision @ y
        quad = np.einsum("nka,nka->nk", y, u)
        return -0.5 * quad + self._lognorm[None, :], u

    def log_density(self, V):
        scalar = np.asarray(V).ndim == 1
        lp, _ = self._component_logpdfs(V)
        lw = np.log(self.weights)[None, :]
        m = np.max(lp + lw, axis=1, keepdims=True)
        out = (m + np.log(np.sum(np.exp(lp + lw - m), axis=1, keepdims=True)))[:, 0]
        return float(out[0]) if scalar else out

    def pdf(self, V):
        return np.exp(self.log_density(V))

    def responsibilities(self, V):
        """Posterior weights w_k phi_k / g, shape (n, K), plus u_k = P_k (V - mu_k)."""
        lp, u = self._component_logpdfs(V)
        lw = np.log(self.weights)[None, :]
        m = np.max(lp + lw, axis=1, keepdims=True)
        e = np.exp(lp + lw - m)
        return e / e.sum(axis=1, keepdims=True), u

    def grad_log(self, V):
        scalar = np.asarray(V).ndim == 1
        w, u = self.responsibilities(V)
        s = -np.einsum("nk,nka->na", w, u)
        return s[0] if scalar else s

    def grad(self, V):
        g = np.exp(self.log_density(np.atleast_2d(V)))
        s = np.atleast_2d(self.grad_log(np.atleast_2d(V)))
        out = g[:, None] * s
        return out[0] if np.asarray(V).ndim == 1 else out

    def hessian_log(self, V):
        """Hessian of log g, shape (n, d, d)."""
        scalar = np.asarray(V).ndim == 1
        w, u = self.responsibilities(V)
        s = -np.einsum("nk,nka->na", w, u)
        h_over_g = (np.einsum("nk,nka,nkb->nab", w, u, u)
                    - np.einsum("nk,kab->nab", w, self.precisions))
        out = h_over_g - np.einsum("na,nb->nab", s, s)
        return out[0] if scalar else out

    def hessian(self, V):
        g = np.exp(self.log_density(np.atleast_2d(V)))
        w, u = self.responsibilities(np.atleast_2d(V))
        h_over_g = (np.einsum("nk,nka,nkb->nab", w, u, u)
                    - np.einsum("nk,kab->nab", w, self.precisions))
        out = g[:, None, None] * h_over_g
        return out[0] if np.asarray(V).ndim == 1 else out

    def third_contraction(self, V, W):
        """sum_{a,b} W_ab d^3 g/(dV_a dV_b dV_c) / g  for symmetric W per point.

        W has shape (n, d, d); returns (n, d).  Used for gradients of
        second-order operators without materializing the full third tensor.
        """
        w, u = self.responsibilities(np.atleast_2d(V))
        wu = np.einsum("nab,nkb->nka", W, u)                       # W u_k
        uwu = np.einsum("nka,nka->nk", u, wu)                      # u^T W u
        trwp = np.einsum("nab,kab->nk", W, self.precisions)       # W : P_k
        pwu = np.einsum("kab,nkb->nka", self.precisions, wu)      # P_k W u_k
        return (np.einsum("nk,nka->na", w * (trwp - uwu), u)
                + 2.0 * np.einsum("nk,nka->na", w, pwu))

    def third_block(self, V, block):
        """Full third derivative of g over g restricted to one 3-coordinate block.

        Returns (n, 3, 3, 3) for coordinates [3*block, 3*block+3).
        """
        w, u = self.responsibilities(np.atleast_2d(V))
        sl = slice(3 * block, 3 * block + 3)
        ub = u[:, :, sl]
        pb = self.precisions[:, sl, sl]
        t = -np.einsum("nka,nkb,nkc->nkabc", ub, ub, ub)
        t = t + np.einsum("nkc,kab->nkabc", ub, pb)
        t = t + np.einsum("nka,kbc->nkabc", ub, pb)
        t = t + np.einsum("nkb,kac->nkabc", ub, pb)
        return np.einsum("nk,nkabc->nabc", w, t)

    # -- structure ----------------------------------------------------------

    def marginal(self, m: int) -> "GaussianMixture":
        """Marginal over the first m particles (first 3m coordinates)."""
        if self.dim % 3 != 0:
            raise ValueError("marginal defined for densities on R^(3N)")
        n_part = self.dim // 3
        if not 1 <= m <= n_part:
            raise ValueError("m out of range")
        d = 3 * m
        return GaussianMixture(self.weights, self.means[:, :d], self.covs[:, :d, :d])

    def mean(self):
        return self.weights @ self.means

    def second_moment(self):
        """E |V|^2."""
        mu2 = np.einsum("k,ka,ka->", self.weights, self.means, self.means)
        tr = np.einsum("k,kaa->", self.weights, self.covs)
        return float(mu2 + tr)

    def covariance(self):
        m = self.mean()
        ex2 = (np.einsum("k,kab->ab", self.weights, self.covs)
               + np.einsum("k,ka,kb->ab", self.weights, self.means, self.means))
        return ex2 - np.outer(m, m)

    def affine(self, scale: float, shift) -> "GaussianMixture":
        shift = np.asarray(shift, dtype=float)
        return GaussianMixture(self.weights,
                               scale * self.means + shift[None, :],
                               scale**2 * self.covs)

    def linear_map(self, R) -> "GaussianMixture":
        """Pushforward under V -> R V (law of the mapped variable)."""
        R = np.asarray(R, dtype=float)
        return GaussianMixture(self.weights,
                               self.means @ R.T,
                               np.einsum("ab,kbc,dc->kad", R, self.covs, R))

    def symmetrize_particles(self) -> "GaussianMixture":
        """Average over all particle-block permutations of the components."""
        if self.dim % 3 != 0:
            raise ValueError("symmetrization defined for densities on R^(3N)")
        n_part = self.dim // 3
        from itertools import permutations
        perms = list(permutations(range(n_part)))
        ws, mus, covs = [], [], []
        for perm in perms:
            idx = np.concatenate([np.arange(3 * p, 3 * p + 3) for p in perm])
            for k in range(self.n_components):
                ws.append(self.weights[k] / len(perms))
                mus.append(self.means[k][idx])
                covs.append(self.covs[k][np.ix_(idx, idx)])
        return GaussianMixture(ws, mus, covs)

    # -- sampling and Monte Carlo functionals -------------------------------

    def sample(self, n: int, rng: np.random.Generator):
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            m = ks == k
            if np.any(m):
                out[m] = self.means[k] + z[m] @ self._chol[k].T
        return out

    def entropy_mc(self, n: int, seed: int = 0) -> FunctionalEstimate:
        """(1/M) int g log g by importance sampling from g, M = dim/3 particles."""
        if n < 2:
            raise ValueError("need n >= 2 samples")
        m_particles = self._n_particles()
        rng = substream(seed, MC_FUNCTIONAL, 0)
        V = self.sample(n, rng)
        vals = self.log_density(V) / m_particles
        return estimate_from_samples(vals)

    def fisher_mc(self, n: int, seed: int = 0) -> FunctionalEstimate:
        """(1/M) int g |grad log g|^2 by importance sampling from g."""
        if n < 2:
            raise ValueError("need n >= 2 samples")
        m_particles = self._n_particles()
        rng = substream(seed, MC_FUNCTIONAL, 1)
        V = self.sample(n, rng)
        s = self.grad_log(V)
        vals = np.einsum("na,na->n", s, s) / m_particles
        return estimate_from_samples(vals)

    def _n_particles(self) -> int:
        if self.dim % 3 != 0:
            raise ValueError("renormalized functionals need dim divisible by 3")
        return self.dim // 3


def standard_normal_mixture(dim: int) -> GaussianMixture:
    return GaussianMixture([1.0], [np.zeros(dim)], [np.eye(dim)])


def isotropic_gaussian(dim: int, sigma2: float, mean=None) -> GaussianMixture:
    mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    return GaussianMixture([1.0], [mu], [sigma2 * np.eye(dim)])


def tensor_power(q: GaussianMixture, n_particles: int) -> GaussianMixture:
    """Product density q^(x n) on R^(3n) from a mixture q on R^3."""
    import itertools
    d = q.dim
    ws, mus, covs = [], [], []
    for combo in itertools.product(range(q.n_components), repeat=n_particles):
        ws.append(np.prod([q.weights[k] for k in combo]))
        mus.append(np.concatenate([q.means[k] for k in combo]))
        c = np.zeros((d * n_particles, d * n_particles))
        for i, k in enumerate(combo):
            c[i * d:(i + 1) * d, i * d:(i + 1) * d] = q.covs[k]
        covs.append(c)
    return GaussianMixture(ws, mus, covs)


def normalize_to_assumption(g: GaussianMixture) -> GaussianMixture:
    """Affinely rescale a density on R^3 to zero mean and E|v|^2 = 3."""
    if g.dim != 3:
        raise ValueError("normalization applies to one-particle densities on R^3")
    mu = g.mean()
    centered = g.affine(1.0, -mu)
    e2 = centered.second_moment()
    if e2 <= 0:
        raise ValueError("degenerate density: zero second moment")
    return centered.affine(float(np.sqrt(3.0 / e2)), np.zeros(3))


def pair_rotation_matrix() -> np.ndarray:
    """Orthogonal map (v1, v2) -> ((v1 - v2)/sqrt2, (v1 + v2)/sqrt2) on R^6."""
    eye = np.eye(3)
    return np.block([[eye, -eye], [eye, eye]]) / np.sqrt(2.0)


def random_symmetric_mixture(n_particles: int, rng: np.random.Generator,
                             n_components: int = 2, mean_spread: float = 0.7,
                             cov_jitter: float = 0.35) -> GaussianMixture:
    """Random exchange-symmetric mixture on R^(3N) with full cross-particle covariance."""
    d = 3 * n_particles
    ws = rng.dirichlet(np.full(n_components, 3.0))
    mus = rng.normal(scale=mean_spread, size=(n_components, d))
    covs = []
    for _ in range(n_components):
        a = rng.normal(size=(d, d)) * cov_jitter
        covs.append(np.eye(d) * rng.uniform(0.6, 1.3) + a @ a.T / d)
    g = GaussianMixture(ws, mus, covs)
    return g.symmetrize_particles()
