"""Closed-form and semi-analytic references for the particle system.

Three oracles ground the simulator against independent mathematics:

* the two-particle system in relative coordinates z = v1 - v2 lives on the
  sphere |z| = r0 (the projection makes the noise tangential and the Ito
  drift -4 a(r0) z / r0^2 exactly compensates the curvature), with degree-1
  angular autocorrelation E[to_unit(z_t) . to_unit(z_0)] = exp(-lambda t),
  lambda = 4 a(r0) / r0^2;

* for the quadratic potential (a = r^2) the one-particle second-moment
  matrix obeys the closed linear system dS/dt = 4 tr(S) I - 12 S in the
  mean-field limit: the trace is conserved and the anisotropic part decays
  at rate 12.  At finite N the exchangeable pair correlation shifts the
  curve by (S0 - X(t))/N, with X the mean-field solution;

* the standard Gaussian product law is stationary: the projection
  annihilates the radial score, so every dissipation integrand vanishes.

Derived constants are frozen only after a symbolic route and an independent
numeric route (eigenvalue solve, Gauss-Hermite quadrature) agree to at
least four significant digits; tests enforce this.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import PotentialSpec, a_batch, eval_a
from .seeding import ORACLE, substream
from .simulator import EnsembleResult, _pair_projected

MAXWELL_RELAX_RATE = 12.0   # decay rate of the anisotropic covariance part


# ---------------------------------------------------------------------------
# N = 2 sphere oracle
# ---------------------------------------------------------------------------

def sphere_rate(spec: PotentialSpec, r0: float) -> float:
    """Angular autocorrelation decay rate of the relative velocity."""
    return 4.0 * float(eval_a(r0, spec)) / r0**2


def laplace_beltrami_degree1_eigenvalue(n_grid: int = 3000) -> float:
    """First nonzero eigenvalue of the unit-sphere Laplacian (expect 2.0),
    the numeric route backing the frozen angular decay rate.

    Discretizes the axially symmetric operator -d/dx [(1 - x^2) d/dx] on the
    Legendre variable x = cos(theta); the endpoints are natural (the flux
    coefficient vanishes), the grid measure is uniform, and the spectrum
    approximates l (l + 1) = 0, 2, 6, ...
    """
    def eig(n):
        x = np.linspace(-1.0, 1.0, n + 1)
        h = x[1] - x[0]
        xm = (x[:-1] + x[1:]) / 2.0
        c = (1.0 - xm**2) / h**2      # flux coefficients at midpoints
        main = np.zeros(n + 1)
        main[:-1] += c
        main[1:] += c
        mat = np.diag(main) - np.diag(c, 1) - np.diag(c, -1)
        return float(np.linalg.eigvalsh(mat)[1])

    # endpoint treatment is first order in 1/n; one Richardson step removes it
    return 2.0 * eig(n_grid) - eig(n_grid // 2)


def reference_sphere_autocorrelation(rate: float, r0: float, t_grid, n_paths: int,
                                     seed: int = 0, dt: float = 1e-4):
    """Dense-time reference simulation of tangential diffusion on the sphere.

    Integrates dz = -(rate) z dt + sqrt(rate r0^2) Pi(z) dW with projection
    back to the sphere each step; an independent check of the exponential
    decay before the rate is trusted in acceptance fits.
    """
    rng = substream(seed, ORACLE, 1)
    z0 = rng.standard_normal((n_paths, 3))
    z0 *= r0 / np.linalg.norm(z0, axis=1)[:, None]
    z = z0.copy()
    t_grid = np.asarray(t_grid, dtype=float)
    out = np.empty(t_grid.size)
    t = 0.0
    k = 0
    sig = np.sqrt(rate) * r0
    while k < t_grid.size:
        while t < t_grid[k] - 1e-12:
            g = rng.standard_normal((n_paths, 3)) * np.sqrt(dt)
            zh = z / np.linalg.norm(z, axis=1)[:, None]
            proj = g - zh * np.einsum("nc,nc->n", zh, g)[:, None]
            z = z - rate * z * dt + sig * proj
            z *= r0 / np.linalg.norm(z, axis=1)[:, None]
            t += dt
        out[k] = np.mean(np.einsum("nc,nc->n", z, z0)) / r0**2
        k += 1
    return out


@dataclass
class SphereReport:
    r0: float
    rate_predicted: float
    rate_fitted: float
    rate_fit_sigma: float
    momentum_max_drift: float
    radius_sq_rel_drift: float      # compensated |z|^2 bias per unit time / r0^2
    radius_sq_rel_drift_se: float
    radius_rel_spread: float        # mean |r - r0| / r0 (pathwise, O(sqrt(dt)))
    n_runs: int

    def rate_ok(self, n_sigma: float = 3.0) -> bool:
        return abs(self.rate_fitted - self.rate_predicted) <= n_sigma * self.rate_fit_sigma


def sphere_invariants(spec: PotentialSpec, r0: float, dt: float, t_end: float,
                      n_runs: int, seed: int = 0, n_jack: int = 16) -> SphereReport:
    """Simulate N = 2 pairs started at relative speed r0 and check the oracle.

    Uses the production integrator; reports momentum drift, the radius
    invariance, and the ensemble angular-autocorrelation decay rate fitted
    by least squares on log E[unit(z_t) . unit(z_0)] with a block-jackknife
    sigma.

    The squared radius equals twice the kinetic energy once the (exactly
    conserved) momentum is subtracted, so its discretization bias is
    measured with the same chi-square compensator as the energy drift: the
    tangential noise enters |z|^2 only through |increment|^2, whose
    conditional mean is known.  The compensated bias is the O(dt) quantity;
    the raw pathwise spread of r is O(sqrt(dt)) and reported separately.
    """
    if spec.epsilon > r0 / 4.0:
        raise ValueError("cutoff overlaps the sphere radius; oracle invalid")
    from .simulator import SimConfig as _SC, _pair_projected
    from .seeding import SIM_RUN

    cfg = _SC(n_particles=2, spec=spec, dt=dt, t_end=t_end, seed=seed,
              ensemble_size=n_runs)
    n_steps = int(round(t_end / dt))
    rng0 = substream(seed, ORACLE, 2)
    # antipodal pair with |v1 - v2| = r0, total momentum zero
    u = rng0.standard_normal((n_runs, 3))
    u *= (r0 / 2.0) / np.linalg.norm(u, axis=1)[:, None]
    V = np.stack([u, -u], axis=1)
    z0 = V[:, 0] - V[:, 1]
    p0 = V.sum(axis=1)
    rngs = [substream(seed, SIM_RUN, r) for r in range(n_runs)]
    rec_every = max(1, n_steps // 50)
    times, corr = [], []
    mom_drift = 0.0
    compensator = np.zeros(n_runs)
    for k in range(1, n_steps + 1):
        g = np.stack([r.standard_normal((1, 3)) for r in rngs])
        z = (V[:, 0] - V[:, 1])[:, None, :]
        r2 = np.einsum("rpc,rpc->rp", z, z)
        a = a_batch(np.sqrt(r2).ravel(), spec).reshape(r2.shape)
        drift_p = dt * (-2.0 * a / r2)[..., None] * z
        noise_p = _pair_projected(z, r2, a, np.sqrt(dt) * g)
        delta1 = drift_p[:, 0] + noise_p[:, 0]
        V = V + np.stack([delta1, -delta1], axis=1)
        compensator += (2.0 * np.einsum("rc,rc->r", noise_p[:, 0], noise_p[:, 0])
                        - 4.0 * dt * a[:, 0])
        if k % rec_every == 0 or k == n_steps:
            zz = V[:, 0] - V[:, 1]
            zn = zz / np.linalg.norm(zz, axis=1)[:, None]
            z0n = z0 / np.linalg.norm(z0, axis=1)[:, None]
            times.append(k * dt)
            corr.append(np.einsum("nc,nc->n", zn, z0n))
            mom_drift = max(mom_drift, float(np.abs(V.sum(axis=1) - p0).max()))
    times = np.array(times)
    corr = np.stack(corr, axis=1)          # (n_runs, n_times)
    zz = V[:, 0] - V[:, 1]
    r2_final = np.einsum("nc,nc->n", zz, zz)
    # |z|^2 = 2 E - |P|^2 with P conserved: the energy compensator carries a 2
    sq_drift_runs = (r2_final - r0**2 - 2.0 * compensator) / (t_end * r0**2)
    radius = np.sqrt(r2_final)
    spread = float(np.mean(np.abs(radius - r0)) / r0)

    def fit_rate(mask):
        c = corr[mask].mean(axis=0)
        good = c > 0.05
        return -np.polyfit(times[good], np.log(c[good]), 1)[0]

    full = fit_rate(np.ones(n_runs, dtype=bool))
    labels = np.arange(n_runs) % n_jack
    jk = np.array([fit_rate(labels != u) for u in range(n_jack)])
    sigma = float(np.sqrt((n_jack - 1) * np.mean((jk - jk.mean()) ** 2)))
    return SphereReport(r0=r0, rate_predicted=sphere_rate(spec, r0),
                        rate_fitted=float(full), rate_fit_sigma=sigma,
                        momentum_max_drift=mom_drift,
                        radius_sq_rel_drift=float(sq_drift_runs.mean()),
                        radius_sq_rel_drift_se=float(sq_drift_runs.std(ddof=1)
                                                     / np.sqrt(n_runs)),
                        radius_rel_spread=spread, n_runs=n_runs)


# ---------------------------------------------------------------------------
# quadratic-potential moment relaxation
# ---------------------------------------------------------------------------

def maxwell_moment_reference(sigma0, t, n_particles=None):
    """Covariance of the one-particle law at time t for the quadratic
    potential: trace conserved, anisotropic part decaying at rate 12.

    With n_particles set, applies the exact exchangeable finite-N correction
    (S0 - X(t)) / N on top of the mean-field curve X(t).
    """
    s0 = np.asarray(sigma0, dtype=float)
    tr = np.trace(s0)
    x = (tr / 3.0) * np.eye(3) + (s0 - (tr / 3.0) * np.eye(3)) * np.exp(-MAXWELL_RELAX_RATE * t)
    if n_particles is None:
        return x
    return x + (s0 - x) / n_particles


def maxwell_moment_flux_symbolic(sigma):
    """d/dt of the second-moment matrix from the closed system: 4 tr(S) I - 12 S."""
    s = np.asarray(sigma, dtype=float)
    return 4.0 * np.trace(s) * np.eye(3) - MAXWELL_RELAX_RATE * s


def maxwell_moment_flux_quadrature(sigma, n_hermite: int = 8):
    """d/dt of the second-moment matrix by Gauss-Hermite quadrature of the
    collision contractions E[2 A_ab(v - w)] + 2 E[B_a v_b + B_b v_a] under
    independent centered Gaussians with covariance sigma.

    The integrand is polynomial for the quadratic potential, so the
    quadrature is exact up to roundoff; this is the independent numeric
    route behind the frozen relaxation rate.
    """
    s = np.asarray(sigma, dtype=float)
    evals, vecs = np.linalg.eigh(s)
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_hermite)
    weights = weights / np.sqrt(2.0 * np.pi)
    idx = np.meshgrid(*([np.arange(n_hermite)] * 6), indexing="ij")
    wts = np.ones(idx[0].shape)
    for g in range(6):
        wts *= weights[idx[g]]
    v = np.stack([np.sqrt(evals[i]) * nodes[idx[i]] for i in range(3)], axis=-1) @ vecs.T
    u = np.stack([np.sqrt(evals[i]) * nodes[idx[3 + i]] for i in range(3)], axis=-1) @ vecs.T
    z = v - u
    z2 = np.einsum("...c,...c->...", z, z)
    out = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            a_ab = z2 * (1.0 if a == b else 0.0) - z[..., a] * z[..., b]
            bv = -2.0 * (z[..., a] * v[..., b] + z[..., b] * v[..., a])
            out[a, b] = np.sum(wts * (2.0 * a_ab + 2.0 * bv))
    return out


def ensemble_covariance(result: EnsembleResult, k: int):
    """One-particle covariance at snapshot k with run-jackknife SEs."""
    if result.snapshots is None:
        raise ValueError("needs stored snapshots")
    snaps = result.snapshots[:, k]          # (R, N, 3)
    per_run = np.einsum("rna,rnb->rab", snaps, snaps) / snaps.shape[1]
    mean = per_run.mean(axis=0)
    se = per_run.std(axis=0, ddof=1) / np.sqrt(per_run.shape[0])
    return mean, se


@dataclass
class StationarityReport:
    max_z: float
    fisher_start: float
    fisher_end: float
    fisher_band: float

    def ok(self) -> bool:
        return self.max_z <= 3.0 and abs(self.fisher_end - self.fisher_start) <= self.fisher_band


def equilibrium_stationarity(result: EnsembleResult) -> StationarityReport:
    """All tracked one-particle moments constant in time within 3 SE, and the
    KDE Fisher estimate of the 1-marginal constant within its bands."""
    from .estimators import kde_fisher_marginal

    def paired_z(series):
        # per-run difference from t = 0 keeps common-random-number pairing
        diff = series - series[:, :1]
        m = diff.mean(axis=0)
        se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
        se = np.where(se == 0.0, np.inf, se)
        return np.abs(m / se)[1:]

    zs = []
    for p in range(4):
        for axis in range(3):
            zs.append(paired_z(result.coord_moments[:, :, p, axis]))
    zs.append(paired_z(result.radial_m2))
    zs.append(paired_z(result.radial_m4))
    max_z = float(np.max(np.concatenate(zs)))

    f0 = fe = None
    if result.snapshots is not None:
        R, _, N, _ = result.snapshots.shape
        groups = np.repeat(np.arange(R), N)
        f_start = kde_fisher_marginal(result.snapshots[:, 0].reshape(-1, 3), groups=groups)
        f_end = kde_fisher_marginal(result.snapshots[:, -1].reshape(-1, 3), groups=groups)
        f0, fe = f_start, f_end
        band = (f_start.band_halfwidth() + f_end.band_halfwidth()
                + 3.0 * np.hypot(f_start.std_error, f_end.std_error))
        return StationarityReport(max_z=max_z, fisher_start=f_start.value,
                                  fisher_end=f_end.value, fisher_band=float(band))
    return StationarityReport(max_z=max_z, fisher_start=0.0, fisher_end=0.0,
                              fisher_band=np.inf)
