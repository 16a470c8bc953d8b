import numpy as np
import pytest

from kaclandau.densities import GaussianMixture, normalize_to_assumption
from kaclandau.estimators import (
    ProductBump,
    RadialBump,
    chaos_distance,
    energy_distance,
    hierarchy_residual,
    kde_fisher_marginal,
    knn_entropy,
    meanfield_coefficients,
)
from kaclandau.kernels import PotentialSpec
from kaclandau.simulator import SimConfig, run_ensemble

GAUSS_ENTROPY = -1.5 * np.log(2 * np.pi * np.e)

OVERLAPPING_MIXTURE = GaussianMixture(
    [0.55, 0.45], [[0.5, 0, 0], [-0.6, 0.2, 0]], [np.eye(3) * 0.8, np.eye(3) * 1.1])


# ---------------------------------------------------------------------------
# entropy / Fisher from samples
# ---------------------------------------------------------------------------

def test_knn_entropy_gaussian():
    x = np.random.default_rng(0).standard_normal((4000, 3))
    est = knn_entropy(x)
    assert abs(est.value - GAUSS_ENTROPY) <= 3 * est.std_error


def test_knn_entropy_scaling_law():
    x = np.random.default_rng(1).standard_normal((4000, 3))
    base = knn_entropy(x)
    scaled = knn_entropy(2.0 * x)
    expected_shift = -3.0 * np.log(2.0)
    tol = 3 * np.hypot(base.std_error, scaled.std_error)
    assert abs((scaled.value - base.value) - expected_shift) <= tol


def test_knn_entropy_against_analytic_mixture():
    s = OVERLAPPING_MIXTURE.sample(6000, np.random.default_rng(2))
    est = knn_entropy(s)
    ref = OVERLAPPING_MIXTURE.entropy_mc(200000, seed=3)
    assert abs(est.value - ref.value) <= 3 * np.hypot(est.std_error, ref.std_error)


def test_knn_entropy_handles_duplicates():
    x = np.random.default_rng(3).standard_normal((600, 3))
    x[100] = x[0]
    x[101] = x[0]
    est = knn_entropy(x)
    assert np.isfinite(est.value)


def test_knn_entropy_too_few_samples():
    with pytest.raises(ValueError):
        knn_entropy(np.zeros((10, 3)))


def test_kde_fisher_gaussian_and_scaling():
    x = np.random.default_rng(4).standard_normal((4000, 3))
    est = kde_fisher_marginal(x)
    assert est.band_low - 3 * est.std_error <= 3.0 <= est.band_high + 3 * est.std_error
    assert abs(est.value - 3.0) <= 0.12
    est_h = kde_fisher_marginal(0.5 * x)
    assert abs(est_h.value - 12.0) <= 0.5


def test_kde_fisher_against_analytic_mixture():
    s = OVERLAPPING_MIXTURE.sample(4000, np.random.default_rng(5))
    est = kde_fisher_marginal(s)
    ref = OVERLAPPING_MIXTURE.fisher_mc(200000, seed=6)
    assert (est.band_low - 3 * np.hypot(est.std_error, ref.std_error)
            <= ref.value
            <= est.band_high + 3 * np.hypot(est.std_error, ref.std_error))


def test_kde_fisher_anisotropic():
    x = np.random.default_rng(6).standard_normal((4000, 3))
    xa = x @ np.diag(np.sqrt([2.0, 0.5, 0.5]))
    est = kde_fisher_marginal(xa)
    assert abs(est.value - 4.5) <= 0.35


# ---------------------------------------------------------------------------
# factorization metric
# ---------------------------------------------------------------------------

def test_chaos_distance_zero_for_independent():
    rng = np.random.default_rng(0)
    pairs = rng.standard_normal((256, 2, 3))
    val, se = chaos_distance(pairs, seed=8)
    assert abs(val) <= 3.5 * se


def test_chaos_distance_detects_coupling():
    rng = np.random.default_rng(9)
    pairs = rng.standard_normal((512, 2, 3))
    null_val, null_se = chaos_distance(pairs, seed=10)
    coupled = np.stack([pairs[:, 0, :], pairs[:, 0, :]], axis=1)
    val, _ = chaos_distance(coupled, seed=11)
    assert val > 5 * null_se
    assert val > 0


def test_energy_distance_unbiased_u_statistic():
    rng = np.random.default_rng(12)
    vals = [energy_distance(rng.standard_normal((150, 2)),
                            rng.standard_normal((150, 2))) for _ in range(60)]
    vals = np.asarray(vals)
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(len(vals))


# ---------------------------------------------------------------------------
# mean-field coefficients
# ---------------------------------------------------------------------------

def test_meanfield_point_mass():
    spec = PotentialSpec(-3.0, 0.0)
    A, B = meanfield_coefficients(np.zeros((32, 3)), np.array([1.0, 0, 0]), spec)
    np.testing.assert_allclose(A, np.diag([0.0, 1.0, 1.0]), atol=1e-14)
    np.testing.assert_allclose(B, [-2.0, 0, 0], atol=1e-14)


def test_meanfield_odd_symmetry():
    rng = np.random.default_rng(13)
    w = rng.standard_normal((20000, 3))
    spec = PotentialSpec(-3.0, 0.25)
    _, B = meanfield_coefficients(w, np.zeros(3), spec)
    # B is odd and the law symmetric: the average drift vanishes
    z = w
    r2 = np.einsum("nc,nc->n", z, z)
    from kaclandau.kernels import a_batch
    a = a_batch(np.sqrt(r2), spec)
    per = -2.0 * a[:, None] / r2[:, None] * (-z)
    se = per.std(axis=0, ddof=1) / np.sqrt(len(w))
    assert np.all(np.abs(B) <= 3.5 * se)


def test_meanfield_self_refinement():
    rng = np.random.default_rng(14)
    spec = PotentialSpec(-3.0, 0.25)
    v = np.array([0.4, -0.1, 0.2])
    coarse = rng.standard_normal((2000, 3))
    fine = rng.standard_normal((200000, 3))
    A1, B1 = meanfield_coefficients(coarse, v, spec)
    A2, B2 = meanfield_coefficients(fine, v, spec)
    assert np.max(np.abs(A1 - A2)) <= 0.1
    assert np.max(np.abs(B1 - B2)) <= 0.15


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

def test_bump_support_and_maximum():
    b = RadialBump([0, 0, 0], 2.0)
    assert b.value(np.zeros((1, 3)))[0] == pytest.approx(1.0)
    assert b.value(np.array([[2.1, 0, 0]]))[0] == 0.0
    assert b.value(np.array([[1.999999, 0, 0]]))[0] >= 0.0


def test_bump_derivatives_match_fd():
    b = RadialBump([0.3, -0.2, 0.1], 1.7)
    rng = np.random.default_rng(15)
    h = 1e-6
    for _ in range(5):
        v = rng.normal(size=3) * 0.7
        g = b.grad(v[None])[0]
        gfd = np.array([(b.value(v + h * e)[0] - b.value(v - h * e)[0]) / (2 * h)
                        for e in np.eye(3)])
        np.testing.assert_allclose(g, gfd, atol=1e-8)
        hs = b.hess(v[None])[0]
        hfd = np.stack([(b.grad(v + h * e)[0] - b.grad(v - h * e)[0]) / (2 * h)
                        for e in np.eye(3)])
        np.testing.assert_allclose(hs, hfd, atol=1e-7)


def test_product_bump_cross_hessian():
    pb = ProductBump.uniform(2, [0, 0, 0], 2.0)
    rng = np.random.default_rng(16)
    Vm = rng.normal(size=(1, 2, 3)) * 0.5
    h = 1e-6
    hb = pb.hess_block(Vm, 0, 1)[0]
    fd = np.zeros((3, 3))
    for c in range(3):
        Vp, Vn = Vm.copy(), Vm.copy()
        Vp[0, 1, c] += h
        Vn[0, 1, c] -= h
        fd[:, c] = (pb.grad_block(Vp, 0)[0] - pb.grad_block(Vn, 0)[0]) / (2 * h)
    np.testing.assert_allclose(hb, fd, atol=1e-8)


# ---------------------------------------------------------------------------
# hierarchy residuals
# ---------------------------------------------------------------------------

def landau_run(n_particles=16, runs=96, t_end=0.4, seed=21):
    law = normalize_to_assumption(GaussianMixture(
        [0.5, 0.5], [[0.9, 0, 0], [-0.9, 0, 0]], [np.eye(3) * 0.5, np.eye(3) * 0.7]))
    cfg = SimConfig(n_particles=n_particles, spec=PotentialSpec(0.0, 0.0), dt=5e-4,
                    t_end=t_end, seed=seed, ensemble_size=runs, record_every=20,
                    initial_law=law, store_snapshots=True)
    return run_ensemble(cfg, chunk_size=48)


@pytest.fixture(scope="module")
def maxwell_ensemble():
    return landau_run()


def test_weak_form_residual_within_errors(maxwell_ensemble):
    phi = ProductBump.uniform(1, [0.3, 0.0, 0.0], 2.5)
    rep = hierarchy_residual(maxwell_ensemble, phi, "bbgky")
    assert abs(rep.residual.value) <= 3.5 * rep.residual.std_error


def test_mass_test_function(maxwell_ensemble):
    phi = ProductBump.uniform(1, [0, 0, 0], 400.0)
    rep = hierarchy_residual(maxwell_ensemble, phi, "bbgky")
    assert abs(rep.residual.value) <= max(3 * rep.residual.std_error, 1e-4)


def test_disjoint_support_gives_exact_zero(maxwell_ensemble):
    phi = ProductBump.uniform(1, [50.0, 0, 0], 1.0)
    for mode in ("bbgky", "landau"):
        rep = hierarchy_residual(maxwell_ensemble, phi, mode)
        assert rep.lhs.value == 0.0 and rep.rhs.value == 0.0


def test_finite_n_gap_is_rhs_over_n(maxwell_ensemble):
    phi = ProductBump.uniform(1, [0.3, 0.0, 0.0], 2.5)
    rb = hierarchy_residual(maxwell_ensemble, phi, "bbgky")
    rl = hierarchy_residual(maxwell_ensemble, phi, "landau")
    n = maxwell_ensemble.config.n_particles
    gap = rb.rhs.value - rl.rhs.value
    assert gap == pytest.approx(-rl.rhs.value / n, rel=1e-9)


def test_drift_term_exchanged_form_agrees(maxwell_ensemble):
    # one-sided pair-(1,2) drift contraction, doubled, versus the
    # antisymmetrized two-sided form: equal in expectation by exchangeability
    from kaclandau.kernels import a_batch
    phi = ProductBump.uniform(1, [0.3, 0.0, 0.0], 2.5)
    snaps = maxwell_ensemble.snapshots[:, -1]
    spec = maxwell_ensemble.config.spec
    v1, v2 = snaps[:, 0], snaps[:, 1]
    z = v1 - v2
    r2 = np.einsum("nc,nc->n", z, z)
    a = a_batch(np.sqrt(r2), spec)
    bvec = -2.0 * (a / r2)[:, None] * z
    g1 = phi.bumps[0].grad(v1)
    g2 = phi.bumps[0].grad(v2)
    one_sided = 2.0 * np.einsum("nc,nc->n", bvec, g1)
    exchanged = np.einsum("nc,nc->n", bvec, g1 - g2)
    diff = one_sided - exchanged
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    assert abs(diff.mean()) <= 3 * se


def test_arity_two_residual():
    res = landau_run(n_particles=8, runs=64, t_end=0.2, seed=22)
    phi = ProductBump.uniform(2, [0.0, 0, 0], 2.5)
    rep = hierarchy_residual(res, phi, "bbgky")
    assert rep.m == 2
    assert abs(rep.residual.value) <= 3.5 * rep.residual.std_error


def test_arity_validation(maxwell_ensemble):
    phi = ProductBump.uniform(17, [0, 0, 0], 2.0)
    with pytest.raises(ValueError):
        hierarchy_residual(maxwell_ensemble, phi, "bbgky")
    with pytest.raises(ValueError):
        hierarchy_residual(maxwell_ensemble, ProductBump.uniform(1, [0, 0, 0], 2.0),
                           "nonsense")
