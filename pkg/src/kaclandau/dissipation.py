"""Gateaux derivatives of entropy and Fisher information along heat and
pairwise-projection (Landau-type) flows, on analytic Gaussian mixtures.

The flow operator acting on a density g on R^(3N) is

    heat:    Q(g) = Delta g
    landau:  Q(g) = (1/2N) sum_{i != j} div_{v^i - v^j} [ a_eps Pi grad_{v^i - v^j} g ]
                  = (1/N)  sum_{i < j} [ 2 B_eps . grad_{i-j} g + a_eps Pi : grad^2_{i-j} g ]

(the factor 2 on the drift term comes out of expanding the signed divergence
against a kernel that depends on v^i - v^j; a finite-difference flux oracle
in the tests pins it down).

Everything is evaluated by importance sampling from g itself.  Per sample we
assemble Q(g)/g and grad Q(g)/g from the mixture's log-derivatives plus the
third-derivative contractions, so no full third tensor is ever materialized.

Sum-of-squares forms of the dissipation terms, per sample (s = grad log g,
L = hess log g, blocks indexed by particle):

    heat, diagonal (k = i):   -(2/N) sum_i  ||L_ii||_F^2
    heat, cross (k != i):     -(2/N) sum_{i != k} ||L_ik||_F^2
    landau, triple (k!=i!=j): -(1/N^2) sum_{i!=j!=k} a ||Pi (L_ik - L_jk)||_F^2

The landau pair term (k in {i,j}) has no independent SOS form here; it is
reported as raw minus triple and checked for sign, with the N = 2 case
exercising it directly.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .densities import FunctionalEstimate, GaussianMixture, estimate_from_samples
from .kernels import PotentialSpec, a_batch, a_deriv_batch
from .seeding import MC_FUNCTIONAL, MIXTURE_SUITE, substream

CHUNK = 20000


class _KernelBatch:
    """a, B, and their z-gradients for a batch of relative velocities."""

    def __init__(self, z, spec, with_gradients: bool):
        self.z = z
        self.r = np.linalg.norm(z, axis=1)
        if np.any(self.r == 0.0):
            raise ValueError("coincident particles in sample batch")
        self.a, ap = _potential_and_slope(self.r, spec)
        self.zh = z / self.r[:, None]
        self.B = -2.0 * self.a[:, None] * z / (self.r**2)[:, None]
        if with_gradients:
            n = z.shape[0]
            eye = np.eye(3)
            r2 = (self.r**2)[:, None, None]
            r4 = (self.r**4)[:, None, None]
            zz = np.einsum("na,nb->nab", z, z)
            pi = eye[None, :, :] - zz / r2
            dpi = (-(np.einsum("ca,nb->ncab", eye, z) + np.einsum("cb,na->ncab", eye, z))
                   / r2[..., None]
                   + 2.0 * np.einsum("na,nb,nc->ncab", z, z, z) / r4[..., None])
            self.A = self.a[:, None, None] * pi
            self.dA = (np.einsum("n,nc,nab->ncab", ap, self.zh, pi)
                       + self.a[:, None, None, None] * dpi)
            self.dB = -2.0 * (np.einsum("n,nc,nb->ncb", ap, self.zh, z) / r2
                              + self.a[:, None, None] * eye[None] / r2
                              - 2.0 * self.a[:, None, None] * zz / r4)

    def pi_apply(self, v):
        """Pi(z) v for a batch of 3-vectors."""
        return v - self.zh * np.einsum("na,na->n", self.zh, v)[:, None]

    def pi_colon(self, m):
        """Pi(z) : M for a batch of 3x3 matrices."""
        return np.einsum("naa->n", m) - np.einsum("na,nab,nb->n", self.zh, m, self.zh)


@dataclass
class _SampleArrays:
    """Per-sample pieces accumulated over chunks for one density and flow."""

    log_g: np.ndarray
    s: np.ndarray              # grad log g, (n, d)
    s2: np.ndarray             # |s|^2
    q0: np.ndarray             # Q(g)/g
    q1: np.ndarray             # grad Q(g) / g, (n, d)
    closed_entropy: np.ndarray
    term_diag: np.ndarray      # heat k = i  /  landau: zeros (folded into pair)
    term_cross: np.ndarray     # heat k != i /  landau triple
    g_vals: np.ndarray


def _pairs(n_particles):
    return list(combinations(range(n_particles), 2))


def _flow_arrays(g: GaussianMixture, flow: str, spec: Optional[PotentialSpec],
                 V: np.ndarray) -> _SampleArrays:
    n, d = V.shape
    if d % 3 != 0:
        raise ValueError("density must live on R^(3N)")
    n_part = d // 3
    if flow == "landau":
        if spec is None:
            raise ValueError("landau flow needs a PotentialSpec")
        if spec.epsilon <= 0.0:
            raise ValueError("landau flow requires epsilon > 0 (smooth kernel at the origin)")
        if n_part < 2:
            raise ValueError("landau flow needs at least 2 particles")
    elif flow != "heat":
        raise ValueError(f"unknown flow {flow!r}")

    log_g = g.log_density(V)
    w, u = g.responsibilities(V)
    s = -np.einsum("nk,nka->na", w, u)
    hg = (np.einsum("nk,nka,nkb->nab", w, u, u)
          - np.einsum("nk,kab->nab", w, g.precisions))       # hess g / g
    hlog = hg - np.einsum("na,nb->nab", s, s)
    s2 = np.einsum("na,na->n", s, s)

    blocks = [slice(3 * i, 3 * i + 3) for i in range(n_part)]

    if flow == "heat":
        q0 = np.einsum("naa->n", hg)
        q1 = g.third_contraction(V, np.broadcast_to(np.eye(d), (n, d, d)))
        term_diag = np.zeros(n)
        term_cross = np.zeros(n)
        for i in range(n_part):
            term_diag -= (2.0 / n_part) * np.einsum(
                "nab,nab->n", hlog[:, blocks[i], blocks[i]], hlog[:, blocks[i], blocks[i]])
        for i in range(n_part):
            for k in range(n_part):
                if k == i:
                    continue
                term_cross -= (2.0 / n_part) * np.einsum(
                    "nab,nab->n", hlog[:, blocks[i], blocks[k]], hlog[:, blocks[i], blocks[k]])
        closed_entropy = -s2 / n_part
        return _SampleArrays(log_g, s, s2, q0, q1, closed_entropy,
                             term_diag, term_cross, np.exp(log_g))

    # landau flow
    q0 = np.zeros(n)
    wtot = np.zeros((n, d, d))
    btot = np.zeros((n, d))
    pair_grad = np.zeros((n, d))
    closed_entropy = np.zeros(n)
    term_triple = np.zeros(n)
    for (i, j) in _pairs(n_part):
        bi, bj = blocks[i], blocks[j]
        z = V[:, bi] - V[:, bj]
        kb = _KernelBatch(z, spec, with_gradients=True)
        eta = s[:, bi] - s[:, bj]                             # grad_{i-j} log g
        hp = (hg[:, bi, bi] - hg[:, bi, bj] - hg[:, bj, bi] + hg[:, bj, bj])
        q0 += (2.0 * np.einsum("na,na->n", kb.B, eta)
               + kb.a * kb.pi_colon(hp)) / n_part
        wtot[:, bi, bi] += kb.A
        wtot[:, bj, bj] += kb.A
        wtot[:, bi, bj] -= kb.A
        wtot[:, bj, bi] -= kb.A
        btot[:, bi] += 2.0 * kb.B
        btot[:, bj] -= 2.0 * kb.B
        pg = (2.0 * np.einsum("ncb,nb->nc", kb.dB, eta)
              + np.einsum("ncab,nab->nc", kb.dA, hp))
        pair_grad[:, bi] += pg
        pair_grad[:, bj] -= pg
        pi_eta = kb.pi_apply(eta)
        closed_entropy -= kb.a * np.einsum("na,na->n", pi_eta, pi_eta) / n_part**2
        for k in range(n_part):
            if k in (i, j):
                continue
            bk = blocks[k]
            ell = hlog[:, bi, bk] - hlog[:, bj, bk]           # grad_{i-j} grad_k log g
            zl = np.einsum("na,nab->nb", kb.zh, ell)
            frob = np.einsum("nab,nab->n", ell, ell) - np.einsum("nb,nb->n", zl, zl)
            term_triple -= 2.0 * kb.a * frob / n_part**2

    hv = np.einsum("nab,nb->na", hg, btot)
    q1 = (hv + g.third_contraction(V, wtot) + pair_grad) / n_part
    term_diag = np.zeros(n)  # landau pair term is raw - triple, not SOS here
    return _SampleArrays(log_g, s, s2, q0, q1, closed_entropy,
                         term_diag, term_triple, np.exp(log_g))


def _collect(g, flow, spec, V):
    """Evaluate flow arrays in chunks (fixed order, deterministic reduction)."""
    parts = [_flow_arrays(g, flow, spec, V[lo:lo + CHUNK])
             for lo in range(0, V.shape[0], CHUNK)]
    if len(parts) == 1:
        return parts[0]
    fields = ("log_g", "s", "s2", "q0", "q1", "closed_entropy",
              "term_diag", "term_cross", "g_vals")
    return _SampleArrays(**{f: np.concatenate([getattr(p, f) for p in parts])
                            for f in fields})


def q_apply(g: GaussianMixture, spec: PotentialSpec, V) -> np.ndarray:
    """Pointwise value of the pairwise-projection operator Q(g) at V."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    arr = _collect(g, "landau", spec, V)
    out = arr.q0 * arr.g_vals
    return float(out[0]) if out.size == 1 else out


def heat_apply(g: GaussianMixture, V) -> np.ndarray:
    """Pointwise Laplacian of g."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    arr = _collect(g, "heat", None, V)
    out = arr.q0 * arr.g_vals
    return float(out[0]) if out.size == 1 else out


def gateaux_entropy(g: GaussianMixture, flow: str, n: int,
                    spec: Optional[PotentialSpec] = None, seed: int = 0):
    """Entropy derivative along the flow: (defining form, closed quadratic form).

    The defining form is (1/N) E[log g * Q(g)/g]; the closed form is the
    manifestly nonpositive quadratic form obtained by integration by parts.
    The two must agree within combined Monte Carlo error.
    """
    n_part = g.dim // 3
    rng = substream(seed, MC_FUNCTIONAL, 10)
    V = g.sample(n, rng)
    arr = _collect(g, flow, spec, V)
    defining = estimate_from_samples(arr.log_g * arr.q0 / n_part)
    closed = estimate_from_samples(arr.closed_entropy)
    return defining, closed


def _fisher_raw_samples(arr: _SampleArrays, n_part: int):
    return (2.0 * np.einsum("na,na->n", arr.s, arr.q1) - arr.s2 * arr.q0) / n_part


def _fisher_form1_samples(arr: _SampleArrays, n_part: int):
    grad_q_over_g = arr.q1 - arr.q0[:, None] * arr.s     # grad(Q/g) per sample
    return (arr.q0 * arr.s2 + 2.0 * np.einsum("na,na->n", arr.s, grad_q_over_g)) / n_part


def gateaux_fisher_raw(g: GaussianMixture, flow: str, n: int,
                       spec: Optional[PotentialSpec] = None, seed: int = 0,
                       both_forms: bool = False):
    """Fisher-information derivative along the flow.

    Returns one FunctionalEstimate, or (form2, form1) when both_forms is set;
    the two forms are algebraically equal pointwise, so form1 is evaluated on
    an independent sample batch to make the agreement check statistical.
    """
    n_part = g.dim // 3
    rng = substream(seed, MC_FUNCTIONAL, 11)
    V = g.sample(n, rng)
    arr = _collect(g, flow, spec, V)
    form2 = estimate_from_samples(_fisher_raw_samples(arr, n_part))
    if not both_forms:
        return form2
    rng1 = substream(seed, MC_FUNCTIONAL, 12)
    V1 = g.sample(n, rng1)
    arr1 = _collect(g, flow, spec, V1)
    form1 = estimate_from_samples(_fisher_form1_samples(arr1, n_part))
    return form2, form1


@dataclass
class DissipationReport:
    """One density / one flow: Gateaux values, term split, consistency numbers."""

    flow: str
    n_particles: int
    gamma: Optional[float]
    epsilon: Optional[float]
    density_id: str
    n_samples: int
    entropy_defining: FunctionalEstimate
    entropy_closed: FunctionalEstimate
    fisher_raw: FunctionalEstimate
    term_pair: FunctionalEstimate
    term_triple: FunctionalEstimate
    identity_residual: FunctionalEstimate
    sos_max: float = 0.0            # max per-sample SOS integrand; must be <= 0
    fd_tau: Optional[float] = None
    fd_value: Optional[float] = None
    fd_rel_defect: Optional[float] = None

    def sign_ok(self) -> bool:
        """All monotonicity contracts at the 3-SE level."""
        checks = [
            self.entropy_defining.value <= 3.0 * self.entropy_defining.std_error,
            self.entropy_closed.value <= 3.0 * self.entropy_closed.std_error,
            self.fisher_raw.value <= 3.0 * self.fisher_raw.std_error,
            self.term_pair.value <= 3.0 * self.term_pair.std_error,
            self.term_triple.value <= 3.0 * self.term_triple.std_error,
            self.sos_max <= 0.0,
        ]
        return all(checks)

    def to_row(self) -> dict:
        row = {
            "flow": self.flow, "n_particles": self.n_particles,
            "gamma": self.gamma, "epsilon": self.epsilon,
            "density_id": self.density_id, "n_samples": self.n_samples,
            "entropy_defining": self.entropy_defining.value,
            "entropy_defining_se": self.entropy_defining.std_error,
            "entropy_closed": self.entropy_closed.value,
            "entropy_closed_se": self.entropy_closed.std_error,
            "fisher_raw": self.fisher_raw.value,
            "fisher_raw_se": self.fisher_raw.std_error,
            "term_pair": self.term_pair.value, "term_pair_se": self.term_pair.std_error,
            "term_triple": self.term_triple.value,
            "term_triple_se": self.term_triple.std_error,
            "identity_residual": self.identity_residual.value,
            "identity_residual_se": self.identity_residual.std_error,
            "sos_max": self.sos_max,
            "fd_tau": self.fd_tau, "fd_value": self.fd_value,
            "fd_rel_defect": self.fd_rel_defect,
            "sign_ok": int(self.sign_ok()),
        }
        return row


def fisher_terms(g: GaussianMixture, flow: str, n: int,
                 spec: Optional[PotentialSpec] = None, seed: int = 0,
                 density_id: str = "", with_fd: bool = False) -> DissipationReport:
    """Full dissipation report: raw Gateaux, SOS term split, consistency checks."""
    n_part = g.dim // 3
    rng = substream(seed, MC_FUNCTIONAL, 13)
    V = g.sample(n, rng)
    arr = _collect(g, flow, spec, V)

    raw_samples = _fisher_raw_samples(arr, n_part)
    raw = estimate_from_samples(raw_samples)
    entropy_defining = estimate_from_samples(arr.log_g * arr.q0 / n_part)
    entropy_closed = estimate_from_samples(arr.closed_entropy)

    if flow == "heat":
        pair = estimate_from_samples(arr.term_diag)
        triple = estimate_from_samples(arr.term_cross)
        resid = estimate_from_samples(raw_samples - arr.term_diag - arr.term_cross)
        sos_max = float(max(arr.term_diag.max(initial=-np.inf),
                            arr.term_cross.max(initial=-np.inf)))
    else:
        triple = estimate_from_samples(arr.term_cross)
        pair = estimate_from_samples(raw_samples - arr.term_cross)
        # independent-batch two-form agreement as the consistency number
        rng1 = substream(seed, MC_FUNCTIONAL, 14)
        V1 = g.sample(n, rng1)
        arr1 = _collect(g, flow, spec, V1)
        form1 = estimate_from_samples(_fisher_form1_samples(arr1, n_part))
        resid = raw - form1
        sos_max = float(arr.term_cross.max(initial=0.0)) if n_part >= 3 else 0.0

    report = DissipationReport(
        flow=flow, n_particles=n_part,
        gamma=None if spec is None else spec.gamma,
        epsilon=None if spec is None else spec.epsilon,
        density_id=density_id, n_samples=n,
        entropy_defining=entropy_defining, entropy_closed=entropy_closed,
        fisher_raw=raw, term_pair=pair, term_triple=triple,
        identity_residual=resid, sos_max=sos_max)

    if with_fd:
        fd = finite_difference_check(g, flow, None, n, spec=spec, seed=seed,
                                     _arrays=(arr, raw.value))
        report.fd_tau = fd["taus"][-1]
        report.fd_value = fd["fd_values"][-1]
        report.fd_rel_defect = fd["rel_defects"][-1]
    return report


def finite_difference_check(g: GaussianMixture, flow: str, tau_list, n: int,
                            spec: Optional[PotentialSpec] = None, seed: int = 0,
                            _arrays=None):
    """Difference quotient [I(g + tau Q(g)) - I(g)] / tau against the Gateaux value.

    tau is halved adaptively until g + tau Q(g) stays positive on the batch;
    per-sample the perturbed Fisher integrand is |s + tau q1|^2 / (1 + tau q0)
    which makes the quotient a low-variance paired estimate.
    """
    n_part = g.dim // 3
    if _arrays is None:
        rng = substream(seed, MC_FUNCTIONAL, 15)
        V = g.sample(n, rng)
        arr = _collect(g, flow, spec, V)
        raw_value = float(np.mean(_fisher_raw_samples(arr, n_part)))
    else:
        arr, raw_value = _arrays

    if tau_list is None:
        tau0 = 0.02
        # halve until positivity holds, then a refinement ladder
        while np.min(1.0 + tau0 * arr.q0) <= 1e-6 and tau0 > 1e-12:
            tau0 *= 0.5
        if tau0 <= 1e-12:
            raise RuntimeError("no admissible tau: density too close to vanishing")
        tau_list = [tau0 / 2.0**k for k in range(5)]
    taus, fd_values, rel_defects = [], [], []
    base = arr.s2 / n_part
    for tau in tau_list:
        if np.min(1.0 + tau * arr.q0) <= 0.0:
            continue
        pert = (np.einsum("na,na->n", arr.s + tau * arr.q1, arr.s + tau * arr.q1)
                / (1.0 + tau * arr.q0)) / n_part
        fd = float(np.mean((pert - base) / tau))
        taus.append(float(tau))
        fd_values.append(fd)
        denom = max(abs(raw_value), 1e-12)
        rel_defects.append(abs(fd - raw_value) / denom)
    if not taus:
        raise RuntimeError("no admissible tau: density too close to vanishing")
    return {"taus": taus, "fd_values": fd_values, "rel_defects": rel_defects,
            "raw": raw_value}


def bochner_residual(g: GaussianMixture, V, i: int):
    """Residual of the per-particle Bochner identity at sample points.

    grad log g . grad(Delta log g) - [ (1/2) Delta |grad log g|^2 - ||hess log g||^2 ]
    within particle block i, with the two sides assembled from differently
    arranged derivative contractions of g.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    sl = slice(3 * i, 3 * i + 3)
    w, uu = g.responsibilities(V)
    s_full = -np.einsum("nk,nka->na", w, uu)
    u = s_full[:, sl]                                        # grad log g, block i
    hg_full = (np.einsum("nk,nka,nkb->nab", w, uu, uu)
               - np.einsum("nk,kab->nab", w, g.precisions))
    hg = hg_full[:, sl, sl]                                  # hess g / g, block i
    hl = hg - np.einsum("na,nb->nab", u, u)                  # hess log g, block i
    tg = g.third_block(V, i)                                 # third g / g, block i

    # left side via the log third tensor
    tlog = (tg
            - np.einsum("nab,nc->nabc", hg, u)
            - np.einsum("nac,nb->nabc", hg, u)
            - np.einsum("nbc,na->nabc", hg, u)
            + 2.0 * np.einsum("na,nb,nc->nabc", u, u, u))
    grad_lap_log = np.einsum("naac->nc", tlog)
    lhs = np.einsum("nc,nc->n", u, grad_lap_log)

    # right side via raw-density contractions
    hl2 = np.einsum("nab,nab->n", hl, hl)
    lap_u = (np.einsum("naag->ng", tg)
             - np.einsum("nag,na->ng", hg, u)
             - np.einsum("naa,ng->ng", hl, u)
             - np.einsum("na,nag->ng", u, hl))
    lap_grad2 = 2.0 * hl2 + 2.0 * np.einsum("ng,ng->n", u, lap_u)
    rhs = 0.5 * lap_grad2 - hl2

    out = lhs - rhs
    return float(out[0]) if out.size == 1 else out


def matrix_identities(M, Pi, eta, xi):
    """Residuals of the three projection/matrix identities used by the SOS step."""
    M = np.asarray(M, dtype=float)
    Pi = np.asarray(Pi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    xi = np.asarray(xi, dtype=float)
    pim = Pi @ M
    r1 = np.einsum("ab,ab->", M, pim) - np.einsum("ab,ab->", pim, pim)
    r2 = (np.einsum("a,b,ab->", eta, xi, pim)
          - np.einsum("a,b,ab->", Pi @ eta, xi, pim))
    pe = Pi @ eta
    r3 = float(xi @ xi) * float(eta @ pe) - float(pe @ pe) * float(xi @ xi)
    return r1, r2, r3


@dataclass
class SuiteConfig:
    """One cell of the randomized dissipation suite."""

    flow: str
    n_particles: int
    gamma: Optional[float] = None
    epsilon: Optional[float] = None
    n_mixtures: int = 50
    n_samples: int = 100000
    flip_sign: bool = False     # negative control: negated potential


def run_sign_suite(cfg: SuiteConfig, seed: int = 0, with_fd: bool = True,
                   n_components: int = 2):
    """Randomized-mixture dissipation suite; returns a list of reports."""
    from .densities import random_symmetric_mixture
    reports = []
    spec = None
    if cfg.flow == "landau":
        spec = PotentialSpec(gamma=cfg.gamma, epsilon=cfg.epsilon)
        if cfg.flip_sign:
            spec = _SignFlippedSpec(spec)
    for k in range(cfg.n_mixtures):
        rng = substream(seed, MIXTURE_SUITE, k)
        g = random_symmetric_mixture(cfg.n_particles, rng, n_components=n_components)
        rep = fisher_terms(g, cfg.flow, cfg.n_samples, spec=spec,
                           seed=seed + 1000 + k, density_id=f"mix{k:03d}",
                           with_fd=with_fd)
        reports.append(rep)
    return reports


class _SignFlippedSpec:
    """Potential with a -> -a; breaks dissipation on purpose (negative control)."""

    def __init__(self, spec: PotentialSpec):
        self.inner = spec
        self.gamma = spec.gamma
        self.epsilon = spec.epsilon
        self.chi = spec.chi
        self.chi_fn = spec.chi_fn


def _potential_and_slope(r, spec):
    if isinstance(spec, _SignFlippedSpec):
        return -a_batch(r, spec.inner), -a_deriv_batch(r, spec.inner)
    return a_batch(r, spec), a_deriv_batch(r, spec)
