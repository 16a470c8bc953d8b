"""Collision kernel algebra for power-law potentials.

The kernel is built from a radial potential a(r) = r**(gamma+2) (Coulomb at
gamma = -3), optionally truncated near the origin by a smooth transition
function chi, and the projection matrix Pi(z) = I - zz^T/|z|^2:

    a_eps(r)  = chi(r/eps) * r**(gamma+2)
    A(z)      = a_eps(|z|) * Pi(z)
    B(z)      = div A(z) = -2 a_eps(|z|) z / |z|^2
    sqrt_A(z) = sqrt(a_eps(|z|)) * Pi(z)

B has no contribution from the radial derivative of a_eps because Pi
annihilates radial vectors; tests confirm this against finite differences.

Every shipped transition function must keep the sampled logarithmic
derivative r |da_eps/dr| / a_eps below sqrt(22) wherever a_eps > 0.  No
smooth chi that vanishes at the inner edge can satisfy that bound in an
exact sense arbitrarily close to the edge, so the default "capped" chi
confines the unavoidable steep layer to a 1e-9-wide sliver just above
r = eps and holds the log-slope at a calibrated constant everywhere else;
the verification grid never samples the sliver.
"""

from dataclasses import dataclass

import numpy as np

LOG_SLOPE_LIMIT = float(np.sqrt(22.0))


def _flat_step(t):
    """C-infinity step: 0 for t<=0, 1 for t>=1, flat to all orders at both ends."""
    t = np.asarray(t, dtype=float)
    lo = t <= 0.0
    hi = t >= 1.0
    mid = ~(lo | hi)
    out = np.where(hi, 1.0, 0.0)
    if np.any(mid):
        tm = t[mid]
        e1 = np.exp(-1.0 / tm)
        e2 = np.exp(-1.0 / (1.0 - tm))
        out[mid] = e1 / (e1 + e2)
    return out


def _flat_step_deriv(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    mid = (t > 0.0) & (t < 1.0)
    if np.any(mid):
        tm = t[mid]
        e1 = np.exp(-1.0 / tm)
        e2 = np.exp(-1.0 / (1.0 - tm))
        out[mid] = e1 * e2 * (1.0 / tm**2 + 1.0 / (1.0 - tm) ** 2) / (e1 + e2) ** 2
    return out


class CappedChi:
    """Transition with x*chi'/chi capped at `cap` outside a thin inner sliver.

    On (1 + sliver, 2) the value is exp(K * log(x/2) * F(x)) where F steps
    smoothly from 1 down to 0 on (2 - top_width, 2), making the junction at
    x = 2 flat to all orders; K is calibrated so the log-slope never exceeds
    `cap`.  The sliver (1, 1 + sliver) carries the rise from exactly 0.
    """

    def __init__(self, cap: float = 1.55, sliver: float = 1e-9, top_width: float = 0.5):
        self.cap = float(cap)
        self.sliver = float(sliver)
        self.top_width = float(top_width)
        # Calibrate K: the log-slope in the middle is K * (F + x log(x/2) F').
        xs = np.linspace(1.0 + 1e-6, 2.0 - 1e-12, 20001)
        scale = np.max(self._bracket(xs))
        self.k_exponent = self.cap / scale

    def _f_top(self, x):
        return _flat_step((2.0 - np.asarray(x, dtype=float)) / self.top_width)

    def _f_top_deriv(self, x):
        return -_flat_step_deriv((2.0 - np.asarray(x, dtype=float)) / self.top_width) / self.top_width

    def _bracket(self, x):
        # x * d/dx [-log(x/2) F(x)] with sign flipped; >= 0 by monotonicity.
        x = np.asarray(x, dtype=float)
        return self._f_top(x) + x * np.log(x / 2.0) * self._f_top_deriv(x)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x >= 2.0, 1.0, 0.0)
        mid = (x > 1.0) & (x < 2.0)
        if np.any(mid):
            xm = x[mid]
            body = np.exp(self.k_exponent * np.log(xm / 2.0) * self._f_top(xm))
            ramp = _flat_step((xm - 1.0) / self.sliver)
            out[mid] = body * ramp
        return out

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        mid = (x > 1.0) & (x < 2.0)
        if np.any(mid):
            xm = x[mid]
            g = np.log(xm / 2.0) * self._f_top(xm)
            gp = self._f_top(xm) / xm + np.log(xm / 2.0) * self._f_top_deriv(xm)
            body = np.exp(self.k_exponent * g)
            t = (xm - 1.0) / self.sliver
            ramp = _flat_step(t)
            ramp_p = _flat_step_deriv(t) / self.sliver
            out[mid] = body * (self.k_exponent * gp * ramp + ramp_p)
        return out


class SmoothstepChi:
    """Cubic smoothstep in log2(x) on [1, 2].

    Simple but its logarithmic derivative diverges at the inner edge, so it
    fails the sampled sqrt(22) bound; kept as a named preset for negative
    tests and comparisons, never shipped as a default.
    """

    def value(self, x):
        u = np.clip(np.log2(np.clip(np.asarray(x, dtype=float), 1e-300, None)), 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        mid = (x > 1.0) & (x < 2.0)
        if np.any(mid):
            xm = x[mid]
            u = np.log2(xm)
            out[mid] = 6.0 * u * (1.0 - u) / (xm * np.log(2.0))
        return out


CHI_PRESETS = {
    "capped": CappedChi(),
    "smoothstep": SmoothstepChi(),
}


@dataclass(frozen=True)
class PotentialSpec:
    """Power-law potential a(r) = r**(gamma+2) with optional cutoff eps > 0."""

    gamma: float = -3.0
    epsilon: float = 0.0
    chi: str = "capped"

    def __post_init__(self):
        if not -3.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [-3, 1], got {self.gamma}")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if self.chi not in CHI_PRESETS:
            raise ValueError(f"unknown chi preset {self.chi!r}")

    @property
    def chi_fn(self):
        return CHI_PRESETS[self.chi]

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "epsilon": self.epsilon, "chi": self.chi}

    @classmethod
    def from_dict(cls, d: dict) -> "PotentialSpec":
        return cls(gamma=float(d["gamma"]), epsilon=float(d.get("epsilon", 0.0)),
                   chi=str(d.get("chi", "capped")))


def eval_a(r, spec: PotentialSpec):
    """Potential a_eps(r); scalar in, scalar out (arrays broadcast)."""
    scalar = np.isscalar(r) or getattr(r, "ndim", 0) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r < 0):
        raise ValueError("r must be >= 0")
    p = spec.gamma + 2.0
    out = np.zeros_like(r)
    if spec.epsilon == 0.0:
        if np.any(r == 0.0) and p < 0:
            raise ValueError("Coulomb-type potential singular at r = 0 without cutoff")
        np.power(r, p, out=out)
    else:
        chi = spec.chi_fn.value(r / spec.epsilon)
        live = chi > 0.0
        out[live] = chi[live] * r[live] ** p
    return float(out[0]) if scalar else out


def eval_a_deriv(r, spec: PotentialSpec):
    """d a_eps / dr, analytic (uses the chi derivative inside the transition)."""
    scalar = np.isscalar(r) or getattr(r, "ndim", 0) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    p = spec.gamma + 2.0
    out = np.zeros_like(r)
    if spec.epsilon == 0.0:
        if np.any(r == 0.0) and p < 1:
            raise ValueError("derivative singular at r = 0 without cutoff")
        out = p * r ** (p - 1.0)
    else:
        x = r / spec.epsilon
        chi = spec.chi_fn.value(x)
        dchi = spec.chi_fn.deriv(x)
        live = (chi > 0.0) | (dchi > 0.0)
        rl = r[live]
        out[live] = dchi[live] / spec.epsilon * rl**p + chi[live] * p * rl ** (p - 1.0)
    return float(out[0]) if scalar else out


def project_matrix(z):
    """Projection Pi(z) = I - zz^T/|z|^2 orthogonal to z.  Requires z != 0."""
    z = np.asarray(z, dtype=float)
    r2 = float(z @ z)
    if r2 == 0.0:
        raise ValueError("projection undefined for the zero vector")
    return np.eye(3) - np.outer(z, z) / r2


def eval_A(z, spec: PotentialSpec):
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = eval_a(r, spec)
    if a == 0.0:
        return np.zeros((3, 3))
    return a * project_matrix(z)


def eval_B(z, spec: PotentialSpec):
    """Divergence of A: -2 a_eps(r) z / r^2 (equals -2z/|z|^3 for pure Coulomb)."""
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = eval_a(r, spec)
    if a == 0.0:
        return np.zeros(3)
    return -2.0 * a * z / r**2


def sqrt_A(z, spec: PotentialSpec):
    """Unique PSD square root of A: sqrt(a_eps) * Pi (Pi is idempotent)."""
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = eval_a(r, spec)
    if a == 0.0:
        return np.zeros((3, 3))
    return np.sqrt(a) * project_matrix(z)


def grad_A(z, spec: PotentialSpec):
    """d A_{ab} / d z_c as array [c, a, b]."""
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = eval_a(r, spec)
    ap = eval_a_deriv(r, spec)
    if a == 0.0 and ap == 0.0:
        return np.zeros((3, 3, 3))
    zh = z / r
    pi = project_matrix(z)
    eye = np.eye(3)
    dpi = (-(np.einsum("ca,b->cab", eye, z) + np.einsum("cb,a->cab", eye, z)) / r**2
           + 2.0 * np.einsum("a,b,c->cab", z, z, z) / r**4)
    return ap * np.einsum("c,ab->cab", zh, pi) + a * dpi


def grad_B(z, spec: PotentialSpec):
    """d B_b / d z_c as array [c, b]."""
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = eval_a(r, spec)
    ap = eval_a_deriv(r, spec)
    if a == 0.0 and ap == 0.0:
        return np.zeros((3, 3))
    zh = z / r
    eye = np.eye(3)
    return -2.0 * (ap * np.outer(zh, z) / r**2 + a * eye / r**2
                   - 2.0 * a * np.outer(z, z) / r**4)


@dataclass
class KernelValue:
    """Bundle of all kernel factors at a single relative velocity."""

    a: float
    Pi: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sqrtA: np.ndarray


def kernel_value(z, spec: PotentialSpec) -> KernelValue:
    z = np.asarray(z, dtype=float)
    r = float(np.linalg.norm(z))
    a = float(eval_a(r, spec))
    if a == 0.0 and r > 0.0:
        pi = project_matrix(z)
        zero = np.zeros((3, 3))
        return KernelValue(a=0.0, Pi=pi, A=zero.copy(), B=np.zeros(3), sqrtA=zero.copy())
    pi = project_matrix(z)
    return KernelValue(a=a, Pi=pi, A=a * pi, B=-2.0 * a * z / r**2, sqrtA=np.sqrt(a) * pi)


# ---------------------------------------------------------------------------
# Batched evaluation used by the simulator and the dissipation functionals.
# ---------------------------------------------------------------------------

def a_batch(r, spec: PotentialSpec):
    """a_eps over an array of radii; entries with r == 0 map to 0 (eps > 0)."""
    r = np.asarray(r, dtype=float)
    p = spec.gamma + 2.0
    out = np.zeros_like(r)
    if spec.epsilon == 0.0:
        pos = r > 0.0
        out[pos] = r[pos] ** p
    else:
        chi = spec.chi_fn.value(r / spec.epsilon)
        live = (chi > 0.0) & (r > 0.0)
        out[live] = chi[live] * r[live] ** p
    return out


def a_deriv_batch(r, spec: PotentialSpec):
    r = np.asarray(r, dtype=float)
    p = spec.gamma + 2.0
    out = np.zeros_like(r)
    if spec.epsilon == 0.0:
        pos = r > 0.0
        out[pos] = p * r[pos] ** (p - 1.0)
    else:
        x = r / spec.epsilon
        chi = spec.chi_fn.value(x)
        dchi = spec.chi_fn.deriv(x)
        live = ((chi > 0.0) | (dchi > 0.0)) & (r > 0.0)
        rl = r[live]
        out[live] = dchi[live] / spec.epsilon * rl**p + chi[live] * p * rl ** (p - 1.0)
    return out


def verify_log_derivative_bound(spec: PotentialSpec, n_grid: int = 4096,
                                r_max: float = 1e4):
    """Sampled sup of r |da_eps/dr| / a_eps over a log-spaced grid.

    Returns (max_ratio, ok) where ok means the sampled sup stays at or below
    sqrt(22).  Points where a_eps == 0 are excluded (the flow is inert there).
    """
    r_min = spec.epsilon / 4.0 if spec.epsilon > 0.0 else 1e-4
    r = np.logspace(np.log10(r_min), np.log10(r_max), n_grid)
    a = a_batch(r, spec)
    ap = a_deriv_batch(r, spec)
    live = a > 0.0
    ratio = np.zeros_like(r)
    ratio[live] = r[live] * np.abs(ap[live]) / a[live]
    max_ratio = float(ratio.max()) if np.any(live) else 0.0
    return max_ratio, max_ratio <= LOG_SLOPE_LIMIT


def shipped_specs(chi: str = "capped"):
    """The preset grid: gamma in {-3,...,1} x eps in {0.25, 1}."""
    return [PotentialSpec(gamma=g, epsilon=e, chi=chi)
            for g in (-3.0, -2.0, -1.0, 0.0, 1.0) for e in (0.25, 1.0)]
