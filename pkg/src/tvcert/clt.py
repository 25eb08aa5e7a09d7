"""Normal approximation in total variation for normalised i.i.d. sums.

S_n = (Y_1 + ... + Y_n) / sqrt(n) with Y standardised to mean 0 and unit
covariance.  The characteristic function of S_n is phi(u / sqrt n)^n; it is
inverted on a grid and compared with the standard Gaussian.  The remaining
functions evaluate the three-case tail bound for phi_{S_n} and its ingredients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .distkit import (
    Affine,
    CharFn,
    Gaussian,
    Laplace,
    LaplaceMixture,
    TailEnvelope,
    dist_from_json,
    fit_tail_envelope,
    invert_cf_to_density,
    make_rng,
)
from .errors import TvcertError
from .metrics import sup_density_dist, tv_grid

SHORTHANDS = {
    "gaussian": {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]},
    "laplace": {"family": "laplace", "lambda": math.sqrt(2.0)},
    "laplace_mixture": {"family": "laplace_mixture", "K": 100},
}


def resolve_base(obj):
    """A DistSpec from a shorthand name, JSON text, dict or DistSpec."""
    if isinstance(obj, str):
        if obj in SHORTHANDS:
            return dist_from_json(SHORTHANDS[obj])
        import json

        return dist_from_json(json.loads(obj))
    return dist_from_json(obj)


@dataclass
class CltBase:
    """A law standardised to mean 0 and unit variance, with its CF envelope
    (C_sharp, alpha = d + gamma) and absolute moments E|Y|^k."""

    spec: object
    cf: CharFn
    envelope: TailEnvelope | None
    moments: dict = field(default_factory=dict)
    raw: object = None

    @property
    def dim(self):
        return self.cf.dim

    @property
    def c_sharp(self):
        return max(1.0, self.envelope.c_phi)

    @property
    def alpha(self):
        return self.envelope.dim + self.envelope.gamma

    @classmethod
    def build(cls, base, k_max=8, u_window=(1.0, 1e3), fit=True):
        raw = resolve_base(base)
        if raw.dim != 1:
            raise TvcertError("unsupported_dimension", "the CLT harness works in d = 1")
        mu = float(np.atleast_1d(raw.mean())[0])
        var = float(np.atleast_2d(raw.cov())[0, 0])
        if not var > 0:
            raise TvcertError("invalid_spec", "base law has zero variance")
        if mu == 0 and var == 1:
            spec = raw
        else:
            spec = Affine(raw, loc=-mu / math.sqrt(var), scale=1 / math.sqrt(var))
        m = float(np.atleast_1d(spec.mean())[0])
        v = float(np.atleast_2d(spec.cov())[0, 0])
        if abs(m) > 1e-12 or abs(v - 1) > 1e-10:
            raise TvcertError("standardisation_failed", f"mean {m}, variance {v}")
        env = fit_tail_envelope(spec.charfn(), 1, u_window=u_window) if fit else None
        moments = {k: float(spec.moment(float(k))) for k in range(1, k_max + 1)}
        return cls(spec, spec.charfn(), env, moments, raw)


def _base(obj):
    return obj if isinstance(obj, CltBase) else CltBase.build(obj)


def sn_cf(base, n, u):
    """phi_{S_n}(u) = phi(u / sqrt n)^n, computed through modulus and phase."""
    b = _base(base)
    if int(n) < 1:
        raise TvcertError("invalid_count", "n must be >= 1")
    out = b.cf.power_scaled(int(n))(u)
    return complex(out) if np.ndim(out) == 0 else out


def _sn_tail_integral(b, n, U):
    """int_{|u| > U} |phi_{S_n}(u)| du bounded through the envelope of phi.

    With a = d + gamma the envelope of phi_{S_n} is
    min(1, C (1 + u/sqrt n)^-a)^n, which integrates in closed form.
    """
    env = b.envelope
    C, a, root = env.c_phi, env.dim + env.gamma, math.sqrt(n)
    if a * n <= 1:
        return float("inf")
    ustar = max(0.0, root * (C ** (1 / a) - 1))
    flat = max(0.0, ustar - U)
    start = max(U, ustar)
    log_tail = math.log(root) + n * math.log(C) + (1 - a * n) * math.log1p(start / root) - math.log(a * n - 1)
    tail = math.exp(min(log_tail, 700.0))
    return 2 * (flat + tail)


def sn_cutoff(base, n, tol=1e-8, u_max=2e6):
    """Smallest power-of-two-spaced cutoff whose pointwise truncation error
    (1/2pi) int_{|u|>U} |phi_{S_n}| is at most ``tol`` (capped at ``u_max``)."""
    b = _base(base)
    U = 16.0
    while U < u_max and _sn_tail_integral(b, n, U) / (2 * math.pi) > tol:
        U *= 2
    U = min(U, u_max)
    return U, _sn_tail_integral(b, n, U) / (2 * math.pi)


@dataclass
class GaussianGap:
    n: int
    tv: float
    supdist: float
    tv_trunc_err: float
    u_cutoff: float

    def to_json(self):
        return self.__dict__.copy()


def tv_to_gaussian(base, n, box=8.0, grid_pts=2**12, tol=1e-8, u_max=2e6, mass_tol=1e-4):
    """d_TV(S_n, N(0,1)) and the sup-density distance on the box [-box, box].

    ``tv_trunc_err`` bounds the effect of the frequency cutoff on the TV value
    (box length times the pointwise error, for both densities) plus the mass
    outside the box.
    """
    b = _base(base)
    n = int(n)
    if isinstance(b.raw, Gaussian):
        U, point_err = float("inf"), 0.0
    else:
        U, point_err = sn_cutoff(b, n, tol, u_max)
    gauss = Gaussian().charfn()
    lo, hi = -float(box), float(box)
    cutoff = None if not math.isfinite(U) else U
    fg = invert_cf_to_density(gauss, lo, hi, grid_pts, u_cutoff=cutoff)
    fs = invert_cf_to_density(b.cf.power_scaled(n), lo, hi, grid_pts, u_cutoff=cutoff, mass_tol=mass_tol)
    tv = tv_grid(fs, fg)
    sup = sup_density_dist(fs, fg)
    err = (hi - lo) * point_err + fs.out_of_box_mass + fg.out_of_box_mass
    return GaussianGap(n, tv, sup, err, float(fs.meta["u_cutoff"]))


@dataclass
class RateFit:
    slope: float
    intercept: float
    band: float
    n_points: int

    @property
    def interval(self):
        return (self.slope - self.band, self.slope + self.band)


def rate_fit(series):
    """Least-squares slope of log(value) against log(n), with a 2-sigma band."""
    ns = np.array([s[0] for s in series], dtype=float)
    vals = np.array([s[1] for s in series], dtype=float)
    if ns.size < 4:
        raise TvcertError("too_few_points", "rate fit needs at least 4 points")
    if np.any(vals <= 0) or np.any(ns <= 0):
        raise TvcertError("log_domain", "values and n must be positive")
    x, y = np.log(ns), np.log(vals)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(1, x.size - 2)
    s2 = float(resid @ resid) / dof
    se = math.sqrt(s2 / float(((x - x.mean()) ** 2).sum()))
    return RateFit(float(coef[0]), float(coef[1]), 2 * se, int(x.size))


@dataclass
class MomentCheck:
    k: int
    n_list: list
    estimates: list
    errors: list

    @property
    def sup(self):
        return max(self.estimates)


def moment_check(base, k, n_list, paths=20000, seed=0, chunk=2**22):
    """Monte-Carlo E|S_n|^(2k) for each n, with standard errors."""
    b = _base(base)
    k = int(k)
    ests, errs = [], []
    for i, n in enumerate(n_list):
        n = int(n)
        rng = make_rng(seed, (7, i))
        s = np.zeros(paths)
        per = max(1, chunk // paths)
        done = 0
        while done < n:
            m = min(per, n - done)
            s += b.spec.draw(m * paths, rng).reshape(m, paths).sum(axis=0)
            done += m
        v = np.abs(s / math.sqrt(n)) ** (2 * k)
        ests.append(float(v.mean()))
        errs.append(float(v.std(ddof=1) / math.sqrt(paths)))
    return MomentCheck(k, [int(n) for n in n_list], ests, errs)


def c2_search(base, step=1e-4, slack=4e-16):
    """Largest c in (0, 1] with |phi(x)| <= 1 - x^2/3 <= exp(-x^2/4) on |x| <= c.

    Both inequalities are checked on a grid of spacing ``step`` on each side of
    zero; ``slack`` absorbs rounding where the first holds with equality.
    """
    b = _base(base)
    x = np.arange(1, int(round(1 / step)) + 1) * step
    q = 1 - x * x / 3
    ok = (np.abs(b.cf(x)) <= q + slack) & (np.abs(b.cf(-x)) <= q + slack) & (q <= np.exp(-x * x / 4) + slack)
    if not ok[0]:
        raise TvcertError("no_small_u_radius", "no positive radius passes the small-u audit")
    bad = np.flatnonzero(~ok)
    return float(x[-1] if bad.size == 0 else x[bad[0] - 1])


def rho_estimate(cf, c, search_limit=1e3, envelope=None, n_grid=20001):
    """sup_{|u| >= c} |phi(u)|: refined grid search on [c, search_limit] combined
    with the envelope bound beyond it."""
    cf = CharFn.of(cf.cf if isinstance(cf, CltBase) else cf)
    if not c > 0:
        raise TvcertError("invalid_radius", "c must be positive")
    d = cf.dim
    r = np.concatenate([np.linspace(c, min(search_limit, 10 * c + 10), n_grid), np.geomspace(c, search_limit, n_grid)])
    r = np.unique(r)
    from .distkit import _radial_modulus

    m = _radial_modulus(cf, d, r)
    i = int(np.argmax(m))
    best = float(m[i])
    a, b = r[max(i - 1, 0)], r[min(i + 1, r.size - 1)]
    if b > a:
        res = optimize.minimize_scalar(
            lambda t: -float(_radial_modulus(cf, d, np.array([t]))[0]),
            bounds=(a, b),
            method="bounded",
            options={"xatol": 1e-13},
        )
        best = max(best, -float(res.fun))
    if best >= 1 - 1e-12:
        raise TvcertError("lattice_suspected", f"|phi| reaches {best:.15g} for |u| >= {c}", value=best)
    if envelope is None:
        envelope = fit_tail_envelope(cf, d)
    beyond = float(envelope.c_phi * (1 + search_limit) ** (-d - envelope.gamma))
    return max(best, beyond)


@dataclass
class BundiBound:
    l: int
    c2: float
    J: float
    N_hat: float
    rho: float
    N_tilde: int
    H_l: float
    c_sharp: float
    alpha: float

    @property
    def N(self):
        return max(self.N_tilde, math.ceil(self.N_hat))

    def to_json(self):
        d = self.__dict__.copy()
        d["N"] = self.N
        return d


def crossover(rho, J, l, n_max=10**7):
    """Smallest n >= 1 with rho^n <= (1 + J n)^-l.

    n log rho + l log(1 + J n) is concave in n, so the inequality then holds
    for every larger n.
    """
    h = lambda n: n * math.log(rho) + l * math.log1p(J * n)  # noqa: E731
    lo, hi = 1, 1
    while h(hi) > 0:
        hi *= 2
        if hi > n_max:
            raise TvcertError("below_crossover", "no crossover below the search limit")
    if hi == 1:
        return 1
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if h(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def bundi_constants(base, l) -> BundiBound:
    b = _base(base)
    l = int(l)
    if l < 1:
        raise TvcertError("invalid_order", "l must be >= 1")
    c2 = c2_search(b)
    rho = rho_estimate(b.cf, c2, envelope=b.envelope)
    C = b.c_sharp
    alpha = b.alpha
    J = C ** (2 / alpha)
    N_hat = 2 * l / alpha
    N_tilde = crossover(rho, J, l)
    H = math.e**3 * math.factorial(l)
    return BundiBound(l, c2, J, N_hat, rho, N_tilde, H, C, alpha)


def bundi_bound(base, l, n, u, constants=None):
    """Piecewise bound on |phi_{S_n}(u)| and the case label.

    small:    |u| <= c2 sqrt n       e^3 l! / (1 + |u|)^l
    large:    |u| >= J n             2^l / (1 + |u|)^l
    moderate: otherwise              rho^n
    """
    k = constants or bundi_constants(base, l)
    n = int(n)
    if n < k.N:
        raise TvcertError("below_crossover", f"n={n} is below N({l}) = {k.N}", required=k.N)
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    small = a <= k.c2 * math.sqrt(n)
    large = a >= k.J * n
    val = np.where(small, k.H_l / (1 + a) ** k.l, np.where(large, 2.0**k.l / (1 + a) ** k.l, k.rho**n))
    label = np.where(small, "small", np.where(large, "large", "moderate"))
    if val.ndim == 0:
        return float(val), str(label)
    return val, label


def bundi_audit(base, l, n_values, u_per_case=1000):
    """Count points where the piecewise bound falls below |phi_{S_n}|."""
    b = _base(base)
    k = bundi_constants(b, l)
    violations, checked = 0, 0
    for n in n_values:
        lo_s, hi_s = 0.0, k.c2 * math.sqrt(n)
        lo_l = k.J * n
        pts = np.concatenate(
            [
                np.linspace(lo_s, hi_s, u_per_case),
                np.linspace(hi_s, lo_l, u_per_case),
                np.geomspace(lo_l, 1e3 * lo_l, u_per_case),
            ]
        )
        pts = np.concatenate([pts, -pts])
        bound, _ = bundi_bound(b, l, n, pts, constants=k)
        actual = np.abs(sn_cf(b, n, pts))
        violations += int(np.sum(actual > bound * (1 + 1e-12)))
        checked += pts.size
    return violations, checked, k
