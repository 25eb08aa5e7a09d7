"""Certified total-variation bounds from Fortet-Mourier bounds.

Every bound here is obtained by replaying a smoothing argument with explicit
constants.  With A a rescaled metric bound and M >= 1 a cutoff radius,

    sup |f1 - f2| <= (2 pi)^-d int |phi1 - phi2|
                  <= [mass of the low band] + [envelope tail beyond M]

and the total variation follows from integrating that sup bound over a ball and
adding a Markov tail.  Three variants differ in how |phi1 - phi2| is controlled
on the low band:

    fm      |phi1 - phi2| <= (1 + |u|)   A,   A = 4 d_FM
    dk(k)   |phi1 - phi2| <= (1 + |u|)^k A,   A = 2 d_k
    cf      |phi1 - phi2| <=             A,   A = d_CF

``paper_faithful`` mode covers balls by cubes and drops the (2 pi)^-d factor;
``tight`` mode keeps the factor and uses the exact unit-ball volume.  Both are
valid; tight is never larger.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import integrate, special

from .distkit import CharFn, TailEnvelope, ball_surface, ball_volume, invert_cf_to_density
from .errors import TvcertError

MODES = ("paper_faithful", "tight")
ORDER_CAP = 10**4


def _version():
    from . import __version__

    return __version__


def parse_variant(variant):
    """``"fm"``, ``"cf"``, ``"dk:3"`` or ``("dk", 3)`` -> (name, k)."""
    if isinstance(variant, tuple):
        name, k = variant
        return name, int(k)
    v = str(variant)
    if v in ("fm", "cf"):
        return v, 1 if v == "fm" else 0
    if v.startswith("dk"):
        try:
            k = int(v.split(":", 1)[1])
        except (IndexError, ValueError):
            raise TvcertError("invalid_variant", f"cannot read order from {v!r}") from None
        if k < 1:
            raise TvcertError("invalid_variant", "dk order must be >= 1")
        return "dk", k
    raise TvcertError("invalid_variant", f"unknown variant {v!r}")


def _variant_label(name, k):
    return f"dk:{k}" if name == "dk" else name


def _band_power(name, k):
    """Power of (1 + |u|) multiplying A on the low band."""
    return {"fm": 1, "dk": k, "cf": 0}[name]


def _metric_multiplier(name):
    """A = multiplier * metric."""
    return {"fm": 4, "dk": 2, "cf": 1}[name]


def _check_regularity(d, gamma, delta):
    if int(d) != d or d < 1:
        raise TvcertError("invalid_regularity", "d must be a positive integer")
    if not gamma > 0:
        raise TvcertError("invalid_regularity", f"gamma must be positive, got {gamma}")
    if not delta > 0:
        raise TvcertError("invalid_regularity", f"delta must be positive, got {delta}")


def exponent_g(d, gamma, delta, variant="fm"):
    """gamma delta / ((d + p + gamma)(d + delta)) with p = 1, k or 0.

    Evaluated in exact rational arithmetic from the binary values of the
    inputs, then rounded once, so the float is correctly rounded.
    """
    _check_regularity(d, gamma, delta)
    name, k = parse_variant(variant)
    p = _band_power(name, k)
    G, D = Fraction(gamma), Fraction(delta)
    return float(G * D / ((d + p + G) * (d + D)))


def sup_exponent(d, gamma, variant="fm"):
    """Exponent of the sup-density bound, gamma / (d + p + gamma)."""
    _check_regularity(d, gamma, 1.0)
    name, k = parse_variant(variant)
    p = _band_power(name, k)
    G = Fraction(gamma)
    return float(G / (d + p + G))


@dataclass
class Ledger:
    a_d: float
    C_gamma: float
    G_tilde: float
    G_prime: float
    G: float
    g: float
    g_bar: float
    mode: str
    variant: str

    def as_dict(self):
        return asdict(self)


def constants_from_proof(d, gamma, delta, c_phi, c_f, mode="paper_faithful", variant="fm") -> Ledger:
    """The constants chain a_d -> C_gamma -> G_tilde -> G' -> G.

    With A <= 1 and the cutoff M = A^(-1/(d+p+gamma)) the sup bound is
    G_tilde A^g_bar.  Integrating it over the ball of radius
    M = A^(-gamma/((d+p+gamma)(d+delta))) and adding the Markov tail
    2 c_f M^-delta gives G' A^g.
    For A > 1 the trivial bound 2 <= 2 A^g is merged in through
    G = 2 m^g + m^g G', where A = m * metric.
    """
    _check_regularity(d, gamma, delta)
    if mode not in MODES:
        raise TvcertError("invalid_mode", f"mode must be one of {MODES}")
    name, k = parse_variant(variant)
    p = _band_power(name, k)
    m = _metric_multiplier(name)
    a_d = ball_surface(d)
    C_gamma = a_d / gamma
    tail = 2 * C_gamma * c_phi
    if mode == "paper_faithful":
        # int_{|u|<=M} (1+|u|)^p A du <= (2M)^p (2M)^d A for M >= 1
        G_tilde = 2 ** (d + p) + tail
        G_prime = 2**d * G_tilde + 2 * c_f
    else:
        V = ball_volume(d)
        G_tilde = (2 * math.pi) ** (-d) * (2**p * V + tail)
        G_prime = V * G_tilde + 2 * c_f
    g = exponent_g(d, gamma, delta, variant)
    G = 2 * m**g + m**g * G_prime
    return Ledger(a_d, C_gamma, G_tilde, G_prime, G, g, sup_exponent(d, gamma, variant), mode, _variant_label(name, k))


def density_sup_bound(d, gamma, c_phi, mode="paper_faithful"):
    """sup f <= (2 pi)^-d int c_phi (1+|u|)^(-d-gamma) du = (2 pi)^-d c_phi a_d B(d, gamma)."""
    val = c_phi * ball_surface(d) * special.beta(d, gamma)
    return float(val if mode == "paper_faithful" else (2 * math.pi) ** (-d) * val)


def pool_envelopes(*envs):
    for e in envs:
        if not e.certified:
            raise TvcertError("uncertified_envelope", "tail envelope failed its audit")
    dims = {e.dim for e in envs}
    if len(dims) != 1:
        raise TvcertError("dimension_mismatch", "envelopes of different dimensions")
    return max(e.c_phi for e in envs), min(e.gamma for e in envs), dims.pop()


def pool_moments(*moms):
    return max(m.c_f for m in moms), min(m.delta for m in moms)


@dataclass
class TvCertificate:
    d: int
    variant: str
    mode: str
    gamma: float
    c_phi: float
    delta: float
    c_f: float
    input_metric: float
    A: float
    ledger: Ledger
    tv_raw: float
    tv_bound: float
    supdensity_bound: float
    branch: str
    version: str = field(default_factory=_version)

    @property
    def g(self):
        return self.ledger.g

    @property
    def g_bar(self):
        return self.ledger.g_bar

    @property
    def capped(self):
        return self.tv_raw > 2

    def to_json(self):
        out = {
            "kind": "tv_certificate",
            "version": self.version,
            "d": self.d,
            "variant": self.variant,
            "mode": self.mode,
            "inputs": {
                "metric_upper": self.input_metric,
                "gamma": self.gamma,
                "c_phi": self.c_phi,
                "delta": self.delta,
                "c_f": self.c_f,
            },
            "ledger": self.ledger.as_dict(),
            "A": self.A,
            "branch": self.branch,
            "tv_raw": self.tv_raw,
            "tv_bound": self.tv_bound,
            "supdensity_bound": self.supdensity_bound,
        }
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def certificate_from_params(metric_upper, d, gamma, c_phi, delta, c_f, variant="fm", mode="paper_faithful"):
    """TV and sup-density bounds from already pooled regularity parameters."""
    metric_upper = float(metric_upper)
    if metric_upper < 0 or not math.isfinite(metric_upper):
        raise TvcertError("invalid_input", "metric bound must be finite and nonnegative")
    ledger = constants_from_proof(d, gamma, delta, c_phi, c_f, mode, variant)
    name, k = parse_variant(variant)
    A = _metric_multiplier(name) * metric_upper
    if metric_upper == 0:
        raw, sup, branch = 0.0, 0.0, "identical"
    elif A <= 1:
        raw = ledger.G_prime * A**ledger.g
        sup = ledger.G_tilde * A**ledger.g_bar
        branch = "A<=1"
    else:
        raw = ledger.G * metric_upper**ledger.g
        sup = density_sup_bound(d, gamma, c_phi, mode)
        branch = "A>1"
    sup = min(sup, density_sup_bound(d, gamma, c_phi, mode)) if metric_upper > 0 else sup
    return TvCertificate(
        d=int(d),
        variant=ledger.variant,
        mode=mode,
        gamma=float(gamma),
        c_phi=float(c_phi),
        delta=float(delta),
        c_f=float(c_f),
        input_metric=metric_upper,
        A=A,
        ledger=ledger,
        tv_raw=float(raw),
        tv_bound=float(min(2.0, raw)),
        supdensity_bound=float(sup),
        branch=branch,
    )


def tv_certificate(fm_upper, env1, env2, mom1, mom2, variant="fm", mode="paper_faithful") -> TvCertificate:
    """Certified d_TV and sup-density bounds for two laws.

    ``fm_upper`` bounds the metric of the chosen variant (d_FM, d_k or d_CF).
    Envelopes and moments are pooled to the worst case, since the argument
    needs one (c_phi, gamma, c_f, delta) valid for both laws.
    """
    c_phi, gamma, d = pool_envelopes(env1, env2)
    c_f, delta = pool_moments(mom1, mom2)
    return certificate_from_params(fm_upper, d, gamma, c_phi, delta, c_f, variant, mode)


# ------------------------------------------------------------ order selection


def _as_fraction(x):
    """Decimal reading of a float (0.1 -> 1/10), exact for ints and Fractions."""
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def orders_feasible(k, l, epsilon, d):
    eps = _as_fraction(epsilon)
    return Fraction(k * l, (d + 1 + l) * (d + k)) > 1 - eps


def choose_orders(epsilon, d=1, cap=ORDER_CAP):
    """Smallest (k, l) (by k + l, then l, then k) with kl / ((d+1+l)(d+k)) > 1 - epsilon.

    For each l the least feasible k solves a linear inequality exactly:
    k l > c (d+1+l)(d+k) with c = 1 - epsilon.
    """
    eps = _as_fraction(epsilon)
    if not 0 < eps < 1:
        raise TvcertError("invalid_epsilon", "epsilon must lie in (0, 1)")
    c = 1 - eps
    best = None
    for l in range(1, cap + 1):
        slope = l - c * (d + 1 + l)
        if slope <= 0:
            continue
        # k * slope > c (d+1+l) d
        k = math.floor(c * (d + 1 + l) * d / slope) + 1
        k = max(k, 1)
        if k > cap:
            continue
        key = (k + l, l, k)
        if best is None or key < best:
            best = key
        if best is not None and l > best[0]:
            break
    if best is None:
        raise TvcertError("order_cap_exceeded", f"no (k, l) <= {cap} for epsilon={epsilon}")
    _, l, k = best
    assert orders_feasible(k, l, eps, d)
    return k, l


def corollary_certificate(fm_upper, epsilon, specs, d=1, mode="paper_faithful", variant="fm", u_window=(1.0, 1e3)):
    """Certificate with exponent close to 1 - epsilon, through the regularity orders (k, l).

    The envelope of each law is fitted and then weakened to exponent gamma = l
    (valid whenever the fitted exponent is at least l); moments of order k are
    taken from the laws.
    """
    from .distkit import dist_from_json, fit_tail_envelope, moment_bound

    k, l = choose_orders(epsilon, d)
    envs, moms = [], []
    for s in specs:
        s = dist_from_json(s)
        env = fit_tail_envelope(s.charfn(), d, u_window=u_window)
        if env.gamma < l:
            raise TvcertError(
                "insufficient_decay", f"fitted gamma {env.gamma} below required order l={l}", gamma=env.gamma, l=l
            )
        envs.append(TailEnvelope(env.c_phi, float(l), env.dim, env.u_max_checked, env.certified))
        moms.append(moment_bound(s, k))
    cert = tv_certificate(fm_upper, *envs, *moms, variant=variant, mode=mode)
    return cert, (k, l)


# ------------------------------------------------------- exponential regime


@dataclass
class ExpCertificate:
    d: int
    r: float
    C_r: float
    input_fm: float
    mode: str
    branch: str
    M_sup: float
    M_tv: float
    a_d: float
    band_term: float
    tail_term: float
    markov_term: float
    tv_raw: float
    tv_bound: float
    supdensity_bound: float
    version: str = field(default_factory=_version)

    @property
    def capped(self):
        return self.tv_raw > 2

    def to_json(self):
        d = asdict(self)
        d["kind"] = "exp_certificate"
        return d

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def exp_regime_certificate(fm_upper, r, C_r, d=1, mode="paper_faithful") -> ExpCertificate:
    """Bounds under E exp(r|X_i|) <= C_r and int |phi_i| exp(r|u|) du <= C_r.

    For A = d_FM <= exp(-r):

        sup |f1 - f2| <= S = 8 2^d M^(d+1) A + 2 sqrt(C_r) sqrt(a_d Gamma(d, rM) / r^d),
                             M = 2 |ln A| / r,
        d_TV <= 2^d M^d S + 2 C_r exp(-r M),  M = |ln A| / r.

    The second term of S comes from Cauchy-Schwarz with
    int 2 (|phi1|^2 + |phi2|^2) e^(r|u|) <= 4 C_r and the exact tail integral
    int_{|u|>M} e^(-r|u|) du = a_d Gamma(d, rM) / r^d.  For A > exp(-r) the
    trivial bound 2 <= 2 A e^r is used.  Tight mode keeps (2 pi)^-d and uses
    ball volumes instead of cubes.
    """
    if not (r > 0 and C_r > 0):
        raise TvcertError("invalid_regularity", "r and C_r must be positive")
    if mode not in MODES:
        raise TvcertError("invalid_mode", f"mode must be one of {MODES}")
    A = float(fm_upper)
    if A < 0:
        raise TvcertError("invalid_input", "fm bound must be nonnegative")
    a_d = ball_surface(d)
    cube = 2.0**d if mode == "paper_faithful" else ball_volume(d)
    inv = 1.0 if mode == "paper_faithful" else (2 * math.pi) ** (-d)
    if A == 0:
        return ExpCertificate(d, r, C_r, 0.0, mode, "identical", math.inf, math.inf, a_d, 0, 0, 0, 0.0, 0.0, 0.0)
    if A > math.exp(-r):
        raw = 2 * A * math.exp(r)
        sup = inv * C_r
        return ExpCertificate(
            d, r, C_r, A, mode, "A>exp(-r)", math.nan, math.nan, a_d, 0.0, 0.0, 0.0, raw, min(2.0, raw), sup
        )
    L = abs(math.log(A))
    M = 2 * L / r
    band = inv * 8 * cube * M ** (d + 1) * A
    upper_gamma = float(special.gammaincc(d, r * M) * special.gamma(d))
    tail = inv * 2 * math.sqrt(C_r) * math.sqrt(a_d * upper_gamma / r**d)
    S = band + tail
    Mt = L / r
    markov = 2 * C_r * math.exp(-r * Mt)
    raw = cube * Mt**d * S + markov
    return ExpCertificate(d, r, C_r, A, mode, "A<=exp(-r)", M, Mt, a_d, band, tail, markov, raw, min(2.0, raw), S)


def gaussian_exp_constants(mean, var, r=1.0):
    """C_r for a 1-D Gaussian: max of E exp(r|X|) and int |phi| exp(r|u|) du."""
    from scipy.stats import norm

    s = math.sqrt(var)
    mgf = math.exp(r * mean + r * r * var / 2) * norm.cdf(mean / s + r * s) + math.exp(
        -r * mean + r * r * var / 2
    ) * norm.cdf(r * s - mean / s)
    cf_int = 2 * math.exp(r * r / (2 * var)) * math.sqrt(2 * math.pi / var) * norm.cdf(r / s)
    return max(mgf, cf_int)


# ------------------------------------------------------ dominated convergence


@dataclass
class DominationReport:
    verdict: str
    limit_dominated: bool
    witness: tuple | None
    psi_integral: float
    psi_integral_change: float
    l1_trend: list
    converges_tv: bool
    labels: list

    def to_json(self):
        return asdict(self)


def _psi_integral(psi, d, u_max):
    if d == 1:
        val, _ = integrate.quad(lambda t: float(psi(np.array([t]))[0]), -u_max, u_max, limit=400)
        return val
    r = np.linspace(0, u_max, 4001)
    dirs = np.linspace(0, 2 * math.pi, 64, endpoint=False)
    U = r[:, None, None] * np.stack([np.cos(dirs), np.sin(dirs)], -1)[None]
    ring = psi(U).mean(axis=1) * 2 * math.pi * r
    return float(integrate.trapezoid(ring, r))


def dominated_convergence_check(
    cf_seq,
    psi,
    limit_cf,
    labels=None,
    u_max=200.0,
    n_audit=4001,
    box=(-12.0, 12.0),
    grid_pts=2048,
    trend_tol=1e-6,
    limit_tol=1e-3,
):
    """Audit the domination hypothesis |phi_n| <= psi and measure int |f_n - f|.

    ``psi`` maps frequency arrays to nonnegative values.  The verdict is
    ``dominated`` when every audited |phi_n(u)|, and the limit |phi(u)|, lies
    below psi.  ``converges_tv`` requires the L1 trend to be nonincreasing
    within ``trend_tol`` and to end below ``limit_tol``.
    """
    cfs = [CharFn.of(c) for c in cf_seq]
    limit = CharFn.of(limit_cf)
    d = limit.dim
    labels = list(range(1, len(cfs) + 1)) if labels is None else list(labels)
    if d == 1:
        u = np.linspace(-u_max, u_max, n_audit)
    else:
        side = np.linspace(-u_max, u_max, int(math.sqrt(n_audit)) | 1)
        u = np.stack(np.meshgrid(side, side, indexing="ij"), -1).reshape(-1, 2)
    bound = np.asarray(psi(u), dtype=float)
    slack = 1e-12
    witness = None
    for lab, c in zip(labels, cfs):
        excess = np.abs(c(u)) - bound
        i = int(np.argmax(excess))
        if excess[i] > slack:
            witness = (lab, u[i].tolist() if d > 1 else float(u[i]))
            break
    limit_ok = bool(np.all(np.abs(limit(u)) <= bound + slack))
    I1 = _psi_integral(psi, d, u_max / 2)
    I2 = _psi_integral(psi, d, u_max)
    lo = np.full(d, box[0])
    hi = np.full(d, box[1])
    f = invert_cf_to_density(limit, lo, hi, grid_pts)
    trend = []
    for c in cfs:
        fn = invert_cf_to_density(c, lo, hi, grid_pts)
        trend.append(fn.integrate(np.abs(fn.values - f.values)))
    steps = np.diff(trend) if len(trend) > 1 else np.array([])
    converges = bool(np.all(steps <= trend_tol) and trend and trend[-1] <= limit_tol)
    verdict = "dominated" if witness is None and limit_ok else "not_dominated"
    if witness is None and not limit_ok:
        witness = ("limit", None)
    return DominationReport(verdict, limit_ok, witness, I2, abs(I2 - I1), trend, converges, labels)
