"""Contractive recursions driven by a causal linear process.

    X_{n+1} = nu(X_n) + xi_{n+1},    xi_n = sum_j b_j eps_{n-j}

Noise is drawn in blocks of ``BLOCK`` paths, one counter-based stream per
block, so a path's noise depends only on (seed, path index) and never on how
many paths were requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .certify import constants_from_proof, exponent_g
from .distkit import (
    Gaussian,
    dist_from_json,
    fit_tail_envelope,
    make_rng,
)
from .errors import ConfigError, TvcertError

BLOCK = 4096
FUZZ_PAIRS = 1000

_REGISTRY = {}


def register_map(name, fn, kappa):
    """Register a contraction ``fn`` with declared Lipschitz constant ``kappa``."""
    _REGISTRY[name] = (fn, float(kappa))


@dataclass
class Contraction:
    kind: str
    fn: object
    kappa: float
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.fn(x)

    def to_json(self):
        return {"type": self.kind, **self.params}


def _make_nu(obj, d):
    kind = obj.get("type")
    if kind == "affine":
        A = np.atleast_2d(np.asarray(obj.get("A", [[0.0]]), dtype=float))
        b = np.atleast_1d(np.asarray(obj.get("b", [0.0]), dtype=float))
        if A.shape != (d, d) or b.shape != (d,):
            raise ConfigError("nu.A", f"affine map must be {d}x{d} with offset of length {d}")
        kappa = float(np.linalg.norm(A, 2))
        if d == 1:
            a0, b0 = float(A[0, 0]), float(b[0])
            fn = lambda x: a0 * x + b0  # noqa: E731
        else:
            fn = lambda x: x @ A.T + b  # noqa: E731
        return Contraction("affine", fn, kappa, {"A": A.tolist(), "b": b.tolist()})
    if kind == "scaled_tanh":
        k = float(obj.get("kappa", 0.5))
        return Contraction("scaled_tanh", lambda x: k * np.tanh(x), k, {"kappa": k})
    if kind == "registered":
        name = obj.get("name")
        if name not in _REGISTRY:
            raise ConfigError("nu.name", f"no registered map {name!r}")
        fn, k = _REGISTRY[name]
        return Contraction("registered", fn, k, {"name": name})
    raise ConfigError("nu.type", f"unknown map type {kind!r}")


def _coefficients(obj):
    kind = obj.get("type")
    tol = float(obj.get("tol", 1e-8))
    if not tol > 0:
        raise ConfigError("coeffs.tol", "must be positive")
    if kind == "geometric":
        r = float(obj["ratio"])
        b0 = float(obj.get("b0", 1.0))
        if not abs(r) < 1:
            raise ConfigError("coeffs.ratio", "geometric ratio must satisfy |ratio| < 1")
        # sum_{j > J} |b0| |r|^j = |b0| |r|^(J+1) / (1 - |r|) <= tol
        J = 0
        if r != 0:
            J = max(0, math.ceil(math.log(tol * (1 - abs(r)) / max(abs(b0), 1e-300)) / math.log(abs(r)) - 1))
        b = b0 * r ** np.arange(J + 1)
        total = abs(b0) / (1 - abs(r))
        tail = total - float(np.abs(b).sum())
        return b, total, max(tail, 0.0), tol
    if kind == "explicit":
        b = np.asarray(obj["values"], dtype=float)
        if b.ndim != 1 or b.size == 0:
            raise ConfigError("coeffs.values", "need a nonempty list")
        return b, float(np.abs(b).sum()), 0.0, tol
    raise ConfigError("coeffs.type", f"unknown coefficient type {kind!r}")


@dataclass
class RecursionSpec:
    nu: Contraction
    b: np.ndarray
    innovation: object
    init: object
    kappa: float
    coeff_abs_sum: float
    coeff_tail: float
    coeff_tol: float
    raw: dict = field(default_factory=dict)

    @property
    def J(self):
        return self.b.size - 1

    @property
    def dim(self):
        return self.innovation.dim

    @classmethod
    def from_json(cls, obj, audit_seed=0):
        for key in ("nu", "coeffs", "innovation", "kappa"):
            if key not in obj:
                raise ConfigError(key, "missing")
        innovation = dist_from_json(obj["innovation"])
        d = innovation.dim
        init = dist_from_json(obj.get("init", {"family": "point", "x": [0.0] * d}))
        kappa = obj["kappa"]
        if not isinstance(kappa, (int, float)) or not 0 < kappa < 1:
            raise ConfigError("kappa", "must lie in (0, 1)")
        nu = _make_nu(obj["nu"], d)
        b, total, tail, tol = _coefficients(obj["coeffs"])
        spec = cls(nu, b, innovation, init, float(kappa), total, tail, tol, dict(obj))
        spec.validate(audit_seed)
        return spec

    def validate(self, audit_seed=0):
        if self.b[0] == 0:
            raise TvcertError("invalid_coefficients", "b_0 must be nonzero")
        if not math.isfinite(self.coeff_abs_sum):
            raise TvcertError("invalid_coefficients", "sum |b_j| must be finite")
        if self.nu.kappa > self.kappa * (1 + 1e-12):
            raise TvcertError("contraction_violated", f"map constant {self.nu.kappa} exceeds declared kappa {self.kappa}")
        self.audit_kappa(audit_seed)

    def audit_kappa(self, seed=0, pairs=FUZZ_PAIRS):
        """Check |nu(x) - nu(y)| <= kappa |x - y| on random pairs."""
        rng = make_rng(seed, 10**6)
        d = self.dim
        scale = 10.0 ** rng.uniform(-3, 2, size=pairs)
        shape = (pairs,) if d == 1 else (pairs, d)
        x = rng.standard_normal(shape) * (scale if d == 1 else scale[:, None])
        y = x + rng.standard_normal(shape) * (scale if d == 1 else scale[:, None])
        nx, ny = self.nu(x), self.nu(y)
        if d == 1:
            lhs, rhs = np.abs(nx - ny), np.abs(x - y)
        else:
            lhs, rhs = np.linalg.norm(nx - ny, axis=-1), np.linalg.norm(x - y, axis=-1)
        bad = lhs > self.kappa * rhs * (1 + 1e-10) + 1e-300
        if np.any(bad):
            i = int(np.argmax(bad))
            raise TvcertError("contraction_violated", "declared kappa fails the fuzz audit", x=float(np.ravel(x)[i]))
        return True


def load_recursion(obj):
    if isinstance(obj, RecursionSpec):
        return obj
    return RecursionSpec.from_json(obj)


# --------------------------------------------------------------------- noise


def _block_draws(spec, seed, tag, rows_first, rows_second, paths):
    """Noise for ``paths`` paths: two time-major draws per block.

    ``rows_first`` rows then ``rows_second`` rows are drawn from the block's
    stream, so enlarging the second draw keeps the first and extends the
    second as a prefix.
    """
    d = spec.dim
    out1, out2 = [], []
    for blk in range(math.ceil(paths / BLOCK)):
        rng = make_rng(seed, (tag, blk))
        width = min(BLOCK, paths - blk * BLOCK)
        a = spec.innovation.draw(rows_first * BLOCK, rng) if rows_first else np.zeros((0,) if d == 1 else (0, d))
        c = spec.innovation.draw(rows_second * BLOCK, rng) if rows_second else np.zeros((0,) if d == 1 else (0, d))
        shp = lambda r: (r, BLOCK) if d == 1 else (r, BLOCK, d)  # noqa: E731
        out1.append(np.reshape(a, shp(rows_first))[:, :width])
        out2.append(np.reshape(c, shp(rows_second))[:, :width])
    return np.concatenate(out1, axis=1), np.concatenate(out2, axis=1)


def _init_draws(spec, seed, paths):
    out = []
    for blk in range(math.ceil(paths / BLOCK)):
        rng = make_rng(seed, (2, blk))
        width = min(BLOCK, paths - blk * BLOCK)
        out.append(np.asarray(spec.init.draw(BLOCK, rng))[:width])
    return np.concatenate(out, axis=0)


def _check_finite(x, step):
    bad = ~np.isfinite(x)
    if bad.any():
        flat = bad if bad.ndim == 1 else bad.any(axis=-1)
        pid = int(np.argmax(flat))
        raise TvcertError("divergence_detected", f"nonfinite state at step {step}", path=pid, step=step)


def simulate_recursion(spec, horizon, paths, seed):
    """Forward paths X_0..X_N, returned with shape (N + 1, paths[, d]).

    Innovations for times 1..N are drawn first, then times 0, -1, ..., -J in
    reverse order, so changing J keeps every shared innovation.
    """
    spec = load_recursion(spec)
    N, P = int(horizon), int(paths)
    if N < 1 or P < 1:
        raise TvcertError("invalid_count", "horizon and paths must be >= 1")
    J = spec.J
    fwd, back = _block_draws(spec, seed, 0, N, J + 1, P)
    eps = np.concatenate([back[::-1], fwd], axis=0)  # row i is time i - J
    X = np.empty((N + 1,) + fwd.shape[1:])
    X[0] = _init_draws(spec, seed, P)
    for n in range(N):
        xi = sum(bj * eps[n + 1 - j + J] for j, bj in enumerate(spec.b))
        X[n + 1] = spec.nu(X[n]) + xi
        _check_finite(X[n + 1], n + 1)
    return X


def _backward_noise(spec, seed, horizon, paths):
    """xi_k for k = -horizon+1..0, from innovations drawn for times 0, -1, -2, ...

    Returns an array indexed by s = -k (row s is xi_{-s}).
    """
    J = spec.J
    _, eps_rev = _block_draws(spec, seed, 1, 0, horizon + J, paths)  # row s is time -s
    xi = np.zeros((horizon,) + eps_rev.shape[1:])
    for s in range(horizon):
        for j, bj in enumerate(spec.b):
            xi[s] += bj * eps_rev[s + j]
    return xi


def _run_backward(spec, xi, x0, start):
    """X-bar_0 for the chain started at time -start with value x0."""
    x = x0.copy()
    for s in range(start - 1, -1, -1):  # step to time -s uses xi_{-s}
        x = spec.nu(x) + xi[s]
        _check_finite(x, -s)
    return x


@dataclass
class CouplingResult:
    n: int
    m: int
    x_n: np.ndarray
    x_m: np.ndarray
    gap_mean: float
    gap_se: float
    gap_path: list

    def to_json(self):
        return {"n": self.n, "m": self.m, "gap_mean": self.gap_mean, "gap_se": self.gap_se, "gap_path": self.gap_path}


def _abs(x):
    return np.abs(x) if x.ndim == 1 else np.linalg.norm(x, axis=-1)


def backward_coupling(spec, n, m, paths, seed):
    """Chains started at times -n and -m from X_0, driven by the same xi.

    Both end at time 0; X-bar_0(n) has the law of X_n.  ``gap_path`` holds the
    mean |X-bar_k(n) - X-bar_k(m)| for k = -n..0.
    """
    spec = load_recursion(spec)
    n, m = int(n), int(m)
    if n < 1 or m < n:
        raise TvcertError("invalid_count", "need 1 <= n <= m")
    xi = _backward_noise(spec, seed, m, paths)
    x0 = _init_draws(spec, seed, paths)
    # chain m: run from -m down to -n, then both chains share the remaining steps
    xm = _run_backward_partial(spec, xi, x0, m, n)
    xn = x0.copy()
    gaps = [float(_abs(xn - xm).mean())]
    for s in range(n - 1, -1, -1):
        xn = spec.nu(xn) + xi[s]
        xm = spec.nu(xm) + xi[s]
        _check_finite(xn, -s)
        _check_finite(xm, -s)
        gaps.append(float(_abs(xn - xm).mean()))
    g = _abs(xn - xm)
    se = float(g.std(ddof=1) / math.sqrt(g.size)) if g.size > 1 else 0.0
    return CouplingResult(n, m, xn, xm, float(g.mean()), se, gaps)


def _run_backward_partial(spec, xi, x0, start, stop):
    """Run the chain started at time -start until time -stop."""
    x = x0.copy()
    for s in range(start - 1, stop - 1, -1):
        x = spec.nu(x) + xi[s]
        _check_finite(x, -s)
    return x


@dataclass
class GeometricRate:
    C: float
    rho: float
    kind: str
    details: dict = field(default_factory=dict)

    def __call__(self, n):
        n = np.asarray(n, dtype=float)
        val = self.C * self.rho**n
        return np.minimum(val, 2.0) if self.kind == "tv_certified" else val

    def to_json(self):
        return {"C": self.C, "rho": self.rho, "kind": self.kind, "details": self.details}


def _nu0(spec):
    z = 0.0 if spec.dim == 1 else np.zeros(spec.dim)
    return float(np.linalg.norm(np.atleast_1d(spec.nu(z))))


def w1_geometric_bound(spec, exact_gaussian=False):
    """W1(X_n, mu*) <= 2 kappa^n S with S = E|X_0| + (|nu(0)| + E|xi_0|) / (1 - kappa).

    E|xi_0| is bounded by sum |b_j| E|eps_0|; with ``exact_gaussian`` and a
    centred 1-D Gaussian innovation it is computed exactly from sum b_j^2.
    """
    spec = load_recursion(spec)
    e_eps = spec.innovation.moment(1.0)
    if not math.isfinite(e_eps):
        raise TvcertError("moment_diverges", "innovation has no first moment")
    e_x0 = spec.init.moment(1.0)
    if not math.isfinite(e_x0):
        raise TvcertError("moment_diverges", "initial law has no first moment")
    if exact_gaussian and isinstance(spec.innovation, Gaussian) and spec.dim == 1 and spec.innovation.mean() == 0:
        sq = float(np.sum(spec.b**2))
        e_xi = math.sqrt(2 / math.pi) * math.sqrt(float(spec.innovation.cov()) * sq)
        how = "gaussian_exact_truncated"
    else:
        e_xi = spec.coeff_abs_sum * e_eps
        how = "abs_sum"
    nu0 = _nu0(spec)
    S = e_x0 + (nu0 + e_xi) / (1 - spec.kappa)
    return GeometricRate(2 * S, spec.kappa, "w1", {"S": S, "E_abs_xi": e_xi, "E_abs_x0": e_x0, "nu0": nu0, "xi_method": how})


def certified_tv_rate(spec, innovation_envelope=None, mode="paper_faithful", u_window=(1.0, 1e3)):
    """Geometric TV rate C' rho^n with rho = kappa^g and C' = G C^g.

    The envelope of X_n is c_phi = C_flat (1/|b_0| + 1)^(d + gamma) with the
    innovation envelope (C_flat, gamma); the moment input is delta = 1 with
    c_f = S from the W1 bound.
    """
    spec = load_recursion(spec)
    env = innovation_envelope
    if env is None:
        env = fit_tail_envelope(spec.innovation.charfn(), spec.dim, u_window=u_window)
    if not env.certified:
        raise TvcertError("uncertified_envelope", "innovation envelope failed its audit")
    d, gamma = spec.dim, env.gamma
    b0 = abs(float(spec.b[0]))
    c_phi = env.c_phi * (1 / b0 + 1) ** (d + gamma)
    w1 = w1_geometric_bound(spec)
    S = w1.details["S"]
    ledger = constants_from_proof(d, gamma, 1.0, c_phi, S, mode)
    g = exponent_g(d, gamma, 1.0)
    rho = spec.kappa**g
    C_prime = ledger.G * w1.C**g
    return GeometricRate(
        C_prime,
        rho,
        "tv_certified",
        {"g": g, "c_phi": c_phi, "c_f": S, "G": ledger.G, "C_w1": w1.C, "gamma": gamma, "C_flat": env.c_phi, "mode": mode},
    )


# ----------------------------------------------------------- empirical TV


def _smoothed_density(samples, lo, hi, n_pts, h):
    """Density of the samples convolved with N(0, h^2), by inverting the
    smoothed empirical CF phi_N(u) exp(-h^2 u^2 / 2) on the grid (d = 1)."""
    from .distkit import CharFn, invert_cf_to_density

    cutoff = 9.0 / h
    x = np.asarray(samples, dtype=float)
    emp = CharFn.empirical(x)
    cf = CharFn(lambda u: emp(u) * np.exp(-0.5 * (h * u) ** 2), 1, "empirical", n=x.size)
    return invert_cf_to_density(cf, lo, hi, n_pts, u_cutoff=cutoff, mass_tol=1e-2)


def smoothing_error_bound(spec, h, box_length):
    """Bound on |TV(smoothed) - TV| for the pair of laws on a box of the given length.

    sup |f - f * K_h| <= (1/2pi) int |phi_X(u)| (1 - exp(-h^2 u^2 / 2)) du and
    |phi_{X_n}(u)| <= |phi_eps(b_0 u)|, so the L1 error over the box is at
    most 2 L times that sup.
    """
    b0 = float(spec.b[0])
    cf = spec.innovation.charfn()
    f = lambda u: abs(complex(cf(np.array(b0 * u)))) * (-math.expm1(-0.5 * (h * u) ** 2))  # noqa: E731
    val, _ = integrate.quad(f, 0, np.inf, limit=400)
    return 2 * box_length * (2 * val) / (2 * math.pi)


@dataclass
class TvSeries:
    n: list
    tv: list
    tv_err: list
    h: float
    reference_horizon: int
    smoothing_bound: float
    box: tuple

    def to_json(self):
        return {
            "n": self.n,
            "tv": self.tv,
            "tv_err": self.tv_err,
            "h": self.h,
            "reference_horizon": self.reference_horizon,
            "smoothing_bound": self.smoothing_bound,
            "box": list(self.box),
        }


def empirical_tv_decay(
    spec, horizon, reference_horizon=None, grid=(-12.0, 12.0, 1024), paths=20000, seed=0, h=0.2, ns=None, batches=8
):
    """Smoothed empirical TV between X_n and a long-horizon reference, n = 1..horizon.

    Both samples come from the backward coupling on a shared noise stream,
    which cancels most Monte-Carlo noise in the difference.  The error bar is
    the batch-means standard error over ``batches`` disjoint path groups.
    """
    spec = load_recursion(spec)
    if spec.dim != 1:
        raise TvcertError("unsupported_dimension", "empirical TV is implemented for d = 1")
    horizon = int(horizon)
    ref = int(reference_horizon or 4 * horizon)
    if ref < horizon:
        raise TvcertError("invalid_count", "reference horizon must be >= horizon")
    lo, hi, n_pts = grid
    ns = list(range(1, horizon + 1)) if ns is None else [int(v) for v in ns]
    xi = _backward_noise(spec, seed, ref, paths)
    x0 = _init_draws(spec, seed, paths)
    x_ref = _run_backward(spec, xi, x0, ref)
    f_ref = _smoothed_density(x_ref, lo, hi, n_pts, h)
    groups = np.array_split(np.arange(paths), batches)
    f_ref_b = [_smoothed_density(x_ref[g], lo, hi, n_pts, h) for g in groups]
    tv, err = [], []
    for n in ns:
        xn = _run_backward(spec, xi, x0, n)
        if n == ref:
            tv.append(0.0)
            err.append(0.0)
            continue
        fn = _smoothed_density(xn, lo, hi, n_pts, h)
        tv.append(f_ref.integrate(np.abs(fn.values - f_ref.values)))
        vals = []
        for g, fr in zip(groups, f_ref_b):
            fb = _smoothed_density(xn[g], lo, hi, n_pts, h)
            vals.append(fr.integrate(np.abs(fb.values - fr.values)))
        err.append(float(np.std(vals, ddof=1) / math.sqrt(batches)))
    bound = smoothing_error_bound(spec, h, hi - lo)
    return TvSeries(ns, tv, err, h, ref, bound, (lo, hi, n_pts))
