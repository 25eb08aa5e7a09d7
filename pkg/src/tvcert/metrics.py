"""Probability metrics on grids, in one dimension, and through characteristic functions.

Total variation follows the convention ``d_TV = int |f1 - f2|``, i.e. twice the
measure-theoretic distance, so it never exceeds 2.  The Fortet-Mourier distance
has no exact algorithm; it is bracketed between a characteristic-function lower
bound (from the smoothing inequality |phi1 - phi2| <= 4 (1 + |u|) d_FM) and the
Wasserstein-1 distance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import integrate, optimize, stats

from .distkit import CharFn, DistSpec, GridDensity, density_on_grid, dist_from_json
from .errors import TvcertError

W1_ABS_TOL = 1e-8
DCF_REL_TOL = 1e-3


def _check_grids(f1, f2):
    if not f1.same_grid(f2):
        raise TvcertError("grid_mismatch", "densities live on different grids")


def tv_grid(f1: GridDensity, f2: GridDensity) -> float:
    """Trapezoidal int |f1 - f2| over the common box."""
    _check_grids(f1, f2)
    return f1.integrate(np.abs(f1.values - f2.values))


def mass_defect(f1: GridDensity, f2: GridDensity) -> float:
    """Bound on the part of int |f1 - f2| that falls outside the box."""
    _check_grids(f1, f2)
    return float(f1.out_of_box_mass + f2.out_of_box_mass)


def tv_half_grid(f1: GridDensity, f2: GridDensity) -> float:
    """Measure-theoretic TV on the grid: the best set is {f1 > f2}."""
    _check_grids(f1, f2)
    diff = f1.values - f2.values
    return f1.integrate(np.where(diff > 0, diff, 0.0))


def sup_density_dist(f1: GridDensity, f2: GridDensity) -> float:
    _check_grids(f1, f2)
    return float(np.max(np.abs(f1.values - f2.values)))


# --------------------------------------------------------------------------- W1


def _is_samples(obj):
    return not isinstance(obj, (DistSpec, dict, CharFn))


def _cdf_callable(spec, grid_pts=2**14):
    """CDF of a 1-D spec: closed form when available, else cumulated grid density."""
    if spec.has_cdf:
        return spec.cdf
    center, spread = spec.scale_hint()
    lo, hi = center[0] - 40 * spread[0], center[0] + 40 * spread[0]
    g = density_on_grid(spec, lo, hi, grid_pts)
    x = g.axes()[0]
    F = np.concatenate([[0.0], integrate.cumulative_trapezoid(g.values, x)])
    F = F + g.out_of_box_mass / 2
    return lambda t: np.interp(t, x, F, left=0.0, right=1.0)


def _support_window(*specs):
    lo, hi = math.inf, -math.inf
    for s in specs:
        c, w = s.scale_hint()
        lo = min(lo, c[0] - 40 * w[0])
        hi = max(hi, c[0] + 40 * w[0])
    return lo, hi


def _w1_specs(a, b):
    for s in (a, b):
        if not math.isfinite(s.moment(1.0)):
            raise TvcertError("moment_diverges", f"{s.family} has no first moment")
    Fa, Fb = _cdf_callable(a), _cdf_callable(b)
    lo, hi = _support_window(a, b)
    breaks = np.linspace(lo, hi, 65)
    total = 0.0
    with warnings.catch_warnings():
        # roundoff warnings appear when |F_a - F_b| is at machine precision
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for x0, x1 in zip(breaks[:-1], breaks[1:]):
            val, _ = integrate.quad(
                lambda t: abs(float(Fa(t)) - float(Fb(t))), x0, x1, epsabs=W1_ABS_TOL / 64, epsrel=1e-10, limit=200
            )
            total += val
    return total


def _w1_spec_samples(spec, x, n_dense=2**16):
    x = np.sort(np.asarray(x, dtype=float))
    F = _cdf_callable(spec)
    lo, hi = _support_window(spec)
    lo, hi = min(lo, x[0]), max(hi, x[-1])
    grid = np.union1d(x, np.linspace(lo, hi, n_dense))
    Fn = np.searchsorted(x, grid, side="right") / x.size
    mid = 0.5 * (grid[1:] + grid[:-1])
    Fm = np.asarray(F(mid), dtype=float)
    return float(np.sum(np.abs(Fn[:-1] - Fm) * np.diff(grid)))


def w1_1d(a, b) -> float:
    """Wasserstein-1 distance in one dimension, W1 = int |F_a - F_b|.

    Each argument is a DistSpec (or its JSON) or a 1-D sample array.
    """
    sa, sb = _is_samples(a), _is_samples(b)
    if not sa:
        a = dist_from_json(a)
    if not sb:
        b = dist_from_json(b)
    for obj, is_s in ((a, sa), (b, sb)):
        dim = np.asarray(obj).ndim if is_s else obj.dim
        if (is_s and dim != 1) or (not is_s and dim != 1):
            raise TvcertError("unsupported_dimension", "w1_1d needs one-dimensional laws")
    if sa and sb:
        xa, xb = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
        if xa.size == 0 or xb.size == 0:
            raise TvcertError("empty_samples", "w1_1d needs nonempty samples")
        if xa.size == xb.size:
            return float(np.mean(np.abs(xa - xb)))
        return float(stats.wasserstein_distance(xa, xb))
    if sa:
        return _w1_spec_samples(b, a)
    if sb:
        return _w1_spec_samples(a, b)
    return _w1_specs(a, b)


# ------------------------------------------------------------------ CF metrics


def _charfn(obj):
    if _is_samples(obj):
        return CharFn.empirical(obj)
    return CharFn.of(obj)


def _default_grid(d, u_max=50.0, n=1025):
    if d == 1:
        return np.linspace(-u_max, u_max, 2 * n - 1)
    side = np.linspace(-u_max, u_max, 129)
    U = np.stack(np.meshgrid(side, side, indexing="ij"), axis=-1)
    return U.reshape(-1, 2)


def _refine(grid, d):
    if d == 1:
        g = np.sort(np.asarray(grid, dtype=float))
        return np.sort(np.concatenate([g, 0.5 * (g[1:] + g[:-1])]))
    g = np.asarray(grid, dtype=float)
    lo, hi = g.min(axis=0), g.max(axis=0)
    side = int(round(math.sqrt(g.shape[0])))
    new = 2 * side - 1
    axes = [np.linspace(lo[i], hi[i], new) for i in range(2)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)


def _grid_sup(objective, u_grid, d, rel_tol=DCF_REL_TOL, max_rounds=8):
    """Max of ``objective`` over a grid refined by 2 until the change is < rel_tol,
    then polished locally (d = 1).  Returns (value, argmax, rounds)."""
    grid = np.asarray(u_grid, dtype=float)
    if grid.size == 0:
        raise TvcertError("empty_grid", "frequency grid is empty")
    if d == 1:
        grid = grid.reshape(-1)
    vals = objective(grid)
    best = float(vals.max())
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        grid = _refine(grid, d)
        vals = objective(grid)
        new = float(vals.max())
        change = abs(new - best)
        best = max(best, new)
        if change <= rel_tol * max(best, 1e-300):
            break
    i = int(np.argmax(vals))
    arg = grid[i]
    if d == 1 and grid.size > 2:
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = optimize.minimize_scalar(
            lambda t: -float(objective(np.array([t]))[0]), bounds=(a, b), method="bounded", options={"xatol": 1e-12}
        )
        if -res.fun > best:
            best, arg = float(-res.fun), float(res.x)
    return best, arg, rounds


def dcf(cf1, cf2, u_grid=None):
    """Grid estimate of d_CF = sup_u |phi1(u) - phi2(u)|.

    The result is a lower estimate of the true supremum.  Returns
    ``(value, witness)``.
    """
    c1, c2 = _charfn(cf1), _charfn(cf2)
    d = c1.dim
    grid = _default_grid(d) if u_grid is None else u_grid
    val, arg, _ = _grid_sup(lambda u: np.abs(c1(u) - c2(u)), grid, d)
    return val, arg


@dataclass
class MetricBracket:
    lower: float
    upper: float
    lower_witness: object = None
    lower_method: str = "cf_smoothing"
    upper_method: str = "w1"
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lower > self.upper:
            # the CF lower bound is a grid supremum, so equality within rounding is expected
            if self.lower - self.upper <= 1e-9 * max(1.0, self.upper):
                self.lower = self.upper
            else:
                raise TvcertError("bracket_inverted", f"lower {self.lower} > upper {self.upper}")

    def to_json(self):
        w = self.lower_witness
        if isinstance(w, np.ndarray):
            w = w.tolist()
        return {
            "lower": self.lower,
            "upper": self.upper if math.isfinite(self.upper) else "inf",
            "lower_witness": w,
            "lower_method": self.lower_method,
            "upper_method": self.upper_method,
        }


def fm_lower(cf1, cf2, u_grid=None):
    """sup_u |phi1 - phi2| / (4 (1 + |u|)), a lower bound on d_FM."""
    c1, c2 = _charfn(cf1), _charfn(cf2)
    d = c1.dim
    grid = _default_grid(d) if u_grid is None else u_grid

    def obj(u):
        r = np.abs(u) if d == 1 else np.linalg.norm(u, axis=-1)
        return np.abs(c1(u) - c2(u)) / (4.0 * (1.0 + r))

    val, arg, _ = _grid_sup(obj, grid, d)
    return val, arg


def fm_bracket(a, b, cf_a=None, cf_b=None, u_grid=None) -> MetricBracket:
    """Two-sided bracket for d_FM(a, b).

    ``a`` and ``b`` are specs or samples; ``cf_a``/``cf_b`` override the CF used
    for the lower side.  The upper side is W1 in one dimension.
    """
    ca = _charfn(a) if cf_a is None else CharFn.of(cf_a)
    cb = _charfn(b) if cf_b is None else CharFn.of(cf_b)
    lower, witness = fm_lower(ca, cb, u_grid)
    if ca.dim == 1:
        upper, tag = w1_1d(a, b), "w1"
    else:
        upper, tag = math.inf, "no_upper_bound"
    return MetricBracket(lower, upper, witness, "cf_smoothing", tag)


@dataclass(frozen=True)
class TestWave:
    """The scaled wave ``scale * sin(<u, x>)`` or ``scale * cos(<u, x>)`` with
    ``scale = 1 / ((k + 1) (1 + |u|)^k)``.

    Its l-th derivative has sup-norm ``scale * |u|^l``, so the derivative sum up
    to order k is at most ``sum_l |u|^l / ((k + 1)(1 + |u|)^k) <= 1``.
    """

    u: tuple
    kind: str = "sine"
    k: int = 1

    __test__ = False  # not a pytest class

    @property
    def norm_u(self):
        return math.sqrt(sum(float(c) ** 2 for c in self.u))

    @property
    def scale(self):
        return 1.0 / ((self.k + 1) * (1.0 + self.norm_u) ** self.k)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        ph = x * self.u[0] if len(self.u) == 1 else x @ np.asarray(self.u)
        return self.scale * (np.sin(ph) if self.kind == "sine" else np.cos(ph))

    def derivative_norms(self):
        return [self.scale * self.norm_u**l for l in range(self.k + 1)]

    def norm_sum_exact(self):
        """Derivative-norm sum in rational arithmetic (u given by rationals)."""
        r = Fraction(sum(Fraction(c) ** 2 for c in self.u))
        # |u| may be irrational; bound it from above by a rational within 1e-15
        nu = Fraction(math.sqrt(r)).limit_denominator(10**15)
        while nu * nu < r:
            nu += Fraction(1, 10**15)
        top = sum(nu**l for l in range(self.k + 1))
        bottom = (self.k + 1) * (1 + nu) ** self.k
        return top / bottom

    def in_class(self):
        return self.norm_sum_exact() <= 1


def dk_lower(cf1, cf2, k, u_grid=None):
    """sup_u |phi1 - phi2| / (2 (k + 1) (1 + |u|)^k), a lower bound on d_k."""
    k = int(k)
    if k < 1:
        raise TvcertError("invalid_order", "k must be >= 1")
    c1, c2 = _charfn(cf1), _charfn(cf2)
    d = c1.dim
    grid = _default_grid(d) if u_grid is None else u_grid

    def obj(u):
        r = np.abs(u) if d == 1 else np.linalg.norm(u, axis=-1)
        return np.abs(c1(u) - c2(u)) / (2.0 * (k + 1) * (1.0 + r) ** k)

    val, arg, _ = _grid_sup(obj, grid, d)
    return val, arg
