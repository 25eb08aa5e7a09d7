"""Distribution representations: analytic families, characteristic functions,
FFT inversion onto grids, tail envelopes, moment bounds and sampling.

Conventions
-----------
A characteristic function is evaluated on arrays of frequencies.  For ``d == 1``
frequencies are plain arrays of any shape; for ``d >= 2`` the last axis holds the
coordinates.  Densities follow the same rule for their arguments.

Inversion uses ``f(x) = (2 pi)^-d  int exp(-i <u, x>) phi(u) du``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import TvcertError

DEFAULT_MASS_TOL = 1e-4
LOG_FLOOR = 1e-300


def make_rng(seed, stream=0):
    """Counter-based generator for the stream ``(seed, stream)``.

    Philox is keyed by a SeedSequence whose spawn key is the stream id, so
    streams are independent and do not depend on how many were requested.
    """
    key = tuple(int(k) for k in stream) if isinstance(stream, (tuple, list)) else (int(stream),)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _norm(u, d):
    u = np.asarray(u, dtype=float)
    return np.abs(u) if d == 1 else np.linalg.norm(u, axis=-1)


def _dot(u, x, d):
    if d == 1:
        return np.asarray(u, dtype=float) * x
    return np.asarray(u, dtype=float) @ np.asarray(x, dtype=float)


def ball_surface(d):
    """Surface area of the unit sphere in R^d, ``2 pi^(d/2) / Gamma(d/2)``."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def ball_volume(d):
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _abs_moment_normal(mu, sigma, delta):
    # E|N(mu, sigma^2)|^delta via the confluent hypergeometric representation
    base = sigma**delta * 2 ** (delta / 2) * special.gamma((delta + 1) / 2) / math.sqrt(math.pi)
    if mu == 0:
        return float(base)
    return float(base * special.hyp1f1(-delta / 2, 0.5, -(mu**2) / (2 * sigma**2)))


def _combine_coordinate_moments(second_moments, coord_moments, delta):
    """Upper bound on E|X|^delta from per-coordinate information.

    delta <= 2: Jensen, E|X|^delta <= (E|X|^2)^(delta/2).
    delta > 2: power mean, |X|^delta <= d^(delta/2 - 1) sum |X_i|^delta.
    """
    d = len(second_moments)
    if delta <= 2:
        return float(sum(second_moments) ** (delta / 2))
    return float(d ** (delta / 2 - 1) * sum(coord_moments))


def _minkowski(moments, delta):
    """Bound E|sum X_i|^delta from the individual E|X_i|^delta."""
    if delta >= 1:
        return float(sum(m ** (1 / delta) for m in moments) ** delta)
    return float(sum(moments))


class DistSpec:
    """Base class of the distribution families."""

    family = "abstract"
    dim = 1

    def cf(self, u):
        raise NotImplementedError

    def pdf(self, x):
        raise TvcertError("no_density", f"family {self.family} has no closed-form density")

    def cdf(self, x):
        raise TvcertError("no_cdf", f"family {self.family} has no closed-form CDF")

    @property
    def has_pdf(self):
        return type(self).pdf is not DistSpec.pdf

    @property
    def has_cdf(self):
        return type(self).cdf is not DistSpec.cdf and self.dim == 1

    def draw(self, n, rng):
        raise NotImplementedError

    def moment(self, delta):
        """E|X|^delta (or a rigorous upper bound where no closed form exists)."""
        raise NotImplementedError

    def mean(self):
        raise NotImplementedError

    def cov(self):
        raise NotImplementedError

    def to_json(self):
        raise NotImplementedError

    def charfn(self):
        return CharFn(self.cf, self.dim, "analytic", spec=self)

    def scale_hint(self):
        """(center, spread) used to size default grids."""
        m = np.atleast_1d(self.mean())
        c = np.atleast_2d(self.cov())
        return m, np.sqrt(np.diag(c))

    def __repr__(self):
        return f"{type(self).__name__}({self.to_json()})"


class Gaussian(DistSpec):
    family = "gaussian"

    def __init__(self, mean=0.0, cov=1.0):
        self.mu = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(cov, dtype=float))
        self.dim = self.mu.size
        if self.sigma.shape != (self.dim, self.dim):
            raise TvcertError("invalid_spec", "cov shape does not match mean")
        if not np.allclose(self.sigma, self.sigma.T):
            raise TvcertError("invalid_spec", "cov must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise TvcertError("invalid_spec", "cov must be positive definite") from None

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        if self.dim == 1:
            return np.exp(1j * u * self.mu[0] - 0.5 * self.sigma[0, 0] * u * u)
        quad = np.einsum("...i,ij,...j->...", u, self.sigma, u)
        return np.exp(1j * (u @ self.mu) - 0.5 * quad)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            return stats.norm.pdf(x, self.mu[0], math.sqrt(self.sigma[0, 0]))
        return stats.multivariate_normal(self.mu, self.sigma).pdf(x)

    def cdf(self, x):
        return stats.norm.cdf(x, self.mu[0], math.sqrt(self.sigma[0, 0]))

    def draw(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        x = self.mu + z @ self._chol.T
        return x[:, 0] if self.dim == 1 else x

    def moment(self, delta):
        sd = np.sqrt(np.diag(self.sigma))
        if self.dim == 1:
            return _abs_moment_normal(self.mu[0], sd[0], delta)
        iso = np.allclose(self.mu, 0) and np.allclose(self.sigma, self.sigma[0, 0] * np.eye(self.dim))
        if iso:
            s = math.sqrt(self.sigma[0, 0])
            d = self.dim
            return float(s**delta * 2 ** (delta / 2) * special.gamma((d + delta) / 2) / special.gamma(d / 2))
        second = [m**2 + s**2 for m, s in zip(self.mu, sd)]
        coord = [_abs_moment_normal(m, s, delta) for m, s in zip(self.mu, sd)]
        return _combine_coordinate_moments(second, coord, delta)

    def mean(self):
        return self.mu[0] if self.dim == 1 else self.mu.copy()

    def cov(self):
        return self.sigma[0, 0] if self.dim == 1 else self.sigma.copy()

    def to_json(self):
        return {"family": "gaussian", "mean": self.mu.tolist(), "cov": self.sigma.tolist()}


class Laplace(DistSpec):
    """Product of centred Laplace laws with rates ``lam`` (density lam/2 e^{-lam|x|})."""

    family = "laplace"

    def __init__(self, lam=1.0, dim=None):
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if dim is not None and lam.size == 1:
            lam = np.full(int(dim), lam[0])
        if np.any(lam <= 0):
            raise TvcertError("invalid_spec", "lambda must be positive")
        self.lam = lam
        self.dim = lam.size

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        if self.dim == 1:
            l2 = self.lam[0] ** 2
            return (l2 / (l2 + u * u)).astype(complex)
        l2 = self.lam**2
        return np.prod(l2 / (l2 + u * u), axis=-1).astype(complex)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            lam = self.lam[0]
            return 0.5 * lam * np.exp(-lam * np.abs(x))
        return np.prod(0.5 * self.lam * np.exp(-self.lam * np.abs(x)), axis=-1)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        lam = self.lam[0]
        e = 0.5 * np.exp(-lam * np.abs(x))
        return np.where(x < 0, e, 1.0 - e)

    def draw(self, n, rng):
        x = rng.laplace(0.0, 1.0 / self.lam, size=(n, self.dim))
        return x[:, 0] if self.dim == 1 else x

    def moment(self, delta):
        coord = [special.gamma(delta + 1) / lam**delta for lam in self.lam]
        if self.dim == 1:
            return float(coord[0])
        return _combine_coordinate_moments([2 / lam**2 for lam in self.lam], coord, delta)

    def mean(self):
        return 0.0 if self.dim == 1 else np.zeros(self.dim)

    def cov(self):
        v = 2.0 / self.lam**2
        return v[0] if self.dim == 1 else np.diag(v)

    def to_json(self):
        lam = self.lam.tolist()
        return {"family": "laplace", "lambda": lam[0] if self.dim == 1 else lam}


class LaplaceMixture(DistSpec):
    """Mixture of Laplace(k), k = 1..K, with weights proportional to 1/k^2.

    The untruncated mixture has weights 6/(k^2 pi^2); truncation keeps the first
    K and renormalises.  ``tail_weight`` is the discarded mass.
    """

    family = "laplace_mixture"

    def __init__(self, K=100):
        K = int(K)
        if K < 1:
            raise TvcertError("invalid_spec", "K must be >= 1")
        self.K = K
        self.k = np.arange(1, K + 1, dtype=float)
        raw = 6.0 / (self.k**2 * math.pi**2)
        self.tail_weight = float(max(0.0, 1.0 - raw.sum()))
        self.weights = raw / raw.sum()

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        t2 = u * u
        direct = np.zeros(u.shape)
        defect = np.zeros(u.shape)
        for w, k in zip(self.weights, self.k):
            direct += w * (k * k) / (k * k + t2)
            defect += w * t2 / (k * k + t2)
        # near 0 the complement form is exact at u = 0 and avoids rounding drift
        return np.where(t2 < 1.0, 1.0 - defect, direct).astype(complex)

    def pdf(self, x):
        ax = np.abs(np.asarray(x, dtype=float))
        out = np.zeros(ax.shape)
        for w, k in zip(self.weights, self.k):
            out += w * 0.5 * k * np.exp(-k * ax)
        return out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        e = np.zeros(x.shape)
        for w, k in zip(self.weights, self.k):
            e += w * 0.5 * np.exp(-k * np.abs(x))
        return np.where(x < 0, e, 1.0 - e)

    def draw(self, n, rng):
        comp = rng.choice(self.K, size=n, p=self.weights)
        return rng.laplace(0.0, 1.0 / self.k[comp])

    def moment(self, delta):
        return float(np.sum(self.weights * special.gamma(delta + 1) / self.k**delta))

    def mean(self):
        return 0.0

    def cov(self):
        return float(np.sum(self.weights * 2.0 / self.k**2))

    def to_json(self):
        return {"family": "laplace_mixture", "K": self.K}


class Uniform(DistSpec):
    family = "uniform"

    def __init__(self, a=0.0, b=1.0):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        if self.a.shape != self.b.shape or np.any(self.a >= self.b):
            raise TvcertError("invalid_spec", "uniform box needs a < b coordinatewise")
        self.dim = self.a.size

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        mid = 0.5 * (self.a + self.b)
        half = 0.5 * (self.b - self.a)
        if self.dim == 1:
            return np.exp(1j * u * mid[0]) * np.sinc(u * half[0] / math.pi)
        return np.exp(1j * (u @ mid)) * np.prod(np.sinc(u * half / math.pi), axis=-1)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        vol = float(np.prod(self.b - self.a))
        if self.dim == 1:
            inside = (x >= self.a[0]) & (x <= self.b[0])
        else:
            inside = np.all((x >= self.a) & (x <= self.b), axis=-1)
        return inside / vol

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.a[0]) / (self.b[0] - self.a[0]), 0.0, 1.0)

    def draw(self, n, rng):
        x = rng.uniform(self.a, self.b, size=(n, self.dim))
        return x[:, 0] if self.dim == 1 else x

    def _coord_moment(self, a, b, delta):
        def prim(x):
            return math.copysign(abs(x) ** (delta + 1), x) / (delta + 1)

        return (prim(b) - prim(a)) / (b - a)

    def moment(self, delta):
        coord = [self._coord_moment(a, b, delta) for a, b in zip(self.a, self.b)]
        if self.dim == 1:
            return float(coord[0])
        second = [self._coord_moment(a, b, 2.0) for a, b in zip(self.a, self.b)]
        return _combine_coordinate_moments(second, coord, delta)

    def mean(self):
        m = 0.5 * (self.a + self.b)
        return m[0] if self.dim == 1 else m

    def cov(self):
        v = (self.b - self.a) ** 2 / 12.0
        return v[0] if self.dim == 1 else np.diag(v)

    def to_json(self):
        return {"family": "uniform", "a": self.a.tolist(), "b": self.b.tolist()}


class SmoothedUniform(DistSpec):
    """Uniform[a, b] convolved with N(0, sigma^2) (one-dimensional)."""

    family = "smoothed_uniform"

    def __init__(self, a=0.0, b=1.0, sigma=0.1):
        self.a, self.b, self.sigma = float(a), float(b), float(sigma)
        if not self.a < self.b or self.sigma <= 0:
            raise TvcertError("invalid_spec", "smoothed_uniform needs a < b and sigma > 0")

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        mid, half = 0.5 * (self.a + self.b), 0.5 * (self.b - self.a)
        return np.exp(1j * u * mid - 0.5 * (self.sigma * u) ** 2) * np.sinc(u * half / math.pi)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        s = self.sigma
        return (special.ndtr((x - self.a) / s) - special.ndtr((x - self.b) / s)) / (self.b - self.a)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        s = self.sigma

        def prim(z):
            return z * special.ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

        return s * (prim((x - self.a) / s) - prim((x - self.b) / s)) / (self.b - self.a)

    def draw(self, n, rng):
        return rng.uniform(self.a, self.b, size=n) + self.sigma * rng.standard_normal(n)

    def moment(self, delta):
        lo, hi = self.a - 12 * self.sigma, self.b + 12 * self.sigma
        val, err = integrate.quad(lambda x: abs(x) ** delta * self.pdf(x), lo, hi, points=[self.a, self.b, 0.0], limit=200)
        tail = 2 * (abs(lo) + abs(hi)) ** delta * stats.norm.sf(12)
        return float(val + err + tail)

    def mean(self):
        return 0.5 * (self.a + self.b)

    def cov(self):
        return (self.b - self.a) ** 2 / 12.0 + self.sigma**2

    def to_json(self):
        return {"family": "smoothed_uniform", "a": self.a, "b": self.b, "sigma": self.sigma}


class PointMass(DistSpec):
    family = "point"

    def __init__(self, x=0.0):
        self.x = np.atleast_1d(np.asarray(x, dtype=float))
        self.dim = self.x.size

    def cf(self, u):
        return np.exp(1j * _dot(u, self.x[0] if self.dim == 1 else self.x, self.dim))

    def cdf(self, x):
        return (np.asarray(x, dtype=float) >= self.x[0]).astype(float)

    def draw(self, n, rng):
        return np.full(n, self.x[0]) if self.dim == 1 else np.tile(self.x, (n, 1))

    def moment(self, delta):
        return float(np.linalg.norm(self.x) ** delta)

    def mean(self):
        return self.x[0] if self.dim == 1 else self.x.copy()

    def cov(self):
        return 0.0 if self.dim == 1 else np.zeros((self.dim, self.dim))

    def scale_hint(self):
        return self.x, np.ones(self.dim)

    def to_json(self):
        return {"family": "point", "x": self.x.tolist()}


class Discrete(DistSpec):
    """Finitely supported law on the real line (lattice laws included)."""

    family = "discrete"

    def __init__(self, points, weights=None):
        self.points = np.asarray(points, dtype=float).ravel()
        w = np.ones(self.points.size) if weights is None else np.asarray(weights, dtype=float).ravel()
        if w.shape != self.points.shape or np.any(w < 0) or w.sum() <= 0:
            raise TvcertError("invalid_spec", "discrete law needs nonnegative weights matching points")
        self.weights = w / w.sum()

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        return np.exp(1j * u[..., None] * self.points) @ self.weights

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return (x[..., None] >= self.points) @ self.weights

    def draw(self, n, rng):
        return rng.choice(self.points, size=n, p=self.weights)

    def moment(self, delta):
        return float(np.sum(self.weights * np.abs(self.points) ** delta))

    def mean(self):
        return float(self.weights @ self.points)

    def cov(self):
        m = self.mean()
        return float(self.weights @ (self.points - m) ** 2)

    def to_json(self):
        return {"family": "discrete", "points": self.points.tolist(), "weights": self.weights.tolist()}


class Cauchy(DistSpec):
    family = "cauchy"

    def __init__(self, loc=0.0, scale=1.0):
        self.loc, self.scale = float(loc), float(scale)
        if self.scale <= 0:
            raise TvcertError("invalid_spec", "cauchy scale must be positive")

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        return np.exp(1j * u * self.loc - self.scale * np.abs(u))

    def pdf(self, x):
        return stats.cauchy.pdf(x, self.loc, self.scale)

    def cdf(self, x):
        return stats.cauchy.cdf(x, self.loc, self.scale)

    def draw(self, n, rng):
        return self.loc + self.scale * rng.standard_cauchy(n)

    def moment(self, delta):
        if delta >= 1:
            raise TvcertError("moment_diverges", f"cauchy has no moment of order {delta}")
        if self.loc == 0:
            return float(self.scale**delta / math.cos(math.pi * delta / 2))
        val, err = integrate.quad(lambda x: abs(x) ** delta * self.pdf(x), -np.inf, np.inf, limit=400)
        return float(val + abs(err))

    def mean(self):
        raise TvcertError("moment_diverges", "cauchy has no mean")

    def cov(self):
        raise TvcertError("moment_diverges", "cauchy has no variance")

    def scale_hint(self):
        return np.array([self.loc]), np.array([self.scale])

    def to_json(self):
        return {"family": "cauchy", "loc": self.loc, "scale": self.scale}


class Convolution(DistSpec):
    """Law of the sum of independent components."""

    family = "convolution"

    def __init__(self, parts):
        self.parts = list(parts)
        dims = {p.dim for p in self.parts}
        if len(dims) != 1 or not self.parts:
            raise TvcertError("invalid_spec", "convolution parts must share one dimension")
        self.dim = dims.pop()

    def cf(self, u):
        out = self.parts[0].cf(u)
        for p in self.parts[1:]:
            out = out * p.cf(u)
        return out

    def draw(self, n, rng):
        return sum(p.draw(n, rng) for p in self.parts)

    def moment(self, delta):
        return _minkowski([p.moment(delta) for p in self.parts], delta)

    def mean(self):
        return sum(p.mean() for p in self.parts)

    def cov(self):
        return sum(p.cov() for p in self.parts)

    def to_json(self):
        return {"family": "convolution", "parts": [p.to_json() for p in self.parts]}


class Product(DistSpec):
    """Independent one-dimensional coordinates stacked into R^d."""

    family = "product"

    def __init__(self, parts):
        self.parts = list(parts)
        if any(p.dim != 1 for p in self.parts) or not self.parts:
            raise TvcertError("invalid_spec", "product parts must be one-dimensional")
        self.dim = len(self.parts)

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        out = np.ones(u.shape[:-1], dtype=complex)
        for i, p in enumerate(self.parts):
            out = out * p.cf(u[..., i])
        return out

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.ones(x.shape[:-1])
        for i, p in enumerate(self.parts):
            out = out * p.pdf(x[..., i])
        return out

    @property
    def has_pdf(self):
        return all(p.has_pdf for p in self.parts)

    def draw(self, n, rng):
        return np.stack([p.draw(n, rng) for p in self.parts], axis=-1)

    def moment(self, delta):
        second = [p.moment(2.0) for p in self.parts]
        return _combine_coordinate_moments(second, [p.moment(delta) for p in self.parts], delta)

    def mean(self):
        return np.array([p.mean() for p in self.parts])

    def cov(self):
        return np.diag([p.cov() for p in self.parts])

    def to_json(self):
        return {"family": "product", "parts": [p.to_json() for p in self.parts]}


class Affine(DistSpec):
    """Law of ``loc + scale * X`` (``scale`` a scalar, or a matrix when d >= 2)."""

    family = "affine"

    def __init__(self, base, loc=0.0, scale=1.0):
        self.base = base
        self.dim = base.dim
        self.loc = np.atleast_1d(np.asarray(loc, dtype=float))
        if self.dim == 1:
            self.scale = float(scale)
            if self.scale == 0:
                raise TvcertError("invalid_spec", "affine scale must be nonzero")
        else:
            s = np.asarray(scale, dtype=float)
            self.scale = s * np.eye(self.dim) if s.ndim == 0 else s
            if abs(np.linalg.det(self.scale)) == 0:
                raise TvcertError("invalid_spec", "affine scale must be invertible")

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        if self.dim == 1:
            return np.exp(1j * u * self.loc[0]) * self.base.cf(self.scale * u)
        return np.exp(1j * (u @ self.loc)) * self.base.cf(u @ self.scale)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            return self.base.pdf((x - self.loc[0]) / self.scale) / abs(self.scale)
        inv = np.linalg.inv(self.scale)
        return self.base.pdf((x - self.loc) @ inv.T) / abs(np.linalg.det(self.scale))

    @property
    def has_pdf(self):
        return self.base.has_pdf

    def cdf(self, x):
        z = (np.asarray(x, dtype=float) - self.loc[0]) / self.scale
        return self.base.cdf(z) if self.scale > 0 else 1.0 - self.base.cdf(z)

    @property
    def has_cdf(self):
        return self.dim == 1 and self.base.has_cdf

    def draw(self, n, rng):
        x = self.base.draw(n, rng)
        if self.dim == 1:
            return self.loc[0] + self.scale * x
        return self.loc + x @ self.scale.T

    def moment(self, delta):
        if np.allclose(self.loc, 0) and self.dim == 1:
            return abs(self.scale) ** delta * self.base.moment(delta)
        op = abs(self.scale) if self.dim == 1 else float(np.linalg.norm(self.scale, 2))
        return _minkowski([float(np.linalg.norm(self.loc)) ** delta, op**delta * self.base.moment(delta)], delta)

    def mean(self):
        if self.dim == 1:
            return self.loc[0] + self.scale * self.base.mean()
        return self.loc + self.scale @ self.base.mean()

    def cov(self):
        if self.dim == 1:
            return self.scale**2 * self.base.cov()
        return self.scale @ self.base.cov() @ self.scale.T

    def to_json(self):
        scale = self.scale if self.dim == 1 else self.scale.tolist()
        return {"family": "affine", "base": self.base.to_json(), "loc": self.loc.tolist(), "scale": scale}


class GridLaw(DistSpec):
    """A law given by a GridDensity (zero outside the box)."""

    family = "grid"

    def __init__(self, grid, path=None):
        self.grid = grid
        self.path = path
        self.dim = grid.dim

    def _weights(self):
        return self.grid.trapezoid_weights() * self.grid.values

    def cf(self, u):
        u = np.asarray(u, dtype=float)
        w = self._weights().ravel()
        pts = self.grid.points()
        shape = u.shape if self.dim == 1 else u.shape[:-1]
        flat = u.reshape(-1) if self.dim == 1 else u.reshape(-1, self.dim)
        out = np.empty(flat.shape[0], dtype=complex)
        step = max(1, 2**22 // max(1, w.size))
        for s in range(0, flat.shape[0], step):
            chunk = flat[s : s + step]
            phase = np.outer(chunk, pts) if self.dim == 1 else chunk @ pts.T
            out[s : s + step] = np.exp(1j * phase) @ w
        return out.reshape(shape)

    def pdf(self, x):
        from scipy.interpolate import RegularGridInterpolator

        x = np.asarray(x, dtype=float)
        axes = self.grid.axes()
        if self.dim == 1:
            return np.interp(x, axes[0], self.grid.values, left=0.0, right=0.0)
        interp = RegularGridInterpolator(axes, self.grid.values, bounds_error=False, fill_value=0.0)
        return interp(x)

    def cdf(self, x):
        xs = self.grid.axes()[0]
        c = integrate.cumulative_trapezoid(self.grid.values, xs, initial=0.0)
        c = c / c[-1]
        return np.interp(np.asarray(x, dtype=float), xs, c, left=0.0, right=1.0)

    def draw(self, n, rng):
        if self.dim == 1:
            xs = self.grid.axes()[0]
            c = integrate.cumulative_trapezoid(self.grid.values, xs, initial=0.0)
            c = c / c[-1]
            return np.interp(rng.uniform(size=n), c, xs)
        w = self._weights().ravel()
        idx = rng.choice(w.size, size=n, p=w / w.sum())
        h = self.grid.spacing
        return self.grid.points()[idx] + (rng.uniform(size=(n, self.dim)) - 0.5) * h

    def moment(self, delta):
        pts = self.grid.points()
        r = np.abs(pts) if self.dim == 1 else np.linalg.norm(pts, axis=-1)
        return float(np.sum(self._weights().ravel() * r**delta))

    def mean(self):
        w = self._weights().ravel()
        m = w @ self.grid.points() / w.sum()
        return float(m) if self.dim == 1 else m

    def cov(self):
        w = self._weights().ravel()
        w = w / w.sum()
        pts = self.grid.points()
        if self.dim == 1:
            m = w @ pts
            return float(w @ (pts - m) ** 2)
        c = pts - w @ pts
        return (c * w[:, None]).T @ c

    def to_json(self):
        return {"family": "grid", "path": str(self.path) if self.path else None}


FAMILIES = {
    "gaussian": lambda o: Gaussian(o.get("mean", [0.0]), o.get("cov", [[1.0]])),
    "laplace": lambda o: Laplace(o.get("lambda", 1.0), o.get("dim")),
    "laplace_mixture": lambda o: LaplaceMixture(o.get("K", 100)),
    "uniform": lambda o: Uniform(o.get("a", [0.0]), o.get("b", [1.0])),
    "smoothed_uniform": lambda o: SmoothedUniform(o.get("a", 0.0), o.get("b", 1.0), o.get("sigma", 0.1)),
    "point": lambda o: PointMass(o.get("x", [0.0])),
    "discrete": lambda o: Discrete(o["points"], o.get("weights")),
    "cauchy": lambda o: Cauchy(o.get("loc", 0.0), o.get("scale", 1.0)),
    "convolution": lambda o: Convolution([dist_from_json(p) for p in o["parts"]]),
    "product": lambda o: Product([dist_from_json(p) for p in o["parts"]]),
    "affine": lambda o: Affine(dist_from_json(o["base"]), o.get("loc", 0.0), o.get("scale", 1.0)),
    "grid": lambda o: GridLaw(GridDensity.from_csv(o["path"]), o["path"]),
}


def dist_from_json(obj):
    """Build a DistSpec from its JSON form, e.g. ``{"family": "laplace", "lambda": 1.0}``."""
    if isinstance(obj, DistSpec):
        return obj
    try:
        family = obj["family"]
    except (KeyError, TypeError):
        raise TvcertError("invalid_spec", "DistSpec needs a 'family' key") from None
    if family not in FAMILIES:
        raise TvcertError("invalid_spec", f"unknown family {family!r}")
    return FAMILIES[family](obj)


class CharFn:
    """A characteristic function with its dimension and provenance tag.

    provenance is one of ``analytic``, ``empirical``, ``power_scaled`` or
    ``product``; ``info`` keeps the parameters (sample count, base, n, ...).
    """

    def __init__(self, evaluator, dim, provenance="analytic", **info):
        self._evaluator = evaluator
        self.dim = int(dim)
        self.provenance = provenance
        self.info = info

    def __call__(self, u):
        return np.asarray(self._evaluator(np.asarray(u, dtype=float)), dtype=complex)

    @classmethod
    def of(cls, obj):
        if isinstance(obj, CharFn):
            return obj
        if isinstance(obj, DistSpec):
            return obj.charfn()
        return dist_from_json(obj).charfn()

    @classmethod
    def empirical(cls, samples):
        x = np.asarray(samples, dtype=float)
        if x.size == 0:
            raise TvcertError("empty_samples", "empirical CF needs at least one sample")
        dim = 1 if x.ndim == 1 else x.shape[1]
        return cls(lambda u: empirical_cf(x, u), dim, "empirical", n=x.shape[0])

    def power_scaled(self, n):
        """CF of the normalised sum of n i.i.d. copies, phi(u / sqrt n)^n."""
        n = int(n)
        root = math.sqrt(n)

        def ev(u):
            z = self(u / root)
            mod = np.abs(z)
            with np.errstate(divide="ignore"):
                logmod = np.where(mod > 0, np.log(np.where(mod > 0, mod, 1.0)), -np.inf)
            return np.exp(n * logmod) * np.exp(1j * n * np.angle(z))

        return CharFn(ev, self.dim, "power_scaled", base=self, n=n)

    def __mul__(self, other):
        if self.dim != other.dim:
            raise TvcertError("dimension_mismatch", "cannot multiply CFs of different dimension")
        return CharFn(lambda u: self(u) * other(u), self.dim, "product", factors=(self, other))

    def scaled(self, s):
        """CF of s * X."""
        return CharFn(lambda u: self(s * u), self.dim, self.provenance, **self.info)


def cf_eval(obj, u):
    """Evaluate phi(u) for a DistSpec, CharFn or JSON spec."""
    out = CharFn.of(obj)(u)
    return complex(out) if out.ndim == 0 else out


def empirical_cf(samples, u):
    """(1/N) sum_j exp(i <u, x_j>), computed in chunks."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise TvcertError("empty_samples", "empirical CF needs at least one sample")
    u = np.asarray(u, dtype=float)
    if x.ndim == 1:
        shape = u.shape
        flat_u = u.reshape(-1)
        out = np.zeros(flat_u.size, dtype=complex)
        step = max(1, 2**23 // max(1, flat_u.size))
        for s in range(0, x.size, step):
            ph = np.outer(x[s : s + step], flat_u)
            out += np.cos(ph).sum(axis=0) + 1j * np.sin(ph).sum(axis=0)
        out /= x.size
        return complex(out[0]) if shape == () else out.reshape(shape)
    d = x.shape[1]
    shape = u.shape[:-1]
    flat_u = u.reshape(-1, d)
    out = np.zeros(flat_u.shape[0], dtype=complex)
    step = max(1, 2**23 // max(1, flat_u.shape[0]))
    for s in range(0, x.shape[0], step):
        ph = x[s : s + step] @ flat_u.T
        out += np.cos(ph).sum(axis=0) + 1j * np.sin(ph).sum(axis=0)
    out /= x.shape[0]
    return complex(out[0]) if shape == () else out.reshape(shape)


@dataclass
class GridDensity:
    """Density values on the node grid ``lo + i (hi - lo) / n``, i = 0..n-1, of the box [lo, hi).

    ``out_of_box_mass`` is the probability mass known to lie outside the box and
    ``truncation_error`` a pointwise bound on the inversion error when known.
    """

    lo: np.ndarray
    hi: np.ndarray
    n: int
    values: np.ndarray
    out_of_box_mass: float = 0.0
    truncation_error: float | None = None
    mass_tol: float = DEFAULT_MASS_TOL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n,) * self.dim:
            raise TvcertError("invalid_grid", f"values shape {self.values.shape} does not match n={self.n}")
        if np.any(self.values < 0):
            raise TvcertError("invalid_grid", "density values must be nonnegative")

    @property
    def dim(self):
        return self.lo.size

    @property
    def spacing(self):
        return (self.hi - self.lo) / self.n

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def axes(self):
        return [a + np.arange(self.n) * h for a, h in zip(self.lo, self.spacing)]

    def points(self):
        axes = self.axes()
        if self.dim == 1:
            return axes[0]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def trapezoid_weights(self):
        w1 = np.ones(self.n)
        w1[0] = w1[-1] = 0.5
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w * self.cell_volume

    def integrate(self, values=None):
        v = self.values if values is None else values
        return float(np.sum(self.trapezoid_weights() * v))

    def mass(self):
        return self.integrate()

    def same_grid(self, other):
        return (
            self.n == other.n
            and self.dim == other.dim
            and np.allclose(self.lo, other.lo, rtol=0, atol=1e-12)
            and np.allclose(self.hi, other.hi, rtol=0, atol=1e-12)
        )

    def audit_mass(self):
        total = self.mass() + self.out_of_box_mass
        if abs(total - 1.0) > self.mass_tol:
            raise TvcertError("inversion_mass_violation", f"mass {total:.6g} outside 1 +/- {self.mass_tol}", mass=total)
        return total

    def to_csv(self, path):
        pts = self.points()
        cols = ["x1"] if self.dim == 1 else [f"x{i + 1}" for i in range(self.dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + ["f"])
            vals = self.values.ravel()
            if self.dim == 1:
                for x, f in zip(pts, vals):
                    w.writerow([repr(float(x)), repr(float(f))])
            else:
                for p, f in zip(pts, vals):
                    w.writerow([repr(float(c)) for c in p] + [repr(float(f))])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        d = len(header) - 1
        if d not in (1, 2) or header[-1] != "f":
            raise TvcertError("invalid_grid", f"unexpected CSV header {header}")
        coords = body[:, :d]
        n = len(np.unique(coords[:, 0]))
        lo, top = coords.min(axis=0), coords.max(axis=0)
        hi = lo + (top - lo) * n / (n - 1)
        return cls(lo, hi, n, body[:, d].reshape((n,) * d))


def density_on_grid(spec, lo, hi, n, **inversion_kw):
    """Closed-form density sampled on the grid, falling back to CF inversion."""
    spec = dist_from_json(spec)
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if not spec.has_pdf:
        return invert_cf_to_density(spec.charfn(), lo, hi, n, **inversion_kw)
    probe = GridDensity(lo, hi, n, np.zeros((n,) * spec.dim))
    pts = probe.points()
    vals = spec.pdf(pts).reshape((n,) * spec.dim)
    out = 0.0
    if spec.dim == 1 and spec.has_cdf:
        out = float(spec.cdf(lo[0]) + 1.0 - spec.cdf(probe.axes()[0][-1]))
    return GridDensity(lo, hi, n, vals, out_of_box_mass=max(out, 0.0), meta={"method": "closed_form"})


def truncation_bound(envelope, u_cutoff):
    """Pointwise inversion error from discarding |u| > u_cutoff."""
    d = envelope.dim
    return (2 * math.pi) ** (-d) * envelope.c_phi * ball_surface(d) * u_cutoff ** (-envelope.gamma) / envelope.gamma


def cutoff_for_tolerance(envelope, tol):
    """Smallest cutoff whose truncation bound is <= tol."""
    d = envelope.dim
    k = (2 * math.pi) ** (-d) * envelope.c_phi * ball_surface(d) / envelope.gamma
    return (k / tol) ** (1.0 / envelope.gamma)


def invert_cf_to_density(
    cf,
    lo,
    hi,
    n,
    u_cutoff=None,
    envelope=None,
    pad=2,
    mass_tol=DEFAULT_MASS_TOL,
    chunk=2**20,
):
    """Invert a characteristic function onto the node grid of [lo, hi]^d.

    The FFT period is at least ``pad`` times the box so that mass just outside
    the box does not wrap onto it.  Frequencies are spaced 2 pi / period and
    summed (trapezoid rule) up to ``u_cutoff``; everything beyond the FFT's own
    Nyquist band is folded onto it exactly, so large cutoffs cost CF
    evaluations but no extra FFT size.
    """
    cf = CharFn.of(cf)
    d = cf.dim
    if d not in (1, 2):
        raise TvcertError("unsupported_dimension", "grid inversion supports d in {1, 2}")
    lo = np.broadcast_to(np.atleast_1d(np.asarray(lo, dtype=float)), (d,)).copy()
    hi = np.broadcast_to(np.atleast_1d(np.asarray(hi, dtype=float)), (d,)).copy()
    n = int(n)
    dx = (hi - lo) / n
    P = 1 << int(math.ceil(math.log2(pad * n)))
    du = 2 * math.pi / (P * dx)
    if u_cutoff is None:
        u_cutoff = float(np.min(math.pi / dx))
    K = np.floor(u_cutoff / du).astype(int)
    eff_cutoff = float(np.min(K * du))

    if d == 1:
        psi = np.zeros(P, dtype=complex)
        k_all_lo, k_all_hi = -K[0], K[0]
        for s in range(k_all_lo, k_all_hi + 1, chunk):
            k = np.arange(s, min(s + chunk, k_all_hi + 1))
            u = k * du[0]
            w = np.where(np.abs(k) == K[0], 0.5, 1.0)
            vals = cf(u) * w * np.exp(-1j * u * lo[0])
            idx = np.mod(k, P)
            psi += np.bincount(idx, weights=vals.real, minlength=P) + 1j * np.bincount(idx, weights=vals.imag, minlength=P)
        full = np.fft.fft(psi).real * du[0] / (2 * math.pi)
    else:
        psi = np.zeros(P * P, dtype=complex)
        k2 = np.arange(-K[1], K[1] + 1)
        u2 = k2 * du[1]
        w2 = np.where(np.abs(k2) == K[1], 0.5, 1.0)
        rows = max(1, chunk // k2.size)
        for s in range(-K[0], K[0] + 1, rows):
            k1 = np.arange(s, min(s + rows, K[0] + 1))
            u1 = k1 * du[0]
            w1 = np.where(np.abs(k1) == K[0], 0.5, 1.0)
            U = np.stack(np.meshgrid(u1, u2, indexing="ij"), axis=-1)
            vals = cf(U) * np.outer(w1, w2) * np.exp(-1j * (U @ lo))
            idx = (np.mod(k1, P)[:, None] * P + np.mod(k2, P)[None, :]).ravel()
            vals = vals.ravel()
            psi += np.bincount(idx, weights=vals.real, minlength=P * P) + 1j * np.bincount(
                idx, weights=vals.imag, minlength=P * P
            )
        full = np.fft.fft2(psi.reshape(P, P)).real * float(np.prod(du)) / (2 * math.pi) ** 2

    negative = float(-full[full < 0].sum() * np.prod(dx))
    full = np.clip(full, 0.0, None)
    total = float(full.sum() * np.prod(dx))
    box = full[:n] if d == 1 else full[:n, :n]
    trunc = truncation_bound(envelope, eff_cutoff) if envelope is not None else None
    g = GridDensity(
        lo,
        hi,
        n,
        box,
        truncation_error=trunc,
        mass_tol=mass_tol,
        meta={"method": "fft_inversion", "u_cutoff": eff_cutoff, "clipped_mass": negative, "period_mass": total},
    )
    g.out_of_box_mass = max(0.0, total - g.mass())
    if abs(total - 1.0) > mass_tol:
        raise TvcertError(
            "inversion_mass_violation", f"mass {total:.6g} after clipping, tolerance {mass_tol}", mass=total
        )
    return g


@dataclass
class TailEnvelope:
    """|phi(u)| <= c_phi (1 + |u|)^(-d - gamma), audited up to ``u_max_checked``."""

    c_phi: float
    gamma: float
    dim: int = 1
    u_max_checked: float = math.inf
    certified: bool = False

    def __call__(self, u):
        return self.c_phi * (1.0 + _norm(u, self.dim)) ** (-self.dim - self.gamma)

    def to_json(self):
        return {
            "c_phi": self.c_phi,
            "gamma": self.gamma,
            "dim": self.dim,
            "u_max_checked": self.u_max_checked,
            "certified": self.certified,
        }


def _directions(d, count=16):
    if d == 1:
        return np.array([1.0, -1.0])
    t = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


def _radial_modulus(cf, d, r):
    dirs = _directions(d)
    if d == 1:
        u = np.outer(r, dirs)
    else:
        u = r[:, None, None] * dirs[None, :, :]
    return np.abs(cf(u)).max(axis=1)


def _lsq_slope(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, _), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope)


def fit_tail_envelope(cf, d=None, u_window=(1.0, 1e3), gamma_cap=50.0, n_audit=512, gamma_step=0.01, n_bins=32):
    """Fit and audit a power-law envelope for |phi|.

    The logarithmic window is cut into ``n_bins`` bins; each bin's maximum of
    |phi| is attributed to the bin's left end, which keeps oscillating moduli
    (sinc, lattice laws) honest.  The exponent is the least-squares slope of
    those maxima against log(1 + |u|) over the upper half of the bins, never
    larger than the slope over the last four bins, capped at ``gamma_cap`` and
    rounded down to ``gamma_step``.  The constant is the maximum of
    |phi(u)| (1+|u|)^(d+gamma) over an audit grid covering [0, u_hi], polished
    locally around the best grid point.
    """
    cf = CharFn.of(cf)
    d = cf.dim if d is None else int(d)
    u_lo, u_hi = map(float, u_window)
    if not 0 < u_lo < u_hi:
        raise TvcertError("invalid_window", "need 0 < u_lo < u_hi")
    r_log = np.geomspace(u_lo, u_hi, n_audit)
    r_lin = np.linspace(0.0, u_lo, 64, endpoint=False)
    r = np.concatenate([r_lin, r_log])
    m = np.maximum(_radial_modulus(cf, d, r), LOG_FLOOR)

    bins = np.array_split(np.arange(n_audit), n_bins)
    left = np.array([r_log[b[0]] for b in bins])
    bmax = np.array([m[64 + b].max() for b in bins])
    lx, lp = np.log1p(left), np.log(bmax)
    valid = bmax > 1e-250
    upper = valid & (np.arange(n_bins) >= n_bins // 2)
    if upper.sum() < 4:
        upper = valid
    gamma_fit = math.inf if upper.sum() < 2 else -_lsq_slope(lx[upper], lp[upper]) - d
    if not valid.all() or valid.sum() < 4:
        gamma_edge = math.inf
    else:
        gamma_edge = -_lsq_slope(lx[-4:], lp[-4:]) - d
    gamma = min(gamma_fit, gamma_edge, float(gamma_cap))
    if gamma < gamma_cap:
        gamma = math.floor(gamma / gamma_step + 1e-9) * gamma_step
    if not gamma > 0:
        raise TvcertError("no_polynomial_decay", f"fitted exponent {gamma:.4g} <= 0", gamma=gamma)

    p = d + gamma
    log_ratio = np.log(m) + p * np.log1p(r)
    i = int(np.argmax(log_ratio))
    best = float(log_ratio[i])
    a, b = r[max(i - 1, 0)], r[min(i + 1, r.size - 1)]
    if b > a:
        res = optimize.minimize_scalar(
            lambda t: -(math.log(max(float(_radial_modulus(cf, d, np.array([t]))[0]), LOG_FLOOR)) + p * math.log1p(t)),
            bounds=(a, b),
            method="bounded",
            options={"xatol": 1e-12 * max(1.0, b)},
        )
        best = max(best, -float(res.fun))
    c_phi = math.exp(best) * (1 + 1e-9)
    ok = bool(np.all(m <= c_phi * (1 + r) ** (-p) * (1 + 1e-12) + 1e-300))
    return TailEnvelope(c_phi=c_phi, gamma=float(gamma), dim=d, u_max_checked=u_hi, certified=ok)


@dataclass
class MomentBound:
    """c_f >= E|X|^delta up to ``tol`` (relative, declared by the method)."""

    c_f: float
    delta: float
    method: str = "closed_form"
    tol: float = 0.0

    def to_json(self):
        return {"c_f": self.c_f, "delta": self.delta, "method": self.method, "tol": self.tol}


def moment_bound(spec_or_samples, delta):
    """Moment bound from an analytic family or from samples (mean + 3 SE)."""
    delta = float(delta)
    if not delta > 0:
        raise TvcertError("invalid_regularity", "delta must be positive")
    if isinstance(spec_or_samples, (DistSpec, dict)):
        spec = dist_from_json(spec_or_samples)
        val = spec.moment(delta)
        if not math.isfinite(val):
            raise TvcertError("moment_diverges", f"E|X|^{delta} is not finite for {spec.family}")
        return MomentBound(float(val), delta, "closed_form")
    x = np.asarray(spec_or_samples, dtype=float)
    if x.size == 0:
        raise TvcertError("empty_samples", "moment bound needs samples")
    r = np.abs(x) if x.ndim == 1 else np.linalg.norm(x, axis=-1)
    v = r**delta
    if not np.all(np.isfinite(v)):
        raise TvcertError("moment_diverges", "nonfinite sample moment")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return MomentBound(float(v.mean() + 3 * se), delta, "monte_carlo", tol=3 * se)


def sample(spec, n, seed, stream=0):
    """n draws from ``spec``, deterministic in (seed, stream)."""
    if n < 1:
        raise TvcertError("invalid_count", "n must be >= 1")
    spec = dist_from_json(spec)
    return spec.draw(int(n), make_rng(seed, stream))


def load_dist(path_or_obj):
    if isinstance(path_or_obj, (str, Path)):
        import json

        return dist_from_json(json.loads(Path(path_or_obj).read_text()))
    return dist_from_json(path_or_obj)
