"""Primitive distributions: scoring, base sampling and reparameterization.

Every distribution has a *batch shape* and an *event shape*.  ``log_prob``
sums over the event axes and returns a tensor of the batch shape, so an
unbatched distribution scores to a scalar.  Batched instances arise when a
model body runs over a whole minibatch at once (see ``runtime.map_data``).

Reparameterizable families expose ``sample_base`` / ``transform`` following
the location-scale and inverse-CDF rules below; the remaining families are
sampled directly and carry ``reparameterized = False``.

=======================  ==============  ============================
family                   base noise      transform
=======================  ==============  ============================
Gaussian                 N(0, 1)         mu + sigma * eps
LogitNormal              N(0, 1)         sigmoid(mu + sigma * eps)
LogisticNormal           N(0, 1)         simplex(mu + sigma * eps)
InverseSoftplusNormal    N(0, 1)         softplus(mu + sigma * eps)
Exponential              U(0, 1]         -log(eps) / rate
Cauchy                   U(0, 1]         loc + scale * tan(pi (eps - 1/2))
=======================  ==============  ============================
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor, as_tensor

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class SupportError(ValueError):
    """A value lies outside the support of a distribution."""


class ZeroProbabilityError(DomainError):
    """A value inside the nominal support has zero mass under the parameters."""


class ParameterDomainError(ValueError):
    """Distribution parameters violate their domain at construction."""


@dataclass(frozen=True)
class Support:
    """Support metadata: kind, event shape and bounds.

    ``shape=None`` matches any event shape (improper priors).  The ``point``
    kind belongs to Delta, which may guide any continuous support.
    """

    kind: str
    shape: tuple | None = ()
    low: float | None = None
    high: float | None = None
    size: int | None = None

    @property
    def discrete(self) -> bool:
        return self.kind in ("boolean", "categorical", "binary")

    def matches(self, other: "Support") -> bool:
        if self.shape is not None and other.shape is not None and self.shape != other.shape:
            return False
        if self.kind == "point" or other.kind == "point":
            return not (self.discrete or other.discrete)
        return (self.kind, self.low, self.high, self.size) == (other.kind, other.low, other.high, other.size)


def _check(cond, msg):
    if not np.all(cond):
        raise ParameterDomainError(msg)


def _value_tensor(v) -> Tensor:
    t = as_tensor(v)
    if not np.all(np.isfinite(t.data)):
        raise SupportError("value is not finite")
    return t


class Distribution:
    """Base class; subclasses set the class attributes and scoring rules."""

    family = "Distribution"
    reparameterized = False
    discrete = False
    params: tuple = ()  # tensor-valued parameter attribute names
    param_event_ndims: tuple = ()  # trailing event ndims of each parameter

    @property
    def batch_shape(self) -> tuple:
        if not self.params:
            return getattr(self, "_batch", ())
        t = getattr(self, self.params[0])
        k = self.param_event_ndims[0]
        return t.shape[: t.ndim - k] if k else t.shape

    @property
    def event_shape(self) -> tuple:
        return ()

    @property
    def support(self) -> Support:
        raise NotImplementedError

    def log_prob(self, value) -> Tensor:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator):
        """Draw a value directly from this distribution (no gradient flow)."""
        eps, flag = self.sample_base(rng)
        if flag:
            return T.detach(self.transform(eps))
        return eps

    def sample_base(self, rng: np.random.Generator):
        """Return ``(eps, reparameterized)``; for direct samplers eps is the value."""
        raise NotImplementedError

    def transform(self, eps) -> Tensor:
        raise TypeError(f"{self.family} is not reparameterizable")

    def expand(self, count: int) -> "Distribution":
        """Copy with every parameter stacked ``count`` times on a new batch axis."""
        new = copy.copy(self)
        for name in self.params:
            setattr(new, name, T.repeat_rows(getattr(self, name), count))
        if not self.params:
            new._batch = (count,) + self.batch_shape
        return new

    def _check_value_shape(self, shape: tuple) -> None:
        want = self.batch_shape + self.event_shape
        if tuple(shape) != want:
            raise ShapeError(f"{self.family}: value shape {tuple(shape)} != expected {want}")

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}={np.array2string(getattr(self, n).data, precision=4)}" for n in self.params)
        return f"{self.family}({parts})"


def _event_sum(t: Tensor, k: int) -> Tensor:
    for _ in range(k):
        t = T.tsum(t, -1) if t.ndim > 1 else T.tsum(t)
    return t


def _normal_lp(u: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    z = (u - mu) / sigma
    return -0.5 * T.square(z) - T.log(sigma) - _HALF_LOG_2PI


class _LocScaleNormal(Distribution):
    """Shared storage for families driven by a Gaussian N(mu, sigma) base draw."""

    reparameterized = True
    params = ("mu", "sigma")
    param_event_ndims = (0, 0)

    def __init__(self, mu, sigma):
        mu = as_tensor(mu)
        sigma = as_tensor(sigma)
        if mu.shape != sigma.shape:
            if mu.shape == ():
                mu = mu + np.zeros(sigma.shape)
            elif sigma.shape == ():
                sigma = sigma + np.zeros(mu.shape)
            else:
                raise ShapeError(f"{self.family}: mu {mu.shape} and sigma {sigma.shape} differ")
        _check(sigma.data > 0, f"{self.family}: sigma must be positive")
        self.mu = mu
        self.sigma = sigma

    def sample_base(self, rng):
        return rng.standard_normal(self.mu.shape), True

    def _pre(self, eps) -> Tensor:
        return self.mu + self.sigma * Tensor(eps)


class Gaussian(_LocScaleNormal):
    family = "Gaussian"

    @property
    def support(self):
        return Support("real")

    def transform(self, eps):
        return self._pre(eps)

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        return _normal_lp(x, self.mu, self.sigma)


class TensorGaussian(_LocScaleNormal):
    """Tensor of iid Gaussian entries with event shape ``dims``."""

    family = "TensorGaussian"

    def __init__(self, mu, sigma, dims):
        self.dims = tuple(int(d) for d in dims)
        mu = as_tensor(mu)
        sigma = as_tensor(sigma)
        if mu.shape == ():
            mu = mu + np.zeros(self.dims)
        if sigma.shape == ():
            sigma = sigma + np.zeros(self.dims)
        super().__init__(mu, sigma)
        if mu.shape[mu.ndim - len(self.dims):] != self.dims:
            raise ShapeError(f"TensorGaussian: parameters {mu.shape} do not end in dims {self.dims}")
        k = len(self.dims)
        self.param_event_ndims = (k, k)

    @property
    def event_shape(self):
        return self.dims

    @property
    def support(self):
        return Support("real", self.dims)

    def transform(self, eps):
        return self._pre(eps)

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        return _event_sum(_normal_lp(x, self.mu, self.sigma), len(self.dims))


class DiagCovGaussian(_LocScaleNormal):
    family = "DiagCovGaussian"
    param_event_ndims = (1, 1)

    def __init__(self, mu, sigma):
        super().__init__(mu, sigma)
        if self.mu.ndim < 1:
            raise ShapeError("DiagCovGaussian needs vector parameters")

    @property
    def event_shape(self):
        return self.mu.shape[-1:]

    @property
    def support(self):
        return Support("real", self.event_shape)

    def transform(self, eps):
        return self._pre(eps)

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        return _event_sum(_normal_lp(x, self.mu, self.sigma), 1)


class LogitNormal(_LocScaleNormal):
    """``low + (high - low) * sigmoid(N(mu, sigma))``; the unit interval by default."""

    family = "LogitNormal"

    def __init__(self, mu, sigma, low: float = 0.0, high: float = 1.0):
        super().__init__(mu, sigma)
        if not low < high:
            raise ParameterDomainError("LogitNormal: need low < high")
        self.low = float(low)
        self.high = float(high)

    @property
    def support(self):
        return Support("interval", (), self.low, self.high)

    def transform(self, eps):
        s = T.sigmoid(self._pre(eps))
        if self.low == 0.0 and self.high == 1.0:
            return s
        return self.low + (self.high - self.low) * s

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data <= self.low) or np.any(x.data >= self.high):
            raise SupportError(f"LogitNormal: value outside ({self.low}, {self.high})")
        width = self.high - self.low
        s = x if width == 1.0 and self.low == 0.0 else (x - self.low) / width
        ls = T.log(s)
        l1s = T.log(1.0 - s)
        return _normal_lp(ls - l1s, self.mu, self.sigma) - ls - l1s - math.log(width)


class LogisticNormal(_LocScaleNormal):
    """Simplex-valued: ``simplex(N(mu, sigma))`` with ``mu`` of length K-1."""

    family = "LogisticNormal"
    param_event_ndims = (1, 1)

    def __init__(self, mu, sigma):
        super().__init__(mu, sigma)
        if self.mu.ndim < 1:
            raise ShapeError("LogisticNormal needs vector parameters")
        k = self.mu.shape[-1] + 1
        # maps log x (length K) to log(x_k / x_K) for k < K
        self._ratio = np.vstack([np.eye(k - 1), -np.ones((1, k - 1))])

    @property
    def event_shape(self):
        return (self.mu.shape[-1] + 1,)

    @property
    def support(self):
        return Support("simplex", self.event_shape)

    def transform(self, eps):
        return T.simplex(self._pre(eps))

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        _check_simplex(x.data, self.family)
        lx = T.log(x)
        u = T.matmul(lx, self._ratio)
        return _event_sum(_normal_lp(u, self.mu, self.sigma), 1) - _event_sum(lx, 1)


class InverseSoftplusNormal(_LocScaleNormal):
    """Positive-valued: ``softplus(N(mu, sigma))``."""

    family = "InverseSoftplusNormal"

    @property
    def support(self):
        return Support("positive")

    def transform(self, eps):
        return T.softplus(self._pre(eps))

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data <= 0):
            raise SupportError("InverseSoftplusNormal: value must be positive")
        u = T.softplus_inv(x)
        return _normal_lp(u, self.mu, self.sigma) - T.log_sigmoid(u)


def _check_simplex(d: np.ndarray, family: str) -> None:
    if np.any(d <= 0) or np.any(np.abs(d.sum(axis=-1) - 1.0) > 1e-8):
        raise SupportError(f"{family}: value is not a point in the open simplex")


class Exponential(Distribution):
    family = "Exponential"
    reparameterized = True
    params = ("rate",)
    param_event_ndims = (0,)

    def __init__(self, rate):
        self.rate = as_tensor(rate)
        _check(self.rate.data > 0, "Exponential: rate must be positive")

    @property
    def support(self):
        return Support("positive")

    def sample_base(self, rng):
        return 1.0 - rng.random(self.rate.shape), True

    def transform(self, eps):
        return -T.log(Tensor(eps)) / self.rate

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data < 0):
            raise SupportError("Exponential: value must be nonnegative")
        return T.log(self.rate) - self.rate * x


class Cauchy(Distribution):
    family = "Cauchy"
    reparameterized = True
    params = ("loc", "scale")
    param_event_ndims = (0, 0)

    def __init__(self, loc, scale):
        self.loc = as_tensor(loc)
        self.scale = as_tensor(scale)
        if self.loc.shape != self.scale.shape:
            raise ShapeError("Cauchy: loc and scale shapes differ")
        _check(self.scale.data > 0, "Cauchy: scale must be positive")

    @property
    def support(self):
        return Support("real")

    def sample_base(self, rng):
        return 1.0 - rng.random(self.loc.shape), True

    def transform(self, eps):
        return self.loc + self.scale * T.tan(Tensor(math.pi * (np.asarray(eps) - 0.5)))

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        z = (x - self.loc) / self.scale
        return -math.log(math.pi) - T.log(self.scale) - T.log(1.0 + T.square(z))


class Uniform(Distribution):
    family = "Uniform"
    params = ("a", "b")
    param_event_ndims = (0, 0)

    def __init__(self, a, b):
        self.a = as_tensor(a)
        self.b = as_tensor(b)
        if self.a.shape != self.b.shape:
            raise ShapeError("Uniform: bounds must share a shape")
        _check(self.a.data < self.b.data, "Uniform: need a < b")

    @property
    def support(self):
        if self.a.size != 1:
            raise TypeError("Uniform support needs scalar bounds")
        return Support("interval", (), float(self.a.data.flat[0]), float(self.b.data.flat[0]))

    def sample_base(self, rng):
        u = rng.random(self.a.shape)
        return Tensor(self.a.data + (self.b.data - self.a.data) * u), False

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data < self.a.data) or np.any(x.data > self.b.data):
            raise SupportError("Uniform: value outside [a, b]")
        return -T.log(self.b - self.a)


class Beta(Distribution):
    family = "Beta"
    params = ("a", "b")
    param_event_ndims = (0, 0)

    def __init__(self, a, b):
        self.a = as_tensor(a)
        self.b = as_tensor(b)
        if self.a.shape != self.b.shape:
            raise ShapeError("Beta: parameter shapes differ")
        _check(self.a.data > 0, "Beta: a must be positive")
        _check(self.b.data > 0, "Beta: b must be positive")

    @property
    def support(self):
        return Support("interval", (), 0.0, 1.0)

    def sample_base(self, rng):
        return Tensor(rng.beta(self.a.data, self.b.data)), False

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data <= 0) or np.any(x.data >= 1):
            raise SupportError("Beta: value outside (0, 1)")
        a, b = self.a, self.b
        norm = T.lgamma(a) + T.lgamma(b) - T.lgamma(a + b)
        return (a - 1.0) * T.log(x) + (b - 1.0) * T.log(1.0 - x) - norm


class Gamma(Distribution):
    """Shape/scale parameterization."""

    family = "Gamma"
    params = ("shape_", "scale")
    param_event_ndims = (0, 0)

    def __init__(self, shape, scale):
        self.shape_ = as_tensor(shape)
        self.scale = as_tensor(scale)
        if self.shape_.shape != self.scale.shape:
            raise ShapeError("Gamma: parameter shapes differ")
        _check(self.shape_.data > 0, "Gamma: shape must be positive")
        _check(self.scale.data > 0, "Gamma: scale must be positive")

    @property
    def support(self):
        return Support("positive")

    def sample_base(self, rng):
        return Tensor(rng.gamma(self.shape_.data, self.scale.data)), False

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        if np.any(x.data <= 0):
            raise SupportError("Gamma: value must be positive")
        k, th = self.shape_, self.scale
        return (k - 1.0) * T.log(x) - x / th - T.lgamma(k) - k * T.log(th)


class Dirichlet(Distribution):
    family = "Dirichlet"
    params = ("alpha",)
    param_event_ndims = (1,)

    def __init__(self, alpha):
        self.alpha = as_tensor(alpha)
        if self.alpha.ndim < 1 or self.alpha.shape[-1] < 2:
            raise ShapeError("Dirichlet needs a concentration vector of length >= 2")
        _check(self.alpha.data > 0, "Dirichlet: concentrations must be positive")

    @property
    def event_shape(self):
        return self.alpha.shape[-1:]

    @property
    def support(self):
        return Support("simplex", self.event_shape)

    def sample_base(self, rng):
        g = rng.standard_gamma(self.alpha.data)
        g = np.maximum(g, np.finfo(float).tiny)
        return Tensor(g / g.sum(axis=-1, keepdims=True)), False

    def log_prob(self, value):
        x = _value_tensor(value)
        self._check_value_shape(x.shape)
        _check_simplex(x.data, self.family)
        a = self.alpha
        norm = _event_sum(T.lgamma(a), 1) - T.lgamma(_event_sum(a, 1))
        return _event_sum((a - 1.0) * T.log(x), 1) - norm


def _bernoulli_terms(p: Tensor, v: np.ndarray) -> Tensor:
    """Elementwise log-mass of 0/1 values ``v``; uses logits when available."""
    vf = v.astype(np.float64)
    if p.logits is not None:
        return T.log_sigmoid(p.logits * (2.0 * vf - 1.0))
    q = (1.0 - vf) + (2.0 * vf - 1.0) * p
    if np.any(q.data == 0):
        raise ZeroProbabilityError("Bernoulli: observed value has probability zero")
    return T.log(q)


def _binary_values(value, family: str) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    v = np.asarray(value)
    if v.dtype != bool:
        if not np.all((v == 0) | (v == 1)):
            raise SupportError(f"{family}: values must be 0/1 or boolean")
        v = v.astype(bool)
    return v


class Bernoulli(Distribution):
    family = "Bernoulli"
    discrete = True
    params = ("p",)
    param_event_ndims = (0,)

    def __init__(self, p):
        self.p = as_tensor(p)
        _check((self.p.data >= 0) & (self.p.data <= 1), "Bernoulli: p must lie in [0, 1]")

    @property
    def support(self):
        return Support("boolean")

    def expand(self, count):
        new = super().expand(count)
        if self.p.logits is not None:
            new.p.logits = T.repeat_rows(self.p.logits, count)
        return new

    def sample_base(self, rng):
        u = rng.random(self.p.shape)
        v = u < self.p.data
        return (bool(v) if v.ndim == 0 else v), False

    def log_prob(self, value):
        v = _binary_values(value, self.family)
        self._check_value_shape(v.shape)
        return _bernoulli_terms(self.p, v)


class MultivariateBernoulli(Distribution):
    """Independent Bernoulli entries; values are 0/1 float tensors."""

    family = "MultivariateBernoulli"
    discrete = True
    params = ("ps",)
    param_event_ndims = (1,)

    def __init__(self, ps):
        self.ps = as_tensor(ps)
        if self.ps.ndim < 1:
            raise ShapeError("MultivariateBernoulli needs a probability vector")
        _check((self.ps.data >= 0) & (self.ps.data <= 1), "MultivariateBernoulli: ps must lie in [0, 1]")

    @property
    def event_shape(self):
        return self.ps.shape[-1:]

    @property
    def support(self):
        return Support("binary", self.event_shape)

    def expand(self, count):
        new = super().expand(count)
        if self.ps.logits is not None:
            new.ps.logits = T.repeat_rows(self.ps.logits, count)
        return new

    def sample_base(self, rng):
        u = rng.random(self.ps.shape)
        return Tensor((u < self.ps.data).astype(np.float64)), False

    def log_prob(self, value):
        v = _binary_values(value, self.family)
        self._check_value_shape(v.shape)
        return _event_sum(_bernoulli_terms(self.ps, v), 1)


class Discrete(Distribution):
    """Categorical over ``0..K-1``; the weight vector is normalized internally."""

    family = "Discrete"
    discrete = True
    params = ("ps",)
    param_event_ndims = (1,)

    def __init__(self, ps):
        self.ps = as_tensor(ps)
        if self.ps.ndim < 1:
            raise ShapeError("Discrete needs a weight vector")
        _check(self.ps.data >= 0, "Discrete: weights must be nonnegative")
        _check(self.ps.data.sum(axis=-1) > 0, "Discrete: weights must not all be zero")

    @property
    def num_categories(self) -> int:
        return self.ps.shape[-1]

    @property
    def support(self):
        return Support("categorical", (), size=self.num_categories)

    def sample_base(self, rng):
        d = self.ps.data
        cdf = np.cumsum(d, axis=-1)
        u = rng.random(d.shape[:-1]) * cdf[..., -1]
        v = np.minimum((cdf < u[..., None]).sum(axis=-1), d.shape[-1] - 1)
        return (int(v) if v.ndim == 0 else v), False

    def log_prob(self, value):
        v = np.asarray(value)
        if v.dtype == bool or not np.issubdtype(v.dtype, np.integer):
            if not np.all(np.mod(v, 1) == 0):
                raise SupportError("Discrete: values must be integers")
            v = v.astype(np.intp)
        self._check_value_shape(v.shape)
        if np.any(v < 0) or np.any(v >= self.num_categories):
            raise SupportError(f"Discrete: value outside 0..{self.num_categories - 1}")
        picked = T.take_last(self.ps, v)
        if np.any(picked.data == 0):
            raise ZeroProbabilityError("Discrete: value has probability zero")
        total = _event_sum(self.ps, 1)
        return T.log(picked) - T.log(total)


class Delta(Distribution):
    """Point mass at ``center``; scores 0 at the center by convention."""

    family = "Delta"
    reparameterized = True
    params = ("center",)

    def __init__(self, center, event_ndim: int | None = None):
        self.center = as_tensor(center)
        k = self.center.ndim if event_ndim is None else event_ndim
        self.param_event_ndims = (k,)

    @property
    def event_shape(self):
        k = self.param_event_ndims[0]
        return self.center.shape[self.center.ndim - k:]

    @property
    def support(self):
        return Support("point", self.event_shape)

    def sample_base(self, rng):
        return self.center.data, True

    def transform(self, eps):
        return self.center

    def log_prob(self, value):
        x = as_tensor(value)
        self._check_value_shape(x.shape)
        if x is not self.center and not np.array_equal(x.data, self.center.data):
            raise SupportError("Delta: value differs from the center")
        return Tensor(np.zeros(self.batch_shape))


class ImproperUniform(Distribution):
    """Flat improper density on the reals; scores 0 everywhere and cannot be sampled."""

    family = "ImproperUniform"

    def __init__(self, dims=None):
        self.dims = None if dims is None else tuple(int(d) for d in dims)
        self._batch = ()

    @property
    def event_shape(self):
        return self.dims if self.dims is not None else ()

    @property
    def support(self):
        return Support("real", self.dims)

    def sample_base(self, rng):
        raise TypeError("ImproperUniform cannot be sampled")

    def log_prob(self, value):
        x = _value_tensor(value)
        if self.dims is None:
            return Tensor(np.zeros(self._batch))
        self._check_value_shape(x.shape)
        return Tensor(np.zeros(self._batch))


# -- automatic guide families ------------------------------------------------

ParamFn = Callable[[str, tuple], Tensor]


@dataclass(frozen=True)
class GuideFamily:
    """Constructor for the default guide of a model distribution.

    Calling it with ``param_fn(suffix, dims)`` builds the guide; bounded
    parameters pass through softplus / sigmoid / simplex as needed.
    """

    family: type
    build: Callable[[ParamFn], Distribution]

    def __call__(self, param_fn: ParamFn) -> Distribution:
        return self.build(param_fn)


def _ln_guide(cls, dims, **kw):
    return lambda pf: cls(pf("mu", dims), T.softplus(pf("sigma", dims)), **kw)


def default_guide_family(d: Distribution) -> GuideFamily:
    """Guide family used for automatic mean-field guides of ``d``."""
    if isinstance(d, TensorGaussian):
        dims = d.dims
        if len(dims) == 1:
            return GuideFamily(DiagCovGaussian, _ln_guide(DiagCovGaussian, dims))
        return GuideFamily(TensorGaussian, lambda pf: TensorGaussian(pf("mu", dims), T.softplus(pf("sigma", dims)), dims))
    if isinstance(d, DiagCovGaussian):
        dims = d.event_shape
        return GuideFamily(DiagCovGaussian, _ln_guide(DiagCovGaussian, dims))
    if isinstance(d, Gaussian):
        return GuideFamily(Gaussian, _ln_guide(Gaussian, ()))
    if isinstance(d, LogitNormal):
        return GuideFamily(LogitNormal, _ln_guide(LogitNormal, (), low=d.low, high=d.high))
    if isinstance(d, LogisticNormal):
        return GuideFamily(LogisticNormal, _ln_guide(LogisticNormal, (d.event_shape[0] - 1,)))
    if isinstance(d, InverseSoftplusNormal):
        return GuideFamily(InverseSoftplusNormal, _ln_guide(InverseSoftplusNormal, ()))
    if isinstance(d, Exponential):
        return GuideFamily(Exponential, lambda pf: Exponential(T.softplus(pf("rate", ()))))
    if isinstance(d, Cauchy):
        return GuideFamily(Cauchy, lambda pf: Cauchy(pf("loc", ()), T.softplus(pf("scale", ()))))
    if isinstance(d, Uniform):
        s = d.support
        return GuideFamily(LogitNormal, _ln_guide(LogitNormal, (), low=s.low, high=s.high))
    if isinstance(d, Beta):
        return GuideFamily(LogitNormal, _ln_guide(LogitNormal, ()))
    if isinstance(d, Gamma):
        return GuideFamily(InverseSoftplusNormal, _ln_guide(InverseSoftplusNormal, ()))
    if isinstance(d, Dirichlet):
        return GuideFamily(LogisticNormal, _ln_guide(LogisticNormal, (d.event_shape[0] - 1,)))
    if isinstance(d, Bernoulli):
        return GuideFamily(Bernoulli, lambda pf: Bernoulli(T.sigmoid(pf("p", ()))))
    if isinstance(d, MultivariateBernoulli):
        dims = d.event_shape
        return GuideFamily(MultivariateBernoulli, lambda pf: MultivariateBernoulli(T.sigmoid(pf("ps", dims))))
    if isinstance(d, Discrete):
        k = d.num_categories
        return GuideFamily(Discrete, lambda pf: Discrete(T.simplex(pf("ps", (k - 1,)))))
    if isinstance(d, ImproperUniform):
        dims = d.dims if d.dims is not None else ()
        return GuideFamily(Delta, lambda pf: Delta(pf("value", dims), event_ndim=len(dims)))
    if isinstance(d, Delta):
        return GuideFamily(Delta, lambda pf: d)
    raise TypeError(f"no default guide for {d.family}")
