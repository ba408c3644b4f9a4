"""Distribution scoring, sampling, reparameterization and guide families."""

import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit, logit

from guideppl import tensor as T
from guideppl.dists import (
    Bernoulli,
    Beta,
    Cauchy,
    Delta,
    DiagCovGaussian,
    Dirichlet,
    Discrete,
    Exponential,
    Gamma,
    Gaussian,
    ImproperUniform,
    InverseSoftplusNormal,
    LogisticNormal,
    LogitNormal,
    MultivariateBernoulli,
    ParameterDomainError,
    SupportError,
    TensorGaussian,
    Uniform,
    ZeroProbabilityError,
    default_guide_family,
)
from guideppl.tensor import Tape, Tensor

from oracles import fd_grad, rel_err


def density(d, x: float) -> float:
    return math.exp(float(d.log_prob(x).data))


def draws(d, n, seed=0):
    eps, flag = d.expand(n).sample_base(np.random.default_rng(seed))
    v = d.expand(n).transform(eps) if flag else eps
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=float)


def moment_check(x, mean, var, mu4=None, k=5.0):
    """Sample mean/variance within ``k`` standard errors of the analytic values."""
    n = len(x)
    assert abs(x.mean() - mean) < k * math.sqrt(var / n)
    if mu4 is None:
        mu4 = 3 * var**2
    se_var = math.sqrt((mu4 - var**2) / n)
    assert abs(x.var() - var) < k * se_var


def quad_moments(pdf, lo, hi):
    m = integrate.quad(lambda t: t * pdf(t), lo, hi, limit=200)[0]
    v = integrate.quad(lambda t: (t - m) ** 2 * pdf(t), lo, hi, limit=200)[0]
    m4 = integrate.quad(lambda t: (t - m) ** 4 * pdf(t), lo, hi, limit=200)[0]
    return m, v, m4


class TestLogProbExamples:
    def test_bernoulli_true(self):
        assert float(Bernoulli(0.75).log_prob(True).data) == pytest.approx(-0.287682, abs=1e-6)
        assert float(Bernoulli(0.75).log_prob(True).data) == pytest.approx(math.log(0.75), abs=1e-15)

    def test_gaussian(self):
        expected = -0.5 * math.log(2 * math.pi) - 1.125
        assert float(Gaussian(2.0, 1.0).log_prob(0.5).data) == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(-2.043939, abs=1e-6)

    def test_improper_uniform_zero(self):
        for x in (-1e6, 0.0, 3.7):
            assert float(ImproperUniform().log_prob(x).data) == 0.0

    def test_delta_center_and_off_center(self):
        d = Delta(Tensor(1.5))
        assert float(d.log_prob(1.5).data) == 0.0
        with pytest.raises(SupportError):
            d.log_prob(1.2)

    def test_discrete_normalizes(self):
        d = Discrete([2.0, 6.0])
        assert float(d.log_prob(1).data) == pytest.approx(math.log(0.75), abs=1e-15)

    def test_scipy_agreement(self):
        cases = [
            (Beta(2.0, 3.0), 0.3, stats.beta(2, 3).logpdf(0.3)),
            (Gamma(2.5, 1.5), 2.0, stats.gamma(2.5, scale=1.5).logpdf(2.0)),
            (Exponential(2.0), 0.7, stats.expon(scale=0.5).logpdf(0.7)),
            (Cauchy(0.5, 2.0), -1.0, stats.cauchy(0.5, 2.0).logpdf(-1.0)),
            (Uniform(-1.0, 3.0), 0.2, math.log(0.25)),
            (Dirichlet([1.5, 2.0, 0.7]), np.array([0.2, 0.5, 0.3]),
             stats.dirichlet([1.5, 2.0, 0.7]).logpdf([0.2, 0.5, 0.3])),
        ]
        for d, x, ref in cases:
            assert float(d.log_prob(x).data) == pytest.approx(ref, abs=1e-12)


class TestSupportAndDomain:
    def test_out_of_support(self):
        with pytest.raises(SupportError):
            Beta(2.0, 2.0).log_prob(1.5)
        with pytest.raises(SupportError):
            Exponential(1.0).log_prob(-0.1)
        with pytest.raises(SupportError):
            Bernoulli(0.5).log_prob(2)
        with pytest.raises(SupportError):
            Discrete([1.0, 1.0]).log_prob(2)
        with pytest.raises(SupportError):
            Dirichlet([1.0, 1.0]).log_prob(np.array([0.3, 0.3]))

    def test_zero_mass(self):
        with pytest.raises(ZeroProbabilityError):
            Discrete([1.0, 0.0]).log_prob(1)

    def test_parameter_domain_rejected(self):
        for make in (lambda: Gaussian(0.0, -1.0), lambda: Exponential(0.0), lambda: Bernoulli(1.2),
                     lambda: Beta(0.0, 1.0), lambda: Gamma(1.0, -2.0), lambda: Dirichlet([1.0, -1.0]),
                     lambda: Uniform(2.0, 1.0), lambda: Discrete([-1.0, 2.0])):
            with pytest.raises(ParameterDomainError):
                make()


class TestNormalization:
    """Discrete masses sum to one; continuous densities integrate to one."""

    def test_discrete_families(self):
        total = sum(math.exp(float(Discrete([0.2, 1.3, 0.5]).log_prob(k).data)) for k in range(3))
        assert abs(total - 1) < 1e-10
        total = sum(math.exp(float(Bernoulli(0.37).log_prob(v).data)) for v in (False, True))
        assert abs(total - 1) < 1e-10
        mb = MultivariateBernoulli([0.2, 0.9])
        total = sum(math.exp(float(mb.log_prob(np.array([a, b])).data)) for a in (0.0, 1.0) for b in (0.0, 1.0))
        assert abs(total - 1) < 1e-10

    @pytest.mark.parametrize("d,lo,hi", [
        (Gaussian(0.3, 1.7), -np.inf, np.inf),
        (LogitNormal(0.4, 0.8), 0.0, 1.0),
        (LogitNormal(-0.2, 1.1, low=-2.0, high=3.0), -2.0, 3.0),
        (InverseSoftplusNormal(0.5, 0.9), 0.0, np.inf),
        (Exponential(1.7), 0.0, np.inf),
        (Cauchy(0.5, 2.0), -np.inf, np.inf),
        (Uniform(-1.0, 2.0), -1.0, 2.0),
        (Beta(2.5, 1.5), 0.0, 1.0),
        (Gamma(2.0, 0.8), 0.0, np.inf),
    ])
    def test_continuous_scalar(self, d, lo, hi):
        f = lambda x: density(d, x) if lo < x < hi else 0.0
        total = integrate.quad(f, lo, hi, limit=400)[0]
        assert abs(total - 1) < 1e-4

    def test_dirichlet_two_dim(self):
        d = Dirichlet([2.0, 3.0])
        total = integrate.quad(lambda t: density(d, np.array([t, 1 - t])), 0, 1)[0]
        assert abs(total - 1) < 1e-4

    def test_logistic_normal_two_dim(self):
        # simplex of dimension 2 is parameterized by x1; dx2 = -dx1
        d = LogisticNormal([0.3], [0.7])
        total = integrate.quad(lambda t: density(d, np.array([t, 1 - t])), 0, 1, limit=200)[0]
        assert abs(total - 1) < 1e-4


class TestTransforms:
    def test_gaussian_identity(self):
        assert float(Gaussian(0.0, 1.0).transform(1.3).data) == 1.3

    def test_logit_normal_centre(self):
        assert float(LogitNormal(0.0, 1.0).transform(0.0).data) == 0.5

    def test_gaussian_location_derivative(self):
        with Tape() as tape:
            mu = tape.leaf(0.7)
            out = Gaussian(mu, 2.0).transform(0.4)
        assert float(T.backward(out)[mu]) == 1.0

    def test_exponential_rule(self):
        assert float(Exponential(2.0).transform(0.3).data) == pytest.approx(-math.log(0.3) / 2.0, abs=1e-15)

    def test_cauchy_rule(self):
        v = float(Cauchy(1.0, 3.0).transform(0.8).data)
        assert v == pytest.approx(1.0 + 3.0 * math.tan(math.pi * 0.3), abs=1e-12)

    def test_softplus_and_simplex_rules(self):
        assert float(InverseSoftplusNormal(0.5, 2.0).transform(0.25).data) == pytest.approx(math.log1p(math.exp(1.0)))
        np.testing.assert_allclose(LogisticNormal([0.0, 0.0], [1.0, 1.0]).transform(np.zeros(2)).data, [1 / 3] * 3)

    def test_base_flags(self):
        rng = np.random.default_rng(0)
        assert Gaussian(0.0, 1.0).sample_base(rng)[1] is True
        assert Bernoulli(0.5).sample_base(rng)[1] is False
        assert Discrete([1.0, 1.0]).sample_base(rng)[1] is False
        with pytest.raises(TypeError):
            Bernoulli(0.5).transform(True)


class TestReparameterization:
    """Moments of transform(sampleBase()) over 10^6 draws, 5 standard errors."""

    N = 10**6

    def test_gaussian(self):
        moment_check(draws(Gaussian(1.5, 0.7), self.N), 1.5, 0.49)

    def test_exponential(self):
        lam = 2.5
        moment_check(draws(Exponential(lam), self.N), 1 / lam, 1 / lam**2, 9 / lam**4)

    def test_logit_normal(self):
        d = LogitNormal(0.3, 0.9)
        pdf = lambda t: stats.norm(0.3, 0.9).pdf(logit(t)) / (t * (1 - t))
        moment_check(draws(d, self.N), *quad_moments(pdf, 0, 1))

    def test_scaled_logit_normal(self):
        d = LogitNormal(-0.4, 0.6, low=2.0, high=5.0)
        pdf = lambda t: stats.norm(-0.4, 0.6).pdf(logit((t - 2) / 3)) / ((t - 2) * (5 - t) / 3)
        moment_check(draws(d, self.N), *quad_moments(pdf, 2, 5))

    def test_inverse_softplus_normal(self):
        d = InverseSoftplusNormal(0.2, 0.8)
        # x = softplus(u), u = log(expm1(x)) = x + log(1 - exp(-x)), du/dx = 1 / (1 - exp(-x))
        pdf = lambda t: stats.norm(0.2, 0.8).pdf(t + np.log(-np.expm1(-t))) / -np.expm1(-t)
        moment_check(draws(d, self.N), *quad_moments(pdf, 0, np.inf))

    def test_cauchy_quantiles(self):
        x = draws(Cauchy(1.0, 2.0), self.N)
        q = np.quantile(x, [0.25, 0.5, 0.75])
        # quantile s.e. = sqrt(p(1-p)/n) / f(q)
        for p, val in zip((0.25, 0.5, 0.75), q):
            ref = stats.cauchy(1.0, 2.0).ppf(p)
            se = math.sqrt(p * (1 - p) / self.N) / stats.cauchy(1.0, 2.0).pdf(ref)
            assert abs(val - ref) < 5 * se

    def test_diag_and_tensor_gaussian(self):
        rng = np.random.default_rng(1)
        d = DiagCovGaussian([0.0, 2.0], [1.0, 0.5])
        eps, _ = d.expand(self.N).sample_base(rng)
        x = d.expand(self.N).transform(eps).data
        moment_check(x[:, 1], 2.0, 0.25)
        t = TensorGaussian(1.0, 2.0, [2, 3])
        eps, _ = t.sample_base(rng)
        assert t.transform(eps).shape == (2, 3)

    def test_logistic_normal_mean(self):
        d = LogisticNormal([0.5, -0.3], [0.4, 0.9])
        x = draws(d, self.N)
        # first coordinate's mean by Monte Carlo on an independent generator
        rng = np.random.default_rng(99)
        u = np.column_stack([0.5 + 0.4 * rng.standard_normal(self.N), -0.3 + 0.9 * rng.standard_normal(self.N),
                             np.zeros(self.N)])
        ref = np.exp(u - u.max(1, keepdims=True))
        ref /= ref.sum(1, keepdims=True)
        se = math.sqrt(x[:, 0].var() / self.N + ref[:, 0].var() / self.N)
        assert abs(x[:, 0].mean() - ref[:, 0].mean()) < 5 * se


class TestParameterGradients:
    """logProb gradients w.r.t. parameters against central differences."""

    @pytest.mark.parametrize("make,params,value", [
        (lambda p: Gaussian(p[0], p[1]), [0.3, 1.4], 0.9),
        (lambda p: LogitNormal(p[0], p[1]), [0.3, 0.7], 0.35),
        (lambda p: InverseSoftplusNormal(p[0], p[1]), [0.1, 0.8], 1.2),
        (lambda p: Exponential(p[0]), [1.7], 0.6),
        (lambda p: Cauchy(p[0], p[1]), [0.2, 1.3], -0.4),
        (lambda p: Beta(p[0], p[1]), [2.2, 1.4], 0.3),
        (lambda p: Gamma(p[0], p[1]), [2.5, 0.7], 1.1),
        (lambda p: Bernoulli(p[0]), [0.35], True),
        (lambda p: Discrete(T.get(p, slice(0, 3))), [0.5, 1.2, 0.3], 1),
        (lambda p: Dirichlet(T.get(p, slice(0, 3))), [1.5, 0.8, 2.1], np.array([0.2, 0.5, 0.3])),
        (lambda p: LogisticNormal(T.get(p, slice(0, 2)), T.get(p, slice(2, 4))), [0.1, -0.4, 0.8, 1.2],
         np.array([0.2, 0.5, 0.3])),
        (lambda p: MultivariateBernoulli(T.get(p, slice(0, 2))), [0.3, 0.8], np.array([1.0, 0.0])),
    ])
    def test_gradient(self, make, params, value):
        p0 = np.array(params, dtype=float)
        with Tape() as tape:
            leaf = tape.leaf(p0)
            lp = make(leaf).log_prob(value)
        g = T.backward(lp)[leaf]
        num = fd_grad(lambda p: float(make(Tensor(p)).log_prob(value).data), p0)
        assert rel_err(g, num) < 1e-4

    def test_value_gradient_continuous(self):
        with Tape() as tape:
            x = tape.leaf(0.8)
            lp = Gaussian(0.3, 1.5).log_prob(x)
        assert float(T.backward(lp)[x]) == pytest.approx(-(0.8 - 0.3) / 1.5**2, abs=1e-14)


def _guide(d):
    fam = default_guide_family(d)
    return fam(lambda suffix, dims: Tensor(np.zeros(dims)))


class TestDefaultGuideFamily:
    def test_pairings(self):
        assert isinstance(_guide(Beta(2.0, 2.0)), LogitNormal)
        assert isinstance(_guide(Gaussian(0.0, 1.0)), Gaussian)
        assert isinstance(_guide(Gamma(1.0, 1.0)), InverseSoftplusNormal)
        assert isinstance(_guide(Dirichlet([1.0, 1.0, 1.0])), LogisticNormal)
        assert isinstance(_guide(Uniform(2.0, 5.0)), LogitNormal)
        assert isinstance(_guide(Bernoulli(0.3)), Bernoulli)
        assert isinstance(_guide(Exponential(1.0)), Exponential)
        assert isinstance(_guide(ImproperUniform()), Delta)

    def test_discrete_guide_is_simplex_of_free_vector(self):
        seen = {}

        def pf(suffix, dims):
            seen[suffix] = dims
            return Tensor(np.zeros(dims))

        g = default_guide_family(Discrete([1.0, 2.0, 3.0, 4.0]))(pf)
        assert seen == {"ps": (3,)}
        np.testing.assert_allclose(g.ps.data, [0.25] * 4)

    def test_gaussian_sigma_through_softplus(self):
        g = _guide(Gaussian(0.0, 1.0))
        assert float(g.sigma.data) == pytest.approx(math.log(2))

    @pytest.mark.parametrize("d", [
        Gaussian(0.0, 1.0), Beta(2.0, 2.0), Gamma(2.0, 1.0), Dirichlet([1.0, 2.0, 3.0]), Uniform(-1.0, 4.0),
        Bernoulli(0.2), Discrete([1.0, 1.0, 1.0]), Exponential(2.0), Cauchy(0.0, 1.0),
        LogitNormal(0.0, 1.0), LogisticNormal([0.0], [1.0]), InverseSoftplusNormal(0.0, 1.0),
        DiagCovGaussian([0.0, 0.0], [1.0, 1.0]), TensorGaussian(0.0, 1.0, [4]),
        MultivariateBernoulli([0.5, 0.5, 0.5]),
    ])
    def test_support_equality(self, d):
        g = _guide(d)
        assert g.support == d.support or (g.support.matches(d.support) and d.support.matches(g.support))
        assert g.support.kind == d.support.kind
        assert (g.support.low, g.support.high) == (d.support.low, d.support.high)
