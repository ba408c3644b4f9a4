"""Gaussian mixture and small continuous Bayesian-network programs.

All models map over the observations with a vectorized ``map_data`` and take
their data as keyword arguments, so ``run_trace(model, data={"obs": test})``
rebinds them to new observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..dists import Discrete, Gaussian
from ..nn import mlp
from ..runtime import factor, map_data, model_param, observe, sample

__all__ = [
    "GmmParams",
    "DEFAULT_GMM",
    "gmm_generate_data",
    "gmm_model",
    "gmm_marginalized_model",
    "gmm_meanfield_model",
    "gmm_marginal_log_density",
    "gmm_learned_params",
    "bn1_model",
    "bn2_model",
    "bn2_dep_model",
    "bn_generate_data",
]

N_COMPS = 3


@dataclass(frozen=True)
class GmmParams:
    weights: tuple
    means: tuple
    sigmas: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must be a probability vector")
        if not len(self.means) == len(self.sigmas) == len(w):
            raise ValueError("one mean and sigma per component")
        if np.any(np.asarray(self.sigmas) <= 0):
            raise ValueError("component sigmas must be positive")


DEFAULT_GMM = GmmParams(weights=(0.3, 0.4, 0.3), means=(-5.0, 0.0, 5.0), sigmas=(1.0, 1.0, 1.0))


def gmm_generate_data(params: GmmParams, n: int, rng) -> np.ndarray:
    """``n`` draws: component z ~ Discrete(weights), y ~ Gaussian(mu_z, sigma_z)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    z = rng.choice(len(params.weights), size=n, p=np.asarray(params.weights))
    return np.asarray(params.means)[z] + np.asarray(params.sigmas)[z] * rng.standard_normal(n)


def gmm_marginal_log_density(params: GmmParams, y) -> np.ndarray:
    """Exact per-point log p(y) under a mixture."""
    from scipy.special import logsumexp
    from scipy.stats import norm

    y = np.atleast_1d(np.asarray(y, dtype=float))
    lp = norm.logpdf(y[:, None], np.asarray(params.means), np.asarray(params.sigmas))
    return logsumexp(lp + np.log(np.asarray(params.weights)), axis=1)


def _mixture_params():
    theta = T.simplex(model_param("theta_x", (N_COMPS - 1,)))
    mus = T.stack([model_param(f"mu{k + 1}") for k in range(N_COMPS)])
    sigmas = T.softplus(T.stack([model_param(f"s{k + 1}") for k in range(N_COMPS)]))
    return theta, mus, sigmas


def gmm_learned_params(store) -> GmmParams:
    """Read the mixture parameters out of a trained store."""
    z = np.append(store["theta_x"], 0.0)
    w = np.exp(z - z.max())
    w /= w.sum()
    mus = tuple(float(store[f"mu{k + 1}"]) for k in range(N_COMPS))
    sig = tuple(float(np.logaddexp(0.0, store[f"s{k + 1}"])) for k in range(N_COMPS))
    return GmmParams(tuple(w), mus, sig)


def _check_obs(obs):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1 or len(obs) == 0:
        raise ValueError("observations must be a nonempty 1-D array")
    return obs


def gmm_model(obs, batch_size: int | None = None):
    """Discrete latent per point with an amortized guide network 1 -> 3 (sigmoid) -> 2."""
    obs = _check_obs(obs)
    guide_net = mlp(1, [(3, "sigmoid"), (N_COMPS - 1, None)], "guideNet")

    def model(obs=obs, batch_size=batch_size):
        theta, mus, sigmas = _mixture_params()

        def per_datum(y):
            out = guide_net(y[:, None])
            x = sample(Discrete(theta), guide=lambda: Discrete(T.simplex(out)), name="x")
            observe(Gaussian(mus[x], sigmas[x]), y, name="y")
            return x

        return map_data(obs, per_datum, batch_size, vectorize=True, name="obs")

    return model


def gmm_meanfield_model(obs, batch_size: int | None = None):
    """Discrete latent per point with an automatic per-point mean-field guide."""
    obs = _check_obs(obs)

    def model(obs=obs, batch_size=batch_size):
        theta, mus, sigmas = _mixture_params()

        def per_datum(y):
            x = sample(Discrete(theta), name="x")
            observe(Gaussian(mus[x], sigmas[x]), y, name="y")
            return x

        return map_data(obs, per_datum, batch_size, vectorize=True, name="obs")

    return model


def gmm_marginalized_model(obs, batch_size: int | None = None):
    """The component choice summed out: factor(logsumexp_z [log theta_z + log N(y; mu_z, sigma_z)])."""
    obs = _check_obs(obs)

    def model(obs=obs, batch_size=batch_size):
        theta, mus, sigmas = _mixture_params()
        log_theta = T.log(theta)

        def per_datum(y):
            n = len(y)
            yy = T.Tensor(np.repeat(y[:, None], N_COMPS, axis=1))
            lp = Gaussian(T.repeat_rows(mus, n), T.repeat_rows(sigmas, n)).log_prob(yy)
            factor(T.logsumexp(lp + T.repeat_rows(log_theta, n), axis=-1), name="marginal")

        map_data(obs, per_datum, batch_size, vectorize=True, name="obs")

    return model


# -- continuous latent networks --------------------------------------------

def bn_generate_data(n: int, rng, two_latents: bool = False, mu=(1.0, -1.0), sigma=(1.0, 0.5),
                     sigma_y: float = 0.5) -> np.ndarray:
    """Synthetic data for the continuous networks: y ~ N(sum of latents, sigma_y)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = mu[0] + sigma[0] * rng.standard_normal(n)
    if two_latents:
        x = x + mu[1] + sigma[1] * rng.standard_normal(n)
    return x + sigma_y * rng.standard_normal(n)


def _gauss_guide(out):
    return Gaussian(out[:, 0], T.softplus(out[:, 1]))


def bn1_model(obs, batch_size: int | None = None):
    """One continuous latent per observation with an amortized Gaussian guide."""
    obs = _check_obs(obs)
    net = mlp(1, [(3, "sigmoid"), (2, None)], "guideNet")

    def model(obs=obs, batch_size=batch_size):
        mu_x = model_param("mu_x")
        sigma_x = T.softplus(model_param("sigma_x"))
        sigma_y = T.softplus(model_param("sigma_y"))

        def per_datum(y):
            out = net(y[:, None])
            x = sample(Gaussian(mu_x, sigma_x), guide=lambda: _gauss_guide(out), name="x")
            observe(Gaussian(x, T.repeat_rows(sigma_y, len(y))), y, name="y")
            return x

        return map_data(obs, per_datum, batch_size, vectorize=True, name="obs")

    return model


def _bn2(obs, batch_size, dependent: bool):
    obs = _check_obs(obs)
    net1 = mlp(1, [(3, "sigmoid"), (2, None)], "guideNet1")
    net2 = mlp(2 if dependent else 1, [(3, "sigmoid"), (2, None)], "guideNet2")

    def model(obs=obs, batch_size=batch_size):
        mu_x1 = model_param("mu_x1")
        sigma_x1 = T.softplus(model_param("sigma_x1"))
        mu_x2 = model_param("mu_x2")
        sigma_x2 = T.softplus(model_param("sigma_x2"))
        sigma_y = T.softplus(model_param("sigma_y"))

        def per_datum(y):
            yc = T.Tensor(y[:, None])
            out1 = net1(yc)
            x1 = sample(Gaussian(mu_x1, sigma_x1), guide=lambda: _gauss_guide(out1), name="x1")
            inp2 = T.concat([yc, T.reshape(x1, (len(y), 1))]) if dependent else yc
            out2 = net2(inp2)
            x2 = sample(Gaussian(mu_x2, sigma_x2), guide=lambda: _gauss_guide(out2), name="x2")
            observe(Gaussian(x1 + x2, T.repeat_rows(sigma_y, len(y))), y, name="y")
            return x1, x2

        return map_data(obs, per_datum, batch_size, vectorize=True, name="obs")

    return model


def bn2_model(obs, batch_size: int | None = None):
    """Two continuous latents guided independently given y."""
    return _bn2(obs, batch_size, dependent=False)


def bn2_dep_model(obs, batch_size: int | None = None):
    """Two continuous latents; the second guide network also reads x1."""
    return _bn2(obs, batch_size, dependent=True)
