"""Single-target importance samplers compared in the sampler sweeps:
proposals from the prior, from a Laplace approximation at the posterior
mode, and from the Gaussian flow."""

import numpy as np

from .filter import LaplaceParams, find_mode, laplace_precision, sample_precision
from .flow_sampler import WeightedSet, flow_sample
from .gflow_linear import FlowConfig
from .rng import generator

METHODS = ("prior-is", "laplace-is", "flow-is")


def prior_is(target, n, seed=0, key=()):
    z = generator(seed, *key).standard_normal((n, target.dim))
    x = target.base_mean + z @ target.base_chol.T
    return WeightedSet(x, target.loglik(x))


def laplace_is(target, n, seed=0, key=(), params=LaplaceParams()):
    """Importance sampling from N(mode, H^-1), with the mode found by
    preconditioned ascent from the base mean and H the negated log-target
    Hessian (Gauss-Newton substitute if it is not positive definite)."""
    m0 = np.atleast_2d(target.base_mean)
    mode, _, _, conv, _ = find_mode(target, m0, params)
    Lp, substituted = laplace_precision(target, mode, m0)
    z = generator(seed, *key).standard_normal((n, target.dim))
    x, lq = sample_precision(mode[0], Lp[0], z)
    logw = target.log_base(x) + target.loglik(x) - lq
    return WeightedSet(x, logw, diagnostics={"converged": bool(conv[0]), "substituted": bool(substituted[0])})


def flow_is(target, n, seed=0, key=(), kappa=0.0, ctrl=None, grid=None, threads=None):
    return flow_sample(target, n, FlowConfig(kappa), ctrl, seed, key, grid=grid, threads=threads)


def run_method(method, target, n, seed=0, key=(), **flow_opts):
    if method == "prior-is":
        return prior_is(target, n, seed, key)
    if method == "laplace-is":
        return laplace_is(target, n, seed, key)
    if method == "flow-is":
        return flow_is(target, n, seed, key, **flow_opts)
    raise ValueError(f"unknown sampler {method!r}; choose from {METHODS}")
