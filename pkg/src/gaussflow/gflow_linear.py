"""Exact Gaussian flow for the linear-Gaussian model.

The bridging density at pseudo-time ``lam`` is prior x likelihood**lam, which
for a Gaussian prior N(m0, P0) and likelihood N(y; H x, R) is again Gaussian
with information-form moments. The flow with drift and diffusion from
``flow_drift_diffusion`` transports prior samples exactly along that family,
and ``exact_step`` integrates it in closed form.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import matx


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class FlowConfig:
    """Flow design parameters. ``kappa`` scales the diffusion; zero gives a
    deterministic flow."""

    kappa: float = 0.0

    def __post_init__(self):
        if not (self.kappa >= 0 and np.isfinite(self.kappa)):
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")


@dataclass(frozen=True)
class LinearGaussianModel:
    m0: np.ndarray
    P0: np.ndarray
    H: np.ndarray
    R: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        H = np.asarray(self.H, dtype=float).reshape(y.shape[0], m0.shape[0])
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        d, dy = m0.shape[0], y.shape[0]
        if P0.shape != (d, d) or R.shape != (dy, dy):
            raise ValueError("inconsistent model dimensions")
        if not matx.is_spd(P0) or not matx.is_spd(R):
            raise ValueError("P0 and R must be symmetric positive definite")
        for name, val in (("m0", m0), ("P0", P0), ("H", H), ("R", R), ("y", y)):
            object.__setattr__(self, name, val)

    @property
    def dim(self):
        return self.m0.shape[0]


def _check_lam(lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"pseudo-time must lie in [0, 1], got {lam}")


def sequence_moments(model, lam):
    """Mean and covariance of the bridging density at ``lam``."""
    _check_lam(lam)
    P0c = sla.cho_factor(model.P0)
    Rc = sla.cho_factor(model.R)
    RiH = sla.cho_solve(Rc, model.H)
    info = sla.cho_solve(P0c, np.eye(model.dim)) + lam * model.H.T @ RiH
    info = matx.symmetrize(info)
    vec = sla.cho_solve(P0c, model.m0) + lam * model.H.T @ sla.cho_solve(Rc, model.y)
    Ic = sla.cho_factor(info)
    cov = matx.symmetrize(sla.cho_solve(Ic, np.eye(model.dim)))
    mean = sla.cho_solve(Ic, vec)
    return GaussianMoments(mean, cov)


def _gain(model, cov):
    # P_lam H^T R^-1
    return cov @ model.H.T @ np.linalg.inv(model.R)


def flow_drift_diffusion(model, lam, x, kappa):
    """Drift at ``x`` and (state-independent) diffusion matrix of the exact
    flow."""
    mom = sequence_moments(model, lam)
    x = np.asarray(x, dtype=float)
    K = _gain(model, mom.cov)
    dev = x - mom.mean
    innov = model.y - model.H @ mom.mean
    drift = K @ innov - 0.5 * dev @ (K @ model.H).T - 0.5 * kappa * dev
    if kappa == 0:
        diffusion = np.zeros_like(mom.cov)
    else:
        diffusion = np.sqrt(kappa) * matx.principal_sqrt(mom.cov)
    return drift, diffusion


def transport_matrix(model, lam0, lam1):
    """Principal root of P_lam1 P_lam0^{-1}: the deterministic part of the
    closed-form step."""
    P0 = sequence_moments(model, lam0).cov
    P1 = sequence_moments(model, lam1).cov
    ratio = sla.solve(P0, P1.T, assume_a="pos").T
    return matx.principal_sqrt(ratio)


def exact_step(model, x0, lam0, lam1, kappa, dW=None):
    """Advance state(s) ``x0`` from ``lam0`` to ``lam1`` along the exact flow.

    ``x0`` and ``dW`` may be a single vector or a stack of row vectors.
    ``dW`` is the Brownian increment over the step; it is ignored when
    ``kappa == 0``.
    """
    if not lam1 > lam0:
        raise ValueError(f"need lam1 > lam0, got {lam0} -> {lam1}")
    _check_lam(lam0)
    _check_lam(lam1)
    x0 = np.asarray(x0, dtype=float)
    m0 = sequence_moments(model, lam0)
    m1 = sequence_moments(model, lam1)
    delta = lam1 - lam0
    ratio = sla.solve(m0.cov, m1.cov.T, assume_a="pos").T
    S = matx.principal_sqrt(ratio)
    x1 = m1.mean + np.exp(-0.5 * kappa * delta) * (x0 - m0.mean) @ S.T
    if kappa > 0:
        if dW is None:
            raise ValueError("dW is required when kappa > 0")
        c = np.sqrt(-np.expm1(-kappa * delta) / delta)
        x1 = x1 + c * np.asarray(dW, dtype=float) @ matx.principal_sqrt(m1.cov).T
    return x1


def expected_loglik(model, lam):
    """Expectation of log N(y; H x, R) under the bridging density at ``lam``."""
    mom = sequence_moments(model, lam)
    Rc = sla.cho_factor(model.R)
    r = model.y - model.H @ mom.mean
    quad = r @ sla.cho_solve(Rc, r)
    tr = np.trace(sla.cho_solve(Rc, model.H @ mom.cov @ model.H.T))
    logdet = 2.0 * np.sum(np.log(np.diag(Rc[0]))) + model.y.shape[0] * matx.LOG_2PI
    return float(-0.5 * quad - 0.5 * tr - 0.5 * logdet)


def governing_residual(model, lam, x, kappa, drift=None, drift_jac=None, diffusion=None):
    """Left-hand side of the exact-flow governing equation at ``(lam, x)``.

    Every term is evaluated analytically for the Gaussian bridging density.
    By default the exact drift and diffusion are substituted, in which case
    the result is zero up to round-off. Pass ``drift`` (value at ``x``),
    ``drift_jac`` or ``diffusion`` to test other flows; the diffusion is
    taken constant in ``x`` so its spatial derivatives vanish.
    """
    mom = sequence_moments(model, lam)
    x = np.asarray(x, dtype=float)
    Pinv = np.linalg.inv(mom.cov)
    K = _gain(model, mom.cov)
    exact_drift, exact_diff = flow_drift_diffusion(model, lam, x, kappa)
    if drift is None:
        drift = exact_drift
    if drift_jac is None:
        drift_jac = -0.5 * K @ model.H - 0.5 * kappa * np.eye(model.dim)
    if diffusion is None:
        diffusion = exact_diff
    D = 0.5 * diffusion @ diffusion.T

    loglik = matx.gaussian_logpdf(model.y, model.H @ x, model.R)
    grad = -Pinv @ (x - mom.mean)
    hess = -Pinv
    return float(
        loglik
        - expected_loglik(model, lam)
        + np.trace(drift_jac)
        + grad @ drift
        - np.trace(D @ hess)
        - grad @ D @ grad
    )
