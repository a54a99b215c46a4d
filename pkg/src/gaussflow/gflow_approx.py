"""Approximate Gaussian flow for nonlinear-Gaussian targets.

Each integration step freezes the linearisation of the observation function
at the step's starting state and applies the closed-form linear-Gaussian step
to the resulting Gaussian bridging family. The weight update accounts for the
Jacobian of that map, and a trapezoidal comparison of the frozen and moving
drifts gives a local error estimate for step-size control.

All operations accept a single state ``(d,)`` or a stack ``(k, d)``; pseudo
times may be scalars or length-``k`` arrays.

Spectral shortcut
-----------------
With ``P0 = L L^T`` and ``M = L^T H^T R^{-1} H L = V diag(mu) V^T``, every
bridging covariance for a fixed anchor is ``T diag(1 / (1 + lam mu)) T^T`` with
``T = L V``, and ``P_lam1 P_lam0^{-1} = T diag(r) T^{-1}`` with
``r = (1 + lam0 mu) / (1 + lam1 mu)``. One symmetric eigendecomposition per
anchor therefore yields the moments at any pseudo-time, the principal root of
the transport matrix, and decoupled Sylvester solves for its derivatives.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import matx
from .errors import DomainError, StepRejected
from .gflow_linear import GaussianMoments


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def fd_hessian(jac, rel_step=1e-5):
    """Build a Hessian callable by central differencing ``jac``.

    The returned array has entry ``[..., i, j, k] = d2 h_i / dx_j dx_k``.
    """

    def hess(x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        cols = []
        for k in range(d):
            step = rel_step * (1.0 + np.abs(x[..., k]))
            e = np.zeros(d)
            e[k] = 1.0
            xp = x + step[..., None] * e
            xm = x - step[..., None] * e
            cols.append((jac(xp) - jac(xm)) / (2.0 * step[..., None, None]))
        G = np.stack(cols, axis=-1)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    return hess


@dataclass(frozen=True, eq=False)
class NonlinearGaussianTarget:
    """Gaussian base density times a Gaussian likelihood with nonlinear mean.

    ``obs``, ``jac`` and ``hess`` are vectorised over leading axes of the
    state. ``base_mean`` is either one vector or one row per particle.
    Components listed in ``angular`` have their residuals wrapped to
    [-pi, pi).
    """

    base_mean: np.ndarray
    base_cov: np.ndarray
    obs: Callable
    jac: Callable
    hess: Optional[Callable]
    R: np.ndarray
    y: np.ndarray
    angular: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "base_mean", np.asarray(self.base_mean, dtype=float))
        object.__setattr__(self, "base_cov", np.atleast_2d(np.asarray(self.base_cov, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if self.hess is None:
            object.__setattr__(self, "hess", fd_hessian(self.jac))
        d = self.base_cov.shape[0]
        if self.base_mean.shape[-1] != d or self.base_cov.shape != (d, d):
            raise ValueError("base mean/covariance dimensions disagree")
        if self.R.shape != (self.y.shape[0],) * 2:
            raise ValueError("R does not match the observation dimension")

    @property
    def dim(self):
        return self.base_cov.shape[0]

    @property
    def obs_dim(self):
        return self.y.shape[0]

    def with_base_mean(self, base_mean):
        return NonlinearGaussianTarget(
            base_mean, self.base_cov, self.obs, self.jac, self.hess, self.R, self.y, self.angular
        )

    @cached_property
    def base_chol(self):
        return np.linalg.cholesky(self.base_cov)

    @cached_property
    def base_chol_inv(self):
        return sla.solve_triangular(self.base_chol, np.eye(self.dim), lower=True)

    @cached_property
    def base_prec(self):
        Li = self.base_chol_inv
        return Li.T @ Li

    @cached_property
    def R_inv(self):
        return matx.symmetrize(np.linalg.inv(self.R))

    @cached_property
    def _R_logdet(self):
        return 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(self.R))))

    @cached_property
    def _base_logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.base_chol)))

    def residual(self, hx):
        r = self.y - hx
        if self.angular:
            idx = list(self.angular)
            r[..., idx] = wrap_angle(r[..., idx])
        return r

    def loglik_from_obs(self, hx):
        r = self.residual(hx)
        quad = np.einsum("...i,ij,...j->...", r, self.R_inv, r)
        out = -0.5 * quad - 0.5 * self._R_logdet - 0.5 * self.obs_dim * matx.LOG_2PI
        return np.where(np.isfinite(out), out, -np.inf)

    def loglik(self, x):
        """Exact log-likelihood; ``-inf`` wherever it is not finite."""
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return self.loglik_from_obs(self.obs(np.asarray(x, dtype=float)))

    def log_base(self, x, mean=None):
        mean = self.base_mean if mean is None else mean
        z = (np.asarray(x, dtype=float) - mean) @ self.base_chol_inv.T
        return (
            -0.5 * np.sum(z * z, axis=-1)
            - 0.5 * self._base_logdet
            - 0.5 * self.dim * matx.LOG_2PI
        )


@dataclass(frozen=True)
class Linearization:
    Hhat: np.ndarray
    yhat: np.ndarray
    anchor: np.ndarray


@dataclass(frozen=True)
class StepError:
    estimate: np.ndarray
    scaled_norm: np.ndarray


class Anchor:
    """Linearisation of a target at a stack of anchor states, plus the
    spectral factors that give approximate moments at any pseudo-time."""

    def __init__(self, target, xbar, base_mean=None, need_hess=True):
        xbar = np.asarray(xbar, dtype=float)
        if xbar.ndim != 2:
            raise ValueError("Anchor expects a (k, d) stack of states")
        k, d = xbar.shape
        m0 = target.base_mean if base_mean is None else base_mean
        self.target = target
        self.x = xbar
        self.m0 = np.broadcast_to(m0, (k, d))
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            h = np.asarray(target.obs(xbar), dtype=float).reshape(k, -1)
            H = np.asarray(target.jac(xbar), dtype=float).reshape(k, -1, d)
            G = (
                np.asarray(target.hess(xbar), dtype=float).reshape(k, -1, d, d)
                if need_hess
                else None
            )
        ok = np.all(np.isfinite(h), axis=1) & np.all(np.isfinite(H), axis=(1, 2))
        if G is not None:
            ok &= np.all(np.isfinite(G), axis=(1, 2, 3))
        self.valid = ok
        # rows that failed evaluation are replaced by a benign linear model
        # so the batch algebra stays finite; callers consult ``valid``.
        if not np.all(ok):
            h = np.where(ok[:, None], h, 0.0)
            H = np.where(ok[:, None, None], H, 0.0)
            if G is not None:
                G = np.where(ok[:, None, None, None], G, 0.0)
        self.h = h
        self.H = H
        self.G = G
        with np.errstate(invalid="ignore"):
            self.loglik = np.where(ok, target.loglik_from_obs(h), -np.inf)
        self.yhat = target.residual(h) + np.einsum("kyd,kd->ky", H, xbar)
        self.RiH = target.R_inv @ H  # (k, dy, d)
        self.HRH = matx.symmetrize(np.swapaxes(H, 1, 2) @ self.RiH)
        L = target.base_chol
        M = matx.symmetrize(L.T @ self.HRH @ L)
        mu, V = np.linalg.eigh(M)
        self.mu = np.clip(mu, 0.0, None)
        self.T = L @ V
        self.Tinv = np.swapaxes(V, 1, 2) @ target.base_chol_inv
        self.a = self.m0 @ target.base_prec  # P0^{-1} m0 (base_prec symmetric)
        self.b = np.einsum("kyd,ky->kd", self.RiH, self.yhat)

    _ROWS = ("x", "m0", "h", "H", "G", "valid", "loglik", "yhat", "RiH", "HRH", "mu", "T", "Tinv", "a", "b")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        """Anchor restricted to rows ``idx``."""
        new = object.__new__(Anchor)
        new.target = self.target
        for name in self._ROWS:
            v = getattr(self, name)
            setattr(new, name, None if v is None else np.asarray(v)[idx])
        return new

    def put(self, idx, other):
        """Overwrite rows ``idx`` with the rows of ``other``."""
        for name in self._ROWS:
            v = getattr(self, name)
            if v is None:
                continue
            if not v.flags.writeable:
                v = np.array(v)
                setattr(self, name, v)
            v[idx] = getattr(other, name)

    def _lam(self, lam):
        return np.broadcast_to(np.asarray(lam, dtype=float), (len(self),))

    def cov(self, lam):
        lam = self._lam(lam)
        D = 1.0 / (1.0 + lam[:, None] * self.mu)
        return (self.T * D[:, None, :]) @ np.swapaxes(self.T, 1, 2)

    def mean(self, lam):
        lam = self._lam(lam)
        D = 1.0 / (1.0 + lam[:, None] * self.mu)
        v = self.a + lam[:, None] * self.b
        w = np.einsum("kdj,kd->kj", self.T, v) * D
        return np.einsum("kij,kj->ki", self.T, w)

    def drift(self, lam, x, kappa, mean=None, cov=None):
        """Frozen-anchor drift evaluated at state(s) ``x``."""
        lam = self._lam(lam)
        m = self.mean(lam) if mean is None else mean
        P = self.cov(lam) if cov is None else cov
        dev = x - m
        inner = self.b - np.einsum("kij,kj->ki", self.HRH, m + 0.5 * dev)
        return np.einsum("kij,kj->ki", P, inner) - 0.5 * kappa * dev

    def transport(self, lam0, lam1):
        """Factors of the principal root of P_lam1 P_lam0^{-1}: returns the
        eigenvalue square roots ``s`` (the root is ``T diag(s) T^{-1}``)."""
        lam0 = self._lam(lam0)
        lam1 = self._lam(lam1)
        r = (1.0 + lam0[:, None] * self.mu) / (1.0 + lam1[:, None] * self.mu)
        return np.sqrt(r)


def _coeffs(lam0, lam1, kappa):
    delta = lam1 - lam0
    decay = np.exp(-0.5 * kappa * delta)
    if kappa == 0:
        noise = np.zeros_like(delta)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            noise = np.where(delta > 0, np.sqrt(-np.expm1(-kappa * delta) / np.where(delta > 0, delta, 1.0)), 0.0)
    return decay, noise


@dataclass
class StepResult:
    x1: np.ndarray
    m_lam0: np.ndarray
    m_lam1: np.ndarray
    P_lam1: np.ndarray
    sqrt_P1: Optional[np.ndarray]
    jacobian: Optional[np.ndarray] = None


def step_from_anchor(anc, lam0, lam1, kappa, dW=None, jacobian=False):
    """Closed-form step of the frozen-anchor flow for every row of ``anc``.

    The anchor states are also the starting states.
    """
    k, d = anc.x.shape
    lam0 = anc._lam(lam0)
    lam1 = anc._lam(lam1)
    decay, noise = _coeffs(lam0, lam1, kappa)
    m0l = anc.mean(lam0)
    m1l = anc.mean(lam1)
    P1 = anc.cov(lam1)
    s = anc.transport(lam0, lam1)
    z = np.einsum("kij,kj->ki", anc.Tinv, anc.x - m0l)
    x1 = m1l + decay[:, None] * np.einsum("kij,kj->ki", anc.T, s * z)

    sqrtP1 = None
    if kappa > 0:
        if dW is None:
            raise ValueError("dW is required when kappa > 0")
        dW = np.broadcast_to(np.asarray(dW, dtype=float), (k, d))
        sqrtP1, sig, U = matx.batched_sym_sqrt(P1)
        x1 = x1 + noise[:, None] * np.einsum("kij,kj->ki", sqrtP1, dW)

    res = StepResult(x1, m0l, m1l, P1, sqrtP1)
    if not jacobian:
        return res
    if anc.G is None:
        raise ValueError("anchor was built without second derivatives")

    # dm_lam/dx0: column j is lam P (G_j^T R^-1 (yhat - H m) + H^T R^-1 G_j (xbar - m))
    def mean_jac(lam, m, P):
        u = (anc.yhat - np.einsum("kyd,kd->ky", anc.H, m)) @ anc.target.R_inv
        Gu = (anc.G.transpose(0, 2, 3, 1) @ u[:, None, :, None])[..., 0]
        Ge = (anc.G.transpose(0, 1, 3, 2) @ (anc.x - m)[:, None, :, None])[..., 0]
        second = np.swapaxes(anc.RiH, 1, 2) @ Ge
        return lam[:, None, None] * (P @ (Gu + second))

    P0l = anc.cov(lam0)
    dm0 = mean_jac(lam0, m0l, P0l)
    dm1 = mean_jac(lam1, m1l, P1)

    S = (anc.T * s[:, None, :]) @ anc.Tinv
    eye = np.eye(d)
    J = dm1 + decay[:, None, None] * (S @ (eye - dm0))

    # K_j = dH_j^T R^-1 H + H^T R^-1 dH_j, stacked on axis 1 (index j)
    N = anc.G.transpose(0, 3, 2, 1) @ anc.RiH[:, None]
    K = N + np.swapaxes(N, 2, 3)

    # derivative of the transport root contracted with (x0 - m_lam0)
    D1 = 1.0 / (1.0 + lam1[:, None] * anc.mu)
    r = s * s
    Kt = np.swapaxes(anc.T, 1, 2)[:, None] @ K @ anc.T[:, None]
    coef = (
        D1[:, None, :, None]
        * (lam0[:, None] - lam1[:, None] * r)[:, None, None, :]
        / (s[:, None, :, None] + s[:, None, None, :])
    )
    Xt = Kt * coef
    col3 = anc.T @ np.swapaxes((Xt @ z[:, None, :, None])[..., 0], 1, 2)
    J = J + decay[:, None, None] * col3

    if kappa > 0:
        C = -lam1[:, None, None, None] * (P1[:, None] @ K @ P1[:, None])
        X = matx.batched_sylvester_eig(U, np.swapaxes(U, 1, 2), sig, C)
        col2 = np.swapaxes((X @ dW[:, None, :, None])[..., 0], 1, 2)
        J = J + noise[:, None, None] * col2
    res.jacobian = J
    return res


# ---------------------------------------------------------------------------
# public per-operation API


def _stack(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _unstack(a, single):
    return a[0] if single else a


def linearize(target, xbar):
    """Linearise the observation function at ``xbar``.

    Raises
    ------
    DomainError
        If the observation function or its Jacobian is not finite there.
    """
    X, single = _stack(xbar)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        h = np.asarray(target.obs(X), dtype=float).reshape(X.shape[0], -1)
        H = np.asarray(target.jac(X), dtype=float).reshape(X.shape[0], -1, X.shape[1])
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(H))):
        raise DomainError("observation function or Jacobian not finite at anchor")
    yhat = target.residual(h) + np.einsum("kyd,kd->ky", H, X)
    return Linearization(_unstack(H, single), _unstack(yhat, single), _unstack(X, single))


def _checked_anchor(target, X, need_hess=False):
    anc = Anchor(target, X, need_hess=need_hess)
    if not np.all(anc.valid):
        raise DomainError("observation model not finite at anchor")
    return anc


def approx_moments(target, lam, xbar):
    """Moments of the linearised bridging density at ``lam`` for anchor(s)
    ``xbar``."""
    X, single = _stack(xbar)
    anc = _checked_anchor(target, X)
    return GaussianMoments(_unstack(anc.mean(lam), single), _unstack(anc.cov(lam), single))


def _check_step(lam0, lam1):
    lam0 = np.asarray(lam0, dtype=float)
    lam1 = np.asarray(lam1, dtype=float)
    if np.any(lam1 <= lam0):
        raise ValueError("need lam1 > lam0")
    if np.any(lam0 < 0) or np.any(lam1 > 1):
        raise ValueError("pseudo-times must lie in [0, 1]")


def agf_step(target, x0, lam0, lam1, kappa, dW=None):
    """One frozen-anchor step from ``x0`` (anchored at ``x0``)."""
    _check_step(lam0, lam1)
    X, single = _stack(x0)
    anc = _checked_anchor(target, X)
    dWs = None if dW is None else _stack(dW)[0]
    return _unstack(step_from_anchor(anc, lam0, lam1, kappa, dWs).x1, single)


def step_jacobian(target, x0, lam0, lam1, kappa, dW=None):
    """Jacobian of ``agf_step`` with respect to ``x0`` (same ``dW``)."""
    X, single = _stack(x0)
    anc = _checked_anchor(target, X, need_hess=True)
    dWs = None if dW is None else _stack(dW)[0]
    lam0 = np.asarray(lam0, dtype=float)
    lam1 = np.asarray(lam1, dtype=float)
    if np.any(lam1 < lam0):
        raise ValueError("need lam1 >= lam0")
    res = step_from_anchor(anc, lam0, lam1, kappa, dWs, jacobian=True)
    return _unstack(res.jacobian, single)


def weight_step(target, logw0, x0, x1, lam0, lam1, jac_det_abs):
    """Log-weight after one step, using unnormalised bridging densities.

    Returns ``-inf`` where the likelihood at either end is not finite.

    Raises
    ------
    StepRejected
        If any ``jac_det_abs`` is not strictly positive.
    """
    jd = np.asarray(jac_det_abs, dtype=float)
    if np.any(~(jd > 0)):
        raise StepRejected("non-positive Jacobian determinant")
    lam0 = np.asarray(lam0, dtype=float)
    lam1 = np.asarray(lam1, dtype=float)
    l1 = target.loglik(x1)
    l0 = target.loglik(x0)
    with np.errstate(invalid="ignore"):
        new = (
            np.asarray(logw0, dtype=float)
            + target.log_base(x1)
            + np.where(lam1 > 0, lam1 * l1, 0.0)
            - target.log_base(x0)
            - np.where(lam0 > 0, lam0 * l0, 0.0)
            + np.log(jd)
        )
    bad = ~np.isfinite(l1) | ~np.isfinite(l0)
    new = np.where(bad, -np.inf, new)
    return float(new) if np.ndim(new) == 0 else new


def error_from_anchors(anc0, anc1, lam0, lam1, kappa, x1, dW=None, atol=1e-4, rtol=1e-3,
                       sqrtP1_at_x0=None):
    """Trapezoidal local error estimate given anchors at the step's start
    (``anc0``) and end (``anc1``, anchored at ``x1``)."""
    lam0 = anc0._lam(lam0)
    lam1 = anc0._lam(lam1)
    delta = lam1 - lam0
    est = 0.5 * delta[:, None] * (anc1.drift(lam1, x1, kappa) - anc0.drift(lam1, x1, kappa))
    if kappa > 0 and dW is not None:
        g1, _, _ = matx.batched_sym_sqrt(anc1.cov(lam1))
        g0 = sqrtP1_at_x0
        if g0 is None:
            g0, _, _ = matx.batched_sym_sqrt(anc0.cov(lam1))
        est = est + 0.5 * np.sqrt(kappa) * np.einsum("kij,kj->ki", g1 - g0, dW)
    scale = atol + rtol * np.maximum(np.abs(anc0.x), np.abs(x1))
    return StepError(est, np.max(np.abs(est) / scale, axis=1))


def local_error(target, x0, x1, lam0, lam1, dW=None, kappa=0.0, atol=1e-4, rtol=1e-3):
    """Local integration-error estimate for the step ``x0 -> x1``.

    Compares the drift linearised at the end state with the frozen-anchor
    drift, averaged trapezoidally over the step, plus the matching
    diffusion mismatch times the Brownian increment.
    """
    X0, single = _stack(x0)
    X1, _ = _stack(x1)
    anc0 = _checked_anchor(target, X0)
    anc1 = _checked_anchor(target, X1)
    dWs = None if dW is None else _stack(dW)[0]
    err = error_from_anchors(anc0, anc1, lam0, lam1, kappa, X1, dWs, atol, rtol)
    return StepError(_unstack(err.estimate, single), _unstack(err.scaled_norm, single))
