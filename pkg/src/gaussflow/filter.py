"""Sequential Monte Carlo filtering with pluggable proposals.

Proposals operate on whole particle sets at once. Each returns the new
states together with the three log-densities that make up the incremental
weight (transition, likelihood, proposal), so the weight can be recomputed
from the logged values. The flow proposal has no closed-form density; its
weight is accumulated along the flow instead.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import matx
from .errors import ConfigError, DegenerateWeightsError
from .flow_sampler import StepControlConfig, ess, normalize_log_weights, run_flows, systematic_indices
from .gflow_approx import NonlinearGaussianTarget, wrap_angle
from .gflow_linear import FlowConfig
from .rng import generator

PROPOSALS = ("bootstrap", "ekf", "ukf", "laplace", "gfpf")


@dataclass(frozen=True)
class UkfParams:
    """Scaled unscented-transform parameters."""

    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("UKF alpha must be positive")

    def weights(self, d):
        lam = self.alpha**2 * (d + self.kappa) - d
        c = d + lam
        if not c > 0:
            raise ConfigError("UKF parameters give a non-positive sigma-point spread")
        wm = np.full(2 * d + 1, 0.5 / c)
        wc = wm.copy()
        wm[0] = lam / c
        wc[0] = lam / c + 1.0 - self.alpha**2 + self.beta
        return c, wm, wc


@dataclass(frozen=True)
class LaplaceParams:
    max_iters: int = 100
    gtol: float = 1e-8
    armijo: float = 1e-4
    max_halvings: int = 60

    def __post_init__(self):
        if self.max_iters < 1 or not self.gtol > 0 or not 0 < self.armijo < 1:
            raise ConfigError("invalid Laplace ascent parameters")


@dataclass(frozen=True)
class ProposalKind:
    """Proposal selector with the parameters of the chosen variant."""

    name: str
    ukf: UkfParams = field(default_factory=UkfParams)
    laplace: LaplaceParams = field(default_factory=LaplaceParams)
    flow: FlowConfig = field(default_factory=FlowConfig)
    ctrl: StepControlConfig = field(default_factory=StepControlConfig)
    grid: Optional[tuple] = None

    def __post_init__(self):
        if self.name not in PROPOSALS:
            raise ConfigError(f"unknown proposal {self.name!r}; choose from {PROPOSALS}")


@dataclass
class Proposal:
    """Batch proposal output. ``log_q`` is NaN where the proposal has no
    closed-form density (flow proposal)."""

    x: np.ndarray
    log_trans: np.ndarray
    loglik: np.ndarray
    log_q: np.ndarray
    log_incr: np.ndarray
    fallback: np.ndarray
    flagged: np.ndarray
    steps: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# dense helpers


def _chol_rows(A):
    """Cholesky factors of a stack, with a mask of rows that succeeded."""
    A = matx.symmetrize(A)
    n = A.shape[0]
    ok = np.all(np.isfinite(A), axis=(1, 2))
    L = np.zeros_like(A)
    try:
        if np.all(ok):
            return np.linalg.cholesky(A), ok
    except np.linalg.LinAlgError:
        pass
    for i in range(n):
        if not ok[i]:
            continue
        try:
            L[i] = np.linalg.cholesky(A[i])
        except np.linalg.LinAlgError:
            ok[i] = False
    return L, ok


def _logpdf_chol(x, m, L):
    """log N(x; m, L L^T) for stacks of rows and factors."""
    r = x - m
    z = np.linalg.solve(L, r[..., None])[..., 0]
    d = x.shape[-1]
    logdet = np.sum(np.log(np.abs(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)
    return -0.5 * np.sum(z * z, axis=-1) - logdet - 0.5 * d * matx.LOG_2PI


def _psd_sqrt(Q):
    w, U = np.linalg.eigh(matx.symmetrize(Q))
    return U * np.sqrt(np.clip(w, 0.0, None))


def _wrap(r, angular):
    if angular:
        r = np.array(r, copy=True)
        idx = list(angular)
        r[..., idx] = wrap_angle(r[..., idx])
    return r


def _log_trans(tgt, x, mb):
    try:
        return tgt.log_base(x, mb)
    except np.linalg.LinAlgError:
        return np.full(x.shape[0], np.nan)


# ---------------------------------------------------------------------------
# proposals (batched over particles)


def _bootstrap(tgt, mb, z):
    x = mb + z @ _psd_sqrt(tgt.base_cov).T
    lt = _log_trans(tgt, x, mb)
    ll = tgt.loglik(x)
    return Proposal(x, lt, ll, lt.copy(), ll.copy(), np.zeros(len(x), bool), np.zeros(len(x), bool))


def _gaussian_update(tgt, mb, hpred, Pxy, Pyy):
    """Condition N(mb, Q) on y given predicted observation moments."""
    Q = tgt.base_cov
    _, ok = _chol_rows(Pyy)
    safe = np.where(ok[:, None, None], Pyy, np.eye(Pyy.shape[-1]))
    K = np.swapaxes(np.linalg.solve(safe, np.swapaxes(Pxy, 1, 2)), 1, 2)  # Pxy Pyy^{-1}
    innov = _wrap(tgt.y - hpred, tgt.angular)
    mean = mb + np.einsum("kdy,ky->kd", K, innov)
    C = Q - K @ Pyy @ np.swapaxes(K, 1, 2)
    Lc, okc = _chol_rows(C)
    ok &= okc & np.all(np.isfinite(mean), axis=1)
    return mean, Lc, ok


def _finish(tgt, mb, mean, Lc, ok, z, fallback_prop):
    x = np.where(ok[:, None], mean + np.einsum("kij,kj->ki", Lc, z), fallback_prop.x)
    safeL = np.where(ok[:, None, None], Lc, np.eye(x.shape[1]))
    with np.errstate(invalid="ignore", divide="ignore"):
        lq = np.where(ok, _logpdf_chol(x, np.where(ok[:, None], mean, x), safeL), fallback_prop.log_q)
    lt = _log_trans(tgt, x, mb)
    ll = tgt.loglik(x)
    fallback = np.where(ok, False, fallback_prop.fallback)
    flagged = np.where(ok, False, fallback_prop.flagged)
    return Proposal(x, lt, ll, lq, lt + ll - lq, fallback, flagged)


def _ekf(tgt, mb, z):
    d = mb.shape[1]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        h = np.asarray(tgt.obs(mb), dtype=float).reshape(len(mb), -1)
        H = np.asarray(tgt.jac(mb), dtype=float).reshape(len(mb), -1, d)
    good = np.all(np.isfinite(h), axis=1) & np.all(np.isfinite(H), axis=(1, 2))
    h = np.where(good[:, None], h, 0.0)
    H = np.where(good[:, None, None], H, 0.0)
    Q = tgt.base_cov
    Pxy = Q @ np.swapaxes(H, 1, 2)
    Pyy = H @ Pxy + tgt.R
    mean, Lc, ok = _gaussian_update(tgt, mb, h, Pxy, Pyy)
    ok &= good
    boot = _bootstrap(tgt, mb, z)
    boot.fallback[:] = True
    boot.flagged[:] = True
    return _finish(tgt, mb, mean, Lc, ok, z, boot)


def unscented_moments(fn, mean, cov, params=UkfParams(), angular=()):
    """Scaled unscented transform of ``fn`` about N(mean, cov).

    ``mean`` may be a stack of rows sharing ``cov``. Returns the predicted
    mean of ``fn(x)``, its covariance and the cross-covariance with ``x``
    (no observation noise added).
    """
    mean = np.asarray(mean, dtype=float)
    single = mean.ndim == 1
    M = np.atleast_2d(mean)
    n, d = M.shape
    c, wm, wc = params.weights(d)
    S = np.sqrt(c) * _psd_sqrt(cov)
    offs = np.concatenate([np.zeros((1, d)), S.T, -S.T])  # (2d+1, d)
    X = M[:, None, :] + offs[None]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        Y = np.asarray(fn(X.reshape(-1, d)), dtype=float).reshape(n, 2 * d + 1, -1)
    dev0 = _wrap(Y - Y[:, :1], angular)
    yhat = Y[:, 0] + np.einsum("s,ksy->ky", wm, dev0)
    if angular:
        yhat = _wrap(yhat, angular)
    dY = _wrap(Y - yhat[:, None], angular)
    Pyy = np.einsum("s,ksa,ksb->kab", wc, dY, dY)
    Pxy = np.einsum("s,sa,ksb->kab", wc, offs, dY)
    if single:
        return yhat[0], Pyy[0], Pxy[0]
    return yhat, Pyy, Pxy


def _ukf(tgt, mb, z, params):
    yhat, Pyy, Pxy = unscented_moments(tgt.obs, mb, tgt.base_cov, params, tgt.angular)
    Pyy = Pyy + tgt.R
    good = np.all(np.isfinite(yhat), axis=1) & np.all(np.isfinite(Pyy), axis=(1, 2))
    yhat = np.where(good[:, None], yhat, 0.0)
    Pyy = np.where(good[:, None, None], Pyy, np.eye(Pyy.shape[-1]))
    Pxy = np.where(good[:, None, None], Pxy, 0.0)
    mean, Lc, ok = _gaussian_update(tgt, mb, yhat, Pxy, Pyy)
    ok &= good
    fb = _ekf(tgt, mb, z)
    fb.fallback[:] = True
    fb.flagged[:] = True
    return _finish(tgt, mb, mean, Lc, ok, z, fb)


def _objective(tgt, x, mb):
    """Log of base times likelihood with gradient, Gauss-Newton precision
    and the full negated Hessian."""
    n, d = x.shape
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        h = np.asarray(tgt.obs(x), dtype=float).reshape(n, -1)
        H = np.asarray(tgt.jac(x), dtype=float).reshape(n, -1, d)
    r = tgt.residual(h)
    Rr = r @ tgt.R_inv
    val = tgt.log_base(x, mb) + tgt.loglik_from_obs(h)
    grad = -(x - mb) @ tgt.base_prec + np.einsum("kyd,ky->kd", H, Rr)
    gn = tgt.base_prec + np.swapaxes(H, 1, 2) @ tgt.R_inv @ H
    ok = np.isfinite(val) & np.all(np.isfinite(grad), axis=1)
    return val, grad, matx.symmetrize(gn), Rr, ok


def find_mode(tgt, mb, params=LaplaceParams()):
    """Maximise log N(x; mb, Q) + log g(y | x) row-wise, starting at ``mb``.

    The ascent direction is the gradient preconditioned by the inverse
    Gauss-Newton precision, with Armijo backtracking by halving.

    Returns
    -------
    x, value, grad, converged (mask), iterations (per row)
    """
    x = np.array(mb, dtype=float)
    n = x.shape[0]
    val, grad, gn, _, ok = _objective(tgt, x, mb)
    done = ~ok
    conv = np.zeros(n, bool)
    iters = np.zeros(n, int)
    for _ in range(params.max_iters):
        small = np.linalg.norm(grad, axis=1) <= params.gtol * (1.0 + np.abs(val))
        conv |= small & ~done
        done |= small
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        iters[act] += 1
        p = np.linalg.solve(gn[act], grad[act][..., None])[..., 0]
        slope = np.sum(p * grad[act], axis=1)
        step = np.ones(act.size)
        pending = np.ones(act.size, bool)
        new_x = x[act].copy()
        for _ in range(params.max_halvings):
            j = np.flatnonzero(pending)
            if j.size == 0:
                break
            trial = x[act[j]] + step[j, None] * p[j]
            v, _, _, _, okv = _objective(tgt, trial, mb[act[j]])
            good = okv & (v >= val[act[j]] + params.armijo * step[j] * slope[j])
            new_x[j[good]] = trial[good]
            pending[j[good]] = False
            step[j[~good]] *= 0.5
        # rows whose line search found no ascent are at the numerical floor
        stalled = act[pending]
        conv[stalled] = True
        done[stalled] = True
        moved = act[~pending]
        x[moved] = new_x[~pending]
        if moved.size:
            v, g, G, _, _ = _objective(tgt, x[moved], mb[moved])
            val[moved], grad[moved], gn[moved] = v, g, G
    return x, val, grad, conv, iters


def laplace_precision(tgt, x, mb):
    """Negated log-target Hessian at ``x``, replaced by the Gauss-Newton
    precision on rows where it is not positive definite. Returns the
    Cholesky factor of the precision and a mask of rows that used the
    substitute."""
    _, _, gn, Rr, _ = _objective(tgt, x, mb)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        G = np.asarray(tgt.hess(x), dtype=float).reshape(x.shape[0], -1, x.shape[1], x.shape[1])
    full = gn - np.einsum("ky,kyab->kab", Rr, G)
    L, ok = _chol_rows(full)
    if not np.all(ok):
        Lg, okg = _chol_rows(gn)
        L = np.where(ok[:, None, None], L, Lg)
    return L, ~ok


def sample_precision(mode, Lp, z):
    """Draw from N(mode, (Lp Lp^T)^{-1}) and return the draws with their
    log-densities."""
    r = np.linalg.solve(np.swapaxes(Lp, -1, -2), z[..., None])[..., 0]
    x = mode + r
    d = mode.shape[-1]
    logdet = np.sum(np.log(np.diagonal(Lp, axis1=-2, axis2=-1)), axis=-1)
    lq = -0.5 * np.sum(z * z, axis=-1) + logdet - 0.5 * d * matx.LOG_2PI
    return x, lq


def _laplace(tgt, mb, z, params):
    mode, _, _, conv, _ = find_mode(tgt, mb, params)
    Lp, substituted = laplace_precision(tgt, mode, mb)
    x, lq = sample_precision(mode, Lp, z)
    lt = _log_trans(tgt, x, mb)
    ll = tgt.loglik(x)
    n = len(x)
    return Proposal(x, lt, ll, lq, lt + ll - lq, np.zeros(n, bool), ~conv | substituted)


def _gfpf(tgt, mb, kind, seed, key, threads):
    parts = run_flows(tgt, mb.shape[0], kind.flow.kappa, kind.ctrl, seed, key, base_means=mb,
                      grid=kind.grid, threads=threads)
    x = np.stack([p.state for p in parts])
    lw = np.array([p.logw for p in parts])
    lt = _log_trans(tgt, x, mb)
    ll = tgt.loglik(x)
    n = len(x)
    return Proposal(
        x, lt, ll, np.full(n, np.nan), lw, np.zeros(n, bool),
        np.array([p.flagged for p in parts]), np.array([p.n_accepted for p in parts]),
    )


def propose(model, base_means, base_cov, y, kind, seed=0, key=(), threads=None):
    """Apply proposal ``kind`` to every row of ``base_means``.

    The base N(base_mean_i, base_cov) is the transition density from the
    particle's ancestor (or the prior at the first step).
    """
    mb = np.atleast_2d(np.asarray(base_means, dtype=float))
    tgt = NonlinearGaussianTarget(mb[0], base_cov, model.obs, model.jac, model.hess, model.R, y,
                                  model.angular)
    if kind.name == "gfpf":
        return _gfpf(tgt, mb, kind, seed, key + (2,), threads)
    z = generator(seed, *key, 1).standard_normal(mb.shape)
    if kind.name == "bootstrap":
        return _bootstrap(tgt, mb, z)
    if kind.name == "ekf":
        return _ekf(tgt, mb, z)
    if kind.name == "ukf":
        return _ukf(tgt, mb, z, kind.ukf)
    return _laplace(tgt, mb, z, kind.laplace)


def _single(model, x_prev, y, kind, seed, key):
    x_prev = np.asarray(x_prev, dtype=float)
    mb = model.trans_mean(x_prev[None])
    p = propose(model, mb, model.Q, y, kind, seed, key)
    return p.x[0], float(p.log_incr[0])


def bootstrap_proposal(model, x_prev, y, seed=0, key=()):
    """One particle's bootstrap move; returns ``(x_t, log_incr_w)``."""
    return _single(model, x_prev, y, ProposalKind("bootstrap"), seed, key)


def ekf_proposal(model, x_prev, y, seed=0, key=()):
    return _single(model, x_prev, y, ProposalKind("ekf"), seed, key)


def ukf_proposal(model, x_prev, y, params=UkfParams(), seed=0, key=()):
    return _single(model, x_prev, y, ProposalKind("ukf", ukf=params), seed, key)


def laplace_proposal(model, x_prev, y, params=LaplaceParams(), seed=0, key=()):
    return _single(model, x_prev, y, ProposalKind("laplace", laplace=params), seed, key)


def oid_flow_proposal(model, x_prev, y, flow=FlowConfig(), ctrl=None, seed=0, key=()):
    """Flow proposal targeting p(x_t | x_prev, y_t); the returned log weight
    accumulates the per-step flow updates."""
    kind = ProposalKind("gfpf", flow=flow, ctrl=ctrl or StepControlConfig())
    return _single(model, x_prev, y, kind, seed, key)


# ---------------------------------------------------------------------------
# filter


class PathParticleSet:
    """Current particles plus the ancestor tree needed to rebuild paths."""

    def __init__(self):
        self.history = []
        self.ancestry = []
        self.logw = None

    @property
    def t(self):
        return len(self.history)

    @property
    def states(self):
        return self.history[-1]

    @property
    def ancestors(self):
        return self.ancestry[-1]

    def __len__(self):
        return 0 if not self.history else self.states.shape[0]

    def append(self, states, ancestors, logw):
        self.history.append(states)
        self.ancestry.append(ancestors)
        self.logw = logw

    @property
    def normalized(self):
        return normalize_log_weights(self.logw)

    def mean(self):
        return self.normalized @ self.states

    def lineage(self, lag=None):
        """Index, at each earlier step, of each current particle's ancestor.

        Returns a (t, n) array (or its last ``lag + 1`` rows)."""
        n = len(self)
        steps = self.t if lag is None else min(lag + 1, self.t)
        idx = np.arange(n)
        out = [idx]
        for s in range(self.t - 1, self.t - steps, -1):
            idx = self.ancestry[s][idx]
            out.append(idx)
        return np.array(out[::-1])

    def paths(self):
        """Full trajectories of the current particles, shape (n, t, d)."""
        lin = self.lineage()
        return np.stack([self.history[s][lin[s]] for s in range(self.t)], axis=1)

    def path(self, i):
        return self.paths()[i]


@dataclass
class StepRecord:
    t: int
    ess: float
    mean: np.ndarray
    fallbacks: int
    flagged: int
    steps_mean: float
    x_prev: Optional[np.ndarray]
    proposal: Proposal


def pf_step(model, pset, y, kind, seed=0, t=None, threads=None):
    """Advance the particle set by one observation.

    An empty set starts the filter from the prior. Otherwise ancestors are
    drawn by systematic resampling of the current weights, each particle is
    proposed from its ancestor's transition, and weights are set to
    transition x likelihood / proposal (or the accumulated flow weight).

    Raises
    ------
    DegenerateWeightsError
        If the weights to be resampled are all zero.
    """
    t = pset.t + 1 if t is None else t
    if pset.t == 0:
        raise ValueError("use pf_init for the first observation")
    w = normalize_log_weights(pset.logw)
    anc = systematic_indices(w, generator(seed, t, 0).random())
    x_prev = pset.states[anc]
    mb = model.trans_mean(x_prev)
    prop = propose(model, mb, model.Q, y, kind, seed, (t,), threads)
    return _commit(pset, prop, anc, t, x_prev)


def pf_init(model, y, n, kind, seed=0, threads=None):
    """First filter step: propose from the prior conditioned on ``y``."""
    mb = np.broadcast_to(model.prior.mean, (n, model.dim))
    prop = propose(model, mb, model.prior.cov, y, kind, seed, (1,), threads)
    return _commit(PathParticleSet(), prop, np.arange(n), 1, None)


def _commit(pset, prop, anc, t, x_prev):
    logw = np.where(np.isfinite(prop.log_incr), prop.log_incr, -np.inf)
    pset.append(prop.x, anc, logw)
    try:
        wn = normalize_log_weights(logw)
        e, m = ess(wn), wn @ prop.x
    except DegenerateWeightsError:
        e, m = float("nan"), np.full(prop.x.shape[1], np.nan)
    rec = StepRecord(
        t, e, m, int(prop.fallback.sum()), int(prop.flagged.sum()),
        float(np.mean(prop.steps)) if prop.steps is not None else float("nan"), x_prev, prop,
    )
    return pset, rec


@dataclass
class FilterResult:
    means: np.ndarray
    ess: np.ndarray
    diverged: bool
    fail_step: Optional[int]
    records: list
    particles: PathParticleSet
    se: Optional[np.ndarray] = None


def fixed_lag_se(pset, lag):
    """Monte-Carlo standard error of the weighted mean, per component.

    Particles are grouped by their ancestor ``lag`` steps back and the
    weighted deviations summed within groups, which accounts for the
    correlation that resampling induces among descendants of one ancestor.
    """
    w = pset.normalized
    x = pset.states
    dev = w[:, None] * (x - w @ x)
    group = pset.lineage(lag)[0]
    sums = np.zeros_like(x)
    np.add.at(sums, group, dev)
    return np.sqrt(np.sum(sums * sums, axis=0))


def run_filter(model, ys, kind, n, seed=0, threads=None, keep_records=False, se_lag=None):
    """Filter the observation sequence ``ys``.

    A step whose weights all vanish or whose estimate is not finite marks
    the run as diverged; the remaining estimates are NaN.
    """
    if isinstance(kind, str):
        kind = ProposalKind(kind)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    T = ys.shape[0]
    means = np.full((T, model.dim), np.nan)
    esses = np.full(T, np.nan)
    ses = np.full((T, model.dim), np.nan) if se_lag is not None else None
    records = []
    pset = None
    fail = None
    for t in range(1, T + 1):
        try:
            if t == 1:
                pset, rec = pf_init(model, ys[0], n, kind, seed, threads)
            else:
                pset, rec = pf_step(model, pset, ys[t - 1], kind, seed, t, threads)
        except DegenerateWeightsError:
            fail = t
            break
        if not (np.all(np.isfinite(rec.mean)) and np.isfinite(rec.ess)):
            fail = t
            break
        means[t - 1] = rec.mean
        esses[t - 1] = rec.ess
        if ses is not None:
            ses[t - 1] = fixed_lag_se(pset, se_lag)
        if keep_records:
            records.append(rec)
        else:
            records.append(StepRecord(rec.t, rec.ess, rec.mean, rec.fallbacks, rec.flagged,
                                      rec.steps_mean, None, None))
    return FilterResult(means, esses, fail is not None, fail, records, pset, ses)


def kalman_filter(F, Q, H, R, m0, P0, ys):
    """Exact filtered means, covariances and log-evidence increments for a
    linear-Gaussian state-space model whose first state has prior N(m0, P0)."""
    ys = np.atleast_2d(ys)
    means, covs, logz = [], [], []
    m, P = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)
    for t, y in enumerate(ys):
        if t > 0:
            m = F @ m
            P = F @ P @ F.T + Q
        S = H @ P @ H.T + R
        logz.append(matx.gaussian_logpdf(y, H @ m, S))
        K = sla.solve(S, H @ P, assume_a="pos").T
        m = m + K @ (y - H @ m)
        P = matx.symmetrize(P - K @ S @ K.T)
        means.append(m)
        covs.append(P)
    return np.array(means), np.array(covs), np.array(logz)
