"""Gaussian-flow importance sampling.

Particles are drawn from the Gaussian base, carried through pseudo-time
from 0 to 1 by the approximate Gaussian flow with per-particle adaptive step
control, and weighted by the ratio of the unnormalised bridging densities at
the two ends of each step times the Jacobian determinant of the step.

With ``kappa > 0`` each particle owns a Brownian skeleton. A rejected step
leaves its endpoint pinned in the skeleton and shorter retries draw interior
values from the Brownian bridge, so the weight and error calculations stay
conditional on one consistent path.

Particles are processed in fixed-size chunks, each chunk a batched numpy
computation. Chunks may run on a thread pool; because chunk boundaries and
per-particle random streams do not depend on the pool size, results are
bitwise identical for any number of threads.
"""

import bisect
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateWeightsError
from .gflow_approx import Anchor, error_from_anchors, step_from_anchor
from .rng import generator, map_ordered

CHUNK = 512
_SNAP = 1e-12


@dataclass(frozen=True)
class StepControlConfig:
    """Tolerances and step-size law for adaptive pseudo-time stepping."""

    atol: float = 1e-4
    rtol: float = 1e-3
    dt_init: float = 0.05
    dt_min: float = 1e-5
    dt_max: float = 0.25
    safety: float = 0.9
    grow_max: float = 2.0
    shrink_min: float = 0.2
    max_rejects_per_step: int = 12

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ConfigError("atol and rtol must be positive")
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max <= 1):
            raise ConfigError("need 0 < dt_min <= dt_init <= dt_max <= 1")
        if not 0 < self.safety < 1:
            raise ConfigError("safety must lie in (0, 1)")
        if not (0 < self.shrink_min < 1 < self.grow_max):
            raise ConfigError("need 0 < shrink_min < 1 < grow_max")
        if self.max_rejects_per_step < 0:
            raise ConfigError("max_rejects_per_step must be >= 0")


def _step_factor(norm, ctrl):
    norm = np.asarray(norm, dtype=float)
    with np.errstate(divide="ignore"):
        raw = ctrl.safety * norm**-0.5
    return np.clip(raw, ctrl.shrink_min, ctrl.grow_max)


def adapt_step(err, dt, ctrl, lam=None):
    """Accept/reject decision and next step size.

    ``err`` is a ``StepError`` or its scaled norm. When ``lam`` (the
    pseudo-time the next step starts from) is given, ``dt_next`` is also
    limited so the next step does not pass 1.
    """
    norm = getattr(err, "scaled_norm", err)
    accept = np.asarray(norm) <= 1.0
    dt_next = np.clip(dt * _step_factor(norm, ctrl), ctrl.dt_min, ctrl.dt_max)
    if lam is not None:
        dt_next = np.minimum(dt_next, np.maximum(1.0 - np.asarray(lam), 0.0))
    if np.ndim(accept) == 0:
        return bool(accept), float(dt_next)
    return accept, dt_next


def pseudo_time_grid(n_steps, kind="uniform", first=1e-3):
    """Fixed pseudo-time grid from 0 to 1 with ``n_steps`` steps.

    ``kind="geometric"`` spaces the interior points geometrically from
    ``first``, which concentrates steps early in the flow where the bridging
    densities change fastest.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if kind == "uniform":
        g = np.linspace(0.0, 1.0, n_steps + 1)
    elif kind == "geometric":
        if not 0 < first < 1:
            raise ValueError("first must lie in (0, 1)")
        g = np.concatenate([[0.0], np.geomspace(first, 1.0, n_steps)])
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    g[-1] = 1.0
    return g


# ---------------------------------------------------------------------------
# Brownian skeleton


def bridge_sample(skeleton, t, rng):
    """Draw W_t given the pinned values in ``skeleton`` and insert it.

    ``skeleton`` maps pseudo-times to Brownian values and must contain 0.
    Between two keys the draw comes from the Brownian bridge; beyond the
    last key it is a free Brownian increment.
    """
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"bridge time must lie in (0, 1], got {t}")
    if t in skeleton:
        raise ValueError(f"time {t} is already in the skeleton")
    keys = sorted(skeleton)
    pos = bisect.bisect_left(keys, t)
    if pos == 0:
        raise ValueError("skeleton must contain a key below the requested time")
    ta = keys[pos - 1]
    wa = np.asarray(skeleton[ta], dtype=float)
    z = rng.standard_normal(wa.shape)
    if pos == len(keys):
        w = wa + np.sqrt(t - ta) * z
    else:
        tb = keys[pos]
        wb = np.asarray(skeleton[tb], dtype=float)
        span = tb - ta
        mean = wa + (t - ta) / span * (wb - wa)
        w = mean + np.sqrt((t - ta) * (tb - t) / span) * z
    skeleton[t] = w
    return w


class _Path:
    """Skeleton held as parallel sorted lists, with a buffer of standard
    normals drawn from the particle's own stream in fixed-size blocks."""

    __slots__ = ("keys", "vals", "rng", "buf", "pos")
    BLOCK = 32

    def __init__(self, d, rng):
        self.keys = [0.0]
        self.vals = [np.zeros(d)]
        self.rng = rng
        self.buf = None
        self.pos = self.BLOCK

    def at(self, t):
        return self.vals[bisect.bisect_left(self.keys, t)]

    def normal(self):
        if self.pos == self.BLOCK:
            self.buf = self.rng.standard_normal((self.BLOCK, self.vals[0].shape[0]))
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]

    def as_dict(self):
        return dict(zip(self.keys, self.vals))


def _increments(paths, lam0, lam1):
    """Brownian increments W(lam1) - W(lam0) for each path, drawing and
    pinning W(lam1) where it is not yet in the skeleton."""
    k = len(paths)
    d = paths[0].vals[0].shape[0]
    wa = np.zeros((k, d))
    wb = np.zeros((k, d))
    z = np.zeros((k, d))
    w0 = np.empty((k, d))
    coef = np.zeros((k, 3))  # weight of wa, weight of wb, noise sd
    slots = []
    for j, (p, t0, t) in enumerate(zip(paths, lam0, lam1)):
        keys = p.keys
        w0[j] = p.vals[bisect.bisect_left(keys, t0)]
        pos = bisect.bisect_left(keys, t)
        if pos < len(keys) and keys[pos] == t:
            wb[j] = p.vals[pos]
            coef[j, 1] = 1.0
            slots.append(None)
            continue
        ta = keys[pos - 1]
        wa[j] = p.vals[pos - 1]
        z[j] = p.normal()
        if pos == len(keys):
            coef[j] = (1.0, 0.0, np.sqrt(t - ta))
        else:
            tb = keys[pos]
            span = tb - ta
            wb[j] = p.vals[pos]
            f = (t - ta) / span
            coef[j] = (1.0 - f, f, np.sqrt((t - ta) * (tb - t) / span))
        slots.append(pos)
    w1 = coef[:, :1] * wa + coef[:, 1:2] * wb + coef[:, 2:] * z
    for j, (p, t, pos) in enumerate(zip(paths, lam1, slots)):
        if pos is not None:
            p.keys.insert(pos, t)
            p.vals.insert(pos, w1[j])
    return w1 - w0


# ---------------------------------------------------------------------------
# weights


def normalize_log_weights(logw):
    """Normalised weights from log-weights by max-shifted exponentials.

    Raises
    ------
    DegenerateWeightsError
        If no weight is positive.
    """
    logw = np.asarray(logw, dtype=float)
    ok = np.isfinite(logw)
    if not np.any(ok):
        raise DegenerateWeightsError(
            "all particle weights are zero",
            {"n": int(logw.size), "n_nan": int(np.isnan(logw).sum())},
        )
    shift = np.max(logw[ok])
    w = np.where(ok, np.exp(np.where(ok, logw, shift) - shift), 0.0)
    return w / np.sum(w)


def ess(weights):
    """Effective sample size 1 / sum(w^2) of normalised weights, clipped to
    [1, n] against rounding."""
    w = np.asarray(weights, dtype=float)
    return float(np.clip(1.0 / np.sum(w * w), 1.0, w.size))


@dataclass
class FlowParticle:
    state: np.ndarray
    logw: float
    lam: float
    skeleton: Optional[dict]
    x0: np.ndarray
    accepted: list = field(default_factory=list)
    n_rejected: int = 0
    flagged: bool = False

    @property
    def n_accepted(self):
        return len(self.accepted) - 1


class WeightedSet:
    """Particle states with unnormalised log-weights."""

    def __init__(self, states, logw, particles=None, diagnostics=None):
        self.states = np.asarray(states, dtype=float)
        self.logw = np.asarray(logw, dtype=float)
        self.particles = particles
        self.diagnostics = dict(diagnostics or {})

    def __len__(self):
        return self.logw.shape[0]

    @cached_property
    def normalized(self):
        return normalize_log_weights(self.logw)

    @property
    def ess(self):
        return ess(self.normalized)

    def mean(self):
        return self.normalized @ self.states


# ---------------------------------------------------------------------------
# engine


def _draw_initial(base_mean, chol, gens):
    z = np.stack([g.standard_normal(chol.shape[0]) for g in gens])
    return base_mean + z @ chol.T


def _run_chunk(target, x_init, base_mean, kappa, ctrl, gens, grid):
    k, d = x_init.shape
    x = x_init.copy()
    x_start = x_init.copy()
    lam = np.zeros(k)
    logw = np.zeros(k)
    dt = np.full(k, ctrl.dt_init)
    gi = np.zeros(k, dtype=int)
    rejects = np.zeros(k, dtype=int)
    n_rej = np.zeros(k, dtype=int)
    flagged = np.zeros(k, dtype=bool)
    accepted = [[0.0] for _ in range(k)]
    skel = [_Path(d, g) for g in gens] if kappa > 0 else [None] * k

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        anc = Anchor(target, x, base_mean=base_mean)
    alive = anc.valid.copy()
    logw[~alive] = -np.inf
    flagged[~alive] = True

    while True:
        idx = np.flatnonzero(alive & (lam < 1.0))
        if idx.size == 0:
            break
        A0 = anc.take(idx)
        lam0 = lam[idx]
        if grid is not None:
            lam1 = grid[gi[idx] + 1]
        else:
            lam1 = lam0 + dt[idx]
            lam1 = np.where(lam1 >= 1.0 - _SNAP, 1.0, lam1)
        dW = None
        if kappa > 0:
            dW = _increments([skel[i] for i in idx], lam0.tolist(), lam1.tolist())
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            res = step_from_anchor(A0, lam0, lam1, kappa, dW, jacobian=True)
            sign, logdet = np.linalg.slogdet(res.jacobian)
            x1 = res.x1
            finite = np.all(np.isfinite(x1), axis=1) & np.isfinite(logdet) & (sign != 0)
            x1 = np.where(finite[:, None], x1, A0.x)
            A1 = Anchor(target, x1, base_mean=A0.m0)
            ok = finite & A1.valid
            if grid is not None:
                norm = np.where(ok, 0.0, np.inf)
            else:
                err = error_from_anchors(
                    A0, A1, lam0, lam1, kappa, x1, dW, ctrl.atol, ctrl.rtol, sqrtP1_at_x0=res.sqrt_P1
                )
                norm = np.where(ok & np.isfinite(err.scaled_norm), err.scaled_norm, np.inf)
            inc = (
                target.log_base(x1, A0.m0)
                + lam1 * A1.loglik
                - target.log_base(A0.x, A0.m0)
                - np.where(lam0 > 0, lam0 * A0.loglik, 0.0)
                + logdet
            )

        accept = norm <= 1.0
        dt_next = np.clip(dt[idx] * _step_factor(norm, ctrl), ctrl.dt_min, ctrl.dt_max)
        if grid is None:
            at_floor = dt[idx] <= ctrl.dt_min * (1.0 + 1e-9)
            force = ~accept & ((rejects[idx] >= ctrl.max_rejects_per_step) | at_floor)
        else:
            force = ~accept
        commit = accept | force
        good = commit & ok

        rows = idx[good]
        x[rows] = x1[good]
        logw[rows] += inc[good]
        lam[rows] = lam1[good]
        gi[rows] += 1
        anc.put(rows, A1.take(good))
        for i, l1 in zip(rows, lam1[good]):
            accepted[i].append(float(l1))

        dead = idx[commit & ~ok]
        logw[dead] = -np.inf
        alive[dead] = False

        flagged[idx[force]] = True
        rejects[idx[commit]] = 0
        retry = idx[~commit]
        rejects[retry] += 1
        n_rej[retry] += 1
        n_rej[idx[force]] += 1
        dt[idx] = dt_next

    particles = []
    for i in range(k):
        sk = None if skel[i] is None else skel[i].as_dict()
        particles.append(
            FlowParticle(x[i].copy(), float(logw[i]), float(lam[i]), sk, x_start[i].copy(),
                         accepted[i], int(n_rej[i]), bool(flagged[i]))
        )
    return particles


def _check_grid(grid):
    if grid is None:
        return None
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must increase strictly from 0 to 1")
    return g


def run_flows(target, n, kappa, ctrl=None, seed=0, key=(), base_means=None, x_init=None,
              grid=None, threads=None):
    """Carry ``n`` particles through the flow from 0 to 1.

    Initial states are drawn from the base N(base_mean_i, base_cov) unless
    ``x_init`` is given. ``base_means`` gives one base mean per particle
    (defaulting to the target's). Particle ``i`` draws all its randomness
    from the stream ``(seed, *key, i)``.
    """
    ctrl = ctrl or StepControlConfig()
    grid = _check_grid(grid)
    if n < 1:
        raise ValueError("n must be >= 1")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    d = target.dim
    M = np.broadcast_to(target.base_mean if base_means is None else base_means, (n, d))
    X = None if x_init is None else np.asarray(x_init, dtype=float).reshape(n, d)
    chol = target.base_chol

    def work(lo):
        hi = min(lo + CHUNK, n)
        gens = [generator(seed, *key, i) for i in range(lo, hi)]
        m = np.array(M[lo:hi])
        x0 = _draw_initial(m, chol, gens) if X is None else X[lo:hi]
        return _run_chunk(target, x0, m, kappa, ctrl, gens, grid)

    parts = map_ordered(work, range(0, n, CHUNK), threads)
    return [p for chunk in parts for p in chunk]


def _to_set(particles, extra=None):
    states = np.stack([p.state for p in particles])
    logw = np.array([p.logw for p in particles])
    diag = {
        "n_accepted": np.array([p.n_accepted for p in particles]),
        "n_rejected": np.array([p.n_rejected for p in particles]),
        "flagged": np.array([p.flagged for p in particles]),
    }
    diag.update(extra or {})
    return WeightedSet(states, logw, particles, diag)


def flow_sample(target, n, flow, ctrl=None, seed=0, key=(), grid=None, threads=None):
    """Gaussian-flow importance sample of size ``n`` from ``target``.

    Parameters
    ----------
    target : NonlinearGaussianTarget
    flow : FlowConfig
    ctrl : StepControlConfig, optional
    grid : array_like, optional
        Fixed pseudo-time grid; disables adaptive step control.

    Raises
    ------
    DegenerateWeightsError
        If every particle ends with zero weight.
    """
    particles = run_flows(target, n, flow.kappa, ctrl, seed, key, grid=grid, threads=threads)
    ws = _to_set(particles)
    ws.diagnostics["ess"] = ws.ess
    return ws


# ---------------------------------------------------------------------------
# resampling


def systematic_indices(weights, u):
    """Systematic resampling with offset ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    cs = np.cumsum(w)
    cs[-1] = 1.0
    pos = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cs, pos, side="right"), n - 1)


def resample(wset, rng):
    """Systematic resampling to a uniformly weighted set.

    The ancestor indices are stored in ``diagnostics["ancestors"]``.
    """
    idx = systematic_indices(wset.normalized, rng.random())
    particles = None if wset.particles is None else [wset.particles[i] for i in idx]
    return WeightedSet(wset.states[idx], np.zeros(len(idx)), particles, {"ancestors": idx})


def resample_move(wset, target, flow, ctrl=None, n_moves=3, seed=0, key=(), grid=None, threads=None):
    """Resample, then apply ``n_moves`` Metropolis-Hastings independence
    moves per particle.

    Each move reruns the stochastic flow from the particle's stored initial
    state with a fresh Brownian path and accepts the new endpoint with
    probability min(1, w'/w), where w is the flow weight of the current
    endpoint.
    """
    if not flow.kappa > 0:
        raise ConfigError("resample-move needs kappa > 0; a deterministic flow reproduces the current state")
    if wset.particles is None:
        raise ValueError("resample-move needs flow particles with their initial states")
    if n_moves < 0:
        raise ValueError("n_moves must be >= 0")
    idx = systematic_indices(wset.normalized, generator(seed, *key, 0).random())
    cur = [wset.particles[i] for i in idx]
    n = len(cur)
    x0 = np.stack([p.x0 for p in cur])
    n_acc = 0
    for m in range(n_moves):
        props = run_flows(target, n, flow.kappa, ctrl, seed, key + (1, m), x_init=x0, grid=grid,
                          threads=threads)
        u = generator(seed, *key, 2, m).random(n)
        cur_lw = np.array([p.logw for p in cur])
        new_lw = np.array([p.logw for p in props])
        with np.errstate(invalid="ignore"):
            log_ratio = new_lw - cur_lw
        take = np.isfinite(new_lw) & (np.log(u) < np.minimum(log_ratio, 0.0))
        n_acc += int(take.sum())
        cur = [q if t else p for p, q, t in zip(cur, props, take)]
    rate = n_acc / (n * n_moves) if n_moves else float("nan")
    out = _to_set(cur, {"acceptance_rate": rate, "ancestors": idx})
    # particles keep their flow weights for later moves; the set itself is
    # uniformly weighted after resampling
    return WeightedSet(out.states, np.zeros(n), out.particles, out.diagnostics)
