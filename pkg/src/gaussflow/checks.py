"""Built-in property checks run by ``gaussflow verify``.

Each check compares an implementation against an independent route
(closed-form Kalman update, finite differences, quadrature, Kalman filter)
on fixed seeds, so its value is reproducible to the last bit.
"""

from dataclasses import dataclass

import numpy as np

from . import gflow_approx as ga
from . import gflow_linear as gl
from .filter import kalman_filter, run_filter
from .flow_sampler import flow_sample
from .models import linear_gaussian_ssm, radial_target, simulate
from .rng import generator


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float


def random_linear_model(rng, d=None, dy=None):
    d = int(rng.integers(1, 5)) if d is None else d
    dy = int(rng.integers(1, 5)) if dy is None else dy
    A = rng.standard_normal((d, d))
    B = rng.standard_normal((dy, dy))
    return gl.LinearGaussianModel(
        m0=rng.standard_normal(d),
        P0=A @ A.T + 0.5 * np.eye(d),
        H=rng.standard_normal((dy, d)),
        R=B @ B.T + 0.5 * np.eye(dy),
        y=rng.standard_normal(dy),
    )


def kalman_update(m0, P0, H, R, y):
    """Textbook gain-form Kalman update."""
    S = H @ P0 @ H.T + R
    K = P0 @ H.T @ np.linalg.inv(S)
    return m0 + K @ (y - H @ m0), P0 - K @ S @ K.T


def check_governing_residual(seed=0, n_models=20):
    rng = generator(seed, 0xC1)
    worst = 0.0
    for _ in range(n_models):
        model = random_linear_model(rng)
        lam, kappa = rng.uniform(), rng.uniform(0, 1)
        x = rng.standard_normal(model.dim)
        worst = max(worst, abs(gl.governing_residual(model, lam, x, kappa)))
    return CheckResult("governing_residual", bool(worst < 1e-8), worst, 1e-8)


def check_kalman_endpoint(seed=0, n_models=20):
    rng = generator(seed, 0xC2)
    worst = 0.0
    for _ in range(n_models):
        model = random_linear_model(rng)
        mom = gl.sequence_moments(model, 1.0)
        m, P = kalman_update(model.m0, model.P0, model.H, model.R, model.y)
        err = max(np.max(np.abs(mom.mean - m)) / max(1.0, np.max(np.abs(m))),
                  np.max(np.abs(mom.cov - P)) / np.max(np.abs(P)))
        worst = max(worst, err)
    return CheckResult("kalman_endpoint", bool(worst < 1e-10), worst, 1e-10)


def check_linear_weights(seed=0, n_models=5, n=50):
    rng = generator(seed, 0xC3)
    worst = 0.0
    for k in range(n_models):
        model = random_linear_model(rng)
        ssm = linear_gaussian_ssm(np.eye(model.dim), np.eye(model.dim), model.H, model.R,
                                  model.m0, model.P0)
        target = ssm.target(model.m0, model.P0, model.y)
        ws = flow_sample(target, n, gl.FlowConfig(0.0), seed=seed, key=(0xC3, k), threads=1)
        worst = max(worst, float(np.ptp(ws.logw)))
    return CheckResult("linear_weight_spread", bool(worst < 1e-6), worst, 1e-6)


def check_step_jacobian(seed=0, n_points=10, h=1e-6):
    rng = generator(seed, 0xC4)
    worst = 0.0
    for _ in range(n_points):
        d = int(rng.integers(1, 4))
        target = radial_target(d, 1.0, 0.2, rng.uniform(0.5, 2.0))
        x0 = 1.0 + rng.standard_normal(d)
        lam0 = rng.uniform(0, 0.8)
        lam1 = lam0 + rng.uniform(0.01, 0.2)
        kappa = 0.3
        dW = rng.standard_normal(d) * np.sqrt(lam1 - lam0)
        J = ga.step_jacobian(target, x0, lam0, lam1, kappa, dW)
        fd = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd[:, j] = (ga.agf_step(target, x0 + e, lam0, lam1, kappa, dW)
                        - ga.agf_step(target, x0 - e, lam0, lam1, kappa, dW)) / (2 * h)
        worst = max(worst, np.max(np.abs(J - fd)) / max(1.0, np.max(np.abs(fd))))
    return CheckResult("step_jacobian", bool(worst < 1e-4), worst, 1e-4)


def beacon_range_target(beacon, prior_mean, sigma_x, sigma_y, y):
    """Gaussian prior and a range measurement from a beacon placed well
    outside the prior mass, so the range Jacobian stays smooth."""
    c = np.asarray(beacon, dtype=float)

    def obs(x):
        return np.linalg.norm(np.asarray(x) - c, axis=-1, keepdims=True)

    def jac(x):
        dx = np.asarray(x) - c
        return (dx / np.linalg.norm(dx, axis=-1, keepdims=True))[..., None, :]

    def hess(x):
        dx = np.asarray(x) - c
        r = np.linalg.norm(dx, axis=-1)[..., None, None]
        u = dx[..., :, None] / r
        eye = np.eye(c.shape[0])
        return ((eye - u * np.swapaxes(u, -1, -2)) / r)[..., None, :, :]

    d = c.shape[0]
    return ga.NonlinearGaussianTarget(np.asarray(prior_mean, dtype=float), sigma_x**2 * np.eye(d),
                                      obs, jac, hess, np.array([[sigma_y**2]]), np.atleast_1d(y))


def grid_posterior_mean_2d(target, half_width=6.0, n_grid=1201):
    """Posterior mean by a dense tensor grid centred on the prior mean."""
    m = target.base_mean
    s = np.sqrt(np.max(np.diag(target.base_cov)))
    g0 = np.linspace(m[0] - half_width * s, m[0] + half_width * s, n_grid)
    g1 = np.linspace(m[1] - half_width * s, m[1] + half_width * s, n_grid)
    A, B = np.meshgrid(g0, g1, indexing="ij")
    pts = np.stack([A.ravel(), B.ravel()], axis=1)
    lp = target.log_base(pts) + target.loglik(pts)
    w = np.exp(lp - lp.max())
    return w @ pts / w.sum()


def check_beacon_mean(seed=0, n=2000):
    target = beacon_range_target([-6.0, 0.0], [1.0, 1.0], 1.0, 0.1, 7.2)
    ws = flow_sample(target, n, gl.FlowConfig(0.0), seed=seed, key=(0xC5,), threads=1)
    w = ws.normalized
    est = w @ ws.states
    se = np.sqrt(np.sum(w[:, None] ** 2 * (ws.states - est) ** 2, axis=0))
    z = float(np.max(np.abs(est - grid_posterior_mean_2d(target)) / se))
    return CheckResult("beacon_posterior_mean_z", bool(z < 4.0), z, 4.0)


def check_filter_kalman(seed=0, n=500, T=10):
    F = np.array([[0.9, 0.2], [0.0, 0.8]])
    Q = 0.5 * np.eye(2)
    H = np.eye(2)
    R = 0.25 * np.eye(2)
    ssm = linear_gaussian_ssm(F, Q, H, R, np.zeros(2), np.eye(2))
    _, ys = simulate(ssm, T, seed)
    km, _, _ = kalman_filter(F, Q, H, R, np.zeros(2), np.eye(2), ys)
    res = run_filter(ssm, ys, "bootstrap", n, seed=seed, threads=1, se_lag=4)
    z = np.max(np.linalg.norm(res.means - km, axis=1) / np.sqrt(np.sum(res.se**2, axis=1)))
    return CheckResult("bootstrap_vs_kalman_z", bool(z < 4.0), float(z), 4.0)


CHECKS = (
    check_governing_residual,
    check_kalman_endpoint,
    check_linear_weights,
    check_step_jacobian,
    check_beacon_mean,
    check_filter_kalman,
)


def run_checks(seed=0):
    return [check(seed) for check in CHECKS]
