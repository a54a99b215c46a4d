"""Benchmark targets and state-space models with analytic first and second
derivatives.

Observation functions are vectorised over leading axes. Evaluating a single
state outside the domain raises ``DomainError``; evaluating a stack returns
NaN rows instead so that one bad particle cannot abort a batch.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError
from .gflow_approx import NonlinearGaussianTarget
from .gflow_linear import GaussianMoments


def _flag(bad, x, what):
    if np.ndim(x) == 1 and np.any(bad):
        raise DomainError(what)


# ---------------------------------------------------------------------------
# radial test model


def radial_obs(x):
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1)
    return n[..., None]


def radial_jac(x):
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1)
    _flag(n == 0, x, "radial observation is not differentiable at the origin")
    with np.errstate(invalid="ignore", divide="ignore"):
        return (x / n[..., None])[..., None, :]


def radial_hess(x):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    n = np.linalg.norm(x, axis=-1)
    _flag(n == 0, x, "radial observation is not differentiable at the origin")
    with np.errstate(invalid="ignore", divide="ignore"):
        u = x / n[..., None]
        proj = np.eye(d) - u[..., :, None] * u[..., None, :]
        return (proj / n[..., None, None])[..., None, :, :]


@dataclass(frozen=True)
class RadialTestModel:
    """Prior N(1, sigma_x^2 I) in ``d`` dimensions, observation ||x|| with
    noise variance sigma_y^2."""

    d: int
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if self.d < 1 or self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("radial model needs d >= 1 and positive scales")

    @property
    def prior_mean(self):
        return np.ones(self.d)

    @property
    def prior_cov(self):
        return self.sigma_x**2 * np.eye(self.d)

    @property
    def R(self):
        return np.array([[self.sigma_y**2]])

    def target(self, y_obs):
        return radial_target(self.d, self.sigma_x, self.sigma_y, y_obs)


def radial_target(d, sigma_x, sigma_y, y_obs):
    m = RadialTestModel(d, sigma_x, sigma_y)
    return NonlinearGaussianTarget(
        m.prior_mean, m.prior_cov, radial_obs, radial_jac, radial_hess, m.R, np.atleast_1d(y_obs)
    )


# ---------------------------------------------------------------------------
# terrain


@dataclass(frozen=True, eq=False)
class TerrainMap:
    """Smooth terrain: a sum of isotropic Gaussian blobs.

    Text format: one blob per line, ``cx cy amplitude width``.
    """

    centers: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        a = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        w = np.asarray(self.widths, dtype=float).reshape(-1)
        if not (c.shape[0] == a.shape[0] == w.shape[0]):
            raise ValueError("blob arrays have different lengths")
        if np.any(w <= 0):
            raise ValueError("blob widths must be positive")
        for name, v in (("centers", c), ("amplitudes", a), ("widths", w)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __len__(self):
        return self.amplitudes.shape[0]

    def _blobs(self, p):
        p = np.asarray(p, dtype=float)
        diff = p[..., None, :] - self.centers  # (..., B, 2)
        inv_w2 = 1.0 / self.widths**2
        e = self.amplitudes * np.exp(-0.5 * np.sum(diff * diff, axis=-1) * inv_w2)
        return diff, inv_w2, e

    def value(self, p):
        _, _, e = self._blobs(p)
        return np.sum(e, axis=-1)

    def grad(self, p):
        diff, inv_w2, e = self._blobs(p)
        return -np.sum((e * inv_w2)[..., None] * diff, axis=-2)

    def hess(self, p):
        diff, inv_w2, e = self._blobs(p)
        outer = diff[..., :, None] * diff[..., None, :] * (inv_w2**2)[..., None, None]
        outer = outer - inv_w2[..., None, None] * np.eye(2)
        return np.sum(e[..., None, None] * outer, axis=-3)

    def to_text(self):
        lines = [
            f"{c[0]!r} {c[1]!r} {a!r} {w!r}"
            for c, a, w in zip(self.centers.tolist(), self.amplitudes.tolist(), self.widths.tolist())
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows:
            return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
        arr = np.array(rows, dtype=float)
        if arr.shape[1] != 4:
            raise ValueError("terrain lines must have four fields: cx cy amplitude width")
        return cls(arr[:, :2], arr[:, 2], arr[:, 3])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def generate_terrain(seed, n_blobs=20, amp_range=(50.0, 300.0), width_range=(200.0, 800.0), extent=5000.0):
    if n_blobs < 0 or amp_range[0] > amp_range[1] or not (0 < width_range[0] <= width_range[1]):
        raise ValueError("invalid terrain generation ranges")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x7E44,)))
    centers = rng.uniform(-extent, extent, size=(n_blobs, 2))
    amps = rng.uniform(*amp_range, size=n_blobs)
    widths = rng.uniform(*width_range, size=n_blobs)
    return TerrainMap(centers, amps, widths)


# ---------------------------------------------------------------------------
# state-space models


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Gaussian-transition, nonlinear-Gaussian-observation state-space model."""

    prior: GaussianMoments
    trans_mean: Callable
    trans_jac: Callable
    Q: np.ndarray
    obs: Callable
    jac: Callable
    hess: Optional[Callable]
    R: np.ndarray
    angular: tuple = ()
    name: str = "ssm"
    rmse_components: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.Q.shape[0]

    @property
    def obs_dim(self):
        return self.R.shape[0]

    def target(self, base_mean, base_cov, y):
        """Single-frame target: Gaussian base times the observation
        likelihood for ``y``."""
        return NonlinearGaussianTarget(
            base_mean, base_cov, self.obs, self.jac, self.hess, self.R, y, self.angular
        )


def linear_gaussian_ssm(F, Q, H, R, prior_mean, prior_cov, name="linear"):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = F.shape[0]
    dy = H.shape[0]
    return StateSpaceModel(
        prior=GaussianMoments(np.asarray(prior_mean, dtype=float), np.atleast_2d(prior_cov)),
        trans_mean=lambda x: np.asarray(x) @ F.T,
        trans_jac=lambda x: np.broadcast_to(F, np.shape(x)[:-1] + F.shape),
        Q=np.atleast_2d(np.asarray(Q, dtype=float)),
        obs=lambda x: np.asarray(x) @ H.T,
        jac=lambda x: np.broadcast_to(H, np.shape(x)[:-1] + H.shape),
        hess=lambda x: np.zeros(np.shape(x)[:-1] + (dy, d, d)),
        R=np.atleast_2d(np.asarray(R, dtype=float)),
        name=name,
        meta={"F": F, "H": H},
    )


def cv_matrices(dim=3, dt=1.0, q=30.0**2):
    """Near-constant-velocity transition for ``dim`` spatial axes with state
    ordered as [positions, velocities]."""
    I = np.eye(dim)
    Z = np.zeros((dim, dim))
    F = np.block([[I, dt * I], [Z, I]])
    Q = q * np.block([[dt**3 / 3 * I, dt**2 / 2 * I], [dt**2 / 2 * I, dt * I]])
    return F, Q


class AltitudeTrackingModel:
    """Aircraft over mapped terrain. State ``[p(3), v(3)]``; observation
    ``[bearing, range, height above ground, range rate]``."""

    noise_var = np.array([(np.pi / 9) ** 2, 0.1**2, 0.1**2, 0.1**2])

    def __init__(self, terrain, dt=1.0, q=30.0**2):
        self.terrain = terrain
        self.F, self.Q = cv_matrices(3, dt, q)
        self.R = np.diag(self.noise_var)

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        p, v = x[..., :3], x[..., 3:]
        rho2 = p[..., 0] ** 2 + p[..., 1] ** 2
        r = np.sqrt(rho2 + p[..., 2] ** 2)
        _flag((r < 1e-9) | (rho2 == 0), x, "altitude observation undefined near the vertical axis")
        return x, p, v, rho2, r

    def obs(self, x):
        x, p, v, rho2, r = self._parts(x)
        with np.errstate(invalid="ignore", divide="ignore"):
            bad = (r < 1e-9) | (rho2 == 0)
            beta = np.arctan2(p[..., 0], p[..., 1])
            a = p[..., 2] - self.terrain.value(p[..., :2])
            rdot = np.sum(p * v, axis=-1) / r
            out = np.stack([beta, r, a, rdot], axis=-1)
        return np.where(bad[..., None], np.nan, out)

    def jac(self, x):
        x, p, v, rho2, r = self._parts(x)
        shape = x.shape[:-1]
        J = np.zeros(shape + (4, 6))
        with np.errstate(invalid="ignore", divide="ignore"):
            bad = (r < 1e-9) | (rho2 == 0)
            J[..., 0, 0] = p[..., 1] / rho2
            J[..., 0, 1] = -p[..., 0] / rho2
            J[..., 1, :3] = p / r[..., None]
            J[..., 2, :2] = -self.terrain.grad(p[..., :2])
            J[..., 2, 2] = 1.0
            pv = np.sum(p * v, axis=-1)
            J[..., 3, :3] = v / r[..., None] - (pv / r**3)[..., None] * p
            J[..., 3, 3:] = p / r[..., None]
        return np.where(bad[..., None, None], np.nan, J)

    def hess(self, x):
        x, p, v, rho2, r = self._parts(x)
        shape = x.shape[:-1]
        G = np.zeros(shape + (4, 6, 6))
        I3 = np.eye(3)
        with np.errstate(invalid="ignore", divide="ignore"):
            bad = (r < 1e-9) | (rho2 == 0)
            p1, p2 = p[..., 0], p[..., 1]
            rho4 = rho2**2
            G[..., 0, 0, 0] = -2.0 * p1 * p2 / rho4
            G[..., 0, 1, 1] = 2.0 * p1 * p2 / rho4
            G[..., 0, 0, 1] = G[..., 0, 1, 0] = (p1**2 - p2**2) / rho4
            pp = p[..., :, None] * p[..., None, :]
            G[..., 1, :3, :3] = (I3 - pp / (r**2)[..., None, None]) / r[..., None, None]
            G[..., 2, :2, :2] = -self.terrain.hess(p[..., :2])
            pv = np.sum(p * v, axis=-1)[..., None, None]
            r3 = (r**3)[..., None, None]
            r5 = (r**5)[..., None, None]
            vp = v[..., :, None] * p[..., None, :]
            G[..., 3, :3, :3] = -(vp + np.swapaxes(vp, -1, -2)) / r3 - pv * I3 / r3 + 3.0 * pv * pp / r5
            cross = I3 / r[..., None, None] - pp / r3
            G[..., 3, :3, 3:] = cross
            G[..., 3, 3:, :3] = np.swapaxes(cross, -1, -2)
        return np.where(bad[..., None, None, None], np.nan, G)

    def ssm(self, prior_mean, prior_cov):
        F = self.F
        return StateSpaceModel(
            prior=GaussianMoments(np.asarray(prior_mean, dtype=float), np.asarray(prior_cov, dtype=float)),
            trans_mean=lambda x: np.asarray(x) @ F.T,
            trans_jac=lambda x: np.broadcast_to(F, np.shape(x)[:-1] + F.shape),
            Q=self.Q,
            obs=self.obs,
            jac=self.jac,
            hess=self.hess,
            R=self.R,
            angular=(0,),
            name="altitude",
            rmse_components=(0, 1, 2),
            meta={"terrain": self.terrain},
        )


def altitude_obs(model, state):
    """Observation, Jacobian and Hessian of the altitude model at one state.

    Raises
    ------
    DomainError
        If the position is within 1e-9 of the origin or on the vertical axis.
    """
    state = np.asarray(state, dtype=float)
    if state.shape != (6,):
        raise ValueError("altitude state must have 6 components")
    return model.obs(state), model.jac(state), model.hess(state)


# forward kinematics direction u(alpha_B, alpha) and derivatives


def _dir(aB, a):
    cB, sB, c, s = np.cos(aB), np.sin(aB), np.cos(a), np.sin(a)
    u = np.stack([cB * c, s, sB * c], axis=-1)
    u_B = np.stack([-sB * c, np.zeros_like(s), cB * c], axis=-1)
    u_a = np.stack([-cB * s, c, -sB * s], axis=-1)
    u_BB = np.stack([-cB * c, np.zeros_like(s), -sB * c], axis=-1)
    u_Ba = np.stack([sB * s, np.zeros_like(s), -cB * s], axis=-1)
    u_aa = np.stack([-cB * c, -s, -sB * c], axis=-1)
    return u, u_B, u_a, u_BB, u_Ba, u_aa


class SkeletalArmModel:
    """Camera observations of an arm.

    State ``[xS(3), alpha_B, alpha_S, alpha_E, d_U, d_L]``; observation the
    perspective projection ``((q1 + q3) / q3, (q2 + q3) / q3)`` of the
    shoulder and of the elbow (``project="elbow"``, default) or hand
    (``project="hand"``).
    """

    XS = slice(0, 3)
    AB, AS, AE, DU, DL = 3, 4, 5, 6, 7
    dim = 8

    def __init__(self, project="elbow"):
        if project not in ("elbow", "hand"):
            raise ValueError("project must be 'elbow' or 'hand'")
        self.project = project
        self.Q = np.diag([0.5**2, 0.5**2, 0.1**2] + [(np.pi / 18) ** 2] * 3 + [0.001**2] * 2)
        self.R = 0.001**2 * np.eye(4)

    def kinematics(self, x):
        """Return elbow and hand positions with their Jacobians (``(..., 3,
        8)``) and Hessians (``(..., 3, 8, 8)``)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        aB, aS, aE, dU, dL = (x[..., i] for i in (self.AB, self.AS, self.AE, self.DU, self.DL))
        u, u_B, u_S, u_BB, u_BS, u_SS = _dir(aB, aS)
        w, w_B, w_a, w_BB, w_Ba, w_aa = _dir(aB, aS + aE)
        xS = x[..., self.XS]
        xE = xS + dU[..., None] * u
        xH = xE + dL[..., None] * w

        JE = np.zeros(shape + (3, 8))
        JE[..., :, 0:3] = np.eye(3)
        JE[..., :, self.AB] = dU[..., None] * u_B
        JE[..., :, self.AS] = dU[..., None] * u_S
        JE[..., :, self.DU] = u
        HE = np.zeros(shape + (3, 8, 8))
        AB, AS, DU = self.AB, self.AS, self.DU
        HE[..., :, AB, AB] = dU[..., None] * u_BB
        HE[..., :, AS, AS] = dU[..., None] * u_SS
        HE[..., :, AB, AS] = HE[..., :, AS, AB] = dU[..., None] * u_BS
        HE[..., :, AB, DU] = HE[..., :, DU, AB] = u_B
        HE[..., :, AS, DU] = HE[..., :, DU, AS] = u_S

        JH = JE.copy()
        JH[..., :, AB] += dL[..., None] * w_B
        JH[..., :, AS] += dL[..., None] * w_a
        JH[..., :, self.AE] = dL[..., None] * w_a
        JH[..., :, self.DL] = w
        HH = HE.copy()
        AE, DL = self.AE, self.DL
        ang = (AS, AE)
        HH[..., :, AB, AB] += dL[..., None] * w_BB
        for i in ang:
            HH[..., :, AB, i] += dL[..., None] * w_Ba
            HH[..., :, i, AB] += dL[..., None] * w_Ba
            HH[..., :, i, DL] += w_a
            HH[..., :, DL, i] += w_a
            for j in ang:
                HH[..., :, i, j] += dL[..., None] * w_aa
        HH[..., :, AB, DL] += w_B
        HH[..., :, DL, AB] += w_B
        return (xE, JE, HE), (xH, JH, HH)

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        JS = np.zeros(shape + (3, 8))
        JS[..., :, 0:3] = np.eye(3)
        HS = np.zeros(shape + (3, 8, 8))
        elbow, hand = self.kinematics(x)
        second = elbow if self.project == "elbow" else hand
        return [(x[..., self.XS], JS, HS), second]

    @staticmethod
    def _proj(q, Jq, Hq):
        q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
        val = np.stack([(q1 + q3) / q3, (q2 + q3) / q3], axis=-1)
        # gradient of the two projected components with respect to q
        g = np.zeros(q.shape[:-1] + (2, 3))
        g[..., 0, 0] = 1.0 / q3
        g[..., 0, 2] = -q1 / q3**2
        g[..., 1, 1] = 1.0 / q3
        g[..., 1, 2] = -q2 / q3**2
        hq = np.zeros(q.shape[:-1] + (2, 3, 3))
        for c, qc in ((0, q1), (1, q2)):
            hq[..., c, c, 2] = hq[..., c, 2, c] = -1.0 / q3**2
            hq[..., c, 2, 2] = 2.0 * qc / q3**3
        J = g @ Jq
        JqT = np.swapaxes(Jq, -1, -2)[..., None, :, :]
        d = Jq.shape[-1]
        curv = (g @ Hq.reshape(Hq.shape[:-2] + (d * d,))).reshape(g.shape[:-1] + (d, d))
        H = JqT @ hq @ Jq[..., None, :, :] + curv
        return val, J, H

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        pts = self._points(x)
        dens = np.stack([q[..., 2] for q, _, _ in pts], axis=-1)
        bad = np.any(np.abs(dens) <= 1e-6, axis=-1)
        _flag(bad, x, "projection denominator too close to zero")
        with np.errstate(invalid="ignore", divide="ignore"):
            parts = [self._proj(*pt) for pt in pts]
        val = np.concatenate([p[0] for p in parts], axis=-1)
        J = np.concatenate([p[1] for p in parts], axis=-2)
        H = np.concatenate([p[2] for p in parts], axis=-3)
        val = np.where(bad[..., None], np.nan, val)
        J = np.where(bad[..., None, None], np.nan, J)
        H = np.where(bad[..., None, None, None], np.nan, H)
        return val, J, H

    def obs(self, x):
        return self.evaluate(x)[0]

    def jac(self, x):
        return self.evaluate(x)[1]

    def hess(self, x):
        return self.evaluate(x)[2]

    def ssm(self, prior_mean, prior_cov):
        return StateSpaceModel(
            prior=GaussianMoments(np.asarray(prior_mean, dtype=float), np.asarray(prior_cov, dtype=float)),
            trans_mean=lambda x: np.asarray(x, dtype=float).copy(),
            trans_jac=lambda x: np.broadcast_to(np.eye(8), np.shape(x)[:-1] + (8, 8)),
            Q=self.Q,
            obs=self.obs,
            jac=self.jac,
            hess=self.hess,
            R=self.R,
            name="arm",
            rmse_components=(0, 1, 2),
            meta={"project": self.project},
        )


def arm_obs(model, state):
    """Observation, Jacobian and Hessian of the arm model at one state.

    Raises
    ------
    DomainError
        If a projection denominator is within 1e-6 of zero.
    """
    state = np.asarray(state, dtype=float)
    if state.shape != (8,):
        raise ValueError("arm state must have 8 components")
    return model.evaluate(state)


# ---------------------------------------------------------------------------
# simulation


def _sample_gaussian(rng, mean, cov, size=None):
    cov = np.atleast_2d(cov)
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    A = U * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((size, cov.shape[0]) if size else cov.shape[0])
    return mean + z @ A.T


def simulate(model, T, seed, max_retries=100):
    """Ancestral simulation of ``T`` steps from the model prior.

    A step whose state or observation leaves the observation domain is
    redrawn up to ``max_retries`` times.

    Returns
    -------
    states : (T, d) array
    observations : (T, dy) array
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5137,)))
    xs, ys = [], []
    for t in range(T):
        for _ in range(max_retries):
            if t == 0:
                x = _sample_gaussian(rng, model.prior.mean, model.prior.cov)
            else:
                x = _sample_gaussian(rng, model.trans_mean(xs[-1]), model.Q)
            with np.errstate(invalid="ignore", divide="ignore"):
                try:
                    h = model.obs(x[None])[0]
                except DomainError:
                    continue
            if not np.all(np.isfinite(h)):
                continue
            yv = _sample_gaussian(rng, h, model.R)
            if model.angular:
                from .gflow_approx import wrap_angle

                idx = list(model.angular)
                yv[idx] = wrap_angle(yv[idx])
            break
        else:
            raise DomainError(f"simulation left the observation domain at step {t}")
        xs.append(x)
        ys.append(yv)
    return np.array(xs), np.array(ys)


# ---------------------------------------------------------------------------
# benchmark scenarios


def altitude_scenario(seed, terrain=None):
    """Altitude-tracking state-space model with a seeded terrain and a prior
    centred on a seeded starting point (position sd 100, velocity sd 10)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xA17,)))
    if terrain is None:
        terrain = generate_terrain(int(rng.integers(2**32)))
    model = AltitudeTrackingModel(terrain)
    centre = np.array(
        [
            rng.uniform(-3000.0, 3000.0),
            rng.uniform(1000.0, 4000.0),
            rng.uniform(500.0, 1500.0),
            rng.uniform(-50.0, 50.0),
            rng.uniform(-50.0, 50.0),
            0.0,
        ]
    )
    cov = np.diag([100.0**2] * 3 + [10.0**2] * 3)
    return model.ssm(centre, cov)


def arm_scenario(seed, project="elbow"):
    """Skeletal-arm state-space model with a seeded starting pose; the prior
    covariance is the one-step random-walk covariance."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xA23,)))
    model = SkeletalArmModel(project)
    centre = np.array(
        [
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(4.0, 6.0),
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.5, 0.5),
            rng.uniform(0.2, 1.0),
            rng.uniform(0.9, 1.1),
            rng.uniform(0.9, 1.1),
        ]
    )
    return model.ssm(centre, model.Q.copy())
