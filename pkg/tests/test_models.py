import numpy as np
import pytest

from gaussflow import models as M
from gaussflow.errors import DomainError


def fd(f, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        cols.append((f(x + e) - f(x - e)) / (2 * e[j]))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def altitude_states(rng, n):
    p = np.column_stack([rng.uniform(-4000, 4000, n), rng.uniform(500, 4000, n), rng.uniform(300, 1500, n)])
    v = rng.uniform(-50, 50, (n, 3))
    return np.hstack([p, v])


def arm_states(rng, n):
    return np.column_stack([
        rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 6, n),
        rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), rng.uniform(0.2, 1.0, n),
        rng.uniform(0.9, 1.1, n), rng.uniform(0.9, 1.1, n),
    ])


class TestRadial:
    def test_jacobian_hand_value(self):
        np.testing.assert_allclose(M.radial_jac(np.array([3.0, 4.0])), [[0.6, 0.8]])

    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_hessian_trace(self, d):
        x = np.random.default_rng(d).standard_normal(d)
        assert np.trace(M.radial_hess(x)[0]) == pytest.approx((d - 1) / np.linalg.norm(x), abs=1e-12)

    @pytest.mark.parametrize("d", [2, 3, 6])
    def test_finite_differences(self, d):
        rng = np.random.default_rng(10 + d)
        for _ in range(20):
            x = rng.standard_normal(d) + 1
            assert rel_err(M.radial_jac(x), fd(M.radial_obs, x)) < 1e-5
            assert rel_err(M.radial_hess(x), fd(M.radial_jac, x)) < 1e-4

    def test_origin(self):
        with pytest.raises(DomainError):
            M.radial_jac(np.zeros(2))
        with pytest.raises(DomainError):
            M.radial_hess(np.zeros(3))

    def test_target(self):
        t = M.radial_target(3, 2.0, 0.5, 1.5)
        np.testing.assert_array_equal(t.base_mean, np.ones(3))
        np.testing.assert_allclose(t.base_cov, 4.0 * np.eye(3))
        np.testing.assert_allclose(t.R, [[0.25]])

    def test_invalid(self):
        with pytest.raises(ValueError):
            M.RadialTestModel(0, 1.0, 1.0)
        with pytest.raises(ValueError):
            M.RadialTestModel(2, -1.0, 1.0)


class TestTerrain:
    def test_empty(self):
        t = M.generate_terrain(0, n_blobs=0)
        assert len(t) == 0
        assert t.value(np.array([10.0, -3.0])) == 0.0
        np.testing.assert_array_equal(t.grad(np.array([1.0, 2.0])), 0.0)

    def test_single_blob_at_origin(self):
        t = M.TerrainMap([[0.0, 0.0]], [120.0], [300.0])
        assert t.value(np.zeros(2)) == 120.0
        np.testing.assert_array_equal(t.grad(np.zeros(2)), 0.0)
        np.testing.assert_allclose(t.hess(np.zeros(2)), -120.0 / 300.0**2 * np.eye(2))

    def test_deterministic(self):
        a, b = M.generate_terrain(5), M.generate_terrain(5)
        np.testing.assert_array_equal(a.centers, b.centers)
        assert not np.array_equal(a.centers, M.generate_terrain(6).centers)

    def test_default_ranges(self):
        t = M.generate_terrain(1)
        assert len(t) == 20
        assert np.all((t.amplitudes >= 50) & (t.amplitudes <= 300))
        assert np.all((t.widths >= 200) & (t.widths <= 800))
        assert np.all(np.abs(t.centers) <= 5000)

    def test_derivatives(self):
        t = M.generate_terrain(2)
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.uniform(-5000, 5000, 2)
            g = t.grad(p)
            if np.max(np.abs(g)) > 1e-6:
                assert rel_err(g, fd(t.value, p)) < 1e-5
            Hh = t.hess(p)
            if np.max(np.abs(Hh)) > 1e-9:
                assert rel_err(Hh, fd(t.grad, p)) < 1e-4

    def test_text_round_trip(self, tmp_path):
        t = M.generate_terrain(3)
        t.save(tmp_path / "map.txt")
        u = M.TerrainMap.load(tmp_path / "map.txt")
        np.testing.assert_array_equal(u.centers, t.centers)
        np.testing.assert_array_equal(u.amplitudes, t.amplitudes)
        np.testing.assert_array_equal(u.widths, t.widths)
        assert len(t.to_text().splitlines()) == 20

    def test_bad_text(self):
        with pytest.raises(ValueError):
            M.TerrainMap.from_text("1 2 3\n")

    def test_non_positive_width(self):
        with pytest.raises(ValueError):
            M.TerrainMap([[0.0, 0.0]], [1.0], [0.0])

    def test_immutable(self):
        t = M.generate_terrain(4)
        with pytest.raises(ValueError):
            t.amplitudes[0] = 1.0


class TestAltitude:
    @pytest.fixture(scope="class")
    @staticmethod
    def model():
        return M.AltitudeTrackingModel(M.generate_terrain(7))

    def test_hand_values(self, model):
        h, J, _ = M.altitude_obs(model, np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(h, [0.0, 1.0, -model.terrain.value(np.array([0.0, 1.0])), 0.0], atol=1e-15)

    def test_range_rate_velocity_gradient(self, model):
        x = np.array([300.0, 2000.0, 800.0, 10.0, -20.0, 3.0])
        _, J, _ = M.altitude_obs(model, x)
        np.testing.assert_allclose(J[3, 3:], x[:3] / np.linalg.norm(x[:3]), rtol=1e-14)

    def test_bearing_all_quadrants(self, model):
        x = np.array([-1.0, -1.0, 5.0, 0.0, 0.0, 0.0])
        assert model.obs(x)[0] == pytest.approx(-3 * np.pi / 4)

    def test_noise_and_transition(self, model):
        np.testing.assert_allclose(np.diag(model.R), [(np.pi / 9) ** 2, 0.01, 0.01, 0.01])
        I = np.eye(3)
        np.testing.assert_array_equal(model.F, np.block([[I, I], [0 * I, I]]))
        np.testing.assert_allclose(model.Q, 900.0 * np.block([[I / 3, I / 2], [I / 2, I]]))

    def test_finite_differences(self, model):
        rng = np.random.default_rng(1)
        for x in altitude_states(rng, 200):
            assert rel_err(model.jac(x), fd(model.obs, x)) < 1e-5
            assert rel_err(model.hess(x), fd(model.jac, x)) < 1e-4

    def test_hessian_symmetric(self, model):
        G = model.hess(altitude_states(np.random.default_rng(2), 10))
        np.testing.assert_array_equal(G, np.swapaxes(G, -1, -2))

    def test_domain(self, model):
        with pytest.raises(DomainError):
            M.altitude_obs(model, np.zeros(6))
        assert np.all(np.isnan(model.obs(np.zeros((2, 6)))))


class TestArm:
    def test_zero_angle_kinematics(self):
        arm = M.SkeletalArmModel()
        x = np.array([0.2, -0.1, 5.0, 0.0, 0.0, 0.0, 1.1, 0.9])
        (xE, _, _), (xH, _, _) = arm.kinematics(x)
        np.testing.assert_allclose(xE, [1.3, -0.1, 5.0])
        np.testing.assert_allclose(xH, [2.2, -0.1, 5.0])

    def test_projection_hand_value(self):
        h, _, _ = M.arm_obs(M.SkeletalArmModel(), np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]))
        np.testing.assert_allclose(h, [1.0, 1.0, 2.0, 1.0])

    @pytest.mark.parametrize("project", ["elbow", "hand"])
    def test_finite_differences(self, project):
        arm = M.SkeletalArmModel(project)
        for x in arm_states(np.random.default_rng(3), 200):
            assert rel_err(arm.jac(x), fd(arm.obs, x)) < 1e-5
            assert rel_err(arm.hess(x), fd(arm.jac, x)) < 1e-4

    def test_hand_mode_depends_on_forearm(self):
        x = arm_states(np.random.default_rng(4), 1)[0]
        assert np.all(M.SkeletalArmModel("elbow").jac(x)[:, 5] == 0)
        assert np.any(M.SkeletalArmModel("hand").jac(x)[:, 5] != 0)

    def test_noise(self):
        arm = M.SkeletalArmModel()
        np.testing.assert_allclose(np.diag(arm.Q), [0.25, 0.25, 0.01] + [(np.pi / 18) ** 2] * 3 + [1e-6] * 2)
        np.testing.assert_allclose(arm.R, 1e-6 * np.eye(4))

    def test_domain(self):
        with pytest.raises(DomainError):
            M.arm_obs(M.SkeletalArmModel(), np.array([0.0, 0.0, 0.0, 0, 0, 0, 1, 1]))
        with pytest.raises(ValueError):
            M.SkeletalArmModel("wrist")


class TestSimulate:
    def test_deterministic(self):
        ssm = M.altitude_scenario(3)
        a = M.simulate(ssm, 5, 11)
        b = M.simulate(ssm, 5, 11)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_noiseless(self):
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        ssm = M.linear_gaussian_ssm(F, np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), np.array([1.0, 0.5]),
                                    np.zeros((2, 2)))
        xs, ys = M.simulate(ssm, 4, 0)
        expect = np.array([np.linalg.matrix_power(F, t) @ [1.0, 0.5] for t in range(4)])
        np.testing.assert_allclose(xs, expect)
        np.testing.assert_allclose(ys, expect)

    def test_transition_residual_covariance(self):
        Q = np.array([[0.5, 0.2], [0.2, 0.3]])
        F = np.array([[0.9, 0.0], [0.1, 0.7]])
        ssm = M.linear_gaussian_ssm(F, Q, np.eye(2), np.eye(2), np.zeros(2), np.eye(2))
        xs, _ = M.simulate(ssm, 10**4, 1)
        res = xs[1:] - xs[:-1] @ F.T
        C = np.cov(res.T)
        # sd of a sample covariance entry: sqrt((Q_ii Q_jj + Q_ij^2) / n)
        se = np.sqrt((np.outer(np.diag(Q), np.diag(Q)) + Q**2) / res.shape[0])
        assert np.all(np.abs(C - Q) < 3 * se)

    def test_angles_wrapped(self):
        xs, ys = M.simulate(M.altitude_scenario(0), 50, 2)
        assert np.all(np.abs(ys[:, 0]) <= np.pi)

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            M.simulate(M.altitude_scenario(0), 0, 0)

    def test_domain_retries_exhausted(self):
        ssm = M.StateSpaceModel(
            prior=M.GaussianMoments(np.zeros(1), np.eye(1)), trans_mean=lambda x: x, trans_jac=None, Q=np.eye(1),
            obs=lambda x: np.full(np.shape(x), np.nan), jac=None, hess=None, R=np.eye(1),
        )
        with pytest.raises(DomainError):
            M.simulate(ssm, 2, 0, max_retries=3)


class TestScenarios:
    def test_altitude(self):
        ssm = M.altitude_scenario(0)
        assert ssm.dim == 6 and ssm.obs_dim == 4 and ssm.angular == (0,)
        np.testing.assert_allclose(np.diag(ssm.prior.cov), [1e4] * 3 + [100.0] * 3)
        assert ssm.rmse_components == (0, 1, 2)

    def test_altitude_shared_terrain(self):
        t = M.generate_terrain(9)
        assert M.altitude_scenario(1, terrain=t).meta["terrain"] is t

    def test_arm(self):
        ssm = M.arm_scenario(0)
        assert ssm.dim == 8 and ssm.obs_dim == 4
        np.testing.assert_array_equal(ssm.prior.cov, ssm.Q)
        assert 4 <= ssm.prior.mean[2] <= 6

    def test_linear_target(self):
        ssm = M.linear_gaussian_ssm(np.eye(2), np.eye(2), [[1.0, 2.0]], [[0.5]], np.zeros(2), np.eye(2))
        t = ssm.target(np.ones(2), np.eye(2), np.array([3.0]))
        assert t.loglik(np.ones(2)) == pytest.approx(-0.5 * np.log(2 * np.pi * 0.5))
