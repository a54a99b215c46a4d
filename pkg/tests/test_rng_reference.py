import numpy as np
import pytest

from gaussflow import rng as R
from gaussflow.importance import laplace_is, prior_is, run_method
from gaussflow.models import radial_target
from gaussflow.reference import radial_posterior_mean


class TestStreams:
    def test_keyed_streams_are_reproducible(self):
        a = R.generator(5, 1, 2).standard_normal(4)
        b = R.generator(5, 1, 2).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        assert R.generator(5, 1).random() != R.generator(5, 2).random()
        assert R.generator(5, 1).random() != R.generator(6, 1).random()

    def test_order_independent(self):
        gens = R.particle_generators(3, 4)
        late = gens[3].random()
        assert late == R.generator(3, 3).random()

    def test_seed_sequence_root(self):
        root = R.derive(9, 4)
        np.testing.assert_array_equal(R.derive(root, 1).generate_state(4), R.derive(9, 4, 1).generate_state(4))

    def test_negative_seed(self):
        with pytest.raises(ValueError):
            R.generator(-1)


class TestThreads:
    def test_env(self, monkeypatch):
        monkeypatch.setenv(R.THREADS_ENV, "3")
        assert R.thread_count() == 3

    @pytest.mark.parametrize("raw", ["0", "many"])
    def test_env_invalid(self, monkeypatch, raw):
        monkeypatch.setenv(R.THREADS_ENV, raw)
        with pytest.raises(ValueError):
            R.thread_count()

    def test_default(self, monkeypatch):
        monkeypatch.delenv(R.THREADS_ENV, raising=False)
        assert R.thread_count() >= 1

    def test_map_ordered(self):
        assert R.map_ordered(lambda x: x * x, range(10), threads=4) == [x * x for x in range(10)]


class TestReference:
    @pytest.mark.parametrize("y", [0.3, 1.0, 2.5])
    def test_one_dimensional_grid(self, y):
        x = np.linspace(-8, 8, 400001)
        lp = -0.5 * (x - 1) ** 2 - 0.5 * (y - np.abs(x)) ** 2 / 0.01
        w = np.exp(lp - lp.max())
        assert radial_posterior_mean(1, 1.0, 0.1, y)[0] == pytest.approx(np.sum(w * x) / np.sum(w), abs=1e-8)

    def test_two_dimensional_grid(self):
        g = np.linspace(-6, 6, 1501)
        A, B = np.meshgrid(g, g, indexing="ij")
        lp = -0.5 * ((A - 1) ** 2 + (B - 1) ** 2) / 4.0 - 0.5 * (1.5 - np.hypot(A, B)) ** 2 / 0.04
        w = np.exp(lp - lp.max())
        ref = np.array([np.sum(w * A), np.sum(w * B)]) / np.sum(w)
        np.testing.assert_allclose(radial_posterior_mean(2, 2.0, 0.2, 1.5), ref, atol=1e-6)

    def test_three_dimensional_monte_carlo(self):
        # self-normalised prior importance sampling with a broad likelihood
        rng = np.random.default_rng(0)
        x = 1 + rng.standard_normal((4 * 10**6, 3))
        lw = -0.5 * (1.2 - np.linalg.norm(x, axis=1)) ** 2 / 0.25
        w = np.exp(lw - lw.max())
        w /= w.sum()
        est = w @ x
        se = np.sqrt(np.sum(w[:, None] ** 2 * (x - est) ** 2, axis=0))
        assert np.all(np.abs(radial_posterior_mean(3, 1.0, 0.5, 1.2) - est) < 4 * se)

    def test_symmetric_components(self):
        m = radial_posterior_mean(4, 1.0, 0.1, 2.0)
        assert np.ptp(m) == 0.0


class TestSamplers:
    def test_prior_is_weights_are_likelihood(self):
        t = radial_target(2, 1.0, 0.1, 1.0)
        ws = prior_is(t, 50, seed=1)
        np.testing.assert_allclose(ws.logw, t.loglik(ws.states))

    def test_laplace_is_on_linear_target_is_exact(self):
        from gaussflow.models import linear_gaussian_ssm

        ssm = linear_gaussian_ssm(np.eye(2), np.eye(2), [[1.0, 0.5]], [[0.1]], np.zeros(2), np.eye(2))
        ws = laplace_is(ssm.target(np.zeros(2), np.eye(2), np.array([0.4])), 40, seed=2)
        assert np.ptp(ws.logw) < 1e-10
        assert ws.diagnostics["converged"]

    def test_run_method(self):
        t = radial_target(2, 1.0, 0.1, 1.0)
        for m in ("prior-is", "laplace-is", "flow-is"):
            assert len(run_method(m, t, 10, seed=3)) == 10
        with pytest.raises(ValueError):
            run_method("mcmc", t, 10)
