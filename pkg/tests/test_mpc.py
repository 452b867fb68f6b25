"""Control splines, MPPI, Gauss-Newton shooting and the receding-horizon loop."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from softspace import dynamics as dy
from softspace import fem, rom
from softspace import mpc

from oracles import lti_jacobian


@pytest.fixture(scope="module")
def square_fluid():
    full = fem.assemble(fem.bar(3, 3, spacing=0.5), fem.Material())
    return rom.reduce(full, fem.modal_basis(full, 8))


class TestSpline:
    @given(st.integers(1, 60), st.integers(1, 8), st.sampled_from(["bezier", "bspline"]))
    def test_partition_of_unity(self, H, K, kind):
        if K > H:
            return
        W = mpc.spline_weights(H, K, kind)
        assert W.shape == (H, K)
        assert np.all(W >= -1e-12)
        np.testing.assert_allclose(W.sum(1), 1.0, atol=1e-12)

    def test_endpoint_interpolation(self):
        for kind in ("bezier", "bspline"):
            W = mpc.spline_weights(20, 5, kind)
            np.testing.assert_allclose(W[0], np.eye(5)[0], atol=1e-12)
            np.testing.assert_allclose(W[-1], np.eye(5)[-1], atol=1e-12)

    def test_matrix_matches_controls(self, rng):
        sp = mpc.ControlSpline(rng.standard_normal((4, 3)), mpc.spline_weights(12, 4))
        np.testing.assert_allclose(sp.matrix @ sp.points.ravel(), sp.controls().ravel(), atol=1e-12)

    def test_shift_keeps_constant(self):
        sp = mpc.ControlSpline(np.full((4, 2), 1.5), mpc.spline_weights(16, 4))
        np.testing.assert_allclose(sp.shifted(5).controls(), 1.5, atol=1e-10)

    def test_invalid(self):
        with pytest.raises(ValueError):
            mpc.spline_weights(3, 4)
        with pytest.raises(ValueError):
            mpc.spline_weights(10, 4, "hermite")
        with pytest.raises(ValueError):
            mpc.MPCConfig(controller="ilqr")
        with pytest.raises(ValueError):
            mpc.MPCConfig(horizon=2, control_points=3)


class TestMPPI:
    def test_weights_softmax(self):
        w = mpc.mppi_weights(np.array([0.0, 1.0, 1e6]), 1.0)
        np.testing.assert_allclose(w, [0, 0, 1])
        w = mpc.mppi_weights(np.array([2.0, 2.0]), 1e-3)
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_sample_count_and_unperturbed_sample(self):
        model = rom.double_integrator()
        cfg = mpc.MPCConfig(horizon=10, control_points=3, temperature=1e-9, noise_scale=1e-3, mppi_iterations=1)
        c = dy.SimCounter()
        sp = mpc.ControlSpline.zeros(10, 3, 1)
        up = mpc.mppi_update(model, dy.ReducedState.rest(model), np.eye(1), sp, cfg,
                             dy.Environment.free_space(), dy.Task(direction=(-1.0, 0.0)), np.random.default_rng(0), c)
        assert c.snapshot()["rollouts"] == up.rollouts == cfg.n_samples(1) == 3
        assert up.objective >= 0.0  # the zero sample scores 0 in free space

    def test_improves_double_integrator(self):
        model = rom.double_integrator()
        cfg = mpc.MPCConfig(horizon=20, control_points=3, temperature=1e-4, noise_scale=20.0, mppi_iterations=4,
                            samples=16)
        env, task = dy.Environment.free_space(), dy.Task(w_u=1e-6)
        s0 = dy.ReducedState.rest(model)
        up = mpc.mppi_update(model, s0, np.eye(1), mpc.ControlSpline.zeros(20, 3, 1), cfg, env, task,
                             np.random.default_rng(3))
        assert up.objective > 0.0


class TestGaussNewton:
    def test_jacobian_matches_lti(self, bar_rom, free_env, rng):
        B = np.linalg.qr(rng.standard_normal((7, 2)))[0]
        cfg = mpc.MPCConfig(horizon=25, control_points=4, dt=0.01, noise_scale=10.0)
        sp = mpc.ControlSpline(rng.standard_normal((4, 2)), mpc.spline_weights(25, 4))
        s0 = dy.ReducedState(rng.standard_normal(10) * 1e-3, rng.standard_normal(10) * 0.1)
        J = mpc.gn_jacobian(bar_rom, s0, B, sp, cfg, free_env)
        ref = lti_jacobian(bar_rom, B, sp.weights, cfg.dt)
        assert np.abs(J - ref).max() <= 1e-4 * np.abs(ref).max()

    def test_richardson_order(self, square_fluid, rng):
        """Central differences on a nonlinear (drag) model converge at second order."""
        env = dy.Environment(mode="fluid", drag_coefficient=2.0)
        B = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        cfg = mpc.MPCConfig(horizon=15, control_points=3, dt=0.01)
        v0 = np.zeros(8)
        v0[:2] = square_fluid.com_map[:, :2].T @ [0.4, 0.3] / np.sum(square_fluid.com_map[:, :2] ** 2, 1).mean()
        sp = mpc.ControlSpline(np.full((3, 2), 3.0), mpc.spline_weights(15, 3))
        s0 = dy.ReducedState(np.zeros(8), v0)
        Js = [mpc.gn_jacobian(square_fluid, s0, B, sp, cfg, env, h=h) for h in (0.4, 0.2, 0.1)]
        e1, e2 = np.abs(Js[0] - Js[1]).max(), np.abs(Js[1] - Js[2]).max()
        assert e1 > 0 and 3.0 <= e1 / e2 <= 5.0

    def test_rollout_accounting(self, bar_rom, free_env):
        task = dy.Task(w_u=1e-4)
        for C in (1, 2, 4):
            cfg = mpc.MPCConfig(horizon=12, control_points=3, controller="gauss_newton")
            c = dy.SimCounter()
            up = mpc.gauss_newton_update(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(7)[:, :C],
                                         mpc.ControlSpline.zeros(12, 3, C), cfg, free_env, task, c)
            assert up.rollouts == 2 * 3 * C + up.line_search
            assert c.snapshot()["rollouts"] == up.rollouts
            assert c.snapshot()["steps"] == 12 * up.rollouts

    def test_exact_on_quadratic_problem(self):
        """The double integrator objective is quadratic in the points; one full step is optimal."""
        model = rom.double_integrator()
        task = dy.Task(w_u=1e-2)
        cfg = mpc.MPCConfig(horizon=10, control_points=2, controller="gauss_newton", lm_damping=0.0,
                            noise_scale=1.0)
        env = dy.Environment.free_space()
        s0 = dy.ReducedState.rest(model)
        up = mpc.gauss_newton_update(model, s0, np.eye(1), mpc.ControlSpline.zeros(10, 2, 1), cfg, env, task)
        assert up.line_search == 2  # base + accepted full step
        again = mpc.gauss_newton_update(model, s0, np.eye(1), up.spline, cfg, env, task)
        np.testing.assert_allclose(again.spline.points, up.spline.points, atol=1e-6)

    def test_never_worse(self, bar_rom, rng):
        env = dy.Environment()
        task = dy.Task(w_rot=0.1, w_perp=1e-3, w_u=1e-4)
        cfg = mpc.MPCConfig(horizon=20, control_points=3, controller="gauss_newton")
        sp = mpc.ControlSpline(rng.standard_normal((3, 2)) * 30, mpc.spline_weights(20, 3))
        s0 = dy.ReducedState.rest(bar_rom)
        B = np.eye(7)[:, :2]
        before = dy.rollout(bar_rom, s0, B, sp, cfg.dt, env, task).objective
        up = mpc.gauss_newton_update(bar_rom, s0, B, sp, cfg, env, task)
        assert up.objective >= before


class TestLoop:
    def test_length_stride_and_determinism(self, bar_rom):
        env, task = dy.Environment(), dy.Task()
        cfg = mpc.MPCConfig(horizon=12, control_points=3, noise_scale=20.0)
        assert cfg.stride == 3
        c = dy.SimCounter()
        a = mpc.mpc_run(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(7)[:, :2], 10, cfg, env, task, seed=5,
                        counter=c)
        assert a.trajectory.length == 10 and a.replans == 4
        assert c.snapshot()["executed_steps"] == 10
        assert a.rollouts == 4 * cfg.n_samples(2)
        b = mpc.mpc_run(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(7)[:, :2], 10, cfg, env, task, seed=5)
        assert a.trajectory.q.tobytes() == b.trajectory.q.tobytes()

    def test_threads_do_not_change_results(self, bar_rom):
        env, task = dy.Environment(), dy.Task()
        kw = dict(horizon=8, control_points=2, noise_scale=20.0)
        runs = [mpc.mpc_run(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(7)[:, :2], 6,
                            mpc.MPCConfig(threads=t, **kw), env, task, seed=1) for t in (1, 3)]
        assert runs[0].trajectory.q.tobytes() == runs[1].trajectory.q.tobytes()

    def test_basis_shape_checked(self, bar_rom, free_env):
        with pytest.raises(ValueError, match="rows"):
            mpc.mpc_run(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(10)[:, :2], 5, mpc.MPCConfig(), free_env,
                        dy.Task())
        with pytest.raises(ValueError):
            mpc.mpc_run(bar_rom, dy.ReducedState.rest(bar_rom), np.eye(7)[:, :2], 0, mpc.MPCConfig(), free_env,
                        dy.Task())
