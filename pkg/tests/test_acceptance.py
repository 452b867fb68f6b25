"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal
summary (``criterion N: PASS|FAIL ...``) and then asserts it.  Runtime
limits are part of each verdict.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import lti_jacobian
from softspace import bayesopt as bo
from softspace import dynamics as dy
from softspace import fem, mpc, rom
from softspace import grassmann as gr
from softspace import pipeline as pl


def verdict(k: int, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = bool(ok) and elapsed < limit
    ACCEPTANCE[k] = (ok, f"{detail} [{elapsed:.1f}s < {limit:g}s]")
    assert ok, f"criterion {k}: {ACCEPTANCE[k][1]}"


# ------------------------------------------------------------------ shared walker setup

WALKER_MESH = {"shape": "cross", "arm_len": 6, "arm_width": 3, "spacing": 0.1, "rotation_deg": 45, "elevation": 0.0}
WALKER_TASK = dy.Task(direction=(1.0, 0.0), w_rot=0.1, w_perp=1e-3, w_u=1e-4)
WALKER_MPC = mpc.MPCConfig(horizon=40, control_points=4, dt=0.01, controller="gauss_newton")
WALKER_RBBO = dict(n_iter=25, n_init=5, C=2, T_max=300, ladder_rungs=4, q_T=4.0)
WALKER_COMPARE = dict(n_init=5, C=2, T_max=300, ladder_rungs=4, q_T=4.0)
COMPARE_BUDGET_S = 300.0  # per variant


def walker_problem():
    mesh = fem.build_mesh(WALKER_MESH)
    full = fem.assemble(mesh, fem.Material())
    return pl.Problem(rom.reduce(full, fem.modal_basis(full, 10)), dy.Environment(), WALKER_TASK), mesh


# ------------------------------------------------------------------ criteria


def test_c01_modal_correctness():
    t0 = time.perf_counter()
    full = fem.assemble(fem.bar(2, 2), fem.Material())
    assert len(full.mesh.elements) == 2
    basis = fem.modal_basis(full, 8)
    K, m = full.stiffness, full.mass
    lam, B = basis.eigenvalues, basis.vectors
    res = max(np.linalg.norm(K @ p - l * m * p) / (np.linalg.norm(K, 2) * np.linalg.norm(p)) for p, l in zip(B.T, lam))
    rigid = np.abs(lam[: basis.n_rigid]).max() / lam.max()
    ortho = np.abs(B.T @ (m[:, None] * B) - np.eye(8)).max()
    ok = res <= 1e-6 and rigid <= 1e-8 and ortho <= 1e-8 and basis.n_rigid == 3
    verdict(1, ok, f"residual {res:.1e}, rigid {rigid:.1e}, orthonormality {ortho:.1e}",
            time.perf_counter() - t0, 1.0)


def test_c02_contact_properties():
    t0 = time.perf_counter()
    mesh = fem.build_mesh({"shape": "bar", "nx": 10, "ny": 5, "spacing": 0.05, "elevation": 0.05})
    full = fem.assemble(mesh, fem.Material())
    model = rom.reduce(full, fem.modal_basis(full, 10))
    env = dy.Environment(friction=0.8)
    tol = dy.contact_tolerance(model)
    s = dy.ReducedState.rest(model)
    worst_gap, worst_comp, worst_cone, worst_dual, steps_in_contact = np.inf, 0.0, -np.inf, 0.0, 0
    for _ in range(200):
        s, cs = dy.step(model, s, np.zeros(model.size), env, 0.01)
        worst_gap = min(worst_gap, dy.signed_distances(model, s.q, env).min())
        if len(cs):
            steps_in_contact += 1
            worst_comp = max(worst_comp, np.abs(cs.normal_velocity * cs.normal_force).max())
            worst_dual = max(worst_dual, -min(cs.normal_velocity.min(), cs.normal_force.min(), 0.0))
            cone = np.linalg.norm(cs.tangent_force, axis=1) - env.friction * cs.normal_force
            worst_cone = max(worst_cone, cone.max())
    ok = (mesh.node_count == 50 and steps_in_contact > 100 and worst_gap >= -10 * tol
          and worst_comp <= 1e-6 and worst_dual <= 1e-6 and worst_cone <= 1e-9)
    verdict(2, ok, f"min gap {worst_gap:.1e} (>= {-10 * tol:.1e}), complementarity {worst_comp:.1e}, "
                   f"cone excess {worst_cone:.1e}, {steps_in_contact} contact steps", time.perf_counter() - t0, 10.0)


def test_c03_jacobian_fidelity():
    t0 = time.perf_counter()
    full = fem.assemble(fem.bar(6, 3, spacing=0.1), fem.Material())
    model = rom.reduce(full, fem.modal_basis(full, 10))
    env = dy.Environment.free_space()
    rng = np.random.default_rng(0)
    B = gr.random_grassmann(model.control_dim, 2, rng)
    cfg = mpc.MPCConfig(horizon=30, control_points=4, noise_scale=10.0)
    sp = mpc.ControlSpline(rng.standard_normal((4, 2)) * 10, mpc.spline_weights(30, 4))
    s0 = dy.ReducedState(np.zeros(10), rng.standard_normal(10) * 0.1)
    J = mpc.gn_jacobian(model, s0, B, sp, cfg, env)
    ref = lti_jacobian(model, B, sp.weights, cfg.dt)
    rel = np.abs(J - ref).max() / np.abs(ref).max()
    # Richardson: on a nonlinear (drag) model the central difference error shrinks 4x per halving
    fluid = dy.Environment(mode="fluid", drag_coefficient=2.0)
    v0 = np.zeros(10)
    v0[:2] = [0.5, 0.3]
    s1 = dy.ReducedState(np.zeros(10), v0)
    Js = [mpc.gn_jacobian(model, s1, B, sp, cfg, fluid, h=h) for h in (0.4, 0.2, 0.1)]
    ratio = np.abs(Js[0] - Js[1]).max() / np.abs(Js[1] - Js[2]).max()
    ok = rel <= 1e-4 and 3.0 <= ratio <= 5.0
    verdict(3, ok, f"relative error {rel:.1e}, Richardson ratio {ratio:.2f} (order {math.log2(ratio):.2f})",
            time.perf_counter() - t0, 10.0)


def test_c04_controller_sanity():
    t0 = time.perf_counter()
    model = rom.double_integrator()
    env, task = dy.Environment.free_space(), dy.Task()
    s0, B, T = dy.ReducedState.rest(model), np.ones((1, 1)), 60
    # oracle: best constant control by objective over a fine grid
    grid = np.linspace(0.0, 100.0, 2001)
    trajs = [dy.simulate(model, s0, B, np.full((T, 1), u), 0.01, env, task) for u in grid]
    oracle = max(trajs, key=lambda t: t.objective).total_reward
    cfgs = {
        "mppi": mpc.MPCConfig(controller="mppi", noise_scale=20.0, temperature=1e-4, mppi_iterations=4),
        "gauss_newton": mpc.MPCConfig(controller="gauss_newton"),
    }
    ratios = {name: [mpc.mpc_run(model, s0, B, T, cfg, env, task, seed=s).total_reward / oracle for s in range(5)]
              for name, cfg in cfgs.items()}
    passes = {name: sum(r >= 0.8 for r in rs) for name, rs in ratios.items()}
    ok = all(p >= 4 for p in passes.values())
    detail = ", ".join(f"{n} {passes[n]}/5 (min {min(r):.2f})" for n, r in ratios.items())
    verdict(4, ok, f"{detail} of oracle reward {oracle:.3f}", time.perf_counter() - t0, 30.0)


def test_c05_kernel_gp_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_axiom = 0.0
    for _ in range(100):
        A, B, C = (gr.random_grassmann(6, 2, rng) for _ in range(3))
        dab, dba, dac, dbc = gr.distance(A, B), gr.distance(B, A), gr.distance(A, C), gr.distance(B, C)
        worst_axiom = max(worst_axiom, gr.distance(A, A), abs(dab - dba), dac - dab - dbc, -dab)
    Bs = np.array([gr.random_grassmann(6, 2, rng) for _ in range(50)])
    Ts = rng.choice([38, 75, 150, 300], 50).astype(float)
    theta = bo.KernelParams(1.5, 0.8, 100.0, 1e-4)
    Kmat = bo.gram(Bs, Ts, theta)
    psd = np.linalg.eigvalsh(Kmat).min() / np.abs(Kmat).max()
    y = np.sin(np.array([b[0, 0] + b[1, 1] for b in Bs])) + Ts / 300
    gp = bo.gp_fit(Bs, Ts, y, theta)
    A = Kmat + theta.noise_var * np.eye(50)
    pred_err, rot_err = 0.0, 0.0
    for _ in range(10):
        Bq, Tq = gr.random_grassmann(6, 2, rng), 300.0
        k = np.array([bo.kernel(Bq, Tq, b, t, theta) for b, t in zip(Bs, Ts)])
        mu = y.mean() + k @ np.linalg.solve(A, y - y.mean())
        sd = math.sqrt(theta.signal_var - k @ np.linalg.solve(A, k))
        got = bo.gp_predict(gp, Bq, Tq)
        pred_err = max(pred_err, abs(got[0] - mu), abs(got[1] - sd))
        R = np.linalg.qr(rng.standard_normal((2, 2)))[0]
        beta = bo.beta_schedule(3)
        rot_err = max(rot_err, abs(bo.ucb(gp, Bq @ R, Tq, beta) - bo.ucb(gp, Bq, Tq, beta)))
    ok = worst_axiom <= 1e-9 and psd >= -1e-8 and pred_err <= 1e-8 and rot_err <= 1e-9
    verdict(5, ok, f"axioms {worst_axiom:.1e}, min eig {psd:.1e}, prediction {pred_err:.1e}, "
                   f"rotation {rot_err:.1e}", time.perf_counter() - t0, 5.0)


def test_c06_rbbo_recovery():
    t0 = time.perf_counter()
    model = rom.translation_plus_stiff_mode()
    prob = pl.Problem(model, dy.Environment.free_space(), dy.Task())
    mcfg = mpc.MPCConfig(horizon=20, control_points=3, noise_scale=20.0, temperature=1e-3, mppi_iterations=2,
                         samples=8)
    # brute-force optimal axis over a grid of angles on Gr(2, 1)
    angles = np.linspace(0.0, np.pi, 13)[:-1]
    axes = [np.array([[math.cos(a)], [math.sin(a)]]) for a in angles]
    rewards = [pl.evaluate(prob, B, 40, mcfg, 0).reward for B in axes]
    best_axis = axes[int(np.argmax(rewards))]
    cosines = []
    for seed in range(5):
        res = pl.rbbo(prob, pl.RbboConfig(n_iter=40, n_init=5, C=1, T_max=40, seed=seed), mcfg)
        assert res.evaluations <= 60
        cosines.append(abs(float(res.B_c[:, 0] @ best_axis[:, 0])))
    hits = sum(c >= 0.9 for c in cosines)
    verdict(6, hits >= 4, f"|cos| {[round(c, 3) for c in cosines]}, {hits}/5 >= 0.9",
            time.perf_counter() - t0, 300.0)


@pytest.mark.slow
def test_c07_walker_improvement():
    t0 = time.perf_counter()
    prob, mesh = walker_problem()
    cfg = pl.RbboConfig(**WALKER_RBBO)
    base = pl.identity_baseline(prob, cfg, WALKER_MPC)
    gains = []
    for seed in range(5):
        res = pl.rbbo(prob, pl.RbboConfig(**{**WALKER_RBBO, "seed": seed}), WALKER_MPC)
        gains.append(res.best.reward / base.reward - 1.0)
    hits = sum(g >= 0.10 for g in gains)
    ok = hits >= 4 and 100 <= mesh.node_count <= 200
    verdict(7, ok, f"{mesh.node_count} nodes, identity {base.reward:.4f}, gains "
                   f"{[f'{100 * g:+.0f}%' for g in gains]}, {hits}/5 >= +10%", time.perf_counter() - t0, 1800.0)


@pytest.mark.slow
def test_c08_bo_vs_boca_parity():
    t0 = time.perf_counter()
    prob, _ = walker_problem()
    rep = pl.compare_bo_vs_boca(prob, pl.RbboConfig(**WALKER_COMPARE), WALKER_MPC, COMPARE_BUDGET_S)
    bo_r, boca_r = rep["bo"]["best_reward"], rep["boca"]["best_reward"]
    rel = boca_r / bo_r - 1.0
    ok = abs(rel) <= 0.15 and rep["boca"]["evaluations"] > rep["bo"]["evaluations"]
    verdict(8, ok, f"BO {bo_r:.4f} ({rep['bo']['evaluations']} evals), BOCA {boca_r:.4f} "
                   f"({rep['boca']['evaluations']} evals), difference {100 * rel:+.1f}%", time.perf_counter() - t0,
            3600.0)


def test_c09_complexity_accounting():
    t0 = time.perf_counter()
    # elevated so the horizon ends before touchdown; counts do not depend on contact
    mesh = fem.build_mesh({"shape": "bar", "nx": 6, "ny": 3, "spacing": 0.1, "elevation": 0.5})
    full = fem.assemble(mesh, fem.Material())
    model = rom.reduce(full, fem.modal_basis(full, 10))
    env, task = dy.Environment(), dy.Task()
    s0 = dy.ReducedState.rest(model)
    H, K = 16, 4
    jac, gn_ok = {}, True
    for C in (1, 2, 4):
        B = np.eye(model.control_dim)[:, :C]
        sp = mpc.ControlSpline.zeros(H, K, C)
        cfg = mpc.MPCConfig(horizon=H, control_points=K, controller="gauss_newton")
        c = dy.SimCounter()
        mpc.gn_jacobian(model, s0, B, sp, cfg, env, counter=c)
        jac[C] = c.snapshot()["rollouts"]
        c = dy.SimCounter()
        up = mpc.gauss_newton_update(model, s0, B, sp, cfg, env, task, counter=c)
        gn_ok &= c.snapshot()["rollouts"] == 2 * K * C + up.line_search == up.rollouts
        gn_ok &= c.snapshot()["steps"] == H * c.snapshot()["rollouts"]
    B = np.eye(model.control_dim)[:, :2]
    mppi_ok = True
    for samples in (None, 5, 13):
        cfg = mpc.MPCConfig(horizon=H, control_points=K, samples=samples)
        c = dy.SimCounter()
        mpc.mppi_update(model, s0, B, mpc.ControlSpline.zeros(H, K, 2), cfg, env, task, np.random.default_rng(0), c)
        mppi_ok &= c.snapshot()["rollouts"] == cfg.n_samples(2)
    ok = gn_ok and mppi_ok and jac == {1: 2 * K, 2: 4 * K, 4: 8 * K} and jac[2] == 2 * jac[1]
    verdict(9, ok, f"Jacobian rollouts {jac}, GN tally {'ok' if gn_ok else 'wrong'}, "
                   f"MPPI tally {'ok' if mppi_ok else 'wrong'}", time.perf_counter() - t0, 10.0)


def test_c10_determinism_and_resume(tmp_path):
    t0 = time.perf_counter()
    full = fem.assemble(fem.build_mesh({"shape": "bar", "nx": 6, "ny": 3, "spacing": 0.1, "elevation": 0.0}),
                        fem.Material())
    prob = pl.Problem(rom.reduce(full, fem.modal_basis(full, 8)), dy.Environment(),
                      dy.Task(w_perp=1e-3, w_u=1e-4))
    mcfg = mpc.MPCConfig(horizon=16, control_points=3, noise_scale=20.0)
    cfg = pl.RbboConfig(n_iter=8, n_init=3, C=2, T_max=32, ladder_rungs=3, hyperopt_every=3, seed=11)

    def content(path):
        return [r.content() for r in pl.load_dataset(path)]

    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    pl.rbbo(prob, cfg, mcfg, path=a)
    pl.rbbo(prob, cfg, mcfg, path=b)
    same = content(a) == content(b)
    lines = a.read_text().splitlines(keepends=True)
    resumed_ok = True
    for cut in (1, 4, 7):
        c = tmp_path / f"cut{cut}.jsonl"
        c.write_text("".join(lines[:cut]))
        pl.rbbo(prob, cfg, mcfg, path=c, resume=True)
        resumed_ok &= content(c) == content(a)
    ok = same and resumed_ok and len(lines) >= 11
    verdict(10, ok, f"{len(lines)} records, repeat identical: {same}, resume identical: {resumed_ok}",
            time.perf_counter() - t0, 300.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
