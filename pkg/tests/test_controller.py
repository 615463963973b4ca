import numpy as np
import pytest

from cipherctl.modules.behavioral import HankelSet, Window, online_column
from cipherctl.modules.controller import (
    Phase,
    build_M,
    control_from_g,
    invert_spd,
    make_streams,
    objective,
    offline_gains,
    phase_at,
    prepare_offline,
    reference_batch,
    refine_inverse,
    rhs,
    run_plain_loop,
    schur_downdate_inverse,
    schur_pieces,
    schur_update_inverse,
    solve_g,
)
from cipherctl.modules.plant import Trajectory
from cipherctl.utils.errors import DefinitenessError, DimensionError, RankError
from cipherctl.utils.settings import CtlConfig


@pytest.fixture
def small():
    rng = np.random.default_rng(4)
    traj = Trajectory(rng.normal(size=(14, 2)), rng.normal(size=(14, 2)))
    cfg = CtlConfig(M=2, N=2, T=14, T_bar=0)
    hset = HankelSet.from_trajectory(traj, cfg.M, cfg.N)
    w = Window(rng.normal(size=4), rng.normal(size=4), 2, 2)
    r = rng.normal(size=4)
    return hset, w, r, cfg


class TestClosedForm:
    def test_M_is_spd(self, small):
        hset, _, _, cfg = small
        M = build_M(hset, cfg)
        assert M.shape == (hset.S, hset.S)
        np.testing.assert_allclose(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= cfg.lambda_g - 1e-9

    def test_solution_minimizes_objective(self, small):
        hset, w, r, cfg = small
        g = solve_g(invert_spd(build_M(hset, cfg)), hset, w, r, cfg)
        best = objective(g, hset, w, r, cfg)
        rng = np.random.default_rng(0)
        for delta in 1e-3 * rng.normal(size=(1000, g.size)):
            assert objective(g + delta, hset, w, r, cfg) > best

    def test_normal_equations(self, small):
        hset, w, r, cfg = small
        M = build_M(hset, cfg)
        g = solve_g(invert_spd(M), hset, w, r, cfg)
        np.testing.assert_allclose(M @ g, rhs(hset, w, r, cfg), rtol=1e-9, atol=1e-9)

    def test_gains_match_closed_form(self, small):
        hset, w, r, cfg = small
        M_inv = invert_spd(build_M(hset, cfg))
        u = control_from_g(hset, solve_g(M_inv, hset, w, r, cfg))
        np.testing.assert_allclose(offline_gains(hset, M_inv, cfg).control(r, w), u, rtol=1e-9, atol=1e-9)

    def test_reference_length_checked(self, small):
        hset, w, _, cfg = small
        with pytest.raises(DimensionError):
            rhs(hset, w, np.zeros(3), cfg)


class TestRankOneUpdates:
    def test_update_matches_direct_inverse(self, small):
        hset, _, _, cfg = small
        M_inv = invert_spd(build_M(hset, cfg))
        rng = np.random.default_rng(9)
        h_u, h_y = rng.normal(size=8), rng.normal(size=8)
        pieces = schur_pieces(h_u, h_y, hset, M_inv, cfg)
        assert pieces.s >= cfg.lambda_g
        updated = schur_update_inverse(M_inv, pieces.m_vec, 1.0 / pieces.s)
        direct = invert_spd(build_M(hset.append_column(h_u, h_y), cfg))
        np.testing.assert_allclose(updated, direct, rtol=1e-8, atol=1e-10)

    def test_downdate_inverts_update(self, small):
        hset, _, _, cfg = small
        M = build_M(hset, cfg)
        full_inv = invert_spd(M)
        trailing = invert_spd(M[1:, 1:])
        np.testing.assert_allclose(schur_downdate_inverse(full_inv), trailing, rtol=1e-8, atol=1e-10)

    def test_non_positive_schur_complement(self, small):
        hset, _, _, cfg = small
        M_inv = invert_spd(build_M(hset, cfg))
        with pytest.raises(DefinitenessError):
            schur_update_inverse(M_inv, np.zeros(hset.S), -1.0, step=7)

    def test_chained_updates_over_the_online_columns(self, quiet_plant):
        cfg = CtlConfig()
        log = run_plain_loop(quiet_plant, cfg, quiet_plant.setpoint, seed=0, steps=cfg.L + cfg.T_bar)
        offline = prepare_offline(quiet_plant, cfg, make_streams(0).offline)
        hset, M_inv = offline.hset, offline.M_inv
        assert hset.S == cfg.S
        for t in range(cfg.L, cfg.L + cfg.T_bar):
            h_u, h_y = online_column(log.u[:t], log.y[:t], cfg.L)
            pieces = schur_pieces(h_u, h_y, hset, M_inv, cfg)
            M_inv = schur_update_inverse(M_inv, pieces.m_vec, 1.0 / pieces.s, t)
            hset = hset.append_column(h_u, h_y)
        assert hset.S == cfg.S + cfg.T_bar == 40
        M = build_M(hset, cfg)
        identity = np.eye(hset.S)
        assert np.linalg.norm(M @ invert_spd(M) - identity) < 1e-7
        assert np.linalg.norm(M @ M_inv - identity) < 1e-7

    def test_refinement_contracts(self, small):
        hset, _, _, cfg = small
        M = build_M(hset, cfg)
        exact = invert_spd(M)
        rough = exact * (1 + 1e-4)
        refined = refine_inverse(rough, M)
        assert np.abs(refined - exact).max() < np.abs(rough - exact).max()

    def test_refinement_rejects_a_bad_start(self, small):
        hset, _, _, cfg = small
        M = build_M(hset, cfg)
        with pytest.raises(RankError):
            refine_inverse(np.eye(hset.S), M)


class TestSchedule:
    def test_phases(self):
        cfg = CtlConfig(M=2, N=3, T=20, T_bar=4)
        phases = [phase_at(t, cfg) for t in range(11)]
        assert phases[:2] == [Phase.EXCITE] * 2
        assert phases[2:5] == [Phase.CONCAT] * 3
        assert phases[5:9] == [Phase.COLLECT] * 4
        assert phases[9:] == [Phase.STATIC] * 2

    def test_reference_batch(self):
        np.testing.assert_array_equal(reference_batch([1.0, 2.0], 0, 3), [1, 2, 1, 2, 1, 2])
        schedule = np.array([[0.0], [1.0], [2.0]])
        np.testing.assert_array_equal(reference_batch(schedule, 1, 3), [1.0, 2.0, 2.0])

    def test_streams_are_reproducible(self):
        a, b = make_streams(3), make_streams(3)
        assert a.plant.normal() == b.plant.normal()
        assert a.offline.normal() != a.excitation.normal()


class TestClosedLoop:
    def test_plain_run_tracks_the_setpoint(self, quiet_plant):
        cfg = CtlConfig()
        log = run_plain_loop(quiet_plant, cfg, quiet_plant.setpoint, seed=0, steps=45)
        summary = log.summary()
        assert log.phases[cfg.M] == "concat"
        assert log.S[-1] == cfg.S + cfg.T_bar
        assert np.all(log.s[cfg.L : cfg.L + cfg.T_bar] > 0)
        assert summary["steady_state_err"] < summary["max_tracking_err"]

    def test_gains_and_inverse_agree_without_collection(self, quiet_plant):
        cfg = CtlConfig(T_bar=0)
        a = run_plain_loop(quiet_plant, cfg, quiet_plant.setpoint, seed=1, steps=15)
        b = run_plain_loop(quiet_plant, cfg, quiet_plant.setpoint, seed=1, steps=15, use_gains=True)
        np.testing.assert_allclose(a.u, b.u, rtol=1e-7, atol=1e-7)

    def test_gains_need_a_static_controller(self, quiet_plant):
        with pytest.raises(DimensionError):
            run_plain_loop(quiet_plant, CtlConfig(), quiet_plant.setpoint, seed=0, steps=5, use_gains=True)

    def test_trajectory_csv(self, quiet_plant, tmp_path):
        cfg = CtlConfig(T_bar=2)
        log = run_plain_loop(quiet_plant, cfg, quiet_plant.setpoint, seed=0, steps=12)
        path = tmp_path / "run.csv"
        log.to_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "t,u_0,u_1,y_0,y_1,r_0,r_1,tracking_err,S,s_t"
        assert len(lines) == 13

    @pytest.mark.parametrize("lambda_g, bound", [(5.0, 0.06), (10.0, 0.12)])
    def test_steady_state_tracking(self, quiet_plant, lambda_g, bound):
        log = run_plain_loop(quiet_plant, CtlConfig(lambda_g=lambda_g), quiet_plant.setpoint, seed=0, steps=120)
        assert log.summary()["steady_state_err"] <= bound
