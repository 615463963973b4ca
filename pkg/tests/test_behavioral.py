import numpy as np
import pytest

from cipherctl.modules.behavioral import (
    OFFLINE_SOURCE,
    ONLINE_SOURCE,
    HankelSet,
    OnlineColumnBuilder,
    Window,
    append_online_column,
    build_hankel,
    hankel_from_csv,
    hankel_to_csv,
    is_persistently_exciting,
    pe_order_bound,
    roll_window,
)
from cipherctl.modules.plant import Trajectory
from cipherctl.utils.errors import DimensionError


def _trajectory(T: int, m: int = 2, p: int = 1, seed: int = 0) -> Trajectory:
    rng = np.random.default_rng(seed)
    return Trajectory(rng.normal(size=(T, m)), rng.normal(size=(T, p)))


class TestHankel:
    def test_block_structure(self):
        sig = np.arange(12.0).reshape(6, 2)
        H = build_hankel(sig, 3)
        assert H.shape == (6, 4)
        for j in range(4):
            np.testing.assert_array_equal(H[:, j], sig[j : j + 3].ravel())

    def test_scalar_signal(self):
        H = build_hankel(np.arange(5.0), 2)
        np.testing.assert_array_equal(H, [[0, 1, 2, 3], [1, 2, 3, 4]])

    def test_too_short(self):
        with pytest.raises(DimensionError):
            build_hankel(np.zeros((2, 1)), 3)

    def test_persistency_of_excitation(self):
        rng = np.random.default_rng(1)
        assert is_persistently_exciting(rng.normal(size=(30, 2)), 5)
        assert not is_persistently_exciting(np.ones((30, 2)), 2)
        assert not is_persistently_exciting(rng.normal(size=(3, 1)), 5)

    def test_pe_bound(self):
        assert pe_order_bound(m=2, M=4, N=4, n=2) == 29


class TestHankelSet:
    def test_from_trajectory(self):
        traj = _trajectory(12)
        hset = HankelSet.from_trajectory(traj, M=2, N=3)
        assert hset.S == 12 - 5 + 1
        assert (hset.m, hset.p) == (2, 1)
        assert hset.Up.shape == (4, hset.S) and hset.Uf.shape == (6, hset.S)
        assert hset.Yp.shape == (2, hset.S) and hset.Yf.shape == (3, hset.S)
        np.testing.assert_array_equal(hset.Up[:, 0], traj.u[:2].ravel())
        np.testing.assert_array_equal(hset.Yf[:, -1], traj.y[-3:].ravel())
        assert hset.segment(OFFLINE_SOURCE)[0].stop == hset.S

    def test_append_keeps_existing_columns(self):
        hset = HankelSet.from_trajectory(_trajectory(10), M=2, N=2)
        online = _trajectory(6, seed=3)
        grown = append_online_column(hset, online.u, online.y, t=5)
        assert grown.S == hset.S + 1
        np.testing.assert_array_equal(grown.HU[:, : hset.S], hset.HU)
        np.testing.assert_array_equal(grown.HU[:, -1], online.u[2:6].ravel())
        np.testing.assert_array_equal(grown.HY[:, -1], online.y[2:6].ravel())
        again = append_online_column(grown, online.u, online.y, t=4)
        assert again.segment(ONLINE_SOURCE)[0].start == hset.S
        assert again.segment(ONLINE_SOURCE)[0].stop == hset.S + 2

    def test_append_needs_a_full_column(self):
        hset = HankelSet.from_trajectory(_trajectory(10), M=2, N=2)
        with pytest.raises(DimensionError, match="t >= 3"):
            append_online_column(hset, np.zeros((3, 2)), np.zeros((3, 1)), t=2)

    def test_append_size_mismatch(self):
        hset = HankelSet.from_trajectory(_trajectory(10), M=2, N=2)
        with pytest.raises(DimensionError):
            hset.append_column(np.zeros(7), np.zeros(4))

    def test_csv_round_trip(self, tmp_path):
        hset = HankelSet.from_trajectory(_trajectory(9), M=1, N=2)
        path = tmp_path / "hu.csv"
        hankel_to_csv(hset.HU, path)
        np.testing.assert_array_equal(hankel_from_csv(path), hset.HU)


class TestOnlineColumnBuilder:
    def test_column_after_L_samples(self):
        builder = OnlineColumnBuilder(m=2, p=1, M=2, N=1)
        traj = _trajectory(4)
        for t in range(2):
            builder.push(traj.u[t], traj.y[t])
        assert not builder.ready
        with pytest.raises(DimensionError):
            builder.column()
        for t in range(2, 4):
            builder.push(traj.u[t], traj.y[t])
        assert builder.ready and len(builder) == 4
        hu, hy = builder.column()
        np.testing.assert_array_equal(hu, traj.u[1:4].ravel())
        np.testing.assert_array_equal(hy, traj.y[1:4].ravel())

    def test_window_and_trajectory(self):
        builder = OnlineColumnBuilder(m=2, p=1, M=2, N=1)
        traj = _trajectory(3)
        for u, y in zip(traj.u, traj.y):
            builder.push(u, y)
        w = builder.window()
        np.testing.assert_array_equal(w.u_bar, traj.u[1:].ravel())
        np.testing.assert_array_equal(builder.trajectory().y, traj.y)

    def test_sample_size_checked(self):
        builder = OnlineColumnBuilder(m=2, p=1, M=2, N=1)
        with pytest.raises(DimensionError):
            builder.push(np.zeros(3), np.zeros(1))


class TestWindow:
    def test_roll(self):
        w = Window(np.arange(4.0), np.arange(2.0), m=2, p=1)
        rolled = roll_window(w, [9.0, 8.0], [7.0])
        np.testing.assert_array_equal(rolled.u_bar, [2.0, 3.0, 9.0, 8.0])
        np.testing.assert_array_equal(rolled.y_bar, [1.0, 7.0])
        assert rolled.M == 2

    def test_from_trajectory(self):
        traj = _trajectory(5)
        w = Window.from_trajectory(traj, M=2, t=3)
        np.testing.assert_array_equal(w.u_bar, traj.u[1:3].ravel())
        with pytest.raises(DimensionError):
            Window.from_trajectory(traj, M=4, t=3)

    def test_zeros(self):
        w = Window.zeros(2, 3, 4)
        assert w.u_bar.shape == (8,) and w.y_bar.shape == (12,)
