"""
Block-Hankel data matrices, persistency of excitation and online column appends.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..utils.errors import DimensionError
from ..utils.numerics import numerical_rank
from .plant import Trajectory

logger = logging.getLogger(__name__)

OFFLINE_SOURCE = "offline"
ONLINE_SOURCE = "online"


def build_hankel(signal, L: int) -> np.ndarray:
    """
    Depth-L block-Hankel matrix of a signal.

    Args:
        signal: Array of shape (T, b) (or (T,) for scalar signals)
        L: Number of block rows

    Returns:
        Matrix of shape (b*L, T-L+1) whose block (i, j) is signal[i+j]
    """
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig[:, None]
    T, b = sig.shape
    if L < 1 or T < L:
        raise DimensionError(f"signal of length {T} is too short for depth {L}")
    cols = T - L + 1
    windows = np.lib.stride_tricks.sliding_window_view(sig, (L, b))[:, 0]
    return windows.reshape(cols, L * b).T.copy()


def is_persistently_exciting(signal, L: int) -> bool:
    """Full row rank of the depth-L Hankel matrix (SVD rank with the max-dim*eps*sigma_max cut-off)."""
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig[:, None]
    if len(sig) < L:
        return False
    H = build_hankel(sig, L)
    return numerical_rank(H) == H.shape[0]


def pe_order_bound(m: int, M: int, N: int, n: int) -> int:
    """Minimum offline length for an input persistently exciting of order M+N+n."""
    return (m + 1) * (M + N + n) - 1


@dataclass(frozen=True)
class Source:
    name: str
    start: int
    stop: int


@dataclass(frozen=True)
class HankelSet:
    """
    Stacked input/output Hankel matrices with column provenance.

    HU is Up over Uf and HY is Yp over Yf. Columns from different trajectories are kept in
    separate source segments; block-Hankel structure holds inside each segment only.
    """

    HU: np.ndarray
    HY: np.ndarray
    M: int
    N: int
    sources: tuple[Source, ...] = field(default_factory=tuple)

    def __post_init__(self):
        L = self.M + self.N
        if self.HU.shape[0] % L or self.HY.shape[0] % L:
            raise DimensionError(f"row counts {self.HU.shape[0]}, {self.HY.shape[0]} are not multiples of M+N={L}")
        if self.HU.shape[1] != self.HY.shape[1]:
            raise DimensionError("HU and HY disagree on the column count")

    @property
    def m(self) -> int:
        return self.HU.shape[0] // (self.M + self.N)

    @property
    def p(self) -> int:
        return self.HY.shape[0] // (self.M + self.N)

    @property
    def S(self) -> int:
        return self.HU.shape[1]

    @property
    def Up(self) -> np.ndarray:
        return self.HU[: self.m * self.M]

    @property
    def Uf(self) -> np.ndarray:
        return self.HU[self.m * self.M :]

    @property
    def Yp(self) -> np.ndarray:
        return self.HY[: self.p * self.M]

    @property
    def Yf(self) -> np.ndarray:
        return self.HY[self.p * self.M :]

    @classmethod
    def from_trajectory(cls, traj: Trajectory, M: int, N: int, name: str = OFFLINE_SOURCE) -> "HankelSet":
        hset = split_past_future(build_hankel(traj.u, M + N), build_hankel(traj.y, M + N), M, N)
        return cls(hset.HU, hset.HY, M, N, (Source(name, 0, hset.S),))

    def append_column(self, hu: np.ndarray, hy: np.ndarray, source: str = ONLINE_SOURCE) -> "HankelSet":
        """New set with one more column; the existing columns are copied untouched."""
        hu = np.asarray(hu, dtype=np.float64).ravel()
        hy = np.asarray(hy, dtype=np.float64).ravel()
        if hu.size != self.HU.shape[0] or hy.size != self.HY.shape[0]:
            raise DimensionError(f"column sizes {hu.size}, {hy.size} do not match {self.HU.shape[0]}, {self.HY.shape[0]}")
        sources = list(self.sources)
        if sources and sources[-1].name == source and sources[-1].stop == self.S:
            sources[-1] = Source(source, sources[-1].start, self.S + 1)
        else:
            sources.append(Source(source, self.S, self.S + 1))
        return HankelSet(np.column_stack([self.HU, hu]), np.column_stack([self.HY, hy]), self.M, self.N, tuple(sources))

    def segment(self, name: str) -> list[Source]:
        return [s for s in self.sources if s.name == name]


def split_past_future(HU: np.ndarray, HY: np.ndarray, M: int, N: int) -> HankelSet:
    """Wrap stacked Hankel matrices; Up/Uf and Yp/Yf are the top mM / bottom mN rows."""
    L = M + N
    if HU.shape[0] % L or HY.shape[0] % L:
        raise DimensionError(f"Hankel row counts {HU.shape[0]}, {HY.shape[0]} are not multiples of M+N={L}")
    return HankelSet(np.asarray(HU, dtype=np.float64), np.asarray(HY, dtype=np.float64), M, N, (Source(OFFLINE_SOURCE, 0, HU.shape[1]),))


def online_column(u_buf, y_buf, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Hankel column made of the last L samples of the online buffers."""
    u_buf = np.asarray(u_buf, dtype=np.float64)
    y_buf = np.asarray(y_buf, dtype=np.float64)
    if len(u_buf) < L or len(y_buf) < L:
        raise DimensionError(f"need {L} online samples, have {min(len(u_buf), len(y_buf))}")
    return u_buf[-L:].ravel(), y_buf[-L:].ravel()


def append_online_column(hset: HankelSet, u_buf, y_buf, t: int) -> HankelSet:
    """
    Append the Hankel column ending at online sample t.

    Args:
        hset: Current data matrices
        u_buf: Online inputs u_0..u_t (at least)
        y_buf: Online outputs y_0..y_t (at least)
        t: Index of the newest sample in the column

    Returns:
        HankelSet with S+1 columns
    """
    L = hset.M + hset.N
    if t < L - 1:
        raise DimensionError(f"first online column needs t >= {L - 1}, got t={t}")
    hu, hy = online_column(np.asarray(u_buf)[: t + 1], np.asarray(y_buf)[: t + 1], L)
    logger.debug("appending online column ending at t=%d (S=%d)", t, hset.S + 1)
    return hset.append_column(hu, hy, ONLINE_SOURCE)


class OnlineColumnBuilder:
    """Buffers the online trajectory; a column is available once M+N samples have arrived."""

    def __init__(self, m: int, p: int, M: int, N: int):
        self.m, self.p = m, p
        self.M, self.N = M, N
        self._u: list[np.ndarray] = []
        self._y: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._u)

    @property
    def L(self) -> int:
        return self.M + self.N

    def push(self, u_t, y_t):
        u_t = np.asarray(u_t, dtype=np.float64).ravel()
        y_t = np.asarray(y_t, dtype=np.float64).ravel()
        if u_t.size != self.m or y_t.size != self.p:
            raise DimensionError(f"sample sizes {u_t.size}, {y_t.size} do not match {self.m}, {self.p}")
        self._u.append(u_t)
        self._y.append(y_t)

    @property
    def ready(self) -> bool:
        return len(self) >= self.L

    def column(self) -> tuple[np.ndarray, np.ndarray]:
        """Column of the last M+N samples."""
        if not self.ready:
            raise DimensionError(f"need {self.L} online samples, have {len(self)}")
        return online_column(np.array(self._u), np.array(self._y), self.L)

    def window(self) -> "Window":
        if len(self) < self.M:
            raise DimensionError(f"need {self.M} samples for a window, have {len(self)}")
        return Window(np.concatenate(self._u[-self.M :]), np.concatenate(self._y[-self.M :]), self.m, self.p)

    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self._u).reshape(-1, self.m), np.array(self._y).reshape(-1, self.p))


@dataclass(frozen=True)
class Window:
    """The last M inputs and outputs, oldest first."""

    u_bar: np.ndarray
    y_bar: np.ndarray
    m: int
    p: int

    @property
    def M(self) -> int:
        return self.u_bar.size // self.m

    @classmethod
    def zeros(cls, m: int, p: int, M: int) -> "Window":
        return cls(np.zeros(m * M), np.zeros(p * M), m, p)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, M: int, t: int | None = None) -> "Window":
        """Window of samples t-M..t-1 (default: the last M samples)."""
        t = len(traj) if t is None else t
        if t < M:
            raise DimensionError(f"need {M} samples before t={t}")
        return cls(traj.u[t - M : t].ravel().copy(), traj.y[t - M : t].ravel().copy(), traj.u.shape[1], traj.y.shape[1])


def roll_window(w: Window, u_t, y_t) -> Window:
    u_t = np.asarray(u_t, dtype=np.float64).ravel()
    y_t = np.asarray(y_t, dtype=np.float64).ravel()
    if u_t.size != w.m or y_t.size != w.p:
        raise DimensionError(f"sample sizes {u_t.size}, {y_t.size} do not match window blocks {w.m}, {w.p}")
    return Window(np.concatenate([w.u_bar[w.m :], u_t]), np.concatenate([w.y_bar[w.p :], y_t]), w.m, w.p)


def hankel_to_csv(matrix: np.ndarray, path: Path):
    """Row-major dump with a '# rows,cols' shape header."""
    rows, cols = matrix.shape
    np.savetxt(path, matrix, delimiter=",", header=f"{rows},{cols}", comments="# ", fmt="%.17g")


def hankel_from_csv(path: Path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        rows, cols = (int(v) for v in f.readline().lstrip("# ").split(","))
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols))
    return data.reshape(rows, cols)
