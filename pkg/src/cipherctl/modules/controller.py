"""
Plaintext data-driven controller: closed-form regularized LQR over Hankel data, rank-1
inverse updates and the closed-loop run that collects online samples.
"""

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np
import scipy.linalg

from ..utils.errors import DefinitenessError, DimensionError, RankError
from ..utils.settings import CtlConfig
from .behavioral import HankelSet, Window, is_persistently_exciting, online_column
from .plant import SystemModel, Trajectory, collect_offline, step

logger = logging.getLogger(__name__)

STEADY_WINDOW = 10


# --- weights ------------------------------------------------------------------------


def output_weights(cfg: CtlConfig, p: int) -> np.ndarray:
    """Diagonal of blockdiag(lambda_y I_pM, Q)."""
    return np.concatenate([np.full(p * cfg.M, cfg.lambda_y), cfg.Q(p)])


def input_weights(cfg: CtlConfig, m: int) -> np.ndarray:
    """Diagonal of blockdiag(lambda_u I_mM, R)."""
    return np.concatenate([np.full(m * cfg.M, cfg.lambda_u), cfg.R(m)])


# --- closed-form controller -----------------------------------------------------------


def build_M(hset: HankelSet, cfg: CtlConfig) -> np.ndarray:
    """Yf'Q Yf + Uf'R Uf + lambda_y Yp'Yp + lambda_u Up'Up + lambda_g I."""
    if hset.M != cfg.M or hset.N != cfg.N:
        raise DimensionError(f"data horizons ({hset.M}, {hset.N}) do not match config ({cfg.M}, {cfg.N})")
    wy = output_weights(cfg, hset.p)
    wu = input_weights(cfg, hset.m)
    M = hset.HY.T @ (wy[:, None] * hset.HY) + hset.HU.T @ (wu[:, None] * hset.HU)
    M[np.diag_indices_from(M)] += cfg.lambda_g
    return 0.5 * (M + M.T)


def invert_spd(M: np.ndarray) -> np.ndarray:
    factor = scipy.linalg.cho_factor(M)
    inv = scipy.linalg.cho_solve(factor, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def rhs(hset: HankelSet, w: Window, r, cfg: CtlConfig) -> np.ndarray:
    """Yf'Q r + lambda_y Yp'y_bar + lambda_u Up'u_bar."""
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size != hset.p * cfg.N:
        raise DimensionError(f"reference of length {r.size}, expected {hset.p * cfg.N}")
    if w.u_bar.size != hset.m * cfg.M or w.y_bar.size != hset.p * cfg.M:
        raise DimensionError("window does not match the past horizon")
    return hset.Yf.T @ (cfg.Q(hset.p) * r) + cfg.lambda_y * (hset.Yp.T @ w.y_bar) + cfg.lambda_u * (hset.Up.T @ w.u_bar)


def solve_g(M_inv: np.ndarray, hset: HankelSet, w: Window, r, cfg: CtlConfig) -> np.ndarray:
    if M_inv.shape != (hset.S, hset.S):
        raise DimensionError(f"inverse of shape {M_inv.shape} for {hset.S} columns")
    return M_inv @ rhs(hset, w, r, cfg)


def control_from_g(hset: HankelSet, g) -> np.ndarray:
    """First input of the predicted future input sequence."""
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.size != hset.S:
        raise DimensionError(f"g has length {g.size}, data has {hset.S} columns")
    return hset.Uf[: hset.m] @ g


def objective(g, hset: HankelSet, w: Window, r, cfg: CtlConfig) -> float:
    """Regularized tracking cost minimized by solve_g."""
    g = np.asarray(g, dtype=np.float64).ravel()
    r = np.asarray(r, dtype=np.float64).ravel()
    ey = hset.Yf @ g - r
    uf = hset.Uf @ g
    eyp = hset.Yp @ g - w.y_bar
    eup = hset.Up @ g - w.u_bar
    return float(
        ey @ (cfg.Q(hset.p) * ey)
        + uf @ (cfg.R(hset.m) * uf)
        + cfg.lambda_y * eyp @ eyp
        + cfg.lambda_u * eup @ eup
        + cfg.lambda_g * g @ g
    )


@dataclass(frozen=True)
class Gains:
    """u_t = A_r r + A_y y_bar + A_u u_bar."""

    A_r: np.ndarray
    A_y: np.ndarray
    A_u: np.ndarray

    def control(self, r, w: Window) -> np.ndarray:
        return self.A_r @ np.asarray(r, dtype=np.float64).ravel() + self.A_y @ w.y_bar + self.A_u @ w.u_bar


def offline_gains(hset: HankelSet, M_inv: np.ndarray, cfg: CtlConfig) -> Gains:
    first = hset.Uf[: hset.m] @ M_inv
    return Gains(
        A_r=first @ hset.Yf.T * cfg.Q(hset.p)[None, :],
        A_y=cfg.lambda_y * first @ hset.Yp.T,
        A_u=cfg.lambda_u * first @ hset.Up.T,
    )


# --- rank-1 inverse maintenance ----------------------------------------------------------


@dataclass(frozen=True)
class SchurPieces:
    mu: float
    m_vec: np.ndarray
    s: float
    v: np.ndarray


def schur_mu_m(h_u, h_y, hset: HankelSet, cfg: CtlConfig) -> tuple[float, np.ndarray]:
    """Bordering entries of M for a new column (h_u, h_y): the corner mu and the row m."""
    h_u = np.asarray(h_u, dtype=np.float64).ravel()
    h_y = np.asarray(h_y, dtype=np.float64).ravel()
    if h_u.size != hset.HU.shape[0] or h_y.size != hset.HY.shape[0]:
        raise DimensionError(f"column sizes {h_u.size}, {h_y.size} do not match {hset.HU.shape[0]}, {hset.HY.shape[0]}")
    qy = output_weights(cfg, hset.p) * h_y
    qu = input_weights(cfg, hset.m) * h_u
    mu = float(qy @ h_y + qu @ h_u + cfg.lambda_g)
    return mu, hset.HY.T @ qy + hset.HU.T @ qu


def schur_pieces(h_u, h_y, hset: HankelSet, M_inv: np.ndarray, cfg: CtlConfig) -> SchurPieces:
    mu, m_vec = schur_mu_m(h_u, h_y, hset, cfg)
    v = M_inv @ m_vec
    return SchurPieces(mu, m_vec, float(mu - m_vec @ v), v)


def schur_update_inverse(M_inv: np.ndarray, m_vec, s_inv: float, step: int | None = None) -> np.ndarray:
    """
    Inverse of [[M, m'], [m, mu]] from M^-1, the bordering row m and 1/s.

    Raises:
        DefinitenessError: s_inv <= 0
    """
    if not s_inv > 0:
        raise DefinitenessError(np.inf if s_inv == 0 else 1.0 / s_inv, step)
    m_vec = np.asarray(m_vec, dtype=np.float64).ravel()
    S = M_inv.shape[0]
    if m_vec.size != S:
        raise DimensionError(f"bordering row of length {m_vec.size} for a {S}x{S} inverse")
    v = M_inv @ m_vec
    out = np.empty((S + 1, S + 1))
    out[:S, :S] = M_inv + s_inv * np.outer(v, v)
    out[:S, S] = -s_inv * v
    out[S, :S] = -s_inv * v
    out[S, S] = s_inv
    return out


def schur_downdate_inverse(Mp_inv: np.ndarray) -> np.ndarray:
    """
    Inverse of the trailing principal block after removing the first row and column.

    With Mp_inv = [[l1, L2], [L2', L3]] the result is L3 - L2'L2 / l1.
    """
    l1 = float(Mp_inv[0, 0])
    if abs(l1) <= np.finfo(np.float64).eps * max(1.0, float(np.abs(Mp_inv).max())):
        raise RankError("leading entry of the inverse vanishes; the first column cannot be removed")
    L2 = Mp_inv[0, 1:]
    return Mp_inv[1:, 1:] - np.outer(L2, L2) / l1


def refine_inverse(Y: np.ndarray, M: np.ndarray) -> np.ndarray:
    """One Newton step Y - Y(MY - I) on an approximate inverse."""
    E = M @ Y - np.eye(M.shape[0])
    norm = float(np.linalg.norm(E, 2))
    if norm >= 1.0:
        raise RankError(f"refinement does not contract: |MY - I| = {norm:.3g}")
    return Y - Y @ E


# --- closed-loop run -------------------------------------------------------------------------


class Phase(str, Enum):
    EXCITE = "excite"
    CONCAT = "concat"
    COLLECT = "collect"
    STATIC = "static"


def phase_at(t: int, cfg: CtlConfig) -> Phase:
    if t < cfg.M:
        return Phase.EXCITE
    if t < cfg.L:
        return Phase.CONCAT
    if t < cfg.L + cfg.T_bar:
        return Phase.COLLECT
    return Phase.STATIC


def reference_batch(reference, t: int, N: int) -> np.ndarray:
    """
    Reference over the prediction horizon starting at t.

    A 1-D reference is a constant setpoint; a 2-D one is a schedule (one row per step, the
    last row held past its end).
    """
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim == 1:
        return np.tile(ref, N)
    idx = np.minimum(np.arange(t, t + N), len(ref) - 1)
    return ref[idx].ravel()


def setpoint_at(reference, t: int) -> np.ndarray:
    ref = np.asarray(reference, dtype=np.float64)
    return ref if ref.ndim == 1 else ref[min(t, len(ref) - 1)]


@dataclass(frozen=True)
class Streams:
    """Independent random streams: offline data, online excitation, plant noise, client, keys."""

    offline: np.random.Generator
    excitation: np.random.Generator
    plant: np.random.Generator
    client: np.random.Generator
    keys: np.random.Generator


def make_streams(seed: int) -> Streams:
    children = np.random.SeedSequence(seed).spawn(5)
    return Streams(*(np.random.default_rng(c) for c in children))


@dataclass(frozen=True)
class OfflineData:
    traj: Trajectory
    hset: HankelSet
    M_inv: np.ndarray


def prepare_offline(model: SystemModel, cfg: CtlConfig, rng: np.random.Generator) -> OfflineData:
    """Collect the offline trajectory, build its Hankel data and invert M."""
    traj = collect_offline(model, cfg.T, rng, horizons=(cfg.M, cfg.N))
    if not is_persistently_exciting(traj.u, cfg.L + model.n):
        logger.warning("offline input is not persistently exciting of order %d", cfg.L + model.n)
    hset = HankelSet.from_trajectory(traj, cfg.M, cfg.N)
    return OfflineData(traj, hset, invert_spd(build_M(hset, cfg)))


class Policy(Protocol):
    """Computes u_t from the online history; may collect new columns on the way."""

    def control(self, t: int, phase: Phase, u_hist: np.ndarray, y_hist: np.ndarray, r: np.ndarray) -> np.ndarray: ...

    @property
    def columns(self) -> int: ...

    @property
    def last_s(self) -> float: ...


class PlainController:
    """Reference implementation of the online loop on plaintext data."""

    def __init__(self, offline: OfflineData, cfg: CtlConfig, use_gains: bool = False):
        self.cfg = cfg
        self.hset = offline.hset
        self.M_inv = offline.M_inv
        self.gains = offline_gains(offline.hset, offline.M_inv, cfg) if use_gains else None
        self.last_s = float("nan")
        self.pieces: list[SchurPieces] = []

    @property
    def columns(self) -> int:
        return self.hset.S

    def collect(self, t: int, u_hist: np.ndarray, y_hist: np.ndarray):
        """Append the column of samples t-L..t-1 and update the inverse."""
        h_u, h_y = online_column(u_hist[:t], y_hist[:t], self.cfg.L)
        pieces = schur_pieces(h_u, h_y, self.hset, self.M_inv, self.cfg)
        if pieces.s <= 0:
            raise DefinitenessError(pieces.s, t)
        self.M_inv = schur_update_inverse(self.M_inv, pieces.m_vec, 1.0 / pieces.s, t)
        self.hset = self.hset.append_column(h_u, h_y)
        self.last_s = pieces.s
        self.pieces.append(pieces)
        logger.debug("t=%d: collected column %d, s=%.6g", t, self.hset.S, pieces.s)

    def control(self, t: int, phase: Phase, u_hist: np.ndarray, y_hist: np.ndarray, r: np.ndarray) -> np.ndarray:
        if phase is Phase.COLLECT:
            self.collect(t, u_hist, y_hist)
        w = Window(u_hist[t - self.cfg.M : t].ravel(), y_hist[t - self.cfg.M : t].ravel(), self.hset.m, self.hset.p)
        if self.gains is not None:
            return self.gains.control(r, w)
        return control_from_g(self.hset, solve_g(self.M_inv, self.hset, w, r, self.cfg))


@dataclass
class RunLog:
    """Per-step record of a closed-loop run."""

    u: np.ndarray
    y: np.ndarray
    r: np.ndarray
    S: np.ndarray
    s: np.ndarray
    phases: list[str] = field(default_factory=list)
    M: int = 0

    @property
    def steps(self) -> int:
        return len(self.u)

    @property
    def tracking_err(self) -> np.ndarray:
        return np.max(np.abs(self.y - self.r), axis=1)

    def summary(self) -> dict:
        err = self.tracking_err[self.M :]
        tail = err[-STEADY_WINDOW:] if err.size else err
        return {
            "steps": self.steps,
            "max_tracking_err": float(err.max()) if err.size else 0.0,
            "mean_tracking_err": float(err.mean()) if err.size else 0.0,
            "steady_state_err": float(tail.mean()) if tail.size else 0.0,
            "final_columns": int(self.S[-1]) if self.steps else 0,
        }

    def to_csv(self, path: Path):
        m, p = self.u.shape[1], self.y.shape[1]
        header = ["t"] + [f"u_{i}" for i in range(m)] + [f"y_{i}" for i in range(p)] + [f"r_{i}" for i in range(p)] + ["tracking_err", "S", "s_t"]
        err = self.tracking_err
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for t in range(self.steps):
                row = [t] + [repr(float(v)) for v in self.u[t]] + [repr(float(v)) for v in self.y[t]] + [repr(float(v)) for v in self.r[t]]
                s = "" if np.isnan(self.s[t]) else repr(float(self.s[t]))
                writer.writerow(row + [repr(float(err[t])), int(self.S[t]), s])


def closed_loop(model: SystemModel, cfg: CtlConfig, reference, streams: Streams, steps: int, policy: Policy) -> RunLog:
    """
    Drive the plant for steps samples: random inputs for t < M, then policy inputs.

    The plant consumes its noise stream identically whatever the policy, so two policies run
    with equal seeds see the same disturbance and noise realizations.
    """
    m, p = model.m, model.p
    u_hist = np.zeros((steps, m))
    y_hist = np.zeros((steps, p))
    r_hist = np.zeros((steps, p))
    S_hist = np.zeros(steps, dtype=np.int64)
    s_hist = np.full(steps, np.nan)
    phases = []
    x = model.x0_online if model.x0_online is not None else np.zeros(model.n)
    amplitude = model.excitation_amplitude
    current = None
    for t in range(steps):
        phase = phase_at(t, cfg)
        if phase is not current:
            logger.info("t=%d: entering %s phase", t, phase.value)
            current = phase
        r = reference_batch(reference, t, cfg.N)
        if phase is Phase.EXCITE:
            u = streams.excitation.uniform(-amplitude, amplitude, m)
        else:
            u = np.asarray(policy.control(t, phase, u_hist, y_hist, r), dtype=np.float64)
            if phase is Phase.COLLECT:
                s_hist[t] = policy.last_s
        x, y = step(model, x, u, streams.plant)
        u_hist[t], y_hist[t] = u, y
        r_hist[t] = setpoint_at(reference, t)
        S_hist[t] = policy.columns
        phases.append(phase.value)
    return RunLog(u_hist, y_hist, r_hist, S_hist, s_hist, phases, cfg.M)


def run_plain_loop(
    model: SystemModel,
    cfg: CtlConfig,
    reference,
    seed: int,
    steps: int,
    offline: OfflineData | None = None,
    use_gains: bool = False,
) -> RunLog:
    """
    Plaintext closed loop: excitation, trajectory concatenation, online collection of T_bar
    columns with rank-1 inverse updates, then static control.

    With use_gains the concatenation and static phases apply the precomputed offline gains
    (only meaningful when T_bar = 0).
    """
    streams = make_streams(seed)
    offline = offline or prepare_offline(model, cfg, streams.offline)
    if use_gains and cfg.T_bar:
        raise DimensionError("offline gains are only valid without online collection (T_bar = 0)")
    policy = PlainController(offline, cfg, use_gains)
    log = closed_loop(model, cfg, reference, streams, steps, policy)
    logger.info("plaintext run finished: %s", log.summary())
    return log
