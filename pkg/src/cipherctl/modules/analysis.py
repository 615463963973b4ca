"""
Numerical analyses of the regularized controller: distance to the minimum-norm behavioral
solution along a regularization path, and the precision profile of the Schur complement.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..utils.errors import ConfigError, DimensionError, RankError
from ..utils.numerics import pinv, rank_tolerance, split_range
from ..utils.settings import CtlConfig, Settings
from .behavioral import HankelSet, Window
from .controller import input_weights, output_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MinNormParts:
    """Range part g1, kernel part g2 and the SVD pieces of the past data D_p = [Up; Yp]."""

    g1: np.ndarray
    g2: np.ndarray
    E: np.ndarray
    sigma: np.ndarray
    F: np.ndarray
    F_perp: np.ndarray

    @property
    def g_min(self) -> np.ndarray:
        return self.g1 + self.g2


def _past(hset: HankelSet, w: Window) -> tuple[np.ndarray, np.ndarray]:
    D_p = np.vstack([hset.Up, hset.Yp])
    d = np.concatenate([w.u_bar, w.y_bar])
    if d.size != D_p.shape[0]:
        raise DimensionError(f"window of length {d.size} for {D_p.shape[0]} past rows")
    return D_p, d


def future_gram(hset: HankelSet, cfg: CtlConfig) -> np.ndarray:
    """Yf'Q Yf + Uf'R Uf (no regularization)."""
    return hset.Yf.T @ (cfg.Q(hset.p)[:, None] * hset.Yf) + hset.Uf.T @ (cfg.R(hset.m)[:, None] * hset.Uf)


def min_norm_parts(hset: HankelSet, w: Window, r, cfg: CtlConfig) -> MinNormParts:
    """
    Minimum-norm minimizer of the future cost subject to D_p g = d.

    A window outside the range of D_p is projected onto it with a warning.
    """
    D_p, d = _past(hset, w)
    E, sigma, F, F_perp = split_range(D_p)
    if sigma.size == 0:
        raise RankError("past data matrix is numerically zero")
    coeffs = E.T @ d
    residual = float(np.linalg.norm(d - E @ coeffs))
    if residual > 1e-8 * max(1.0, float(np.linalg.norm(d))):
        logger.warning("window is outside the range of the past data (residual %.3g); projecting", residual)
    g1 = F @ (coeffs / sigma)
    if F_perp.shape[1] == 0:
        return MinNormParts(g1, np.zeros_like(g1), E, sigma, F, F_perp)
    M0 = future_gram(hset, cfg)
    G = F_perp.T @ M0 @ F_perp
    target = hset.Yf.T @ (cfg.Q(hset.p) * np.asarray(r, dtype=np.float64).ravel()) - M0 @ g1
    g2 = F_perp @ (pinv(G) @ (F_perp.T @ target))
    return MinNormParts(g1, g2, E, sigma, F, F_perp)


def g_min_reference(hset: HankelSet, w: Window, r, cfg: CtlConfig) -> np.ndarray:
    return min_norm_parts(hset, w, r, cfg).g_min


def kernel_directions(parts: MinNormParts, hset: HankelSet, cfg: CtlConfig, seeds: np.ndarray) -> np.ndarray:
    """
    Directions g3 = F_perp (I - G^+ G) s that keep a solution optimal.

    Args:
        seeds: Array (count, dim F_perp) of free coefficients s

    Returns:
        Array (count, S) of directions; empty rows when the optimal set is a single point
    """
    F_perp = parts.F_perp
    seeds = np.atleast_2d(seeds)
    if F_perp.shape[1] == 0:
        return np.zeros((seeds.shape[0], F_perp.shape[0]))
    G = F_perp.T @ future_gram(hset, cfg) @ F_perp
    proj = np.eye(G.shape[0]) - pinv(G) @ G
    return (F_perp @ proj @ seeds.T).T


def g_bar(parts: MinNormParts, hset: HankelSet, w: Window, r, cfg: CtlConfig) -> np.ndarray:
    """Limit of g* as the past-window penalty grows with lambda_g held fixed."""
    _, d = _past(hset, w)
    Mh = future_gram(hset, cfg) + cfg.lambda_g * np.eye(hset.S)
    Mi = scipy.linalg.inv(Mh, check_finite=False)
    F = parts.F
    MiF = Mi @ F
    core = scipy.linalg.inv(F.T @ MiF)
    yq = hset.Yf.T @ (cfg.Q(hset.p) * np.asarray(r, dtype=np.float64).ravel())
    return MiF @ core @ ((parts.E.T @ d) / parts.sigma) + (Mi - MiF @ core @ MiF.T) @ yq


def g_star(hset: HankelSet, w: Window, r, cfg: CtlConfig) -> np.ndarray:
    """
    Regularized optimum as a stacked least-squares problem.

    Equivalent to solving M g = rhs, without squaring the condition number of M.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    sq = np.sqrt
    A = np.vstack(
        [
            sq(cfg.Q(hset.p))[:, None] * hset.Yf,
            sq(cfg.R(hset.m))[:, None] * hset.Uf,
            sq(cfg.lambda_y) * hset.Yp,
            sq(cfg.lambda_u) * hset.Up,
            sq(cfg.lambda_g) * np.eye(hset.S),
        ]
    )
    b = np.concatenate([sq(cfg.Q(hset.p)) * r, np.zeros(hset.m * cfg.N), sq(cfg.lambda_y) * w.y_bar, sq(cfg.lambda_u) * w.u_bar, np.zeros(hset.S)])
    g, *_ = scipy.linalg.lstsq(A, b, check_finite=False)
    return g


def default_path(k_max: int) -> list[tuple[float, float]]:
    return [(10.0**-k, 10.0**k) for k in range(k_max + 1)]


def _check_path(path: list[tuple[float, float]]):
    if not path:
        raise ConfigError("closeness_path: empty regularization path")
    for (g0, l0), (g1, l1) in zip(path, path[1:]):
        if not (g1 < g0 and l1 > l0):
            raise ConfigError("closeness_path: lambda_g must decrease and lambda increase along the path")
    if any(g <= 0 or lam <= 0 for g, lam in path):
        raise ConfigError("closeness_path: regularization weights must be positive")


@dataclass(frozen=True)
class ClosenessReport:
    g_min: np.ndarray
    g_bar: np.ndarray
    g_star: np.ndarray
    err_star_min: float
    err_bar_min: float
    sweep: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for _, _, e in self.sweep])


def closeness_sweep(hset: HankelSet, w: Window, r, cfg: CtlConfig, path: list[tuple[float, float]], threads: int | None = None) -> ClosenessReport:
    """
    Distance between the regularized optimum and the minimum-norm solution along a path of
    (lambda_g, lambda) with lambda_y = lambda_u = lambda.
    """
    _check_path(path)
    parts = min_norm_parts(hset, w, r, cfg)
    g_min = parts.g_min

    def point(weights: tuple[float, float]) -> tuple[np.ndarray, float]:
        lam_g, lam = weights
        c = cfg.model_copy(update={"lambda_g": lam_g, "lambda_y": lam, "lambda_u": lam})
        g = g_star(hset, w, r, c)
        return g, float(np.linalg.norm(g_min - g))

    with ThreadPoolExecutor(max_workers=threads or Settings().get_threads()) as pool:
        results = list(pool.map(point, path))
    sweep = [(lg, lam, err) for (lg, lam), (_, err) in zip(path, results)]
    for lg, lam, err in sweep:
        logger.debug("lambda_g=%.1e lambda=%.1e |g_min - g*|=%.6g", lg, lam, err)
    last_g = results[-1][0]
    bar = g_bar(parts, hset, w, r, cfg.model_copy(update={"lambda_g": path[-1][0]}))
    return ClosenessReport(
        g_min=g_min,
        g_bar=bar,
        g_star=last_g,
        err_star_min=results[-1][1],
        err_bar_min=float(np.linalg.norm(bar - g_min)),
        sweep=sweep,
    )


# --- precision of the Schur complement -------------------------------------------------------


@dataclass(frozen=True)
class PrecisionPoint:
    lambda_g: float
    s: float
    f: float
    bits: float


def _weighted_data(hset: HankelSet, h_u, h_y, cfg: CtlConfig) -> tuple[np.ndarray, np.ndarray]:
    """A = P^(1/2) [HU; HY] and b = P^(1/2) [h_u; h_y]."""
    root = np.sqrt(np.concatenate([input_weights(cfg, hset.m), output_weights(cfg, hset.p)]))
    H = np.vstack([hset.HU, hset.HY])
    h = np.concatenate([np.asarray(h_u, dtype=np.float64).ravel(), np.asarray(h_y, dtype=np.float64).ravel()])
    if h.size != H.shape[0]:
        raise DimensionError(f"new column of length {h.size} for {H.shape[0]} rows")
    return root[:, None] * H, root * h


def schur_ratio(A: np.ndarray, b: np.ndarray, lambda_g: float) -> float:
    """
    s / lambda_g = 1 + b'(AA' + lambda_g I)^-1 b.

    Evaluated on the SVD of A so that no cancellation between mu and m M^-1 m' occurs.
    """
    U, sv, _ = scipy.linalg.svd(A, full_matrices=True)
    c = U.T @ b
    sig2 = np.zeros(U.shape[0])
    sig2[: sv.size] = sv**2
    return float(1.0 + np.sum(c**2 / (sig2 + lambda_g)))


def schur_ratio_limit(A: np.ndarray, b: np.ndarray) -> float:
    """lambda_g -> 0 limit 1 + b'(A')^+ A^+ b; finite only when b lies in the range of A."""
    U, sv, _ = scipy.linalg.svd(A, full_matrices=False)
    keep = sv > rank_tolerance(sv, A.shape)
    c = U[:, keep].T @ b
    return float(1.0 + np.sum(c**2 / sv[keep] ** 2))


def bit_cancellation(mu: float, s: float) -> float:
    """Leading bits lost when s is formed as mu - m M^-1 m'."""
    return float(np.log2(mu / s))


def schur_precision_profile(hset: HankelSet, h_u, h_y, cfg: CtlConfig, grid) -> list[PrecisionPoint]:
    """f(lambda_g) = s / lambda_g for a new column over a grid of lambda_g values."""
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ConfigError("precision_grid: empty lambda_g grid")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ConfigError("precision_grid: values must be positive and ascending")
    A, b = _weighted_data(hset, h_u, h_y, cfg)
    points = []
    for lam in grid:
        f = schur_ratio(A, b, lam)
        s = f * lam
        mu = float(b @ b + lam)
        points.append(PrecisionPoint(float(lam), s, f, bit_cancellation(mu, s)))
    return points
