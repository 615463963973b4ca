"""
Discrete-time LTI plant simulation with process/measurement noise and known disturbances.
"""

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..utils.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

PRESET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SystemModel:
    """
    x_{t+1} = A x_t + B u_t + E d_t + w_t,  y_t = C x_t + v_t.

    d_t is the known disturbance, sampled uniformly inside d_bounds (one [low, high] row per
    channel). Presets also carry initial conditions and the offline excitation settings.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    E: np.ndarray
    d_bounds: np.ndarray
    w_cov: np.ndarray
    v_cov: np.ndarray
    name: str = "custom"
    sampling_period: float = 420.0
    x0_offline: np.ndarray | None = None
    x0_online: np.ndarray | None = None
    excitation_amplitude: float = 1.0
    output_band: tuple[float, float] = (-np.inf, np.inf)
    setpoint: np.ndarray | None = None
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n or self.C.shape[1] != n or self.E.shape[0] != n:
            raise DimensionError("A, B, C and E disagree on the state dimension")
        if self.d_bounds.shape != (self.E.shape[1], 2):
            raise DimensionError(f"disturbance bounds {self.d_bounds.shape} do not match {self.E.shape[1]} channels")
        for name, cov, dim in (("w_cov", self.w_cov, n), ("v_cov", self.v_cov, self.p)):
            if cov.shape != (dim, dim):
                raise DimensionError(f"{name} must be {dim}x{dim}, got {cov.shape}")
            if not np.allclose(cov, cov.T):
                raise ConfigError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ConfigError(f"{name} is not positive semidefinite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def disturbance_mid(self) -> np.ndarray:
        return self.d_bounds.mean(axis=1)

    def noiseless(self) -> "SystemModel":
        """Copy with zero noise covariances and the disturbance pinned to the middle of its band."""
        mid = self.disturbance_mid()
        return replace(
            self,
            w_cov=np.zeros_like(self.w_cov),
            v_cov=np.zeros_like(self.v_cov),
            d_bounds=np.column_stack([mid, mid]),
            name=f"{self.name}-noiseless",
        )


@dataclass(frozen=True)
class Trajectory:
    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.u) != len(self.y):
            raise DimensionError(f"u has {len(self.u)} samples, y has {len(self.y)}")

    def __len__(self) -> int:
        return len(self.u)

    def to_csv(self, path: Path):
        m, p = self.u.shape[1], self.y.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t"] + [f"u_{i}" for i in range(m)] + [f"y_{i}" for i in range(p)])
            for t, (u, y) in enumerate(zip(self.u, self.y)):
                writer.writerow([t] + [repr(float(v)) for v in u] + [repr(float(v)) for v in y])

    @classmethod
    def from_csv(cls, path: Path) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = np.array([[float(v) for v in row] for row in reader])
        m = sum(1 for h in header if h.startswith("u_"))
        p = sum(1 for h in header if h.startswith("y_"))
        if rows.size == 0:
            return cls(np.zeros((0, m)), np.zeros((0, p)))
        return cls(rows[:, 1 : 1 + m], rows[:, 1 + m : 1 + m + p])


def _as_vector(x, dim: int, what: str) -> np.ndarray:
    vec = np.asarray(x, dtype=np.float64).ravel()
    if vec.size != dim:
        raise DimensionError(f"{what} has length {vec.size}, expected {dim}")
    return vec


def _gaussian(cov: np.ndarray, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    dim = cov.shape[0]
    shape = (dim,) if count is None else (count, dim)
    if not np.any(cov):
        return np.zeros(shape)
    return rng.multivariate_normal(np.zeros(dim), cov, size=count, method="eigh")


def sample_disturbance(model: SystemModel, rng: np.random.Generator) -> np.ndarray:
    low, high = model.d_bounds[:, 0], model.d_bounds[:, 1]
    return rng.uniform(low, high)


def step(model: SystemModel, state, u, rng, disturbance=None) -> tuple[np.ndarray, np.ndarray]:
    """
    Advance the plant by one sample.

    Args:
        model: Plant
        state: Current state x_t
        u: Input u_t
        rng: numpy Generator or integer seed
        disturbance: Known disturbance d_t; sampled from the model bounds when omitted

    Returns:
        (x_{t+1}, y_t)
    """
    rng = np.random.default_rng(rng)
    x = _as_vector(state, model.n, "state")
    u = _as_vector(u, model.m, "input")
    d = sample_disturbance(model, rng) if disturbance is None else _as_vector(disturbance, model.E.shape[1], "disturbance")
    w = _gaussian(model.w_cov, rng)
    v = _gaussian(model.v_cov, rng)
    y = model.C @ x + v
    return model.A @ x + model.B @ u + model.E @ d + w, y


@dataclass(frozen=True)
class NoiseRealization:
    w: np.ndarray
    v: np.ndarray
    d: np.ndarray


def sample_noise(model: SystemModel, count: int, rng: np.random.Generator) -> NoiseRealization:
    """Process noise, measurement noise and disturbances for count samples."""
    d = np.array([sample_disturbance(model, rng) for _ in range(count)]).reshape(count, model.E.shape[1])
    w = _gaussian(model.w_cov, rng, count).reshape(count, model.n)
    v = _gaussian(model.v_cov, rng, count).reshape(count, model.p)
    return NoiseRealization(w, v, d)


def simulate(model: SystemModel, x0, inputs: np.ndarray, noise: NoiseRealization) -> tuple[Trajectory, np.ndarray]:
    """Open-loop run over a fixed noise realization; returns the trajectory and final state."""
    x = _as_vector(x0, model.n, "initial state")
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1, model.m)
    ys = np.zeros((len(inputs), model.p))
    for t, u in enumerate(inputs):
        ys[t] = model.C @ x + noise.v[t]
        x = model.A @ x + model.B @ u + model.E @ noise.d[t] + noise.w[t]
    return Trajectory(inputs.copy(), ys), x


def steady_state(model: SystemModel, u, d=None) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free fixed point (x, y) for a constant input and disturbance."""
    d = model.disturbance_mid() if d is None else np.asarray(d, dtype=np.float64)
    rhs = model.B @ _as_vector(u, model.m, "input") + model.E @ d
    x = np.linalg.solve(np.eye(model.n) - model.A, rhs)
    return x, model.C @ x


def collect_offline(
    model: SystemModel,
    T: int,
    rng: np.random.Generator,
    amplitude: float | None = None,
    band: tuple[float, float] | None = None,
    horizons: tuple[int, int] | None = None,
    iterations: int = 40,
) -> Trajectory:
    """
    Random-excitation offline data whose outputs stay inside the band.

    Zero-mean uniform inputs are scaled by the largest factor in [0, 1] (found by bisection)
    for which the simulated outputs stay within band over the same noise realization.
    """
    rng = np.random.default_rng(rng)
    if horizons is not None:
        bound = (model.m + 1) * (sum(horizons) + model.n) - 1
        if T < bound:
            logger.warning("offline length %d is below the excitation bound %d", T, bound)
    if T <= 0:
        return Trajectory(np.zeros((0, model.m)), np.zeros((0, model.p)))
    amplitude = model.excitation_amplitude if amplitude is None else amplitude
    low, high = model.output_band if band is None else band
    x0 = model.x0_offline if model.x0_offline is not None else np.zeros(model.n)
    raw = rng.uniform(-1.0, 1.0, (T, model.m)) * amplitude
    noise = sample_noise(model, T, rng)

    def inside(scale: float) -> bool:
        traj, _ = simulate(model, x0, raw * scale, noise)
        return bool(np.all(traj.y >= low) and np.all(traj.y <= high))

    if inside(1.0):
        scale = 1.0
    elif not inside(0.0):
        logger.warning("outputs leave the band [%g, %g] even without excitation", low, high)
        scale = 0.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if inside(mid) else (lo, mid)
        scale = lo
    logger.debug("offline excitation scale %.4f", scale)
    traj, _ = simulate(model, x0, raw * scale, noise)
    return traj


def _matrix(data, name: str, key: str) -> np.ndarray:
    try:
        return np.atleast_2d(np.array(data[key], dtype=np.float64))
    except KeyError as exc:
        raise ConfigError(f"plant preset {name!r} is missing {key!r}") from exc


def model_from_dict(name: str, data: dict) -> SystemModel:
    A = _matrix(data, name, "A")
    C = _matrix(data, name, "C")
    model = SystemModel(
        A=A,
        B=_matrix(data, name, "B"),
        C=C,
        E=np.array(data.get("E", np.zeros((A.shape[0], 0))), dtype=np.float64).reshape(A.shape[0], -1),
        d_bounds=np.array(data.get("disturbance_bounds", []), dtype=np.float64).reshape(-1, 2),
        w_cov=np.eye(A.shape[0]) * float(data.get("w_cov_scale", 0.0)),
        v_cov=np.eye(C.shape[0]) * float(data.get("v_cov_scale", 0.0)),
        name=name,
        sampling_period=float(data.get("sampling_period_s", 420.0)),
        x0_offline=np.array(data["x0_offline"], dtype=np.float64) if "x0_offline" in data else None,
        x0_online=np.array(data["x0_online"], dtype=np.float64) if "x0_online" in data else None,
        excitation_amplitude=float(data.get("excitation_amplitude", 1.0)),
        output_band=tuple(data.get("output_band", (-np.inf, np.inf))),
        setpoint=np.array(data["setpoint"], dtype=np.float64) if "setpoint" in data else None,
        units=dict(data.get("units", {})),
    )
    if model.spectral_radius >= 1.0:
        raise ConfigError(f"plant preset {name!r} is not Schur-stable (spectral radius {model.spectral_radius:.4f})")
    return model


def load_presets(path: Path | None = None) -> dict[str, dict]:
    if path is None:
        text = resources.files("cipherctl.data").joinpath("plants.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    if data.get("schema_version") != PRESET_SCHEMA_VERSION:
        raise ConfigError(f"unsupported plant preset schema version: {data.get('schema_version')}")
    return data["plants"]


def load_preset(name: str, path: Path | None = None) -> SystemModel:
    presets = load_presets(path)
    if name not in presets:
        raise ConfigError(f"unknown plant preset {name!r}; available: {', '.join(sorted(presets))}")
    return model_from_dict(name, presets[name])
