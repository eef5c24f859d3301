"""State-space models, synthetic trajectory generation, and dataset containers.

The toolkit works with discrete-time models

    x_t = f(x_{t-1}) + e_t,   e_t ~ N(0, Q),   x_t in R^m
    y_t = h(x_t)     + v_t,   v_t ~ N(0, R),   y_t in R^n

Linear models carry their F/H matrices explicitly; the chaotic Lorenz system
is discretized with a truncated Taylor-series transition matrix.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

Array = np.ndarray
SeedLike = Union[int, np.random.Generator]

#: Taylor order used for Lorenz data generation; converged to <1e-6 at dtau=0.02.
DEFAULT_TAYLOR_ORDER = 5

_PSD_TOL = 1e-8


class InvalidModelError(ValueError):
    """A state-space model violates its contract (e.g. non-PSD noise covariance)."""


class DimensionError(ValueError):
    """An operation received arrays of incompatible or unsupported dimensions."""


def db_to_lin(x_db: float) -> float:
    return float(10.0 ** (x_db / 10.0))


def lin_to_db(x: float) -> float:
    return float(10.0 * np.log10(x))


@dataclass(frozen=True)
class NoiseConfig:
    """Scalar noise levels for canonical covariances Q = q2*I_m, R = r2*I_n."""

    q2: float
    r2: float

    def __post_init__(self):
        if self.q2 < 0 or self.r2 < 0:
            raise InvalidModelError(f"noise variances must be >= 0, got q2={self.q2}, r2={self.r2}")

    @property
    def nu(self) -> float:
        """Process-to-observation noise ratio q2/r2."""
        return self.q2 / self.r2

    @classmethod
    def from_db(cls, inv_r2_db: float, nu_db: float = 0.0) -> "NoiseConfig":
        """Build from 1/r2 in dB and the ratio nu = q2/r2 in dB."""
        r2 = 1.0 / db_to_lin(inv_r2_db)
        return cls(q2=db_to_lin(nu_db) * r2, r2=r2)


@dataclass(frozen=True)
class LorenzConfig:
    """Discretization of the Lorenz system: Taylor order J and sampling interval dtau."""

    J: int = DEFAULT_TAYLOR_ORDER
    dtau: float = 0.02

    def __post_init__(self):
        if self.J < 0:
            raise InvalidModelError(f"Taylor order must be >= 0, got {self.J}")
        if self.dtau <= 0:
            raise InvalidModelError(f"sampling interval must be > 0, got {self.dtau}")


@dataclass
class StateSpaceModel:
    """Dynamics f, observation h, and noise covariances of one model instance.

    ``F``/``H`` are set when the respective map is linear, ``lorenz`` when the
    dynamics come from the Taylor-discretized Lorenz system; downstream code
    uses these tags to pick analytic Jacobians and differentiable rollouts.
    """

    f: Callable[[Array], Array]
    h: Callable[[Array], Array]
    Q: Array
    R: Array
    m: int
    n: int
    f_jac: Optional[Callable[[Array], Array]] = None
    h_jac: Optional[Callable[[Array], Array]] = None
    F: Optional[Array] = None
    H: Optional[Array] = None
    lorenz: Optional[LorenzConfig] = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.Q.shape != (self.m, self.m):
            raise InvalidModelError(f"Q must be {self.m}x{self.m}, got {self.Q.shape}")
        if self.R.shape != (self.n, self.n):
            raise InvalidModelError(f"R must be {self.n}x{self.n}, got {self.R.shape}")
        _check_psd(self.Q, "Q")
        _check_psd(self.R, "R")

    def with_noise(self, Q: Array, R: Array) -> "StateSpaceModel":
        """Copy of this model with replaced noise covariances."""
        return dataclasses.replace(self, Q=np.asarray(Q, float), R=np.asarray(R, float))

    def with_observation(self, H: Array) -> "StateSpaceModel":
        """Copy of this model with a replaced *linear* observation matrix."""
        H = np.asarray(H, dtype=float)
        if H.shape != (self.n, self.m):
            raise DimensionError(f"H must be {self.n}x{self.m}, got {H.shape}")
        return dataclasses.replace(
            self, h=lambda x, _H=H: _H @ x, h_jac=lambda x, _H=H: _H, H=H
        )


@dataclass
class Trajectory:
    """One labeled rollout: states x_0..x_T and observations y_1..y_T."""

    states: Array       # (T+1, m)
    observations: Array  # (T, n)
    times: Optional[Array] = None  # (T+1,), sample times when meaningful

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.states.shape[0] != self.observations.shape[0] + 1:
            raise DimensionError(
                f"states must have T+1 entries and observations T: "
                f"got {self.states.shape[0]} and {self.observations.shape[0]}"
            )

    @property
    def T(self) -> int:
        return self.observations.shape[0]


def _check_psd(C: Array, name: str) -> None:
    if not np.allclose(C, C.T, atol=1e-12):
        raise InvalidModelError(f"{name} must be symmetric")
    eigmin = float(np.linalg.eigvalsh(C).min()) if C.size else 0.0
    scale = max(1.0, float(np.abs(C).max())) if C.size else 1.0
    if eigmin < -_PSD_TOL * scale:
        raise InvalidModelError(f"{name} is not positive semidefinite (min eigenvalue {eigmin:g})")


def _noise_factor(C: Array) -> Optional[Array]:
    """Lower-triangular-ish factor L with L L^T = C, or None for zero covariance."""
    if not np.any(C):
        return None
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        # PSD but singular: factor through the eigendecomposition.
        w, V = np.linalg.eigh(C)
        if w.min() < -_PSD_TOL * max(1.0, float(w.max())):
            raise InvalidModelError("noise covariance is not positive semidefinite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


def _as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_trajectory(model: StateSpaceModel, x0: Array, T: int, seed: SeedLike) -> Trajectory:
    """Roll the model forward T steps from x0 with seeded Gaussian noise.

    Deterministic given the seed: noise is drawn as one (T, m) block for the
    process and one (T, n) block for the observations, in that order.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x0 = np.asarray(x0, dtype=float).reshape(model.m)
    rng = _as_rng(seed)

    Lq = _noise_factor(model.Q)
    Lr = _noise_factor(model.R)
    e = rng.standard_normal((T, model.m)) @ Lq.T if Lq is not None else np.zeros((T, model.m))
    v = rng.standard_normal((T, model.n)) @ Lr.T if Lr is not None else np.zeros((T, model.n))

    states = np.empty((T + 1, model.m))
    observations = np.empty((T, model.n))
    states[0] = x0
    for t in range(1, T + 1):
        states[t] = model.f(states[t - 1]) + e[t - 1]
        observations[t - 1] = model.h(states[t]) + v[t - 1]
    return Trajectory(states=states, observations=observations)


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------

def canonical_F(m: int, rho: float = 0.95) -> Array:
    """Companion-form transition matrix with eigenvalues rho * (m-th roots of unity)."""
    F = np.zeros((m, m))
    if m == 1:
        F[0, 0] = rho
        return F
    F[1:, :-1] = np.eye(m - 1)
    F[0, -1] = rho**m
    return F


def linear_model(
    F: Array,
    H: Array,
    q2: float = 1.0,
    r2: float = 1.0,
    Q: Optional[Array] = None,
    R: Optional[Array] = None,
) -> StateSpaceModel:
    """Linear-Gaussian model x_t = F x_{t-1} + e_t, y_t = H x_t + v_t."""
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    m = F.shape[0]
    n = H.shape[0]
    if F.shape != (m, m) or H.shape != (n, m):
        raise DimensionError(f"incompatible F {F.shape} / H {H.shape}")
    if Q is None:
        Q = q2 * np.eye(m)
    if R is None:
        R = r2 * np.eye(n)
    return StateSpaceModel(
        f=lambda x: F @ x,
        h=lambda x: H @ x,
        Q=Q,
        R=R,
        m=m,
        n=n,
        f_jac=lambda x: F,
        h_jac=lambda x: H,
        F=F,
        H=H,
    )


def canonical_linear_model(m: int, q2: float = 1.0, r2: float = 1.0, rho: float = 0.95) -> StateSpaceModel:
    """Canonical m x m linear model: companion F, identity H."""
    return linear_model(canonical_F(m, rho), np.eye(m), q2=q2, r2=r2)


def rotate_observation(H: Array, alpha_deg: float) -> Array:
    """Left-multiply H by a planar rotation of alpha degrees in the first two coordinates."""
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if n < 2:
        raise DimensionError(f"rotation needs at least two output coordinates, got {n}")
    a = np.deg2rad(alpha_deg)
    Ra = np.eye(n)
    Ra[0, 0] = np.cos(a)
    Ra[0, 1] = -np.sin(a)
    Ra[1, 0] = np.sin(a)
    Ra[1, 1] = np.cos(a)
    return Ra @ H


# ---------------------------------------------------------------------------
# Lorenz system
# ---------------------------------------------------------------------------

def lorenz_A(x: Array) -> Array:
    """State-dependent coefficient matrix of the Lorenz ODE dx/dtau = A(x) x."""
    x1 = float(np.asarray(x).reshape(-1)[0])
    return np.array(
        [
            [-10.0, 10.0, 0.0],
            [28.0, -1.0, -x1],
            [0.0, x1, -8.0 / 3.0],
        ]
    )


def lorenz_F(x: Array, cfg: LorenzConfig) -> Array:
    """Discrete transition matrix: J-th order Taylor series of expm(A(x) * dtau)."""
    Adt = lorenz_A(x) * cfg.dtau
    F = np.eye(3)
    term = np.eye(3)
    for j in range(1, cfg.J + 1):
        term = term @ Adt / j
        F = F + term
    return F


# d lorenz_A / d x1 is constant.
_LORENZ_DA = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def lorenz_F_dx1(x: Array, cfg: LorenzConfig) -> Array:
    """Derivative of the Taylor transition matrix with respect to x1."""
    Adt = lorenz_A(x) * cfg.dtau
    Cdt = _LORENZ_DA * cfg.dtau
    # Powers of Adt up to J-1.
    powers = [np.eye(3)]
    for _ in range(1, cfg.J):
        powers.append(powers[-1] @ Adt)
    dF = np.zeros((3, 3))
    fact = 1.0
    for j in range(1, cfg.J + 1):
        fact *= j
        s = np.zeros((3, 3))
        for k in range(j):
            s += powers[k] @ Cdt @ powers[j - 1 - k]
        dF += s / fact
    return dF


def lorenz_f_jac(x: Array, cfg: LorenzConfig) -> Array:
    """Analytic Jacobian of the step map x -> lorenz_F(x) @ x."""
    x = np.asarray(x, dtype=float).reshape(3)
    J = lorenz_F(x, cfg).copy()
    J[:, 0] += lorenz_F_dx1(x, cfg) @ x
    return J


def lorenz_model(
    cfg: LorenzConfig,
    q2: float = 0.0,
    r2: float = 1.0,
    H: Optional[Array] = None,
) -> StateSpaceModel:
    """Taylor-discretized Lorenz dynamics with a linear observation map (default identity)."""
    if H is None:
        H = np.eye(3)
    H = np.asarray(H, dtype=float)
    return StateSpaceModel(
        f=lambda x: lorenz_F(x, cfg) @ x,
        h=lambda x: H @ x,
        Q=q2 * np.eye(3),
        R=r2 * np.eye(H.shape[0]),
        m=3,
        n=H.shape[0],
        f_jac=lambda x: lorenz_f_jac(x, cfg),
        h_jac=lambda x: H,
        H=H,
        lorenz=cfg,
    )


def lorenz_initial_states(
    N: int,
    seed: SeedLike,
    cfg: Optional[LorenzConfig] = None,
    burn_range: tuple[float, float] = (4.0, 40.0),
) -> Array:
    """Sample N states on the Lorenz attractor by integrating perturbed starts.

    Each sample starts at (1,1,1) plus a small Gaussian kick and is integrated
    noiselessly for a random burn-in duration, which decorrelates the samples.
    """
    cfg = cfg or LorenzConfig()
    rng = _as_rng(seed)
    out = np.empty((N, 3))
    lo = int(burn_range[0] / cfg.dtau)
    hi = int(burn_range[1] / cfg.dtau)
    for i in range(N):
        x = np.array([1.0, 1.0, 1.0]) + 0.1 * rng.standard_normal(3)
        for _ in range(int(rng.integers(lo, hi + 1))):
            x = lorenz_F(x, cfg) @ x
        out[i] = x
    return out


# ---------------------------------------------------------------------------
# Jacobians by finite differences
# ---------------------------------------------------------------------------

def numerical_jacobian(fn: Callable[[Array], Array], x: Array, eps: Optional[float] = None) -> Array:
    """Central finite-difference Jacobian of fn at x."""
    x = np.asarray(x, dtype=float)
    if eps is None:
        eps = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    f0 = np.asarray(fn(x), dtype=float)
    J = np.empty((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        dx = np.zeros_like(x)
        dx[i] = eps
        J[:, i] = (np.asarray(fn(x + dx)) - np.asarray(fn(x - dx))) / (2.0 * eps)
    return J


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

_DATASET_FORMAT_VERSION = 1


@dataclass
class TrajectoryDataset:
    """N equally long labeled trajectories stored as dense arrays.

    File format (stable, version-tagged): an .npz archive with
      version       () int
      states        (N, T+1, m) float64, row-major
      observations  (N, T, n)   float64, row-major
      times         (T+1,) float64, optional
    """

    states: Array        # (N, T+1, m)
    observations: Array  # (N, T, n)
    times: Optional[Array] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.states.ndim != 3 or self.observations.ndim != 3:
            raise DimensionError("states and observations must be 3-D (N, time, dim)")
        if self.states.shape[0] != self.observations.shape[0]:
            raise DimensionError("states and observations disagree on N")
        if self.states.shape[1] != self.observations.shape[1] + 1:
            raise DimensionError("states must have T+1 samples and observations T")

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @property
    def m(self) -> int:
        return self.states.shape[2]

    @property
    def n(self) -> int:
        return self.observations.shape[2]

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.observations[i], times=self.times)

    def subset(self, idx) -> "TrajectoryDataset":
        return TrajectoryDataset(self.states[idx], self.observations[idx], times=self.times)

    def save(self, path) -> None:
        payload = {
            "version": np.array(_DATASET_FORMAT_VERSION),
            "states": self.states,
            "observations": self.observations,
        }
        if self.times is not None:
            payload["times"] = self.times
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with np.load(path) as z:
            version = int(z["version"])
            if version != _DATASET_FORMAT_VERSION:
                raise IOError(f"unsupported dataset format version {version} in {path}")
            times = z["times"] if "times" in z.files else None
            return cls(states=z["states"], observations=z["observations"], times=times)


def simulate_dataset(model: StateSpaceModel, x0s: Array, T: int, seed: int) -> TrajectoryDataset:
    """Simulate one trajectory per row of x0s with independent child seeds."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    N = x0s.shape[0]
    children = np.random.SeedSequence(seed).spawn(N)
    states = np.empty((N, T + 1, model.m))
    observations = np.empty((N, T, model.n))
    for i in range(N):
        traj = simulate_trajectory(model, x0s[i], T, np.random.default_rng(children[i]))
        states[i] = traj.states
        observations[i] = traj.observations
    return TrajectoryDataset(states=states, observations=observations)


def generate_decimated_dataset(
    cfg: LorenzConfig,
    ratio: int,
    T: int,
    r2: float,
    N: int,
    seed: int,
    x0: Optional[Array] = None,
) -> TrajectoryDataset:
    """Noiseless fine-step Lorenz rollouts sub-sampled down to spacing cfg.dtau.

    The continuous flow is approximated at the fine step dtau/ratio with the
    Taylor transition map and every ratio-th state is retained, so consecutive
    samples are cfg.dtau apart; identity observations get N(0, r2 I) noise.
    When x0 is omitted, initial states are drawn on the attractor.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    fine = LorenzConfig(J=cfg.J, dtau=cfg.dtau / ratio)
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0s = lorenz_initial_states(N, rng, cfg)
    else:
        x0s = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, 3)[:N], (N, 3)).copy()

    states = np.empty((N, T + 1, 3))
    observations = np.empty((N, T, 3))
    for i in range(N):
        x = x0s[i].copy()
        states[i, 0] = x
        for t in range(1, T + 1):
            for _ in range(ratio):
                x = lorenz_F(x, fine) @ x
            states[i, t] = x
        observations[i] = states[i, 1:] + np.sqrt(r2) * rng.standard_normal((T, 3))
    times = cfg.dtau * np.arange(T + 1)
    return TrajectoryDataset(states=states, observations=observations, times=times)
