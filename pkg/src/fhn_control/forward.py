"""Semi-implicit time integration of the controlled state equation.

One step solves

    (I - dt*A) X+ = X + dt*(F(X) + B u) + noise increment,

i.e. the coupled linear operator is fully implicit (eliminating the
recovery component leaves a single symmetric positive definite Helmholtz
solve for the voltage), while the reaction, the control and the noise
are explicit.  `implicit_solve_star` is the exact weighted-inner-product
transpose of the same solve; the adjoint module builds the
discretize-then-optimize sweep out of it.

Time-quadrature conventions (fixed here, relied on by the adjoint and
control modules for exact discrete gradients):

* control-space pairings use trapezoid weights over the N+1 time nodes;
* running state costs use left-rectangle weights (dt on nodes 0..N-1),
  which is what makes the terminal adjoint value exactly -Dg0(X(T)).

Step n of the dynamics consumes the control at the left node n; the
value at node N never enters the dynamics.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dynamics import FhnParams, f_apply, i_ion
from .errors import BlowUpError, ConfigurationError, ContractViolation
from .grid import Field, Grid, StateX, grad_norm_sq, norm_h_sq, norm_l2_sq
from .noise import SpectralCovariance, WienerIncrement, increment_stream, sample_increment

BLOWUP_THRESHOLD = 1.0e6

SNAPSHOT_FORMAT = "fhn-snapshot-v1"
TRAJECTORY_CSV_FORMAT = "fhn-trajectory-csv-v1"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError(f"need at least one time step, got N={self.N}")
        if self.T <= 0:
            raise ConfigurationError(f"horizon must be positive, got T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def u_weights(self) -> np.ndarray:
        """Trapezoid weights over time nodes (control-space quadrature)."""
        w = np.full(self.N + 1, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def g_weights(self) -> np.ndarray:
        """Left-rectangle weights for the running state cost."""
        w = np.full(self.N + 1, self.dt)
        w[-1] = 0.0
        return w


@dataclass
class ControlPath:
    """Open-loop control: one L2 field per time node."""

    values: np.ndarray  # shape (N+1,) + grid.shape

    @staticmethod
    def zero(timegrid: TimeGrid, grid: Grid) -> "ControlPath":
        return ControlPath(np.zeros((timegrid.N + 1,) + grid.shape))

    def copy(self) -> "ControlPath":
        return ControlPath(self.values.copy())

    def __add__(self, other: "ControlPath") -> "ControlPath":
        return ControlPath(self.values + other.values)

    def __sub__(self, other: "ControlPath") -> "ControlPath":
        return ControlPath(self.values - other.values)

    def __mul__(self, c: float) -> "ControlPath":
        return ControlPath(c * self.values)

    __rmul__ = __mul__


def u_space_inner(grid: Grid, a: Field, b: Field) -> float:
    return float(np.sum(grid.weights() * a * b))


def u_inner(grid: Grid, timegrid: TimeGrid, u: ControlPath, v: ControlPath) -> float:
    """Discrete control-space inner product (trapezoid in time and space)."""
    if u.values.shape != v.values.shape:
        raise ContractViolation("control paths live on different time grids")
    if u.values.shape[0] != timegrid.N + 1:
        raise ContractViolation("control path does not match the time grid")
    spatial = np.tensordot(u.values * v.values, grid.weights(), axes=grid.d)
    return float(np.dot(timegrid.u_weights(), spatial))


def u_norm(grid: Grid, timegrid: TimeGrid, u: ControlPath) -> float:
    return float(np.sqrt(max(u_inner(grid, timegrid, u, u), 0.0)))


@dataclass
class ActuatorSpec:
    """Control-to-state map B u = (mask * u, 0)."""

    mask: Field

    def __post_init__(self):
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ConfigurationError("actuator mask values must lie in [0, 1]")

    @staticmethod
    def identity(grid: Grid) -> "ActuatorSpec":
        return ActuatorSpec(np.ones(grid.shape))


def actuator_apply(spec: ActuatorSpec, grid: Grid, u: Field) -> StateX:
    if u.shape != grid.shape:
        raise ContractViolation(f"control field shape {u.shape} does not match grid")
    return StateX(spec.mask * u, grid.zeros())


def actuator_adjoint(spec: ActuatorSpec, grid: Grid, gamma: float, X: StateX) -> Field:
    """B* in the weighted inner product: <B*X, u>_U = <X, Bu>_H."""
    return gamma * spec.mask * X.v


@dataclass
class Trajectory:
    """Time-indexed state plus the driving increments, kept for adjoint reuse."""

    v: np.ndarray  # (N+1,) + grid.shape
    w: np.ndarray
    dbeta1: np.ndarray  # (N,) + grid.shape
    dbeta2: np.ndarray
    control: ControlPath
    path_index: int
    seed: int

    def state(self, n: int) -> StateX:
        return StateX(self.v[n], self.w[n])

    def increment(self, n: int) -> WienerIncrement:
        return WienerIncrement(self.dbeta1[n], self.dbeta2[n])

    @property
    def num_steps(self) -> int:
        return self.dbeta1.shape[0]


@lru_cache(maxsize=None)
def _solve_coeffs(gamma: float, delta: float, dt: float) -> tuple:
    denom = 1.0 + dt * delta
    c = 1.0 + dt * dt * gamma / denom
    return denom, c


def implicit_solve(params: FhnParams, grid: Grid, dt: float, r: StateX) -> StateX:
    """Apply S = (I - dt*A)^(-1): eliminate w, one Helmholtz solve for v."""
    from .grid import helmholtz_solve

    denom, c = _solve_coeffs(params.gamma, params.delta, dt)
    v = helmholtz_solve(grid, c, dt, r.v - dt * r.w / denom)
    w = (r.w + dt * params.gamma * v) / denom
    return StateX(v, w)


def implicit_solve_star(params: FhnParams, grid: Grid, dt: float, r: StateX) -> StateX:
    """Apply S* = (I - dt*A*)^(-1), the H-adjoint of `implicit_solve`."""
    from .grid import helmholtz_solve

    denom, c = _solve_coeffs(params.gamma, params.delta, dt)
    p = helmholtz_solve(grid, c, dt, r.v + dt * r.w / denom)
    q = (r.w - dt * params.gamma * p) / denom
    return StateX(p, q)


def step(
    params: FhnParams,
    grid: Grid,
    spec: ActuatorSpec,
    X: StateX,
    u_t: Field,
    dW: WienerIncrement,
    dt: float,
) -> StateX:
    """One semi-implicit update of the controlled state equation."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    rv = X.v + dt * (-i_ion(params, X.v) + params.forcing(grid) + spec.mask * u_t) + dW.dbeta1
    rw = X.w + dW.dbeta2
    return implicit_solve(params, grid, dt, StateX(rv, rw))


def integrate(
    params: FhnParams,
    grid: Grid,
    cov: SpectralCovariance,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    x0: StateX,
    control: ControlPath,
    seed: int,
    path_index: int = 0,
) -> Trajectory:
    """Run N steps from x0; increments are retained for adjoint reuse.

    Deterministic given (seed, path_index): each step draws from its own
    counter-based stream.
    """
    if control.values.shape[0] != timegrid.N + 1:
        raise ContractViolation("control path does not match the time grid")
    if x0.v.shape != grid.shape:
        raise ContractViolation("initial state does not live on the grid")
    N = timegrid.N
    dt = timegrid.dt
    v = np.empty((N + 1,) + grid.shape)
    w = np.empty((N + 1,) + grid.shape)
    db1 = np.zeros((N,) + grid.shape)
    db2 = np.zeros((N,) + grid.shape)
    v[0], w[0] = x0.v, x0.w
    X = x0.copy()
    noisy = not cov.is_zero()
    for n in range(N):
        if noisy:
            dW = sample_increment(cov, grid, dt, increment_stream(seed, path_index, n))
            db1[n], db2[n] = dW.dbeta1, dW.dbeta2
        else:
            dW = WienerIncrement(db1[n], db2[n])
        X = step(params, grid, spec, X, control.values[n], dW, dt)
        energy = norm_h_sq(grid, params.gamma, X)
        if not np.isfinite(energy) or energy > BLOWUP_THRESHOLD**2:
            raise BlowUpError(n + 1, float(np.sqrt(max(energy, 0.0))))
        v[n + 1], w[n + 1] = X.v, X.w
    return Trajectory(v, w, db1, db2, control.copy(), path_index, seed)


def integrate_with_increments(
    params: FhnParams,
    grid: Grid,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    x0: StateX,
    control: ControlPath,
    dbeta1: np.ndarray,
    dbeta2: np.ndarray,
    seed: int = 0,
    path_index: int = 0,
) -> Trajectory:
    """Integrate under externally supplied noise increments.

    Used by coupled refinement studies, where coarse-level increments are
    sums of fine-level ones over the same Brownian path.
    """
    N, dt = timegrid.N, timegrid.dt
    if dbeta1.shape[0] != N or dbeta2.shape[0] != N:
        raise ContractViolation("increment arrays do not match the time grid")
    v = np.empty((N + 1,) + grid.shape)
    w = np.empty((N + 1,) + grid.shape)
    v[0], w[0] = x0.v, x0.w
    X = x0.copy()
    for n in range(N):
        dW = WienerIncrement(dbeta1[n], dbeta2[n])
        X = step(params, grid, spec, X, control.values[n], dW, dt)
        energy = norm_h_sq(grid, params.gamma, X)
        if not np.isfinite(energy) or energy > BLOWUP_THRESHOLD**2:
            raise BlowUpError(n + 1, float(np.sqrt(max(energy, 0.0))))
        v[n + 1], w[n + 1] = X.v, X.w
    return Trajectory(v, w, dbeta1.copy(), dbeta2.copy(), control.copy(), path_index, seed)


def max_workers() -> int:
    """Worker cap for ensemble fan-out, from FHN_CONTROL_WORKERS (default 1)."""
    try:
        return max(1, int(os.environ.get("FHN_CONTROL_WORKERS", "1")))
    except ValueError:
        return 1


def integrate_ensemble(
    params: FhnParams,
    grid: Grid,
    cov: SpectralCovariance,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    x0: StateX,
    control: ControlPath,
    seed: int,
    n_paths: int,
) -> list:
    """Independent paths under a common control; path p uses stream (seed, p, .)."""
    if n_paths < 1:
        raise ConfigurationError(f"ensemble size must be >= 1, got {n_paths}")

    def one(p):
        return integrate(params, grid, cov, spec, timegrid, x0, control, seed, p)

    workers = max_workers()
    if workers == 1 or n_paths == 1:
        return [one(p) for p in range(n_paths)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_paths)))


def energy_report(grid: Grid, timegrid: TimeGrid, gamma: float, trajs: list) -> dict:
    """Discrete analogues of the a-priori energy functionals.

    Per path: sup over time nodes of |X|_H^2, and the trapezoid
    time-quadrature of |X|_V^2; plus their ensemble averages.
    """
    sup_h = []
    int_v = []
    tw = np.full(timegrid.N + 1, timegrid.dt)
    tw[0] *= 0.5
    tw[-1] *= 0.5
    for traj in trajs:
        h_sq = np.array(
            [norm_h_sq(grid, gamma, traj.state(n)) for n in range(timegrid.N + 1)]
        )
        v_sq = np.array(
            [
                gamma * (norm_l2_sq(grid, traj.v[n]) + grad_norm_sq(grid, traj.v[n]))
                + norm_l2_sq(grid, traj.w[n])
                for n in range(timegrid.N + 1)
            ]
        )
        sup_h.append(float(np.max(h_sq)))
        int_v.append(float(np.dot(tw, v_sq)))
    return {
        "sup_h_sq": sup_h,
        "int_v_sq": int_v,
        "mean_sup_h_sq": float(np.mean(sup_h)),
        "mean_int_v_sq": float(np.mean(int_v)),
    }


def trajectory_to_csv(path: str, grid: Grid, timegrid: TimeGrid, traj: Trajectory) -> None:
    """Write (time, node-wise v, node-wise w) rows; see TRAJECTORY_CSV_FORMAT."""
    m = grid.num_nodes
    times = timegrid.times()
    header = ["time"] + [f"v{i}" for i in range(m)] + [f"w{i}" for i in range(m)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for n in range(timegrid.N + 1):
            row = [repr(float(times[n]))]
            row += [repr(float(x)) for x in traj.v[n].ravel()]
            row += [repr(float(x)) for x in traj.w[n].ravel()]
            fh.write(",".join(row) + "\n")


def save_snapshot(path: str, traj: Trajectory) -> None:
    """Compact binary trajectory snapshot for adjoint reuse."""
    np.savez_compressed(
        path,
        format=SNAPSHOT_FORMAT,
        v=traj.v,
        w=traj.w,
        dbeta1=traj.dbeta1,
        dbeta2=traj.dbeta2,
        control=traj.control.values,
        path_index=traj.path_index,
        seed=traj.seed,
    )


def load_snapshot(path: str) -> Trajectory:
    data = np.load(path)
    fmt = str(data["format"])
    if fmt != SNAPSHOT_FORMAT:
        raise ConfigurationError(f"unknown snapshot format {fmt!r}")
    return Trajectory(
        v=data["v"],
        w=data["w"],
        dbeta1=data["dbeta1"],
        dbeta2=data["dbeta2"],
        control=ControlPath(data["control"]),
        path_index=int(data["path_index"]),
        seed=int(data["seed"]),
    )
