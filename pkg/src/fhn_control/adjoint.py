"""Linearized (variational) and dual backward sweeps, plus the duality gap.

The backward sweep is the exact transpose of the forward semi-implicit
step (discretize-then-optimize).  With the quadrature conventions of the
forward module, the multiplier recursion is

    lam_N = Dg0(X_N)
    lam_n = dt*Dg(X_n) + (I + dt*DF*(X_n)) S* lam_{n+1},   n = N-1 .. 0,

and the reported dual path is p_n = -lam_n, so the terminal condition
p(T) = -Dg0(X(T)) holds exactly and the control-space gradient assembled
from this path is the exact gradient of the discrete cost functional.

In stochastic mode adaptedness is restored by least-squares projection:
at each backward step the transported value S* lam_{n+1} is replaced by
its regression onto state features over the ensemble, and the per-path
regression residual serves as the martingale-integrand estimate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import FhnParams, i_ion_prime
from .errors import ConfigurationError, ContractViolation
from .forward import (
    ActuatorSpec,
    ControlPath,
    TimeGrid,
    Trajectory,
    actuator_adjoint,
    implicit_solve,
    implicit_solve_star,
)
from .grid import Grid, StateX, eigenmode_matrix, inner_h


@dataclass
class AdjointPath:
    """Dual state per time node; kappa is the per-step martingale estimate
    (None in deterministic mode, where it vanishes identically)."""

    p_v: np.ndarray  # (N+1,) + grid.shape
    p_w: np.ndarray
    kappa_v: np.ndarray | None = None  # (N,) + grid.shape
    kappa_w: np.ndarray | None = None

    def state(self, n: int) -> StateX:
        return StateX(self.p_v[n], self.p_w[n])


@dataclass
class VariationPath:
    """Solution of the linearized state equation; starts from zero."""

    z_v: np.ndarray
    z_w: np.ndarray

    def state(self, n: int) -> StateX:
        return StateX(self.z_v[n], self.z_w[n])


def solve_variational(
    params: FhnParams,
    grid: Grid,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    traj: Trajectory,
    direction: ControlPath,
) -> VariationPath:
    """Forward sweep of the linearization along the frozen trajectory.

    This is the exact derivative of the forward step map: the reaction
    Jacobian is evaluated at the pre-step state, matching the explicit
    treatment of the reaction in the forward scheme.
    """
    if direction.values.shape[0] != timegrid.N + 1:
        raise ContractViolation("direction does not match the time grid")
    N, dt = timegrid.N, timegrid.dt
    z_v = np.zeros((N + 1,) + grid.shape)
    z_w = np.zeros((N + 1,) + grid.shape)
    Z = StateX.zero(grid)
    for n in range(N):
        rv = Z.v + dt * (-i_ion_prime(params, traj.v[n]) * Z.v + spec.mask * direction.values[n])
        rw = Z.w.copy()
        Z = implicit_solve(params, grid, dt, StateX(rv, rw))
        if not np.all(np.isfinite(Z.v)):
            raise FloatingPointError(f"variational sweep blew up at step {n + 1}")
        z_v[n + 1], z_w[n + 1] = Z.v, Z.w
    return VariationPath(z_v, z_w)


def solve_adjoint_deterministic(
    params: FhnParams,
    grid: Grid,
    timegrid: TimeGrid,
    traj: Trajectory,
    cost,
) -> AdjointPath:
    """Backward transpose sweep along one trajectory (kappa = 0).

    Meant for noise-free runs; applying it to a single noisy path is an
    anticipating approximation and is the caller's responsibility.
    """
    N, dt = timegrid.N, timegrid.dt
    gw = timegrid.g_weights()
    p_v = np.zeros((N + 1,) + grid.shape)
    p_w = np.zeros((N + 1,) + grid.shape)
    lam = cost.dg0(traj.state(N))
    p_v[N], p_w[N] = -lam.v, -lam.w
    for n in range(N - 1, -1, -1):
        y = implicit_solve_star(params, grid, dt, lam)
        src = cost.dg(traj.state(n), n)
        lam = StateX(
            gw[n] * src.v + y.v + dt * (-i_ion_prime(params, traj.v[n]) * y.v),
            gw[n] * src.w + y.w,
        )
        p_v[n], p_w[n] = -lam.v, -lam.w
    return AdjointPath(p_v, p_w)


def mean_adjoint(paths: list) -> AdjointPath:
    """Ensemble average of adjoint paths (S* is linear, so averaging the
    nodal values commutes with the control-signal assembly)."""
    p_v = np.mean([ap.p_v for ap in paths], axis=0)
    p_w = np.mean([ap.p_w for ap in paths], axis=0)
    return AdjointPath(p_v, p_w)


def control_signal(
    params: FhnParams,
    grid: Grid,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    adj: AdjointPath,
) -> ControlPath:
    """Adjoint-to-control signal q with exact-gradient weights.

    q_n = (dt / w_n) B* S* p_{n+1} for n < N and q_N = 0, where w_n are
    the control-space trapezoid weights.  The discrete cost gradient is
    alpha*u - q, and the optimality fixed point is u = (dh)^{-1}(q).
    """
    N, dt = timegrid.N, timegrid.dt
    uw = timegrid.u_weights()
    values = np.zeros((N + 1,) + grid.shape)
    for n in range(N):
        transported = implicit_solve_star(
            params, grid, dt, StateX(adj.p_v[n + 1], adj.p_w[n + 1])
        )
        values[n] = (dt / uw[n]) * actuator_adjoint(spec, grid, params.gamma, transported)
    return ControlPath(values)


def _features(grid: Grid, basis_size: int, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Regression design matrix: constant plus leading mode coefficients
    of both state components.  v, w have shape (M,) + grid.shape."""
    M = v.shape[0]
    n_modes = (basis_size - 1) // 2
    cols = [np.ones(M)]
    if n_modes > 0:
        E = eigenmode_matrix(grid, n_modes)
        wts = grid.weights().ravel()
        cols.append((v.reshape(M, -1) * wts) @ E)
        cols.append((w.reshape(M, -1) * wts) @ E)
    return np.column_stack(cols)


def _regress(
    phi: np.ndarray, targets: np.ndarray, ridge: float, warn: bool = True
) -> np.ndarray:
    """Least-squares fit of targets (M, k) on features (M, F); returns the
    fitted values.  Falls back to ridge on rank deficiency."""
    M, F = phi.shape
    if M == 1:
        # a single sample is fitted exactly (constant column present)
        return targets.copy()
    coef, _, rank, _ = np.linalg.lstsq(phi, targets, rcond=None)
    if rank < F:
        if warn:
            warnings.warn(
                f"regression basis degraded (rank {rank} < {F}); using ridge fallback",
                RuntimeWarning,
            )
        gram = phi.T @ phi + ridge * np.eye(F)
        coef = np.linalg.solve(gram, phi.T @ targets)
    return phi @ coef


def solve_adjoint_regression(
    params: FhnParams,
    grid: Grid,
    timegrid: TimeGrid,
    trajs: list,
    cost,
    basis_size: int = 9,
    ridge: float = 1.0e-8,
    store_kappa: bool = False,
) -> tuple:
    """Regression Monte Carlo backward sweep over an ensemble.

    Returns (per-path AdjointPath list, kappa energy per step), where the
    kappa energy is the ensemble mean of |residual|_H^2 and the residual
    is the gap between the transported dual value and its conditional-
    expectation fit.  Full per-path residuals are stored only on request.
    """
    M = len(trajs)
    if M < 1:
        raise ConfigurationError("regression adjoint needs at least one path")
    if M < 10 * basis_size and M > 1:
        warnings.warn(
            f"ensemble of {M} paths is small for {basis_size} features; "
            "conditional expectations may be noisy",
            RuntimeWarning,
        )
    N, dt = timegrid.N, timegrid.dt
    gw = timegrid.g_weights()
    shape = (M,) + grid.shape

    p_v = np.zeros((M, N + 1) + grid.shape)
    p_w = np.zeros((M, N + 1) + grid.shape)
    kap_v = np.zeros((M, N) + grid.shape) if store_kappa else None
    kap_w = np.zeros((M, N) + grid.shape) if store_kappa else None
    kappa_energy = np.zeros(N)

    V = np.stack([t.v for t in trajs])  # (M, N+1) + shape
    W = np.stack([t.w for t in trajs])

    lam_v = np.empty(shape)
    lam_w = np.empty(shape)
    for m in range(M):
        term = cost.dg0(StateX(V[m, N], W[m, N]))
        lam_v[m], lam_w[m] = term.v, term.w
    p_v[:, N], p_w[:, N] = -lam_v, -lam_w

    wts = grid.weights()
    for n in range(N - 1, -1, -1):
        y = implicit_solve_star(params, grid, dt, StateX(lam_v, lam_w))
        phi = _features(grid, basis_size, V[:, n], W[:, n])
        targets = np.concatenate(
            [y.v.reshape(M, -1), y.w.reshape(M, -1)], axis=1
        )
        # at n = 0 every path shares the initial state, so the design matrix
        # is rank one by construction and the ridge fit is just the mean
        fitted = _regress(phi, targets, ridge, warn=(n > 0))
        half = grid.num_nodes
        fit_v = fitted[:, :half].reshape(shape)
        fit_w = fitted[:, half:].reshape(shape)
        res_v = y.v - fit_v
        res_w = y.w - fit_w
        kappa_energy[n] = float(
            np.mean(
                params.gamma * np.sum(res_v**2 * wts, axis=tuple(range(1, 1 + grid.d)))
                + np.sum(res_w**2 * wts, axis=tuple(range(1, 1 + grid.d)))
            )
        )
        if store_kappa:
            kap_v[:, n] = res_v
            kap_w[:, n] = res_w
        new_lam_v = np.empty(shape)
        new_lam_w = np.empty(shape)
        for m in range(M):
            src = cost.dg(StateX(V[m, n], W[m, n]), n)
            new_lam_v[m] = gw[n] * src.v + fit_v[m] + dt * (
                -i_ion_prime(params, V[m, n]) * fit_v[m]
            )
            new_lam_w[m] = gw[n] * src.w + fit_w[m]
        lam_v, lam_w = new_lam_v, new_lam_w
        p_v[:, n], p_w[:, n] = -lam_v, -lam_w

    paths = []
    for m in range(M):
        paths.append(
            AdjointPath(
                p_v[m],
                p_w[m],
                kap_v[m] if store_kappa else None,
                kap_w[m] if store_kappa else None,
            )
        )
    return paths, kappa_energy


def duality_gap(
    params: FhnParams,
    grid: Grid,
    spec: ActuatorSpec,
    timegrid: TimeGrid,
    traj: Trajectory,
    adj: AdjointPath,
    direction: ControlPath,
    cost,
) -> float:
    """Normalized defect of the variational/dual pairing identity.

    LHS pairs the cost linearization with the variational solution; RHS
    pairs the control direction with the nodal dual path.  Both sides use
    the left-rectangle time quadrature of the running cost, so the defect
    measures only the node-versus-transport sampling mismatch: it is
    first order in dt and vanishes (to roundoff) when the running cost is
    off and the reaction is linear.
    """
    var = solve_variational(params, grid, spec, timegrid, traj, direction)
    N, dt = timegrid.N, timegrid.dt
    gw = timegrid.g_weights()
    lhs = inner_h(grid, params.gamma, cost.dg0(traj.state(N)), var.state(N))
    for n in range(N):
        if gw[n] != 0.0:
            lhs += gw[n] * inner_h(
                grid, params.gamma, cost.dg(traj.state(n), n), var.state(n)
            )
    rhs = 0.0
    for n in range(N):
        bv = StateX(spec.mask * direction.values[n], grid.zeros())
        rhs -= dt * inner_h(grid, params.gamma, bv, adj.state(n))
    return (lhs - rhs) / max(1.0, abs(rhs))
