"""Reaction terms, the coupled linear operator, and their derivatives.

The drift splits as A + F: A carries the Laplacian and the linear
voltage/recovery coupling, F carries the cubic ionic current plus the
external forcing.  The one-sided Lipschitz constant of F is computed
analytically from the cubic's roots; `one_sided_margin` checks it by
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .grid import Field, Grid, StateX, neumann_laplacian


@dataclass
class FhnParams:
    """Model coefficients.

    `linear` disables the cubic entirely (test mode for the closed-form
    linear oracles); `f` is the external forcing applied to the voltage
    equation.  `eta` is derived, never user-supplied: the minimum of the
    cubic's derivative over the real line is ab - (a+b)^2/3, attained at
    v = (a+b)/3, so the one-sided constant of -I_ion is its negative part.
    """

    a: float = 0.25
    b: float = 1.0
    gamma: float = 0.5
    delta: float = 0.8
    f: Field | float = 0.0
    linear: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.delta <= 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")

    @property
    def eta(self) -> float:
        if self.linear:
            return 0.0
        return max(0.0, (self.a + self.b) ** 2 / 3.0 - self.a * self.b)

    def forcing(self, grid: Grid) -> Field:
        if np.isscalar(self.f):
            return grid.constant(float(self.f))
        return np.asarray(self.f)


def i_ion(params: FhnParams, v):
    """Cubic ionic current v(v-a)(v-b); zero in linear test mode."""
    if params.linear:
        return np.zeros_like(np.asarray(v, dtype=float))
    return v * (v - params.a) * (v - params.b)


def i_ion_prime(params: FhnParams, v):
    if params.linear:
        return np.zeros_like(np.asarray(v, dtype=float))
    return 3.0 * v**2 - 2.0 * (params.a + params.b) * v + params.a * params.b


def f_apply(params: FhnParams, grid: Grid, X: StateX) -> StateX:
    """Reaction operator: (-I_ion(v) + f, 0)."""
    return StateX(-i_ion(params, X.v) + params.forcing(grid), grid.zeros())


def df_apply(params: FhnParams, grid: Grid, X: StateX, Z: StateX) -> StateX:
    """Frechet derivative of the reaction operator at X applied to Z."""
    return StateX(-i_ion_prime(params, X.v) * Z.v, grid.zeros())


def a_apply(params: FhnParams, grid: Grid, X: StateX) -> StateX:
    """Coupled linear operator: (Lap v - w, gamma*v - delta*w)."""
    return StateX(
        neumann_laplacian(grid, X.v) - X.w,
        params.gamma * X.v - params.delta * X.w,
    )


def a_star_apply(params: FhnParams, grid: Grid, X: StateX) -> StateX:
    """Adjoint of `a_apply` in the weighted inner product.

    <A(v,w),(p,q)>_H = gamma<v, Lap p + q>_2 + <w, -gamma p - delta q>_2,
    using that the reflected Laplacian is trapezoid-self-adjoint.
    """
    return StateX(
        neumann_laplacian(grid, X.v) + X.w,
        -params.gamma * X.v - params.delta * X.w,
    )


def one_sided_margin(
    params: FhnParams,
    grid: Grid,
    samples: int,
    stream: np.random.Generator,
    amplitude: float = 2.0,
) -> dict:
    """Sampled supremum of <F(x)-F(y), x-y>_H / |x-y|_H^2.

    Returns the sampled margin together with the analytic constant; the
    margin never exceeds eta up to roundoff.
    """
    if samples < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {samples}")
    worst = -np.inf
    weights = grid.weights().ravel()
    batch = min(samples, 5000)
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        shape = (m, grid.num_nodes)
        vx = amplitude * stream.standard_normal(shape)
        wx = amplitude * stream.standard_normal(shape)
        vy = amplitude * stream.standard_normal(shape)
        wy = amplitude * stream.standard_normal(shape)
        dv = vx - vy
        dw = wx - wy
        # forcing cancels in F(x) - F(y); only the cubic difference remains
        dfv = -(i_ion(params, vx) - i_ion(params, vy))
        num = params.gamma * (dfv * dv) @ weights
        denom = params.gamma * (dv * dv) @ weights + (dw * dw) @ weights
        valid = denom > 0
        if np.any(valid):
            worst = max(worst, float(np.max(num[valid] / denom[valid])))
        done += m
    return {"sampled_margin": worst, "eta": params.eta}
