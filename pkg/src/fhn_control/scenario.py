"""Scenario configuration: INI-style files, validation, and digests.

A scenario file is plain key/value text with sections; every key has a
default, so the empty file is a valid scenario.  Loading validates every
invariant and rejects unknown keys outright.  The canonical digest is
stable under key reordering and is what run manifests record.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .control import CostSpec
from .dynamics import FhnParams
from .errors import ConfigurationError
from .forward import ActuatorSpec, TimeGrid
from .grid import Field, Grid, StateX, neumann_eigenmode
from .noise import SpectralCovariance

_SCHEMA = {
    "grid": {"d": int, "n": int, "ell": float},
    "dynamics": {
        "a": float,
        "b": float,
        "gamma": float,
        "delta": float,
        "forcing": float,
        "linear": bool,
    },
    "noise": {"sigma1": float, "sigma2": float, "modes": int},
    "time": {"horizon": float, "steps": int},
    "actuator": {"mask": str},
    "cost": {
        "alpha": float,
        "running_weight": float,
        "terminal_weight": float,
        "x_ref": str,
        "x_target": str,
    },
    "initial": {"v0": str, "w0": str},
    "run": {
        "seed": int,
        "ensemble": int,
        "mode": str,
        "tol": float,
        "max_iters": int,
        "eps0": float,
        "use_theta": bool,
    },
}


@dataclass
class Scenario:
    """Flat, serializable description of one run; see `build` for the
    assembled numerical objects."""

    d: int = 1
    n: int = 64
    ell: float = 1.0
    a: float = 0.25
    b: float = 1.0
    gamma: float = 0.5
    delta: float = 0.8
    forcing: float = 0.0
    linear: bool = False
    sigma1: float = 0.1
    sigma2: float = 0.1
    modes: int = 32
    horizon: float = 0.5
    steps: int = 500
    mask: str = "ones"
    alpha: float = 2.0
    running_weight: float = 1.0
    terminal_weight: float = 0.1
    x_ref: str = "zero"
    x_target: str = "zero"
    v0: str = "constant:0.3"
    w0: str = "constant:0.0"
    seed: int = 0
    ensemble: int = 100
    mode: str = "deterministic"
    tol: float = 1.0e-6
    max_iters: int = 40
    eps0: float = 1.0e-3
    use_theta: bool = True

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.terminal_weight < 0 or self.running_weight < 0:
            raise ConfigurationError("cost weights must be nonnegative")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigurationError("noise amplitudes must be nonnegative")
        if self.mode not in ("deterministic", "stochastic"):
            raise ConfigurationError(
                f"mode must be 'deterministic' or 'stochastic', got {self.mode!r}"
            )
        if self.ensemble < 1:
            raise ConfigurationError("ensemble must be >= 1")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")
        if self.eps0 < 0:
            raise ConfigurationError("eps0 must be nonnegative")
        # these constructors enforce their own invariants
        grid = Grid(self.d, self.n, self.ell)
        FhnParams(self.a, self.b, self.gamma, self.delta, self.forcing, self.linear)
        TimeGrid(self.horizon, self.steps)
        if self.modes < 1 or self.modes > (grid.max_mode_freq() + 1) ** grid.d:
            raise ConfigurationError(
                f"modes={self.modes} outside the grid's exact truncation range"
            )

    def digest(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    # -- assembly -----------------------------------------------------

    def build_grid(self) -> Grid:
        return Grid(self.d, self.n, self.ell)

    def build_params(self) -> FhnParams:
        return FhnParams(self.a, self.b, self.gamma, self.delta, self.forcing, self.linear)

    def build_cov(self) -> SpectralCovariance:
        if self.mode == "deterministic":
            return SpectralCovariance.zero(self.modes)
        return SpectralCovariance.power_spectrum(self.modes, self.sigma1, self.sigma2)

    def build_timegrid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)

    def build_actuator(self) -> ActuatorSpec:
        grid = self.build_grid()
        return ActuatorSpec(_parse_mask(grid, self.mask))

    def build_cost(self) -> CostSpec:
        grid = self.build_grid()
        return CostSpec(
            grid=grid,
            gamma=self.gamma,
            alpha=self.alpha,
            c_g=self.running_weight,
            c0=self.terminal_weight,
            x_ref=_parse_state(grid, self.x_ref, "x_ref"),
            x_T=_parse_state(grid, self.x_target, "x_target"),
        )

    def build_initial_state(self) -> StateX:
        grid = self.build_grid()
        return StateX(
            _parse_field(grid, self.v0, "v0"), _parse_field(grid, self.w0, "w0")
        )


def _parse_field(grid: Grid, text: str, key: str) -> Field:
    kind, _, rest = text.partition(":")
    if kind == "constant":
        try:
            return grid.constant(float(rest))
        except ValueError:
            raise ConfigurationError(f"{key}: bad constant value {rest!r}") from None
    if kind == "modes":
        out = grid.zeros()
        for item in rest.split(","):
            if not item:
                continue
            k_str, _, amp_str = item.partition(":")
            try:
                out = out + float(amp_str) * neumann_eigenmode(grid, int(k_str))
            except ValueError:
                raise ConfigurationError(f"{key}: bad modal term {item!r}") from None
        return out
    if kind == "file":
        path, _, arr_key = rest.partition(":")
        data = np.load(path)
        arr = np.asarray(data[arr_key] if arr_key else data[data.files[0]])
        if arr.shape != grid.shape:
            raise ConfigurationError(
                f"{key}: array in {path} has shape {arr.shape}, grid is {grid.shape}"
            )
        return arr
    raise ConfigurationError(
        f"{key}: unknown field spec kind {kind!r} (use constant:, modes:, file:)"
    )


def _parse_state(grid: Grid, text: str, key: str):
    if text == "zero":
        return None
    v_spec, _, w_spec = text.partition("|")
    if not w_spec:
        w_spec = "constant:0.0"
    return StateX(_parse_field(grid, v_spec, key), _parse_field(grid, w_spec, key))


def _parse_mask(grid: Grid, text: str) -> Field:
    if text == "ones":
        return np.ones(grid.shape)
    if text == "left_half":
        xi = grid.axis_coords()
        ind = (xi < grid.ell / 2.0).astype(float)
        if grid.d == 1:
            return ind
        return np.multiply.outer(ind, np.ones(grid.n))
    kind, _, rest = text.partition(":")
    if kind == "file":
        path, _, arr_key = rest.partition(":")
        data = np.load(path)
        arr = np.asarray(data[arr_key] if arr_key else data[data.files[0]])
        if arr.shape != grid.shape:
            raise ConfigurationError(f"mask: array shape {arr.shape} != grid {grid.shape}")
        return arr
    raise ConfigurationError(
        f"unknown mask spec {text!r} (use ones, left_half, or file:<path>)"
    )


def _coerce(section: str, key: str, raw: str):
    typ = _SCHEMA[section][key]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}"
        ) from None


_FIELD_BY_KEY = {key: (section, key) for section, keys in _SCHEMA.items() for key in keys}


def load_scenario(path: str) -> Scenario:
    """Parse and validate a scenario file; unknown keys are hard errors."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(
                f"unknown section [{section}]; valid sections: {sorted(_SCHEMA)}"
            )
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(
                    f"unknown key {key!r} in [{section}]; "
                    f"valid keys: {sorted(_SCHEMA[section])}"
                )
            values[key] = _coerce(section, key, raw)
    scenario = Scenario(**values)
    scenario.validate()
    return scenario


def emit_scenario(scenario: Scenario) -> str:
    """Serialize every field (defaults included) back to INI text."""
    parser = configparser.ConfigParser()
    by_name = {f.name: getattr(scenario, f.name) for f in fields(scenario)}
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key in keys:
            value = by_name[key]
            if isinstance(value, bool):
                parser[section][key] = "true" if value else "false"
            elif isinstance(value, float):
                parser[section][key] = repr(value)
            else:
                parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_scenario(scenario: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(emit_scenario(scenario))
