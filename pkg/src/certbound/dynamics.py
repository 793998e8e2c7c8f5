"""Polynomial vector fields, Lie derivatives and a fixed-step RK4 integrator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .polynomial import Polynomial, PolynomialError, SpaceMismatchError, VariableSpace


class BlowUpError(RuntimeError):
    """A trajectory left the finite reals."""

    def __init__(self, time: float, index: int | None = None):
        self.time = time
        self.index = index
        where = f" (sample {index})" if index is not None else ""
        super().__init__(f"non-finite state encountered at t={time:.6g}{where}")


@dataclass(frozen=True)
class VectorField:
    """``components[i]`` is dx_i/dt; the time variable is always ``space.names[0]``."""

    space: VariableSpace
    components: tuple[Polynomial, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != self.space.dim - 1:
            raise PolynomialError(
                f"expected {self.space.dim - 1} components for states {self.state_names}, got {len(comps)}"
            )
        for c in comps:
            if c.space != self.space:
                raise SpaceMismatchError("vector field components must share the field's space")

    @classmethod
    def from_states(cls, state_names: Sequence[str], components, time_name: str = "t") -> "VectorField":
        space = VariableSpace([time_name, *state_names])
        return cls(space, tuple(components))

    @property
    def time_name(self) -> str:
        return self.space.names[0]

    @property
    def state_names(self) -> tuple[str, ...]:
        return self.space.names[1:]

    @property
    def n_states(self) -> int:
        return self.space.dim - 1

    @property
    def degree(self) -> int:
        return max((c.degree for c in self.components), default=-1)

    @property
    def is_autonomous(self) -> bool:
        return not any(c.depends_on(self.time_name) for c in self.components)

    @property
    def _compiled(self):
        fns = self.__dict__.get("_fns")
        if fns is None:
            fns = [c.compile() for c in self.components]
            object.__setattr__(self, "_fns", fns)
        return fns

    def __call__(self, t: float, x: Sequence[float]) -> np.ndarray:
        return np.array([float(fn(t, *x)) for fn in self._compiled])

    def rhs_many(self, t: float, x: np.ndarray) -> np.ndarray:
        """Vectorised right-hand side for states ``x`` of shape (N, n)."""
        cols = [x[:, i] for i in range(x.shape[1])]
        out = np.empty_like(x)
        for i, fn in enumerate(self._compiled):
            out[:, i] = fn(t, *cols)
        return out


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def lie_derivative(v: Polynomial, field: VectorField) -> Polynomial:
    """d/dt v along the flow: dv/dt + sum_i f_i dv/dx_i."""
    if v.space != field.space:
        raise SpaceMismatchError(f"v is over {v.space.names}, field over {field.space.names}")
    out = v.diff(field.time_name)
    for name, f in zip(field.state_names, field.components):
        dv = v.diff(name)
        if not dv.is_zero():
            out = out + f * dv
    return out


def rescale_time(field: VectorField, T: float) -> VectorField:
    """Map the horizon [0, T] onto [0, 1]: g(s, x) = T f(T s, x).

    The time variable keeps its name but now denotes normalised time.
    """
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    tname = field.time_name
    s = Polynomial.variable(field.space, tname)
    comps = []
    for c in field.components:
        if c.depends_on(tname):
            c = c.substitute({tname: s * T})
        comps.append(c * T)
    return VectorField(field.space, tuple(comps))


def _grid(T: float, step: float) -> np.ndarray:
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    n_full = int(math.floor(T / step * (1 + 1e-12)))
    times = step * np.arange(n_full + 1)
    times = times[times < T - 1e-9 * step] if T > 0 else times[:1]
    if T > 0:
        times = np.append(times, T)
    return times


def _rk4(rhs, x0: np.ndarray, times: np.ndarray, keep: bool):
    x = np.array(x0, dtype=float)
    states = [x.copy()] if keep else None
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        k1 = rhs(t, x)
        k2 = rhs(t + h / 2, x + h / 2 * k1)
        k3 = rhs(t + h / 2, x + h / 2 * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            bad = None
            if x.ndim == 2:
                bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise BlowUpError(float(times[k + 1]), bad)
        if keep:
            states.append(x.copy())
    return x, states


def integrate(field: VectorField, x0: Sequence[float], T: float, step: float) -> Trajectory:
    """Classical RK4 at fixed ``step``, with a shortened final step landing on T."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (field.n_states,):
        raise ValueError(f"initial state must have length {field.n_states}")
    times = _grid(T, step)
    with np.errstate(over="ignore", invalid="ignore"):
        _, states = _rk4(lambda t, x: field(t, x), x0, times, keep=True)
    return Trajectory(times, np.array(states))


def integrate_many(field: VectorField, x0: np.ndarray, T: float, step: float) -> np.ndarray:
    """Final states for an ensemble of initial conditions (shape (N, n))."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2 or x0.shape[1] != field.n_states:
        raise ValueError(f"initial states must have shape (N, {field.n_states})")
    times = _grid(T, step)
    with np.errstate(over="ignore", invalid="ignore"):
        x, _ = _rk4(field.rhs_many, x0, times, keep=False)
    return x


def transport_residual(v: Polynomial, field: VectorField, x0: Sequence[float], T: float, step: float) -> float:
    """|int_0^T Lv(t, x(t)) dt - (v(T, x(T)) - v(0, x0))| with the trapezoid rule on the RK4 grid."""
    traj = integrate(field, x0, T, step)
    lv = lie_derivative(v, field)
    pts = np.column_stack([traj.times, traj.states])
    vals = lv.evaluate_many(pts)
    integral = float(np.sum(np.diff(traj.times) * (vals[1:] + vals[:-1]) / 2)) if len(vals) > 1 else 0.0
    delta = v(*pts[-1]) - v(*pts[0])
    return abs(integral - delta)
