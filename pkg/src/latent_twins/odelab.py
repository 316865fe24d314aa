"""Benchmark ODE systems and a Dormand-Prince 5(4) integrator with dense output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OdeSystem",
    "Trajectory",
    "SYSTEMS",
    "get_system",
    "linear_system",
    "rhs",
    "integrate",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


@dataclass(frozen=True)
class OdeSystem:
    name: str
    params: dict[str, float]
    x0: tuple[float, ...]
    t_span: tuple[float, float]
    field_fn: Callable[[np.ndarray, float, dict], np.ndarray] = field(repr=False, compare=False)
    labels: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.x0)

    @property
    def T(self) -> float:
        return self.t_span[1]


def _harmonic(x, t, p):
    return np.array([x[1], -p["omega0"] ** 2 * x[0]])


def _sir(x, t, p):
    s, i, _ = x
    inf = p["beta"] * s * i
    rec = p["gamma"] * i
    return np.array([-inf, inf - rec, rec])


def _lotka_volterra(x, t, p):
    u, v = x
    return np.array([p["alpha"] * u - p["beta"] * u * v, p["delta"] * u * v - p["gamma"] * v])


def _lorenz63(x, t, p):
    a, b, c = x
    return np.array([p["sigma"] * (b - a), a * (p["rho"] - c) - b, a * b - p["beta"] * c])


SYSTEMS: dict[str, OdeSystem] = {
    "harmonic": OdeSystem("harmonic", {"omega0": 2.0}, (1.0, 0.0), (0.0, 10.0), _harmonic, ("x", "v")),
    "sir": OdeSystem("sir", {"beta": 0.3, "gamma": 0.1}, (0.99, 0.01, 0.0), (0.0, 60.0), _sir, ("S", "I", "R")),
    "lotka-volterra": OdeSystem(
        "lotka-volterra",
        {"alpha": 1.0, "beta": 0.1, "delta": 0.075, "gamma": 1.5},
        (10.0, 5.0),
        (0.0, 30.0),
        _lotka_volterra,
        ("u", "v"),
    ),
    "lorenz63": OdeSystem(
        "lorenz63",
        {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
        (1.0, 1.0, 1.0),
        (0.0, 40.0),
        _lorenz63,
        ("x", "y", "z"),
    ),
}


def get_system(name: str) -> OdeSystem:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def linear_system(m, x0=None, t_span=(0.0, 1.0), name: str = "linear") -> OdeSystem:
    """``x' = M x`` wrapped as an :class:`OdeSystem` (used for Galerkin ROM checks)."""
    m = np.array(m, dtype=np.float64)
    x0 = tuple(np.zeros(m.shape[0]) if x0 is None else np.asarray(x0, dtype=np.float64))
    return OdeSystem(name, {}, x0, tuple(t_span), lambda x, t, p: m @ x)


def rhs(sys: OdeSystem, x, t: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sys.dim,):
        raise ValueError(f"{sys.name} expects a state of dimension {sys.dim}, got {x.shape}")
    return sys.field_fn(x, t, sys.params)


# Dormand-Prince 5(4) tableau and the quartic continuous extension.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)


@dataclass
class Trajectory:
    """Accepted integrator steps plus the data needed for dense output.

    ``times`` is monotone in the direction of integration (strictly increasing
    for forward runs).  ``coeffs[k]`` holds the quartic interpolant on step
    ``k`` so :meth:`at` can evaluate the solution anywhere in the span.
    """

    times: np.ndarray
    states: np.ndarray
    coeffs: np.ndarray | None = None

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def at(self, t) -> np.ndarray:
        """States at query time(s) ``t``; shape ``(n,)`` or ``(len(t), n)``."""
        tq = np.asarray(t, dtype=np.float64)
        scalar = tq.ndim == 0
        tq = np.atleast_1d(tq)
        times = self.times
        if len(times) == 1:
            out = np.repeat(self.states[:1], len(tq), axis=0)
            return out[0] if scalar else out
        forward = times[-1] > times[0]
        lo, hi = (times[0], times[-1]) if forward else (times[-1], times[0])
        span = hi - lo
        if np.any(tq < lo - 1e-12 * max(1.0, span)) or np.any(tq > hi + 1e-12 * max(1.0, span)):
            raise ValueError("query time outside the integrated interval")
        if forward:
            k = np.clip(np.searchsorted(times, tq, side="right") - 1, 0, len(times) - 2)
        else:
            k = np.clip(np.searchsorted(-times, -tq, side="right") - 1, 0, len(times) - 2)
        h = times[k + 1] - times[k]
        theta = (tq - times[k]) / h
        if self.coeffs is None:
            out = self.states[k] + theta[:, None] * (self.states[k + 1] - self.states[k])
        else:
            powers = np.cumprod(np.repeat(theta[:, None], 4, axis=1), axis=1)
            out = self.states[k] + h[:, None] * np.einsum("qnj,qj->qn", self.coeffs[k], powers)
        return out[0] if scalar else out


def integrate(
    sys: OdeSystem,
    x0,
    t0: float,
    t1: float,
    atol: float = 1e-12,
    rtol: float = 1e-10,
    h0: float | None = None,
    max_steps: int = 5_000_000,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with PI step-size control.

    Integrates backward in time when ``t1 < t0``.  Raises ``ArithmeticError`` on
    step-size underflow and ``FloatingPointError`` on a non-finite state.
    """
    x = np.array(x0, dtype=np.float64)
    if x.shape != (sys.dim,) or not np.all(np.isfinite(x)):
        raise ValueError("initial state must be a finite vector of the system dimension")
    if t1 == t0:
        return Trajectory(np.array([t0], dtype=np.float64), x[None, :].copy(), np.zeros((0, sys.dim, 4)))

    f = sys.field_fn
    p = sys.params
    direction = 1.0 if t1 > t0 else -1.0
    t = float(t0)
    k1 = f(x, t, p)

    def err_norm(v, xa, xb):
        scale = atol + rtol * np.maximum(np.abs(xa), np.abs(xb))
        return float(np.sqrt(np.mean((v / scale) ** 2)))

    if h0 is None:
        # Hairer-Norsett-Wanner starting step heuristic
        d0 = err_norm(x, x, x)
        d1 = err_norm(k1, x, x)
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        x1 = x + direction * h * k1
        d2 = err_norm(f(x1, t + direction * h, p) - k1, x, x) / h
        dmax = max(d1, d2)
        h1 = max(1e-6, h * 1e-3) if dmax <= 1e-15 else (0.01 / dmax) ** 0.2
        h = min(100 * h, h1, abs(t1 - t0))
    else:
        h = min(abs(h0), abs(t1 - t0))

    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    fac_min, fac_max, safety = 0.2, 10.0, 0.9
    err_prev = 1e-4

    times = [t]
    states = [x.copy()]
    coeffs = []
    K = np.empty((7, sys.dim))
    for _ in range(max_steps):
        if direction * (t1 - t) <= 0:
            break
        h = min(h, abs(t1 - t))
        if h < 1e-14 * max(1.0, abs(t)):
            raise ArithmeticError(f"step size underflow at t={t:.6g}")
        hs = direction * h
        K[0] = k1
        for s in range(1, 6):
            K[s] = f(x + hs * (np.asarray(_A[s]) @ K[:s]), t + _C[s] * hs, p)
        x_new = x + hs * (_B @ K[:6])
        K[6] = f(x_new, t + hs, p)
        err = err_norm(hs * (_E @ K), x, x_new)
        if not np.isfinite(err):
            raise FloatingPointError(f"non-finite state near t={t:.6g}")
        if err <= 1.0:
            t_new = t1 if abs(t1 - (t + hs)) <= 1e-15 * max(1.0, abs(t1)) else t + hs
            coeffs.append(K.T @ _P)
            t, x, k1 = t_new, x_new, K[6].copy()
            times.append(t)
            states.append(x.copy())
            err = max(err, 1e-10)
            fac = safety * err ** (-alpha) * err_prev**beta
            h *= min(fac_max, max(fac_min, fac))
            err_prev = err
        else:
            h *= max(fac_min, safety * err ** (-0.2))
    else:
        raise ArithmeticError("maximum number of steps exceeded")
    return Trajectory(np.array(times), np.array(states), np.array(coeffs))


def write_trajectory_csv(path, traj: Trajectory, labels=None) -> None:
    n = traj.states.shape[1]
    labels = labels or [f"x{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["t", *labels])
        for t, x in zip(traj.times, traj.states):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in x)])


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(data[:, 0].copy(), data[:, 1:].copy())
