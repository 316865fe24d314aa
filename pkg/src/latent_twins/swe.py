"""Shallow-water solver: flux-form continuity, linear momentum, beta-plane Coriolis.

Fields live on a collocated (A-) grid of cell centres covering
``[-L, L]^2``.  Walls are reflective: one ghost layer mirrors ``eta``
(homogeneous Neumann) and reflects the normal velocity with a sign flip, so
the interface value of the normal velocity is zero and the centred flux
divergence telescopes to exactly zero total mass change.

The state is handled internally as one ``(3, Ny, Nx)`` array ordered
``eta, u, v``.  The tangent-linear and adjoint models below differentiate the
discrete scheme itself (stage by stage), which is what 4D-Var needs.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import RngStream

__all__ = [
    "SweConfig",
    "SweState",
    "FieldTrajectory",
    "gaussian_init",
    "rhs_swe",
    "step_tvdrk3",
    "simulate",
    "propagate",
    "tlm_step",
    "adjoint_step",
    "energy",
    "total_mass",
    "write_snapshot",
    "read_snapshot",
    "save_trajectory",
    "load_trajectory",
]

SNAP_MAGIC = b"LTWF"
TRAJ_MAGIC = b"LTWT"
VERSION = 1
BLOWUP = 1e3


@dataclass(frozen=True)
class SweConfig:
    half_width: float = 5e5
    nx: int = 64
    ny: int = 64
    depth: float = 100.0
    g: float = 9.81
    f0: float = 1e-4
    beta: float = 2e-11
    dt: float = 51.0
    steps: int = 600
    sigma_init: float = 5e4

    def __post_init__(self) -> None:
        if self.nx < 8 or self.ny < 8:
            raise ValueError("grid must be at least 8x8")
        if self.dt <= 0 or self.steps < 0:
            raise ValueError("dt must be positive and steps non-negative")
        if self.dt > self.cfl_limit:
            raise ValueError(f"dt={self.dt} exceeds the CFL limit {self.cfl_limit:.1f} s")

    @property
    def dx(self) -> float:
        return 2 * self.half_width / self.nx

    @property
    def dy(self) -> float:
        return 2 * self.half_width / self.ny

    @property
    def cfl_limit(self) -> float:
        return min(self.dx, self.dy) / (math.sqrt(self.g * self.depth) * math.sqrt(2.0))

    @property
    def xc(self) -> np.ndarray:
        return -self.half_width + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def yc(self) -> np.ndarray:
        return -self.half_width + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def coriolis(self) -> np.ndarray:
        """``f = f0 + beta * y`` per row, shaped ``(Ny, 1)`` for broadcasting."""
        return (self.f0 + self.beta * self.yc)[:, None]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (3, self.ny, self.nx)

    def with_grid(self, n: int, dt: float | None = None) -> "SweConfig":
        """Same physics on an ``n x n`` grid; the step count keeps the final time fixed."""
        dt = self.dt if dt is None else dt
        steps = int(round(self.steps * self.dt / dt))
        return SweConfig(self.half_width, n, n, self.depth, self.g, self.f0, self.beta, dt, steps, self.sigma_init)


@dataclass
class SweState:
    eta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    @classmethod
    def from_array(cls, x: np.ndarray, t: float = 0.0) -> "SweState":
        return cls(x[0].copy(), x[1].copy(), x[2].copy(), float(t))

    def as_array(self) -> np.ndarray:
        return np.stack([self.eta, self.u, self.v])


@dataclass
class FieldTrajectory:
    """Snapshots at uniformly spaced times; ``fields`` has shape ``(K, 3, Ny, Nx)``."""

    times: np.ndarray
    fields: np.ndarray
    cfg: SweConfig = field(default_factory=SweConfig)
    seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.times) != len(self.fields):
            raise ValueError("times and fields differ in length")
        if len(self.times) > 2:
            d = np.diff(self.times)
            if not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ValueError("snapshot times must be uniformly spaced")

    def __len__(self) -> int:
        return len(self.times)

    def state(self, k: int) -> SweState:
        return SweState.from_array(self.fields[k], self.times[k])

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        return k


def gaussian_init(cfg: SweConfig, seed: int = 0, center: tuple[float, float] | None = None) -> SweState:
    """Unit Gaussian bump in ``eta`` centred uniformly at random in the domain; fluid at rest."""
    if center is None:
        rng = RngStream(seed)
        mx, my = rng.uniform(-cfg.half_width, cfg.half_width, 2)
    else:
        mx, my = center
    xx, yy = np.meshgrid(cfg.xc, cfg.yc)
    eta = np.exp(-((xx - mx) ** 2 + (yy - my) ** 2) / (2 * cfg.sigma_init**2))
    z = np.zeros_like(eta)
    return SweState(eta, z, z.copy(), 0.0)


# ---------------------------------------------------------------------------
# difference operators with ghost-cell boundary treatment
# parity +1 mirrors the boundary value into the ghost (Neumann), -1 flips it
# (zero interface value).  axis -1 is x, axis -2 is y.

def _diff(a: np.ndarray, axis: int, parity: int, h: float) -> np.ndarray:
    out = np.empty_like(a)
    if axis == -1:
        out[:, 1:-1] = a[:, 2:] - a[:, :-2]
        out[:, 0] = a[:, 1] - parity * a[:, 0]
        out[:, -1] = parity * a[:, -1] - a[:, -2]
    else:
        out[1:-1] = a[2:] - a[:-2]
        out[0] = a[1] - parity * a[0]
        out[-1] = parity * a[-1] - a[-2]
    return out / (2 * h)


def _diff_t(g: np.ndarray, axis: int, parity: int, h: float) -> np.ndarray:
    """Transpose of :func:`_diff`."""
    out = np.zeros_like(g)
    if axis == -1:
        out[:, 2:] += g[:, 1:-1]
        out[:, :-2] -= g[:, 1:-1]
        out[:, 1] += g[:, 0]
        out[:, 0] -= parity * g[:, 0]
        out[:, -1] += parity * g[:, -1]
        out[:, -2] -= g[:, -1]
    else:
        out[2:] += g[1:-1]
        out[:-2] -= g[1:-1]
        out[1] += g[0]
        out[0] -= parity * g[0]
        out[-1] += parity * g[-1]
        out[-2] -= g[-1]
    return out / (2 * h)


def _check(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite field")


def _rhs(x: np.ndarray, cfg: SweConfig) -> np.ndarray:
    eta, u, v = x
    hdep = eta + cfg.depth
    f = cfg.coriolis
    out = np.empty_like(x)
    out[0] = -(_diff(hdep * u, -1, -1, cfg.dx) + _diff(hdep * v, -2, -1, cfg.dy))
    out[1] = f * v - cfg.g * _diff(eta, -1, 1, cfg.dx)
    out[2] = -f * u - cfg.g * _diff(eta, -2, 1, cfg.dy)
    return out


def rhs_swe(state: SweState, cfg: SweConfig) -> SweState:
    """Tendencies ``(d eta/dt, du/dt, dv/dt)`` packed as a state (``t`` unchanged)."""
    x = state.as_array()
    _check(x)
    return SweState.from_array(_rhs(x, cfg), state.t)


def _jac(x: np.ndarray, dx_: np.ndarray, cfg: SweConfig) -> np.ndarray:
    """Action of the RHS Jacobian at ``x`` on the perturbation ``dx_``."""
    eta, u, v = x
    de, du, dv = dx_
    hdep = eta + cfg.depth
    f = cfg.coriolis
    out = np.empty_like(dx_)
    out[0] = -(_diff(de * u + hdep * du, -1, -1, cfg.dx) + _diff(de * v + hdep * dv, -2, -1, cfg.dy))
    out[1] = f * dv - cfg.g * _diff(de, -1, 1, cfg.dx)
    out[2] = -f * du - cfg.g * _diff(de, -2, 1, cfg.dy)
    return out


def _jac_t(x: np.ndarray, lam: np.ndarray, cfg: SweConfig) -> np.ndarray:
    eta, u, v = x
    le, lu, lv = lam
    hdep = eta + cfg.depth
    f = cfg.coriolis
    a = -_diff_t(le, -1, -1, cfg.dx)
    b = -_diff_t(le, -2, -1, cfg.dy)
    out = np.empty_like(lam)
    out[0] = a * u + b * v - cfg.g * (_diff_t(lu, -1, 1, cfg.dx) + _diff_t(lv, -2, 1, cfg.dy))
    out[1] = a * hdep - f * lv
    out[2] = b * hdep + f * lu
    return out


def _stages(x: np.ndarray, cfg: SweConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dt = cfg.dt
    x1 = x + dt * _rhs(x, cfg)
    x2 = 0.75 * x + 0.25 * (x1 + dt * _rhs(x1, cfg))
    xn = x / 3.0 + (2.0 / 3.0) * (x2 + dt * _rhs(x2, cfg))
    return x1, x2, xn


def _step(x: np.ndarray, cfg: SweConfig) -> np.ndarray:
    xn = _stages(x, cfg)[2]
    if not np.all(np.isfinite(xn)) or np.max(np.abs(xn[0])) > BLOWUP:
        raise FloatingPointError("shallow-water solution blew up")
    if np.min(xn[0]) <= -cfg.depth:
        raise FloatingPointError("total depth became non-positive")
    return xn


def step_tvdrk3(state: SweState, cfg: SweConfig) -> SweState:
    """One TVD-RK3 step (Shu-Osher form)."""
    x = state.as_array()
    _check(x)
    return SweState.from_array(_step(x, cfg), state.t + cfg.dt)


def propagate(x: np.ndarray, cfg: SweConfig, steps: int, keep: bool = False):
    """Advance a packed ``(3, Ny, Nx)`` array; with ``keep`` return every iterate."""
    out = [x] if keep else None
    for _ in range(steps):
        x = _step(x, cfg)
        if keep:
            out.append(x)
    return np.array(out) if keep else x


def simulate(cfg: SweConfig, seed: int = 0, init: SweState | None = None, stride: int = 1) -> FieldTrajectory:
    """Integrate ``cfg.steps`` steps from ``gaussian_init(cfg, seed)``, storing every ``stride``-th state."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    st = init if init is not None else gaussian_init(cfg, seed)
    x = st.as_array()
    _check(x)
    times = [st.t]
    fields = [x]
    for k in range(1, cfg.steps + 1):
        x = _step(x, cfg)
        if k % stride == 0:
            times.append(st.t + k * cfg.dt)
            fields.append(x)
    return FieldTrajectory(np.array(times), np.array(fields), cfg, seed if init is None else None)


def tlm_step(x: np.ndarray, dx_: np.ndarray, cfg: SweConfig) -> tuple[np.ndarray, np.ndarray]:
    """Tangent-linear step: returns ``(x_next, dx_next)``."""
    dt = cfg.dt
    x1, x2, xn = _stages(x, cfg)
    d1 = dx_ + dt * _jac(x, dx_, cfg)
    d2 = 0.75 * dx_ + 0.25 * (d1 + dt * _jac(x1, d1, cfg))
    dn = dx_ / 3.0 + (2.0 / 3.0) * (d2 + dt * _jac(x2, d2, cfg))
    return xn, dn


def adjoint_step(x: np.ndarray, lam: np.ndarray, cfg: SweConfig) -> np.ndarray:
    """Adjoint of one step linearised at ``x``: maps ``lambda_{n+1}`` to ``lambda_n``."""
    dt = cfg.dt
    x1, x2, _ = _stages(x, cfg)
    l2 = (2.0 / 3.0) * (lam + dt * _jac_t(x2, lam, cfg))
    l1 = 0.25 * (l2 + dt * _jac_t(x1, l2, cfg))
    return lam / 3.0 + 0.75 * l2 + l1 + dt * _jac_t(x, l1, cfg)


def energy(state: SweState | np.ndarray, cfg: SweConfig) -> float:
    """Discrete ``1/2 * sum(g eta^2 + (eta + H)(u^2 + v^2)) dx dy``."""
    x = state.as_array() if isinstance(state, SweState) else state
    eta, u, v = x
    dens = cfg.g * eta**2 + (eta + cfg.depth) * (u**2 + v**2)
    return float(0.5 * dens.sum() * cfg.dx * cfg.dy)


def total_mass(state: SweState | np.ndarray) -> float:
    x = state.as_array() if isinstance(state, SweState) else state
    return float(np.sum(x[0]))


# ---------------------------------------------------------------------------
# binary formats

_SNAP = struct.Struct("<4sIIId")


def write_snapshot(fp, state: SweState) -> None:
    ny, nx = state.eta.shape
    fp.write(_SNAP.pack(SNAP_MAGIC, VERSION, ny, nx, float(state.t)))
    fp.write(state.as_array().astype("<f8").tobytes())


def read_snapshot(fp) -> SweState:
    head = fp.read(_SNAP.size)
    if len(head) != _SNAP.size:
        raise ValueError("truncated field snapshot header")
    magic, version, ny, nx, t = _SNAP.unpack(head)
    if magic != SNAP_MAGIC:
        raise ValueError("bad magic: not an LTWF snapshot")
    if version != VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    n = 3 * ny * nx * 8
    body = fp.read(n)
    if len(body) != n:
        raise ValueError("truncated field snapshot")
    x = np.frombuffer(body, dtype="<f8").reshape(3, ny, nx).astype(np.float64)
    return SweState.from_array(x, t)


def save_trajectory(path, traj: FieldTrajectory) -> None:
    """Count header followed by concatenated snapshots; config in a JSON sidecar."""
    with open(path, "wb") as fp:
        fp.write(struct.pack("<4sII", TRAJ_MAGIC, VERSION, len(traj)))
        for k in range(len(traj)):
            write_snapshot(fp, traj.state(k))
    with open(os.fspath(path) + ".json", "w") as fp:
        json.dump({"cfg": asdict(traj.cfg), "seed": traj.seed}, fp)


def load_trajectory(path) -> FieldTrajectory:
    with open(path, "rb") as fp:
        head = fp.read(12)
        if len(head) != 12:
            raise ValueError("truncated trajectory header")
        magic, version, count = struct.unpack("<4sII", head)
        if magic != TRAJ_MAGIC:
            raise ValueError("bad magic: not an LTWT trajectory")
        if version != VERSION:
            raise ValueError(f"unsupported trajectory version {version}")
        states = [read_snapshot(fp) for _ in range(count)]
        if fp.read(1):
            raise ValueError("trailing bytes after trajectory")
    side = os.fspath(path) + ".json"
    cfg, seed = SweConfig(nx=states[0].eta.shape[1], ny=states[0].eta.shape[0]), None
    if os.path.exists(side):
        with open(side) as fp:
            meta = json.load(fp)
        cfg, seed = SweConfig(**meta["cfg"]), meta["seed"]
    return FieldTrajectory(np.array([s.t for s in states]), np.array([s.as_array() for s in states]), cfg, seed)
