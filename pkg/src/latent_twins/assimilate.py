"""Sparse noisy observations, latent-space state inference and strong-constraint 4D-Var.

Everything observation-related lives in standardized units: a field is first
standardized channel-wise with the twin's :class:`NormStats`, then decimated,
then perturbed.  The observation operator ``P`` keeps cell ``(i*f, j*f)`` of
every channel, so its adjoint is exact injection into a zero field.

4D-Var uses the standardized initial state as control variable
``xi = (x0 - mu) / s`` and the cost

    J(xi) = 1/2 sigma_b^-2 (xi - xi_b)^T (I + lam L) (xi - xi_b)
          + 1/2 sum_i sigma_o^-2 |P(std(Phi_i(x0))) - y_i|^2

where ``L`` is the 5-point Neumann Laplacian (positive semi-definite sign
convention, grid-index units) applied channel by channel.  The background
covariance is never formed; its inverse is applied directly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import line_search

from . import autodiff as ad
from . import swe
from .datasets import NormStats
from .numkit import RngStream

__all__ = [
    "ObsOperator",
    "Observation",
    "observe",
    "apply_obs",
    "apply_obs_t",
    "bilinear_upsample",
    "standardize_field",
    "destandardize_field",
    "latent_infer",
    "InferResult",
    "VarProblem",
    "VarResult",
    "laplacian_neumann",
    "apply_precision",
    "fourdvar_cost",
    "fourdvar_gradient",
    "fourdvar_solve",
    "lbfgs",
    "relative_error",
    "write_observation",
    "read_observation",
]

OBS_MAGIC = b"LTWO"
VERSION = 1


@dataclass(frozen=True)
class ObsOperator:
    factor: int = 8
    noise_var: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise variance must be >= 0")


@dataclass
class Observation:
    y: np.ndarray  # (3, Ny/f, Nx/f), standardized units
    t: float
    op: ObsOperator

    def __post_init__(self) -> None:
        if self.y.ndim != 3:
            raise ValueError("observation must be (channels, ny, nx)")


def standardize_field(x: np.ndarray, norm: NormStats) -> np.ndarray:
    """Channel-wise standardization of a packed ``(3, Ny, Nx)`` field."""
    return norm.norm_x(x.reshape(-1)).reshape(x.shape)


def destandardize_field(xs: np.ndarray, norm: NormStats) -> np.ndarray:
    return norm.denorm_x(xs.reshape(-1)).reshape(xs.shape)


def _check_factor(shape: tuple[int, ...], f: int) -> None:
    if shape[-1] % f or shape[-2] % f:
        raise ValueError(f"factor {f} does not divide grid {shape[-2]}x{shape[-1]}")


def apply_obs(xs: np.ndarray, f: int) -> np.ndarray:
    """Strided decimation ``P``: keep cell ``(i*f, j*f)``."""
    _check_factor(xs.shape, f)
    return xs[..., ::f, ::f].copy()


def apply_obs_t(y: np.ndarray, f: int, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`apply_obs` (injection)."""
    out = np.zeros(shape)
    out[..., ::f, ::f] = y
    return out


def observe(op: ObsOperator, state: swe.SweState | np.ndarray, norm: NormStats, t: float | None = None) -> Observation:
    """``y = P(standardize(x)) + eps`` with ``eps ~ N(0, noise_var I)`` from ``op.seed``."""
    x = state.as_array() if isinstance(state, swe.SweState) else np.asarray(state, dtype=np.float64)
    if t is None:
        t = state.t if isinstance(state, swe.SweState) else 0.0
    y = apply_obs(standardize_field(x, norm), op.factor)
    if op.noise_var > 0:
        y = y + RngStream(op.seed).gaussian(0.0, math.sqrt(op.noise_var), y.shape)
    return Observation(y, float(t), op)


def _interp_axis(a: np.ndarray, f: int, n: int, axis: int) -> np.ndarray:
    src = np.arange(a.shape[axis]) * f
    dst = np.arange(n)
    a = np.moveaxis(a, axis, -1)
    out = np.empty(a.shape[:-1] + (n,))
    for idx in np.ndindex(a.shape[:-1]):
        out[idx] = np.interp(dst, src, a[idx])  # clamps beyond the last sample
    return np.moveaxis(out, -1, axis)


def bilinear_upsample(y: np.ndarray, f: int, ny: int, nx: int) -> np.ndarray:
    """Bilinear reconstruction of a decimated field on the full grid (edge-clamped)."""
    if f == 1:
        return np.array(y, dtype=np.float64)
    return _interp_axis(_interp_axis(y, f, nx, -1), f, ny, -2)


@dataclass
class InferResult:
    z: np.ndarray
    residual: float  # mean squared observation misfit at z
    history: list[float] = field(default_factory=list)
    z0: np.ndarray | None = None


def latent_infer(model, obs: Observation, iters: int = 500, lr: float = 1e-2, shape: tuple[int, int, int] | None = None) -> InferResult:
    """Fit a latent code whose decoding matches the observation.

    Minimises ``mean |P(d(z)) - y|^2`` with Adam, starting from the encoding of
    the bilinearly upsampled observation.  The best iterate is returned, so
    the result is never worse than the initial guess.
    """
    f = obs.op.factor
    c, my, mx = obs.y.shape
    if shape is None:
        shape = (c, my * f, mx * f)
    if c * shape[1] * shape[2] != model.n_x:
        raise ValueError("observation grid does not match the twin state dimension")
    up = bilinear_upsample(obs.y, f, shape[1], shape[2])
    z = model.encode(up.reshape(-1)).copy()
    z0 = z.copy()
    opt = ad.AdamState.for_params([z], lr)

    def misfit(zz, grad):
        if model.decoder is None:
            xs, tape = zz, None
        else:
            xs, tape = ad.forward(model.decoder, zz)
        r = apply_obs(xs.reshape(shape), f) - obs.y
        val = float(np.mean(r * r))
        if not grad:
            return val, None
        gx = apply_obs_t(2.0 * r / r.size, f, shape).reshape(-1)
        if tape is None:
            return val, gx
        return val, ad.backward(model.decoder, tape, gx)[1]

    best_val, _ = misfit(z, False)
    best = z.copy()
    history = [best_val]
    for _ in range(iters):
        val, g = misfit(z, True)
        ad.adam_step(opt, [z], [g])
        if not np.all(np.isfinite(z)):
            raise FloatingPointError("latent inference diverged")
        val, _ = misfit(z, False)
        history.append(val)
        if val < best_val:
            best_val, best = val, z.copy()
    return InferResult(best, best_val, history, z0)


def relative_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth))


# ---------------------------------------------------------------------------
# 4D-Var

def laplacian_neumann(a: np.ndarray) -> np.ndarray:
    """``(L a)_ij = sum over existing neighbours of (a_ij - a_nb)``; symmetric PSD."""
    out = np.zeros_like(a)
    dx = a[..., :, 1:] - a[..., :, :-1]
    out[..., :, 1:] += dx
    out[..., :, :-1] -= dx
    dy = a[..., 1:, :] - a[..., :-1, :]
    out[..., 1:, :] += dy
    out[..., :-1, :] -= dy
    return out


def apply_precision(d: np.ndarray, sigma_b: float, lam: float) -> np.ndarray:
    """``Gamma^-1 d = sigma_b^-2 (d + lam L d)``."""
    return (d + lam * laplacian_neumann(d)) / sigma_b**2


@dataclass
class VarProblem:
    cfg: swe.SweConfig
    background: np.ndarray  # standardized control xi_b, (3, Ny, Nx)
    norm: NormStats
    observations: Sequence[tuple[int, Observation]]  # (step index after window start, observation)
    sigma_b: float = 1.0  # standardized units: the climatological spread
    lam: float = 4.0
    t0: float = 0.0

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.background.shape != self.cfg.shape:
            raise ValueError("background shape does not match the model grid")
        if self.sigma_b <= 0 or self.lam < 0:
            raise ValueError("sigma_b must be positive and lam non-negative")
        for k, ob in self.observations:
            if k < 0:
                raise ValueError("observation steps must be >= 0")
            _check_factor(self.cfg.shape, ob.op.factor)

    @property
    def n_steps(self) -> int:
        return max((k for k, _ in self.observations), default=0)

    def to_physical(self, xi: np.ndarray) -> np.ndarray:
        return destandardize_field(xi, self.norm)

    def obs_std(self) -> np.ndarray:
        return self.norm.x_std.reshape(self.cfg.shape)


def _cost_terms(p: VarProblem, xi: np.ndarray, keep: bool):
    d = xi - p.background
    jb = 0.5 * float(np.sum(d * apply_precision(d, p.sigma_b, p.lam)))
    x0 = p.to_physical(xi)
    traj = swe.propagate(x0, p.cfg, p.n_steps, keep=True) if (keep or p.observations) else None
    jo = 0.0
    resid = []
    for k, ob in p.observations:
        r = apply_obs(standardize_field(traj[k], p.norm), ob.op.factor) - ob.y
        var = ob.op.noise_var if ob.op.noise_var > 0 else 1.0
        jo += 0.5 * float(np.sum(r * r)) / var
        resid.append((k, r, var, ob.op.factor))
    return jb + jo, d, traj, resid


def fourdvar_cost(p: VarProblem, xi: np.ndarray) -> float:
    """Background plus observation misfit; zero-variance observations are weighted as unit variance."""
    return _cost_terms(p, np.asarray(xi, dtype=np.float64), False)[0]


def _cost_grad(p: VarProblem, xi: np.ndarray) -> tuple[float, np.ndarray]:
    cost, d, traj, resid = _cost_terms(p, xi, True)
    grad = apply_precision(d, p.sigma_b, p.lam)
    if resid:
        s = p.obs_std()
        forcing = {}
        for k, r, var, f in resid:
            g = apply_obs_t(r / var, f, p.cfg.shape) / s
            forcing[k] = forcing.get(k, 0.0) + g
        lam = np.zeros(p.cfg.shape)
        for k in range(p.n_steps, -1, -1):
            if k in forcing:
                lam = lam + forcing[k]
            if k > 0:
                lam = swe.adjoint_step(traj[k - 1], lam, p.cfg)
        grad = grad + s * lam
    return cost, grad


def fourdvar_gradient(p: VarProblem, xi: np.ndarray) -> np.ndarray:
    """Exact gradient of :func:`fourdvar_cost` via the discrete adjoint."""
    return _cost_grad(p, np.asarray(xi, dtype=np.float64))[1]


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    converged: bool
    line_search_failed: bool
    history: list[float]


def lbfgs(fg, x0: np.ndarray, memory: int = 10, max_iters: int = 100, gtol_rel: float = 1e-3) -> LbfgsResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    ``fg(x) -> (f, g)`` on flat vectors.  Stops once ``|g| / |g0| < gtol_rel``.
    On line-search failure the best iterate so far is returned with a flag.
    """
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def ev(x):
        key = x.tobytes()
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            f, g = fg(x)
            cache[key] = (f, g.copy())
        return cache[key]

    x = np.array(x0, dtype=np.float64)
    f, g = ev(x)
    g0 = float(np.linalg.norm(g))
    history = [f]
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    f_old = None
    if g0 == 0.0:
        return LbfgsResult(x, f, g, 0, True, False, history)
    for it in range(1, max_iters + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            q -= a * y
            alphas.append((rho, a))
        if s_list:
            q *= np.dot(s_list[-1], y_list[-1]) / np.dot(y_list[-1], y_list[-1])
        else:
            q /= np.linalg.norm(g)  # first step of unit length
        for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        pk = -q
        if np.dot(pk, g) >= 0:
            pk = -g
            s_list.clear()
            y_list.clear()
        alpha, *_ = line_search(lambda z: ev(z)[0], lambda z: ev(z)[1], x, pk, g, f, f_old, c1=1e-4, c2=0.9, maxiter=20)
        if alpha is None:
            return LbfgsResult(x, f, g, it - 1, False, True, history)
        x_new = x + alpha * pk
        f_new, g_new = ev(x_new)
        s_vec, y_vec = x_new - x, g_new - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_list.append(s_vec)
            y_list.append(y_vec)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        f_old, x, f, g = f, x_new, f_new, g_new
        history.append(f)
        if np.linalg.norm(g) / g0 < gtol_rel:
            return LbfgsResult(x, f, g, it, True, False, history)
    return LbfgsResult(x, f, g, max_iters, False, False, history)


@dataclass
class VarResult:
    analysis: np.ndarray  # physical (3, Ny, Nx) at the window start
    analysis_std: np.ndarray  # standardized control
    forecasts: dict[int, np.ndarray]  # step -> physical state
    cost_history: list[float]
    iterations: int
    converged: bool
    line_search_failed: bool


def fourdvar_solve(p: VarProblem, max_iters: int = 100, forecast_steps: Sequence[int] = (), memory: int = 10,
                   gtol_rel: float = 1e-3) -> VarResult:
    """Minimise the 4D-Var cost from the background and forecast the analysis."""
    shape = p.cfg.shape

    def fg(v):
        c, g = _cost_grad(p, v.reshape(shape))
        return c, g.reshape(-1)

    res = lbfgs(fg, p.background.reshape(-1), memory, max_iters, gtol_rel)
    xi = res.x.reshape(shape)
    x0 = p.to_physical(xi)
    forecasts = {}
    if forecast_steps:
        traj = swe.propagate(x0, p.cfg, max(forecast_steps), keep=True)
        forecasts = {k: traj[k] for k in forecast_steps}
    return VarResult(x0, xi, forecasts, res.history, res.iterations, res.converged, res.line_search_failed)


# ---------------------------------------------------------------------------
# observation files

_OBS = struct.Struct("<4sIIddIII")


def write_observation(path, obs: Observation) -> None:
    c, ny, nx = obs.y.shape
    with open(path, "wb") as fp:
        fp.write(_OBS.pack(OBS_MAGIC, VERSION, obs.op.factor, obs.op.noise_var, obs.t, c, ny, nx))
        fp.write(struct.pack("<Q", obs.op.seed))
        fp.write(obs.y.astype("<f8").tobytes())


def read_observation(path) -> Observation:
    with open(path, "rb") as fp:
        data = fp.read()
    if len(data) < _OBS.size + 8:
        raise ValueError("truncated observation file")
    magic, version, factor, var, t, c, ny, nx = _OBS.unpack_from(data)
    if magic != OBS_MAGIC:
        raise ValueError("bad magic: not an LTWO observation")
    if version != VERSION:
        raise ValueError(f"unsupported observation version {version}")
    (seed,) = struct.unpack_from("<Q", data, _OBS.size)
    body = data[_OBS.size + 8:]
    if len(body) != 8 * c * ny * nx:
        raise ValueError("observation payload has the wrong size")
    y = np.frombuffer(body, dtype="<f8").reshape(c, ny, nx).astype(np.float64)
    return Observation(y, t, ObsOperator(factor, var, seed))
