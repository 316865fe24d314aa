"""Latent Twin model: encoder, time-conditioned latent map, decoder.

The twin predicts ``x(t2) ~ d(m(e(x(t1)), t1, t2))``.  All network components
act on normalized coordinates; :func:`twin_evaluate` handles the conversion so
callers work in physical units.

Three modes are supported:

``identity-ae``
    ``e`` and ``d`` are exact identities, only the latent map is learned.
``mlp``
    MLP encoder/decoder and an MLP (possibly single affine) latent map.
``structured``
    identity (or fixed-basis) autoencoder with an exponential-flow latent map;
    see :mod:`latent_twins.structured`.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import NormStats, PairDataset, normalize
from .numkit import RngStream
from .odelab import Trajectory
from .structured import StructuredMap, read_structured, structured_evaluate, write_structured

__all__ = [
    "TwinArch",
    "TwinModel",
    "TrainConfig",
    "ode_arch",
    "swe_arch",
    "build_twin",
    "twin_evaluate",
    "twin_rollout",
    "train_twin",
    "ErrorBudget",
    "diagnose_error_budget",
    "HorizonProfile",
    "horizon_error_profile",
    "save_twin",
    "load_twin",
    "write_metrics_csv",
]

MODES = ("mlp", "structured", "identity-ae")
MAGIC = b"LTTW"
VERSION = 1


@dataclass
class TwinArch:
    mode: str = "identity-ae"
    n_z: int | None = None  # defaults to n_x in identity mode
    encoder_hidden: tuple[int, ...] = ()
    encoder_activation: str = "relu"
    map_widths: tuple[int, ...] = (16, 8, 4)  # hidden widths of the latent map
    map_activation: str = "softmax"
    residual: bool = False  # m(z, t1, t2) = z + net(z, t1, t2), final layer zero-initialised
    init: str = "fan-in"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def ode_arch(residual: bool = False) -> TwinArch:
    """Uniform ODE setup: identity AE, map ``n_x+2 -> 16 -> 8 -> 4`` (softmax) then linear ``4 -> n_x``."""
    return TwinArch("identity-ae", map_widths=(16, 8, 4), map_activation="softmax", residual=residual)


def swe_arch(hidden: tuple[int, ...] = (1024, 256), n_z: int = 128) -> TwinArch:
    """ReLU MLP autoencoder with a single affine latent map on ``(z, t1, t2)``."""
    return TwinArch("mlp", n_z=n_z, encoder_hidden=hidden, encoder_activation="relu", map_widths=())


@dataclass
class TwinModel:
    n_x: int
    n_z: int
    mode: str
    latent: ad.Mlp | StructuredMap
    norm: NormStats
    encoder: ad.Mlp | None = None
    decoder: ad.Mlp | None = None
    residual: bool = False
    t_range: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown twin mode {self.mode!r}")
        if self.mode == "mlp":
            if self.encoder is None or self.decoder is None:
                raise ValueError("mlp mode needs an encoder and a decoder")
            if (self.encoder.n_in, self.encoder.n_out) != (self.n_x, self.n_z):
                raise ValueError("encoder must map n_x -> n_z")
            if (self.decoder.n_in, self.decoder.n_out) != (self.n_z, self.n_x):
                raise ValueError("decoder must map n_z -> n_x")
        elif self.encoder is not None or self.decoder is not None:
            raise ValueError(f"{self.mode} mode uses an identity autoencoder")
        if isinstance(self.latent, ad.Mlp):
            if self.mode == "structured":
                raise ValueError("structured mode needs a StructuredMap")
            if (self.latent.n_in, self.latent.n_out) != (self.n_z + 2, self.n_z):
                raise ValueError("latent map must take (z, t1, t2) to z")

    @property
    def networks(self) -> list[ad.Mlp]:
        nets = []
        if self.encoder is not None:
            nets.append(self.encoder)
        if isinstance(self.latent, ad.Mlp):
            nets.append(self.latent)
        if self.decoder is not None:
            nets.append(self.decoder)
        return nets

    def n_params(self) -> int:
        n = sum(net.n_params() for net in self.networks)
        if isinstance(self.latent, StructuredMap):
            lat = self.latent
            n += lat.generator.size if lat.generator is not None else lat.hypernet.n_params()
        return n

    # normalized-coordinate building blocks
    def encode(self, xn: np.ndarray) -> np.ndarray:
        return xn if self.encoder is None else ad.forward(self.encoder, xn)[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        return z if self.decoder is None else ad.forward(self.decoder, z)[0]

    def latent_step(self, z: np.ndarray, t1n, t2n) -> np.ndarray:
        if isinstance(self.latent, StructuredMap):
            return structured_evaluate(self.latent, z, t1n, t2n)
        zb = np.atleast_2d(z)
        b = zb.shape[0]
        inp = np.column_stack([zb, np.broadcast_to(t1n, (b,)), np.broadcast_to(t2n, (b,))])
        out = ad.forward(self.latent, inp)[0]
        if self.residual:
            out = out + zb
        return out[0] if np.ndim(z) == 1 else out


def build_twin(n_x: int, arch: TwinArch, norm: NormStats, seed: int = 0) -> TwinModel:
    rng = RngStream(seed)
    if arch.mode == "structured":
        return TwinModel(n_x, n_x, "structured", StructuredMap.full_state(n_x), norm)
    n_z = n_x if arch.mode == "identity-ae" else (arch.n_z or n_x)
    encoder = decoder = None
    if arch.mode == "mlp":
        hid = list(arch.encoder_hidden)
        act = arch.encoder_activation
        encoder = ad.Mlp.build([n_x, *hid, n_z], [act] * len(hid) + ["identity"], rng.fork(1), init=arch.init)
        decoder = ad.Mlp.build([n_z, *hid[::-1], n_x], [act] * len(hid) + ["identity"], rng.fork(2), init=arch.init)
    widths = [n_z + 2, *arch.map_widths, n_z]
    acts = [arch.map_activation] * len(arch.map_widths) + ["identity"]
    latent = ad.Mlp.build(widths, acts, rng.fork(3), zero_last=arch.residual, init=arch.init)
    return TwinModel(n_x, n_z, arch.mode, latent, norm, encoder, decoder, arch.residual)


def _warn_outside(model: TwinModel, t) -> None:
    lo, hi = model.t_range
    t = np.asarray(t)
    if np.any(t < lo - 1e-9 * max(1.0, abs(lo))) or np.any(t > hi + 1e-9 * max(1.0, abs(hi))):
        warnings.warn("query time outside the trained interval", RuntimeWarning, stacklevel=3)


def twin_evaluate(model: TwinModel, x1, t1, t2) -> np.ndarray:
    """Single-shot prediction of the state at ``t2`` from ``x1`` at ``t1`` (physical units).

    ``x1`` may be one state ``(n_x,)`` or a batch ``(B, n_x)`` with matching time arrays.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if x1.shape[-1] != model.n_x:
        raise ValueError(f"state dim {x1.shape[-1]} != model dim {model.n_x}")
    if not np.all(np.isfinite(x1)):
        raise ValueError("x1 has non-finite entries")
    _warn_outside(model, t1)
    _warn_outside(model, t2)
    st = model.norm
    z = model.encode(st.norm_x(x1))
    z2 = model.latent_step(z, st.norm_t(t1), st.norm_t(t2))
    return st.denorm_x(model.decode(z2))


def twin_rollout(model: TwinModel, x0, t0: float, h: float, steps: int) -> Trajectory:
    """Recursive evaluation ``x_{k+1} = twin(x_k, t_k, t_k + h)``."""
    if h == 0:
        raise ValueError("step h must be non-zero")
    x = np.asarray(x0, dtype=np.float64)
    times = [float(t0)]
    states = [x.copy()]
    for k in range(steps):
        tk = t0 + k * h
        x = twin_evaluate(model, x, tk, tk + h)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"rollout diverged at step {k + 1}")
        times.append(t0 + (k + 1) * h)
        states.append(x)
    return Trajectory(np.array(times), np.array(states))


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    schedule: str = "constant"  # constant | step | plateau
    schedule_period: int = 250
    plateau_factor: float = 0.7
    plateau_patience: int = 10
    w_rec: float = 1.0
    w_pred: float = 1.0
    seed: int = 0
    deterministic: bool = True
    restarts: int = 1
    screen_epochs: int = 100
    # optional per-epoch hook(epoch, model, record); used for progress output
    callback: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.w_rec < 0 or self.w_pred < 0 or (self.w_rec == 0 and self.w_pred == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.epochs < 0 or self.batch_size < 1 or self.restarts < 1 or self.screen_epochs < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, restarts >= 1 and screen_epochs >= 1 required")


def _batch_loss(model: TwinModel, x1, t1, t2, x2, cfg: TrainConfig, grad: bool = True):
    """Joint loss ``w_rec*MSE(d(e(x1)), x1) + w_pred*MSE(d(m(e(x1),t1,t2)), x2)``.

    Inputs are normalized.  Returns ``(loss, rec, pred, grads)`` where ``grads``
    aligns with the concatenated parameters of ``model.networks``.
    """
    enc, dec = model.encoder, model.decoder
    if enc is not None:
        z1, tape_e = ad.forward(enc, x1)
    else:
        z1 = x1
    lat_in = np.column_stack([z1, t1, t2])
    z2, tape_m = ad.forward(model.latent, lat_in)
    if model.residual:
        z2 = z2 + z1
    if dec is not None:
        r1, tape_d1 = ad.forward(dec, z1)
        p2, tape_d2 = ad.forward(dec, z2)
        rec, g_r1 = ad.mse_loss(r1, x1)
    else:
        r1, p2 = z1, z2
        rec, g_r1 = 0.0, None
    pred, g_p2 = ad.mse_loss(p2, x2)
    loss = cfg.w_rec * rec + cfg.w_pred * pred
    if not grad:
        return loss, rec, pred, None
    g_p2 = cfg.w_pred * g_p2
    grads_dec = None
    if dec is not None:
        gd1, dz1_rec = ad.backward(dec, tape_d1, cfg.w_rec * g_r1)
        gd2, dz2 = ad.backward(dec, tape_d2, g_p2)
        grads_dec = [a + c for a, c in zip(gd1, gd2)]
    else:
        dz1_rec, dz2 = None, g_p2
    grads_m, dlat = ad.backward(model.latent, tape_m, dz2)
    dz1 = dlat[:, :model.n_z]
    if model.residual:
        dz1 = dz1 + dz2
    grads = []
    if enc is not None:
        grads_e, _ = ad.backward(enc, tape_e, dz1 + dz1_rec)
        grads.extend(grads_e)
    grads.extend(grads_m)
    if grads_dec is not None:
        grads.extend(grads_dec)
    return loss, rec, pred, grads


def evaluate_losses(model: TwinModel, ds: PairDataset, which: str = "test", chunk: int = 2048) -> tuple[float, float]:
    """Reconstruction and prediction MSE (normalized coordinates) on a split."""
    t1, x1, t2, x2 = ds.subset(which)
    if len(t1) == 0:
        return float("nan"), float("nan")
    rec_sum = pred_sum = 0.0
    for s in range(0, len(t1), chunk):
        sl = slice(s, s + chunk)
        z1 = model.encode(x1[sl])
        r1 = model.decode(z1)
        p2 = model.decode(model.latent_step(z1, t1[sl], t2[sl]))
        rec_sum += float(np.sum((r1 - x1[sl]) ** 2))
        pred_sum += float(np.sum((p2 - x2[sl]) ** 2))
    n = x1.size
    return rec_sum / n, pred_sum / n


class _TrainRun:
    """One optimisation run: model, Adam state, schedule, shuffling stream and history."""

    def __init__(self, model: TwinModel, ds: PairDataset, cfg: TrainConfig, seed: int):
        self.model, self.ds, self.cfg = model, ds, cfg
        self.nets = model.networks
        self.params = [p for net in self.nets for p in net.params()]
        self.opt = ad.AdamState.for_params(self.params, cfg.lr)
        self.sched = ad.LrSchedule(cfg.schedule, cfg.lr, cfg.schedule_period, cfg.plateau_factor, cfg.plateau_patience)
        self.order = RngStream(seed).fork(7)
        self.history: list[dict] = []

    def run(self, n_epochs: int, callback: Callable | None = None) -> None:
        model, ds, cfg = self.model, self.ds, self.cfg
        t1, x1, t2, x2 = ds.subset("train")
        n_train = len(t1)
        for _ in range(n_epochs):
            epoch = len(self.history)
            perm = self.order.permutation(n_train)
            total = 0.0
            batches = 0
            for s in range(0, n_train, cfg.batch_size):
                bi = perm[s:s + cfg.batch_size]
                try:
                    loss, _, _, grads = _batch_loss(model, x1[bi], t1[bi], t2[bi], x2[bi], cfg)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"divergence at epoch {epoch}, batch {batches}: {exc}") from exc
                if not math.isfinite(loss):
                    raise FloatingPointError(f"NaN loss at epoch {epoch}, batch {batches}")
                ad.adam_step(self.opt, self.params, grads)
                for net in self.nets:
                    net.version += 1
                total += loss * len(bi)
                batches += 1
            rec, pred = evaluate_losses(model, ds, "test")
            train_loss = total / max(n_train, 1)
            val = cfg.w_rec * rec + cfg.w_pred * pred if len(ds.test_idx) else train_loss
            record = {
                "epoch": epoch + 1,
                "train_loss": train_loss,
                "test_rec_mse": rec,
                "test_pred_mse": pred,
                "lr": self.opt.lr,
                "batches": batches,
            }
            self.history.append(record)
            self.opt.lr = ad.schedule_update(self.sched, epoch + 1, val)
            if callback is not None:
                callback(epoch + 1, model, record)


def train_twin(ds: PairDataset, arch: TwinArch, cfg: TrainConfig, model: TwinModel | None = None):
    """Jointly train autoencoder and latent map on the empirical two-term loss.

    ``ds`` is normalized on entry if needed.  Returns ``(model, history)`` with
    one record per epoch: epoch, train_loss, test_rec_mse, test_pred_mse, lr,
    batches.

    With ``cfg.restarts > 1`` the run is started from that many initialisations
    (seeds ``cfg.seed + k``), each trained for ``cfg.screen_epochs``; the one
    with the lowest training loss is kept and continued to ``cfg.epochs``.
    Selection never looks at the test split.
    """
    if arch.mode == "structured":
        raise ValueError("use structured.train_structured for structured maps")
    ds = normalize(ds)
    if model is not None and cfg.restarts > 1:
        raise ValueError("restarts need freshly built models")
    if "t_span" in ds.meta:
        t_range = tuple(float(v) for v in ds.meta["t_span"])
    else:
        t_all = ds.norm.denorm_t(np.concatenate([ds.t1[ds.train_idx], ds.t2[ds.train_idx]]))
        t_range = (float(t_all.min()), float(t_all.max())) if len(t_all) else (-math.inf, math.inf)

    def start(seed, existing=None):
        m = existing if existing is not None else build_twin(ds.n_x, arch, ds.norm, seed)
        m.norm = ds.norm
        m.t_range = t_range
        return _TrainRun(m, ds, cfg, seed)

    if cfg.restarts <= 1:
        best = start(cfg.seed, model)
    else:
        screen = min(cfg.screen_epochs, cfg.epochs)
        best = None
        for k in range(cfg.restarts):
            run = start(cfg.seed + k)
            run.run(screen)
            if best is None or run.history[-1]["train_loss"] < best.history[-1]["train_loss"]:
                best = run
        if cfg.callback is not None:
            for rec in best.history:
                cfg.callback(rec["epoch"], best.model, rec)
    best.run(cfg.epochs - len(best.history), cfg.callback)
    return best.model, best.history


def write_metrics_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["epoch", "train_loss", "test_rec_mse", "test_pred_mse", "lr"])
        for r in history:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["test_rec_mse"]), repr(r["test_pred_mse"]), repr(r["lr"])])


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class ErrorBudget:
    eps_ae: float
    eps_map: float
    lipschitz_decoder: float
    lipschitz_flow: float
    horizon: float
    bound: float
    max_error: float
    errors: np.ndarray = field(repr=False)

    @property
    def holds(self) -> bool:
        return bool(np.all(self.errors <= self.bound))


def diagnose_error_budget(
    model: TwinModel,
    ds: PairDataset,
    lipschitz_flow: float = 0.0,
    horizon: float | None = None,
    n_random_pairs: int = 2000,
    seed: int = 0,
) -> ErrorBudget:
    """Measure the terms of the uniform error bound on the test split.

    Everything is in normalized coordinates.  ``eps_map`` is measured against
    encoded targets ``e(x2)``; the decoder Lipschitz estimate is the largest
    difference quotient over the pairs ``(m(e(x1)), e(x2))`` plus random pairs of
    test latents, which makes the triangle-inequality bound hold sample-wise.
    The flow Lipschitz constant comes from trajectory sensitivity sampling
    (see :func:`estimate_flow_lipschitz`).
    """
    ds = normalize(ds)
    t1, x1, t2, x2 = ds.subset("test")
    if len(t1) == 0:
        raise ValueError("empty test set")
    z1 = model.encode(x1)
    z2 = model.encode(x2)
    zhat = model.latent_step(z1, t1, t2)
    states = np.concatenate([x1, x2])
    recon = model.decode(model.encode(states))
    eps_ae = float(np.max(np.linalg.norm(recon - states, axis=1)))
    eps_map = float(np.max(np.linalg.norm(zhat - z2, axis=1)))
    pred = model.decode(zhat)
    errors = np.linalg.norm(pred - x2, axis=1)

    if model.decoder is None:
        lip_d = 1.0
    else:
        rng = RngStream(seed)
        za = [zhat]
        zb = [z2]
        zs = np.concatenate([z1, z2])
        i = rng.integers(0, len(zs), n_random_pairs)
        j = rng.integers(0, len(zs), n_random_pairs)
        za.append(zs[i])
        zb.append(zs[j])
        za = np.concatenate(za)
        zb = np.concatenate(zb)
        dz = np.linalg.norm(za - zb, axis=1)
        dd = np.linalg.norm(model.decode(za) - model.decode(zb), axis=1)
        ok = dz > 0
        lip_d = float(np.max(dd[ok] / dz[ok])) if ok.any() else 0.0

    if horizon is None:
        horizon = float(np.max(np.abs(ds.norm.denorm_t(t2) - ds.norm.denorm_t(t1))))
    bound = (1.0 + math.exp(lipschitz_flow * horizon)) * eps_ae + lip_d * eps_map
    return ErrorBudget(eps_ae, eps_map, lip_d, lipschitz_flow, horizon, bound, float(errors.max()), errors)


def estimate_flow_lipschitz(
    propagate: Callable[[np.ndarray, float, float], np.ndarray],
    states: np.ndarray,
    t1: np.ndarray,
    t2: np.ndarray,
    rel_perturbation: float = 1e-4,
    seed: int = 0,
) -> float:
    """Sensitivity-sampled exponent ``L_G`` with ``||dPhi|| <= e^{L_G |t2 - t1|} ||dx||``.

    ``propagate(x, t1, t2)`` maps a (normalized) state across the gap.  Each
    sample perturbs its state in a random direction and records
    ``log(ratio) / |t2 - t1|``; the maximum (clipped at 0) is returned.
    """
    rng = RngStream(seed)
    best = 0.0
    for x, a, b in zip(states, t1, t2):
        gap = abs(b - a)
        if gap == 0:
            continue
        d = rng.gaussian(0.0, 1.0, x.shape)
        d *= rel_perturbation * max(np.linalg.norm(x), 1.0) / np.linalg.norm(d)
        ratio = np.linalg.norm(propagate(x + d, a, b) - propagate(x, a, b)) / np.linalg.norm(d)
        if ratio > 0:
            best = max(best, math.log(ratio) / gap)
    return best


@dataclass
class HorizonProfile:
    t1: float
    t2: np.ndarray
    truth: np.ndarray
    direct: np.ndarray
    rollout: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.t2 - self.t1)

    @property
    def direct_err(self) -> np.ndarray:
        return np.linalg.norm(self.direct - self.truth, axis=1)

    @property
    def rollout_err(self) -> np.ndarray:
        return np.linalg.norm(self.rollout - self.truth, axis=1)

    def mse(self, which: str = "direct", skip_anchor: bool = True) -> float:
        pred = self.direct if which == "direct" else self.rollout
        sl = slice(1, None) if skip_anchor else slice(None)
        return float(np.mean((pred[sl] - self.truth[sl]) ** 2))

    def slope(self, which: str = "direct") -> float:
        """Least-squares slope of ``log(error)`` against ``|t2 - t1|`` (anchor excluded)."""
        err = self.direct_err if which == "direct" else self.rollout_err
        return log_error_slope(self.gap[1:], err[1:])

    def rows(self):
        for k in range(len(self.t2)):
            yield self.t2[k], self.gap[k], self.direct_err[k], self.rollout_err[k]


def log_error_slope(gap: np.ndarray, err: np.ndarray, floor: float = 1e-300) -> float:
    y = np.log(np.maximum(err, floor))
    g = gap - gap.mean()
    return float(np.dot(g, y - y.mean()) / np.dot(g, g))


def horizon_error_profile(model: TwinModel, reference: Trajectory, t1: float, h: float, steps: int) -> HorizonProfile:
    """Direct and recursive errors on the grid ``t2 = t1 + k h``, ``k = 0..steps``.

    The reference must provide states at those times (dense-output trajectory or
    a sampled trajectory whose times contain the grid).
    """
    grid = t1 + h * np.arange(steps + 1)
    truth = _states_at(reference, grid)
    x1 = truth[0]
    direct = twin_evaluate(model, np.repeat(x1[None, :], len(grid), axis=0), np.full(len(grid), t1), grid)
    roll = twin_rollout(model, x1, t1, h, steps).states
    return HorizonProfile(float(t1), grid, truth, direct, roll)


def _states_at(reference: Trajectory, times: np.ndarray) -> np.ndarray:
    if reference.coeffs is not None and len(reference.coeffs):
        return reference.at(times)
    idx = np.searchsorted(reference.times, times)
    idx = np.clip(idx, 0, len(reference.times) - 1)
    if not np.allclose(reference.times[idx], times, rtol=0, atol=1e-9 * max(1.0, float(np.abs(times).max()))):
        return reference.at(times)
    return reference.states[idx]


def write_profile_csv(path, prof: HorizonProfile) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["t2", "gap", "direct_err", "rollout_err"])
        for row in prof.rows():
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# checkpoints

_MODE_ID = {m: i for i, m in enumerate(MODES)}
_SECTIONS = (b"ENC ", b"MAP ", b"DEC ")


def save_twin(path, model: TwinModel) -> None:
    """Header (mode, dims, NormStats) followed by tagged LTNN/LTSM sections."""
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<IIIII", VERSION, _MODE_ID[model.mode], model.n_x, model.n_z, int(model.residual)))
        fp.write(struct.pack("<dd", *model.t_range))
        st = model.norm
        fp.write(struct.pack("<dd", st.t_mean, st.t_std))
        fp.write(st.x_mean.astype("<f8").tobytes())
        fp.write(st.x_std.astype("<f8").tobytes())
        for tag, part in zip(_SECTIONS, (model.encoder, model.latent, model.decoder)):
            if part is None:
                blob = b""
            elif isinstance(part, StructuredMap):
                buf = io.BytesIO()
                write_structured(buf, part)
                blob = buf.getvalue()
            else:
                blob = ad.mlp_to_bytes(part)
            fp.write(tag)
            fp.write(struct.pack("<Q", len(blob)))
            fp.write(blob)


def load_twin(path) -> TwinModel:
    with open(path, "rb") as fp:
        data = fp.read()
    buf = io.BytesIO(data)

    def take(n):
        out = buf.read(n)
        if len(out) != n:
            raise ValueError("truncated twin checkpoint")
        return out

    if take(4) != MAGIC:
        raise ValueError("bad magic: not a twin checkpoint")
    version, mode_id, n_x, n_z, residual = struct.unpack("<IIIII", take(20))
    if version != VERSION:
        raise ValueError(f"unsupported twin checkpoint version {version}")
    t_lo, t_hi = struct.unpack("<dd", take(16))
    t_mean, t_std = struct.unpack("<dd", take(16))
    x_mean = np.frombuffer(take(8 * n_x), dtype="<f8").astype(np.float64)
    x_std = np.frombuffer(take(8 * n_x), dtype="<f8").astype(np.float64)
    parts = []
    for tag in _SECTIONS:
        if take(4) != tag:
            raise ValueError(f"expected section {tag!r}")
        (n,) = struct.unpack("<Q", take(8))
        blob = take(n)
        if not blob:
            parts.append(None)
        elif blob[:4] == b"LTSM":
            parts.append(read_structured(io.BytesIO(blob)))
        else:
            parts.append(ad.mlp_from_bytes(blob))
    return TwinModel(n_x, n_z, MODES[mode_id], parts[1], NormStats(x_mean, x_std, t_mean, t_std),
                     parts[0], parts[2], bool(residual), (t_lo, t_hi))
