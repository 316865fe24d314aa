"""Comparison models: a many-to-one LSTM and a branch/trunk DeepONet.

The LSTM maps a window of ``W`` consecutive (normalized) states to the next
state and is rolled out autoregressively.  Gates are ordered
``input, forget, cell, output``; back-propagation through time is written out
by hand.

The DeepONet encodes the initial field with a branch MLP and a query point
``(chi1, chi2, t)`` with a trunk MLP; each output channel is a bias-free
linear head on the elementwise product ``branch * trunk``.
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datasets import NormStats
from .numkit import RngStream
from .odelab import Trajectory

__all__ = [
    "LstmModel",
    "lstm_init",
    "lstm_param_count",
    "lstm_forward",
    "lstm_backward",
    "lstm_predict",
    "make_windows",
    "LstmConfig",
    "lstm_train",
    "lstm_rollout",
    "DeepOnetModel",
    "deeponet_init",
    "deeponet_loss",
    "deeponet_evaluate",
    "deeponet_field",
    "DeepOnetConfig",
    "deeponet_train",
    "save_baseline",
    "load_baseline",
]

MAGIC = b"LTBL"
VERSION = 1
KIND_LSTM, KIND_DEEPONET = 0, 1


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LstmModel:
    n_x: int
    hidden: int
    w_x: np.ndarray  # (4h, n_x)
    w_h: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)
    w_out: np.ndarray  # (n_x, h)
    b_out: np.ndarray  # (n_x,)
    norm: NormStats | None = None
    window: int = 10

    def params(self) -> list[np.ndarray]:
        return [self.w_x, self.w_h, self.b, self.w_out, self.b_out]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))


def lstm_param_count(n_x: int, h: int) -> int:
    return 4 * (h * h + h * n_x + h) + h * n_x + n_x


def lstm_init(n_x: int, hidden: int, seed: int = 0, window: int = 10) -> LstmModel:
    """Uniform ``+-1/sqrt(h)`` initialisation; forget-gate bias starts at 1."""
    rng = RngStream(seed)
    k = 1.0 / math.sqrt(hidden)
    b = rng.uniform(-k, k, 4 * hidden)
    b[hidden:2 * hidden] += 1.0
    return LstmModel(
        n_x,
        hidden,
        rng.uniform(-k, k, (4 * hidden, n_x)),
        rng.uniform(-k, k, (4 * hidden, hidden)),
        b,
        rng.uniform(-k, k, (n_x, hidden)),
        np.zeros(n_x),
        window=window,
    )


def lstm_forward(m: LstmModel, xs: np.ndarray):
    """Run the cell over ``xs`` of shape ``(B, W, n_x)``; return ``(y, cache)`` with ``y`` ``(B, n_x)``."""
    bsz, w, _ = xs.shape
    h = np.zeros((bsz, m.hidden))
    c = np.zeros((bsz, m.hidden))
    cache = []
    H = m.hidden
    for k in range(w):
        a = xs[:, k] @ m.w_x.T + h @ m.w_h.T + m.b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((xs[:, k], h, c, i, f, g, o, tc))
        h, c = h_new, c_new
    y = h @ m.w_out.T + m.b_out
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite LSTM output")
    return y, (cache, h)


def lstm_backward(m: LstmModel, cache, dy: np.ndarray) -> list[np.ndarray]:
    """Gradients aligned with ``m.params()`` for upstream gradient ``dy`` ``(B, n_x)``."""
    steps, h_last = cache
    g_wx = np.zeros_like(m.w_x)
    g_wh = np.zeros_like(m.w_h)
    g_b = np.zeros_like(m.b)
    g_wout = dy.T @ h_last
    g_bout = dy.sum(axis=0)
    dh = dy @ m.w_out
    dc = np.zeros_like(dh)
    for x, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
        g_wx += da.T @ x
        g_wh += da.T @ h_prev
        g_b += da.sum(axis=0)
        dh = da @ m.w_h
        dc = dc * f
    return [g_wx, g_wh, g_b, g_wout, g_bout]


def lstm_predict(m: LstmModel, window: np.ndarray) -> np.ndarray:
    """Next physical state from a physical window ``(W, n_x)`` or batch ``(B, W, n_x)``."""
    w = np.asarray(window, dtype=np.float64)
    single = w.ndim == 2
    wb = w[None] if single else w
    st = m.norm or NormStats.identity(m.n_x)
    y = st.denorm_x(lstm_forward(m, st.norm_x(wb))[0])
    return y[0] if single else y


def make_windows(states: np.ndarray, window: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Overlapping ``window``-to-1 pairs from a ``(K, n_x)`` sequence."""
    k = len(states) - window
    if k < 1:
        raise ValueError("sequence shorter than the window")
    idx = np.arange(window)[None, :] + np.arange(k)[:, None]
    return states[idx], states[window:]


@dataclass
class LstmConfig:
    hidden: int = 10
    window: int = 10
    epochs: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    train_frac: float = 0.8
    seed: int = 0


def lstm_train(states: np.ndarray, cfg: LstmConfig):
    """Train on windows cut from one sampled trajectory ``(K, n_x)`` (random 80/20 window split).

    Returns ``(model, history)``; history rows hold epoch, train and validation MSE.
    """
    states = np.asarray(states, dtype=np.float64)
    n_x = states.shape[1]
    xs, ys = make_windows(states, cfg.window)
    rng = RngStream(cfg.seed)
    perm = rng.fork(1).permutation(len(xs))
    n_tr = int(round(cfg.train_frac * len(xs)))
    tr, va = perm[:n_tr], perm[n_tr:]
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    norm = NormStats(mean, np.where(std > 0, std, 1.0))
    xs_n, ys_n = norm.norm_x(xs), norm.norm_x(ys)
    m = lstm_init(n_x, cfg.hidden, cfg.seed, cfg.window)
    m.norm = norm
    params = m.params()
    opt = ad.AdamState.for_params(params, cfg.lr)
    order = rng.fork(2)
    history = []
    for epoch in range(cfg.epochs):
        p = tr[order.permutation(len(tr))]
        total = 0.0
        for s in range(0, len(p), cfg.batch_size):
            bi = p[s:s + cfg.batch_size]
            y, cache = lstm_forward(m, xs_n[bi])
            loss, dy = ad.mse_loss(y, ys_n[bi])
            if not math.isfinite(loss):
                raise FloatingPointError(f"NaN loss at epoch {epoch}")
            ad.adam_step(opt, params, lstm_backward(m, cache, dy))
            total += loss * len(bi)
        val = float(np.mean((lstm_forward(m, xs_n[va])[0] - ys_n[va]) ** 2)) if len(va) else float("nan")
        history.append({"epoch": epoch + 1, "train_mse": total / max(len(tr), 1), "val_mse": val})
    return m, history


def lstm_rollout(m: LstmModel, seed_window: np.ndarray, steps: int, t0: float = 0.0, dt: float = 1.0,
                 truth: np.ndarray | None = None):
    """Autoregressive continuation from ``W`` physical states.

    Returns ``(traj, errors)``: the ``steps`` predicted states stamped at
    ``t0 + (W + k) * dt`` (``t0`` being the time of the first seed state), and
    per-step Euclidean errors against ``truth`` (``(steps, n_x)``) when given.
    """
    w = np.asarray(seed_window, dtype=np.float64)
    if w.shape != (m.window, m.n_x):
        raise ValueError(f"seed window must have shape ({m.window}, {m.n_x})")
    buf = list(w)
    out = []
    for k in range(steps):
        nxt = lstm_predict(m, np.array(buf[-m.window:]))
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"LSTM rollout diverged at step {k + 1}")
        out.append(nxt)
        buf.append(nxt)
    states = np.array(out).reshape(steps, m.n_x)
    times = t0 + (m.window + np.arange(steps)) * dt
    errors = None
    if truth is not None:
        errors = np.linalg.norm(states - np.asarray(truth)[:steps], axis=1)
    return Trajectory(times, states), errors


# ---------------------------------------------------------------------------
# DeepONet

@dataclass
class DeepOnetModel:
    branch: ad.Mlp
    trunk: ad.Mlp
    heads: np.ndarray  # (channels, p)
    norm: NormStats  # field standardization (channel-wise)
    half_width: float = 5e5
    t_max: float = 3.06e4
    grid: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        if self.branch.n_out != self.trunk.n_out or self.heads.shape[1] != self.branch.n_out:
            raise ValueError("branch, trunk and head widths must agree")
        if self.trunk.n_in != 3:
            raise ValueError("trunk takes (chi1, chi2, t)")

    @property
    def channels(self) -> int:
        return self.heads.shape[0]

    def n_params(self) -> int:
        return self.branch.n_params() + self.trunk.n_params() + self.heads.size

    def scale_query(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return np.column_stack([q[:, 0] / self.half_width, q[:, 1] / self.half_width, q[:, 2] / self.t_max])


def deeponet_init(n_in: int, grid: tuple[int, int], norm: NormStats, seed: int = 0,
                  branch_hidden: Sequence[int] = (512, 512, 256), trunk_hidden: Sequence[int] = (64, 128),
                  p: int = 128, channels: int = 3, half_width: float = 5e5, t_max: float = 3.06e4) -> DeepOnetModel:
    rng = RngStream(seed)
    bw = [n_in, *branch_hidden, p]
    tw = [3, *trunk_hidden, p]
    branch = ad.Mlp.build(bw, ["relu"] * len(branch_hidden) + ["identity"], rng.fork(1), init="fan-in")
    trunk = ad.Mlp.build(tw, ["relu"] * (len(tw) - 1), rng.fork(2), init="fan-in")
    heads = rng.fork(3).uniform(-1.0 / math.sqrt(p), 1.0 / math.sqrt(p), (channels, p))
    return DeepOnetModel(branch, trunk, heads, norm, half_width, t_max, grid)


def _don_forward(m: DeepOnetModel, x0s: np.ndarray, qs: np.ndarray):
    """Standardized outputs ``(B, Q, C)`` for standardized inputs ``(B, n_in)`` and scaled queries ``(Q, 3)``."""
    b, tape_b = ad.forward(m.branch, x0s)
    tau, tape_t = ad.forward(m.trunk, qs)
    out = np.stack([(b * w) @ tau.T for w in m.heads], axis=-1)
    return out, (b, tau, tape_b, tape_t)


def deeponet_loss(m: DeepOnetModel, x0s: np.ndarray, qs: np.ndarray, target: np.ndarray):
    """MSE against standardized ``target`` ``(B, Q, C)`` and gradients for branch, trunk and heads params."""
    out, (bv, tau, tape_b, tape_t) = _don_forward(m, x0s, qs)
    loss, g = ad.mse_loss(out, target)
    g_heads = np.empty_like(m.heads)
    g_b = np.zeros_like(bv)
    g_tau = np.zeros_like(tau)
    for ch, w in enumerate(m.heads):
        gc = g[..., ch]  # (B, Q)
        mc = gc @ tau  # (B, p)
        g_heads[ch] = np.sum(mc * bv, axis=0)
        g_b += mc * w
        g_tau += gc.T @ (bv * w)
    grads_b, _ = ad.backward(m.branch, tape_b, g_b)
    grads_t, _ = ad.backward(m.trunk, tape_t, g_tau)
    return loss, grads_b + grads_t + [g_heads]


def deeponet_evaluate(m: DeepOnetModel, x0: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Physical ``(eta, u, v)`` at query points ``(Q, 3)`` of ``(chi1, chi2, t)`` for one flattened initial field."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if np.any(np.abs(q[:, :2]) > m.half_width) or np.any(q[:, 2] < 0) or np.any(q[:, 2] > m.t_max):
        warnings.warn("DeepONet query outside the training domain", RuntimeWarning, stacklevel=2)
    x0s = m.norm.norm_x(np.asarray(x0, dtype=np.float64).reshape(1, -1))
    out = _don_forward(m, x0s, m.scale_query(q))[0][0]  # (Q, C)
    return _destd_points(m, out)


def _channel_stats(m: DeepOnetModel) -> tuple[np.ndarray, np.ndarray]:
    per = m.grid[0] * m.grid[1]
    return m.norm.x_mean[::per][: m.channels], m.norm.x_std[::per][: m.channels]


def _destd_points(m: DeepOnetModel, out: np.ndarray) -> np.ndarray:
    mu, sd = _channel_stats(m)
    return out * sd + mu


def grid_queries(xc: np.ndarray, yc: np.ndarray, t: float) -> np.ndarray:
    xx, yy = np.meshgrid(xc, yc)
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, t)])


def deeponet_field(m: DeepOnetModel, x0: np.ndarray, xc: np.ndarray, yc: np.ndarray, t: float) -> np.ndarray:
    """Full ``(C, Ny, Nx)`` physical field at time ``t``."""
    out = deeponet_evaluate(m, x0, grid_queries(xc, yc, t))
    return out.T.reshape(m.channels, len(yc), len(xc))


@dataclass
class DeepOnetConfig:
    epochs: int = 200
    batch_size: int = 16
    n_query: int = 10_000
    lr: float = 1e-3
    train_frac: float = 0.95
    seed: int = 0


def deeponet_train(trajectories: Sequence, norm: NormStats, cfg: DeepOnetConfig,
                   model: DeepOnetModel | None = None, split: tuple[np.ndarray, np.ndarray] | None = None):
    """Fit the operator ``x0 -> x(chi, t)`` on whole trajectories.

    Each batch shares one draw of ``cfg.n_query`` (cell, snapshot) query
    points.  ``split`` overrides the default random 95/5 trajectory split.
    Returns ``(model, history, (train_ids, test_ids))``.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    tr0 = trajectories[0]
    k_snap, c, ny, nx = tr0.fields.shape
    cfg_sw = tr0.cfg
    rng = RngStream(cfg.seed)
    if split is None:
        perm = rng.fork(1).permutation(len(trajectories))
        n_tr = max(1, int(round(cfg.train_frac * len(trajectories))))
        split = (np.sort(perm[:n_tr]), np.sort(perm[n_tr:]))
    train_ids, test_ids = split
    if model is None:
        model = deeponet_init(c * ny * nx, (ny, nx), norm, cfg.seed, channels=c, half_width=cfg_sw.half_width,
                              t_max=float(tr0.times[-1]))
    std_fields = [norm.norm_x(tr.fields.reshape(len(tr.times), -1)).reshape(tr.fields.shape) for tr in trajectories]
    x0s = np.array([f[0].reshape(-1) for f in std_fields])
    xc, yc = cfg_sw.xc, cfg_sw.yc
    params = model.branch.params() + model.trunk.params() + [model.heads]
    opt = ad.AdamState.for_params(params, cfg.lr)
    order = rng.fork(2)
    qrng = rng.fork(3)
    history = []
    for epoch in range(cfg.epochs):
        perm = train_ids[order.permutation(len(train_ids))]
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            bi = perm[s:s + cfg.batch_size]
            kk = qrng.integers(0, k_snap, cfg.n_query)
            ii = qrng.integers(0, ny, cfg.n_query)
            jj = qrng.integers(0, nx, cfg.n_query)
            q = np.column_stack([xc[jj], yc[ii], tr0.times[kk]])
            target = np.stack([std_fields[b][kk, :, ii, jj] for b in bi])  # (B, Q, C)
            loss, grads = deeponet_loss(model, x0s[bi], model.scale_query(q), target)
            if not math.isfinite(loss):
                raise FloatingPointError(f"NaN loss at epoch {epoch}")
            ad.adam_step(opt, params, grads)
            model.branch.version += 1
            model.trunk.version += 1
            total += loss * len(bi)
        history.append({"epoch": epoch + 1, "train_mse": total / max(len(train_ids), 1)})
    return model, history, (train_ids, test_ids)


# ---------------------------------------------------------------------------
# checkpoints

def _write_arrays(fp, arrays: Sequence[np.ndarray]) -> None:
    fp.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        fp.write(struct.pack("<I", a.ndim))
        fp.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fp.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_arrays(fp) -> list[np.ndarray]:
    def take(n):
        b = fp.read(n)
        if len(b) != n:
            raise ValueError("truncated baseline checkpoint")
        return b

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nd,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(np.prod(shape)) if nd else 1
        out.append(np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
    return out


def save_baseline(path, model: LstmModel | DeepOnetModel) -> None:
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        if isinstance(model, LstmModel):
            fp.write(struct.pack("<III", VERSION, KIND_LSTM, model.window))
            st = model.norm or NormStats.identity(model.n_x)
            _write_arrays(fp, model.params() + [st.x_mean, st.x_std])
        else:
            fp.write(struct.pack("<III", VERSION, KIND_DEEPONET, 0))
            _write_arrays(fp, [model.heads, model.norm.x_mean, model.norm.x_std,
                               np.array([model.half_width, model.t_max, *model.grid], dtype=np.float64)])
            for net in (model.branch, model.trunk):
                blob = ad.mlp_to_bytes(net)
                fp.write(struct.pack("<Q", len(blob)))
                fp.write(blob)


def load_baseline(path) -> LstmModel | DeepOnetModel:
    with open(path, "rb") as fp:
        data = fp.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError("bad magic: not a baseline checkpoint")
    version, kind, window = struct.unpack("<III", buf.read(12))
    if version != VERSION:
        raise ValueError(f"unsupported baseline version {version}")
    arrays = _read_arrays(buf)
    if kind == KIND_LSTM:
        w_x, w_h, b, w_out, b_out, mean, std = arrays
        return LstmModel(w_x.shape[1], w_h.shape[1], w_x, w_h, b, w_out, b_out, NormStats(mean, std), window)
    if kind == KIND_DEEPONET:
        heads, mean, std, meta = arrays
        nets = []
        for _ in range(2):
            (n,) = struct.unpack("<Q", buf.read(8))
            nets.append(ad.mlp_from_bytes(buf.read(n)))
        return DeepOnetModel(nets[0], nets[1], heads, NormStats(mean, std), float(meta[0]), float(meta[1]),
                             (int(meta[2]), int(meta[3])))
    raise ValueError(f"unknown baseline kind {kind}")
