"""Small reverse-mode neural-network stack: dense layers, MSE loss, Adam, LR schedules.

Networks are plain lists of dense layers.  ``forward`` records a tape with the
inputs and outputs of every layer; ``backward`` walks it in reverse.  Inputs may
be a single vector ``(in,)`` or a batch ``(B, in)``; gradients are summed over
the batch, so a mean-reduced loss must hand in an already scaled ``dy``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .numkit import RngStream

ACTIVATIONS = ("identity", "relu", "tanh", "softmax")
_ACT_ID = {name: i for i, name in enumerate(ACTIVATIONS)}

MAGIC = b"LTNN"
VERSION = 1


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in _ACT_ID:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (out, in) and bias (out,)")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]
    # bumped whenever parameters change so stale tapes can be detected
    version: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        activations: Sequence[str] | str,
        rng: RngStream,
        zero_last: bool = False,
        init: str = "xavier",
    ) -> "Mlp":
        """Randomly initialised MLP with ``len(widths) - 1`` layers.

        ``activations`` is one label per layer, or a single label used for all
        layers.  ``init="xavier"`` draws weights from the Glorot uniform range
        with zero biases; ``init="fan-in"`` draws weights and biases from
        ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.  ``zero_last`` zeroes the final
        layer (residual-style start).
        """
        if init not in ("xavier", "fan-in"):
            raise ValueError(f"unknown init {init!r}")
        n = len(widths) - 1
        if isinstance(activations, str):
            activations = [activations] * n
        if len(activations) != n:
            raise ValueError("need one activation per layer")
        layers = []
        for k, (fan_in, fan_out, act) in enumerate(zip(widths[:-1], widths[1:], activations)):
            if init == "xavier":
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                limit = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
                b = rng.uniform(-limit, limit, size=fan_out)
            if zero_last and k == n - 1:
                w = np.zeros_like(w)
                b = np.zeros_like(b)
            layers.append(DenseLayer(w, b, act))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate_backward(dy: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return dy
    if kind == "relu":
        return dy * (y > 0.0)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def forward(net: Mlp, x) -> tuple[np.ndarray, Tape]:
    """Evaluate ``net`` on ``x`` and return ``(y, tape)``.

    Raises ``FloatingPointError`` if any intermediate value is non-finite.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.n_in:
        raise ValueError(f"input dim {h.shape[-1]} != network input dim {net.n_in}")
    inputs, outputs = [], []
    for layer in net.layers:
        inputs.append(h)
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(h)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite activation in forward pass (divergence)")
    return h, Tape(id(net), net.version, inputs, outputs)


def backward(net: Mlp, tape: Tape, dy) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass.  Returns gradients aligned with ``net.params()`` and ``dL/dx``."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise RuntimeError("stale tape: network changed since the forward pass")
    g = np.asarray(dy, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        g = _activate_backward(g, tape.outputs[k], layer.activation)
        x = tape.inputs[k]
        if g.ndim == 1:
            grads[2 * k] = np.outer(g, x)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = g.T @ x
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, g


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


_ADAM_CHUNK = 1 << 15


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    """In-place bias-corrected Adam update; returns ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter / gradient / moment counts differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    # lr * (m / c1) / (sqrt(v / c2) + eps) rearranged so that every
    # array operation runs in place; large arrays go through in cache-sized
    # chunks because the update is memory-bound
    step = state.lr * np.sqrt(c2) / c1
    eps = state.eps * np.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            raise ValueError("parameters and moments must be C-contiguous")
        pf, gf, mf, vf = (a.reshape(-1) for a in (p, np.ascontiguousarray(g), m, v))
        buf = np.empty(min(pf.size, _ADAM_CHUNK))
        for s in range(0, pf.size, _ADAM_CHUNK):
            sl = slice(s, s + _ADAM_CHUNK)
            gs, ms, vs = gf[sl], mf[sl], vf[sl]
            b = buf[:len(gs)]
            np.multiply(gs, 1.0 - b1, out=b)
            ms *= b1
            ms += b
            np.multiply(gs, gs, out=b)
            b *= 1.0 - b2
            vs *= b2
            vs += b
            np.sqrt(vs, out=b)
            b += eps
            np.divide(ms, b, out=b)
            b *= step
            pf[sl] -= b
    return params


@dataclass
class LrSchedule:
    """Learning-rate schedule: ``constant``, ``step`` (halving every ``period``) or ``plateau``."""

    kind: str = "constant"
    lr0: float = 1e-3
    period: int = 250
    factor: float = 0.7
    patience: int = 10
    best: float = field(default=np.inf, init=False)
    bad_epochs: int = field(default=0, init=False)
    lr: float = field(default=0.0, init=False)

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "step", "plateau"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.period < 1 or self.patience < 1:
            raise ValueError("period and patience must be >= 1")
        self.lr = self.lr0


def schedule_update(s: LrSchedule, epoch: int, val_loss: float | None = None) -> float:
    """Learning rate to use after ``epoch`` completed epochs."""
    if s.kind == "step":
        s.lr = s.lr0 * 0.5 ** (epoch // s.period)
    elif s.kind == "plateau" and val_loss is not None:
        if val_loss < s.best:
            s.best = val_loss
            s.bad_epochs = 0
        else:
            s.bad_epochs += 1
            if s.bad_epochs >= s.patience:
                s.lr *= s.factor
                s.bad_epochs = 0
    return s.lr


# ---------------------------------------------------------------------------
# checkpoint container

def write_mlp(fp: BinaryIO, net: Mlp) -> None:
    fp.write(MAGIC)
    fp.write(struct.pack("<II", VERSION, len(net.layers)))
    for layer in net.layers:
        fp.write(struct.pack("<III", layer.n_in, layer.n_out, _ACT_ID[layer.activation]))
        fp.write(layer.weight.astype("<f8").tobytes())
        fp.write(layer.bias.astype("<f8").tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_mlp(fp: BinaryIO) -> Mlp:
    if _read_exact(fp, 4) != MAGIC:
        raise ValueError("bad magic: not an LTNN network")
    version, n_layers = struct.unpack("<II", _read_exact(fp, 8))
    if version != VERSION:
        raise ValueError(f"unsupported LTNN version {version}")
    layers = []
    for _ in range(n_layers):
        n_in, n_out, act = struct.unpack("<III", _read_exact(fp, 12))
        if act >= len(ACTIVATIONS):
            raise ValueError(f"bad activation id {act}")
        w = np.frombuffer(_read_exact(fp, 8 * n_in * n_out), dtype="<f8").reshape(n_out, n_in)
        b = np.frombuffer(_read_exact(fp, 8 * n_out), dtype="<f8")
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), ACTIVATIONS[act]))
    return Mlp(layers)


def mlp_to_bytes(net: Mlp) -> bytes:
    buf = io.BytesIO()
    write_mlp(buf, net)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> Mlp:
    return read_mlp(io.BytesIO(data))


def save_mlp(path, net: Mlp) -> None:
    with open(path, "wb") as fp:
        write_mlp(fp, net)


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fp:
        return read_mlp(fp)
