"""Exponential-flow latent maps ``x2 = U exp((t2 - t1) W) U^T x1``.

Covers the fixed-generator map, the hypernetwork variant where ``W`` is produced
from ``(x1, t1, t2)``, POD bases and Galerkin generators, and the perturbation
bound relating the generator mismatch ``||W - M||`` to the flow error.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numkit import RngStream, as_matrix, expm, expm_frechet, spectral_norm, svd_thin

__all__ = [
    "StructuredMap",
    "LinearSystem",
    "StructuredConfig",
    "structured_evaluate",
    "structured_loss",
    "train_structured",
    "pod_basis",
    "galerkin_generator",
    "perturbation_bound",
    "write_structured",
    "read_structured",
]

MAGIC = b"LTSM"
VERSION = 1


@dataclass
class StructuredMap:
    """Generator ``W`` (r x r) or a hypernetwork producing it, plus basis ``U`` (n x r).

    The hypernetwork sees ``[(x1 - in_mean) / in_std, t1, t2]`` and returns the
    ``r*r`` entries of ``W`` in row-major order.
    """

    basis: np.ndarray
    generator: np.ndarray | None = None
    hypernet: ad.Mlp | None = None
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.basis = as_matrix(self.basis, "U")
        r = self.basis.shape[1]
        if (self.generator is None) == (self.hypernet is None):
            raise ValueError("provide exactly one of generator or hypernet")
        if self.generator is not None:
            self.generator = as_matrix(self.generator, "W")
            if self.generator.shape != (r, r):
                raise ValueError(f"generator must be {r}x{r}")
        elif self.hypernet.n_out != r * r:
            raise ValueError("hypernet output must have r*r entries")
        gram = self.basis.T @ self.basis
        if np.linalg.norm(gram - np.eye(r)) > 1e-10:
            raise ValueError("basis columns must be orthonormal")
        n = self.basis.shape[0]
        if self.in_mean is None:
            self.in_mean = np.zeros(n)
        if self.in_std is None:
            self.in_std = np.ones(n)

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def r(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def full_state(cls, n: int, generator=None) -> "StructuredMap":
        return cls(np.eye(n), np.zeros((n, n)) if generator is None else generator)

    def hyper_inputs(self, x1, t1, t2) -> np.ndarray:
        x1 = np.atleast_2d(x1)
        b = x1.shape[0]
        return np.column_stack([(x1 - self.in_mean) / self.in_std,
                                np.broadcast_to(t1, (b,)), np.broadcast_to(t2, (b,))])

    def generators(self, x1, t1, t2) -> np.ndarray:
        """``W`` for each sample, shape ``(B, r, r)``."""
        x1 = np.atleast_2d(x1)
        if self.generator is not None:
            return np.broadcast_to(self.generator, (x1.shape[0], self.r, self.r))
        out = ad.forward(self.hypernet, self.hyper_inputs(x1, t1, t2))[0]
        return out.reshape(-1, self.r, self.r)


@dataclass(frozen=True)
class LinearSystem:
    M: np.ndarray

    def __post_init__(self) -> None:
        as_matrix(self.M, "M")


def structured_evaluate(smap: StructuredMap, x1, t1, t2) -> np.ndarray:
    """``U exp((t2 - t1) W) U^T x1`` for a single state or a batch ``(B, n)``."""
    x1 = np.asarray(x1, dtype=np.float64)
    single = x1.ndim == 1
    xb = np.atleast_2d(x1)
    if xb.shape[1] != smap.n:
        raise ValueError(f"state dim {xb.shape[1]} != map dim {smap.n}")
    b = xb.shape[0]
    h = np.broadcast_to(np.asarray(t2, dtype=np.float64) - np.asarray(t1, dtype=np.float64), (b,))
    z = xb @ smap.basis
    if smap.generator is not None and np.all(h == h[0]):
        z2 = z @ expm(h[0] * smap.generator).T
    else:
        w = smap.generators(xb, t1, t2)
        z2 = np.einsum("bij,bj->bi", expm(h[:, None, None] * w), z)
    out = z2 @ smap.basis.T
    return out[0] if single else out


def structured_loss(smap: StructuredMap, x1, t1, t2, x2, need_grad: bool = True):
    """Mean squared error of the map on a batch and its gradient.

    Returns ``(loss, grad)`` where ``grad`` is ``dL/dW`` for a fixed generator
    or a list aligned with ``hypernet.params()``.
    """
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    b = x1.shape[0]
    h = np.broadcast_to(np.asarray(t2, dtype=np.float64) - np.asarray(t1, dtype=np.float64), (b,)).copy()
    u = smap.basis
    z1 = x1 @ u
    if smap.hypernet is not None:
        w_flat, tape = ad.forward(smap.hypernet, smap.hyper_inputs(x1, t1, t2))
        w = w_flat.reshape(b, smap.r, smap.r)
    else:
        w = np.broadcast_to(smap.generator, (b, smap.r, smap.r))
    a = h[:, None, None] * w
    e = expm(a)
    pred = np.einsum("bij,bj->bi", e, z1) @ u.T
    diff = pred - x2
    loss = float(np.mean(diff * diff))
    if not need_grad:
        return loss, None
    # dL/dexp(A_b) = G_b = (2/size) (U^T r_b) z1_b^T ; dL/dA_b = L(A_b^T, G_b)
    g_out = (2.0 / diff.size) * (diff @ u)
    g_exp = g_out[:, :, None] * z1[:, None, :]
    g_a = expm_frechet(np.swapaxes(a, 1, 2), g_exp)
    g_w = h[:, None, None] * g_a
    if smap.hypernet is None:
        return loss, g_w.sum(axis=0)
    grads, _ = ad.backward(smap.hypernet, tape, g_w.reshape(b, -1))
    return loss, grads


@dataclass
class StructuredConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    schedule: str = "constant"
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)
    target_loss: float = 0.0  # stop early once the train loss falls below this
    # Gap curriculum: only pairs with |t2 - t1| <= cap are used, the cap growing
    # linearly from gap_start to the full range over the first ramp fraction of
    # epochs.  Long gaps make the loss non-convex in W (frequency aliasing).
    gap_start: float | None = None
    gap_ramp: float = 0.5


def _init_hypernet(n: int, r: int, hidden, rng: RngStream) -> ad.Mlp:
    widths = [n + 2, *hidden, r * r]
    acts = ["tanh"] * len(hidden) + ["identity"]
    return ad.Mlp.build(widths, acts, rng, zero_last=True)


def train_structured(ds, r: int | None = None, hypernet: bool = False, cfg: StructuredConfig | None = None,
                     basis=None, history: list | None = None) -> StructuredMap:
    """Fit a structured map to a (denormalized) pair dataset.

    ``W`` starts at zero so the initial map is the identity flow.  For the
    hypernetwork variant the final layer starts at zero, giving the same start.
    """
    cfg = cfg or StructuredConfig()
    if ds.normalized:
        raise ValueError("structured maps are trained on denormalized pairs")
    n = ds.n_x
    u = np.eye(n) if basis is None else as_matrix(basis, "U")
    r = u.shape[1] if r is None else r
    if u.shape != (n, r):
        raise ValueError("basis shape does not match (n_x, r)")
    rng = RngStream(cfg.seed)
    if hypernet:
        idx = ds.train_idx
        xs = np.concatenate([ds.x1[idx], ds.x2[idx]])
        std = xs.std(axis=0)
        smap = StructuredMap(u, hypernet=_init_hypernet(n, r, cfg.hidden, rng.fork(1)),
                             in_mean=xs.mean(axis=0), in_std=np.where(std > 0, std, 1.0))
        params = smap.hypernet.params()
    else:
        smap = StructuredMap(u, np.zeros((r, r)))
        params = [smap.generator]
    opt = ad.AdamState.for_params(params, cfg.lr)
    sched = ad.LrSchedule("step" if cfg.schedule == "step" else "constant", cfg.lr)
    t1, x1, t2, x2 = ds.subset("train")
    order_rng = rng.fork(2)
    gaps = np.abs(t2 - t1)
    full_gap = float(gaps.max(initial=0.0))
    ramp_epochs = max(1, int(cfg.gap_ramp * cfg.epochs))
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(t1))
        if cfg.gap_start is not None and epoch < ramp_epochs:
            cap = cfg.gap_start + (full_gap - cfg.gap_start) * epoch / ramp_epochs
            perm = perm[gaps[perm] <= cap]
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            bi = perm[start:start + cfg.batch_size]
            loss, grad = structured_loss(smap, x1[bi], t1[bi], t2[bi], x2[bi])
            if not np.isfinite(loss):
                raise FloatingPointError(f"NaN loss in structured training at epoch {epoch}")
            total += loss * len(bi)
            ad.adam_step(opt, params, grad if hypernet else [grad])
            if hypernet:
                smap.hypernet.version += 1
        opt.lr = ad.schedule_update(sched, epoch + 1)
        mean_loss = total / max(len(perm), 1)
        if history is not None:
            history.append({"epoch": epoch + 1, "train_loss": mean_loss, "lr": opt.lr})
        if mean_loss < cfg.target_loss:
            break
    return smap


def pod_basis(snapshots, r: int) -> np.ndarray:
    """Leading ``r`` left singular vectors of the snapshot matrix (columns = snapshots)."""
    s = as_matrix(snapshots, "snapshots")
    if r < 1 or r > min(s.shape):
        raise ValueError(f"r={r} must lie in [1, {min(s.shape)}]")
    u, _, _ = svd_thin(s)
    return u[:, :r].copy()


def galerkin_generator(sys: LinearSystem, basis) -> np.ndarray:
    m = as_matrix(sys.M, "M")
    u = as_matrix(basis, "U")
    if m.shape[0] != m.shape[1] or u.shape[0] != m.shape[0]:
        raise ValueError("shape mismatch between M and U")
    return u.T @ m @ u


def perturbation_bound(m, w, horizon: float, x_sup: float) -> float:
    """``H exp(H (||M|| + ||W - M||)) ||W - M|| sup||x1||`` with spectral norms."""
    m = as_matrix(m, "M")
    w = as_matrix(w, "W")
    if m.shape != w.shape:
        raise ValueError("M and W must have the same shape")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    dn = spectral_norm(w - m)
    return float(horizon * np.exp(horizon * (spectral_norm(m) + dn)) * dn * x_sup)


def write_structured(fp, smap: StructuredMap) -> None:
    fp.write(MAGIC)
    fp.write(struct.pack("<IIII", VERSION, smap.n, smap.r, 1 if smap.hypernet is not None else 0))
    fp.write(smap.basis.astype("<f8").tobytes())
    fp.write(smap.in_mean.astype("<f8").tobytes())
    fp.write(smap.in_std.astype("<f8").tobytes())
    if smap.hypernet is None:
        fp.write(smap.generator.astype("<f8").tobytes())
    else:
        ad.write_mlp(fp, smap.hypernet)


def read_structured(fp) -> StructuredMap:
    if fp.read(4) != MAGIC:
        raise ValueError("bad magic: not an LTSM section")
    head = fp.read(16)
    if len(head) != 16:
        raise ValueError("truncated LTSM header")
    version, n, r, hyper = struct.unpack("<IIII", head)
    if version != VERSION:
        raise ValueError(f"unsupported LTSM version {version}")

    def arr(count, shape):
        buf = fp.read(8 * count)
        if len(buf) != 8 * count:
            raise ValueError("truncated LTSM section")
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    basis = arr(n * r, (n, r))
    mean = arr(n, (n,))
    std = arr(n, (n,))
    if hyper:
        return StructuredMap(basis, hypernet=ad.read_mlp(fp), in_mean=mean, in_std=std)
    return StructuredMap(basis, arr(r * r, (r, r)), in_mean=mean, in_std=std)


def structured_to_bytes(smap: StructuredMap) -> bytes:
    buf = io.BytesIO()
    write_structured(buf, smap)
    return buf.getvalue()
