"""Random time-pair datasets ``((t1, x1), (t2, x2))`` for training twins.

Pairs are stored column-wise (``t1``, ``x1``, ``t2``, ``x2`` arrays) rather than
as a list of records; :attr:`PairDataset.samples` gives the record view.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numkit import RngStream
from .odelab import OdeSystem, Trajectory, integrate

__all__ = [
    "PairSample",
    "NormStats",
    "PairDataset",
    "compute_norm",
    "sample_pairs_ode",
    "sample_pairs_field",
    "normalize",
    "denormalize",
    "save",
    "load",
    "digest",
]

MAGIC = b"LTW1"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True)
class PairSample:
    t1: float
    x1: np.ndarray
    t2: float
    x2: np.ndarray


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    t_mean: float = 0.0
    t_std: float = 1.0

    def norm_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def denorm_x(self, x):
        return np.asarray(x, dtype=np.float64) * self.x_std + self.x_mean

    def norm_t(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_mean) / self.t_std

    def denorm_t(self, t):
        return np.asarray(t, dtype=np.float64) * self.t_std + self.t_mean

    @classmethod
    def identity(cls, n: int) -> "NormStats":
        return cls(np.zeros(n), np.ones(n), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "t_mean": float(self.t_mean),
            "t_std": float(self.t_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["x_mean"], dtype=np.float64), np.array(d["x_std"], dtype=np.float64),
                   float(d["t_mean"]), float(d["t_std"]))


@dataclass
class PairDataset:
    n_x: int
    t1: np.ndarray
    x1: np.ndarray
    t2: np.ndarray
    x2: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int = 0
    norm: NormStats | None = None
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        j = len(self.t1)
        if self.x1.shape != (j, self.n_x) or self.x2.shape != (j, self.n_x) or self.t2.shape != (j,):
            raise ValueError("inconsistent pair array shapes")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(both) != j or len(np.unique(both)) != j:
            raise ValueError("train/test split must be disjoint and exhaustive")

    def __len__(self) -> int:
        return len(self.t1)

    @property
    def samples(self) -> list[PairSample]:
        return [PairSample(float(a), b, float(c), d) for a, b, c, d in zip(self.t1, self.x1, self.t2, self.x2)]

    def subset(self, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        idx = self.train_idx if which == "train" else self.test_idx
        return self.t1[idx], self.x1[idx], self.t2[idx], self.x2[idx]


def _split(j: int, seed: int, train_frac: float) -> tuple[np.ndarray, np.ndarray]:
    perm = RngStream(seed).fork(0xA11).permutation(j)
    n_train = int(round(train_frac * j))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def compute_norm(ds: PairDataset, channels: int | None = None) -> NormStats:
    """Statistics of the training split, pooling ``x1``/``x2`` and ``t1``/``t2``.

    With ``channels`` set, the state vector is treated as ``channels`` equal
    blocks (e.g. eta, u, v of a flattened field) sharing one mean/std each.
    Zero-variance entries get ``std = 1``.
    """
    idx = ds.train_idx if len(ds.train_idx) else np.arange(len(ds))
    if len(idx) == 0:
        return NormStats.identity(ds.n_x)
    xs = np.concatenate([ds.x1[idx], ds.x2[idx]])
    ts = np.concatenate([ds.t1[idx], ds.t2[idx]])
    if channels:
        blocks = xs.reshape(len(xs), channels, -1)
        cm = blocks.mean(axis=(0, 2))
        cs = blocks.std(axis=(0, 2))
        cs = np.where(cs > 0, cs, 1.0)
        per = ds.n_x // channels
        mean, std = np.repeat(cm, per), np.repeat(cs, per)
    else:
        mean = xs.mean(axis=0)
        std = xs.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    t_std = float(ts.std())
    return NormStats(mean, std, float(ts.mean()), t_std if t_std > 0 else 1.0)


def sample_pairs_ode(
    sys: OdeSystem,
    J: int,
    gap_cap: float | None = None,
    seed: int = 0,
    reference: Trajectory | None = None,
    times: tuple[Sequence[float], Sequence[float]] | None = None,
    train_frac: float = 0.8,
) -> PairDataset:
    """Draw ``J`` pairs from the reference trajectory of ``sys`` on ``[0, T]``.

    ``t1`` and ``t2`` are independent uniforms; with ``gap_cap`` the offending
    pairs are redrawn until ``|t2 - t1| <= gap_cap``.  Explicit ``times`` bypass
    the sampler.
    """
    if J < 1 and times is None:
        raise ValueError("J must be >= 1")
    if gap_cap is not None and gap_cap <= 0:
        raise ValueError("gap cap must be positive")
    t0, T = sys.t_span
    if reference is None:
        reference = integrate(sys, sys.x0, t0, T)
    if times is not None:
        t1 = np.asarray(times[0], dtype=np.float64)
        t2 = np.asarray(times[1], dtype=np.float64)
        J = len(t1)
    else:
        rng = RngStream(seed)
        t1 = rng.uniform(t0, T, J)
        t2 = rng.uniform(t0, T, J)
        if gap_cap is not None and np.isfinite(gap_cap):
            bad = np.abs(t2 - t1) > gap_cap
            while bad.any():
                k = int(bad.sum())
                t1[bad] = rng.uniform(t0, T, k)
                t2[bad] = rng.uniform(t0, T, k)
                bad = np.abs(t2 - t1) > gap_cap
    x1 = reference.at(t1).reshape(J, sys.dim)
    x2 = reference.at(t2).reshape(J, sys.dim)
    tr, te = _split(J, seed, train_frac)
    ds = PairDataset(sys.dim, t1, x1, t2, x2, tr, te, seed,
                     meta={"source": sys.name, "gap_cap": gap_cap if gap_cap is not None else "inf",
                           "t_span": [float(t0), float(T)]})
    ds.norm = compute_norm(ds)
    return ds


def sample_pairs_field(
    trajectories: Sequence,
    J: int,
    seed: int = 0,
    train_frac: float = 0.8,
    channels: int = 3,
) -> PairDataset:
    """Pairs drawn uniformly over (trajectory, t1 snapshot, t2 snapshot).

    Each trajectory needs ``times`` (K,) and ``fields`` (K, channels, Ny, Nx);
    states are flattened channel-major.
    """
    if not trajectories:
        raise ValueError("no trajectories supplied")
    rng = RngStream(seed)
    which = rng.integers(0, len(trajectories), J)
    flat = [np.asarray(tr.fields, dtype=np.float64).reshape(len(tr.times), -1) for tr in trajectories]
    n_x = flat[0].shape[1]
    t1 = np.empty(J)
    t2 = np.empty(J)
    x1 = np.empty((J, n_x))
    x2 = np.empty((J, n_x))
    for j, w in enumerate(which):
        k = len(trajectories[w].times)
        a, b = rng.integers(0, k, 2)
        t1[j], t2[j] = trajectories[w].times[a], trajectories[w].times[b]
        x1[j], x2[j] = flat[w][a], flat[w][b]
    tr, te = _split(J, seed, train_frac)
    ds = PairDataset(n_x, t1, x1, t2, x2, tr, te, seed,
                     meta={"source": "field", "trajectory": which.tolist(), "channels": channels})
    ds.norm = compute_norm(ds, channels=channels)
    return ds


def normalize(ds: PairDataset) -> PairDataset:
    """Return a normalized copy (statistics from the training split only)."""
    if ds.normalized:
        return ds
    stats = ds.norm if ds.norm is not None else compute_norm(ds)
    return replace(
        ds,
        t1=stats.norm_t(ds.t1),
        x1=stats.norm_x(ds.x1),
        t2=stats.norm_t(ds.t2),
        x2=stats.norm_x(ds.x2),
        norm=stats,
        normalized=True,
    )


def denormalize(stats: NormStats, x) -> np.ndarray:
    return stats.denorm_x(x)


def _path_sidecar(path) -> str:
    return os.fspath(path) + ".json"


def save(ds: PairDataset, path) -> None:
    """Write the binary pair file and its JSON sidecar (``<path>.json``)."""
    rec = np.empty((len(ds), 2 * ds.n_x + 2), dtype="<f8")
    rec[:, 0] = ds.t1
    rec[:, 1:1 + ds.n_x] = ds.x1
    rec[:, 1 + ds.n_x] = ds.t2
    rec[:, 2 + ds.n_x:] = ds.x2
    with open(path, "wb") as fp:
        fp.write(_HEADER.pack(MAGIC, VERSION, ds.n_x, len(ds)))
        fp.write(rec.tobytes())
    side = {
        "seed": ds.seed,
        "normalized": ds.normalized,
        "norm": ds.norm.to_dict() if ds.norm is not None else None,
        "train_idx": ds.train_idx.tolist(),
        "test_idx": ds.test_idx.tolist(),
        "meta": ds.meta,
    }
    with open(_path_sidecar(path), "w") as fp:
        json.dump(side, fp)


def load(path) -> PairDataset:
    with open(path, "rb") as fp:
        head = fp.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated pair file header")
        magic, version, n_x, J = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError("bad magic: not an LTW1 pair file")
        if version != VERSION:
            raise ValueError(f"unsupported pair file version {version}")
        nbytes = J * (2 * n_x + 2) * 8
        body = fp.read(nbytes)
        if len(body) != nbytes or fp.read(1):
            raise ValueError("pair file is truncated or has trailing bytes")
    rec = np.frombuffer(body, dtype="<f8").reshape(J, 2 * n_x + 2).astype(np.float64)
    with open(_path_sidecar(path)) as fp:
        side = json.load(fp)
    return PairDataset(
        n_x,
        rec[:, 0].copy(),
        rec[:, 1:1 + n_x].copy(),
        rec[:, 1 + n_x].copy(),
        rec[:, 2 + n_x:].copy(),
        np.array(side["train_idx"], dtype=np.int64),
        np.array(side["test_idx"], dtype=np.int64),
        side["seed"],
        NormStats.from_dict(side["norm"]) if side["norm"] is not None else None,
        side["normalized"],
        side.get("meta", {}),
    )


def digest(ds: PairDataset) -> str:
    """SHA-256 over pair arrays and split, used to check that models share data."""
    h = hashlib.sha256()
    for arr in (ds.t1, ds.x1, ds.t2, ds.x2, ds.train_idx, ds.test_idx):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
