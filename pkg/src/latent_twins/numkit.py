"""Dense linear-algebra helpers, matrix exponential and seeded random streams.

Everything works on float64 numpy arrays in C (row-major) order.  ``expm`` and
``expm_frechet`` accept stacks of matrices of shape ``(..., n, n)`` so that the
per-sample exponentials needed during structured training can be evaluated in
one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "as_matrix",
    "expm",
    "expm_frechet",
    "svd_thin",
    "spectral_norm",
    "RngStream",
    "rng_uniform",
    "rng_gaussian",
    "mse",
    "relative_error",
]

# Pade(13,13) numerator coefficients and the 1-norm bound below which the
# approximant is accurate to unit roundoff (Higham 2005).
_PADE13 = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)
_THETA13 = 5.371920351148152


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite float64 array, raising ``ValueError`` otherwise."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _check_square(a: np.ndarray, name: str) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")


def expm(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

    Parameters
    ----------
    a : array_like, shape (..., n, n)
        Square matrix or stack of square matrices.

    Returns
    -------
    ndarray
        ``exp(a)`` with the same shape as ``a``.
    """
    a = as_matrix(a, "A")
    _check_square(a, "A")
    n = a.shape[-1]
    batch = a.shape[:-2]
    a = a.reshape((-1, n, n))

    norms = np.abs(a).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / _THETA13))
    s = np.where(np.isfinite(s) & (s > 0), s, 0).astype(int)
    a = a * np.ldexp(1.0, -s)[:, None, None]

    b = _PADE13
    eye = np.broadcast_to(np.eye(n), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye)
    r = np.linalg.solve(v - u, v + u)

    for k in range(int(s.max(initial=0))):
        sel = s > k
        if sel.all():
            r = r @ r
        else:
            r[sel] = r[sel] @ r[sel]
    return r.reshape(batch + (n, n))


def expm_frechet(a, e) -> np.ndarray:
    """Frechet derivative ``L(A, E) = d/ds expm(A + sE)`` at ``s = 0``.

    Uses the block identity ``expm([[A, E], [0, A]]) = [[e^A, L(A,E)], [0, e^A]]``.
    Stacks are supported as for :func:`expm`.
    """
    a = as_matrix(a, "A")
    e = as_matrix(e, "E")
    _check_square(a, "A")
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch: A {a.shape} vs E {e.shape}")
    n = a.shape[-1]
    big = np.zeros(a.shape[:-2] + (2 * n, 2 * n))
    big[..., :n, :n] = a
    big[..., n:, n:] = a
    big[..., :n, n:] = e
    return expm(big)[..., :n, n:].copy()


def svd_thin(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(S) V^T`` with singular values in descending order.

    Returns ``(U, S, V)``; note ``V`` (not ``V^T``) so columns of both factors are
    the singular vectors.
    """
    a = as_matrix(a, "A")
    if a.ndim != 2:
        raise ValueError("svd_thin expects a 2-D matrix")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return u, s, vt.T.copy()


def spectral_norm(a, iters: int = 50, tol: float = 1e-10, seed: int = 0) -> float:
    """2-norm of ``a`` by power iteration on ``A^T A``."""
    a = as_matrix(a, "A")
    if a.ndim != 2:
        raise ValueError("spectral_norm expects a 2-D matrix")
    if not np.any(a):
        return 0.0
    x = np.random.default_rng(seed).standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = a.T @ (a @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        new_sigma = float(np.sqrt(ny))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    # one final Rayleigh quotient is sharper than the last ratio
    return float(max(sigma, np.linalg.norm(a @ x)))


@dataclass
class RngStream:
    """Seeded random stream (PCG64 bit generator).

    Gaussian draws use numpy's ziggurat sampler.  A stream has a single owner;
    give concurrent tasks their own stream via :meth:`fork`.
    """

    seed: int
    algorithm: str = "pcg64"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def fork(self, key: int) -> "RngStream":
        """Child stream derived from ``(seed, key)``; independent of this stream's state."""
        child_seed = np.random.SeedSequence(self.seed, spawn_key=(int(key),)).generate_state(2, np.uint64)
        return RngStream(int(child_seed[0] >> np.uint64(1)))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise ValueError(f"invalid range [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size)

    def gaussian(self, mean: float = 0.0, std: float = 1.0, size=None):
        if std < 0:
            raise ValueError("std must be non-negative")
        if std == 0:
            return mean if size is None else np.full(size, float(mean))
        return self._gen.normal(mean, std, size)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_uniform(stream: RngStream, lo: float, hi: float) -> float:
    return float(stream.uniform(lo, hi))


def rng_gaussian(stream: RngStream, mean: float, std: float) -> float:
    return float(stream.gaussian(mean, std))


def mse(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def relative_error(estimate, truth) -> float:
    """``||estimate - truth|| / ||truth||`` in the Euclidean norm of the flattened arrays."""
    truth = np.asarray(truth, dtype=np.float64)
    diff = np.asarray(estimate, dtype=np.float64) - truth
    return float(np.linalg.norm(diff.ravel()) / np.linalg.norm(truth.ravel()))
