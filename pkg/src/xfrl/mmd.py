"""Multi-kernel MMD with Gaussian basis kernels.

Features are 2-D arrays ``(num_samples, dim)``. Kernels use the form
``k(x, y) = exp(-||x - y||^2 / gamma)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Estimator = Literal["quadratic", "linear"]


@dataclass(frozen=True)
class KernelBank:
    gammas: tuple[float, ...]
    betas: tuple[float, ...]

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        b = np.asarray(self.betas, dtype=float)
        if g.ndim != 1 or g.size == 0 or g.shape != b.shape:
            raise ValueError("gammas and betas must be equal-length nonempty sequences")
        if not np.all(g > 0) or not np.all(np.isfinite(g)):
            raise ValueError(f"all gammas must be positive and finite, got {self.gammas}")
        if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-12:
            raise ValueError(f"betas must be nonnegative and sum to 1, got {self.betas}")
        object.__setattr__(self, "gammas", tuple(float(v) for v in g))
        object.__setattr__(self, "betas", tuple(float(v) for v in b))

    @classmethod
    def from_base(cls, gamma0: float, num_kernels: int = 5) -> "KernelBank":
        """Bandwidths ``gamma0 * 2**(u - (U+1)/2)`` for ``u = 1..U``, uniform weights."""
        u = np.arange(1, num_kernels + 1)
        gammas = gamma0 * 2.0 ** (u - (num_kernels + 1) / 2)
        return cls(tuple(gammas), tuple([1.0 / num_kernels] * num_kernels))

    def __len__(self):
        return len(self.gammas)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"feature batch must be a nonempty (n, d) array, got shape {x.shape}")
    return x


def _check_dims(*arrays: np.ndarray) -> None:
    dims = {a.shape[-1] for a in arrays}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch between feature vectors: {sorted(dims)}")


def gaussian_kernel(x, y, gamma: float) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_dims(x, y)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = x - y
    return float(np.exp(-np.dot(d, d) / gamma))


def mk_kernel(x, y, bank: KernelBank) -> float:
    if not isinstance(bank, KernelBank):
        raise TypeError("bank must be a KernelBank")
    return float(sum(b * gaussian_kernel(x, y, g) for g, b in zip(bank.gammas, bank.betas)))


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances by explicit differences."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kernel_matrix(d2: np.ndarray, bank: KernelBank) -> np.ndarray:
    out = np.zeros_like(d2)
    for g, b in zip(bank.gammas, bank.betas):
        out += b * np.exp(-d2 / g)
    return out


def median_heuristic(joint) -> float:
    """Lower median of squared distances over distinct pairs; 1.0 if that is 0."""
    z = _as_batch(joint)
    if z.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 vectors")
    iu = np.triu_indices(z.shape[0], k=1)
    d2 = np.sort(sq_dists(z, z)[iu])
    gamma0 = float(d2[(d2.size - 1) // 2])
    return gamma0 if gamma0 > 0 else 1.0


def bank_for(src, tgt, num_kernels: int = 5) -> KernelBank:
    """Median-heuristic bank built from the pooled source and target vectors."""
    joint = np.concatenate([_as_batch(src), _as_batch(tgt)])
    return KernelBank.from_base(median_heuristic(joint), num_kernels)


def mmd2_quadratic(src, tgt, bank: KernelBank) -> float:
    """Biased (V-statistic) estimate, diagonal terms included."""
    s, t = _as_batch(src), _as_batch(tgt)
    _check_dims(s, t)
    m, n = len(s), len(t)
    # fsum is correctly rounded, so swapping the batches gives the identical value
    kss = math.fsum(_kernel_matrix(sq_dists(s, s), bank).ravel())
    ktt = math.fsum(_kernel_matrix(sq_dists(t, t), bank).ravel())
    kst = math.fsum(_kernel_matrix(sq_dists(s, t), bank).ravel())
    return float(kss / (m * m) + ktt / (n * n) - 2.0 * kst / (m * n))


def h_tuple(xs1, xs2, xt1, xt2, bank: KernelBank) -> float:
    vs = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (xs1, xs2, xt1, xt2)]
    _check_dims(*vs)
    a, b, c, d = vs
    return mk_kernel(a, b, bank) + mk_kernel(c, d, bank) - mk_kernel(a, d, bank) - mk_kernel(b, c, bank)


def _pair_count(src: np.ndarray, tgt: np.ndarray) -> int:
    if len(src) != len(tgt):
        raise ValueError(f"linear estimator needs equal batch sizes, got {len(src)} and {len(tgt)}")
    return len(src) // 2


def mmd2_linear(src, tgt, bank: KernelBank) -> float:
    """Linear-time estimate over consecutive quad-tuples; odd trailing samples dropped."""
    s, t = _as_batch(src), _as_batch(tgt)
    _check_dims(s, t)
    pairs = _pair_count(s, t)
    if pairs == 0:
        raise ValueError("linear estimator needs at least 2 samples per batch")
    s, t = s[: 2 * pairs], t[: 2 * pairs]
    h = (
        _kernel_rows(s[0::2], s[1::2], bank)
        + _kernel_rows(t[0::2], t[1::2], bank)
        - _kernel_rows(s[0::2], t[1::2], bank)
        - _kernel_rows(s[1::2], t[0::2], bank)
    )
    return float(2.0 / (2 * pairs) * h.sum())


def _kernel_rows(a: np.ndarray, b: np.ndarray, bank: KernelBank) -> np.ndarray:
    d = a - b
    return _kernel_matrix(np.einsum("ij,ij->i", d, d), bank)


def _dkernel_coef(d2: np.ndarray, bank: KernelBank) -> np.ndarray:
    # d k(x, y) / d x = coef * (x - y)
    out = np.zeros_like(d2)
    for g, b in zip(bank.gammas, bank.betas):
        out += b * (-2.0 / g) * np.exp(-d2 / g)
    return out


def mmd_grad(src, tgt, bank: KernelBank, estimator: Estimator = "quadratic") -> tuple[float, np.ndarray, np.ndarray]:
    """Estimate plus its gradient w.r.t. every source and target vector.

    The bank is treated as a constant. Samples dropped by the linear
    estimator receive zero gradient.
    """
    s, t = _as_batch(src), _as_batch(tgt)
    _check_dims(s, t)
    z = np.concatenate([s, t])
    m, n = len(s), len(t)
    if estimator == "quadratic":
        w = np.empty((m + n, m + n))
        w[:m, :m] = 1.0 / (m * m)
        w[m:, m:] = 1.0 / (n * n)
        w[:m, m:] = -1.0 / (m * n)
        w[m:, :m] = -1.0 / (m * n)
        d2 = sq_dists(z, z)
        value = float((w * _kernel_matrix(d2, bank)).sum())
        c = 2.0 * w * _dkernel_coef(d2, bank)
        grad = c.sum(axis=1)[:, None] * z - c @ z
    elif estimator == "linear":
        pairs = _pair_count(s, t)
        if pairs == 0:
            raise ValueError("linear estimator needs at least 2 samples per batch")
        i = 2 * np.arange(pairs)
        a = np.concatenate([i, m + i, i, i + 1])
        b = np.concatenate([i + 1, m + i + 1, m + i + 1, m + i])
        sign = np.repeat([1.0, 1.0, -1.0, -1.0], pairs)
        scale = 2.0 / (2 * pairs)
        diff = z[a] - z[b]
        d2 = np.einsum("ij,ij->i", diff, diff)
        value = float(scale * (sign * _kernel_matrix(d2, bank)).sum())
        coef = (scale * sign * _dkernel_coef(d2, bank))[:, None] * diff
        grad = np.zeros_like(z)
        np.add.at(grad, a, coef)
        np.add.at(grad, b, -coef)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return value, grad[:m], grad[m:]


def mmd2(src, tgt, bank: KernelBank, estimator: Estimator = "quadratic") -> float:
    if estimator == "quadratic":
        return mmd2_quadratic(src, tgt, bank)
    if estimator == "linear":
        return mmd2_linear(src, tgt, bank)
    raise ValueError(f"unknown estimator {estimator!r}")
