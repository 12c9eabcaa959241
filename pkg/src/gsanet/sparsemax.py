"""Sparsemax: Euclidean projection onto the probability simplex.

For a score vector z sorted as z_(1) >= ... >= z_(K)::

    f(z)   = max{k : 1 + k * z_(k) > sum_{j<=k} z_(j)}
    tau(z) = (sum_{j<=f} z_(j) - 1) / f
    p_i    = max(0, z_i - tau)

The O(K log K) sort is fine for the pixel counts used here; an expected
O(K) selection-based threshold search would be the next step for large K.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, _record, as_tensor, log_kink_pattern


@dataclass(frozen=True)
class SimplexProjection:
    z: np.ndarray
    p: np.ndarray
    tau: float
    f: int

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.p > 0)


def _threshold(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (tau, f) along the last axis; ``z`` must already be max-shifted."""
    k = z.shape[-1]
    zs = -np.sort(-z, axis=-1, kind="stable")
    css = np.cumsum(zs, axis=-1)
    ks = np.arange(1, k + 1, dtype=z.dtype)
    cond = 1 + ks * zs > css
    # cond[..., 0] always holds, so the last true index is well defined
    f = k - np.argmax(cond[..., ::-1], axis=-1)
    tau = (np.take_along_axis(css, f[..., None] - 1, axis=-1)[..., 0] - 1) / f.astype(z.dtype)
    return tau, f


def project_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sparsemax along the last axis of an array. Returns ``(p, tau, f)``.

    ``tau`` is reported for the unshifted input.
    """
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    tau, f = _threshold(shifted)
    p = np.maximum(shifted - tau[..., None], 0)
    return p, tau + zmax[..., 0], f


def sparsemax(z) -> SimplexProjection:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError(f"sparsemax expects a vector, got shape {z.shape}")
    if z.size == 0:
        raise ContractError("sparsemax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ContractError("sparsemax input contains non-finite entries")
    p, tau, f = project_rows(z)
    return SimplexProjection(z=z, p=p, tau=float(tau), f=int(f))


def _jvp_rows(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    supp = p > 0
    n = supp.sum(axis=-1, keepdims=True)
    mean = np.where(supp, v, 0).sum(axis=-1, keepdims=True) / n
    return np.where(supp, v - mean, 0).astype(v.dtype)


def sparsemax_jvp(proj: SimplexProjection, v) -> np.ndarray:
    """Jacobian of sparsemax at ``proj.z`` applied to ``v`` (the Jacobian is symmetric)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != proj.p.shape:
        raise ContractError(f"sparsemax_jvp: v has shape {v.shape}, projection has {proj.p.shape}")
    return _jvp_rows(proj.p, v)


# overridable by the gradcheck self-test to prove a broken JVP is caught
_row_jvp = _jvp_rows


def sparsemax_rows(m) -> Tensor:
    """Row-wise sparsemax over the last axis of a tensor, taped."""
    m = as_tensor(m)
    if m.data.ndim < 1 or m.shape[-1] == 0:
        raise ContractError(f"sparsemax_rows: empty rows in shape {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise ContractError("sparsemax_rows: non-finite entries")
    p, _, _ = project_rows(m.data)
    log_kink_pattern(p > 0)
    return _record("sparsemax_rows", p, (m,), lambda g: (_row_jvp(p, g),))


def softmax_rows(m) -> Tensor:
    m = as_tensor(m)
    if not np.all(np.isfinite(m.data)):
        raise ContractError("softmax_rows: non-finite entries")
    e = np.exp(m.data - m.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", p, (m,), vjp)
