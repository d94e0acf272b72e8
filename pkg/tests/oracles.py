"""Slow, independent reference implementations used only by tests.

Everything here is written with explicit Python loops and dense matrices,
sharing no code with the package beyond plain numpy.
"""

from __future__ import annotations

import math

import numpy as np


def rotation_matrix(m: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Dense block-diagonal R_m built pair by pair."""
    R = np.zeros((dim, dim))
    for i in range(dim // 2):
        theta = base ** (-2.0 * i / dim)
        c, s = math.cos(m * theta), math.sin(m * theta)
        R[2 * i, 2 * i] = c
        R[2 * i, 2 * i + 1] = -s
        R[2 * i + 1, 2 * i] = s
        R[2 * i + 1, 2 * i + 1] = c
    return R


def relu_features(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros(W.shape[0])
    for r in range(W.shape[0]):
        acc = sum(W[r, j] * x[j] for j in range(len(x)))
        out[r] = max(acc, 0.0)
    return out


def full_attention_sum(q, k, v, mask=None, rotary=False, scale=True, base=10000.0):
    N, d = q.shape
    mask = np.ones(N) if mask is None else mask
    out = np.zeros_like(v, dtype=np.float64)
    for m in range(N):
        qm = rotation_matrix(m, d, base) @ q[m] if rotary else q[m]
        scores = []
        for n in range(N):
            if not mask[n]:
                continue
            kn = rotation_matrix(n, d, base) @ k[n] if rotary else k[n]
            s = float(qm @ kn)
            scores.append((n, s / math.sqrt(d) if scale else s))
        top = max(s for _, s in scores)
        num = np.zeros(v.shape[1])
        den = 0.0
        for n, s in scores:
            w = math.exp(s - top)
            num += w * v[n]
            den += w
        out[m] = num / den
    return out


def linear_original_sum(q, k, v, W, mask=None, eps=1e-6, base=10000.0):
    """sum_n <R_m f(q_m), R_n f(k_n)> v_n / (sum_n <f(q_m), f(k_n)> + eps)."""
    N = q.shape[0]
    r = W.shape[0]
    mask = np.ones(N) if mask is None else mask
    fq = [relu_features(W, q[i]) for i in range(N)]
    fk = [relu_features(W, k[i]) for i in range(N)]
    out = np.zeros((N, v.shape[1]))
    weights = np.zeros((N, N))
    for m in range(N):
        rq = rotation_matrix(m, r, base) @ fq[m]
        den = eps
        for n in range(N):
            if mask[n]:
                den += float(fq[m] @ fk[n])
        for n in range(N):
            if mask[n]:
                w = float(rq @ (rotation_matrix(n, r, base) @ fk[n])) / den
                weights[m, n] = w
                out[m] += w * v[n]
    return out, weights


def linear_modified_sum(q, k, v, W, mask=None, eps=1e-6, base=10000.0):
    """sum_n <f(R_m q_m), f(R_n k_n)> v_n / (sum_n <f(R_m q_m), f(R_n k_n)> + eps)."""
    N, d = q.shape
    mask = np.ones(N) if mask is None else mask
    fq = [relu_features(W, rotation_matrix(i, d, base) @ q[i]) for i in range(N)]
    fk = [relu_features(W, rotation_matrix(i, d, base) @ k[i]) for i in range(N)]
    out = np.zeros((N, v.shape[1]))
    weights = np.zeros((N, N))
    for m in range(N):
        den = eps + sum(float(fq[m] @ fk[n]) for n in range(N) if mask[n])
        for n in range(N):
            if mask[n]:
                w = float(fq[m] @ fk[n]) / den
                weights[m, n] = w
                out[m] += w * v[n]
    return out, weights


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64), element by element."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        hi = f(x)
        x[idx] = old - h
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-9) -> float:
    """Max elementwise |a - n| / max(|a|, |n|), ignoring entries where both are ~0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = diff > atol
    if not keep.any():
        return 0.0
    return float(np.max(diff[keep] / scale[keep]))


def auc_by_pairs(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counted half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def attention_distance_cosine_direct(att: np.ndarray, coords: np.ndarray, atom_pos, lo, hi, d0=2.0):
    """Cosine between attention and exp(-d/d0) over atom pairs with lo < d <= hi."""
    a_vals, f_vals = [], []
    n = len(atom_pos)
    for i in range(n):
        for j in range(n):
            d = math.dist(coords[i], coords[j])
            if lo < d <= hi:
                a_vals.append(att[atom_pos[i], atom_pos[j]])
                f_vals.append(math.exp(-d / d0))
    if not a_vals:
        return None
    dot = sum(x * y for x, y in zip(a_vals, f_vals))
    na = math.sqrt(sum(x * x for x in a_vals))
    nf = math.sqrt(sum(y * y for y in f_vals))
    return dot / (na * nf)


def gradcheck(build, arrays, h: float = 1e-5, atol: float = 1e-9) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(*tensors)`` must return a scalar Tensor; ``arrays`` are float64
    inputs, each of which is differentiated.
    """
    from chemlm import nncore as nn

    leaves = [nn.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with nn.Tape() as tape:
        loss = build(*leaves)
    nn.backward(loss, tape)
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = [nn.Tensor(x) if j == i else nn.Tensor(np.array(a, dtype=np.float64)) for j, a in enumerate(arrays)]
            return float(build(*args).data)

        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, rel_error(analytic, central_difference(f, arrays[i], h), atol))
    return worst


def dense_rotations(n: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Stack of explicit [dim, dim] rotation matrices for positions 0..n-1."""
    R = np.zeros((n, dim, dim))
    pos = np.arange(n, dtype=np.float64)
    for i in range(dim // 2):
        a = pos * base ** (-2.0 * i / dim)
        R[:, 2 * i, 2 * i] = np.cos(a)
        R[:, 2 * i, 2 * i + 1] = -np.sin(a)
        R[:, 2 * i + 1, 2 * i] = np.sin(a)
        R[:, 2 * i + 1, 2 * i + 1] = np.cos(a)
    return R


def linear_original_dense(q, k, v, W, mask, eps=1e-6):
    """Explicit N x N evaluation with dense rotation matrices (float64)."""
    n = len(q)
    fq, fk = np.maximum(q @ W.T, 0), np.maximum(k @ W.T, 0)
    R = dense_rotations(n, W.shape[0])
    rq = np.einsum("nij,nj->ni", R, fq)
    rk = np.einsum("nij,nj->ni", R, fk)
    num = (rq @ rk.T) * mask[None, :]
    den = ((fq @ fk.T) * mask[None, :]).sum(1) + eps
    return (num / den[:, None]) @ v


def linear_modified_dense(q, k, v, W, mask, eps=1e-6):
    n, d = q.shape
    R = dense_rotations(n, d)
    fq = np.maximum(np.einsum("nij,nj->ni", R, q) @ W.T, 0)
    fk = np.maximum(np.einsum("nij,nj->ni", R, k) @ W.T, 0)
    K = (fq @ fk.T) * mask[None, :]
    return (K / (K.sum(1) + eps)[:, None]) @ v
