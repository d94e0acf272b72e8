"""Rotary position rotations, random feature maps and four attention kernels.

All kernels are bidirectional (encoder) and take tensors shaped
``[..., N, d]`` plus a key padding mask shaped ``[..., N]`` (1 = real).

The two linear kernels never build the N x N weight matrix.  They keep the
summary state ``S = sum_n f(k_n) v_n^T`` and ``z = sum_n f(k_n)``, so the
cost is O(N r d).  Passing ``return_weights=True`` additionally
materializes the implied weights for analysis (O(N^2)).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import AllMasked, OddHeadDim
from .nncore import Tensor

DEFAULT_ROTARY_BASE = 10000.0
DEFAULT_FEATURES = 32
DENOMINATOR_EPS = 1e-6


class AttentionVariant(str, enum.Enum):
    FULL_ABSOLUTE = "full_absolute"
    FULL_ROTARY = "full_rotary"
    LINEAR_ROTARY_ORIGINAL = "linear_rotary_original"
    LINEAR_ROTARY_MODIFIED = "linear_rotary_modified"

    @property
    def is_linear(self) -> bool:
        return self in (AttentionVariant.LINEAR_ROTARY_ORIGINAL, AttentionVariant.LINEAR_ROTARY_MODIFIED)

    @property
    def is_rotary(self) -> bool:
        return self is not AttentionVariant.FULL_ABSOLUTE


class RotationSchedule:
    """Angles ``m * theta_i`` with ``theta_i = base ** (-2i / dim)``.

    Pairs are interleaved: components ``(2i, 2i + 1)`` rotate together.
    Tables are precomputed for positions below ``max_len``; other
    positions (e.g. shifted ones) are computed on demand.
    """

    def __init__(self, dim: int, base: float = DEFAULT_ROTARY_BASE, max_len: int = 202):
        if dim % 2:
            raise OddHeadDim(f"rotary dimension must be even, got {dim}")
        self.dim = dim
        self.base = float(base)
        self.inv_freq = self.base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
        angles = np.arange(max_len, dtype=np.float64)[:, None] * self.inv_freq[None, :]
        self._cos = np.cos(angles)
        self._sin = np.sin(angles)

    def cos_sin(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.min() >= 0 and positions.max() < len(self._cos):
            return self._cos[positions], self._sin[positions]
        angles = positions[..., None].astype(np.float64) * self.inv_freq
        return np.cos(angles), np.sin(angles)


def rotate_array(x: np.ndarray, positions, sched: RotationSchedule) -> np.ndarray:
    """Plain-numpy rotation of ``x[..., N, d]`` by the per-position angles."""
    x = np.asarray(x)
    if x.shape[-1] != sched.dim:
        raise OddHeadDim(f"vector dim {x.shape[-1]} does not match schedule dim {sched.dim}")
    cos, sin = sched.cos_sin(positions)
    cos, sin = cos.astype(x.dtype), sin.astype(x.dtype)
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def rotate(x, positions, sched: RotationSchedule) -> Tensor:
    """Differentiable rotation; the adjoint is the rotation by minus the angle."""
    x = nn.as_tensor(x)
    if x.shape[-1] % 2:
        raise OddHeadDim(f"head dimension must be even, got {x.shape[-1]}")
    cos, sin = sched.cos_sin(positions)
    cos, sin = cos.astype(x.dtype), sin.astype(x.dtype)
    out = rotate_array(x.data, positions, sched)

    def vjp(g):
        ga, gb = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ga * cos + gb * sin
        gx[..., 1::2] = -ga * sin + gb * cos
        return (gx,)

    return nn.op(out, (x,), vjp)


@dataclass
class FeatureMap:
    """``phi(x) = nonlin(W x)`` with a frozen random projection ``W`` of shape [r, d]."""

    weight: np.ndarray
    kind: str = "relu"
    seed: int | None = None

    @classmethod
    def random(cls, dim: int, features: int = DEFAULT_FEATURES, seed: int = 0, kind: str = "relu"):
        """Blockwise-orthogonal Gaussian rows, each rescaled to a chi-distributed norm."""
        rng = np.random.default_rng(seed)
        blocks = []
        for _ in range(math.ceil(features / dim)):
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            blocks.append(q.T)
        w = np.concatenate(blocks, axis=0)[:features]
        norms = np.linalg.norm(rng.standard_normal((features, dim)), axis=1)
        # C order, so a reloaded copy multiplies through the same BLAS path
        return cls(np.ascontiguousarray(w * norms[:, None]), kind, seed)

    @property
    def features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        x = nn.as_tensor(x)
        proj = nn.matmul(x, self.weight.T.astype(x.dtype))
        if self.kind == "relu":
            return nn.relu(proj)
        if self.kind == "elu1":
            return nn.elu_plus_one(proj)
        raise ValueError(f"unknown feature nonlinearity {self.kind!r}")


def _positions(n: int, positions, offset: int = 0):
    return np.arange(n) + offset if positions is None else np.asarray(positions)


def _key_mask(mask, like: Tensor):
    n = like.shape[-2]
    if mask is None:
        return np.ones(like.shape[:-1], dtype=like.dtype)
    mask = np.asarray(mask).astype(like.dtype)
    if mask.shape[-1] != n:
        raise ValueError(f"mask length {mask.shape[-1]} != sequence length {n}")
    if np.any(mask.sum(axis=-1) == 0):
        raise AllMasked("a query row has no unmasked keys")
    return mask


def full_attention(
    q,
    k,
    v,
    mask=None,
    *,
    rotary: bool = False,
    sched: RotationSchedule | None = None,
    positions=None,
    scale_scores: bool = True,
    return_weights: bool = False,
):
    """Softmax attention over unmasked keys, optionally with rotary q/k."""
    q, k, v = nn.as_tensor(q), nn.as_tensor(k), nn.as_tensor(v)
    m = _key_mask(mask, k)
    if rotary:
        pos = _positions(q.shape[-2], positions)
        q = rotate(q, pos, sched)
        k = rotate(k, pos, sched)
    scores = nn.matmul(q, k.T)
    if scale_scores:
        scores = scores * (1.0 / math.sqrt(q.shape[-1]))
    bias = np.where(m > 0, 0.0, -np.inf).astype(q.dtype)[..., None, :]
    weights = nn.softmax(scores + bias, axis=-1)
    out = nn.matmul(weights, v)
    if return_weights:
        return out, weights.data.copy()
    return out


def linear_attention_original(
    q,
    k,
    v,
    mask=None,
    *,
    sched: RotationSchedule,
    fmap,
    positions=None,
    eps: float = DENOMINATOR_EPS,
    return_weights: bool = False,
):
    """Rotations applied in feature space; the denominator ignores positions.

    out_m = (R_m f(q_m))^T S / (f(q_m)^T z + eps) with
    S = sum_n R_n f(k_n) v_n^T and z = sum_n f(k_n).  Implied weights need
    not sum to one.  ``sched`` must have the feature dimension.
    """
    q, k, v = nn.as_tensor(q), nn.as_tensor(k), nn.as_tensor(v)
    m = _key_mask(mask, k)[..., None]
    pos = _positions(q.shape[-2], positions)
    fq = fmap(q)
    fk = fmap(k) * m
    rq = rotate(fq, pos, sched)
    rk = rotate(fk, pos, sched)
    state = nn.matmul(rk.T, v)
    z = nn.sum_(fk, axis=-2, keepdims=True)
    den = nn.matmul(fq, z.T) + eps
    out = nn.matmul(rq, state) / den
    if return_weights:
        w = (rq.data @ np.swapaxes(rk.data, -1, -2)) / den.data
        return out, w
    return out


def linear_attention_modified(
    q,
    k,
    v,
    mask=None,
    *,
    sched: RotationSchedule,
    fmap,
    positions=None,
    eps: float = DENOMINATOR_EPS,
    return_weights: bool = False,
):
    """Rotate queries and keys first, then apply the feature map.

    out_m = f(R_m q_m)^T S / (f(R_m q_m)^T z + eps) with
    S = sum_n f(R_n k_n) v_n^T and z = sum_n f(R_n k_n).  Numerator and
    denominator share one kernel, so implied weights are nonnegative and
    sum to one.
    """
    q, k, v = nn.as_tensor(q), nn.as_tensor(k), nn.as_tensor(v)
    m = _key_mask(mask, k)[..., None]
    pos = _positions(q.shape[-2], positions)
    fq = fmap(rotate(q, pos, sched))
    fk = fmap(rotate(k, pos, sched)) * m
    state = nn.matmul(fk.T, v)
    z = nn.sum_(fk, axis=-2, keepdims=True)
    den = nn.matmul(fq, z.T) + eps
    out = nn.matmul(fq, state) / den
    if return_weights:
        w = (fq.data @ np.swapaxes(fk.data, -1, -2)) / den.data
        return out, w
    return out


def attend(
    variant: AttentionVariant,
    q,
    k,
    v,
    mask=None,
    *,
    sched: RotationSchedule | None = None,
    feature_sched: RotationSchedule | None = None,
    fmap=None,
    positions=None,
    scale_scores: bool = True,
    eps: float = DENOMINATOR_EPS,
    return_weights: bool = False,
):
    variant = AttentionVariant(variant)
    if variant is AttentionVariant.FULL_ABSOLUTE:
        return full_attention(q, k, v, mask, rotary=False, scale_scores=scale_scores, return_weights=return_weights)
    if variant is AttentionVariant.FULL_ROTARY:
        return full_attention(
            q, k, v, mask, rotary=True, sched=sched, positions=positions,
            scale_scores=scale_scores, return_weights=return_weights,
        )
    if variant is AttentionVariant.LINEAR_ROTARY_ORIGINAL:
        return linear_attention_original(
            q, k, v, mask, sched=feature_sched, fmap=fmap, positions=positions,
            eps=eps, return_weights=return_weights,
        )
    return linear_attention_modified(
        q, k, v, mask, sched=sched, fmap=fmap, positions=positions,
        eps=eps, return_weights=return_weights,
    )


def pool_heads(weights: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """Collapse the head axis (third from last) of ``[..., H, N, N]`` weights."""
    if pooling != "mean":
        raise ValueError(f"unsupported head pooling {pooling!r}")
    return np.asarray(weights).mean(axis=-3)
