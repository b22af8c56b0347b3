"""Temporal rotary encoding and sliding-window attention over per-frame token sets.

Frame ``t`` queries attend to the keys and values of every frame in
``Omega_t = {tau : |tau - t| <= W}`` (clamped to the sequence).  Queries and
keys are rotated by a block-diagonal rotation ``R_t`` whose pair angles are
``t * omega_j``, so cross-frame scores only see the offset ``tau - t``.
Values are never rotated.  With ``W = 0`` the rotations cancel and the
operator is ordinary per-frame attention.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensorkit import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    swap_last,
    take,
    transpose,
)

# additive score bias for window slots that fall outside the sequence;
# exp() of it underflows to exactly zero in both precisions
_MASKED = -1e30


@dataclass(frozen=True)
class RotaryConfig:
    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"rotary dim must be positive and even, got {self.dim}")

    @property
    def omegas(self) -> np.ndarray:
        j = np.arange(self.dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.dim)


@dataclass(frozen=True)
class WindowSpec:
    """Half-widths and layer placement of the windowed attention.

    Windowed self-attention runs in blocks ``i % self_layer_stride == 0``;
    windowed cross-attention in the other residue class (every block when the
    stride is 1).
    """

    w_self: int = 2
    w_cross: int = 2
    self_layer_stride: int = 2

    def __post_init__(self):
        if self.w_self < 0 or self.w_cross < 0:
            raise ValueError("window half-widths must be >= 0")
        if self.self_layer_stride < 1:
            raise ValueError("layer stride must be >= 1")

    def self_windowed(self, block: int) -> bool:
        return block % self.self_layer_stride == 0

    def cross_windowed(self, block: int) -> bool:
        if self.self_layer_stride == 1:
            return True
        return block % self.self_layer_stride == self.self_layer_stride // 2


@dataclass
class FrameTokens:
    Q: Tensor
    K: Tensor
    V: Tensor

    def __post_init__(self):
        self.Q, self.K, self.V = as_tensor(self.Q), as_tensor(self.K), as_tensor(self.V)
        if not (self.Q.shape == self.K.shape == self.V.shape) or self.Q.ndim not in (3, 4):
            raise ShapeError(
                f"Q, K, V must share a [T, N, D] shape, got {self.Q.shape}, {self.K.shape}, {self.V.shape}")

    @property
    def T(self) -> int:
        return self.Q.shape[-3]


# ---------------------------------------------------------------------------
# rotations


def rotation_angles(t, cfg: RotaryConfig) -> np.ndarray:
    return t * cfg.omegas


def _cos_sin(ts, cfg: RotaryConfig, dtype):
    # angles in extended precision keep |t| up to ~1e4 accurate to a few ulp
    ang = np.asarray(ts, dtype=np.longdouble)[..., None] * cfg.omegas.astype(np.longdouble)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotation_matrices(ts, cfg: RotaryConfig, heads: int = 1, dtype=np.float64) -> np.ndarray:
    """Stack of ``R_t`` for each ``t`` in ``ts``; shape ``[len(ts), D, D]``.

    With ``heads > 1`` the width is ``heads * cfg.dim`` and every head slice
    gets its own copy of the rotary pairs.
    """
    ts = np.atleast_1d(np.asarray(ts))
    c, s = _cos_sin(ts, cfg, dtype)
    half = cfg.dim // 2
    D = cfg.dim * heads
    R = np.zeros((len(ts), D, D), dtype=dtype)
    for h in range(heads):
        base = h * cfg.dim
        ev = base + 2 * np.arange(half)
        od = ev + 1
        R[:, ev, ev] = c
        R[:, ev, od] = -s
        R[:, od, ev] = s
        R[:, od, od] = c
    return R


def apply_rope(X, t, cfg: RotaryConfig, heads: int = 1) -> Tensor:
    """Rotate every token of ``X`` (last axis = width) by ``R_t``."""
    X = as_tensor(X)
    if X.shape[-1] != cfg.dim * heads:
        raise ShapeError(f"width {X.shape[-1]} does not match rotary dim {cfg.dim} x {heads} heads")
    R = rotation_matrices([t], cfg, heads, X.dtype)[0]
    return matmul(X, Tensor(R.T.copy()))


def _rotate_frames(X: Tensor, ts, cfg, heads) -> Tensor:
    Rt = rotation_matrices(ts, cfg, heads, X.dtype).transpose(0, 2, 1)
    return matmul(X, Tensor(np.ascontiguousarray(Rt)))


def window_indices(t: int, W: int, T: int) -> list:
    if not 0 <= t < T:
        raise ContractError(f"frame {t} outside [0, {T})")
    if W < 0:
        raise ContractError("half-width must be >= 0")
    return list(range(max(0, t - W), min(T, t + W + 1)))


# ---------------------------------------------------------------------------
# batch attention


def vanilla_attention(Q, K, V) -> Tensor:
    """``Softmax(Q K^T / sqrt(D)) V`` over the last two axes."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[:-1] != V.shape[:-1]:
        raise ShapeError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = mul(matmul(Q, swap_last(K)), 1.0 / math.sqrt(Q.shape[-1]))
    return matmul(softmax_lastdim(scores), V)


def _split_heads(X: Tensor, heads: int) -> Tensor:
    # [..., T, N, D] -> [..., T, H, N, Dh]
    *lead, N, D = X.shape
    nd = X.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2, nd)
    return transpose(reshape(X, (*lead, N, heads, D // heads)), perm)


def _merge_heads(X: Tensor) -> Tensor:
    *lead, H, N, Dh = X.shape
    nd = X.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return reshape(transpose(X, perm), (*lead, N, H * Dh))


def _window_attend(Q, K, V, W, cfg, t0=0, heads=1, return_weights=False):
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.ndim not in (3, 4) or K.ndim != Q.ndim or V.ndim != Q.ndim:
        raise ShapeError("expected [T, N, D] (or [B, T, N, D]) token tensors")
    *lead, T, N, D = Q.shape
    M = K.shape[-2]
    if (K.shape[:-2] != Q.shape[:-2] or V.shape[:-1] != K.shape[:-1]
            or K.shape[-1] != D):
        raise ShapeError(f"window attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if D != cfg.dim * heads:
        raise ShapeError(f"width {D} does not match rotary dim {cfg.dim} x {heads} heads")
    if W < 0:
        raise ContractError("half-width must be >= 0")
    Dv = V.shape[-1]

    ts = t0 + np.arange(T)
    Qr = _rotate_frames(Q, ts, cfg, heads)
    Kr = _rotate_frames(K, ts, cfg, heads)

    span = 2 * W + 1
    idx = np.arange(T)[:, None] + np.arange(-W, W + 1)[None, :]
    valid = (idx >= 0) & (idx < T)
    idx = np.clip(idx, 0, T - 1)

    Kw = reshape(take(Kr, idx.reshape(-1), axis=-3), (*lead, T, span * M, D))
    Vw = reshape(take(V, idx.reshape(-1), axis=-3), (*lead, T, span * M, Dv))

    Qh = _split_heads(Qr, heads)
    Kh = _split_heads(Kw, heads)
    Vh = _split_heads(Vw, heads)
    scores = mul(matmul(Qh, swap_last(Kh)), 1.0 / math.sqrt(D // heads))
    if not valid.all():
        bias = np.where(np.repeat(valid, M, axis=1), 0.0, _MASKED).astype(Q.dtype)
        scores = add(scores, Tensor(bias[:, None, None, :]))
    weights = softmax_lastdim(scores)
    out = _merge_heads(matmul(weights, Vh))
    if return_weights:
        return out, weights.data
    return out


def windowed_attention(frames: FrameTokens, W: int, cfg: RotaryConfig, *, t0: int = 0,
                       heads: int = 1, return_weights: bool = False):
    """Sliding-window self-attention over ``frames``; output ``[T, N, D]``.

    A leading batch axis (``[B, T, N, D]``) is accepted and carried through.

    ``t0`` is the absolute index of frame 0 (only offsets matter to the result).
    With ``return_weights`` the ``[T, H, N, (2W+1)N]`` softmax weights are also
    returned; slots outside the sequence carry exactly zero weight.
    """
    if not isinstance(frames, FrameTokens):
        frames = FrameTokens(*frames)
    return _window_attend(frames.Q, frames.K, frames.V, W, cfg, t0, heads, return_weights)


def cross_windowed_attention(queries, cond, W_cross: int, cfg: RotaryConfig, *,
                             cond_values=None, t0: int = 0, heads: int = 1,
                             return_weights: bool = False):
    """Queries of frame t attend to condition tokens of every frame in its window.

    ``cond`` supplies the keys and, unless ``cond_values`` is given, the values.
    """
    cond_values = cond if cond_values is None else cond_values
    return _window_attend(queries, cond, cond_values, W_cross, cfg, t0, heads, return_weights)


# ---------------------------------------------------------------------------
# streaming


class KVCache:
    """Ring buffer of rotated keys and raw values for the last ``2W+1`` frames."""

    def __init__(self, W: int, cfg: RotaryConfig, heads: int = 1):
        if W < 0:
            raise ContractError("half-width must be >= 0")
        self.W = W
        self.cfg = cfg
        self.heads = heads
        self.capacity = 2 * W + 1
        self.frames: deque = deque()
        self.peak_frames = 0
        self.peak_keys = 0

    @property
    def last_index(self):
        return self.frames[-1][0] if self.frames else None

    def push(self, t: int, k: np.ndarray, v: np.ndarray):
        if self.frames and t <= self.frames[-1][0]:
            raise ContractError(f"frame {t} pushed after frame {self.frames[-1][0]}")
        k = np.asarray(k)
        R = rotation_matrices([t], self.cfg, self.heads, k.dtype)[0]
        self.frames.append((t, k @ R.T, np.asarray(v)))
        while len(self.frames) > self.capacity:
            self.frames.popleft()
        self.peak_frames = max(self.peak_frames, len(self.frames))
        self.peak_keys = max(self.peak_keys, sum(f[1].shape[0] for f in self.frames))

    def window(self, center: int):
        sel = [f for f in self.frames if abs(f[0] - center) <= self.W]
        return np.concatenate([f[1] for f in sel]), np.concatenate([f[2] for f in sel])

    def __len__(self):
        return len(self.frames)


def _attend_np(q, K, V, heads):
    N, D = q.shape
    Dh = D // heads
    out = np.empty((N, V.shape[1]), dtype=np.result_type(q, V))
    Dvh = V.shape[1] // heads
    for h in range(heads):
        s = q[:, h * Dh:(h + 1) * Dh] @ K[:, h * Dh:(h + 1) * Dh].T / math.sqrt(Dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        out[:, h * Dvh:(h + 1) * Dvh] = s @ V[:, h * Dvh:(h + 1) * Dvh]
    return out


class StreamingWindowAttention:
    """Emit windowed-attention outputs while frames arrive one at a time.

    The output for frame ``c`` is released once frame ``c + W`` has been
    pushed; :meth:`flush` releases the last ``W`` frames with clamped windows.
    Results match :func:`windowed_attention` on the whole sequence.
    """

    def __init__(self, W: int, cfg: RotaryConfig, heads: int = 1):
        self.W = W
        self.cfg = cfg
        self.heads = heads
        self.cache = KVCache(W, cfg, heads)
        self.pending: deque = deque()

    def push(self, t: int, q, k, v) -> list:
        self.cache.push(t, k, v)
        q = np.asarray(q)
        R = rotation_matrices([t], self.cfg, self.heads, q.dtype)[0]
        self.pending.append((t, q @ R.T))
        out = []
        while self.pending and self.pending[0][0] + self.W <= t:
            out.append(self._emit())
        return out

    def flush(self) -> list:
        out = []
        while self.pending:
            out.append(self._emit())
        return out

    def _emit(self):
        c, qr = self.pending.popleft()
        K, V = self.cache.window(c)
        return c, _attend_np(qr, K, V, self.heads)


@dataclass
class StreamStats:
    peak_frames: int
    peak_keys: int


def streaming_attention(frames, W: int, cfg: RotaryConfig, *, t0: int = 0, heads: int = 1,
                        cond_keys=None, cond_values=None):
    """Run the streaming path over a whole sequence.

    Returns ``(outputs [T, N, D], StreamStats)``.  Passing ``cond_keys`` (and
    optionally ``cond_values``) streams cross-attention instead.
    """
    if cond_keys is not None:
        Q = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        K = np.asarray(cond_keys.data if isinstance(cond_keys, Tensor) else cond_keys)
        V = K if cond_values is None else np.asarray(
            cond_values.data if isinstance(cond_values, Tensor) else cond_values)
    else:
        if not isinstance(frames, FrameTokens):
            frames = FrameTokens(*frames)
        Q, K, V = frames.Q.data, frames.K.data, frames.V.data
    T = Q.shape[0]
    stream = StreamingWindowAttention(W, cfg, heads)
    out = np.empty(Q.shape[:2] + (V.shape[2],), dtype=np.result_type(Q, V))
    for i in range(T):
        for c, o in stream.push(t0 + i, Q[i], K[i], V[i]):
            out[c - t0] = o
    for c, o in stream.flush():
        out[c - t0] = o
    return out, StreamStats(stream.cache.peak_frames, stream.cache.peak_keys)
