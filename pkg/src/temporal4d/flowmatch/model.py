"""A small diffusion transformer whose attention can slide over time.

Each block is self-attention over the latent tokens, cross-attention from
latent tokens to condition tokens, and a feed-forward sublayer, all pre-norm
residual.  Blocks selected by the :class:`WindowSpec` use the windowed
attention; the others attend within the frame only.  No parameter depends
on the window size.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensorkit as tk
from ..swattn import (
    RotaryConfig,
    WindowSpec,
    cross_windowed_attention,
    streaming_attention,
    vanilla_attention,
    windowed_attention,
)
from ..tensorkit import Tensor


@dataclass
class ToyDiTConfig:
    blocks: int = 4
    width: int = 32
    tokens: int = 16
    cond_tokens: int = 8
    heads: int = 1
    ffn_mult: int = 2
    time_dim: int = 32
    window: WindowSpec = field(default_factory=WindowSpec)
    rope_base: float = 10000.0
    supervise: str = "center"

    def __post_init__(self):
        if isinstance(self.window, dict):
            self.window = WindowSpec(**self.window)
        if self.width % (2 * self.heads):
            raise ValueError("width must split into heads of even size")

    @property
    def rotary(self) -> RotaryConfig:
        return RotaryConfig(self.width // self.heads, self.rope_base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDiTConfig":
        return cls(**d)


def time_embedding(s, dim: int) -> np.ndarray:
    """Sinusoidal features of flow time; ``s`` may be a scalar or an array."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(s, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _lin(x, W, b=None):
    y = tk.matmul(x, W)
    return y if b is None else y + b


def modulate(a, shift, scale):
    return a * (scale + 1.0) + shift


class ToyDiT:
    def __init__(self, config: ToyDiTConfig | None = None, seed: int = 0):
        self.config = config or ToyDiTConfig()
        self.params = self._init_params(seed)
        self.last_stream_peak = 0

    # -- parameters ----------------------------------------------------
    def _init_params(self, seed):
        c = self.config
        rng = np.random.default_rng(seed)
        d, hid = c.width, c.width * c.ffn_mult
        p = {}

        def w(name, fan_in, fan_out, gain=1.0):
            p[name] = Tensor(rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in),
                             requires_grad=True)

        def b(name, n):
            p[name] = Tensor(np.zeros((n,)), requires_grad=True)

        w("in.w", d, d)
        b("in.b", d)
        # learned per-token embedding; latent tokens have fixed roles
        p["pos"] = Tensor(0.1 * rng.standard_normal((c.tokens, d)), requires_grad=True)
        # condition tokens also have fixed roles; without this cross-attention cannot tell them apart
        p["cond_pos"] = Tensor(0.1 * rng.standard_normal((c.cond_tokens, d)), requires_grad=True)
        w("time.w", c.time_dim, d)
        b("time.b", d)
        for i in range(c.blocks):
            # shift/scale pairs for the three sublayers
            w(f"b{i}.mod.w", d, 6 * d, 0.1)
            b(f"b{i}.mod.b", 6 * d)
            for pre in ("self", "cross"):
                for m in ("q", "k", "v"):
                    w(f"b{i}.{pre}.{m}", d, d)
                w(f"b{i}.{pre}.o", d, d, 0.5)
            w(f"b{i}.ff1.w", d, hid)
            b(f"b{i}.ff1.b", hid)
            w(f"b{i}.ff2.w", hid, d, 0.5)
            b(f"b{i}.ff2.b", d)
        w("final.mod.w", d, 2 * d, 0.1)
        b("final.mod.b", 2 * d)
        w("out.w", d, d, 0.1)
        b("out.b", d)
        # per-channel, time-dependent gain on the input latents added to the output;
        # layer norm discards token scale, so the noise term of the target needs this path
        w("skip.w", d, d, 0.0)
        b("skip.b", d)
        return p

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    # -- forward -------------------------------------------------------
    def __call__(self, x, cond, s, **kw):
        return self.forward(x, cond, s, **kw)

    def _trunk(self, x, cond, s, self_attn, cross_attn) -> Tensor:
        c = self.config
        p = self.params
        d = c.width
        s = np.asarray(s, dtype=np.float64)
        # scalar s -> [1, e]; per-item s of shape [B] -> [B, 1, 1, e]
        te = time_embedding(s, c.time_dim)
        te = te[None, :] if s.ndim == 0 else te[:, None, None, :]
        temb = tk.silu(_lin(Tensor(te), p["time.w"], p["time.b"]))
        h = _lin(x, p["in.w"], p["in.b"]) + p["pos"]
        cond = cond + p["cond_pos"]
        for i in range(c.blocks):
            mod = _lin(temb, p[f"b{i}.mod.w"], p[f"b{i}.mod.b"])
            sh = [mod[..., j * d:(j + 1) * d] for j in range(6)]

            a = modulate(tk.layer_norm(h), sh[0], sh[1])
            q, k, v = (_lin(a, p[f"b{i}.self.{m}"]) for m in "qkv")
            h = h + _lin(self_attn(i, q, k, v), p[f"b{i}.self.o"])

            a = modulate(tk.layer_norm(h), sh[2], sh[3])
            q = _lin(a, p[f"b{i}.cross.q"])
            k = _lin(cond, p[f"b{i}.cross.k"])
            v = _lin(cond, p[f"b{i}.cross.v"])
            h = h + _lin(cross_attn(i, q, k, v), p[f"b{i}.cross.o"])

            a = modulate(tk.layer_norm(h), sh[4], sh[5])
            h = h + _lin(tk.silu(_lin(a, p[f"b{i}.ff1.w"], p[f"b{i}.ff1.b"])),
                         p[f"b{i}.ff2.w"], p[f"b{i}.ff2.b"])
        mod = _lin(temb, p["final.mod.w"], p["final.mod.b"])
        a = modulate(tk.layer_norm(h), mod[..., :d], mod[..., d:])
        gain = _lin(temb, p["skip.w"], p["skip.b"])
        return _lin(a, p["out.w"], p["out.b"]) + x * gain

    def forward(self, x, cond, s, *, t0: int = 0, w_self: int | None = None,
                w_cross: int | None = None, mode: str = "batch") -> Tensor:
        """Predicted velocity ``[T, L, d]`` for latents ``x`` at flow time ``s``.

        Inputs may carry a leading batch axis (``[B, T, L, d]``), in which
        case ``s`` may also be a length-``B`` array of flow times.

        ``w_self`` / ``w_cross`` override the configured half-widths in the
        windowed blocks.  ``mode="stream"`` evaluates windowed blocks with the
        rolling KV cache (inference only).
        """
        c = self.config
        ws = c.window.w_self if w_self is None else w_self
        wc = c.window.w_cross if w_cross is None else w_cross
        x = tk.as_tensor(x)
        cond = tk.as_tensor(cond)
        if x.ndim not in (3, 4) or cond.ndim != x.ndim or x.shape[:-2] != cond.shape[:-2]:
            raise tk.ShapeError(f"expected [T, L, d] latents and [T, N_c, d] conditions, "
                                f"got {x.shape} and {cond.shape}")
        if mode not in ("batch", "stream"):
            raise ValueError(f"unknown mode {mode!r}")
        if np.ndim(s) and (x.ndim != 4 or np.shape(s) != x.shape[:1]):
            raise tk.ShapeError(f"per-item flow times {np.shape(s)} need a batch axis of that length")
        if mode == "stream" and x.ndim != 3:
            raise ValueError("streaming mode takes a single sequence")
        stream = mode == "stream"
        self.last_stream_peak = 0

        def self_attn(i, q, k, v):
            if c.window.self_windowed(i):
                return self._attend(q, k, v, ws, t0, stream, cross=False)
            return self._per_frame(q, k, v)

        def cross_attn(i, q, k, v):
            if c.window.cross_windowed(i):
                return self._attend(q, k, v, wc, t0, stream, cross=True)
            return self._per_frame(q, k, v)

        return self._trunk(x, cond, s, self_attn, cross_attn)

    def _per_frame(self, q, k, v):
        c = self.config
        if c.heads == 1:
            return vanilla_attention(q, k, v)
        Dh = c.width // c.heads

        # heads as a leading batch axis: [..., N, D] -> [H, ..., N, Dh]
        def to_heads(t):
            return tk.stack([t[..., j * Dh:(j + 1) * Dh] for j in range(c.heads)], axis=0)

        o = vanilla_attention(to_heads(q), to_heads(k), to_heads(v))
        return tk.concat([o[j] for j in range(c.heads)], axis=-1)

    def _attend(self, q, k, v, W, t0, stream, cross):
        c = self.config
        if stream:
            if cross:
                out, stats = streaming_attention(q.data, W, c.rotary, t0=t0, heads=c.heads,
                                                 cond_keys=k.data, cond_values=v.data)
            else:
                out, stats = streaming_attention((q.data, k.data, v.data), W, c.rotary,
                                                 t0=t0, heads=c.heads)
            self.last_stream_peak = max(self.last_stream_peak, stats.peak_frames)
            return Tensor(out)
        if cross:
            return cross_windowed_attention(q, k, W, c.rotary, cond_values=v, t0=t0, heads=c.heads)
        return windowed_attention((q, k, v), W, c.rotary, t0=t0, heads=c.heads)

    def forward_frame(self, x_t, cond_t, s: float) -> Tensor:
        """Plain single-frame forward ``[L, d] -> [L, d]``: ordinary attention, no rotations."""
        def attn(i, q, k, v):
            return self._per_frame(q, k, v)

        return self._trunk(tk.as_tensor(x_t), tk.as_tensor(cond_t), s, attn, attn)
