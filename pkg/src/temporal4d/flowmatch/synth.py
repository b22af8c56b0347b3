"""Synthetic 4D data: a moving, breathing ellipsoid and its latent/condition encodings.

The motion state of a frame is six numbers (center xyz, axis lengths xyz).
A fixed linear codec embeds surface points of the ellipsoid as ``[L, d]``
latent tokens and ``[N_c, d]`` condition tokens; decoding inverts it exactly
and deforms an icosphere template.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..meshio import MeshFrame, MeshSequence, icosphere

STATE_DIM = 6
CODEC_SEED = 20240917


@dataclass
class MotionParams:
    center_amp: np.ndarray
    center_freq: np.ndarray
    center_phase: np.ndarray
    axes_base: np.ndarray
    axes_amp: np.ndarray
    axes_freq: np.ndarray
    axes_phase: np.ndarray

    @classmethod
    def from_seed(cls, seed: int) -> "MotionParams":
        rng = np.random.default_rng([seed, 7])
        return cls(
            center_amp=rng.uniform(0.1, 0.3, 3),
            center_freq=rng.uniform(1 / 60, 1 / 30, 3),
            center_phase=rng.uniform(0, 2 * np.pi, 3),
            axes_base=rng.uniform(0.4, 0.6, 3),
            axes_amp=rng.uniform(0.03, 0.1, 3),
            axes_freq=rng.uniform(1 / 60, 1 / 30, 3),
            axes_phase=rng.uniform(0, 2 * np.pi, 3),
        )

    def static(self) -> "MotionParams":
        z = np.zeros(3)
        return MotionParams(z, self.center_freq, self.center_phase, self.axes_base, z,
                            self.axes_freq, self.axes_phase)

    def state(self, t) -> np.ndarray:
        """Motion state ``[len(t), 6]`` at (possibly fractional) frame times."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
        center = self.center_amp * np.sin(2 * np.pi * self.center_freq * t + self.center_phase)
        axes = self.axes_base + self.axes_amp * np.sin(2 * np.pi * self.axes_freq * t + self.axes_phase)
        return np.concatenate([center, axes], axis=1)

    def rates(self) -> np.ndarray:
        """Per-component bound on ``|d state / dt|``."""
        return np.concatenate([self.center_amp * 2 * np.pi * self.center_freq,
                               self.axes_amp * 2 * np.pi * self.axes_freq])


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _cond_directions(n: int) -> np.ndarray:
    # antipodal pairs (axes first, then cube diagonals) so the set is centred
    diag = np.array([[1, 1, 1], [1, -1, 1], [-1, 1, 1], [-1, -1, 1]]) / np.sqrt(3)
    heads = np.concatenate([np.eye(3), diag])
    if n % 2 or n > 2 * len(heads):
        raise ValueError(f"condition token count must be even and <= {2 * len(heads)}")
    half = heads[: n // 2]
    return np.stack([half, -half], axis=1).reshape(n, 3)


class Codec:
    """Fixed linear maps between motion states and token sets.

    Latent token ``l`` embeds the surface point ``c + a * u_l`` of the
    ellipsoid at a template direction ``u_l``; condition token ``j`` embeds the
    point at one of a few symmetric directions ``w_j``.  Decoding recovers the
    points by projection and ``(c, a)`` by per-axis least squares.
    """

    def __init__(self, tokens: int = 16, width: int = 32, cond_tokens: int = 8,
                 seed: int = CODEC_SEED, gain: float = 10.0):
        self.tokens, self.width, self.cond_tokens = tokens, width, cond_tokens
        rng = np.random.default_rng(seed)
        self.gain = gain
        self.latent_dirs = fibonacci_sphere(tokens)
        self.cond_dirs = _cond_directions(cond_tokens)
        self.embed, _ = np.linalg.qr(rng.standard_normal((width, 3)))
        self.cond_embed, _ = np.linalg.qr(rng.standard_normal((width, 3)))

    @staticmethod
    def _points(state, dirs) -> np.ndarray:
        state = np.atleast_2d(state)
        return state[:, None, :3] + state[:, None, 3:] * dirs[None]

    def encode(self, state) -> np.ndarray:
        return self.gain * self._points(state, self.latent_dirs) @ self.embed.T

    def condition(self, state) -> np.ndarray:
        return self.gain * self._points(state, self.cond_dirs) @ self.cond_embed.T

    def decode(self, latents) -> np.ndarray:
        pts = np.asarray(latents) @ self.embed / self.gain  # [T, L, 3]
        u = self.latent_dirs
        state = np.empty((len(pts), 6))
        for k in range(3):
            A = np.stack([np.ones(len(u)), u[:, k]], axis=1)
            sol, *_ = np.linalg.lstsq(A, pts[:, :, k].T, rcond=None)
            state[:, k], state[:, 3 + k] = sol[0], sol[1]
        return state


_TEMPLATE = None


def template() -> MeshFrame:
    global _TEMPLATE
    if _TEMPLATE is None:
        _TEMPLATE = icosphere(2)
    return _TEMPLATE


def state_to_meshes(state) -> MeshSequence:
    tpl = template()
    frames = []
    for row in np.atleast_2d(state):
        # negative decoded axes would flip the surface; keep a small floor
        axes = np.maximum(row[3:], 1e-3)
        frames.append(MeshFrame(row[:3] + tpl.vertices * axes, tpl.faces))
    return MeshSequence(frames)


def decode_latents(latents, codec: Codec | None = None) -> MeshSequence:
    codec = codec or Codec(np.shape(latents)[1], np.shape(latents)[2])
    return state_to_meshes(codec.decode(latents))


def synth_sequence(seed: int, T: int, params: MotionParams | None = None, *,
                   codec: Codec | None = None, t0: int = 0):
    """``(latents [T, L, d], conditions [T, N_c, d], MeshSequence)`` for one clip."""
    if T < 1:
        raise ValueError("T must be >= 1")
    params = params if params is not None else MotionParams.from_seed(seed)
    codec = codec or Codec()
    state = params.state(t0 + np.arange(T))
    return codec.encode(state), codec.condition(state), state_to_meshes(state)
