"""Rectified flow matching on latent sequences: loss, Euler sampler, training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensorkit as tk
from ..tensorkit import Adam, Tensor
from .model import ToyDiT, ToyDiTConfig
from .synth import synth_sequence

logger = logging.getLogger(__name__)

CLIP_LEN = 48
CLIP_HOP = 24


def frame_noise(seed: int, frames, shape) -> np.ndarray:
    """Standard Gaussian noise, drawn independently per absolute frame index.

    Frame ``t`` always gets the same draw for a given ``seed``, whichever
    clip it appears in.
    """
    frames = np.atleast_1d(frames)
    return np.stack([np.random.default_rng([seed, int(t)]).standard_normal(shape)
                     for t in frames])


def flow_target(x0, x1) -> np.ndarray:
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise tk.ShapeError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def interpolate(x0, x1, s: float) -> np.ndarray:
    return (1.0 - s) * np.asarray(x0) + s * np.asarray(x1)


def _as_array(u):
    return u.data if isinstance(u, Tensor) else np.asarray(u)


def fm_loss(model, x1, cond, s: float, seed: int, *, target: int | None = None,
            supervise: str = "center", t0: int = 0, w_self=None, w_cross=None) -> Tensor:
    """Squared velocity error on a windowed clip.

    ``x1`` and ``cond`` cover frames ``t0 .. t0 + len(x1) - 1``.  With
    ``supervise="center"`` only clip position ``target`` (default: the middle)
    is scored; ``"all"`` averages over every frame.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"flow time {s} outside [0, 1]")
    x1 = np.asarray(x1)
    T = x1.shape[0]
    x0 = frame_noise(seed, t0 + np.arange(T), x1.shape[1:])
    v = flow_target(x0, x1)
    xs = interpolate(x0, x1, s)
    pred = model(Tensor(xs), Tensor(np.asarray(cond)), s, t0=t0, w_self=w_self, w_cross=w_cross)
    pred = tk.as_tensor(pred)
    if supervise == "center":
        k = T // 2 if target is None else target
        diff = pred[k] - Tensor(v[k])
    elif supervise == "all":
        diff = pred - Tensor(v)
    else:
        raise ValueError(f"unknown supervision mode {supervise!r}")
    return tk.mean(diff * diff)


def fm_loss_batch(model, x1, cond, s, seeds, starts, target: int) -> Tensor:
    """Mean of :func:`fm_loss` over a stack of equal-length windows.

    ``x1`` is ``[B, T, L, d]``, ``s`` and ``seeds`` have length ``B`` and
    ``starts[b]`` is the absolute index of window ``b``'s first frame (it
    fixes the noise draw).  Every window is scored at position ``target``.
    Rotations see window-local times; only frame offsets enter the attention.
    """
    x1 = np.asarray(x1)
    B, T = x1.shape[:2]
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (B,) or len(seeds) != B or len(starts) != B:
        raise tk.ShapeError("need one flow time, seed and start per window")
    x0 = np.stack([frame_noise(int(seeds[b]), int(starts[b]) + np.arange(T), x1.shape[2:])
                   for b in range(B)])
    w = s[:, None, None, None]
    xs = (1.0 - w) * x0 + w * x1
    pred = tk.as_tensor(model(Tensor(xs), Tensor(np.asarray(cond)), s))
    diff = pred[:, target] - Tensor(flow_target(x0, x1)[:, target])
    return tk.mean(diff * diff)


def euler_sample(model, cond, steps: int, W: int | None, seed: int, *, t0: int = 0,
                 x_init=None, mode: str = "batch", w_cross: int | None = None,
                 shape=None) -> np.ndarray:
    """Integrate ``dx/ds = u(x, s)`` from noise at ``s=0`` to ``s=1`` with uniform Euler steps.

    All frames move jointly; ``W`` sets the self-attention half-width (and the
    cross-attention one unless ``w_cross`` is given).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cond = np.asarray(cond)
    T = cond.shape[0]
    if x_init is None:
        if shape is None:
            cfg = getattr(model, "config", None)
            shape = (cfg.tokens, cfg.width)
        x = frame_noise(seed, t0 + np.arange(T), shape)
    else:
        x = np.array(x_init, dtype=np.float64, copy=True)
    wc = W if w_cross is None else w_cross
    dt = 1.0 / steps
    with tk.no_grad():
        for i in range(steps):
            s = i * dt
            u = model(x, cond, s, t0=t0, w_self=W, w_cross=wc, mode=mode)
            x = x + dt * _as_array(u)
    return x


def clip_starts(T: int, clip_len: int = CLIP_LEN, hop: int = CLIP_HOP) -> list:
    if T <= clip_len:
        return [0]
    return list(range(0, T - clip_len + 1, hop))


@dataclass
class TrainResult:
    model: ToyDiT
    losses: list = field(default_factory=list)

    def smoothed(self, span: int = 100) -> np.ndarray:
        return smooth(self.losses, span)


def smooth(values, span: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    k = min(span, len(v))
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[k:] - c[:-k]) / k


def train_demo(config: ToyDiTConfig | None = None, dataset_seeds=(0, 1, 2, 3), steps: int = 2000,
               lr: float = 3e-3, *, frames: int = 96, clip_len: int = CLIP_LEN,
               hop: int = CLIP_HOP, batch: int = 32, seed: int = 0, betas=(0.9, 0.999),
               model: ToyDiT | None = None, log_every: int = 0,
               schedule: str = "constant", min_lr: float = 0.0) -> TrainResult:
    """Train on sliding clips of synthetic sequences with the flow-matching loss.

    Each step draws ``batch`` target frames.  A target sees the frames of its
    clip within the configured half-width and only its own prediction is
    scored.  Windows of equal shape are evaluated together; the step loss is
    the mean over all targets.  ``schedule="cosine"`` anneals the learning
    rate from ``lr`` to ``min_lr`` over the run; ``"constant"`` keeps it.
    """
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    config = config or ToyDiTConfig()
    if config.supervise != "center":
        raise ValueError("train_demo batches centre-supervised windows; use fm_loss for 'all'")
    dataset_seeds = list(dataset_seeds)
    if not dataset_seeds:
        raise ValueError("empty dataset")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    model = model or ToyDiT(config, seed=seed)
    data = [synth_sequence(s, frames)[:2] for s in dataset_seeds]
    clips = [(d, a) for d in range(len(data)) for a in clip_starts(frames, clip_len, hop)]
    half = max(config.window.w_self, config.window.w_cross)

    opt = Adam(model.parameters(), lr=lr, betas=betas)
    rng = np.random.default_rng([seed, 99])
    result = TrainResult(model)
    for step in range(steps):
        groups = {}
        for _ in range(batch):
            d, a = clips[rng.integers(len(clips))]
            end = min(a + clip_len, frames)
            t = int(rng.integers(a, end))
            lo, hi = max(a, t - half), min(end, t + half + 1)
            item = (d, lo, hi, float(rng.random()), int(rng.integers(2 ** 31)))
            groups.setdefault((hi - lo, t - lo), []).append(item)
        total = None
        for (_, target), items in sorted(groups.items()):
            x1 = np.stack([data[d][0][lo:hi] for d, lo, hi, _, _ in items])
            cond = np.stack([data[d][1][lo:hi] for d, lo, hi, _, _ in items])
            loss = fm_loss_batch(model, x1, cond, [it[3] for it in items],
                                 [it[4] for it in items], [it[1] for it in items], target)
            part = loss * (len(items) / batch)
            total = part if total is None else total + part
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {step}")
        if schedule == "cosine":
            cur = min_lr + 0.5 * (lr - min_lr) * (1.0 + np.cos(np.pi * step / steps))
            opt.lrs = [cur] * len(opt.params)
        opt.zero_grad()
        tk.backward(total)
        opt.step()
        result.losses.append(value)
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.5f", step, value)
    return result
