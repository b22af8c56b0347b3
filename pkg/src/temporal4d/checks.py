"""Invariant suite run by ``temporal4d check``.

Every property is a small seeded experiment returning a one-line detail
string; a failed property raises ``AssertionError``.  Output is a pure
function of the seed, so two runs with the same seed print the same log.
"""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass

import numpy as np

from . import metrics, swattn
from . import tensorkit as tk
from .flowmatch import (
    ToyDiT,
    ToyDiTConfig,
    euler_sample,
    fm_loss,
    frame_noise,
)
from .meshio import MeshFrame, MeshSequence, denormalize_sequence, format_obj, icosphere, normalize_sequence, parse_obj
from .swattn import RotaryConfig, WindowSpec
from .trajectory import (
    CameraParams,
    adaptive_total_loss,
    bce_loss,
    dice_loss,
    mask_centroid,
    rasterize_silhouette,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _rng(seed, *tag):
    return np.random.default_rng([seed, *tag])


def _need(cond, msg):
    if not cond:
        raise AssertionError(msg)


# -- tensorkit ------------------------------------------------------------

def _sq(t):
    return tk.sum_(t * t)


def check_gradients(seed):
    r = _rng(seed, 1)
    a = r.standard_normal((3, 4))
    b = r.standard_normal((4, 2))
    # output weights independent of the input; weighting by the input itself
    # makes e.g. layer_norm's gradient vanish and leaves only round-off
    c = r.standard_normal((3, 4))
    pos = np.abs(a) + 0.5
    cases = {
        "add": (lambda x: tk.sum_((x + tk.Tensor(a)) * tk.Tensor(c)), a),
        "mul": (lambda x: tk.sum_(x * x * 0.7), a),
        "div": (lambda x: tk.sum_(tk.Tensor(a) / x), pos),
        "matmul": (lambda x: _sq(tk.matmul(x, tk.Tensor(b))), a),
        "exp": (lambda x: tk.sum_(tk.exp(x * 0.5)), a),
        "log": (lambda x: tk.sum_(tk.log(x)), pos),
        "sqrt": (lambda x: tk.sum_(tk.sqrt(x)), pos),
        "sigmoid": (lambda x: tk.sum_(tk.sigmoid(x) * tk.Tensor(c)), a),
        "silu": (lambda x: tk.sum_(tk.silu(x) * tk.Tensor(c)), a),
        "softmax": (lambda x: tk.sum_(tk.softmax_lastdim(x) * tk.Tensor(c)), a),
        "layer_norm": (lambda x: tk.sum_(tk.layer_norm(x) * tk.Tensor(c)), a),
        "take": (lambda x: _sq(tk.take(x, [2, 0, 2], axis=0)), a),
        "transpose": (lambda x: tk.sum_(tk.matmul(tk.swap_last(x), tk.Tensor(a))), a),
    }
    worst = 0.0
    for name, (f, x0) in cases.items():
        err = tk.grad_check(f, tk.Tensor(x0))
        _need(err < 1e-5, f"{name} relative error {err:.2e}")
        worst = max(worst, err)
    return f"{len(cases)} ops, worst relative error {worst:.1e}"


# -- swattn ---------------------------------------------------------------

def _random_frames(r, T, N, D):
    return tuple(r.standard_normal((T, N, D)) for _ in range(3))


def check_lossless_w0(seed):
    worst = 0.0
    for k in range(50):
        r = _rng(seed, 2, k)
        T, N, D = int(r.integers(1, 9)), int(r.integers(1, 17)), int(r.choice([4, 8, 32]))
        Q, K, V = _random_frames(r, T, N, D)
        out = swattn.windowed_attention((Q, K, V), 0, RotaryConfig(D), t0=int(r.integers(0, 500))).data
        ref = swattn.vanilla_attention(Q, K, V).data
        worst = max(worst, float(np.abs(out - ref).max()))
    _need(worst < 1e-10, f"max deviation {worst:.2e}")
    return f"50 draws, max deviation {worst:.1e}"


def check_shift(seed):
    r = _rng(seed, 3)
    cfg = RotaryConfig(8)
    frames = _random_frames(r, 10, 4, 8)
    base = swattn.windowed_attention(frames, 2, cfg, t0=0).data
    worst = 0.0
    for off in (1, 17, 1000):
        out = swattn.windowed_attention(frames, 2, cfg, t0=off).data
        worst = max(worst, float(np.abs(out - base).max()))
    _need(worst < 1e-9, f"offset changes output by {worst:.2e}")
    return f"offsets 1/17/1000, max change {worst:.1e}"


def check_support(seed):
    r = _rng(seed, 4)
    N, T = 3, 12
    cfg = RotaryConfig(4)
    for W in (0, 1, 2, 4):
        _, w = swattn.windowed_attention(_random_frames(r, T, N, 4), W, cfg, return_weights=True)
        t = T // 2
        support = int(np.count_nonzero(w[t, 0, 0]))
        _need(support == (2 * W + 1) * N, f"W={W}: support {support}")
    return "interior support (2W+1)N for W in 0,1,2,4"


def check_streaming(seed):
    r = _rng(seed, 5)
    cfg = RotaryConfig(8)
    frames = _random_frames(r, 64, 3, 16)
    batch = swattn.windowed_attention(frames, 2, cfg, t0=7, heads=2).data
    stream, stats = swattn.streaming_attention(frames, 2, cfg, t0=7, heads=2)
    diff = float(np.abs(batch - stream).max())
    _need(diff < 1e-10, f"stream/batch gap {diff:.2e}")
    _need(stats.peak_frames <= 5, f"cache held {stats.peak_frames} frames")
    return f"T=64, gap {diff:.1e}, peak cache {stats.peak_frames} frames"


def check_cache_bound(seed):
    W = 2
    cache = swattn.KVCache(W, RotaryConfig(4))
    r = _rng(seed, 6)
    for t in range(2000):
        cache.push(t, r.standard_normal((1, 4)), r.standard_normal((1, 4)))
    _need(cache.peak_frames <= 2 * W + 1, f"peak {cache.peak_frames}")
    return f"T=2000, peak {cache.peak_frames} frames"


# -- flowmatch ------------------------------------------------------------

class _Oracle:
    """Velocity field that already knows the answer."""

    def __init__(self, v):
        self.v = v

    def __call__(self, x, cond, s, **kw):
        return tk.Tensor(self.v)


def check_flow(seed):
    r = _rng(seed, 7)
    x1 = r.standard_normal((3, 4, 6))
    x0 = frame_noise(seed, np.arange(3), (4, 6))
    loss = fm_loss(_Oracle(x1 - x0), x1, np.zeros((3, 2, 6)), 0.37, seed, supervise="all")
    _need(loss.item() == 0.0, f"perfect model loss {loss.item()}")

    class Linear:
        def __call__(self, x, cond, s, **kw):
            return x1 - x0
    x = euler_sample(Linear(), np.zeros((3, 2, 6)), 64, 0, seed, x_init=x0)
    err = float(np.abs(x - x1).max())
    _need(err < 1e-6, f"Euler endpoint error {err:.2e}")
    return f"perfect-model loss 0, Euler endpoint error {err:.1e}"


def check_inheritance(seed):
    model = ToyDiT(ToyDiTConfig(blocks=2, window=WindowSpec(0, 0, 1)), seed=seed)
    r = _rng(seed, 8)
    x = r.standard_normal((4, 16, 32))
    c = r.standard_normal((4, 8, 32))
    with tk.no_grad():
        win = model(x, c, 0.3, w_self=0, w_cross=0).data
        ref = np.stack([model.forward_frame(x[t], c[t], 0.3).data for t in range(4)])
    diff = float(np.abs(win - ref).max())
    _need(diff < 1e-10, f"W=0 model deviates by {diff:.2e}")
    return f"W=0 model equals per-frame forward, gap {diff:.1e}"


# -- metrics / meshio -----------------------------------------------------

def check_metrics(seed):
    r = _rng(seed, 9)
    P = r.random((200, 3))
    _need(metrics.chamfer(P, P) == 0.0, "chamfer(P,P) != 0")
    _need(tuple(metrics.f_score(P, P)) == (1.0, 1.0, 1.0), "f_score(P,P) != 1")
    seq = [P + 0.01 * t for t in range(4)]
    _need(metrics.delta_cd(seq, seq) == 0.0, "delta_cd nonzero on identical sequences")
    _need(metrics.occupancy_kl(seq, seq) == 0.0, "occupancy_kl nonzero on identical sequences")
    A = r.standard_normal((6, 5))
    _need(metrics.dtw(A, A) == 0.0, "dtw(A,A) != 0")
    cos, _ = metrics.temporal_feature_compare(A, A)
    _need(abs(cos - 1.0) < 1e-12, f"cosine(A,A) = {cos}")
    return "identities hold for chamfer, f-score, delta CD, occupancy KL, DTW, cosine"


def check_normalization(seed):
    r = _rng(seed, 10)
    base = icosphere(1)
    frames = [MeshFrame(base.vertices * r.uniform(0.5, 3.0, 3) + r.uniform(-5, 5, 3), base.faces)
              for _ in range(4)]
    seq = MeshSequence(frames)
    norm, rec = normalize_sequence(seq)
    bound = max(float(np.abs(f.vertices).max()) for f in norm)
    back = denormalize_sequence(norm, rec)
    err = max(float(np.abs(a.vertices - b.vertices).max()) for a, b in zip(back, seq))
    _need(abs(bound - 1.0) < 1e-9, f"max |coord| {bound!r}")
    _need(err < 1e-9, f"round trip error {err:.2e}")
    text = format_obj(frames[0])
    _need(np.allclose(parse_obj(text).vertices, frames[0].vertices, atol=1e-6), "OBJ round trip")
    return f"max |coord| = 1 (off {abs(bound - 1):.1e}), round trip {err:.1e}"


# -- trajectory -----------------------------------------------------------

def check_mask_losses(seed):
    r = _rng(seed, 11)
    g = (r.random((8, 8)) > 0.5).astype(float)
    bce = bce_loss(np.full((8, 8), 0.5), g).item()
    _need(abs(bce - math.log(2)) < 1e-12, f"constant predictor BCE {bce}")
    p = np.zeros((2, 3)); p[0, :2] = 1
    q = np.zeros((2, 3)); q[0, 1:] = 1
    d = dice_loss(p, q).item()
    _need(abs(d - 0.4) < 1e-12, f"half-overlap Dice loss {d}")
    _, branch = adaptive_total_loss(p, np.roll(q, 1, axis=0))
    _need(branch == "full", "overlap-free 2x3 case should stay in the full branch (Dice 0.8)")
    # each mask needs mass > 500 for the smoothed Dice loss to pass 0.999
    big = np.zeros((64, 64)); big[:30, :30] = 1
    far = np.zeros((64, 64)); far[34:, 34:] = 1
    _, branch = adaptive_total_loss(big, far)
    _need(branch == "fallback", "disjoint masks must take the fallback branch")
    c = mask_centroid(big + far).data
    _need(np.allclose(c, 0.5, atol=1 / 64), f"centroid {c}")
    return f"BCE ln2, Dice 0.4, branch selection, centroid {c[0]:.3f},{c[1]:.3f}"


def check_render_shift(seed):
    cam = CameraParams.centered(150.0, 64)
    mesh = MeshFrame(icosphere(2).vertices * 0.3, icosphere(2).faces)
    z, dx = 6.0, 0.2
    a = mask_centroid(rasterize_silhouette(mesh, [0, 0, z], cam, samples=1024, seed=seed)).data
    b = mask_centroid(rasterize_silhouette(mesh, [dx, 0, z], cam, samples=1024, seed=seed)).data
    shift = (b[0] - a[0]) * cam.width
    expect = cam.focal * dx / z
    _need(abs(shift - expect) < 0.05 * expect, f"shift {shift:.3f} px, expected {expect:.3f}")
    return f"centroid shift {shift:.3f} px vs pinhole {expect:.3f} px"


CHECKS = [
    ("tensorkit.gradients", check_gradients),
    ("swattn.lossless_w0", check_lossless_w0),
    ("swattn.shift_equivariance", check_shift),
    ("swattn.support_count", check_support),
    ("swattn.streaming_equals_batch", check_streaming),
    ("swattn.cache_bound", check_cache_bound),
    ("flowmatch.loss_and_euler", check_flow),
    ("flowmatch.weight_inheritance", check_inheritance),
    ("metrics.identities", check_metrics),
    ("meshio.normalization", check_normalization),
    ("trajectory.mask_losses", check_mask_losses),
    ("trajectory.render_shift", check_render_shift),
]


def run_checks(seed: int = 0, only=None) -> list:
    results = []
    for name, fn in CHECKS:
        if only and name not in only:
            continue
        try:
            results.append(CheckResult(name, True, fn(seed)))
        except AssertionError as e:
            results.append(CheckResult(name, False, str(e)))
        except Exception as e:  # a crash is a failure, reported with its type
            last = traceback.extract_tb(e.__traceback__)[-1]
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e} ({last.name})"))
    return results
