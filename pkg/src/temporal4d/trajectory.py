"""Global trajectory recovery from silhouettes.

Each frame's mesh is turned into a soft silhouette by splatting surface
samples as Gaussians through a static pinhole camera.  Per-frame
translations (and the focal length) are then fitted by gradient descent on
mask losses against ground-truth masks.  When a rendered mask and its target
barely overlap, the loss switches to a centroid-seeking branch.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorkit as tk
from .meshio import MeshFrame, MeshSequence
from .metrics import sample_surface
from .tensorkit import Adam, ShapeError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 1.5
DEFAULT_SAMPLES = 2048
PRED_CLAMP = 1e-6
DICE_SMOOTH = 1.0
# a single splat may not saturate a pixel exactly, or log(1 - g) blows up
_SPLAT_MAX = 1.0 - 1e-9


class BehindCameraError(ValueError):
    def __init__(self, frame: int, zmin: float):
        super().__init__(f"frame {frame}: surface point at depth {zmin:.4g} is not in front of the camera")
        self.frame = frame


class EmptyMaskError(ValueError):
    pass


@dataclass
class CameraParams:
    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def centered(cls, focal: float, size) -> "CameraParams":
        h, w = (size, size) if np.isscalar(size) else size
        return cls(float(focal), w / 2.0, h / 2.0, int(h), int(w))

    def project(self, points, focal=None) -> np.ndarray:
        """Pinhole projection of ``[..., 3]`` points to pixel coordinates ``[..., 2]``."""
        f = self.focal if focal is None else focal
        p = np.asarray(points, dtype=np.float64)
        return np.stack([f * p[..., 0] / p[..., 2] + self.cx,
                         f * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    delta: float = 0.5
    epsilon: float = 0.1
    zeta: float = 10.0
    threshold: float = 0.999

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "threshold" and not v >= 0:
                raise ValueError(f"weight {k} must be >= 0, got {v}")


# ---------------------------------------------------------------------------
# rendering


def _splat(points: Tensor, theta: Tensor, focal: Tensor, cam: CameraParams, sigma: float,
           frame_ids) -> Tensor:
    """Soft silhouettes ``[F, H, W]`` for surface points ``[F, S, 3]``.

    Each splat only touches pixels within ``ceil(4 sigma)`` of its center; the
    Gaussian there is below 4e-4.  Coverage is accumulated as a sum of
    ``log(1 - g)`` so the product over points becomes one scatter-add.
    """
    F, S, _ = points.shape
    H, W = cam.height, cam.width
    P = points + tk.reshape(theta, (F, 1, 3))
    z = P[..., 2]
    zmin = z.data.min(axis=1)
    for i in range(F):
        if not zmin[i] > 0:
            raise BehindCameraError(int(frame_ids[i]), float(zmin[i]))
    u = focal * P[..., 0] / z + cam.cx
    v = focal * P[..., 1] / z + cam.cy

    R = int(math.ceil(4 * sigma))
    off = np.arange(-R, R + 1)
    # nearest pixel column/row whose center (j + 0.5) is closest to the splat
    col0 = np.floor(u.data).astype(np.int64)
    row0 = np.floor(v.data).astype(np.int64)
    cols = col0[..., None, None] + off[None, None, None, :]   # [F, S, 1, P]
    rows = row0[..., None, None] + off[None, None, :, None]   # [F, S, P, 1]
    dx = (cols + 0.5) - tk.reshape(u, (F, S, 1, 1))
    dy = (rows + 0.5) - tk.reshape(v, (F, S, 1, 1))
    g = tk.exp((dx * dx + dy * dy) * (-0.5 / sigma ** 2))
    g = tk.clamp(g, 0.0, _SPLAT_MAX)
    inside = ((cols >= 0) & (cols < W)) & ((rows >= 0) & (rows < H))
    terms = tk.log(1.0 - g) * Tensor(inside.astype(np.float64))
    frame = np.arange(F)[:, None, None, None]
    flat = (frame * H + np.clip(rows, 0, H - 1)) * W + np.clip(cols, 0, W - 1)
    flat = np.broadcast_to(flat, terms.shape).reshape(-1)
    acc = tk.scatter_add(tk.reshape(terms, (-1,)), flat, F * H * W)
    m = 1.0 - tk.exp(acc)
    return tk.reshape(tk.clamp(m, 0.0, 1.0), (F, H, W))


def surface_samples(meshes, samples: int, seed: int = 0) -> np.ndarray:
    """``[F, S, 3]`` surface points, one batch per frame, same sampling seed."""
    meshes = list(meshes.frames if isinstance(meshes, MeshSequence) else meshes)
    if samples == 0:
        return np.zeros((len(meshes), 0, 3))
    return np.stack([sample_surface(m, samples, seed) for m in meshes])


def rasterize_silhouette(mesh: MeshFrame, theta, cam: CameraParams, sigma: float = DEFAULT_SIGMA,
                         samples: int = DEFAULT_SAMPLES, *, focal=None, seed: int = 0,
                         frame: int = 0) -> Tensor:
    """Soft silhouette ``[H, W]`` of ``mesh`` translated by ``theta``.

    ``theta`` and ``focal`` may be Tensors, in which case the mask is
    differentiable with respect to them.
    """
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise ValueError("cannot rasterize an empty mesh")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if samples == 0:
        return Tensor(np.zeros((cam.height, cam.width)))
    pts = surface_samples([mesh], samples, seed)
    theta = tk.reshape(tk.as_tensor(np.asarray(theta, dtype=np.float64)
                                    if not isinstance(theta, Tensor) else theta), (1, 3))
    f = tk.as_tensor(float(cam.focal) if focal is None else focal)
    return _splat(Tensor(pts), theta, f, cam, sigma, [frame])[0]


def render_sequence(meshes, thetas, cam: CameraParams, sigma: float = DEFAULT_SIGMA,
                    samples: int = DEFAULT_SAMPLES, *, focal=None, seed: int = 0) -> np.ndarray:
    """Rendered masks ``[F, H, W]`` as a plain array."""
    pts = surface_samples(meshes, samples, seed)
    if pts.shape[1] == 0:
        return np.zeros((len(pts), cam.height, cam.width))
    with tk.no_grad():
        f = Tensor(np.float64(cam.focal if focal is None else focal))
        return _splat(Tensor(pts), Tensor(np.asarray(thetas, dtype=np.float64)), f, cam,
                      sigma, range(len(pts))).data


# ---------------------------------------------------------------------------
# losses; every function accepts [..., H, W] and reduces the last two axes


def _pair(pred, gt):
    pred, gt = tk.as_tensor(pred), tk.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask size mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def _pixel_mean(x: Tensor) -> Tensor:
    return tk.mean(tk.mean(x, axis=-1), axis=-1)


def _pixel_sum(x: Tensor) -> Tensor:
    return tk.sum_(tk.sum_(x, axis=-1), axis=-1)


def bce_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    p = tk.clamp(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return _pixel_mean(-(gt * tk.log(p) + (1.0 - gt) * tk.log(1.0 - p)))


def dice_loss(pred, gt, smooth: float = DICE_SMOOTH) -> Tensor:
    pred, gt = _pair(pred, gt)
    inter = _pixel_sum(pred * gt)
    return 1.0 - (2.0 * inter + smooth) / (_pixel_sum(pred) + _pixel_sum(gt) + smooth)


def l1_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    return _pixel_mean(tk.abs_(pred - gt))


def mask_loss(pred, gt, weights: LossWeights | None = None) -> Tensor:
    """The plain two-term mask loss ``lambda1 * BCE + lambda2 * Dice``."""
    w = weights or LossWeights()
    return w.lambda1 * bce_loss(pred, gt) + w.lambda2 * dice_loss(pred, gt)


def _grids(H, W):
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    return np.broadcast_to(xs[None, :], (H, W)), np.broadcast_to(ys[:, None], (H, W))


def mask_centroid(mask) -> Tensor:
    """Mass-weighted mean of pixel centers, divided by ``(W, H)``: ``[..., 2]``."""
    mask = tk.as_tensor(mask)
    H, W = mask.shape[-2:]
    mass = _pixel_sum(mask)
    if np.any(mass.data <= 0):
        raise EmptyMaskError("mask has no mass; centroid undefined")
    gx, gy = _grids(H, W)
    cx = _pixel_sum(mask * Tensor(gx)) / mass
    cy = _pixel_sum(mask * Tensor(gy)) / mass
    return tk.stack([cx, cy], axis=-1)


def center_loss(pred_c, gt_c) -> Tensor:
    """Mean over frames of the squared centroid displacement."""
    pred_c, gt_c = tk.as_tensor(pred_c), tk.as_tensor(gt_c)
    if pred_c.shape != gt_c.shape:
        raise ShapeError(f"centroid lists differ: {pred_c.shape} vs {gt_c.shape}")
    d = pred_c - gt_c
    return tk.mean(tk.sum_(d * d, axis=-1))


FULL, FALLBACK = "full", "fallback"


def _frame_terms(pred: Tensor, gt: Tensor):
    dice = dice_loss(pred, gt)
    bce = bce_loss(pred, gt)
    l1 = l1_loss(pred, gt)
    pc = mask_centroid(pred)
    gc = mask_centroid(gt)
    d = pc - gc
    center = tk.sum_(d * d, axis=-1)
    return dice, bce, l1, center


def adaptive_total_loss(pred, gt, weights: LossWeights | None = None):
    """Branch-switched mask loss.

    Returns ``(loss, branch)``.  For a single ``[H, W]`` pair ``loss`` is a
    scalar and ``branch`` is ``"full"`` or ``"fallback"``; for stacks
    ``[F, H, W]`` both are per frame.  The fallback branch is taken when the
    Dice loss exceeds the threshold (masks essentially disjoint).
    """
    w = weights or LossWeights()
    pred, gt = _pair(pred, gt)
    dice, bce, l1, center = _frame_terms(pred, gt)
    fb = dice.data > w.threshold
    full = w.alpha * bce + w.beta * dice + w.gamma * l1 + w.delta * center
    fall = w.epsilon * dice + w.zeta * center
    sel = Tensor(fb.astype(np.float64))
    loss = sel * fall + (1.0 - sel) * full
    if np.ndim(fb) == 0:
        return loss, FALLBACK if fb else FULL
    return loss, [FALLBACK if b else FULL for b in fb]


def dice_coefficient(pred, gt, smooth: float = DICE_SMOOTH) -> np.ndarray:
    with tk.no_grad():
        return 1.0 - dice_loss(pred, gt, smooth).data


# ---------------------------------------------------------------------------
# optimization


@dataclass
class Trajectory:
    thetas: np.ndarray
    focal: float
    dice: np.ndarray
    branches: list = field(default_factory=list)   # per step, per frame
    losses: list = field(default_factory=list)     # per step total
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        frames = []
        for i, (t, d) in enumerate(zip(self.thetas, self.dice)):
            frames.append({"frame": i, "tx": float(t[0]), "ty": float(t[1]), "tz": float(t[2]),
                           "dice_coefficient": None if i in self.skipped else float(d)})
        return {"focal": float(self.focal), "frames": frames}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


TRAJECTORY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["focal", "frames"],
    "properties": {
        "focal": {"type": "number", "exclusiveMinimum": 0},
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["frame", "tx", "ty", "tz", "dice_coefficient"],
                "properties": {
                    "frame": {"type": "integer", "minimum": 0},
                    "tx": {"type": "number"},
                    "ty": {"type": "number"},
                    "tz": {"type": "number"},
                    "dice_coefficient": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def initial_translation(mesh: MeshFrame, gt_mask, cam: CameraParams) -> np.ndarray:
    """Translation that puts ``mesh`` over ``gt_mask``.

    Depth is chosen so the mesh's vertical extent spans the mask's bounding
    box height; then the mesh center is placed on the ray through the mask
    centroid.
    """
    gt = np.asarray(gt_mask, dtype=np.float64)
    rows = np.nonzero(gt.sum(axis=1) > 0)[0]
    if len(rows) == 0:
        raise EmptyMaskError("cannot initialize from an empty mask")
    h_px = rows[-1] - rows[0] + 1
    lo, hi = mesh.bbox()
    center = 0.5 * (lo + hi)
    depth = cam.focal * (hi[1] - lo[1]) / h_px
    cx, cy = mask_centroid(gt).data
    x = (cx * cam.width - cam.cx) * depth / cam.focal
    y = (cy * cam.height - cam.cy) * depth / cam.focal
    return np.array([x, y, depth]) - center


def optimize_trajectory(meshes, gt_masks, cam0: CameraParams, steps: int = 500, lr: float = 0.02,
                        weights: LossWeights | None = None, *, init=None,
                        sigma: float = DEFAULT_SIGMA, samples: int = DEFAULT_SAMPLES,
                        seed: int = 0, focal_lr: float = 0.01, refine_focal: bool = True,
                        log_every: int = 0) -> Trajectory:
    """Fit per-frame translations (and focal length) to ground-truth silhouettes.

    ``init`` overrides the default start (every frame at the translation
    derived from the first usable mask).  Frames whose target mask is empty
    are skipped with a warning and keep their initial translation.
    """
    frames = list(meshes.frames if isinstance(meshes, MeshSequence) else meshes)
    gt = np.asarray(gt_masks, dtype=np.float64)
    if gt.ndim != 3 or len(gt) != len(frames):
        raise ShapeError(f"need one [H, W] mask per frame: {len(frames)} frames, masks {gt.shape}")
    if gt.shape[1:] != (cam0.height, cam0.width):
        raise ShapeError(f"mask size {gt.shape[1:]} does not match camera {(cam0.height, cam0.width)}")
    weights = weights or LossWeights()
    mass = gt.sum(axis=(1, 2))
    live = np.nonzero(mass > 0)[0]
    skipped = [int(i) for i in np.nonzero(mass <= 0)[0]]
    if len(live) == 0:
        raise EmptyMaskError("every ground-truth mask is empty")
    for i in skipped:
        warnings.warn(f"frame {i}: empty ground-truth mask, skipped")

    if init is None:
        first = int(live[0])
        start = initial_translation(frames[first], gt[first], cam0)
        thetas0 = np.tile(start, (len(frames), 1))
    else:
        thetas0 = np.array(init, dtype=np.float64).reshape(len(frames), 3)

    pts = Tensor(surface_samples([frames[i] for i in live], samples, seed))
    gt_live = Tensor(gt[live])
    theta = Tensor(thetas0[live].copy(), requires_grad=True)
    log_f = Tensor(np.float64(np.log(cam0.focal)), requires_grad=True)
    params = [theta, log_f] if refine_focal else [theta]
    opt = Adam(params, lr=[lr, focal_lr] if refine_focal else lr)

    result = Trajectory(thetas0.copy(), cam0.focal, np.zeros(len(frames)), skipped=skipped)
    for step in range(steps):
        pred = _splat(pts, theta, tk.exp(log_f), cam0, sigma, live)
        per_frame, branch = adaptive_total_loss(pred, gt_live, weights)
        total = tk.sum_(per_frame)
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite trajectory loss at step {step}")
        result.losses.append(value)
        result.branches.append(branch)
        opt.zero_grad()
        tk.backward(total)
        opt.step()
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.5f fallback %d/%d", step, value,
                        branch.count(FALLBACK), len(branch))

    # exp(log(f)) is not always f; an untouched focal is returned as given
    focal = float(np.exp(log_f.data)) if steps > 0 and refine_focal else float(cam0.focal)
    pred = render_sequence([frames[i] for i in live], theta.data, cam0, sigma, samples,
                           focal=focal, seed=seed)
    result.thetas[live] = theta.data
    result.focal = focal
    result.dice[live] = dice_coefficient(pred, gt[live])
    result.dice[skipped] = np.nan
    return result


# ---------------------------------------------------------------------------
# mask IO


def read_mask(path) -> np.ndarray:
    """8-bit grayscale PNG/PGM -> binary float mask (values >= 128 are 1)."""
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=np.uint8)
    return (a >= 128).astype(np.float64)


def write_mask(mask, path):
    from PIL import Image

    a = np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


def read_mask_dir(directory, patterns=("*.png", "*.pgm")) -> list:
    d = Path(directory)
    files = sorted(p for pat in patterns for p in d.glob(pat))
    if not files:
        raise FileNotFoundError(f"no mask images in {d}")
    return [read_mask(p) for p in files]
