import json
import math

import numpy as np
import pytest

from temporal4d import tensorkit as tk
from temporal4d.meshio import MeshFrame, icosphere
from temporal4d.tensorkit import ShapeError, Tensor
from temporal4d.trajectory import (
    TRAJECTORY_SCHEMA,
    BehindCameraError,
    CameraParams,
    EmptyMaskError,
    LossWeights,
    adaptive_total_loss,
    bce_loss,
    center_loss,
    dice_coefficient,
    dice_loss,
    initial_translation,
    l1_loss,
    mask_centroid,
    mask_loss,
    optimize_trajectory,
    rasterize_silhouette,
    read_mask,
    read_mask_dir,
    render_sequence,
    write_mask,
)


def ellipsoid(axes=(0.4, 0.6, 0.4), offset=(0.0, 0.0, 0.0)):
    ico = icosphere(2)
    return MeshFrame(ico.vertices * np.asarray(axes) + np.asarray(offset), ico.faces)


# -- camera and weights -----------------------------------------------------------

def test_camera_validation():
    with pytest.raises(ValueError):
        CameraParams(0.0, 10, 10, 20, 20)
    with pytest.raises(ValueError):
        CameraParams(100.0, 30, 10, 20, 20)
    cam = CameraParams.centered(100.0, (40, 60))
    assert (cam.cx, cam.cy, cam.height, cam.width) == (30.0, 20.0, 40, 60)
    assert np.allclose(cam.project([[1.0, -2.0, 4.0]]), [[55.0, -30.0]])


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(gamma=-0.1)


# -- rendering -------------------------------------------------------------

def test_zero_samples_gives_empty_mask():
    cam = CameraParams.centered(100.0, 16)
    m = rasterize_silhouette(ellipsoid(), [0, 0, 4], cam, samples=0).data
    assert m.shape == (16, 16) and np.all(m == 0)


def test_single_point_on_axis_is_centered_and_symmetric():
    tiny = MeshFrame(np.array([[0, 0, 0], [1e-9, 0, 0], [0, 1e-9, 0]]), [[0, 1, 2]])
    cam = CameraParams.centered(100.0, 33)
    m = rasterize_silhouette(tiny, [0, 0, 5], cam, samples=1).data
    assert np.unravel_index(np.argmax(m), m.shape) == (16, 16)
    assert np.allclose(m, m.T, atol=1e-6)
    assert np.allclose(m, m[::-1, ::-1], atol=1e-6)
    # radial decay along the row through the peak
    assert np.all(np.diff(m[16, 16:]) <= 0)


def test_mask_values_in_unit_interval():
    cam = CameraParams.centered(150.0, 48)
    m = rasterize_silhouette(ellipsoid(), [0.1, 0, 4], cam, samples=512).data
    assert m.min() >= 0 and m.max() <= 1 and m.max() > 0.99


def test_behind_camera_reports_frame():
    cam = CameraParams.centered(100.0, 16)
    with pytest.raises(BehindCameraError) as err:
        render_sequence([ellipsoid()] * 3, [[0, 0, 4], [0, 0, 4], [0, 0, 0.1]], cam, samples=64)
    assert err.value.frame == 2


@pytest.mark.parametrize("dx", [0.2, -0.35])
def test_lateral_shift_moves_centroid_by_pinhole_amount(dx):
    cam = CameraParams.centered(150.0, 128)
    mesh = ellipsoid((0.3, 0.3, 0.3))
    z = 10.0
    a = rasterize_silhouette(mesh, [0, 0, z], cam, samples=1024)
    b = rasterize_silhouette(mesh, [dx, 0, z], cam, samples=1024)
    shift = (mask_centroid(b).data[0] - mask_centroid(a).data[0]) * cam.width
    expect = cam.focal * dx / z
    assert abs(shift - expect) < 0.5
    assert abs(shift - expect) < 0.05 * abs(expect)


def test_render_is_deterministic():
    cam = CameraParams.centered(120.0, 32)
    a = render_sequence([ellipsoid()] * 2, [[0, 0, 4], [0.1, 0, 4]], cam, samples=256, seed=3)
    b = render_sequence([ellipsoid()] * 2, [[0, 0, 4], [0.1, 0, 4]], cam, samples=256, seed=3)
    assert np.array_equal(a, b)


# -- losses ----------------------------------------------------------------------

def test_bce_constant_half_is_ln2():
    gt = (np.random.default_rng(0).random((6, 7)) > 0.5).astype(float)
    assert abs(bce_loss(np.full((6, 7), 0.5), gt).item() - math.log(2)) < 1e-15


def test_bce_matches_loop_oracle():
    r = np.random.default_rng(1)
    p, g = r.random((4, 4)), (r.random((4, 4)) > 0.5).astype(float)
    acc = 0.0
    for i in range(4):
        for j in range(4):
            q = min(max(p[i, j], 1e-6), 1 - 1e-6)
            acc -= g[i, j] * math.log(q) + (1 - g[i, j]) * math.log(1 - q)
    assert abs(bce_loss(p, g).item() - acc / 16) < 1e-12


def test_bce_of_matching_zeros_is_tiny():
    assert bce_loss(np.zeros((5, 5)), np.zeros((5, 5))).item() < 1e-5


def test_dice_examples():
    p = np.zeros((1, 3))
    g = np.zeros((1, 3))
    p[0, :2] = 1
    g[0, 1:] = 1
    assert dice_loss(p, g).item() == pytest.approx(0.4, abs=1e-15)
    same = np.ones((4, 4))
    assert dice_loss(same, same).item() < 1e-3
    a, b = np.zeros((40, 40)), np.zeros((40, 40))
    a[:, :20], b[:, 20:] = 1, 1
    m = 800
    assert dice_loss(a, b).item() == pytest.approx(1 - 1 / (2 * m + 1), abs=1e-15)


def test_dice_is_symmetric():
    r = np.random.default_rng(2)
    p, g = r.random((9, 9)), r.random((9, 9))
    assert abs(dice_loss(p, g).item() - dice_loss(g, p).item()) < 1e-12
    assert np.isclose(dice_coefficient(p, g), 1 - dice_loss(p, g).item())


def test_l1_and_mask_loss():
    p, g = np.full((2, 2), 0.25), np.eye(2)
    assert l1_loss(p, g).item() == pytest.approx(0.5)
    w = LossWeights(lambda1=2.0, lambda2=3.0)
    want = 2 * bce_loss(p, g).item() + 3 * dice_loss(p, g).item()
    assert mask_loss(p, g, w).item() == pytest.approx(want)


def test_losses_reject_size_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((3, 3)), np.zeros((3, 4)))


def test_losses_finite_and_nonnegative():
    r = np.random.default_rng(3)
    for _ in range(20):
        p, g = r.random((6, 6)), (r.random((6, 6)) > r.random()).astype(float)
        for fn in (bce_loss, dice_loss, l1_loss):
            v = fn(p, g).item()
            assert np.isfinite(v) and v >= 0


def test_centroid_examples():
    blob = np.zeros((20, 30))
    blob[5:15, 10:20] = 1
    assert np.allclose(mask_centroid(blob).data, [0.5, 0.5], atol=1 / 20)
    pt = np.zeros((10, 10))
    pt[0, 0] = 1
    assert np.allclose(mask_centroid(pt).data, [0.05, 0.05])
    corners = np.zeros((10, 10))
    corners[0, 0] = corners[9, 9] = 1
    assert np.allclose(mask_centroid(corners).data, [0.5, 0.5], atol=0.1)
    with pytest.raises(EmptyMaskError):
        mask_centroid(np.zeros((4, 4)))


def test_center_loss_examples():
    c = np.array([[0.2, 0.3]])
    assert center_loss(c, c).item() == 0.0
    assert center_loss([[0.3, 0.4]], [[0.0, 0.0]]).item() == pytest.approx(0.25)
    got = center_loss([[0.1, 0.0], [0.0, 0.1]], [[0.0, 0.0], [0.0, 0.0]]).item()
    assert got == pytest.approx(0.01)
    with pytest.raises(ShapeError):
        center_loss([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])


def test_adaptive_branches():
    # disjoint halves of mass 800: Dice loss 1 - 1/1601 is above the threshold
    a, b = np.zeros((40, 40)), np.zeros((40, 40))
    a[:, :20], b[:, 20:] = 1, 1
    _, branch = adaptive_total_loss(a, b)
    assert branch == "fallback"
    loss, branch = adaptive_total_loss(a, a)
    assert branch == "full" and loss.item() < 1e-2
    losses, branches = adaptive_total_loss(np.stack([a, a]), np.stack([b, a]))
    assert branches == ["fallback", "full"] and losses.shape == (2,)


def _pair_with_dice_loss(target):
    # dice loss = 1 - 1 / (P + G + 1) for disjoint masks; solve for the predicted mass P
    gt = np.zeros((40, 40))
    gt[:25, :20] = 1
    G = gt.sum()
    P = 1.0 / (1.0 - target) - G - 1.0
    pred = np.zeros((40, 40))
    pred[:, 20:] = P / 800.0
    return pred, gt


@pytest.mark.parametrize("target,branch", [(0.9989, "full"), (0.9991, "fallback")])
def test_threshold_boundary(target, branch):
    pred, gt = _pair_with_dice_loss(target)
    assert dice_loss(pred, gt).item() == pytest.approx(target, abs=1e-12)
    assert adaptive_total_loss(pred, gt)[1] == branch


def test_fallback_weights_the_center_term():
    a, b = np.zeros((50, 50)), np.zeros((50, 50))
    a[:25, :25], b[25:, 25:] = 1, 1
    w = LossWeights()
    d = mask_centroid(a).data - mask_centroid(b).data
    want = w.epsilon * dice_loss(a, b).item() + w.zeta * float(d @ d)
    assert adaptive_total_loss(a, b, w)[0].item() == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("offset", [[0.05, -0.03, 0.1], [0.4, 0.3, 0.0]])
def test_adaptive_loss_gradient_wrt_translation(offset):
    cam = CameraParams.centered(60.0, 32)
    mesh = ellipsoid()
    gt = (render_sequence([mesh], [[0, 0, 4]], cam, samples=300) > 0.5).astype(float)[0]
    base = np.array([0, 0, 4.0]) + offset

    def f(theta):
        pred = rasterize_silhouette(mesh, theta, cam, samples=300)
        return adaptive_total_loss(pred, gt)[0]

    assert dice_loss(render_sequence([mesh], [base], cam, samples=300)[0], gt).item() < 0.99
    assert tk.grad_check(f, Tensor(base)) < 1e-4


def test_focal_gradient():
    cam = CameraParams.centered(60.0, 24)
    mesh = ellipsoid()
    gt = (render_sequence([mesh], [[0, 0, 4]], cam, samples=200) > 0.5).astype(float)[0]

    def f(focal):
        pred = rasterize_silhouette(mesh, [0.05, 0, 4], cam, samples=200, focal=focal)
        return adaptive_total_loss(pred, gt)[0]

    assert tk.grad_check(f, Tensor(np.array(66.0))) < 1e-4


# -- optimisation ------------------------------------------------------------------

def test_initial_translation_places_mesh_over_mask():
    cam = CameraParams.centered(150.0, 64)
    mesh = ellipsoid()
    true = np.array([0.3, -0.2, 5.0])
    gt = (render_sequence([mesh], [true], cam, samples=1024) > 0.5).astype(float)[0]
    init = initial_translation(mesh, gt, cam)
    rows = np.nonzero(gt.sum(axis=1))[0]
    depth = cam.focal * 1.2 / (rows[-1] - rows[0] + 1)
    assert init[2] == pytest.approx(depth)
    # blur widens the thresholded mask, so the depth guess runs a little short
    assert abs(init[2] - true[2]) < 0.2 * true[2]
    # the mesh center lands on the ray through the mask centroid
    c = mask_centroid(gt).data * [cam.width, cam.height]
    assert np.allclose(cam.project(init), c)
    with pytest.raises(EmptyMaskError):
        initial_translation(mesh, np.zeros((64, 64)), cam)


def test_optimum_at_zero_stays_put():
    # meshes already sit in front of the camera; their own masks are the targets
    cam = CameraParams.centered(150.0, 64)
    meshes = [ellipsoid(offset=(0.2 * np.sin(t), 0.0, 4.0)) for t in range(3)]
    gt = render_sequence(meshes, np.zeros((3, 3)), cam, samples=512)
    res = optimize_trajectory(meshes, gt, cam, steps=100, init=np.zeros((3, 3)), samples=512,
                              refine_focal=False)
    assert np.abs(res.thetas).max() < 1e-3


def test_small_recovery_with_branch_switch():
    F = 3
    cam = CameraParams.centered(120.0, 96)
    meshes = [ellipsoid()] * F
    t = np.arange(F)
    true = np.stack([0.1 * np.sin(t), 0.1 * np.cos(t), 4 + 0.2 * np.sin(t)], 1)
    gt = (render_sequence(meshes, true, cam, samples=512) >= 0.5).astype(float)
    init = true + [1.2, 0, 0]
    assert all(dice_loss(p, g).item() > 0.999
               for p, g in zip(render_sequence(meshes, init, cam, samples=512), gt))
    res = optimize_trajectory(meshes, gt, cam, steps=200, init=init, samples=512)
    assert res.branches[0] == ["fallback"] * F
    assert res.branches[-1] == ["full"] * F
    assert res.dice.mean() > 0.9
    ema, peak = None, []
    for v in res.losses:
        ema = v if ema is None else 0.9 * ema + 0.1 * v
        peak.append(ema)
    for i in range(len(peak) - 50):
        assert peak[i + 50] <= 1.1 * peak[i]


def test_empty_masks_are_skipped():
    F = 2
    cam = CameraParams.centered(100.0, 32)
    meshes = [ellipsoid()] * F
    gt = (render_sequence(meshes, [[0, 0, 4]] * F, cam, samples=256) >= 0.5).astype(float)
    gt[1] = 0
    with pytest.warns(UserWarning, match="frame 1"):
        res = optimize_trajectory(meshes, gt, cam, steps=3, samples=256)
    assert res.skipped == [1]
    assert res.to_dict()["frames"][1]["dice_coefficient"] is None
    with pytest.raises(EmptyMaskError):
        optimize_trajectory(meshes, np.zeros_like(gt), cam, steps=1, samples=64)


def test_mask_shape_checked():
    cam = CameraParams.centered(100.0, 32)
    with pytest.raises(ShapeError):
        optimize_trajectory([ellipsoid()], np.ones((1, 16, 16)), cam, steps=1)
    with pytest.raises(ShapeError):
        optimize_trajectory([ellipsoid()] * 2, np.ones((1, 32, 32)), cam, steps=1)


def test_trajectory_json_validates(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    cam = CameraParams.centered(100.0, 32)
    meshes = [ellipsoid()] * 2
    gt = (render_sequence(meshes, [[0, 0, 4], [0.1, 0, 4]], cam, samples=256) >= 0.5).astype(float)
    res = optimize_trajectory(meshes, gt, cam, steps=5, samples=256)
    res.save(tmp_path / "trajectory.json")
    doc = json.loads((tmp_path / "trajectory.json").read_text())
    jsonschema.validate(doc, TRAJECTORY_SCHEMA)
    assert [f["frame"] for f in doc["frames"]] == [0, 1]
    bad = dict(doc, extra=1)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, TRAJECTORY_SCHEMA)


# -- mask IO -----------------------------------------------------------------------

@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_mask_round_trip(tmp_path, ext):
    m = (np.random.default_rng(0).random((12, 9)) > 0.5).astype(float)
    write_mask(m, tmp_path / f"a.{ext}")
    assert np.array_equal(read_mask(tmp_path / f"a.{ext}"), m)


def test_mask_threshold_and_dir_order(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[127, 128]], dtype=np.uint8), mode="L").save(tmp_path / "b.png")
    Image.fromarray(np.array([[255, 0]], dtype=np.uint8), mode="L").save(tmp_path / "a.png")
    masks = read_mask_dir(tmp_path)
    assert masks[0].tolist() == [[1.0, 0.0]] and masks[1].tolist() == [[0.0, 1.0]]
    with pytest.raises(FileNotFoundError):
        read_mask_dir(tmp_path / "none")
