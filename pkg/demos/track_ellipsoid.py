"""Recover a known trajectory from rendered silhouettes.

Renders an ellipsoid moving on a sinusoidal path into 96x96 masks, starts the
optimizer with every frame fully off its mask, and prints how the per-frame
branch choice moves from the centroid-seeking fallback to the full loss.

    python3 demos/track_ellipsoid.py
"""
import numpy as np

from temporal4d.meshio import MeshFrame, icosphere
from temporal4d.trajectory import CameraParams, optimize_trajectory, render_sequence

F = 6
cam = CameraParams.centered(120.0, 96)
ico = icosphere(2)
meshes = [MeshFrame(ico.vertices * [0.4, 0.5, 0.4], ico.faces)] * F
t = np.arange(F)
true = np.stack([0.3 * np.sin(2 * np.pi * t / F), 0.2 * np.cos(2 * np.pi * t / F), 4.5 + 0.2 * np.sin(t)], 1)
masks = (render_sequence(meshes, true, cam, samples=1024) >= 0.5).astype(float)

res = optimize_trajectory(meshes, masks, cam, steps=300, init=true + [1.4, 0, 0], samples=1024)
for step in (0, 10, 25, 50, 100, 299):
    print(f"step {step:3d}: loss {res.losses[step]:8.4f}, fallback frames {res.branches[step].count('fallback')}")
err = cam.project(res.thetas, res.focal) - cam.project(true)
print("RMS centroid error (px):", np.sqrt((err ** 2).sum(1).mean()))
print("per-frame Dice:", np.round(res.dice, 3), "| focal", round(res.focal, 2))
