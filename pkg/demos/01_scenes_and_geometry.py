"""Walk through the synthetic scene generator and the camera geometry.

Run: python demos/01_scenes_and_geometry.py
"""
import numpy as np

from mhmr import body_model as bm
from mhmr import geometry, scenegen

# %% a toy whole-body model: 12 joints, 200 vertices
model = bm.make_toy_model(seed=0, V=200, J=12)
print("joints:", model.joint_names)
verts, joints = bm.forward(model, bm.mean_params(model))
print("rest pose height (m):", np.ptp(verts[:, 1]).round(3))

# %% one scene, 32x32 image, 4px patches
cfg = scenegen.GenConfig()
scene = scenegen.generate(cfg, model, 1, seed=3)[0]
print("focal:", round(scene.camera.focal, 3), "people:", len(scene.people))
for p in scene.people:
    print("  head at", p.location.round(2), "->", geometry.project(scene.camera, p.location).round(2))

# %% the image is a part-labelled splat; show the body channel as text
img = scene.image
for row in img[..., 0]:
    print("".join("#" if v > 0.5 else ("+" if v > 0 else ".") for v in row))

# %% training targets: one marked patch per person
t = scenegen.build_targets(scene, 8, 8, 4)
print("score map (i down, j across):\n", t.score_map.astype(int))
print("offsets from patch centres:", (t.coords - (t.patches * 4 + 2)).round(2))

# %% projection round trip
cam = scene.camera
pts = np.random.default_rng(0).uniform([-1, -1, 1], [1, 1, 8], (5, 3))
back = geometry.backproject(cam, geometry.project(cam, pts), pts[:, 2])
print("round trip error:", np.abs(back - pts).max())
