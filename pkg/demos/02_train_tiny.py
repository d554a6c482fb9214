"""Train the tiny network for a few hundred steps and look at what it predicts.

Run: python demos/02_train_tiny.py [steps]
"""
import sys
import tempfile

from mhmr import pipeline, scenegen
from mhmr.net import MultiHMR, NetConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
ncfg = NetConfig.tiny()
model = MultiHMR(ncfg).model
train = scenegen.generate(scenegen.GenConfig(), model, 64, seed=1)

# %% untrained baseline: teacher-forced PVE (it detects nobody yet)
base = pipeline.evaluate(MultiHMR(ncfg), train, teacher_forced=True)
print("untrained teacher-forced PVE (mm):", round(base.pve, 1))

# %% train
out = tempfile.mkdtemp()
cfg = pipeline.TrainConfig(net=ncfg, max_steps=steps, checkpoint_interval=0, out=out)
tr = pipeline.Trainer(cfg, train)
for k in range(steps):
    rec = tr.train_step()
    if (k + 1) % 100 == 0:
        print(rec)

# %% evaluate on the training scenes
rep = pipeline.evaluate(tr.net, train)
print(rep.table())
tf = pipeline.evaluate(tr.net, train, teacher_forced=True)
print("teacher-forced PVE ratio vs untrained:", round(tf.pve / base.pve, 3))

# %% inspect one scene
scene = train[0]
for p in tr.net.infer(scene.image):
    print(p.patch_index, round(p.score, 3), "depth", round(p.depth, 2))
print("ground truth depths:", [round(float(q.location[2]), 2) for q in scene.people])
