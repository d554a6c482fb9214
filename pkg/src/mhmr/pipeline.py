"""Teacher-forced training, evaluation, checkpointing and the inference
benchmark."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, losses, metrics, scenegen
from .geometry import Camera
from .losses import LossWeights
from .net import MultiHMR, NetConfig
from .nn_core import adam_step, backward, no_grad
from .nn_core.io import CheckpointError, load_into, read_manifest, save_store

LOG_NAME = "train_log.jsonl"
CKPT_NAME = "checkpoint"


class TrainingError(RuntimeError):
    pass


class DatasetMismatch(ValueError):
    pass


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads by MHMR_THREADS (unset leaves the default)."""
    n = os.environ.get("MHMR_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


@dataclass
class TrainConfig:
    data: str = ""
    net: NetConfig = field(default_factory=NetConfig.tiny)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 5e-5
    batch_size: int = 8
    max_steps: int = 20000
    eval_interval: int = 0
    checkpoint_interval: int = 1000
    seed: int = 0
    flip: bool = True
    out: str = "run"

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if not (self.lr > 0 and self.batch_size > 0 and self.max_steps >= 0):
            raise ValueError("learning rate and batch size must be positive, max_steps >= 0")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ValueError("intervals must be nonnegative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def check_compatible(header, net_cfg: NetConfig):
    if header["image_size"] != net_cfg.image_size or header["patch_size"] != net_cfg.patch_size:
        raise DatasetMismatch(
            f"dataset is {header['image_size']}px / P={header['patch_size']}, network expects "
            f"{net_cfg.image_size}px / P={net_cfg.patch_size}")
    bmod = header["body_model"]
    want = {"seed": net_cfg.body_seed, "V": net_cfg.num_vertices, "J": net_cfg.num_joints,
            "B": net_cfg.num_betas, "E": net_cfg.num_expr}
    if bmod != want:
        raise DatasetMismatch(f"dataset body model {bmod} differs from network's {want}")


def letterbox(image, size):
    """Resize the longest side to ``size`` (nearest neighbour) and zero-pad the
    other side at the bottom/right. Returns (square image, scale)."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    s = size / max(h, w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    rows = np.minimum(((np.arange(nh) + 0.5) / s).astype(int), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) / s).astype(int), w - 1)
    out = np.zeros((size, size) + image.shape[2:], dtype=image.dtype)
    out[:nh, :nw] = image[rows][:, cols]
    return out, s


def letterbox_camera(camera: Camera, scale, size):
    (pu, pv) = camera.principal_point
    return Camera(camera.focal * scale, (pu * scale, pv * scale), (size, size))


class Trainer:
    """Owns the network, the optimizer state and the batch RNG."""

    def __init__(self, cfg: TrainConfig, samples=None, header=None):
        self.cfg = cfg
        self.net = MultiHMR(cfg.net)
        if samples is None:
            header, samples = scenegen.read_dataset(cfg.data, self.net.model)
        if header is not None:
            check_compatible(header, cfg.net)
        if not samples:
            raise DatasetMismatch("dataset is empty")
        self.samples = samples
        g, P = cfg.net.grid, cfg.net.patch_size
        self.targets = [scenegen.build_targets(s, g, g, P) for s in samples]
        self.flipped = self.flip_targets = None
        if cfg.flip:
            self.flipped = [scenegen.flip_scene(s, self.net.model) for s in samples]
            self.flip_targets = [scenegen.build_targets(s, g, g, P) for s in self.flipped]
        self.rng = np.random.default_rng(cfg.seed)
        self.history = []

    @property
    def step(self):
        return self.net.store.step

    def next_batch(self):
        n, b = len(self.samples), self.cfg.batch_size
        idx = self.rng.choice(n, size=min(b, n), replace=False)
        flips = self.rng.random(len(idx)) < 0.5 if self.cfg.flip else np.zeros(len(idx), bool)
        scenes, targets = [], []
        for k, f in zip(idx, flips):
            if f:
                scenes.append(self.flipped[k])
                targets.append(self.flip_targets[k])
            else:
                scenes.append(self.samples[k])
                targets.append(self.targets[k])
        return scenes, targets

    def losses_for(self, scenes, targets):
        cams = [s.camera for s in scenes]
        out = self.net.teacher_forced_forward(np.stack([s.image for s in scenes]), targets, cams)
        return losses.compute_losses(out, targets, cams, self.cfg.loss)

    def train_step(self):
        scenes, targets = self.next_batch()
        parts = self.losses_for(scenes, targets)
        total = float(parts["total"].data)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss {total} at step {self.step + 1}")
        store = self.net.store
        store.zero_grad()
        backward(parts["total"])
        grads = store.grads()
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite gradient at step {self.step + 1}")
        adam_step(store, grads, self.cfg.lr)
        rec = losses.log_record(self.step, parts)
        self.history.append(json.loads(rec))
        return rec

    def save(self, path=None):
        path = path or os.path.join(self.cfg.out, CKPT_NAME)
        extra = {"net_config": self.cfg.net.to_dict(), "train_config": self.cfg.to_dict(),
                 "body_seed": self.cfg.net.body_seed,
                 "rng_state": self.rng.bit_generator.state}
        save_store(self.net.store, path, extra=extra)
        return path

    def restore(self, path):
        manifest = load_into(self.net.store, path)
        self.rng.bit_generator.state = manifest["extra"]["rng_state"]
        return manifest

    def train(self, steps=None, eval_samples=None, log=True):
        """Run until ``max_steps`` (or ``steps`` more). Non-finite losses abort
        and leave the last saved checkpoint untouched."""
        cfg = self.cfg
        stop = cfg.max_steps if steps is None else self.step + steps
        os.makedirs(cfg.out, exist_ok=True)
        log_path = os.path.join(cfg.out, LOG_NAME)
        with thread_limit(), open(log_path, "a") as fh:
            while self.step < stop:
                rec = self.train_step()
                if log:
                    fh.write(rec + "\n")
                if cfg.eval_interval and self.step % cfg.eval_interval == 0:
                    rep = evaluate(self.net, eval_samples or self.samples)
                    fh.write(json.dumps({"step": self.step, "eval": {
                        "f1": rep.f1, "pve": rep.pve}}) + "\n")
                if cfg.checkpoint_interval and self.step % cfg.checkpoint_interval == 0:
                    self.save()
        return self.save()


def train(cfg: TrainConfig, resume=None, samples=None, header=None):
    tr = Trainer(cfg, samples, header)
    if resume:
        tr.restore(resume)
    path = tr.train()
    return tr, path


def load_checkpoint(path) -> MultiHMR:
    manifest = read_manifest(path)
    extra = manifest.get("extra", {})
    if "net_config" not in extra:
        raise CheckpointError(f"checkpoint at {path} has no network config")
    net = MultiHMR(NetConfig.from_dict(extra["net_config"]))
    load_into(net.store, path)
    return net


def gt_records(scene, model):
    out = []
    for p in scene.people:
        c = geometry.project(scene.camera, p.location)
        out.append(metrics.PersonRecord(c, p.vertices, p.joints))
    return out


def pred_records(preds):
    return [metrics.PersonRecord(p.coords, p.vertices, p.joints) for p in preds]


def evaluate(net: MultiHMR, samples, tau=None, threshold=None, teacher_forced=False,
             camera_aware=None):
    """Aggregate metrics over ``samples`` with the inference path.

    ``teacher_forced`` instead decodes one query per ground-truth person
    (pairs are known, detection rates then describe the score map only at
    threshold ``tau``). ``camera_aware`` (default: the network's flag) passes
    the true intrinsics at inference.
    """
    cfg = net.cfg
    threshold = 2.0 * cfg.patch_size if threshold is None else threshold
    acc = metrics.Accumulator(net.model, threshold)
    use_cam = cfg.camera_aware if camera_aware is None else camera_aware
    with thread_limit():
        for s in samples:
            gts = gt_records(s, net.model)
            cam = s.camera if use_cam else None
            if teacher_forced:
                preds = net.infer(s.image, cam, forced_tokens=_gt_tokens(s, cfg))
                acc.add(pred_records(preds), gts, pairs=[(k, k) for k in range(len(gts))])
            else:
                preds = net.infer(s.image, cam, tau=tau)
                acc.add(pred_records(preds), gts)
    return acc.report()


def _gt_tokens(scene, cfg):
    g, P = cfg.grid, cfg.patch_size
    return scenegen.build_targets(scene, g, g, P).tokens


def bench(net: MultiHMR, person_counts=(1, 10), reps=30, warmup=3, seed=0, gen=None):
    """Wall time of ``infer`` on synthetic scenes with exactly N people.

    Detections are forced to the ground-truth patches so every call decodes
    exactly N queries whatever the network's training state.
    """
    cfg = net.cfg
    gen = gen or scenegen.GenConfig(image_size=cfg.image_size, patch_size=cfg.patch_size,
                                    n_min=1, n_max=max(person_counts), depth_min=2.0,
                                    depth_max=8.0)
    out = {"num_parameters": net.store.num_parameters(), "image_size": cfg.image_size,
           "patch_size": cfg.patch_size, "reps": reps, "results": []}
    with thread_limit():
        for n in person_counts:
            scene = scenegen.sample_scene(scenegen.child_seed(seed, n), gen, net.model, n_people=n)
            scene.image = scenegen.render(scene, net.model)
            toks = _gt_tokens(scene, cfg)
            cam = scene.camera if cfg.camera_aware else None
            for _ in range(warmup):
                net.infer(scene.image, cam, forced_tokens=toks)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                net.infer(scene.image, cam, forced_tokens=toks)
                times.append(time.perf_counter() - t0)
            t = np.array(times)
            out["results"].append({"people": n, "median_s": float(np.median(t)),
                                   "p10_s": float(np.percentile(t, 10)),
                                   "p90_s": float(np.percentile(t, 90)),
                                   "min_s": float(t.min())})
    return out


def encoder_only(net: MultiHMR, image, camera=None):
    with no_grad():
        return net.encode(image, [camera] if net.cfg.camera_aware else None).features.data
