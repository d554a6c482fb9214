"""Command-line front end: gen, train, eval, infer, bench, gradcheck.

A config file is one JSON object with optional sections ``gen`` (GenConfig),
``net`` (NetConfig), ``loss`` (LossWeights) and ``train`` (remaining
TrainConfig fields). Missing sections take the tiny defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import body_model as bm
from . import pipeline, scenegen
from .geometry import Camera, GeometryError
from .losses import LossWeights
from .net import MultiHMR, NetConfig, NetError
from .nn_core import grad_check
from .nn_core.io import CheckpointError

EXIT = {"usage": 2, "missing_file": 3, "format": 4, "config": 5, "training": 6,
        "gradcheck": 7}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _fail(kind, msg):
    raise CliError(kind, msg)


def _need_file(path, what):
    if not path:
        _fail("usage", f"--{what} is required")
    if not os.path.exists(path):
        _fail("missing_file", f"{what} not found: {path}")
    return path


def load_config(path):
    if path is None:
        return {}
    _need_file(path, "config")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        _fail("config", f"config {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        _fail("config", "config must be a JSON object")
    unknown = set(cfg) - {"gen", "net", "loss", "train"}
    if unknown:
        _fail("config", f"unknown config sections: {sorted(unknown)}")
    return cfg


def net_config(cfg) -> NetConfig:
    return NetConfig.tiny(**cfg.get("net", {}))


def gen_config(cfg, ncfg: NetConfig) -> scenegen.GenConfig:
    g = dict(image_size=ncfg.image_size, patch_size=ncfg.patch_size, fov=ncfg.fov)
    g.update(cfg.get("gen", {}))
    return scenegen.GenConfig(**g)


def cmd_gen(a):
    cfg = load_config(a.config)
    ncfg = net_config(cfg)
    gcfg = gen_config(cfg, ncfg)
    if not a.out:
        _fail("usage", "--out is required")
    model = bm.make_toy_model(ncfg.body_seed, ncfg.num_vertices, ncfg.num_joints,
                              ncfg.num_betas, ncfg.num_expr)
    samples = scenegen.generate(gcfg, model, a.count, a.seed)
    scenegen.write_dataset(samples, a.out, gcfg, model, seed=a.seed)
    print(json.dumps({"out": a.out, "count": len(samples),
                      "people": sum(len(s.people) for s in samples)}))


def cmd_train(a):
    cfg = load_config(a.config)
    tdict = dict(cfg.get("train", {}))
    tdict.update(net=net_config(cfg).to_dict(), loss=cfg.get("loss", {}),
                 data=_need_file(a.data, "data"))
    if a.seed is not None:
        tdict["seed"] = a.seed
    if a.out:
        tdict["out"] = a.out
    tcfg = pipeline.TrainConfig.from_dict(tdict)
    try:
        tr, path = pipeline.train(tcfg, resume=a.checkpoint)
    except pipeline.TrainingError as e:
        _fail("training", str(e))
    last = tr.history[-1] if tr.history else {}
    print(json.dumps({"checkpoint": path, "step": tr.step, "last": last}))


def cmd_eval(a):
    net = pipeline.load_checkpoint(_need_file(a.checkpoint, "checkpoint"))
    header, samples = scenegen.read_dataset(_need_file(a.data, "data"), net.model)
    pipeline.check_compatible(header, net.cfg)
    rep = pipeline.evaluate(net, samples, tau=a.tau)
    out = a.out or os.path.join(a.checkpoint, "metrics.json")
    with open(out, "w") as fh:
        fh.write(rep.to_json())
    print(rep.table())
    print(f"written {out}")


def cmd_infer(a):
    net = pipeline.load_checkpoint(_need_file(a.checkpoint, "checkpoint"))
    image = np.load(_need_file(a.image, "image"))
    if image.ndim != 3 or image.shape[2] != net.cfg.channels:
        _fail("format", f"image must be H x W x {net.cfg.channels}, got {image.shape}")
    camera = None
    if a.camera:
        with open(_need_file(a.camera, "camera")) as fh:
            camera = Camera.from_json(fh.read())
    size = net.cfg.image_size
    if image.shape[:2] != (size, size):
        image, s = pipeline.letterbox(image, size)
        if camera is not None:
            camera = pipeline.letterbox_camera(camera, s, size)
    elif camera is not None and tuple(camera.image_size) != (size, size):
        _fail("format", f"camera image size {camera.image_size} does not match image")
    preds = net.infer(image, camera, tau=a.tau)
    out = a.out or "predictions"
    os.makedirs(out, exist_ok=True)
    for k, p in enumerate(preds):
        bm.write_obj(os.path.join(out, f"person_{k:02d}.obj"), p.vertices, net.model.faces)
    with open(os.path.join(out, "predictions.json"), "w") as fh:
        json.dump({"people": [p.to_dict() for p in preds]}, fh, indent=1)
    print(json.dumps({"people": len(preds), "out": out}))


def cmd_bench(a):
    if a.checkpoint:
        net = pipeline.load_checkpoint(_need_file(a.checkpoint, "checkpoint"))
    else:
        net = MultiHMR(NetConfig(**load_config(a.config).get("net", {})))
    counts = [int(x) for x in a.people.split(",")]
    res = pipeline.bench(net, counts, reps=a.count, seed=a.seed or 0)
    text = json.dumps(res, indent=1)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    print(text)


def cmd_gradcheck(a):
    cfg = load_config(a.config)
    ncfg = net_config(cfg)
    seed = a.seed or 0
    res = gradcheck_run(ncfg, LossWeights(**cfg.get("loss", {})), seed, a.count or 2)
    print(json.dumps(res))
    if not res["max_rel_error"] <= 1e-4:
        _fail("gradcheck", f"max relative error {res['max_rel_error']:.3g} exceeds 1e-4")


def gradcheck_run(ncfg, weights, seed=0, samples_per_param=2, scenes=2):
    """Finite-difference check of the full teacher-forced loss."""
    from . import losses
    net = MultiHMR(ncfg)
    gcfg = scenegen.GenConfig(image_size=ncfg.image_size, patch_size=ncfg.patch_size, fov=ncfg.fov)
    samples = scenegen.generate(gcfg, net.model, scenes, seed)
    g = ncfg.grid
    targets = [scenegen.build_targets(s, g, g, ncfg.patch_size) for s in samples]
    images = np.stack([s.image for s in samples])
    cams = [s.camera for s in samples]

    def build():
        out = net.teacher_forced_forward(images, targets, cams)
        return losses.compute_losses(out, targets, cams, weights)["total"]

    worst, info = grad_check(build, dict(net.store.items()), eps=1e-5,
                             samples_per_param=samples_per_param,
                             rng=np.random.default_rng(seed), return_details=True,
                             groups=net.store.groups())
    return {"max_rel_error": worst, "per_group": info["per_group"],
            "max_entry_error": max(info["per_param"].values()),
            "kink_refinements": info["refined"], "below_noise": info["below_noise"]}


def build_parser():
    p = argparse.ArgumentParser(prog="mhmr", description="multi-person mesh recovery toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help, **flags):
        sp = sub.add_parser(name, help=help, description=help)
        for flag, kw in flags.items():
            sp.add_argument(f"--{flag}", **kw)
        sp.set_defaults(fn=fn)
        return sp

    cfg = dict(help="experiment config JSON (sections gen/net/loss/train)")
    add("gen", cmd_gen, "generate a synthetic dataset file", config=cfg,
        count=dict(type=int, default=64, help="number of scenes"),
        seed=dict(type=int, default=0, help="generator seed"),
        out=dict(help="output dataset path"))
    add("train", cmd_train, "train a network on a dataset", config=cfg,
        data=dict(help="dataset path"), out=dict(help="run directory"),
        seed=dict(type=int, help="training seed (overrides config)"),
        checkpoint=dict(help="checkpoint to resume from"))
    add("eval", cmd_eval, "evaluate a checkpoint on a dataset",
        checkpoint=dict(help="checkpoint directory"), data=dict(help="dataset path"),
        tau=dict(type=float, help="detection threshold"),
        out=dict(help="metrics JSON path (default: inside the checkpoint)"))
    add("infer", cmd_infer, "predict people in one .npy image",
        checkpoint=dict(help="checkpoint directory"), image=dict(help="H x W x C .npy image"),
        camera=dict(help="camera JSON; enables decoding with these intrinsics"),
        tau=dict(type=float, help="detection threshold"), out=dict(help="output directory"))
    add("bench", cmd_bench, "time inference against the number of people", config=cfg,
        checkpoint=dict(help="checkpoint (default: fresh network from config)"),
        count=dict(type=int, default=30, help="timed repetitions per person count"),
        people=dict(default="1,10", help="comma separated person counts"),
        seed=dict(type=int, help="scene seed"), out=dict(help="timing JSON path"))
    add("gradcheck", cmd_gradcheck, "finite-difference check of the training loss", config=cfg,
        seed=dict(type=int, help="scene / probe seed"),
        count=dict(type=int, help="probed coordinates per parameter tensor"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as e:
        return _report(e.kind, str(e))
    except (scenegen.DatasetFormatError, pipeline.DatasetMismatch, CheckpointError) as e:
        return _report("format", str(e))
    except (NetError, scenegen.SceneGenError, GeometryError, ValueError, TypeError) as e:
        return _report("config", str(e))
    return 0


def _report(kind, msg):
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return EXIT[kind]


if __name__ == "__main__":
    sys.exit(main())
