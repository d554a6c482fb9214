"""Procedural multi-person scenes, a splat renderer and the dataset file format.

A scene holds 1..N posed toy bodies placed in front of a pinhole camera so
that every head projects inside the image and no two heads share a patch.
``render`` splats the mesh vertices into a 3-channel image (body, hands,
face), nearest person on top.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import body_model as bm
from .body_model import BodyModel, BodyParams
from .geometry import Camera, backproject, focal_from_fov, project

FORMAT_VERSION = 1
MAGIC = b"MHMRDS1\n"


class SceneGenError(RuntimeError):
    pass


class DatasetFormatError(RuntimeError):
    pass


@dataclass
class GenConfig:
    image_size: int = 32
    patch_size: int = 4
    n_min: int = 1
    n_max: int = 3
    depth_min: float = 1.5
    depth_max: float = 6.0
    fov: float = 60.0
    focal_scales: tuple = (1.0,)
    body_amp: float = 0.25
    hand_amp: float = 0.15
    jaw_amp: float = 0.08
    root_yaw: float = 0.5
    root_tilt: float = 0.1
    shape_range: float = 1.0
    expr_range: float = 1.0
    margin: float = 1.0
    head_band: tuple = (0.0, 0.7)  # vertical range for heads, fraction of image height
    max_tries: int = 2000

    def __post_init__(self):
        self.focal_scales = tuple(float(s) for s in self.focal_scales)
        self.head_band = tuple(float(s) for s in self.head_band)
        if self.image_size % self.patch_size:
            raise SceneGenError("image_size must be divisible by patch_size")
        if not (1 <= self.n_min <= self.n_max):
            raise SceneGenError(f"bad person count range [{self.n_min}, {self.n_max}]")
        if not (0 < self.depth_min <= self.depth_max):
            raise SceneGenError(f"bad depth range [{self.depth_min}, {self.depth_max}]")
        if not (0 < self.fov < 180) or not self.focal_scales or min(self.focal_scales) <= 0:
            raise SceneGenError("bad camera settings")
        if not (self.body_amp > self.hand_amp > self.jaw_amp >= 0):
            raise SceneGenError("pose amplitudes must satisfy body > hand > jaw >= 0")
        if self.body_amp * np.sqrt(3) >= np.pi or self.root_yaw + self.root_tilt >= np.pi / 2:
            raise SceneGenError("pose amplitudes too large (axis-angle must stay below pi)")

    @classmethod
    def close_up(cls, **kw):
        """One person at about 2.5 m filling most of the frame."""
        base = dict(n_min=1, n_max=1, depth_min=2.3, depth_max=2.7, root_yaw=0.3,
                    head_band=(0.1, 0.3))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["focal_scales"] = list(self.focal_scales)
        d["head_band"] = list(self.head_band)
        return d

    @property
    def standard_focal(self):
        return focal_from_fov(self.fov, self.image_size)


@dataclass
class Person:
    params: BodyParams
    location: np.ndarray  # head position, camera space (3,)
    vertices: np.ndarray  # world (V, 3)
    joints: np.ndarray  # world (J, 3)


@dataclass
class SceneSample:
    people: list
    camera: Camera
    seed: int
    image: np.ndarray = field(default=None, repr=False)


@dataclass
class TrainTargets:
    score_map: np.ndarray  # (grid_w, grid_h), indexed [i, j]
    patches: np.ndarray  # (N, 2) patch (i, j)
    tokens: np.ndarray  # (N,) row-major token index j * grid_w + i
    coords: np.ndarray  # (N, 2) pixels
    pose: np.ndarray  # (N, J, 3)
    shape: np.ndarray  # (N, B)
    expression: np.ndarray  # (N, E)
    depth: np.ndarray  # (N,)
    vertices: np.ndarray  # (N, V, 3), head-centered
    joints: np.ndarray  # (N, J, 3), head-centered
    location: np.ndarray  # (N, 3)

    @property
    def count(self):
        return len(self.tokens)


def child_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint32)[0])


def _amplitudes(model: BodyModel, cfg: GenConfig):
    amp = np.full(model.num_joints, cfg.body_amp)
    for k, n in enumerate(model.joint_names):
        if any(f in n for f in ("index", "middle", "ring", "pinky", "thumb")):
            amp[k] = cfg.hand_amp
        elif n == "jaw":
            amp[k] = cfg.jaw_amp
    return amp


def sample_params(rng, model: BodyModel, cfg: GenConfig) -> BodyParams:
    amp = _amplitudes(model, cfg)
    pose = rng.uniform(-1.0, 1.0, size=(model.num_joints, 3)) * amp[:, None]
    pose[model.root_joint] = [rng.uniform(-cfg.root_tilt, cfg.root_tilt),
                              rng.uniform(-cfg.root_yaw, cfg.root_yaw),
                              rng.uniform(-cfg.root_tilt, cfg.root_tilt)]
    return BodyParams(pose,
                      rng.uniform(-cfg.shape_range, cfg.shape_range, model.num_betas),
                      rng.uniform(-cfg.expr_range, cfg.expr_range, model.num_expr))


def sample_scene(seed, cfg: GenConfig, model: BodyModel, n_people=None) -> SceneSample:
    """Deterministic in (seed, cfg, model). ``n_people`` overrides the sampled count."""
    rng = np.random.default_rng(seed)
    W = H = cfg.image_size
    P = cfg.patch_size
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1)) if n_people is None else int(n_people)
    focal = cfg.standard_focal * cfg.focal_scales[int(rng.integers(len(cfg.focal_scales)))]
    cam = Camera(float(focal), (W / 2.0, H / 2.0), (W, H))
    occupied, people = set(), []
    tries = 0
    while len(people) < n:
        params = sample_params(rng, model, cfg)
        verts, joints = bm.forward(model, params)
        for _ in range(cfg.max_tries):
            tries += 1
            z = rng.uniform(cfg.depth_min, cfg.depth_max)
            c = np.array([rng.uniform(cfg.margin, W - cfg.margin),
                          rng.uniform(max(cfg.margin, cfg.head_band[0] * H),
                                      min(H - cfg.margin, cfg.head_band[1] * H))])
            patch = (int(c[0] // P), int(c[1] // P))
            if patch in occupied:
                continue
            t = backproject(cam, c, z)
            if np.min(verts[:, 2]) + t[2] < 0.1:
                continue
            occupied.add(patch)
            people.append(Person(params, t, verts + t, joints + t))
            break
        else:
            raise SceneGenError(
                f"could not place {n} people without patch collisions after {tries} tries")
    return SceneSample(people, cam, int(seed))


def _splat(cam: Camera, verts, labels, H, W):
    layer = np.zeros((H, W, 3))
    front = verts[:, 2] > 1e-6
    if not np.any(front):
        return layer
    v = verts[front]
    uv = project(cam, v) - 0.5  # pixel centers at integer + 0.5
    w = 1.0 / v[:, 2]
    ch = np.choose(labels[front], [0, 1, 1, 2])
    x0 = np.floor(uv[:, 0]).astype(int)
    y0 = np.floor(uv[:, 1]).astype(int)
    fx, fy = uv[:, 0] - x0, uv[:, 1] - y0
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xs, ys = x0 + dx, y0 + dy
        ok = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
        np.add.at(layer, (ys[ok], xs[ok], ch[ok]), (w * wt)[ok])
    return layer


def render(scene: SceneSample, model: BodyModel) -> np.ndarray:
    """(H, W, 3) float32 image; channels body / hands / face."""
    W, H = scene.camera.image_size
    img = np.zeros((H, W, 3))
    for person in sorted(scene.people, key=lambda p: -p.location[2]):
        layer = _splat(scene.camera, person.vertices, model.part_labels, H, W)
        mask = layer.sum(axis=-1) > 0
        img[mask] = layer[mask]
    return img.astype(np.float32)


def build_targets(scene: SceneSample, grid_w, grid_h, patch_size) -> TrainTargets:
    n = len(scene.people)
    S = np.zeros((grid_w, grid_h))
    patches, tokens, coords = [], [], []
    for p in scene.people:
        c = project(scene.camera, p.location)
        i, j = int(c[0] // patch_size), int(c[1] // patch_size)
        if not (0 <= i < grid_w and 0 <= j < grid_h):
            raise SceneGenError(f"primary keypoint {c} projects outside the image")
        if S[i, j]:
            raise SceneGenError(f"two people share patch {(i, j)}")
        S[i, j] = 1.0
        patches.append((i, j))
        tokens.append(j * grid_w + i)
        coords.append(c)
    ppl = scene.people
    J = ppl[0].joints.shape[0] if n else 0
    return TrainTargets(
        score_map=S,
        patches=np.array(patches, dtype=np.int64).reshape(n, 2),
        tokens=np.array(tokens, dtype=np.int64),
        coords=np.array(coords).reshape(n, 2),
        pose=np.array([p.params.pose for p in ppl]).reshape(n, J, 3) if n else np.zeros((0, 0, 3)),
        shape=np.array([p.params.shape for p in ppl]).reshape(n, -1) if n else np.zeros((0, 0)),
        expression=np.array([p.params.expression for p in ppl]).reshape(n, -1) if n else np.zeros((0, 0)),
        depth=np.array([p.location[2] for p in ppl]),
        vertices=np.array([p.vertices - p.location for p in ppl]) if n else np.zeros((0, 0, 3)),
        joints=np.array([p.joints - p.location for p in ppl]) if n else np.zeros((0, 0, 3)),
        location=np.array([p.location for p in ppl]).reshape(n, 3),
    )


def flip_scene(scene: SceneSample, model: BodyModel) -> SceneSample:
    """Mirror a scene left/right. Exact when the principal point is centered."""
    W = scene.camera.image_size[0]
    if scene.camera.principal_point[0] != W / 2.0:
        raise SceneGenError("horizontal flip requires a centered principal point")
    M = np.array([-1.0, 1.0, 1.0])
    people = [Person(bm.flip_params(model, p.params), p.location * M,
                     bm.mirror_vertices(model, p.vertices),
                     p.joints[model.joint_mirror] * M) for p in scene.people]
    image = None if scene.image is None else np.ascontiguousarray(scene.image[:, ::-1])
    return SceneSample(people, scene.camera, scene.seed, image)


def generate(cfg: GenConfig, model: BodyModel, count, seed) -> list:
    out = []
    for k in range(count):
        s = sample_scene(child_seed(seed, k), cfg, model)
        s.image = render(s, model)
        out.append(s)
    return out


# ------------------------------------------------------------ dataset file

def _write_block(fh, name, arr):
    arr = np.ascontiguousarray(arr)
    nb, dt = name.encode(), arr.dtype.str.encode()
    fh.write(struct.pack("<B", len(nb)) + nb + struct.pack("<B", len(dt)) + dt)
    fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    b = fh.read(n)
    if len(b) != n:
        raise DatasetFormatError(f"dataset truncated while reading {what}")
    return b


def _read_block(fh):
    (ln,) = struct.unpack("<B", _read_exact(fh, 1, "block name"))
    name = _read_exact(fh, ln, "block name").decode()
    (ld,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
    dt = np.dtype(_read_exact(fh, ld, "dtype").decode())
    (nd,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
    shape = struct.unpack(f"<{nd}Q", _read_exact(fh, 8 * nd, "shape"))
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    arr = np.frombuffer(_read_exact(fh, n, f"block {name}"), dtype=dt).reshape(shape)
    return name, arr.copy()


def model_signature(model: BodyModel) -> dict:
    return {"seed": model.seed, "V": model.num_vertices, "J": model.num_joints,
            "B": model.num_betas, "E": model.num_expr}


def write_dataset(samples, path, cfg: GenConfig, model: BodyModel, seed=None):
    header = {"version": FORMAT_VERSION, "count": len(samples), "image_size": cfg.image_size,
              "patch_size": cfg.patch_size, "body_model": model_signature(model),
              "gen_config": cfg.to_dict(), "seed": seed}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(hb)) + hb)
        for s in samples:
            buf = io.BytesIO()
            cam = s.camera
            _write_block(buf, "image", np.asarray(s.image, dtype="<f4"))
            _write_block(buf, "camera", np.array([cam.focal, *cam.principal_point, *cam.image_size], "<f8"))
            _write_block(buf, "seed", np.array([s.seed], "<i8"))
            ppl = s.people
            _write_block(buf, "pose", np.array([p.params.pose for p in ppl], "<f8"))
            _write_block(buf, "shape", np.array([p.params.shape for p in ppl], "<f8"))
            _write_block(buf, "expression", np.array([p.params.expression for p in ppl], "<f8"))
            _write_block(buf, "location", np.array([p.location for p in ppl], "<f8"))
            _write_block(buf, "vertices", np.array([p.vertices for p in ppl], "<f8"))
            _write_block(buf, "joints", np.array([p.joints for p in ppl], "<f8"))
            rec = buf.getvalue()
            fh.write(struct.pack("<Q", len(rec)) + rec)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    (hl,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
    try:
        header = json.loads(_read_exact(fh, hl, "header"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt dataset header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')}")
    return header


def read_dataset(path, model: BodyModel = None):
    """Returns (header, samples). With ``model`` given, refuses files generated
    with a different body model."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if model is not None and header["body_model"] != model_signature(model):
            raise DatasetFormatError(
                f"dataset body model {header['body_model']} does not match "
                f"loaded model {model_signature(model)}")
        samples = []
        for k in range(header["count"]):
            (rl,) = struct.unpack("<Q", _read_exact(fh, 8, f"record {k} length"))
            rec = io.BytesIO(_read_exact(fh, rl, f"record {k}"))
            blocks = {}
            while rec.tell() < rl:
                name, arr = _read_block(rec)
                blocks[name] = arr
            cam_a = blocks["camera"]
            cam = Camera(float(cam_a[0]), (float(cam_a[1]), float(cam_a[2])),
                         (int(cam_a[3]), int(cam_a[4])))
            people = []
            for i in range(blocks["pose"].shape[0]):
                people.append(Person(BodyParams(blocks["pose"][i], blocks["shape"][i],
                                                blocks["expression"][i]),
                                     blocks["location"][i], blocks["vertices"][i],
                                     blocks["joints"][i]))
            samples.append(SceneSample(people, cam, int(blocks["seed"][0]), blocks["image"]))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after last record")
    return header, samples
