"""The single-shot network: ViT encoder, patch detection + offsets, optional
camera-ray embedding, Human Perception Head and the parameter/depth regressor.

Token order is row-major over the patch grid: token = j * grid_w + i for
patch column i (u axis) and row j (v axis).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import body_model as bm
from . import geometry
from .body_model import BodyModel, BodyParams
from .geometry import Camera
from .nn_core import tensor as T
from .nn_core.layers import MLP, Attention, LayerNorm, Linear, ParamStore

NEG_INF = -1e9


class NetError(ValueError):
    pass


@dataclass
class NetConfig:
    image_size: int = 224
    patch_size: int = 14
    channels: int = 3
    feature_width: int = 128
    encoder_layers: int = 4
    encoder_heads: int = 4
    hph_layers: int = 2
    hph_heads: int = 4
    hph_dim: int = 128
    mlp_ratio: int = 4
    head_width: int = 0  # hidden width of detection / offset heads, 0 -> feature_width
    fourier_bands: int = 8
    detection_threshold: float = 0.5
    fov: float = 60.0
    camera_aware: bool = False
    num_joints: int = 53
    num_vertices: int = 1024
    num_betas: int = 10
    num_expr: int = 10
    body_seed: int = 0
    init_seed: int = 0
    regressor_init_scale: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise NetError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if not 0 < self.detection_threshold < 1:
            raise NetError("detection threshold must lie in (0, 1)")

    @classmethod
    def tiny(cls, **kw):
        base = dict(image_size=32, patch_size=4, feature_width=16, encoder_layers=3,
                    encoder_heads=4, hph_layers=2, hph_heads=2, hph_dim=64, head_width=64,
                    num_joints=12, num_vertices=200)
        base.update(kw)
        return cls(**base)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @property
    def param_width(self):
        """D': flattened mean params (6D pose, shape, expression)."""
        return 6 * self.num_joints + self.num_betas + self.num_expr

    @property
    def camera_width(self):
        return 2 * (self.fourier_bands + 1) if self.camera_aware else 0

    @property
    def token_width(self):
        return self.feature_width + self.camera_width

    @property
    def query_width(self):
        return self.token_width + self.param_width

    @property
    def standard_focal(self):
        return geometry.focal_from_fov(self.fov, self.image_size)

    def standard_camera(self) -> Camera:
        return Camera.from_fov(self.fov, self.image_size)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise NetError(f"unknown NetConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenGrid:
    features: T.Tensor  # (B, G, D_eff)
    grid_w: int
    grid_h: int
    width: int

    @property
    def backbone(self):
        return self.features


@dataclass
class PersonPrediction:
    patch_index: tuple
    score: float
    coords: np.ndarray  # (2,)
    params: BodyParams
    depth: float
    location: np.ndarray  # (3,)
    vertices: np.ndarray  # (V, 3) world
    joints: np.ndarray  # (J, 3) world

    def to_dict(self):
        return {"patch": list(self.patch_index), "score": self.score,
                "coords": self.coords.tolist(), "depth": self.depth,
                "location": self.location.tolist(), "pose": self.params.pose.tolist(),
                "shape": self.params.shape.tolist(),
                "expression": self.params.expression.tolist()}


def patchify(images, patch):
    """(B, H, W, C) -> (B, G, P*P*C) in row-major token order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def refine(patches, offsets, patch):
    """Patch (i, j) plus pixel offset -> pixel coords of the primary keypoint."""
    ij = np.asarray(patches, dtype=np.float64).reshape(-1, 2)
    return ij * patch + patch / 2.0 + np.asarray(offsets, dtype=np.float64).reshape(-1, 2)


def decode_depth(eta_hat, focal, standard_focal):
    """Normalized nearness -> depth: d = exp(-(f_hat / f) * eta_hat)."""
    return np.exp(-(standard_focal / focal) * eta_hat)


class MultiHMR:
    def __init__(self, cfg: NetConfig, model: BodyModel = None):
        self.cfg = cfg
        self.model = model if model is not None else bm.make_toy_model(
            cfg.body_seed, cfg.num_vertices, cfg.num_joints, cfg.num_betas, cfg.num_expr)
        m = self.model
        if (m.num_vertices, m.num_joints, m.num_betas, m.num_expr) != (
                cfg.num_vertices, cfg.num_joints, cfg.num_betas, cfg.num_expr):
            raise NetError("body model does not match NetConfig")
        rng = np.random.default_rng(cfg.init_seed)
        s = self.store = ParamStore()
        D, G, Dq = cfg.feature_width, cfg.num_tokens, cfg.query_width
        P, C = cfg.patch_size, cfg.channels

        self.patch_embed = Linear(s, "embed.patch", P * P * C, D, rng)
        self.pos = s.add("embed.pos", rng.normal(scale=0.02, size=(G, D)))
        self.enc = []
        for k in range(cfg.encoder_layers):
            self.enc.append(dict(
                ln1=LayerNorm(s, f"encoder.{k}.ln1", D),
                attn=Attention(s, f"encoder.{k}.attn", D, D, D, cfg.encoder_heads, rng),
                ln2=LayerNorm(s, f"encoder.{k}.ln2", D),
                mlp=MLP(s, f"encoder.{k}.mlp", D, cfg.mlp_ratio * D, D, rng)))
        self.enc_ln = LayerNorm(s, "encoder.ln", D)

        Hd = cfg.head_width or D
        self.det = MLP(s, "det", D, Hd, 1, rng)
        s["det.fc2.b"].data[:] = -np.log((1 - 0.01) / 0.01)  # prior score 0.01
        self.offset = MLP(s, "offset", D, Hd, 2, rng)

        self.query_pos = s.add("hph.query_pos", rng.normal(scale=0.02, size=(G, Dq)))
        self.hph_blocks = []
        De = cfg.token_width
        for k in range(cfg.hph_layers):
            self.hph_blocks.append(dict(
                ln_q=LayerNorm(s, f"hph.{k}.ln_q", Dq),
                ln_kv=LayerNorm(s, f"hph.{k}.ln_kv", De),
                cross=Attention(s, f"hph.{k}.cross", Dq, De, cfg.hph_dim, cfg.hph_heads, rng),
                ln_s=LayerNorm(s, f"hph.{k}.ln_s", Dq),
                self_attn=Attention(s, f"hph.{k}.self", Dq, Dq, cfg.hph_dim, cfg.hph_heads, rng),
                ln_m=LayerNorm(s, f"hph.{k}.ln_m", Dq),
                mlp=MLP(s, f"hph.{k}.mlp", Dq, cfg.mlp_ratio * cfg.hph_dim, Dq, rng)))
        self.hph_ln = LayerNorm(s, "hph.ln", Dq)
        self.regressor = MLP(s, "regressor", Dq, Dq, cfg.param_width + 1, rng,
                             out_scale=cfg.regressor_init_scale)
        self.nearness_bias = s.add("regressor.nearness_bias", np.array([-np.log(3.0)]))

        J = cfg.num_joints
        self.mean_x = np.concatenate([np.tile([1.0, 0, 0, 0, 1.0, 0], J),
                                      np.zeros(cfg.num_betas + cfg.num_expr)])
        self.centers = geometry.patch_centers(cfg.grid, cfg.grid, P).reshape(G, 2)

    # ------------------------------------------------------------------ parts

    def camera_embedding(self, camera: Camera):
        g = self.cfg.grid
        rays = geometry.ray_grid(camera, g, g, self.cfg.patch_size).reshape(g * g, 2)
        return geometry.fourier_encode(rays, self.cfg.fourier_bands)

    def encode(self, images, cameras=None) -> TokenGrid:
        """images (B, H, W, C) or (H, W, C); cameras: list (camera-aware only)."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise NetError(f"image shape {images.shape[1:]} does not match config "
                           f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
        if cfg.camera_aware and cameras is None:
            raise NetError("camera-aware network needs camera intrinsics")
        x = self.patch_embed(patchify(images, cfg.patch_size)) + self.pos
        for blk in self.enc:
            h = blk["ln1"](x)
            x = x + blk["attn"](h, h)
            x = x + blk["mlp"](blk["ln2"](x))
        x = self.enc_ln(x)
        if cfg.camera_aware:
            emb = np.stack([self.camera_embedding(c) for c in cameras])
            x = T.concat([x, emb], axis=-1)
        return TokenGrid(x, cfg.grid, cfg.grid, cfg.token_width)

    def scores(self, grid: TokenGrid):
        D = self.cfg.feature_width
        feats = grid.features if not self.cfg.camera_aware else T.getitem(
            grid.features, (Ellipsis, slice(0, D)))
        logits = T.reshape(self.det(feats), feats.shape[:-1])
        return T.sigmoid(logits), feats

    def offsets(self, feats):
        return T.tanh(self.offset(feats)) * float(self.cfg.patch_size)

    def run_hph(self, tokens_flat, context, queries_img, n_img, mask_needed=True):
        """tokens_flat: (N,) token ids; context: (B, G, De); queries_img: (N,) image ids."""
        cfg = self.cfg
        B, G, De = context.shape
        N = len(tokens_flat)
        ctx = T.reshape(context, (B * G, De))
        Eg = T.take(ctx, queries_img * G + tokens_flat, 0)
        q = T.concat([Eg, np.broadcast_to(self.mean_x, (N, cfg.param_width))], axis=-1)
        q = q + T.take(self.query_pos, tokens_flat, 0)
        cross_mask = self_mask = None
        if mask_needed and B > 1:
            img_of_key = np.repeat(np.arange(B), G)
            cross_mask = np.where(queries_img[:, None] == img_of_key[None, :], 0.0, NEG_INF)
            self_mask = np.where(queries_img[:, None] == queries_img[None, :], 0.0, NEG_INF)
        for blk in self.hph_blocks:
            kv = blk["ln_kv"](ctx)
            q = q + blk["cross"](blk["ln_q"](q), kv, cross_mask)
            h = blk["ln_s"](q)
            q = q + blk["self_attn"](h, h, self_mask)
            q = q + blk["mlp"](blk["ln_m"](q))
        return self.hph_ln(q)

    def regress(self, Q, coords, focal, principal):
        """HPH rows -> rotations, shape, expression, depth, location (all Tensors).

        focal (N,), principal (N, 2) are the intrinsics used for decoding.
        """
        cfg = self.cfg
        J, Bn, En = cfg.num_joints, cfg.num_betas, cfg.num_expr
        N = Q.shape[0]
        out = self.regressor(Q)
        x = T.getitem(out, (slice(None), slice(0, cfg.param_width))) + self.mean_x
        sixd = T.reshape(T.getitem(x, (slice(None), slice(0, 6 * J))), (N, J, 6))
        betas = T.getitem(x, (slice(None), slice(6 * J, 6 * J + Bn)))
        expr = T.getitem(x, (slice(None), slice(6 * J + Bn, 6 * J + Bn + En)))
        eta_hat = T.getitem(out, (slice(None), slice(cfg.param_width, cfg.param_width + 1)))
        eta_hat = eta_hat + self.nearness_bias
        ratio = (cfg.standard_focal / np.asarray(focal, dtype=np.float64)).reshape(N, 1)
        depth = T.exp(T.neg(eta_hat * ratio))  # (N, 1)
        rel = (T.as_tensor(coords) - np.asarray(principal)) * (1.0 / np.asarray(focal).reshape(N, 1))
        location = T.concat([rel * depth, depth], axis=-1)
        rot = bm.sixd_to_matrix_t(sixd)
        return dict(rotmats=rot, betas=betas, expr=expr, eta_hat=eta_hat,
                    depth=T.reshape(depth, (N,)), location=location)

    def decode_camera(self, camera: Camera):
        """Intrinsics used for depth decode / back-projection."""
        if self.cfg.camera_aware:
            return camera
        c = self.cfg.standard_camera()
        return c

    def decode(self, grid: TokenGrid, feats, tokens, img_ids, cameras, with_mesh=True):
        """Shared tail of training and inference for selected tokens."""
        B = grid.features.shape[0]
        N = len(tokens)
        G = self.cfg.num_tokens
        offs = self.offsets(T.take(T.reshape(feats, (B * G, feats.shape[-1])), img_ids * G + tokens, 0))
        coords = offs + self.centers[tokens]
        Q = self.run_hph(tokens, grid.features, img_ids, B)
        dcams = [self.decode_camera(c) if c is not None else self.cfg.standard_camera()
                 for c in cameras]
        focal = np.array([dcams[b].focal for b in img_ids], dtype=np.float64)
        principal = np.array([dcams[b].principal_point for b in img_ids],
                             dtype=np.float64).reshape(N, 2)
        out = self.regress(Q, coords, focal, principal)
        out.update(coords=coords, offsets=offs, hph=Q, focal=focal, principal=principal)
        if with_mesh:
            verts, joints = bm.forward_t(self.model, out["rotmats"], out["betas"], out["expr"])
            out.update(vertices=verts, joints=joints)
        return out

    # ------------------------------------------------------------- top level

    def teacher_forced_forward(self, images, targets, cameras):
        """Scores for every token plus predictions at ground-truth person tokens."""
        cams = list(cameras)
        grid = self.encode(images, cams if self.cfg.camera_aware else None)
        scores, feats = self.scores(grid)
        tokens = np.concatenate([t.tokens for t in targets]).astype(np.intp) if targets else np.zeros(0, np.intp)
        img_ids = np.concatenate([np.full(t.count, b) for b, t in enumerate(targets)]).astype(np.intp)
        out = {"scores": scores, "grid": grid}
        if len(tokens):
            out.update(self.decode(grid, feats, tokens, img_ids, cams))
            out["pose"] = bm.matrix_to_axis_angle_t(out["rotmats"])
        out["tokens"], out["img_ids"] = tokens, img_ids
        return out

    def detect(self, grid: TokenGrid, tau=None):
        """[(token, score)] for tokens of image 0 with score >= tau."""
        tau = self.cfg.detection_threshold if tau is None else tau
        if not 0 < tau < 1:
            raise NetError("tau must lie in (0, 1)")
        with T.no_grad():
            s, _ = self.scores(grid)
        s = s.data[0]
        idx = np.flatnonzero(s >= tau)
        return [(int(k), float(s[k])) for k in idx]

    def refine_coords(self, grid: TokenGrid, detections):
        """Pixel coords for detections [(token, score)] of image 0."""
        tokens = np.array([d[0] for d in detections], dtype=np.intp)
        if not len(tokens):
            return np.zeros((0, 2))
        with T.no_grad():
            _, feats = self.scores(grid)
            offs = self.offsets(T.take(feats.reshape(-1, feats.shape[-1]), tokens, 0)).data
        g = self.cfg.grid
        return refine(np.c_[tokens % g, tokens // g], offs, self.cfg.patch_size)

    def hph(self, grid: TokenGrid, detections):
        """HPH output rows (N, D_eff + D') for detections of image 0."""
        tokens = np.array([d[0] for d in detections], dtype=np.intp)
        if not len(tokens):
            return np.zeros((0, self.cfg.query_width))
        ctx = T.getitem(grid.features, (slice(0, 1),))
        with T.no_grad():
            return self.run_hph(tokens, ctx, np.zeros(len(tokens), np.intp), 1).data

    def regress_person(self, hph_row, coords, camera: Camera = None):
        """One HPH row -> (BodyParams, depth, location), decoded with ``camera``
        (camera-aware) or the standard camera."""
        cam = self.decode_camera(camera) if camera is not None else self.cfg.standard_camera()
        with T.no_grad():
            out = self.regress(T.as_tensor(np.asarray(hph_row, dtype=np.float64)[None]),
                               np.asarray(coords, dtype=np.float64).reshape(1, 2),
                               np.array([cam.focal]), np.array([cam.principal_point]))
        pose = geometry.matrix_to_axis_angle(out["rotmats"].data[0])
        params = BodyParams(pose, out["betas"].data[0].copy(), out["expr"].data[0].copy())
        return params, float(out["depth"].data[0]), out["location"].data[0].copy()

    def infer(self, image, camera: Camera = None, tau=None, forced_tokens=None):
        """Full decode of one image -> list of PersonPrediction.

        ``forced_tokens`` replaces thresholded detections (benchmarking).
        """
        cfg = self.cfg
        cam_in = camera
        if cfg.camera_aware and cam_in is None:
            cam_in = cfg.standard_camera()
        with T.no_grad():
            grid = self.encode(image, [cam_in] if cfg.camera_aware else None)
            scores, feats = self.scores(grid)
            tau = cfg.detection_threshold if tau is None else tau
            s = scores.data[0]
            tokens = np.flatnonzero(s >= tau) if forced_tokens is None else np.asarray(forced_tokens)
            tokens = tokens.astype(np.intp)
            if len(tokens) == 0:
                return []
            out = self.decode(grid, feats, tokens, np.zeros(len(tokens), np.intp), [cam_in])
        R = out["rotmats"].data
        pose = geometry.matrix_to_axis_angle(R)
        preds = []
        g = cfg.grid
        for n, tok in enumerate(tokens):
            t = out["location"].data[n]
            params = BodyParams(pose[n], out["betas"].data[n].copy(), out["expr"].data[n].copy())
            preds.append(PersonPrediction(
                patch_index=(int(tok % g), int(tok // g)), score=float(s[tok]),
                coords=out["coords"].data[n].copy(), params=params,
                depth=float(out["depth"].data[n]), location=t.copy(),
                vertices=out["vertices"].data[n] + t, joints=out["joints"].data[n] + t))
        return preds
