"""The generative head model: five decoders, two encoders, and the
per-subject identity-code table.

Data flow per forward pass:

    z_id ──> D_id ──> feature pyramids ──┬─> D_alpha ──> V_alpha
    z_id,z_e ──> D_T ──> frame residuals ├─> (detached cross maps)
    z_e ────────────────────────────────-┴─> D_rgb trunk ──> U
    d ──> view/light mixer M;  V_rgb = U @ (sum_j l_j * M_j)

z_id reaches the opacity/appearance decoders only through the identity
feature pyramids and the detached cross maps from the transform
decoder, so gradients from image losses never flow into D_T through the
cross connections (the detach contract).

The appearance branch is factorized: a non-negative per-voxel feature
field U (rank R) and a non-negative per-light-direction mixing tensor
M(d) are contracted with the light intensities, so predicted radiance
is exactly linear in the incoming light field by construction, without
materializing a per-direction radiance volume.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import geometry as geo
from . import lighting
from . import render
from .autodiff import Tensor

LRELU_SLOPE = 0.2


@dataclass
class ModelConfig:
    d_id: int = 128
    d_e: int = 16
    grid: int = 16          # primitives per UV axis; N_prim = grid^2
    vox: int = 8            # voxel grid resolution D per primitive axis
    n_l: int = 64           # light directions
    rank: int = 16          # appearance basis rank
    n_views: int = 3        # encoder input views
    enc_res: int = 64       # encoder input resolution
    alpha_gain: float = 2.0  # opacity density scale (per cm)
    scale_floor: float = 1e-3
    overlap: float = 1.5

    @property
    def n_prim(self) -> int:
        return self.grid * self.grid

    @property
    def n_voxels(self) -> int:
        return self.vox**3

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        # capture-rig scale configuration: accepted, not trained at desk scale
        return cls(grid=128, n_l=356)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _he(rng, shape, fan_in, gain=1.0):
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(np.float32)


class HeadModel:
    """Model parameters plus the forward maps. Not thread-safe for writes."""

    def __init__(self, config: ModelConfig, n_subjects: int, seed: int = 0,
                 mesh: geo.BaseMesh | None = None):
        self.config = config
        self.n_subjects = n_subjects
        self.mesh = mesh or geo.default_mesh()
        self.attach = geo.build_uv_attachment(self.mesh, config.grid, config.overlap)
        self.directions = lighting.sample_sphere(config.n_l)
        self.template = self.mesh.vertices.astype(np.float32)
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))
        self.dtype = np.float32

    # -- parameter construction ----------------------------------------------

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True)

    def _add_affine(self, name, din, dout, rng, zero=False, bias0=0.0):
        w = np.zeros((dout, din), dtype=np.float32) if zero else _he(rng, (dout, din), din)
        b = np.full(dout, bias0, dtype=np.float32)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", b)

    def _add_conv(self, name, cin, cout, k, rng, zero=False, bias0=0.0):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, dtype=np.float32) if zero else _he(rng, shape, cin * k * k)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.full(cout, bias0, dtype=np.float32))

    def _add_tconv(self, name, cin, cout, k, rng):
        w = _he(rng, (cin, cout, k, k), cin * k * k)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _build(self, rng):
        cfg = self.config
        nv = len(self.template)
        # identity code table (auto-decoder): Gaussian noise init
        self._add("id_codes", (0.1 * rng.standard_normal((self.n_subjects, cfg.d_id))).astype(np.float32))

        # mesh decoder: MLP on [z_id, z_e], residual off the template
        self._add_affine("dec_mesh.l0", cfg.d_id + cfg.d_e, 256, rng)
        self._add_affine("dec_mesh.l1", 256, 256, rng)
        self._add_affine("dec_mesh.l2", 256, nv * 3, rng, zero=True)

        # identity decoder: latent -> 4x4 map -> pyramids at 4/8/16
        self._add_affine("dec_id.fc", cfg.d_id, 128 * 16, rng)
        self._add_tconv("dec_id.up1", 128, 64, 4, rng)   # 4 -> 8
        self._add_tconv("dec_id.up2", 64, 48, 4, rng)    # 8 -> 16
        for lvl, cin in (("4", 128), ("8", 64), ("16", 48)):
            self._add_conv(f"dec_id.alpha{lvl}", cin, 32, 1, rng)
            self._add_conv(f"dec_id.appe{lvl}", cin, 32, 1, rng)

        # transform decoder on [z_id, z_e]
        self._add_affine("dec_t.fc", cfg.d_id + cfg.d_e, 64 * 16, rng)
        self._add_tconv("dec_t.up1", 64, 48, 4, rng)     # 4 -> 8
        self._add_tconv("dec_t.up2", 48, 32, 4, rng)     # 8 -> 16
        self._add_conv("dec_t.head", 32, 10, 1, rng, zero=True)

        # opacity decoder on z_e + pyramids + detached cross maps
        self._add_affine("dec_a.fc", cfg.d_e, 128 * 16, rng)
        self._add_tconv("dec_a.up1", 128 + 32, 96, 4, rng)          # 4 -> 8
        self._add_tconv("dec_a.up2", 96 + 32 + 48, 96, 4, rng)      # 8 -> 16
        self._add_conv("dec_a.head", 96 + 32 + 32, cfg.n_voxels, 1, rng, bias0=0.0)

        # appearance trunk on z_e + pyramids + detached cross maps
        self._add_affine("dec_c.fc", cfg.d_e, 128 * 16, rng)
        self._add_tconv("dec_c.up1", 128 + 32, 96, 4, rng)          # 4 -> 8
        self._add_tconv("dec_c.up2", 96 + 32 + 48, 96, 4, rng)      # 8 -> 16
        self._add_conv("dec_c.mix", 96 + 32 + 32, 96, 1, rng)
        self._add_tconv("dec_c.up3", 96, 48, 4, rng)                # 16 -> 32
        self._add_tconv("dec_c.up4", 48, 32, 4, rng)                # 32 -> 64
        half = cfg.vox // 2
        self._add_conv("dec_c.head", 32, cfg.rank * half, 1, rng, bias0=0.0)

        # view-conditioned light mixer
        self._add_affine("mixer.l0", 3, 32, rng)
        self._add_affine("mixer.l1", 32, cfg.n_l * cfg.rank * 3, rng, bias0=-7.3)

        # encoders (expression VAE head + rigid transform head)
        for enc in ("enc_e", "enc_t"):
            self._add_conv(f"{enc}.c0", 3 * cfg.n_views, 32, 4, rng)
            self._add_conv(f"{enc}.c1", 32, 64, 4, rng)
            self._add_conv(f"{enc}.c2", 64, 96, 4, rng)
            self._add_conv(f"{enc}.c3", 96, 128, 4, rng)
            self._add_affine(f"{enc}.fc", 128 * 16, 256, rng)
        self._add_affine("enc_e.mu", 256, cfg.d_e, rng, zero=True)
        self._add_affine("enc_e.lv", 256, cfg.d_e, rng, zero=True)
        self._add_affine("enc_t.head", 256, 7, rng, zero=True)

        # trilinear voxel upsampling matrix (fixed, not trained)
        self.upsample = _upsample_matrix(cfg.vox // 2, cfg.vox)

    # -- trainable parameter views --------------------------------------------

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items()
                if k.startswith(("dec_", "mixer."))}

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc_")}

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.params)

    # -- layer helpers ----------------------------------------------------------

    def _affine(self, name, x, act=True):
        y = ad.affine(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        return ad.leaky_relu(y, LRELU_SLOPE) if act else y

    def _conv(self, name, x, stride=1, pad=0, act=True):
        y = ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)
        return ad.leaky_relu(y, LRELU_SLOPE) if act else y

    def _tconv(self, name, x, act=True):
        y = ad.transposed_conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                                 stride=2, pad=1)
        return ad.leaky_relu(y, LRELU_SLOPE) if act else y

    # -- decoders -----------------------------------------------------------------

    def decode_mesh(self, z_id: Tensor, z_e: Tensor) -> Tensor:
        """Vertex positions (N_v, 3): template plus predicted residual."""
        self._check_dims(z_id, z_e)
        h = ad.concat([z_id, z_e], axis=0).reshape(1, -1)
        h = self._affine("dec_mesh.l0", h)
        h = self._affine("dec_mesh.l1", h)
        res = self._affine("dec_mesh.l2", h, act=False).reshape(len(self.template), 3)
        return ad.add(ad.mul(res, ad.tensor(np.float32(0.1))), ad.tensor(self.template))

    def decode_identity(self, z_id: Tensor):
        """Feature pyramids: dict level -> (alpha map, appearance map)."""
        if z_id.shape != (self.config.d_id,):
            raise ad.ShapeError(f"identity code must be ({self.config.d_id},), got {z_id.shape}")
        h4 = self._affine("dec_id.fc", ad.reshape(z_id, (1, -1))).reshape(1, 128, 4, 4)
        h8 = self._tconv("dec_id.up1", h4)
        h16 = self._tconv("dec_id.up2", h8)
        pyr = {}
        for lvl, h in (("4", h4), ("8", h8), ("16", h16)):
            pyr[lvl] = (self._conv(f"dec_id.alpha{lvl}", h),
                        self._conv(f"dec_id.appe{lvl}", h))
        return pyr

    def decode_transform(self, z_id: Tensor, z_e: Tensor):
        """Per-primitive residual transforms plus cross maps for detach-concat.

        Returns ((quat (P,4), trans (P,3), scale factors (P,3)), cross)
        where cross = {"8": map, "16": map} BEFORE detaching (callers detach).
        """
        self._check_dims(z_id, z_e)
        cfg = self.config
        h4 = self._affine("dec_t.fc", ad.concat([z_id, z_e], axis=0).reshape(1, -1)).reshape(1, 64, 4, 4)
        h8 = self._tconv("dec_t.up1", h4)
        h16 = self._tconv("dec_t.up2", h8)
        head = self._conv("dec_t.head", h16, act=False)  # (1, 10, G, G)
        P = cfg.n_prim
        head = ad.transpose(head.reshape(10, P), (1, 0))  # (P, 10)
        q0 = np.zeros((P, 4), dtype=np.float32)
        q0[:, 0] = 1.0
        quat = geo.quat_normalize_t(ad.add(ad.tensor(q0), ad.mul(head[:, 0:4], ad.tensor(np.float32(0.3)))))
        trans = head[:, 4:7]
        c0 = float(np.log(np.expm1(1.0 - cfg.scale_floor)))
        scale = ad.add(ad.softplus(ad.add(head[:, 7:10], ad.tensor(np.float32(c0)))),
                       ad.tensor(np.float32(cfg.scale_floor)))
        return (quat, trans, scale), {"8": h8, "16": h16}

    def decode_opacity(self, z_e: Tensor, pyr, cross) -> Tensor:
        """Non-negative opacity densities (N_prim, D^3); cross maps detached."""
        cfg = self.config
        h = self._affine("dec_a.fc", ad.reshape(z_e, (1, -1))).reshape(1, 128, 4, 4)
        h = ad.concat_channels([h, pyr["4"][0]])
        h = self._tconv("dec_a.up1", h)
        h = ad.concat_channels([h, pyr["8"][0], ad.detach(cross["8"])])
        h = self._tconv("dec_a.up2", h)
        h = ad.concat_channels([h, pyr["16"][0], ad.detach(cross["16"])])
        slab = self._conv("dec_a.head", h, act=False)  # (1, D^3, G, G)
        dens = ad.softplus(ad.transpose(slab.reshape(cfg.n_voxels, cfg.n_prim), (1, 0)))
        return ad.mul(dens, ad.tensor(np.float32(cfg.alpha_gain)))

    def appearance_field(self, z_e: Tensor, pyr, cross) -> Tensor:
        """Per-voxel non-negative basis features U (N_prim, D^3, rank)."""
        cfg = self.config
        h = self._affine("dec_c.fc", ad.reshape(z_e, (1, -1))).reshape(1, 128, 4, 4)
        h = ad.concat_channels([h, pyr["4"][1]])
        h = self._tconv("dec_c.up1", h)
        h = ad.concat_channels([h, pyr["8"][1], ad.detach(cross["8"])])
        h = self._tconv("dec_c.up2", h)
        h = ad.concat_channels([h, pyr["16"][1], ad.detach(cross["16"])])
        h = self._conv("dec_c.mix", h)
        h = self._tconv("dec_c.up3", h)
        h = self._tconv("dec_c.up4", h)   # (1, 48, G*half, G*half)
        slab = ad.softplus(self._conv("dec_c.head", h, act=False))
        # slab: (1, rank*half, G*half, G*half) -> (P, half^3, rank) -> upsample
        half = cfg.vox // 2
        G = cfg.grid
        u = slab.reshape(cfg.rank, half, G, half, G, half)
        u = ad.transpose(u, (2, 4, 1, 3, 5, 0))  # (G, G, hx, hy, hz, rank)
        u = u.reshape(cfg.n_prim, half**3, cfg.rank)
        return _upsample_voxels(u, self.upsample, half, cfg.vox)

    def light_mixer(self, d: Tensor) -> Tensor:
        """Non-negative per-direction mixing tensor M(d): (n_l, rank, 3)."""
        cfg = self.config
        h = self._affine("mixer.l0", ad.reshape(d, (1, 3)))
        m = ad.softplus(self._affine("mixer.l1", h, act=False))
        return m.reshape(cfg.n_l, cfg.rank, 3)

    def decode_appearance(self, z_e: Tensor, d: Tensor, l: Tensor, pyr, cross,
                          basis: Tensor | None = None) -> Tensor:
        """Radiance volume V_rgb (N_prim, D^3, 3), exactly linear in ``l``."""
        if l.shape != (self.config.n_l, 3):
            raise ad.ShapeError(
                f"light field must be ({self.config.n_l}, 3), got {l.shape}")
        U = basis if basis is not None else self.appearance_field(z_e, pyr, cross)
        M = self.light_mixer(d)
        m = ad.sum_(ad.mul(M, l.reshape(self.config.n_l, 1, 3)), axis=0)  # (rank, 3)
        vox = self.config.n_voxels
        flat = U.reshape(self.config.n_prim * vox, self.config.rank)
        return ad.matmul(flat, m).reshape(self.config.n_prim, vox, 3)

    # -- encoders ---------------------------------------------------------------

    def _encode_trunk(self, enc: str, views: Tensor) -> Tensor:
        cfg = self.config
        if views.shape != (cfg.n_views, 3, cfg.enc_res, cfg.enc_res):
            raise ad.ShapeError(
                f"encoder expects ({cfg.n_views}, 3, {cfg.enc_res}, {cfg.enc_res}) views, "
                f"got {views.shape}")
        x = views.reshape(1, 3 * cfg.n_views, cfg.enc_res, cfg.enc_res)
        x = ad.sub(x, ad.tensor(np.float32(0.5)))
        x = self._conv(f"{enc}.c0", x, stride=2, pad=1)
        x = self._conv(f"{enc}.c1", x, stride=2, pad=1)
        x = self._conv(f"{enc}.c2", x, stride=2, pad=1)
        x = self._conv(f"{enc}.c3", x, stride=2, pad=1)
        return self._affine(f"{enc}.fc", x.reshape(1, -1))

    def encode_expression(self, views: Tensor):
        """(mu, log_var) of the expression posterior; log_var clamped."""
        h = self._encode_trunk("enc_e", views)
        mu = self._affine("enc_e.mu", h, act=False).reshape(self.config.d_e)
        lv = ad.clamp(self._affine("enc_e.lv", h, act=False).reshape(self.config.d_e), -10.0, 10.0)
        return mu, lv

    def encode_transform(self, views: Tensor):
        """Head pose estimate: (unit quaternion (4,), translation (3,))."""
        h = self._encode_trunk("enc_t", views)
        out = self._affine("enc_t.head", h, act=False).reshape(7)
        q0 = np.array([1, 0, 0, 0], dtype=np.float32)
        quat = geo.quat_normalize_t(ad.add(ad.tensor(q0), ad.mul(out[0:4], ad.tensor(np.float32(0.3)))))
        trans = ad.mul(out[4:7], ad.tensor(np.float32(3.0)))
        return quat, trans

    # -- composition --------------------------------------------------------------

    def model_frames(self, vertices: Tensor, residuals):
        """Compose rest frames (from decoded vertices) with residual transforms.

        Returns (R (P,3,3), t (P,3), s (P,3)) in model space.
        """
        quat_res, trans_res, scale_fac = residuals
        R_rest, t_rest, s_rest = geo.rest_frames_t(self.attach, vertices)
        R_res = geo.quat_to_mat_t(quat_res)
        R = ad.matmul(R_rest, R_res)
        t = ad.add(t_rest, ad.matmul(R_rest, ad.reshape(trans_res, (-1, 3, 1))).reshape(-1, 3))
        s = ad.mul(s_rest, scale_fac)
        return R, t, s

    def vrmm_forward(self, z_id: Tensor, z_e: Tensor, d: Tensor, l: Tensor):
        """Full decoder composition.

        Returns (vertices, (R, t, s), V_alpha, V_rgb) in model space.
        """
        v = self.decode_mesh(z_id, z_e)
        pyr = self.decode_identity(z_id)
        residuals, cross = self.decode_transform(z_id, z_e)
        va = self.decode_opacity(z_e, pyr, cross)
        vrgb = self.decode_appearance(z_e, d, l, pyr, cross)
        frames = self.model_frames(v, residuals)
        return v, frames, va, vrgb

    def synthesize(self, z_id: Tensor, z_e: Tensor, pose_q: Tensor, pose_t: Tensor,
                   camera: geo.Camera, l: Tensor, background: np.ndarray,
                   pixels: np.ndarray | None = None,
                   rays: tuple | None = None,
                   settings: render.RenderSettings | None = None) -> Tensor:
        """Render the model under a head pose through a camera.

        Returns an (N, 4) tensor of [rgb, coverage] composited over the
        background rows matching the requested pixels. ``rays`` may carry
        precomputed ray tensors (for camera optimization).
        """
        cam_center = camera.center
        d_model = self._view_direction(pose_q.data, cam_center)
        _, frames, va, vrgb = self.vrmm_forward(z_id, z_e, ad.tensor(d_model.astype(np.float32)), l)
        R_model, t_model, s_model = frames
        Rp = geo.quat_to_mat_t(geo.quat_normalize_t(pose_q))
        R_world = ad.matmul(ad.reshape(Rp, (1, 3, 3)), R_model)
        t_world = ad.add(ad.matmul(t_model, ad.transpose(Rp, (1, 0))), ad.reshape(pose_t, (1, 3)))
        if rays is not None:
            o_t, d_t = rays
        else:
            if pixels is None:
                pixels = geo.pixel_grid(camera.width, camera.height)
            o_np, d_np, _, _ = geo.generate_rays(camera, pixels)
            o_t = ad.tensor(o_np.astype(np.float32))
            d_t = ad.tensor(d_np.astype(np.float32))
        out = render.march(R_world, t_world, s_model,
                           va, vrgb, o_t, d_t, camera.near, camera.far, settings)
        bg = ad.tensor(np.ascontiguousarray(background, dtype=out.dtype))
        rgb = render.composite_over(out, bg)
        return ad.concat([rgb, out[:, 3:4]], axis=1)

    @staticmethod
    def _view_direction(pose_q: np.ndarray, cam_center: np.ndarray) -> np.ndarray:
        """Model-space unit direction from head to camera."""
        v = cam_center.astype(np.float64)
        n = np.linalg.norm(v)
        v = v / (n if n > 0 else 1.0)
        return geo.quat_rotate(geo.quat_conj(pose_q.astype(np.float64)), v)

    def _check_dims(self, z_id: Tensor, z_e: Tensor):
        if z_id.shape != (self.config.d_id,):
            raise ad.ShapeError(f"identity code must be ({self.config.d_id},), got {z_id.shape}")
        if z_e.shape != (self.config.d_e,):
            raise ad.ShapeError(f"expression code must be ({self.config.d_e},), got {z_e.shape}")

    # -- persistence ---------------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {name: p.data for name, p in self.params.items()}
        arrays["directions"] = self.directions
        arrays["template"] = self.template
        meta = {
            "config": self.config.to_dict(),
            "n_subjects": self.n_subjects,
            "format": "head-model",
        }
        if extra_meta:
            meta.update(extra_meta)
        ckpt.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "HeadModel":
        arrays, meta = ckpt.load_checkpoint(path)
        config = ModelConfig.from_dict(meta["config"])
        model = cls(config, meta["n_subjects"])
        for name in model.params:
            if name not in arrays:
                raise ckpt.CheckpointError(f"checkpoint missing parameter {name!r}")
            model.params[name] = Tensor(arrays[name], requires_grad=True)
        model.directions = arrays["directions"]
        model.template = arrays["template"].astype(np.float32)
        model.meta = meta
        return model

    def info(self) -> dict:
        """Client-facing descriptor (served as JSON by the render service)."""
        return {
            "version": 1,
            "config": self.config.to_dict(),
            "n_prim": self.config.n_prim,
            "n_l": self.config.n_l,
            "n_subjects": self.n_subjects,
            "directions": self.directions.tolist(),
        }

    def identity_code(self, index: int) -> np.ndarray:
        return self.params["id_codes"].data[index].copy()


def _upsample_matrix(half: int, full: int) -> np.ndarray:
    """1D linear interpolation matrix (full, half), endpoints clamped."""
    w = np.zeros((full, half), dtype=np.float32)
    for i in range(full):
        # align voxel centers of the two grids
        x = (i + 0.5) * half / full - 0.5
        x = min(max(x, 0.0), half - 1.0)
        i0 = min(int(x), half - 2) if half > 1 else 0
        f = x - i0
        w[i, i0] += 1.0 - f
        if half > 1:
            w[i, i0 + 1] += f
    return w


def _upsample_voxels(u: Tensor, w: np.ndarray, half: int, full: int) -> Tensor:
    """(P, half^3, R) -> (P, full^3, R) by separable linear interpolation.

    Interpolation weights are non-negative, so non-negativity of the
    basis features survives the upsampling.
    """
    P = u.shape[0]
    R = u.shape[2]
    WT = ad.tensor(np.ascontiguousarray(w.T))  # (half, full)
    x = u.reshape(P, half, half, half, R)
    # z axis
    x = ad.transpose(x, (0, 1, 2, 4, 3))
    x = ad.matmul(x, WT)
    x = ad.transpose(x, (0, 1, 2, 4, 3))       # (P, hx, hy, fz, R)
    # y axis
    x = ad.transpose(x, (0, 1, 3, 4, 2))
    x = ad.matmul(x, WT)
    x = ad.transpose(x, (0, 1, 4, 2, 3))       # (P, hx, fy, fz, R)
    # x axis
    x = ad.transpose(x, (0, 2, 3, 4, 1))
    x = ad.matmul(x, WT)
    x = ad.transpose(x, (0, 4, 1, 2, 3))       # (P, fx, fy, fz, R)
    return x.reshape(P, full * full * full, R)
