"""Differentiable volume renderer over oriented voxel primitives.

``march`` records the ray-march kernel as one operation on the autodiff
graph (the adjoint pass runs in the same backend); ``render_image``
composites the marched radiance over a background. The march itself is
tile-free: rays are independent, so parallelism is per-ray inside the
kernel.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bvh as bvh_mod
from . import kernels
from .geometry import Camera, RigidPose, generate_rays, pixel_grid, quat_to_mat

MAX_STEPS = 512


@dataclass
class RenderSettings:
    """Marching configuration shared by forward and adjoint passes."""

    dt: float | None = None  # None: half the smallest voxel extent
    max_steps: int = MAX_STEPS
    use_bvh: bool = True
    num_threads: int = 0  # 0: all cores
    deterministic: bool = False

    def resolve_dt(self, scales: np.ndarray, grid: int) -> float:
        if self.dt is not None:
            return float(self.dt)
        smallest = float(np.min(scales))
        return max(1e-4, smallest * 2.0 / grid * 0.5)

    def threads(self) -> int:
        cores = os.cpu_count() or 1
        if self.deterministic:
            return 1
        env = int(os.environ.get("VOXELHEAD_THREADS", "0"))
        if env > 0:
            return env
        # SMT-only / oversubscribed hosts regress badly with OpenMP here,
        # so only spread across real parallelism
        usable = 1 if cores <= 2 else cores
        return min(self.num_threads, usable) if self.num_threads else usable


@dataclass
class RenderedImage:
    """Linear radiance plus accumulated opacity at the far plane."""

    radiance: np.ndarray  # (H, W, 3)
    coverage: np.ndarray  # (H, W)

    def composite(self) -> np.ndarray:
        return self.radiance


def _flat_bvh(R64, t64, s64, settings: RenderSettings):
    tree = bvh_mod.build_bvh(R64, t64, s64)
    return tree


def march(
    R: ad.Tensor,
    t: ad.Tensor,
    s: ad.Tensor,
    va: ad.Tensor,
    vc: ad.Tensor,
    o: ad.Tensor,
    d: ad.Tensor,
    tmin: float,
    tmax: float,
    settings: RenderSettings | None = None,
) -> ad.Tensor:
    """March all rays; returns an (N, 4) tensor of [radiance_rgb, coverage].

    R: (P,3,3) local-to-world rotations, t: (P,3) centers, s: (P,3)
    half-extents, va: (P, D^3) opacity density, vc: (P, D^3, 3)
    radiance, o/d: (N,3) ray origins/unit directions.
    """
    settings = settings or RenderSettings()
    P = t.shape[0]
    vox = va.shape[1]
    D = round(vox ** (1 / 3))
    dtype = np.result_type(R.dtype, va.dtype, o.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.float32

    R64 = np.asarray(R.data, dtype=np.float64)
    t64 = np.asarray(t.data, dtype=np.float64)
    s64 = np.asarray(s.data, dtype=np.float64)
    tree = _flat_bvh(R64, t64, s64, settings)
    dt = settings.resolve_dt(s64, D)
    nthreads = settings.threads()

    backend = kernels.active_backend()
    if backend == "compiled":
        c = lambda a: np.ascontiguousarray(a, dtype=dtype)
        # the kernel wants rows = local axes (transpose of local-to-world)
        Rc = c(R.data.transpose(0, 2, 1))
        tc, sc = c(t.data), c(s.data)
        vac = c(va.data.reshape(P, vox))
        vcc = c(vc.data.reshape(P, vox * 3))
        oc, dc = c(o.data), c(d.data)
        out_rad = np.zeros((len(oc), 3), dtype=dtype)
        out_cov = np.zeros(len(oc), dtype=dtype)
        kernels._march.march_forward(
            oc, dc, dtype.type(tmin), dtype.type(tmax), dtype.type(dt),
            Rc, tc, sc, vac, vcc,
            tree.bb_min, tree.bb_max, tree.left, tree.right, tree.order,
            int(settings.use_bvh), settings.max_steps, nthreads,
            out_rad, out_cov,
        )
        saved = (oc, dc, Rc, tc, sc, vac, vcc)
    else:
        rad64, cov64 = kernels.numpy_backend.march_forward(
            np.asarray(o.data, dtype=np.float64), np.asarray(d.data, dtype=np.float64),
            tmin, tmax, dt, R64, t64, s64,
            np.asarray(va.data, dtype=np.float64).reshape(P, vox),
            np.asarray(vc.data, dtype=np.float64).reshape(P, vox * 3),
            tree, settings.use_bvh, settings.max_steps,
        )
        out_rad = rad64.astype(dtype)
        out_cov = cov64.astype(dtype)
        saved = None

    result = np.concatenate([out_rad, out_cov[:, None]], axis=1)

    def bw(g):
        grad_rad = np.ascontiguousarray(g[:, :3], dtype=dtype)
        grad_cov = np.ascontiguousarray(g[:, 3], dtype=dtype)
        if backend == "compiled":
            oc, dc, Rc, tc, sc, vac, vcc = saved
            nbuck = 1 if settings.deterministic else max(1, nthreads)
            gR_buf = np.zeros((nbuck, P, 3, 3), dtype=dtype)
            gt_buf = np.zeros((nbuck, P, 3), dtype=dtype)
            gs_buf = np.zeros((nbuck, P, 3), dtype=dtype)
            gva_buf = np.zeros((nbuck, P, vox), dtype=dtype)
            gvc_buf = np.zeros((nbuck, P, vox * 3), dtype=dtype)
            g_o = np.zeros_like(oc)
            g_d = np.zeros_like(dc)
            kernels._march.march_backward(
                oc, dc, dtype.type(tmin), dtype.type(tmax), dtype.type(dt),
                Rc, tc, sc, vac, vcc,
                tree.bb_min, tree.bb_max, tree.left, tree.right, tree.order,
                int(settings.use_bvh), settings.max_steps, nthreads,
                grad_rad, grad_cov,
                gR_buf, gt_buf, gs_buf, gva_buf, gvc_buf, g_o, g_d,
            )
            gR = gR_buf.sum(axis=0).transpose(0, 2, 1)
            gt = gt_buf.sum(axis=0)
            gs = gs_buf.sum(axis=0)
            gva = gva_buf.sum(axis=0)
            gvc = gvc_buf.sum(axis=0)
        else:
            grads = kernels.numpy_backend.march_backward(
                np.asarray(o.data, dtype=np.float64), np.asarray(d.data, dtype=np.float64),
                tmin, tmax, dt, R64, t64, s64,
                np.asarray(va.data, dtype=np.float64).reshape(P, vox),
                np.asarray(vc.data, dtype=np.float64).reshape(P, vox * 3),
                tree, settings.use_bvh, settings.max_steps,
                grad_rad.astype(np.float64), grad_cov.astype(np.float64),
            )
            gR, gt, gs = grads["R"], grads["t"], grads["s"]
            gva, gvc = grads["va"], grads["vc"]
            g_o, g_d = grads["o"], grads["d"]
        return (
            gR.reshape(R.shape).astype(R.dtype),
            gt.reshape(t.shape).astype(t.dtype),
            gs.reshape(s.shape).astype(s.dtype),
            gva.reshape(va.shape).astype(va.dtype),
            gvc.reshape(vc.shape).astype(vc.dtype),
            g_o.reshape(o.shape).astype(o.dtype),
            g_d.reshape(d.shape).astype(d.dtype),
        )

    return ad.custom_op(result, (R, t, s, va, vc, o, d), bw, "ray_march")


def composite_over(march_out: ad.Tensor, background: ad.Tensor) -> ad.Tensor:
    """out = radiance + (1 - coverage) * background, per ray."""
    rad = march_out[:, 0:3]
    cov = march_out[:, 3:4]
    one = ad.tensor(np.ones_like(cov.data))
    return ad.add(rad, ad.mul(ad.sub(one, cov), background))


def render_rays(
    world_R: np.ndarray,
    world_t: np.ndarray,
    world_s: np.ndarray,
    va: np.ndarray,
    vc: np.ndarray,
    o: np.ndarray,
    d: np.ndarray,
    tmin: float,
    tmax: float,
    background: np.ndarray | None = None,
    settings: RenderSettings | None = None,
):
    """Non-differentiable convenience path over plain arrays.

    Returns (rgb (N,3), coverage (N,)).
    """
    with ad.no_grad():
        out = march(
            ad.tensor(world_R), ad.tensor(world_t), ad.tensor(world_s),
            ad.tensor(va), ad.tensor(vc), ad.tensor(o), ad.tensor(d),
            tmin, tmax, settings,
        )
    rad = out.data[:, :3]
    cov = out.data[:, 3]
    if background is not None:
        rad = rad + (1.0 - cov[:, None]) * background
    return rad, cov


def render_image(
    frames_R: np.ndarray,
    frames_t: np.ndarray,
    frames_s: np.ndarray,
    va: np.ndarray,
    vc: np.ndarray,
    pose: RigidPose,
    camera: Camera,
    background: np.ndarray,
    settings: RenderSettings | None = None,
) -> RenderedImage:
    """Render a full camera image of posed primitives over a background.

    ``frames_*`` are rest/model-space primitive frames; ``pose`` maps the
    head to world space. ``background`` is (H, W, 3) linear.
    """
    Rp = quat_to_mat(pose.rotation)
    world_R = np.einsum("ij,pjk->pik", Rp, frames_R)
    world_t = frames_t @ Rp.T + pose.translation
    pixels = pixel_grid(camera.width, camera.height)
    o, d, tmin, tmax = generate_rays(camera, pixels)
    bg = background.reshape(-1, 3)
    rgb, cov = render_rays(
        world_R, world_t, frames_s, va, vc, o, d, tmin, tmax, bg, settings
    )
    H, W = camera.height, camera.width
    return RenderedImage(rgb.reshape(H, W, 3), cov.reshape(H, W))


# -- benchmark ---------------------------------------------------------------------


def _benchmark_scene(n_prim: int = 256, grid_d: int = 8, seed: int = 0):
    """Head-like shell of boxes with opaque noise payloads."""
    rng = np.random.default_rng(seed)
    G = int(round(np.sqrt(n_prim)))
    from .geometry import build_head_proxy, build_uv_attachment, rest_frames_np

    mesh = build_head_proxy()
    att = build_uv_attachment(mesh, G)
    R, t, s, active = rest_frames_np(att, mesh.vertices)
    va = rng.uniform(0.5, 4.0, (len(t), grid_d**3))
    vc = rng.uniform(0.0, 1.0, (len(t), grid_d**3, 3))
    f32 = np.float32
    return R.astype(f32), t.astype(f32), s.astype(f32), va.astype(f32), vc.astype(f32)


def benchmark(
    width: int = 256,
    height: int = 256,
    n_prim: int = 256,
    grid_d: int = 8,
    frames: int = 50,
    threads: int = 0,
    backends: tuple[str, ...] | None = None,
    deterministic: bool = False,
) -> dict:
    """Median fps over >= ``frames`` renders, per backend, with stage timings."""
    from .geometry import look_at_camera

    R, t, s, va, vc = _benchmark_scene(n_prim, grid_d)
    cam = look_at_camera([0, 0, 35.0], [0, 0, 0], width, height, focal=width * 1.3)
    pixels = pixel_grid(width, height)
    o, d, tmin, tmax = generate_rays(cam, pixels)
    o = o.astype(np.float32)
    d = d.astype(np.float32)
    bg = np.zeros((width * height, 3), dtype=np.float32)
    if backends is None:
        backends = ("compiled", "numpy") if kernels.HAVE_COMPILED else ("numpy",)
    report: dict = {"width": width, "height": height, "n_prim": n_prim, "D": grid_d,
                    "frames": frames, "threads": threads or (os.cpu_count() or 1),
                    "backends": {}}
    prev = kernels.active_backend()
    try:
        for backend in backends:
            kernels.set_backend(backend)
            settings = RenderSettings(num_threads=threads, deterministic=deterministic)
            n_frames = frames if backend == "compiled" else max(2, frames // 25)
            t_bvh = t_march = t_comp = 0.0
            times = []
            for i in range(n_frames):
                f0 = time.perf_counter()
                R64 = np.asarray(R, dtype=np.float64)
                tree = bvh_mod.build_bvh(R64, t, s)
                f1 = time.perf_counter()
                rgb, cov = render_rays(R, t, s, va, vc, o, d, tmin, tmax,
                                       settings=settings)
                f2 = time.perf_counter()
                out = rgb + (1 - cov[:, None]) * bg
                f3 = time.perf_counter()
                t_bvh += f1 - f0
                t_march += f2 - f1
                t_comp += f3 - f2
                times.append(f3 - f0)
            med = float(np.median(times))
            report["backends"][backend] = {
                "median_s_per_frame": med,
                "median_fps": 1.0 / med if med > 0 else float("inf"),
                "stage_s": {
                    "bvh_build": t_bvh / n_frames,
                    "march": t_march / n_frames,
                    "composite": t_comp / n_frames,
                },
                "frames_timed": n_frames,
            }
    finally:
        kernels.set_backend(prev)
    return report


def save_benchmark_report(path, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=1)
