"""Procedural stand-in for a multi-view relightable capture.

Ground truth comes from a deformable "blob head": a smoothly warped
ellipsoid skull with parametric features, shaded analytically per light
direction (Lambert diffuse plus a Schlick-weighted Blinn lobe), so
images are exactly linear in the light field and identity, expression
and lighting factor by construction. That factorization is the oracle
every disentanglement and fitting test scores against: the generator
can render "subject A with expression E" for any A and E.

Dataset layout (versioned):

    root/
      manifest.json          frame records, poses, lights, landmarks
      cameras.json           rig (geometry.save_rig schema)
      backgrounds/<cam>.pfm  static per-camera backgrounds
      subjects/s<ID>/frames/f<IDX>/<cam>.pfm (+ .png previews)
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import imgio, lighting

FORMAT_VERSION = 1
GENERATOR_VERSION = 1

EXPR_DIMS = 6  # jaw, smile, brow, cheek, blink, pucker
LANDMARK_NAMES = [
    "nose_tip", "chin", "eye_l", "eye_r", "mouth_l", "mouth_r",
    "forehead", "cheek_l", "cheek_r", "crown",
]


@dataclass
class SubjectSpec:
    """Identity parameters drawn deterministically from a seed."""

    seed: int
    radii: np.ndarray        # skull ellipsoid half-axes (3,)
    nose: np.ndarray         # (amp, width, height offset)
    eye_sep: float
    eye_height: float
    eye_size: float
    mouth_width: float
    brow_height: float
    skin: np.ndarray         # base albedo (3,)
    lip_color: np.ndarray
    eye_color: np.ndarray
    brow_color: np.ndarray
    spec_strength: float
    spec_power: float
    version: int = GENERATOR_VERSION


def generate_subject(seed: int) -> SubjectSpec:
    rng = np.random.default_rng((GENERATOR_VERSION, seed))
    radii = np.array([
        rng.uniform(5.6, 7.2),
        rng.uniform(7.2, 9.0),
        rng.uniform(5.4, 6.8),
    ])
    hue = rng.uniform(0, 1)
    base = np.array([0.75, 0.55, 0.42])
    tint = np.array([np.cos(2 * np.pi * hue), np.cos(2 * np.pi * hue + 2), np.cos(2 * np.pi * hue + 4)])
    skin = np.clip(base * rng.uniform(0.55, 1.0) + 0.08 * tint, 0.12, 0.95)
    return SubjectSpec(
        seed=seed,
        radii=radii,
        nose=np.array([rng.uniform(0.8, 1.6), rng.uniform(1.2, 1.9), rng.uniform(-1.0, 0.6)]),
        eye_sep=rng.uniform(2.0, 2.9),
        eye_height=rng.uniform(1.2, 2.2),
        eye_size=rng.uniform(0.7, 1.1),
        mouth_width=rng.uniform(1.6, 2.6),
        brow_height=rng.uniform(2.6, 3.4),
        skin=skin,
        lip_color=np.clip(skin * np.array([0.95, 0.55, 0.55]) + np.array([0.1, 0, 0]), 0.05, 0.95),
        eye_color=np.array([rng.uniform(0.05, 0.25), rng.uniform(0.08, 0.3), rng.uniform(0.1, 0.4)]),
        brow_color=skin * rng.uniform(0.3, 0.55),
        spec_strength=rng.uniform(0.15, 0.4),
        spec_power=rng.uniform(16.0, 48.0),
    )


class BlobHead:
    """Analytic SDF + albedo + landmarks for one subject."""

    def __init__(self, spec: SubjectSpec):
        self.spec = spec

    # -- geometry -------------------------------------------------------------

    def _features(self, p: np.ndarray, expr: np.ndarray):
        """Signed displacement field added to the skull SDF (negative = bump)."""
        s = self.spec
        jaw, smile, brow, cheek, _, pucker = expr
        out = np.zeros(len(p))
        # nose: outward bump on the face (+z)
        c_nose = np.array([0.0, s.nose[2], s.radii[2] * 0.97])
        d2 = ((p - c_nose) ** 2).sum(axis=1)
        out -= s.nose[0] * np.exp(-d2 / s.nose[1] ** 2)
        # brow ridge, raised by the brow expression
        c_brow = np.array([0.0, s.brow_height, s.radii[2] * 0.82])
        d2 = ((p - c_brow) * np.array([0.45, 1.4, 1.0])) ** 2
        out -= (0.35 + 0.55 * brow) * np.exp(-d2.sum(axis=1) / 1.8**2)
        # cheeks
        for sx in (-1.0, 1.0):
            c = np.array([sx * s.eye_sep * 1.25, -1.4, s.radii[2] * 0.72])
            d2 = ((p - c) ** 2).sum(axis=1)
            out -= (0.3 + 0.5 * cheek + 0.25 * smile) * np.exp(-d2 / 2.1**2)
        # jaw drop: lower front region pushed down/open
        c_jaw = np.array([0.0, -s.radii[1] * 0.62, s.radii[2] * 0.55])
        d2 = ((p - c_jaw) * np.array([0.55, 0.9, 1.0])) ** 2
        out -= 1.5 * jaw * np.exp(-d2.sum(axis=1) / 2.4**2)
        # pucker: mouth region bulge
        c_mouth = self._mouth_center()
        d2 = ((p - c_mouth) ** 2).sum(axis=1)
        out -= 0.8 * pucker * np.exp(-d2 / 1.5**2)
        return out

    def _mouth_center(self) -> np.ndarray:
        s = self.spec
        return np.array([0.0, -s.radii[1] * 0.42, s.radii[2] * 0.9])

    def sdf(self, p: np.ndarray, expr: np.ndarray) -> np.ndarray:
        s = self.spec
        q = p / s.radii
        r = np.linalg.norm(q, axis=1)
        base = (r - 1.0) * s.radii.min()
        return base + self._features(p, expr)

    def normal(self, p: np.ndarray, expr: np.ndarray, h: float = 1e-3) -> np.ndarray:
        n = np.zeros_like(p)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            n[:, i] = self.sdf(p + e, expr) - self.sdf(p - e, expr)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-12)

    # -- appearance -------------------------------------------------------------

    def albedo(self, p: np.ndarray, expr: np.ndarray) -> np.ndarray:
        s = self.spec
        blink = expr[4]
        smile = expr[1]
        out = np.tile(s.skin, (len(p), 1))
        # eyes: dark discs squashed by blinking
        for sx in (-1.0, 1.0):
            c = np.array([sx * s.eye_sep, s.eye_height, s.radii[2] * 0.9])
            d = (p - c) / np.array([s.eye_size, s.eye_size * max(0.15, 1.0 - 0.85 * blink), 2.2])
            m = np.exp(-(d**2).sum(axis=1) ** 2)
            out = out * (1 - m[:, None]) + s.eye_color * m[:, None]
        # brows
        for sx in (-1.0, 1.0):
            c = np.array([sx * s.eye_sep, s.brow_height, s.radii[2] * 0.88])
            d = (p - c) / np.array([s.eye_size * 1.5, 0.45, 2.0])
            m = 0.9 * np.exp(-(d**2).sum(axis=1) ** 2)
            out = out * (1 - m[:, None]) + s.brow_color * m[:, None]
        # mouth: widened by smiling
        c = self._mouth_center()
        w = s.mouth_width * (1.0 + 0.35 * smile)
        d = (p - c) / np.array([w, 0.55 + 0.5 * expr[0], 1.8])
        m = np.exp(-(d**2).sum(axis=1) ** 2)
        out = out * (1 - m[:, None]) + s.lip_color * m[:, None]
        return out

    # -- landmarks ---------------------------------------------------------------

    def landmarks(self, expr: np.ndarray) -> np.ndarray:
        """3D landmark positions in head coordinates, (10, 3)."""
        s = self.spec
        jaw, smile = expr[0], expr[1]
        c_m = self._mouth_center()
        w = s.mouth_width * (1.0 + 0.35 * smile)
        pts = np.array([
            [0.0, s.nose[2], s.radii[2] * 0.97 + s.nose[0]],
            [0.0, -s.radii[1] * (0.98 + 0.06 * jaw), s.radii[2] * 0.25],
            [-s.eye_sep, s.eye_height, s.radii[2] * 0.9],
            [s.eye_sep, s.eye_height, s.radii[2] * 0.9],
            [c_m[0] - w, c_m[1] + 0.3 * smile, c_m[2] - 0.2],
            [c_m[0] + w, c_m[1] + 0.3 * smile, c_m[2] - 0.2],
            [0.0, s.brow_height + 1.8, s.radii[2] * 0.7],
            [-s.eye_sep * 1.25, -1.4, s.radii[2] * 0.72],
            [s.eye_sep * 1.25, -1.4, s.radii[2] * 0.72],
            [0.0, s.radii[1], 0.0],
        ])
        return pts

    # -- rendering ---------------------------------------------------------------

    def trace(self, o: np.ndarray, d: np.ndarray, expr: np.ndarray,
              t_near: float, t_far: float, iters: int = 48):
        """Sphere-trace rays given in head coordinates.

        Returns (hit mask, hit points)."""
        # bounding sphere cull
        rad = self.spec.radii.max() + 2.5
        oc = o
        b = (oc * d).sum(axis=1)
        c = (oc**2).sum(axis=1) - rad * rad
        disc = b * b - c
        hit_sphere = disc > 0
        sq = np.sqrt(np.maximum(disc, 0))
        t0 = np.maximum(-b - sq, t_near)
        t1 = np.minimum(-b + sq, t_far)
        alive = hit_sphere & (t0 < t1)
        t = t0.copy()
        converged = np.zeros(len(o), dtype=bool)
        idx = np.nonzero(alive)[0]
        t_a = t[idx]
        for _ in range(iters):
            if len(idx) == 0:
                break
            p = o[idx] + t_a[:, None] * d[idx]
            sd = self.sdf(p, expr)
            done = sd < 1e-3
            converged[idx[done]] = True
            t[idx[done]] = t_a[done]
            step = np.maximum(sd, 1e-3) * 0.8
            t_a = t_a + step
            out = t_a > t1[idx]
            keep = ~done & ~out
            idx = idx[keep]
            t_a = t_a[keep]
        points = o + t[:, None] * d
        return converged, points

    def shade(self, points: np.ndarray, view: np.ndarray, expr: np.ndarray,
              light: lighting.LightField) -> np.ndarray:
        """Analytic shading, exactly linear in the light intensities."""
        n = self.normal(points, expr)
        alb = self.albedo(points, expr)
        dirs = light.directions  # (L, 3), pointing toward the light
        inten = light.intensities  # (L, 3)
        d_omega = 4 * np.pi / light.n
        ndl = np.maximum(n @ dirs.T, 0.0)  # (N, L)
        diffuse = (ndl @ inten) * (d_omega / np.pi) * alb
        # Blinn lobe with Schlick weight on the view angle
        h = dirs[None, :, :] + view[:, None, :]
        h /= np.maximum(np.linalg.norm(h, axis=2, keepdims=True), 1e-9)
        ndh = np.maximum(np.einsum("nj,nlj->nl", n, h), 0.0)
        s = self.spec
        f = 0.04 + 0.96 * (1.0 - np.maximum((n * view).sum(axis=1), 0.0)) ** 5
        spec = (ndh**s.spec_power @ inten) * (d_omega * s.spec_strength * f[:, None])
        return diffuse + spec


def render_view(head: BlobHead, expr: np.ndarray, pose: geo.RigidPose,
                camera: geo.Camera, light: lighting.LightField,
                background: np.ndarray, supersample: int = 2) -> np.ndarray:
    """Render one camera view, composited over the background (linear)."""
    ss = supersample
    W, H = camera.width * ss, camera.height * ss
    xs = (np.arange(W) + 0.5) / ss
    ys = (np.arange(H) + 0.5) / ss
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
    o, d, tn, tf = geo.generate_rays(camera, pixels)
    inv = pose.inverse()
    o_h = inv.apply(o)
    d_h = geo.quat_rotate(inv.rotation, d)
    hit, points = head.trace(o_h, d_h, expr, tn, tf)
    rgb = np.zeros((len(o), 3))
    if hit.any():
        view = -d_h[hit]
        rgb[hit] = head.shade(points[hit], view, expr, light)
    bg_big = np.repeat(np.repeat(background, ss, axis=0), ss, axis=1).reshape(-1, 3)
    out = np.where(hit[:, None], rgb, bg_big)
    out = out.reshape(H, W, 3)
    if ss > 1:
        out = out.reshape(camera.height, ss, camera.width, ss, 3).mean(axis=(1, 3))
    return out.astype(np.float32)


# -- rigs, trajectories, dataset ---------------------------------------------------


def desk_rig(n_ring: int = 8, resolution: int = 128, radius: float = 38.0,
             focal_factor: float = 2.0) -> list[geo.Camera]:
    """n_ring cameras on a ring plus one overhead camera."""
    cams = []
    for i in range(n_ring):
        az = 2 * np.pi * i / n_ring
        pos = [radius * np.sin(az), 2.0, radius * np.cos(az)]
        cams.append(geo.look_at_camera(pos, [0, 0, 0], resolution, resolution,
                                       focal=resolution * focal_factor,
                                       near=radius - 20, far=radius + 20,
                                       name=f"cam{i:02d}"))
    cams.append(geo.look_at_camera([0.0, radius * 0.9, 6.0], [0, 0, 0],
                                   resolution, resolution, focal=resolution * focal_factor,
                                   near=radius - 22, far=radius + 20, name="cam_top"))
    return cams


INPUT_VIEWS = ("cam00", "cam01", "cam07")  # frontal, left, right of the ring


def make_background(seed: int, width: int, height: int) -> np.ndarray:
    """Dim smooth procedural backdrop."""
    rng = np.random.default_rng((77, seed))
    y = np.linspace(0, 1, height)[:, None, None]
    top = rng.uniform(0.02, 0.12, 3)
    bot = rng.uniform(0.05, 0.22, 3)
    img = top + (bot - top) * y
    for _ in range(3):
        c = rng.uniform(0, 1, 2)
        col = rng.uniform(0.0, 0.15, 3)
        gx, gy = np.meshgrid(np.linspace(0, 1, width), np.linspace(0, 1, height))
        blob = np.exp(-(((gx - c[0]) / 0.3) ** 2 + ((gy - c[1]) / 0.3) ** 2))
        img = img + blob[:, :, None] * col
    return np.clip(img, 0, 0.35).astype(np.float32)


def smooth_trajectory(rng: np.random.Generator, n_frames: int, dims: int,
                      scale: float = 1.0, smoothness: int = 9) -> np.ndarray:
    raw = rng.standard_normal((n_frames + 2 * smoothness, dims))
    kernel = np.hanning(2 * smoothness + 1)
    kernel /= kernel.sum()
    sm = np.stack([np.convolve(raw[:, k], kernel, mode="same") for k in range(dims)], axis=1)
    sm = sm[smoothness:smoothness + n_frames]
    sm = sm / max(np.abs(sm).max(), 1e-9)
    return np.clip(sm * scale, -1, 1)


def pose_trajectory(rng: np.random.Generator, n_frames: int,
                    max_angle_deg: float = 9.0, max_shift: float = 1.0):
    ang = smooth_trajectory(rng, n_frames, 3, scale=np.deg2rad(max_angle_deg))
    shift = smooth_trajectory(rng, n_frames, 3, scale=max_shift)
    poses = []
    for m in range(n_frames):
        a = ang[m]
        angle = np.linalg.norm(a)
        axis = a / angle if angle > 1e-9 else np.array([1.0, 0, 0])
        poses.append(geo.RigidPose(geo.quat_from_axis_angle(axis, angle), shift[m]))
    return poses


@dataclass
class FrameRecord:
    subject: int
    index: int
    light: lighting.LightField
    pose: geo.RigidPose
    expression: np.ndarray
    landmarks3d: np.ndarray
    images: dict[str, str]  # camera name -> relative path
    hashes: dict[str, str]


class DatasetManifest:
    """Loaded dataset index; image payloads stay on disk until asked for."""

    def __init__(self, root: Path, doc: dict):
        self.root = Path(root)
        self.doc = doc
        self.cameras = geo.load_rig(self.root / doc["rig"])
        self.camera_by_name = {c.name: c for c in self.cameras}
        self.directions = np.asarray(doc["light_directions"])
        self.subjects = doc["subjects"]
        self.frames: list[FrameRecord] = []
        for fr in doc["frames"]:
            self.frames.append(FrameRecord(
                subject=fr["subject"],
                index=fr["index"],
                light=lighting.LightField(self.directions, np.asarray(fr["light"])),
                pose=geo.RigidPose(np.asarray(fr["pose_q"]), np.asarray(fr["pose_t"])),
                expression=np.asarray(fr["expression"]),
                landmarks3d=np.asarray(fr["landmarks3d"]),
                images=fr["images"],
                hashes=fr["hashes"],
            ))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def frames_of(self, subject: int) -> list[FrameRecord]:
        return [f for f in self.frames if f.subject == subject]

    def background(self, cam_name: str) -> np.ndarray:
        return imgio.load_pfm(self.root / self.doc["backgrounds"][cam_name])

    def load_image(self, frame: FrameRecord, cam_name: str, verify: bool = True) -> np.ndarray:
        rel = frame.images[cam_name]
        path = self.root / rel
        blob = path.read_bytes()
        if verify:
            digest = hashlib.sha256(blob).hexdigest()
            if digest != frame.hashes[cam_name]:
                raise IOError(f"{rel}: payload hash mismatch (corrupt or modified)")
        return _pfm_from_bytes(blob, path)

    def subject_spec(self, subject: int) -> SubjectSpec:
        seed = next(s["seed"] for s in self.subjects if s["id"] == subject)
        return generate_subject(seed)


def _pfm_from_bytes(blob: bytes, path) -> np.ndarray:
    nl1 = blob.index(b"\n")
    nl2 = blob.index(b"\n", nl1 + 1)
    nl3 = blob.index(b"\n", nl2 + 1)
    header = blob[:nl1].strip()
    w, h = (int(x) for x in blob[nl1 + 1 : nl2].split())
    scale = float(blob[nl2 + 1 : nl3])
    channels = 3 if header == b"PF" else 1
    count = w * h * channels
    payload = blob[nl3 + 1 :]
    if len(payload) < count * 4:
        raise IOError(f"{path}: PFM payload truncated")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[: count * 4], dtype=dtype).reshape(h, w, channels)
    data = np.flipud(data).astype(np.float32)
    return data[:, :, 0] if channels == 1 else data


def _render_frame_task(args):
    (seed, expr, pose_q, pose_t, intens, directions, rig_path, bg_dir,
     out_dir, frame_idx, subject_id, write_png) = args
    head = BlobHead(generate_subject(seed))
    cams = geo.load_rig(rig_path)
    light = lighting.LightField(directions, intens)
    pose = geo.RigidPose(pose_q, pose_t)
    images = {}
    hashes = {}
    for cam in cams:
        bg = imgio.load_pfm(Path(bg_dir) / f"{cam.name}.pfm")
        img = render_view(head, expr, pose, cam, light, bg)
        rel = f"subjects/s{subject_id:02d}/frames/f{frame_idx:03d}/{cam.name}.pfm"
        path = Path(out_dir) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        imgio.save_pfm(path, img)
        if write_png:
            imgio.save_png(str(path)[:-4] + ".png", img)
        images[cam.name] = rel
        hashes[cam.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return frame_idx, subject_id, images, hashes


def generate_dataset(
    out_dir,
    n_subjects: int = 8,
    n_frames: int = 64,
    resolution: int = 128,
    n_l: int = 64,
    seed: int = 0,
    light_config: lighting.GroupLightConfig | None = None,
    workers: int = 1,
    write_png: bool = False,
) -> "DatasetManifest":
    """Render the full synthetic capture to ``out_dir`` and write its manifest."""
    out = Path(out_dir)
    (out / "backgrounds").mkdir(parents=True, exist_ok=True)
    rig = desk_rig(resolution=resolution)
    geo.save_rig(out / "cameras.json", rig)
    directions = lighting.sample_sphere(n_l)
    cfg = light_config or lighting.GroupLightConfig()
    backgrounds = {}
    for cam in rig:
        bg = make_background(hash(cam.name) % 1000, cam.width, cam.height)
        imgio.save_pfm(out / "backgrounds" / f"{cam.name}.pfm", bg)
        backgrounds[cam.name] = f"backgrounds/{cam.name}.pfm"

    frames_doc = []
    tasks = []
    meta_rows = []
    for sid in range(n_subjects):
        srng = np.random.default_rng((seed, sid, 5))
        spec = generate_subject(seed * 1000 + sid)
        head = BlobHead(spec)
        exprs = smooth_trajectory(srng, n_frames, EXPR_DIMS, scale=0.9)
        poses = pose_trajectory(srng, n_frames)
        for m in range(n_frames):
            light = lighting.group_light_pattern(m, seed * 97 + sid, directions, cfg)
            tasks.append((
                spec.seed, exprs[m], poses[m].rotation, poses[m].translation,
                light.intensities, directions, str(out / "cameras.json"),
                str(out / "backgrounds"), str(out), m, sid, write_png,
            ))
            meta_rows.append((sid, m, light, poses[m], exprs[m], head.landmarks(exprs[m])))

    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for frame_idx, subject_id, images, hashes in pool.map(_render_frame_task, tasks, chunksize=4):
                results[(subject_id, frame_idx)] = (images, hashes)
    else:
        for task in tasks:
            frame_idx, subject_id, images, hashes = _render_frame_task(task)
            results[(subject_id, frame_idx)] = (images, hashes)

    for sid, m, light, pose, expr, lm in meta_rows:
        images, hashes = results[(sid, m)]
        frames_doc.append({
            "subject": sid,
            "index": m,
            "light": light.intensities.tolist(),
            "pose_q": pose.rotation.tolist(),
            "pose_t": pose.translation.tolist(),
            "expression": expr.tolist(),
            "landmarks3d": lm.tolist(),
            "images": images,
            "hashes": hashes,
        })

    doc = {
        "version": FORMAT_VERSION,
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "rig": "cameras.json",
        "input_views": list(INPUT_VIEWS),
        "light_directions": directions.tolist(),
        "backgrounds": backgrounds,
        "subjects": [{"id": sid, "seed": seed * 1000 + sid, "n_frames": n_frames}
                     for sid in range(n_subjects)],
        "frames": frames_doc,
    }
    (out / "manifest.json").write_text(json.dumps(doc))
    return DatasetManifest(out, doc)


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("version") != FORMAT_VERSION:
        raise IOError(f"unsupported dataset version {doc.get('version')!r}")
    return DatasetManifest(root, doc)
