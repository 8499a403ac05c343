"""Base mesh, primitive rest frames, rigid poses, cameras and rays.

Units are centimeters; the default head proxy fits a 30 cm box centered
on the origin. Rotations are unit quaternions (w, x, y, z). The
differentiable paths through this module (rest-frame computation,
projection) operate on rotation matrices built from quaternions with
autodiff ops; the plain-numpy helpers mirror them for data generation
and I/O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

# -- quaternions (plain numpy; batched over leading axes) --------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) to rotation matrix/matrices, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 convention), batched."""
    m = np.asarray(m)
    batch = m.shape[:-2]
    mm = m.reshape(-1, 3, 3)
    out = np.empty((mm.shape[0], 4), dtype=m.dtype)
    for i, r in enumerate(mm):
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            out[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] >= r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            out[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            out[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    out[out[:, 0] < 0] *= -1
    return quat_normalize(out).reshape(batch + (4,))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_mat(q), v)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


# -- quaternion/rotation helpers on autodiff tensors --------------------------------


def quat_normalize_t(q: ad.Tensor) -> ad.Tensor:
    norm = ad.sqrt(ad.sum_(ad.mul(q, q), axis=-1, keepdims=True))
    return ad.div(q, norm)


def quat_to_mat_t(q: ad.Tensor) -> ad.Tensor:
    """(..., 4) unit quaternions -> (..., 3, 3) matrices, autodiff."""
    w = q[..., 0:1]
    x = q[..., 1:2]
    y = q[..., 2:3]
    z = q[..., 3:4]
    two = 2.0
    one = ad.tensor(np.ones(w.shape, dtype=q.dtype))
    r00 = one - (y * y + z * z) * two
    r01 = (x * y - w * z) * two
    r02 = (x * z + w * y) * two
    r10 = (x * y + w * z) * two
    r11 = one - (x * x + z * z) * two
    r12 = (y * z - w * x) * two
    r20 = (x * z - w * y) * two
    r21 = (y * z + w * x) * two
    r22 = one - (x * x + y * y) * two
    rows = ad.concat([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=-1)
    return ad.reshape(rows, q.shape[:-1] + (3, 3))


def cross_t(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def normalize_t(v: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    n = ad.sqrt(ad.sum_(ad.mul(v, v), axis=-1, keepdims=True) + eps)
    return ad.div(v, n)


# -- core types ----------------------------------------------------------------------


@dataclass
class BaseMesh:
    """Fixed-topology triangle mesh with a bijective UV chart."""

    vertices: np.ndarray  # (N_v, 3)
    faces: np.ndarray  # (N_f, 3) int
    uv: np.ndarray  # (N_v, 2) in [0, 1]^2

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.uv.min() < -1e-9 or self.uv.max() > 1 + 1e-9:
            raise ValueError("mesh UVs must lie in [0,1]^2")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass
class PrimitiveFrame:
    """Rigid frame plus per-axis half-extent of one volumetric primitive."""

    rotation: np.ndarray  # (4,) unit quaternion
    translation: np.ndarray  # (3,)
    scale: np.ndarray  # (3,) strictly positive half-extents
    active: bool = True

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("frame quaternion must be unit-norm")
        if self.active and np.any(self.scale <= 0):
            raise ValueError("frame scale must be strictly positive")


@dataclass
class RigidPose:
    rotation: np.ndarray  # (4,) unit quaternion
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("pose quaternion must be unit-norm")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_mul(self.rotation, other.rotation))
        t = quat_rotate(self.rotation, other.translation) + self.translation
        return RigidPose(q, t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation

    def inverse(self) -> "RigidPose":
        qc = quat_conj(self.rotation)
        return RigidPose(qc, -quat_rotate(qc, self.translation))


@dataclass
class Camera:
    """Pinhole camera; extrinsics map world to camera coordinates (+z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidPose  # world-to-camera
    near: float = 15.0
    far: float = 60.0
    name: str = "cam"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie within the image bounds")
        if self.near >= self.far:
            raise ValueError("near must be < far")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.pose.inverse().translation

    def view_direction(self) -> np.ndarray:
        """Unit optical-axis direction in world coordinates."""
        return quat_rotate(quat_conj(self.pose.rotation), np.array([0.0, 0.0, 1.0]))


# -- primitive attachment --------------------------------------------------------------


@dataclass
class UVAttachment:
    """Precomputed linear maps from vertices to per-cell surface quantities.

    ``centers @ v`` gives cell-center positions, ``tan_u @ v`` /
    ``tan_v @ v`` the UV-tangent directions (all linear in the vertex
    array, so rest frames stay differentiable w.r.t. decoded vertices).
    """

    grid: int
    centers: np.ndarray  # (G*G, N_v)
    tan_u: np.ndarray  # (G*G, N_v)
    tan_v: np.ndarray  # (G*G, N_v)
    active: np.ndarray  # (G*G,) bool
    overlap: float = 1.5


def build_uv_attachment(mesh: BaseMesh, grid: int, overlap: float = 1.5) -> UVAttachment:
    """Locate each UV-cell center in the mesh's UV triangulation."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    G = grid
    ij = (np.arange(G) + 0.5) / G
    cu, cv = np.meshgrid(ij, ij, indexing="xy")
    centers_uv = np.stack([cu.ravel(), cv.ravel()], axis=1)  # (G*G, 2)

    tri_uv = mesh.uv[mesh.faces]  # (F, 3, 2)
    a, b, c = tri_uv[:, 0], tri_uv[:, 1], tri_uv[:, 2]
    # barycentric coordinates of every center in every triangle
    v0 = b - a
    v1 = c - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]  # (F,)
    ok = np.abs(den) > 1e-14
    den = np.where(ok, den, 1.0)
    p = centers_uv[:, None, :] - a[None, :, :]  # (P, F, 2)
    l1 = (p[..., 0] * v1[None, :, 1] - p[..., 1] * v1[None, :, 0]) / den[None, :]
    l2 = (v0[None, :, 0] * p[..., 1] - v0[None, :, 1] * p[..., 0]) / den[None, :]
    l0 = 1.0 - l1 - l2
    eps = -1e-9
    inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps) & ok[None, :]

    P = len(centers_uv)
    n_v = mesh.n_vertices
    W_pos = np.zeros((P, n_v))
    W_tu = np.zeros((P, n_v))
    W_tv = np.zeros((P, n_v))
    active = np.zeros(P, dtype=bool)
    face_idx = np.argmax(inside, axis=1)
    has = inside[np.arange(P), face_idx]
    for pidx in range(P):
        if not has[pidx]:
            continue
        f = face_idx[pidx]
        ia, ib, ic = mesh.faces[f]
        bary = np.array([l0[pidx, f], l1[pidx, f], l2[pidx, f]])
        W_pos[pidx, [ia, ib, ic]] += bary
        # barycentric gradients w.r.t. (u, v) are constant per UV triangle;
        # tangents = d(pos)/du, d(pos)/dv
        d = den[f]
        dl1 = np.array([v1[f, 1], -v1[f, 0]]) / d
        dl2 = np.array([-v0[f, 1], v0[f, 0]]) / d
        dl0 = -dl1 - dl2
        W_tu[pidx, [ia, ib, ic]] += [dl0[0], dl1[0], dl2[0]]
        W_tv[pidx, [ia, ib, ic]] += [dl0[1], dl1[1], dl2[1]]
        active[pidx] = True
    return UVAttachment(G, W_pos, W_tu, W_tv, active, overlap)


def rest_frames_np(attach: UVAttachment, vertices: np.ndarray):
    """Rest rotations/centers/half-extents as plain arrays.

    Returns (R (P,3,3), t (P,3), s (P,3), active (P,)).
    """
    t = attach.centers @ vertices
    tu = attach.tan_u @ vertices
    tv = attach.tan_v @ vertices
    e1 = tu / np.maximum(np.linalg.norm(tu, axis=1, keepdims=True), 1e-12)
    nrm = np.cross(tu, tv)
    n = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    e2 = np.cross(n, e1)
    R = np.stack([e1, e2, n], axis=2)
    G = attach.grid
    half_u = attach.overlap * np.linalg.norm(tu, axis=1) / (2 * G)
    half_v = attach.overlap * np.linalg.norm(tv, axis=1) / (2 * G)
    half_n = 0.5 * (half_u + half_v)
    s = np.stack([half_u, half_v, half_n], axis=1)
    s[~attach.active] = 1e-3
    return R, t, s, attach.active.copy()


def rest_frames_t(attach: UVAttachment, vertices: ad.Tensor):
    """Differentiable rest frames: (R (P,3,3), t (P,3), s (P,3)) tensors."""
    dt = vertices.dtype
    Wp = ad.tensor(attach.centers.astype(dt))
    Wu = ad.tensor(attach.tan_u.astype(dt))
    Wv = ad.tensor(attach.tan_v.astype(dt))
    t = ad.matmul(Wp, vertices)
    tu = ad.matmul(Wu, vertices)
    tv = ad.matmul(Wv, vertices)
    e1 = normalize_t(tu)
    n = normalize_t(cross_t(tu, tv))
    e2 = cross_t(n, e1)
    R = ad.stack([e1, e2, n], axis=2)
    G = attach.grid
    k = attach.overlap / (2 * G)
    norm_u = ad.sqrt(ad.sum_(ad.mul(tu, tu), axis=1, keepdims=True) + 1e-12)
    norm_v = ad.sqrt(ad.sum_(ad.mul(tv, tv), axis=1, keepdims=True) + 1e-12)
    half_u = norm_u * k
    half_v = norm_v * k
    half_n = (half_u + half_v) * 0.5
    s = ad.concat([half_u, half_v, half_n], axis=1)
    return R, t, s


def attach_primitives(mesh: BaseMesh, grid: int, overlap: float = 1.5) -> list[PrimitiveFrame]:
    """One rest frame per UV cell (row-major over the grid)."""
    attach = build_uv_attachment(mesh, grid, overlap)
    R, t, s, active = rest_frames_np(attach, mesh.vertices)
    quats = mat_to_quat(R)
    frames = []
    for p in range(grid * grid):
        if active[p]:
            frames.append(PrimitiveFrame(quats[p], t[p], s[p], active=True))
        else:
            frames.append(
                PrimitiveFrame(np.array([1.0, 0, 0, 0]), np.zeros(3), np.full(3, 1e-3), active=False)
            )
    return frames


def compose_world_frame(frame: PrimitiveFrame, pose: RigidPose) -> PrimitiveFrame:
    """World-space oriented box: pose applied to the frame."""
    q = quat_normalize(quat_mul(pose.rotation, frame.rotation))
    t = quat_rotate(pose.rotation, frame.translation) + pose.translation
    return PrimitiveFrame(q, t, frame.scale.copy(), active=frame.active)


# -- rays & projection ------------------------------------------------------------------


def generate_rays(camera: Camera, pixels: np.ndarray):
    """Rays through the given continuous pixel coordinates.

    ``pixels`` is (N, 2) of (x, y). Returns (origins (N,3), unit dirs
    (N,3), t_near, t_far).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be (N, 2)")
    if (
        pixels[:, 0].min() < 0
        or pixels[:, 0].max() > camera.width
        or pixels[:, 1].min() < 0
        or pixels[:, 1].max() > camera.height
    ):
        raise ValueError("pixel coordinates outside image extents")
    x = (pixels[:, 0] - camera.cx) / camera.fx
    y = (pixels[:, 1] - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    R_c2w = quat_to_mat(quat_conj(camera.pose.rotation))
    dirs = d_cam @ R_c2w.T
    origin = camera.center
    origins = np.broadcast_to(origin, dirs.shape).copy()
    return origins, dirs, camera.near, camera.far


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Centers of every pixel, row-major: (H*W, 2) of (x+0.5, y+0.5)."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def project(points: np.ndarray, camera: Camera):
    """Pinhole projection. Returns (pixels (N,2), valid (N,) bool)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = camera.pose.apply(points)
    z = pc[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    u = camera.fx * pc[:, 0] / zs + camera.cx
    v = camera.fy * pc[:, 1] / zs + camera.cy
    return np.stack([u, v], axis=1), valid


def project_t(points: ad.Tensor, quat: ad.Tensor, trans: ad.Tensor, intr: ad.Tensor) -> ad.Tensor:
    """Differentiable projection for pose/intrinsics optimization.

    ``points`` (N,3) world, ``quat`` (4,) world-to-camera rotation,
    ``trans`` (3,), ``intr`` = (fx, fy, cx, cy). Returns (N,2) pixels.
    Caller masks out points behind the camera.
    """
    R = quat_to_mat_t(quat_normalize_t(quat))
    pc = ad.add(ad.matmul(points, ad.transpose(R, (1, 0))), ad.reshape(trans, (1, 3)))
    z = pc[:, 2:3]
    u = ad.add(ad.div(ad.mul(pc[:, 0:1], intr[0:1]), z), intr[2:3])
    v = ad.add(ad.div(ad.mul(pc[:, 1:2], intr[1:2]), z), intr[3:4])
    return ad.concat([u, v], axis=1)


def rays_t(quat_c2w: ad.Tensor, center: ad.Tensor, intr: ad.Tensor, pixels: np.ndarray):
    """Differentiable ray generation from camera parameters.

    Returns (origins (N,3), unit dirs (N,3)) as tensors; ``pixels`` is a
    fixed (N,2) float array.
    """
    px = ad.tensor(pixels[:, 0:1].astype(np.float64 if quat_c2w.dtype == np.float64 else np.float32))
    py = ad.tensor(pixels[:, 1:2].astype(px.dtype))
    x = ad.div(ad.sub(px, intr[2:3]), intr[0:1])
    y = ad.div(ad.sub(py, intr[3:4]), intr[1:2])
    ones = ad.tensor(np.ones_like(px.data))
    d_cam = ad.concat([x, y, ones], axis=1)
    d_cam = normalize_t(d_cam)
    R = quat_to_mat_t(quat_normalize_t(quat_c2w))
    dirs = ad.matmul(d_cam, ad.transpose(R, (1, 0)))
    origins = ad.add(ad.tensor(np.zeros((len(pixels), 3), dtype=px.dtype)), ad.reshape(center, (1, 3)))
    return origins, dirs


# -- OBJ + rig I/O -----------------------------------------------------------------------


def save_obj(path, mesh: BaseMesh) -> None:
    lines = ["# voxelhead base mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for uv in mesh.uv:
        lines.append(f"vt {uv[0]:.8f} {uv[1]:.8f}")
    for f in mesh.faces:
        lines.append(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> BaseMesh:
    verts, uvs, faces = [], [], []
    uv_of_vertex: dict[int, int] = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            idx = []
            for token in parts[1:4]:
                sub = token.split("/")
                vi = int(sub[0]) - 1
                ti = int(sub[1]) - 1 if len(sub) > 1 and sub[1] else vi
                uv_of_vertex.setdefault(vi, ti)
                idx.append(vi)
            faces.append(idx)
    verts = np.asarray(verts)
    uvs = np.asarray(uvs) if uvs else np.zeros((len(verts), 2))
    uv_per_vertex = np.zeros((len(verts), 2))
    for vi in range(len(verts)):
        uv_per_vertex[vi] = uvs[uv_of_vertex.get(vi, min(vi, len(uvs) - 1))]
    return BaseMesh(verts, np.asarray(faces), uv_per_vertex)


def build_head_proxy(rows: int = 27, cols: int = 38, radii=(8.0, 10.0, 8.5)) -> BaseMesh:
    """Sphere-like head proxy with a bijective UV grid chart (rows*cols verts).

    Polar caps are trimmed so every UV cell has well-defined tangents.
    """
    a, b, c = radii
    theta = np.linspace(0.35, np.pi - 0.35, rows)  # v axis
    phi = np.linspace(0.0, 2 * np.pi, cols)  # u axis (seam duplicated)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    x = a * np.sin(tt) * np.cos(pp)
    y = b * np.cos(tt)
    z = c * np.sin(tt) * np.sin(pp)
    # flatten the face region slightly (positive z is the face)
    z = np.where(z > 0, z * 0.92, z)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    u = np.tile((np.arange(cols) / (cols - 1)), rows)
    v = np.repeat(np.arange(rows) / (rows - 1), cols)
    uv = np.stack([u, v], axis=1)
    faces = []
    for r in range(rows - 1):
        for q in range(cols - 1):
            i0 = r * cols + q
            i1 = i0 + 1
            i2 = i0 + cols
            i3 = i2 + 1
            faces.append([i0, i2, i1])
            faces.append([i1, i2, i3])
    return BaseMesh(verts, np.asarray(faces), uv)


_DEFAULT_MESH_PATH = Path(__file__).parent / "assets" / "head_base.obj"


def default_mesh() -> BaseMesh:
    return load_obj(_DEFAULT_MESH_PATH)


RIG_SCHEMA_VERSION = 1


def save_rig(path, cameras: list[Camera]) -> None:
    doc = {
        "version": RIG_SCHEMA_VERSION,
        "cameras": [
            {
                "name": c.name,
                "width": c.width,
                "height": c.height,
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "rotation": list(map(float, c.pose.rotation)),
                "translation": list(map(float, c.pose.translation)),
                "near": c.near,
                "far": c.far,
            }
            for c in cameras
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_rig(path) -> list[Camera]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != RIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported rig schema version: {doc.get('version')!r}")
    cams = []
    for c in doc["cameras"]:
        cams.append(
            Camera(
                fx=c["fx"],
                fy=c["fy"],
                cx=c["cx"],
                cy=c["cy"],
                width=c["width"],
                height=c["height"],
                pose=RigidPose(np.array(c["rotation"]), np.array(c["translation"])),
                near=c["near"],
                far=c["far"],
                name=c["name"],
            )
        )
    return cams


def look_at_camera(
    position,
    target,
    width: int,
    height: int,
    focal: float,
    near: float = 15.0,
    far: float = 60.0,
    name: str = "cam",
    up=(0.0, 1.0, 0.0),
) -> Camera:
    """Camera at ``position`` looking at ``target`` (+z toward the target)."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_w2c = np.stack([right, down, fwd], axis=0)
    t = -R_w2c @ position
    return Camera(
        fx=focal,
        fy=focal,
        cx=width / 2,
        cy=height / 2,
        width=width,
        height=height,
        pose=RigidPose(mat_to_quat(R_w2c), t),
        near=near,
        far=far,
        name=name,
    )
