"""Incoming-light-field representation and capture light patterns.

A light field is a set of N_l fixed unit directions on the sphere with
non-negative RGB intensity per direction. Directions come from a
deterministic Fibonacci spiral and are frozen for a model's lifetime
(they live in the checkpoint).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import imgio

log = logging.getLogger(__name__)


def sample_sphere(n: int) -> np.ndarray:
    """Deterministic quasi-uniform unit directions (Fibonacci spiral), (n, 3)."""
    if n < 4:
        raise ValueError("need at least 4 directions")
    i = np.arange(n, dtype=np.float64)
    golden = (1 + 5**0.5) / 2
    phi = 2 * np.pi * i / golden
    cos_t = 1 - 2 * (i + 0.5) / n
    sin_t = np.sqrt(np.maximum(0.0, 1 - cos_t**2))
    dirs = np.stack([sin_t * np.cos(phi), cos_t, sin_t * np.sin(phi)], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass
class LightField:
    """Directional RGB radiance over the shared sphere sampling."""

    directions: np.ndarray  # (N_l, 3) unit
    intensities: np.ndarray  # (N_l, 3) >= 0
    solid_angles: np.ndarray | None = None  # (N_l,), defaults to 4*pi/N_l

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.shape != (len(self.directions), 3):
            raise ValueError(
                f"intensities must be (N_l, 3); got {self.intensities.shape} for "
                f"{len(self.directions)} directions"
            )
        if np.any(self.intensities < 0):
            raise ValueError("light intensities must be non-negative")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.abs(norms - 1).max() > 1e-6:
            raise ValueError("directions must be unit-norm")
        if self.solid_angles is None:
            self.solid_angles = np.full(len(self.directions), 4 * np.pi / len(self.directions))

    @property
    def n(self) -> int:
        return len(self.directions)

    def scaled(self, factor: float) -> "LightField":
        if factor < 0:
            raise ValueError("scaling must be non-negative to stay a light field")
        return LightField(self.directions, self.intensities * factor, self.solid_angles)

    def __add__(self, other: "LightField") -> "LightField":
        if other.n != self.n or not np.allclose(other.directions, self.directions):
            raise ValueError("light fields must share the same direction set")
        return LightField(self.directions, self.intensities + other.intensities, self.solid_angles)

    @classmethod
    def full_on(cls, directions: np.ndarray, intensity: float = 1.0) -> "LightField":
        n = len(directions)
        return cls(directions, np.full((n, 3), intensity))

    @classmethod
    def zero(cls, directions: np.ndarray) -> "LightField":
        return cls(directions, np.zeros((len(directions), 3)))

    def to_json(self) -> dict:
        return {
            "version": 1,
            "directions": self.directions.tolist(),
            "intensities": self.intensities.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LightField":
        return cls(np.asarray(doc["directions"]), np.asarray(doc["intensities"]))


def from_envmap(image: np.ndarray, directions: np.ndarray) -> LightField:
    """Bin a lat-long radiance map into per-direction mean radiance.

    Each texel's energy (radiance x solid angle) is assigned to its
    nearest direction; a direction's intensity is that energy divided by
    the collected solid angle, so a constant map yields exactly constant
    intensities and total energy is preserved. Directions whose bin is
    empty fall back to a bilinear point lookup.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 radiance map, got {img.shape}")
    neg = int((img < 0).sum())
    if neg:
        log.warning("from_envmap: clamped %d negative map values to 0", neg)
        img = np.maximum(img, 0.0)
    H, W = img.shape[:2]
    # texel centers in (longitude, latitude); rows top-down = latitude pi..0
    theta = (np.arange(H) + 0.5) / H * np.pi  # polar angle from +y
    phi = (np.arange(W) + 0.5) / W * 2 * np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs_tex = np.stack(
        [np.sin(tt) * np.cos(pp), np.cos(tt), np.sin(tt) * np.sin(pp)], axis=-1
    )  # (H, W, 3)
    d_omega = (np.pi / H) * (2 * np.pi / W) * np.sin(tt)  # (H, W)
    sim = dirs_tex.reshape(-1, 3) @ directions.T  # (H*W, N)
    nearest = np.argmax(sim, axis=1)
    n = len(directions)
    energy = np.zeros((n, 3))
    area = np.zeros(n)
    flat_rad = img.reshape(-1, 3)
    flat_om = d_omega.ravel()
    np.add.at(energy, nearest, flat_rad * flat_om[:, None])
    np.add.at(area, nearest, flat_om)
    intens = np.zeros((n, 3))
    filled = area > 0
    intens[filled] = energy[filled] / area[filled][:, None]
    if not filled.all():
        for j in np.nonzero(~filled)[0]:
            intens[j] = _bilinear_latlong(img, directions[j])
        area[~filled] = 4 * np.pi / n
    return LightField(directions, intens, solid_angles=area)


def _bilinear_latlong(img: np.ndarray, d: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    theta = np.arccos(np.clip(d[1], -1, 1))
    phi = np.arctan2(d[2], d[0]) % (2 * np.pi)
    r = theta / np.pi * H - 0.5
    c = phi / (2 * np.pi) * W - 0.5
    r0 = int(np.floor(r))
    c0 = int(np.floor(c))
    fr, fc = r - r0, c - c0
    out = np.zeros(3)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr = min(max(r0 + dr, 0), H - 1)
            cc = (c0 + dc) % W
            out += wr * wc * img[rr, cc]
    return out


def load_envmap(path, directions: np.ndarray) -> LightField:
    return from_envmap(imgio.load_pfm(path), directions)


@dataclass
class GroupLightConfig:
    """Synthetic capture illumination schedule."""

    n_groups: int = 8
    ambient: float = 0.1
    full_intensity: float = 1.0
    full_on_period: int = 4  # every 4th frame is full-on


def group_light_pattern(
    frame_index: int, seed: int, directions: np.ndarray, config: GroupLightConfig | None = None
) -> LightField:
    """Group pattern: one random direction group lit plus uniform ambient.

    Frames with index ≡ period-1 (mod period) are full-on.
    """
    cfg = config or GroupLightConfig()
    n = len(directions)
    if frame_index % cfg.full_on_period == cfg.full_on_period - 1:
        return LightField.full_on(directions, cfg.full_intensity)
    intens = np.full((n, 3), cfg.ambient * cfg.full_intensity)
    if cfg.n_groups > 0:
        group_size = max(1, n // cfg.n_groups)
        rng = np.random.default_rng((seed, frame_index))
        g = int(rng.integers(cfg.n_groups))
        lo = g * group_size
        hi = n if g == cfg.n_groups - 1 else min(n, lo + group_size)
        intens[lo:hi] = cfg.full_intensity
    return LightField(directions, intens)


def group_indices(frame_index: int, seed: int, n: int, cfg: GroupLightConfig) -> np.ndarray | None:
    """Which directions the group pattern lights fully; None for full-on frames."""
    if frame_index % cfg.full_on_period == cfg.full_on_period - 1:
        return None
    group_size = max(1, n // cfg.n_groups)
    rng = np.random.default_rng((seed, frame_index))
    g = int(rng.integers(cfg.n_groups))
    lo = g * group_size
    hi = n if g == cfg.n_groups - 1 else min(n, lo + group_size)
    return np.arange(lo, hi)
