"""Ray-cast synthetic RGB-D scenes and the two sparsification protocols
(uniform random pixels, LiDAR-like scan lines)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import RgbdSample


@dataclass(frozen=True)
class Plane:
    """Points p with normal . p == offset (camera frame, z forward, y down)."""

    normal: tuple
    offset: float
    albedo: tuple = (0.7, 0.7, 0.7)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.8, 0.3, 0.3)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple = (0.3, 0.3, 0.8)


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_primitives: int = 4
    depth_range: tuple = (1.0, 10.0)
    texture: str = "shaded"  # "shaded" | "flat"
    primitives: Sequence | None = None  # explicit scene; skips random generation


def camera_rays(height: int, width: int, focal: float | None = None) -> np.ndarray:
    """Per-pixel ray directions with unit z component, shape (H, W, 3)."""
    f = float(width) if focal is None else focal
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([(cc - cx) / f, (rr - cy) / f, np.ones_like(rr, dtype=float)], axis=-1)


def _hit_plane(rays, p: Plane):
    n = np.asarray(p.normal, float)
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = p.offset / denom
    return np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)


def _hit_sphere(rays, s: Sphere):
    c = np.asarray(s.center, float)
    a = (rays * rays).sum(-1)
    b = rays @ c
    disc = b * b - a * (c @ c - s.radius ** 2)
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = (b - root) / a
    t_far = (b + root) / a
    t = np.where(t_near > 0, t_near, t_far)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _hit_box(rays, bx: Box):
    lo, hi = np.asarray(bx.lo, float), np.asarray(bx.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t1, t2 = lo * inv, hi * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


_HIT = {Plane: _hit_plane, Sphere: _hit_sphere, Box: _hit_box}


def random_primitives(spec: SceneSpec, rng: np.random.Generator) -> list:
    """A tilted background wall plus ``n_primitives`` spheres/boxes in front of it."""
    d_min, d_max = spec.depth_range
    span = d_max - d_min
    wall_z = d_min + span * rng.uniform(0.7, 0.9)
    tilt = rng.uniform(-0.25, 0.25, size=2)
    n = np.array([tilt[0], tilt[1], 1.0])
    n /= np.linalg.norm(n)
    prims: list = [Plane(tuple(n), float(n[2] * wall_z), tuple(rng.uniform(0.3, 0.9, 3)))]
    tan_half = 0.5  # focal length equals the image width
    for _ in range(spec.n_primitives):
        z = d_min + span * rng.uniform(0.05, 0.5)
        x = rng.uniform(-0.8, 0.8) * tan_half * z
        y = rng.uniform(-0.8, 0.8) * tan_half * z * spec.height / spec.width
        albedo = tuple(rng.uniform(0.15, 1.0, 3))
        size = z * rng.uniform(0.08, 0.22)
        if rng.uniform() < 0.5:
            prims.append(Sphere((x, y, z), size, albedo))
        else:
            ext = size * rng.uniform(0.6, 1.4, 3)
            c = np.array([x, y, z + ext[2]])
            prims.append(Box(tuple(c - ext), tuple(c + ext), albedo))
    return prims


def render(prims: Sequence, height: int, width: int, depth_range: tuple,
           texture: str = "shaded") -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast primitives; returns (image 3xHxW in [0,1], depth HxW metres).

    Rays that hit nothing read the far limit, so depth is positive everywhere.
    """
    d_min, d_max = depth_range
    rays = camera_rays(height, width)
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1)
    for k, p in enumerate(prims):
        t = _HIT[type(p)](rays, p)
        closer = t < depth
        depth[closer] = t[closer]
        owner[closer] = k
    depth = np.clip(np.where(np.isfinite(depth), depth, d_max), d_min, d_max)

    albedo = np.full((height, width, 3), 0.5)
    for k, p in enumerate(prims):
        albedo[owner == k] = p.albedo
    if texture == "flat":
        shade = np.ones((height, width))
    elif texture == "shaded":
        # Lambertian shading from the depth-gradient normal
        gy, gx = np.gradient(depth)
        f = float(width)
        nrm = np.stack([-gx * f / depth, -gy * f / depth, np.ones_like(depth)], axis=-1)
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
        light = np.array([-0.4, -0.5, 1.0])
        light /= np.linalg.norm(light)
        shade = 0.35 + 0.65 * np.clip(nrm @ light, 0.0, 1.0)
    else:
        raise ValueError(f"unknown texture mode {texture!r}")
    image = np.clip(albedo * shade[..., None], 0.0, 1.0).transpose(2, 0, 1)
    return image, depth


def gen_scene(spec: SceneSpec) -> RgbdSample:
    """Deterministic scene for ``spec.seed``; the sparse map starts empty."""
    rng = np.random.default_rng(spec.seed)
    if spec.primitives is not None:
        prims = list(spec.primitives)
    else:
        prims = random_primitives(spec, rng)
    if not prims:
        d_min, d_max = spec.depth_range
        prims = [Plane((0.0, 0.0, 1.0), 0.5 * (d_min + d_max))]
    image, depth = render(prims, spec.height, spec.width, spec.depth_range, spec.texture)
    return RgbdSample(image=image[None], sparse=np.zeros((1, 1) + depth.shape), gt=depth[None, None])


def sample_random_sparse(d_gt: np.ndarray, n: int, seed=None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Keep exactly ``n`` valid pixels drawn uniformly without replacement."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    flat = np.asarray(d_gt).reshape(-1)
    valid = np.flatnonzero(flat > 0)
    if n < 0 or n > valid.size:
        raise ValueError(f"cannot sample {n} points from {valid.size} valid pixels")
    keep = rng.choice(valid, size=n, replace=False)
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(np.shape(d_gt))


@dataclass
class LidarScan:
    """Sparse depth with the scan-line (elevation band) index of every point."""

    depth: np.ndarray  # H x W, 0 = no return
    band: np.ndarray = field(repr=False)  # H x W int, -1 = no return
    total_lines: int = 64

    @property
    def count(self) -> int:
        return int((self.band >= 0).sum())


def lidar_scan(d_gt: np.ndarray, total_lines: int = 64, n_azimuth: int | None = None,
               focal: float | None = None) -> LidarScan:
    """Simulate a spinning scanner at the camera centre.

    Elevation bands are spread evenly in angle over the image's vertical field
    of view (band 0 on top) and azimuth steps over the horizontal one; each
    (band, azimuth) ray is projected to its pixel and reads the dense depth.
    When two rays land on one pixel the lower band index wins.
    """
    H, W = d_gt.shape
    f = float(W) if focal is None else focal
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    n_azimuth = W if n_azimuth is None else n_azimuth
    v_half = np.arctan(cy / f)
    h_half = np.arctan(cx / f)
    elev = np.linspace(v_half, -v_half, total_lines)
    azim = np.linspace(-h_half, h_half, n_azimuth)
    depth = np.zeros((H, W))
    band = np.full((H, W), -1, dtype=np.int64)
    cols = np.rint(cx + f * np.tan(azim)).astype(int)
    for l, e in enumerate(elev):
        rows = np.rint(cy - f * np.tan(e) / np.cos(azim)).astype(int)
        ok = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
        for r, c in zip(rows[ok], cols[ok]):
            if band[r, c] < 0 and d_gt[r, c] > 0:
                band[r, c] = l
                depth[r, c] = d_gt[r, c]
    return LidarScan(depth, band, total_lines)


def subsample_lidar_lines(scan: LidarScan, lines: int, total_lines: int | None = None) -> LidarScan:
    """Keep bands whose index is a multiple of ``total_lines // lines``."""
    total = scan.total_lines if total_lines is None else total_lines
    if lines <= 0 or total % lines:
        raise ValueError(f"lines={lines} does not divide total_lines={total}")
    step = total // lines
    keep = (scan.band >= 0) & (scan.band % step == 0)
    return LidarScan(np.where(keep, scan.depth, 0.0), np.where(keep, scan.band, -1), lines)


def stack_samples(samples: Sequence[RgbdSample]) -> RgbdSample:
    return RgbdSample(image=np.concatenate([s.image for s in samples]),
                      sparse=np.concatenate([s.sparse for s in samples]),
                      gt=np.concatenate([s.gt for s in samples]))
