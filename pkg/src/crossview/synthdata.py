"""Procedural multi-view dataset and the toy latent codec.

Scenes are small clusters of axis-aligned colored boxes and spheres inside
the unit cube, rendered by an analytic ray caster with a depth test.
Shading is ambient plus a diffuse headlight at the camera center
(``albedo * (0.3 + 0.7 * max(0, n . l))`` by default), which approximates
global plus camera point lighting without shadows. Depth maps hold the
camera-frame z of the first hit and +inf on background; they are ground
truth for the reprojection metric and are never used in training.

The latent codec stands in for a VAE: a 2x2 space-to-channel rearrangement
(3 x H x W -> 12 x H/2 x W/2) followed by the fixed affine map
``2 * x - 1``. Arithmetic runs in float64, so the codec is exactly
invertible for float32 images (any value that is 0 or >= 2^-29, which
rendered images always satisfy).

A dataset container is a directory: ``manifest.txt`` (version, seed,
config, object list with elevations), one subdirectory per object with a
pose table, and per-view image/depth tensor files. Bytes are a pure
function of (seed, config).
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from crossview.geometry import CameraPose, load_poses, save_poses
from crossview.tensorio import load_tensor, save_tensor

__all__ = [
    "Primitive",
    "Scene",
    "RenderedView",
    "Lighting",
    "gen_scene",
    "render_view",
    "make_dataset",
    "load_dataset",
    "DatasetReader",
    "ObjectViews",
    "latent_encode",
    "latent_decode",
]

_BACKGROUND = (0.1, 0.1, 0.1)


@dataclass(frozen=True)
class Lighting:
    ambient: float = 0.3
    diffuse: float = 0.7


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box (``extent`` = half sizes) or sphere (``extent[0]`` = radius)."""

    kind: str
    center: tuple
    extent: tuple
    albedo: tuple


@dataclass(frozen=True)
class Scene:
    seed: int
    primitives: tuple
    background: tuple = _BACKGROUND


@dataclass
class RenderedView:
    image: np.ndarray
    depth: np.ndarray
    pose: CameraPose


def gen_scene(seed, min_count=1, max_count=3, background=_BACKGROUND):
    """Deterministic single-cluster scene: 1-3 primitives inside [-1, 1]^3."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 11])))
    count = int(rng.integers(min_count, max_count + 1))
    prims = []
    for _ in range(count):
        kind = "box" if rng.random() < 0.5 else "sphere"
        center = rng.uniform(-0.5, 0.5, size=3)
        albedo = tuple(rng.uniform(0.25, 1.0, size=3))
        if kind == "box":
            half = rng.uniform(0.15, 0.45, size=3)
            half = np.minimum(half, 1.0 - np.abs(center))  # keep the AABB inside the cube
            prims.append(Primitive("box", tuple(center), tuple(half), albedo))
        else:
            radius = float(rng.uniform(0.15, 0.45))
            radius = min(radius, float(1.0 - np.abs(center).max()))
            prims.append(Primitive("sphere", tuple(center), (radius, 0.0, 0.0), albedo))
    return Scene(seed=int(seed), primitives=tuple(prims), background=tuple(background))


def _intersect_box(origin, dirs, bmin, bmax):
    """Slab test; robust to axis-parallel rays. Returns (t_enter, axis, hit)."""
    k = dirs.shape[1]
    t_lo = np.full((3, k), -np.inf)
    t_hi = np.full((3, k), np.inf)
    for ax in range(3):
        d = dirs[ax]
        o = origin[ax]
        par = np.abs(d) < 1e-12
        with np.errstate(divide="ignore"):
            inv = np.where(par, np.inf, 1.0 / d)
        ta = (bmin[ax] - o) * inv
        tb = (bmax[ax] - o) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        inside = (o >= bmin[ax]) & (o <= bmax[ax])
        t_lo[ax] = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        t_hi[ax] = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    enter_ax = np.argmax(t_lo, axis=0)
    t_enter = t_lo[enter_ax, np.arange(k)]
    t_exit = t_hi.min(axis=0)
    hit = (t_exit >= t_enter) & (t_enter > 1e-9) & np.isfinite(t_enter)
    return t_enter, enter_ax, hit


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin[:, None] - np.asarray(center)[:, None]
    a = (dirs * dirs).sum(axis=0)
    b = 2.0 * (dirs * oc).sum(axis=0)
    c = (oc * oc).sum(axis=0) - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2.0 * a)
    hit &= t > 1e-9
    return t, hit


def render_view(scene, pose, lighting=Lighting()):
    """Analytic ray cast of ``scene`` from ``pose`` with a depth test."""
    h, w = pose.height, pose.width
    if pose.radius <= math.sqrt(3.0):
        raise ValueError("camera must stay outside the scene cube (radius > sqrt(3))")
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dcam = np.stack(
        [
            (uu.reshape(-1) - pose.cx) / pose.focal,
            (vv.reshape(-1) - pose.cy) / pose.focal,
            np.ones(h * w),
        ]
    )
    rot = pose.rotation()
    dirs = rot.T @ dcam  # world directions; camera z equals the ray parameter
    origin = pose.center()
    k = h * w
    t_best = np.full(k, np.inf)
    normal = np.zeros((3, k))
    albedo = np.zeros((3, k))
    for prim in scene.primitives:
        center = np.asarray(prim.center)
        if prim.kind == "box":
            half = np.asarray(prim.extent)
            t, enter_ax, hit = _intersect_box(origin, dirs, center - half, center + half)
            closer = hit & (t < t_best)
            if closer.any():
                t_best = np.where(closer, t, t_best)
                n = np.zeros((3, k))
                idx = np.arange(k)
                n[enter_ax, idx] = -np.sign(dirs[enter_ax, idx])
                normal[:, closer] = n[:, closer]
                albedo[:, closer] = np.asarray(prim.albedo)[:, None]
        elif prim.kind == "sphere":
            radius = prim.extent[0]
            t, hit = _intersect_sphere(origin, dirs, center, radius)
            closer = hit & (t < t_best)
            if closer.any():
                t_best = np.where(closer, t, t_best)
                p = origin[:, None] + t[None] * dirs
                normal[:, closer] = (p[:, closer] - center[:, None]) / radius
                albedo[:, closer] = np.asarray(prim.albedo)[:, None]
        else:
            raise ValueError(f"unknown primitive kind {prim.kind!r}")
    fg = np.isfinite(t_best)
    light = -dirs / np.linalg.norm(dirs, axis=0, keepdims=True)
    diffuse = np.maximum(0.0, (normal * light).sum(axis=0))
    shade = lighting.ambient + lighting.diffuse * diffuse
    img = np.where(fg[None], albedo * shade[None], np.asarray(scene.background)[:, None])
    img = np.clip(img, 0.0, 1.0).reshape(3, h, w).astype(np.float32)
    depth = t_best.reshape(h, w).astype(np.float32)
    return RenderedView(image=img, depth=depth, pose=pose)


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------


def latent_encode(img, patch=2):
    """Space-to-channel plus the affine ``2x - 1``; float64 output.

    ``img`` is (C, H, W) with H, W divisible by ``patch``; the result is
    (C * patch^2, H/patch, W/patch). Exactly invertible by
    :func:`latent_decode` for float32 inputs.
    """
    img = np.asarray(img)
    c, h, w = img.shape
    if h % patch or w % patch:
        raise ValueError(f"extents {(h, w)} not divisible by patch {patch}")
    x = img.astype(np.float64)
    x = x.reshape(c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3).reshape(c * patch * patch, h // patch, w // patch)
    return 2.0 * x - 1.0


def latent_decode(lat, patch=2, out_dtype=np.float32):
    """Inverse of :func:`latent_encode`."""
    lat = np.asarray(lat, dtype=np.float64)
    cpp, hh, ww = lat.shape
    if cpp % (patch * patch):
        raise ValueError(f"channel count {cpp} not divisible by patch^2")
    c = cpp // (patch * patch)
    x = (lat + 1.0) / 2.0
    x = x.reshape(c, patch, patch, hh, ww).transpose(0, 3, 1, 4, 2)
    return x.reshape(c, hh * patch, ww * patch).astype(out_dtype)


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


@dataclass
class ObjectViews:
    index: int
    elevation: float
    scene_seed: int
    images: np.ndarray  # (V, 3, H, W) float32
    depths: np.ndarray  # (V, H, W) float32, +inf background
    poses: list


@dataclass
class DatasetReader:
    root: str
    seed: int
    config_hash: str
    image_size: int
    n_views: int
    radius: float
    focal: float
    objects: list  # (index, scene_seed, elevation, dirname)

    @property
    def n_objects(self):
        return len(self.objects)

    def load_object(self, i):
        index, scene_seed, elevation, dirname = self.objects[i]
        base = os.path.join(self.root, dirname)
        poses = load_poses(os.path.join(base, "poses.txt"))
        images = []
        depths = []
        for v in range(self.n_views):
            images.append(load_tensor(os.path.join(base, f"view_{v:02d}.img.ndt")))
            depths.append(load_tensor(os.path.join(base, f"view_{v:02d}.depth.ndt")))
        return ObjectViews(
            index=index,
            elevation=elevation,
            scene_seed=scene_seed,
            images=np.stack(images),
            depths=np.stack(depths),
            poses=poses,
        )


def _object_elevation(spec, rng, obj_index):
    """Elevation policy: scalar, cycling sequence, or uniform random [0, max]."""
    if isinstance(spec, (int, float)):
        return float(spec)
    if isinstance(spec, (list, tuple)):
        return float(spec[obj_index % len(spec)])
    if isinstance(spec, str) and spec.startswith("random:"):
        return float(rng.uniform(0.0, float(spec.split(":", 1)[1])))
    raise ValueError(f"bad elevation spec {spec!r}")


def make_dataset(
    out_dir,
    n_objects,
    n_views,
    elevation,
    seed,
    image_size=64,
    radius=2.6,
    focal_scale=0.6,
    config_hash="-",
    first_object=0,
):
    """Render a dataset container under ``out_dir``.

    ``elevation`` is a float (shared by all objects), a sequence (object i
    uses entry i mod len), or ``"random:MAX"`` (per-object uniform draw).
    Azimuths are ``n_views`` equal steps over [0, 360). ``first_object``
    offsets the object seed stream so separate containers (train vs eval)
    hold disjoint objects.
    """
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    os.makedirs(out_dir, exist_ok=True)
    focal = focal_scale * image_size
    elev_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7])))
    lines = [
        "version 1",
        f"seed {int(seed)}",
        f"config_hash {config_hash}",
        f"image_size {image_size}",
        f"views {n_views}",
        f"radius {radius!r}",
        f"focal {focal!r}",
        f"objects {n_objects}",
    ]
    azimuths = [360.0 * k / n_views for k in range(n_views)]
    for obj in range(n_objects):
        scene_seed = int(
            np.random.SeedSequence([int(seed), 3, int(first_object + obj)]).generate_state(1)[0]
        )
        elev = _object_elevation(elevation, elev_rng, obj)
        if not 0.0 <= elev <= 89.0:
            raise ValueError(f"elevation {elev} outside [0, 89] degrees")
        dirname = f"obj_{obj:04d}"
        base = os.path.join(out_dir, dirname)
        os.makedirs(base, exist_ok=True)
        scene = gen_scene(scene_seed)
        poses = [
            CameraPose(az, elev, radius, focal, image_size, image_size) for az in azimuths
        ]
        save_poses(os.path.join(base, "poses.txt"), poses)
        for v, pose in enumerate(poses):
            view = render_view(scene, pose)
            save_tensor(os.path.join(base, f"view_{v:02d}.img.ndt"), view.image)
            save_tensor(os.path.join(base, f"view_{v:02d}.depth.ndt"), view.depth)
        lines.append(f"object {obj} seed {scene_seed} elevation {elev!r} dir {dirname}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return load_dataset(out_dir)


def load_dataset(root):
    """Open a dataset container written by :func:`make_dataset`."""
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"{root}: missing manifest.txt")
    meta = {}
    objects = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "object":
                objects.append((int(fields[1]), int(fields[3]), float(fields[5]), fields[7]))
            else:
                meta[fields[0]] = fields[1]
    return DatasetReader(
        root=root,
        seed=int(meta["seed"]),
        config_hash=meta["config_hash"],
        image_size=int(meta["image_size"]),
        n_views=int(meta["views"]),
        radius=float(meta["radius"]),
        focal=float(meta["focal"]),
        objects=objects,
    )
