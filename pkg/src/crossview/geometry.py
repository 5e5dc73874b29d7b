"""Pinhole cameras on a viewing sphere, voxel grids, and differentiable warps.

Conventions (fixed across the package):

* World frame: right handed, +Z up, scene centered at the origin. A camera
  pose is (azimuth, elevation, radius), all angles in degrees, with center

      C = r * (cos el cos az, cos el sin az, sin el)

  and the optical axis looking at the origin.
* Camera frame: +Z forward, +X right, +Y down. The rotation rows are the
  camera axes, so ``p_cam = R @ (p_world - C)``.
* Intrinsics: square pixels, ``fx = fy = focal`` (in pixels), principal
  point at ``((W-1)/2, (H-1)/2)`` so integer pixel coordinates are pixel
  centers. Projection: ``u = f*x/z + cx`` (column), ``v = f*y/z + cy``
  (row). Depth is the camera-frame z, not Euclidean distance.
* Voxel grid: the cube ``[-b, b]^3`` split into R cells per axis with
  cell-centered samples; volume tensors are laid out ``(C, X, Y, Z)``. The
  grid is fixed in world space, so voxel centers are identical for every
  pose.

The differentiable ops (:func:`unproject_features`,
:func:`warp_to_frustum`) move gradients through the interpolation weights
only; camera parameters and grid coordinates are constants.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from crossview.engine import Tensor, bilinear_sample2d, concat, reshape, transpose, trilinear_sample3d

__all__ = [
    "CameraPose",
    "GridSpec",
    "WorldVolume",
    "FrustumVolume",
    "pos_encode",
    "project",
    "unproject",
    "camera_param_volume",
    "encode_camera_volume",
    "unproject_features",
    "frustum_depths",
    "warp_to_frustum",
    "save_poses",
    "load_poses",
]

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraPose:
    """Spherical pose looking at the origin plus pinhole intrinsics."""

    azimuth: float
    elevation: float
    radius: float
    focal: float
    height: int
    width: int

    def __post_init__(self):
        if abs(self.elevation) >= 90.0:
            raise ValueError(f"elevation must satisfy |el| < 90 deg, got {self.elevation}")
        if self.radius <= 0 or self.focal <= 0:
            raise ValueError("radius and focal must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image extents must be >= 1")

    @property
    def cx(self):
        return (self.width - 1) / 2.0

    @property
    def cy(self):
        return (self.height - 1) / 2.0

    def center(self):
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        ce = math.cos(el)
        return self.radius * np.array([ce * math.cos(az), ce * math.sin(az), math.sin(el)])

    def rotation(self):
        """World-to-camera rotation; rows are the camera x/y/z axes."""
        c = self.center()
        zc = -c / np.linalg.norm(c)
        xc = np.cross(zc, _UP)
        n = np.linalg.norm(xc)
        if n < 1e-12:
            raise ValueError("degenerate pose: optical axis parallel to world up")
        xc = xc / n
        yc = np.cross(zc, xc)
        return np.stack([xc, yc, zc])

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.center()) @ self.rotation().T

    def camera_to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation() + self.center()

    def scaled(self, height, width):
        """Pose for a feature map of a different resolution, same field of view."""
        if height * self.width != width * self.height:
            raise ValueError(
                f"aspect ratio changed: {(self.height, self.width)} -> {(height, width)}"
            )
        return replace(
            self,
            focal=self.focal * (height / self.height),
            height=int(height),
            width=int(width),
        )

    def near_far(self, bound):
        """Depth range that encloses the grid cube ``[-bound, bound]^3``."""
        half_diag = math.sqrt(3.0) * bound
        near = self.radius - half_diag
        if near <= 0:
            raise ValueError(f"radius {self.radius} too small for grid bound {bound}")
        return near, self.radius + half_diag


def project(points, pose):
    """Project world points into a pose's pixel grid.

    Returns ``(uv, depth, in_front)`` where ``uv[:, 0]`` is the column and
    ``uv[:, 1]`` the row, ``depth`` is camera-frame z, and ``in_front``
    flags points strictly in front of the camera. Pixel coordinates of
    points behind the camera are set to NaN.
    """
    pc = pose.world_to_camera(points)
    z = pc[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.focal * pc[:, 0] / z + pose.cx
        v = pose.focal * pc[:, 1] / z + pose.cy
    uv = np.stack([u, v], axis=1)
    uv[~in_front] = np.nan
    return uv, z, in_front


def unproject(uv, depth, pose):
    """Lift pixels at camera-frame depth back to world points.

    ``uv`` is (K, 2) as (column, row); ``depth`` must be positive.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject requires strictly positive depth")
    x = (uv[:, 0] - pose.cx) / pose.focal
    y = (uv[:, 1] - pose.cy) / pose.focal
    pc = np.stack([x * depth, y * depth, depth], axis=1)
    return pose.camera_to_world(pc)


def pos_encode(x, n_freq):
    """Sinusoidal features: per input channel, interleaved sin/cos octaves.

    ``x`` has shape (C, ...) with values roughly in [-1, 1]; the result has
    shape (C * 2 * n_freq, ...) laid out per input channel as
    ``sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...``.
    """
    x = np.asarray(x)
    if x.ndim < 1:
        raise ValueError("pos_encode expects a leading channel axis")
    c = x.shape[0]
    rest = x.shape[1:]
    out = np.empty((c * 2 * n_freq,) + rest, dtype=x.dtype)
    for ci in range(c):
        base = ci * 2 * n_freq
        for k in range(n_freq):
            arg = (math.pi * (1 << k)) * x[ci]
            out[base + 2 * k] = np.sin(arg)
            out[base + 2 * k + 1] = np.cos(arg)
    return out


@dataclass(frozen=True)
class GridSpec:
    """Cell-centered cube grid ``[-bound, bound]^3`` with R cells per axis."""

    resolution: int = 16
    bound: float = 1.0

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        if self.bound <= 0:
            raise ValueError("bound must be positive")

    @property
    def cell(self):
        return 2.0 * self.bound / self.resolution

    def axis_centers(self):
        r = self.resolution
        return -self.bound + (np.arange(r) + 0.5) * self.cell

    def voxel_centers(self):
        """All cell centers, shape (R^3, 3), x-major then y then z."""
        ax = self.axis_centers()
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def world_to_voxel(self, points):
        """Continuous cell indices; cell centers land on integers."""
        points = np.asarray(points, dtype=np.float64)
        return (points + self.bound) / self.cell - 0.5


@dataclass
class WorldVolume:
    """Per-view voxel features with a validity mask, on a shared grid."""

    features: Tensor
    mask: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        r = self.grid.resolution
        if self.features.shape[1:] != (r, r, r):
            raise ValueError(f"features {self.features.shape} do not match grid {r}")
        if self.mask.shape != (1, r, r, r):
            raise ValueError(f"mask must be (1, {r}, {r}, {r}), got {self.mask.shape}")


@dataclass
class FrustumVolume:
    """Features resampled along per-pixel depth candidates of one view."""

    features: Tensor
    depth_enc: np.ndarray
    mask: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ValueError("frustum features must be (C, D, H, W)")
        if self.mask.shape != (1,) + self.features.shape[1:]:
            raise ValueError("frustum mask must be (1, D, H, W)")


def camera_param_volume(pose, grid):
    """Per-voxel camera parameters for one pose: unit view direction
    (world frame) and camera-frame depth normalized to [-1, 1] over the
    pose's grid-enclosing near/far range. Shape (4, R, R, R).
    """
    r = grid.resolution
    centers = grid.voxel_centers()
    rel = centers - pose.center()
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    dirs = rel / dist
    depth = pose.world_to_camera(centers)[:, 2]
    near, far = pose.near_far(grid.bound)
    depth_n = 2.0 * (depth - near) / (far - near) - 1.0
    vals = np.concatenate([dirs, depth_n[:, None]], axis=1)
    return vals.T.reshape(4, r, r, r)


def encode_camera_volume(pose, grid, n_freq=6):
    """Positional encoding of :func:`camera_param_volume`; (8*n_freq, R, R, R)."""
    return pos_encode(camera_param_volume(pose, grid), n_freq)


def unproject_features(x, pose, grid, n_freq=6):
    """Lift a feature map into the shared voxel grid for one view.

    Every voxel center is projected into ``x`` (a (C, h, w) tensor) and
    bilinearly sampled; voxels behind the camera or projecting outside the
    map are masked and carry exactly zero features. The positional encoding
    of the per-voxel camera parameters is appended, giving a
    :class:`WorldVolume` with ``C + 8*n_freq`` channels.
    """
    if x.ndim != 3:
        raise ValueError(f"unproject_features expects (C, h, w), got {x.shape}")
    c, h, w = x.shape
    pose_s = pose.scaled(h, w)
    r = grid.resolution
    centers = grid.voxel_centers()
    uv, _, in_front = project(centers, pose_s)
    coords = np.stack([uv[:, 1], uv[:, 0]], axis=1)
    coords[~in_front] = -1.0
    samples, in_bounds = bilinear_sample2d(x, coords)
    mask = (in_front & in_bounds).astype(x.dtype)
    enc = encode_camera_volume(pose_s, grid, n_freq).astype(x.dtype)
    enc = enc.reshape(enc.shape[0], -1) * mask
    feats = concat([samples, Tensor(enc.T)], axis=1)
    feats = reshape(transpose(feats, (1, 0)), (c + enc.shape[0], r, r, r))
    return WorldVolume(features=feats, mask=mask.reshape(1, r, r, r), grid=grid)


def frustum_depths(near, far, count):
    """``count`` uniformly spaced depth candidates over [near, far]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not near < far:
        raise ValueError(f"need near < far, got [{near}, {far}]")
    return np.linspace(near, far, count)


def _trilinear_const(vol, coords):
    """Trilinear sampling of a constant (1, R, R, R) numpy mask; zero outside."""
    dims = vol.shape[1:]
    valid = np.all(np.isfinite(coords), axis=1)
    for ax in range(3):
        valid &= (coords[:, ax] >= 0) & (coords[:, ax] <= dims[ax] - 1)
    pts = np.where(valid[:, None], coords, 0.0)
    lo = []
    hi = []
    fr = []
    for ax in range(3):
        l = np.minimum(np.floor(pts[:, ax]), dims[ax] - 2 if dims[ax] > 1 else 0).astype(np.int64)
        lo.append(l)
        hi.append(np.minimum(l + 1, dims[ax] - 1))
        fr.append(pts[:, ax] - l)
    flat = vol.reshape(-1)
    s12 = dims[1] * dims[2]
    out = np.zeros(coords.shape[0])
    for b0 in (0, 1):
        for b1 in (0, 1):
            for b2 in (0, 1):
                idx = (
                    (hi[0] if b0 else lo[0]) * s12
                    + (hi[1] if b1 else lo[1]) * dims[2]
                    + (hi[2] if b2 else lo[2])
                )
                wgt = (
                    (fr[0] if b0 else 1 - fr[0])
                    * (fr[1] if b1 else 1 - fr[1])
                    * (fr[2] if b2 else 1 - fr[2])
                )
                out += flat[idx] * wgt
    return out * valid, valid


def warp_to_frustum(vol, pose, depth_count, out_hw, n_freq=6):
    """Resample a :class:`WorldVolume` into one view's frustum.

    For every pixel of an ``out_hw = (h, w)`` map and each of
    ``depth_count`` uniform depth candidates spanning the grid, the world
    point is trilinearly sampled from ``vol``. Out-of-volume samples and
    samples whose interpolated validity is zero are masked (zero features).
    The per-candidate depth encoding is returned alongside, broadcast to
    (2*n_freq, D, h, w) and zeroed on masked tokens.
    """
    h, w = out_hw
    pose_s = pose.scaled(h, w)
    near, far = pose_s.near_far(vol.grid.bound)
    depths = frustum_depths(near, far, depth_count)
    cv = vol.features.shape[0]
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    pix_rep = np.tile(pix, (depth_count, 1))
    dep_rep = np.repeat(depths, h * w)
    pts = unproject(pix_rep, dep_rep, pose_s)
    coords = vol.grid.world_to_voxel(pts)
    samples, in_bounds = trilinear_sample3d(vol.features, coords)
    mval, _ = _trilinear_const(vol.mask.astype(np.float64), coords)
    token_ok = (in_bounds & (mval > 0)).astype(vol.features.dtype)
    samples = samples * Tensor(token_ok[:, None])
    feats = transpose(reshape(samples, (depth_count, h, w, cv)), (3, 0, 1, 2))
    dn = 2.0 * (depths - near) / (far - near) - 1.0
    enc = pos_encode(dn[None, :], n_freq).astype(np.asarray(vol.features.data).dtype)
    enc = np.broadcast_to(enc[:, :, None, None], (enc.shape[0], depth_count, h, w)).copy()
    mask = token_ok.reshape(1, depth_count, h, w)
    enc *= mask
    return FrustumVolume(features=feats, depth_enc=enc, mask=mask, depths=depths)


def save_poses(path, poses):
    """Write poses as a text table: az el radius focal height width."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in poses:
            fh.write(
                f"{p.azimuth!r} {p.elevation!r} {p.radius!r} {p.focal!r} {p.height} {p.width}\n"
            )


def load_poses(path):
    """Read a pose table written by :func:`save_poses`."""
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise ValueError(f"{path}: pose line needs 6 fields, got {len(fields)}")
            poses.append(
                CameraPose(
                    azimuth=float(fields[0]),
                    elevation=float(fields[1]),
                    radius=float(fields[2]),
                    focal=float(fields[3]),
                    height=int(fields[4]),
                    width=int(fields[5]),
                )
            )
    return poses
