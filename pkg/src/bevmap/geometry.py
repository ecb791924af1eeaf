"""Camera geometry and raster warps between perspective, camera-frame and
ego-frame bird's-eye-view grids.

Conventions used throughout:

* ego frame: +x forward, +y left, +z up, origin on the ground plane z=0.
* camera frame: +z viewing direction, +x right, +y down.  ``rotation``
  maps camera-frame vectors into the ego frame (columns are the camera
  axes expressed in ego coordinates) and ``translation`` is the camera
  center in ego coordinates.
* BEV rasters: row i spans x = x_min + i*pitch .. +pitch, column j spans
  y = y_min + j*pitch .. +pitch; cell centers sit at the half-pitch
  offsets.  With the default extent x in [-30, 30], y in [-15, 15] and
  pitch 0.15 the raster is 400 x 200.

The camera top-down frame used by camera_frame_to_bev is the planar frame
anchored at the camera's ground foot whose +x axis is the ground
projection of the camera viewing axis (+y its 90 degree counterclockwise
perpendicular).  Extrinsics with significant tilt are still applied as
this ground-plane projection; a warning is emitted when the viewing axis
leaves the horizontal plane by more than ``tilt_warn_deg``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import Grid2D, _as_float64


@dataclass(frozen=True)
class BevConfig:
    """Metric extent and pitch of a top-down raster."""

    x_min: float = -30.0
    x_max: float = 30.0
    y_min: float = -15.0
    y_max: float = 15.0
    pitch: float = 0.15

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("BEV extent must be nonempty")
        if self.pitch <= 0.0:
            raise ValueError("pitch must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("BEV raster must have at least one cell per axis")

    @property
    def height(self) -> int:
        return int(round((self.x_max - self.x_min) / self.pitch))

    @property
    def width(self) -> int:
        return int(round((self.y_max - self.y_min) / self.pitch))

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.x_max - self.x_min, self.y_max - self.y_min))

    def cell_center(self, row: int, col: int):
        x = self.x_min + (row + 0.5) * self.pitch
        y = self.y_min + (col + 0.5) * self.pitch
        return x, y

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of metric cell centers."""
        xs = self.x_min + (np.arange(self.height) + 0.5) * self.pitch
        ys = self.y_min + (np.arange(self.width) + 0.5) * self.pitch
        out = np.empty((self.height, self.width, 2))
        out[:, :, 0] = xs[:, None]
        out[:, :, 1] = ys[None, :]
        return out

    def xy_to_rc(self, x, y):
        """Metric coordinates -> continuous (row, col); centers at integers."""
        r = (np.asarray(x, dtype=np.float64) - self.x_min) / self.pitch - 0.5
        c = (np.asarray(y, dtype=np.float64) - self.y_min) / self.pitch - 0.5
        return r, c

    def rc_to_xy(self, row, col):
        x = self.x_min + (np.asarray(row, dtype=np.float64) + 0.5) * self.pitch
        y = self.y_min + (np.asarray(col, dtype=np.float64) + 0.5) * self.pitch
        return x, y


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a rigid camera-to-ego transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.rotation = _as_float64(self.rotation)
        self.translation = _as_float64(self.translation)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must have 3 entries, got {self.translation.shape}")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")


@dataclass
class MaskedGrid:
    """A Grid2D plus a boolean validity mask over its cells."""

    grid: Grid2D
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.grid.height, self.grid.width):
            raise ValueError(
                f"mask shape {self.mask.shape} does not match grid "
                f"{(self.grid.height, self.grid.width)}"
            )


def project_ego_to_pixel(cam: CameraModel, point) -> tuple:
    """Project one ego-frame 3-d point to pixel coordinates.

    Returns (u, v, in_front).  in_front is False when the camera-frame
    depth is <= 0; the pixel is still the mathematical projection where
    defined (nan at exactly zero depth).
    """
    p = _as_float64(point)
    if p.shape != (3,):
        raise ValueError(f"point must have 3 entries, got {p.shape}")
    pc = cam.rotation.T @ (p - cam.translation)
    z = pc[2]
    if z == 0.0:
        return float("nan"), float("nan"), False
    u = cam.fx * pc[0] / z + cam.cx
    v = cam.fy * pc[1] / z + cam.cy
    return float(u), float(v), bool(z > 0.0)


def ipm_pixels_to_ground(cam: CameraModel, us: np.ndarray, vs: np.ndarray):
    """Vectorized pixel-ray intersection with the ground plane z=0.

    Returns (xy (n, 2), valid (n,)).  A ray is invalid when it is parallel
    to the ground plane or the intersection lies behind the camera.
    """
    us = _as_float64(us).ravel()
    vs = _as_float64(vs).ravel()
    d_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=1
    )
    d_ego = d_cam @ cam.rotation.T
    oz = cam.translation[2]
    dz = d_ego[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(dz != 0.0, -oz / dz, np.inf)
        xy = cam.translation[None, :2] + s[:, None] * d_ego[:, :2]
    valid = (dz != 0.0) & (s > 0.0)
    xy = np.where(valid[:, None], xy, 0.0)
    return xy, valid


def ipm_pixel_to_ground(cam: CameraModel, u: float, v: float):
    """Intersect the ray through pixel (u, v) with the ground plane.

    Returns the ego (x, y) of the intersection, or None when the ray is
    parallel to the plane or points away from it.
    """
    xy, valid = ipm_pixels_to_ground(cam, np.array([u]), np.array([v]))
    if not valid[0]:
        return None
    return float(xy[0, 0]), float(xy[0, 1])


def bilinear_sample(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) data at continuous (row, col) positions in [0, H-1] x [0, W-1]."""
    h, w = data.shape[:2]
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    a = (rows - r0)[:, None]
    b = (cols - c0)[:, None]
    return (
        data[r0, c0] * (1.0 - a) * (1.0 - b)
        + data[r0, c1] * (1.0 - a) * b
        + data[r1, c0] * a * (1.0 - b)
        + data[r1, c1] * a * b
    )


def nearest_sample(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = data.shape[:2]
    r = np.clip(np.rint(rows).astype(np.int64), 0, h - 1)
    c = np.clip(np.rint(cols).astype(np.int64), 0, w - 1)
    return data[r, c]


def ipm_warp_grid(cam: CameraModel, persp: Grid2D, bev: BevConfig,
                  nearest: bool = False) -> MaskedGrid:
    """Homographic ground-plane warp of a perspective grid into the ego BEV.

    Each BEV cell center is lifted to (x, y, 0), projected into the image
    and sampled bilinearly (nearest-neighbor behind the flag, for label
    grids).  The mask marks exactly the cells whose center projects in
    front of the camera and inside the image sample domain
    [0, W-1] x [0, H-1].
    """
    if persp.height < 1 or persp.width < 1:
        raise ValueError("perspective grid must be nonempty")
    centers = bev.cell_centers().reshape(-1, 2)
    pts = np.concatenate([centers, np.zeros((len(centers), 1))], axis=1)
    pc = (pts - cam.translation) @ cam.rotation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z != 0.0, cam.fx * pc[:, 0] / z + cam.cx, np.nan)
        v = np.where(z != 0.0, cam.fy * pc[:, 1] / z + cam.cy, np.nan)
    with np.errstate(invalid="ignore"):
        valid = (
            (z > 0.0)
            & (u >= 0.0) & (u <= persp.width - 1.0)
            & (v >= 0.0) & (v <= persp.height - 1.0)
        )
    out = np.zeros((bev.height * bev.width, persp.channels))
    if valid.any():
        sampler = nearest_sample if nearest else bilinear_sample
        out[valid] = sampler(persp.data, v[valid], u[valid])
    grid = Grid2D(out.reshape(bev.height, bev.width, persp.channels))
    return MaskedGrid(grid, valid.reshape(bev.height, bev.width))


def camera_planar_pose(cam: CameraModel):
    """Ground-plane pose (yaw, origin_xy, tilt_deg) induced by the extrinsics.

    yaw is the heading of the ground projection of the camera viewing axis;
    tilt_deg measures how far the viewing axis leaves the horizontal plane.
    """
    view = cam.rotation[:, 2]
    yaw = float(np.arctan2(view[1], view[0]))
    tilt = float(np.degrees(np.arcsin(np.clip(view[2], -1.0, 1.0))))
    return yaw, (float(cam.translation[0]), float(cam.translation[1])), abs(tilt)


def planar_warp_plan(cam: CameraModel, src_extent: BevConfig, dst_extent: BevConfig,
                     tilt_warn_deg: float = 45.0):
    """Precompute the resampling of a camera-frame top-down raster into the ego BEV.

    Returns (rows, cols, valid): continuous sample positions into the source
    raster for every destination cell (flat row-major order) and the
    in-bounds mask.  The plan is geometry-only, so training loops can build
    it once per camera.
    """
    yaw, (ox, oy), tilt = camera_planar_pose(cam)
    if tilt > tilt_warn_deg:
        warnings.warn(
            f"camera {cam.name or '<unnamed>'}: viewing-axis tilt {tilt:.1f} deg exceeds "
            f"{tilt_warn_deg:.1f} deg; ground-plane projection is degenerate",
            stacklevel=2,
        )
    centers = dst_extent.cell_centers().reshape(-1, 2)
    dx = centers[:, 0] - ox
    dy = centers[:, 1] - oy
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    a = cy_ * dx + sy_ * dy
    b = -sy_ * dx + cy_ * dy
    rows, cols = src_extent.xy_to_rc(a, b)
    valid = (
        (rows >= 0.0) & (rows <= src_extent.height - 1.0)
        & (cols >= 0.0) & (cols <= src_extent.width - 1.0)
    )
    return rows, cols, valid


def camera_frame_to_bev(cam: CameraModel, cam_topdown: Grid2D, src_extent: BevConfig,
                        bev: BevConfig, tilt_warn_deg: float = 45.0,
                        nearest: bool = False) -> MaskedGrid:
    """Resample a camera-frame top-down grid into the ego BEV raster.

    Applies the planar rigid transform (yaw plus translation) induced by
    the extrinsics on the ground plane; see the module docstring for the
    frame definition.
    """
    if (cam_topdown.height, cam_topdown.width) != (src_extent.height, src_extent.width):
        raise ValueError(
            f"top-down grid {cam_topdown.height}x{cam_topdown.width} does not match "
            f"extent raster {src_extent.height}x{src_extent.width}"
        )
    rows, cols, valid = planar_warp_plan(cam, src_extent, bev, tilt_warn_deg)
    out = np.zeros((bev.height * bev.width, cam_topdown.channels))
    if valid.any():
        sampler = nearest_sample if nearest else bilinear_sample
        out[valid] = sampler(cam_topdown.data, rows[valid], cols[valid])
    grid = Grid2D(out.reshape(bev.height, bev.width, cam_topdown.channels))
    return MaskedGrid(grid, valid.reshape(bev.height, bev.width))


def fuse_cameras(views: list) -> Grid2D:
    """Average per-camera masked BEV grids cell-wise over the valid views.

    Cells with no valid view are zero.  All views must share spatial shape
    and channel count; an empty list is rejected.
    """
    if not views:
        raise ValueError("fuse_cameras needs at least one view")
    shape = views[0].grid.data.shape
    for view in views[1:]:
        if view.grid.data.shape != shape:
            raise ValueError("all views must share spatial shape and channel count")
    total = np.zeros(shape)
    count = np.zeros(shape[:2])
    for view in views:
        total += np.where(view.mask[:, :, None], view.grid.data, 0.0)
        count += view.mask
    out = total / np.maximum(count, 1.0)[:, :, None]
    return Grid2D(out)
