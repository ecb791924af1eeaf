"""Dynamic pillar voxelization and permutation-invariant point aggregation.

Points are binned into BEV raster cells ("pillars") without any cap on
points per pillar.  Each point is lifted by a small shared network and the
pillar feature is the channel-wise max over its members, which makes the
aggregated grid independent of point order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevConfig
from .numerics import DenseNet, Grid2D, _as_float64, net_forward_batch, net_forward_cached


@dataclass
class PointCloud:
    """N points with xyz in ego meters plus K extra per-point features."""

    xyz: np.ndarray
    feats: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = _as_float64(self.xyz).reshape(-1, 3) if np.size(self.xyz) else np.zeros((0, 3))
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {self.xyz.shape}")
        if self.feats is None:
            self.feats = np.zeros((len(self.xyz), 0))
        self.feats = _as_float64(self.feats)
        if self.feats.ndim != 2 or self.feats.shape[0] != len(self.xyz):
            raise ValueError(
                f"feats must be (n, k) with n={len(self.xyz)}, got {self.feats.shape}"
            )
        if not (np.all(np.isfinite(self.xyz)) and np.all(np.isfinite(self.feats))):
            raise ValueError("point values must be finite")

    @property
    def count(self) -> int:
        return len(self.xyz)

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]


@dataclass
class PillarIndex:
    """Mapping from occupied pillar (row, col) to the member point indices.

    Only non-empty pillars are stored; member lists keep the original point
    order, so the index is deterministic for a fixed input order.
    """

    bev: BevConfig
    members: dict


def voxelize_dynamic(points: PointCloud, bev: BevConfig) -> PillarIndex:
    """Bin points into pillars by floor division of (x, y) against the raster.

    Binning is half-open: a point exactly on the upper extent edge falls
    outside.  Out-of-extent points are dropped.
    """
    members: dict = {}
    if points.count:
        r = np.floor((points.xyz[:, 0] - bev.x_min) / bev.pitch).astype(np.int64)
        c = np.floor((points.xyz[:, 1] - bev.y_min) / bev.pitch).astype(np.int64)
        keep = (r >= 0) & (r < bev.height) & (c >= 0) & (c < bev.width)
        for i in np.nonzero(keep)[0]:
            members.setdefault((int(r[i]), int(c[i])), []).append(int(i))
    return PillarIndex(bev=bev, members=members)


def augment_points(index: PillarIndex, points: PointCloud) -> tuple:
    """Build the per-point network inputs [x, y, z, feats..., dx, dy].

    (dx, dy) are offsets from the owning pillar's center.  Returns
    (inputs (m, k+5), order (m,), groups) where order lists the original
    point indices pillar by pillar and groups is a list of
    ((row, col), slice) into the stacked arrays.
    """
    k = points.feat_dim
    order = []
    groups = []
    start = 0
    for cell, idx in index.members.items():
        order.extend(idx)
        groups.append((cell, slice(start, start + len(idx))))
        start += len(idx)
    order = np.asarray(order, dtype=np.int64)
    inputs = np.zeros((len(order), k + 5))
    if len(order):
        xyz = points.xyz[order]
        inputs[:, :3] = xyz
        if k:
            inputs[:, 3:3 + k] = points.feats[order]
        for cell, sl in groups:
            cx, cy = index.bev.cell_center(*cell)
            inputs[sl, 3 + k] = xyz[sl, 0] - cx
            inputs[sl, 3 + k + 1] = xyz[sl, 1] - cy
    return inputs, order, groups


def aggregate_pillars(index: PillarIndex, points: PointCloud, pn: DenseNet) -> Grid2D:
    """Channel-wise max of the lifted member points, per pillar.

    Empty pillars stay zero.  The network input size must equal the point
    feature dimension plus 5 (xyz and the two pillar-center offsets).
    """
    if pn.in_size != points.feat_dim + 5:
        raise ValueError(
            f"network input {pn.in_size} does not match point features "
            f"{points.feat_dim} + 5"
        )
    inputs, _, groups = augment_points(index, points)
    out = np.zeros((index.bev.height, index.bev.width, pn.out_size))
    if len(inputs):
        lifted = net_forward_batch(pn, inputs)
        for (row, col), sl in groups:
            out[row, col] = lifted[sl].max(axis=0)
    return Grid2D(out)


def aggregate_pillars_cached(index: PillarIndex, inputs: np.ndarray, groups: list,
                             pn: DenseNet):
    """Training-path variant: same math as aggregate_pillars but returns the
    forward cache and per-pillar winner bookkeeping for backprop."""
    out = np.zeros((index.bev.height, index.bev.width, pn.out_size))
    if not len(inputs):
        return Grid2D(out), None, None
    lifted, cache = net_forward_cached(pn, inputs)
    winners = []
    for (row, col), sl in groups:
        block = lifted[sl]
        arg = block.argmax(axis=0)
        out[row, col] = block[arg, np.arange(block.shape[1])]
        winners.append(((row, col), sl, arg))
    return Grid2D(out), cache, winners
