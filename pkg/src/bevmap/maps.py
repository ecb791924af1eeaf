"""Vectorized map elements shared across the pipeline.

A map is a list of classed polylines in ego-frame meters, tied to the BEV
extent it was produced on.  Classes are fixed: lane dividers, pedestrian
crossings and road boundaries, with raster channel 0 reserved for
background (so class `divider` lives in channel 1, and so on).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevConfig
from .numerics import _as_float64

CLASS_NAMES = ("divider", "ped_crossing", "boundary")


def class_channel(name: str) -> int:
    """Raster channel for a class name (background is channel 0)."""
    if name not in CLASS_NAMES:
        raise ValueError(f"unknown class {name!r}")
    return CLASS_NAMES.index(name) + 1


@dataclass(eq=False)
class Polyline:
    """An ordered run of ego-frame (x, y) points with a class label."""

    class_name: str
    points: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if self.class_name not in CLASS_NAMES:
            raise ValueError(f"unknown class {self.class_name!r}")
        self.points = _as_float64(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (n, 2), got {self.points.shape}")
        if len(self.points) < 2:
            raise ValueError("a polyline needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("polyline points must be finite")
        same = np.all(self.points[1:] == self.points[:-1], axis=1)
        if np.any(same):
            raise ValueError("consecutive polyline points must be distinct")
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(eq=False)
class VectorMap:
    """Classed polylines over a common BEV extent."""

    bev: BevConfig
    elements: list = field(default_factory=list)

    def by_class(self, name: str) -> list:
        if name not in CLASS_NAMES:
            raise ValueError(f"unknown class {name!r}")
        return [e for e in self.elements if e.class_name == name]


# default stroke widths (pixels) used when rasterizing each class
DEFAULT_THICKNESS = {"divider": 1, "ped_crossing": 3, "boundary": 1}


def resolve_thickness(thickness, class_name: str) -> int:
    """Normalize a thickness spec (int or per-class mapping, None for defaults)."""
    if thickness is None:
        t = DEFAULT_THICKNESS[class_name]
    elif isinstance(thickness, int):
        t = thickness
    else:
        t = int(thickness[class_name])
    if t < 1 or t % 2 == 0:
        raise ValueError(f"thickness must be odd and >= 1, got {t}")
    return t


def _clip_unit_box(u0, v0, u1, v1, hi_u, hi_v):
    # Liang-Barsky clip of the parametric segment to [0, hi_u] x [0, hi_v]
    t0, t1 = 0.0, 1.0
    du, dv = u1 - u0, v1 - v0
    for p, q in ((-du, u0), (du, hi_u - u0), (-dv, v0), (dv, hi_v - v0)):
        if p == 0.0:
            if q < 0.0:
                return None
        else:
            r = q / p
            if p < 0.0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
    if t0 > t1:
        return None
    return u0 + t0 * du, v0 + t0 * dv, u0 + t1 * du, v0 + t1 * dv


def segment_cells(bev: BevConfig, a_xy, b_xy) -> list:
    """Supercover raster footprint of one metric segment on the BEV grid.

    Returns every cell whose square the segment passes through, in traversal
    order from a to b.  The segment is clipped to the raster extent first;
    exact corner crossings include both side cells.
    """
    ra, ca = bev.xy_to_rc(*a_xy)
    rb, cb = bev.xy_to_rc(*b_xy)
    # shift so cell (i, j) covers [i, i+1) x [j, j+1)
    clipped = _clip_unit_box(float(ra) + 0.5, float(ca) + 0.5,
                             float(rb) + 0.5, float(cb) + 0.5,
                             float(bev.height), float(bev.width))
    if clipped is None:
        return []
    u0, v0, u1, v1 = clipped
    h, w = bev.height, bev.width
    iu = min(int(np.floor(u0)), h - 1)
    iv = min(int(np.floor(v0)), w - 1)
    eu = min(int(np.floor(u1)), h - 1)
    ev = min(int(np.floor(v1)), w - 1)
    cells = [(iu, iv)]
    du, dv = u1 - u0, v1 - v0
    su = 1 if du > 0 else -1
    sv = 1 if dv > 0 else -1
    # parametric distance to the next gridline along each axis
    if du != 0.0:
        nxt_u = (iu + 1) if su > 0 else iu
        tmax_u = (nxt_u - u0) / du
        tdel_u = abs(1.0 / du)
    else:
        tmax_u, tdel_u = np.inf, np.inf
    if dv != 0.0:
        nxt_v = (iv + 1) if sv > 0 else iv
        tmax_v = (nxt_v - v0) / dv
        tdel_v = abs(1.0 / dv)
    else:
        tmax_v, tdel_v = np.inf, np.inf
    guard = 2 * (h + w) + 4
    while (iu, iv) != (eu, ev) and guard > 0:
        guard -= 1
        if tmax_u < tmax_v:
            iu += su
            tmax_u += tdel_u
        elif tmax_v < tmax_u:
            iv += sv
            tmax_v += tdel_v
        else:
            # exact corner: the segment touches both side cells
            if 0 <= iu + su < h:
                cells.append((iu + su, iv))
            if 0 <= iv + sv < w:
                cells.append((iu, iv + sv))
            iu += su
            iv += sv
            tmax_u += tdel_u
            tmax_v += tdel_v
        if not (0 <= iu < h and 0 <= iv < w):
            break
        cells.append((iu, iv))
    return cells


def polyline_cells(poly: Polyline, bev: BevConfig, thickness: int = 1) -> list:
    """Ordered, deduplicated raster footprint of a polyline.

    The supercover cells of each segment are dilated by the Chebyshev
    radius (thickness - 1) // 2 and clipped to the raster.  Order follows
    the first visit along the line, which keeps rasterization
    deterministic.
    """
    if thickness < 1 or thickness % 2 == 0:
        raise ValueError(f"thickness must be odd and >= 1, got {thickness}")
    radius = (thickness - 1) // 2
    seen = set()
    out = []
    for a, b in zip(poly.points[:-1], poly.points[1:]):
        for (r, c) in segment_cells(bev, a, b):
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < bev.height and 0 <= cc < bev.width and (rr, cc) not in seen:
                        seen.add((rr, cc))
                        out.append((rr, cc))
    return out


def polyline_equal(a: Polyline, b: Polyline) -> bool:
    return (
        a.class_name == b.class_name
        and a.confidence == b.confidence
        and a.points.shape == b.points.shape
        and np.array_equal(a.points, b.points)
    )


def map_equal(a: VectorMap, b: VectorMap) -> bool:
    return (
        a.bev == b.bev
        and len(a.elements) == len(b.elements)
        and all(polyline_equal(x, y) for x, y in zip(a.elements, b.elements))
    )
