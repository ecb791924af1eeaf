"""Post-processing from dense head outputs to a vectorized map.

Foreground cells are clustered into instances by density scanning over
their embeddings (L1 metric), thinned with an orientation-aware
non-maximum suppression, then connected into ordered polylines by walking
the predicted direction bins greedily from the most confident cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevConfig
from .maps import CLASS_NAMES, Polyline, VectorMap
from .numerics import Grid2D, pool2d


@dataclass
class ForegroundPoint:
    """One foreground raster cell with its confidence and embedding."""

    row: int
    col: int
    confidence: float
    embedding: np.ndarray


@dataclass
class VectorizeParams:
    fg_threshold: float = 0.5
    eps: float = 1.0
    min_pts: int = 3
    step: float = 4.0
    dist_threshold: float = 8.0

    def __post_init__(self):
        if not 0.0 < self.fg_threshold < 1.0:
            raise ValueError("fg_threshold must be in (0, 1)")
        if self.eps <= 0.0 or self.step <= 0.0 or self.dist_threshold <= 0.0:
            raise ValueError("eps, step and dist_threshold must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


def dbscan(points: list, eps: float, min_pts: int) -> list:
    """Density clustering over point embeddings under the L1 metric.

    Returns one cluster id per point, None for noise.  Points are scanned
    in list order and clusters expand breadth-first, so the labeling is
    deterministic.  A point is core when its eps-ball (inclusive, counting
    itself) holds at least min_pts points; border points join the first
    cluster that reaches them.
    """
    n = len(points)
    if n == 0:
        return []
    emb = np.stack([p.embedding for p in points])

    def neighbors(i):
        return np.nonzero(np.abs(emb - emb[i]).sum(axis=1) <= eps)[0]

    labels: list = [None] * n
    visited = [False] * n
    in_queue = [False] * n
    cluster = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        nbrs = neighbors(i)
        if len(nbrs) < min_pts:
            continue
        labels[i] = cluster
        queue = []
        for j in nbrs:
            j = int(j)
            if j != i and labels[j] is None and not in_queue[j]:
                in_queue[j] = True
                queue.append(j)
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            in_queue[j] = False
            if labels[j] is None:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            nbrs_j = neighbors(j)
            if len(nbrs_j) >= min_pts:
                for k in nbrs_j:
                    k = int(k)
                    if labels[k] is None and not in_queue[k]:
                        in_queue[k] = True
                        queue.append(k)
        cluster += 1
    return labels


def directional_nms(points: list, conf_grid: Grid2D) -> list:
    """Orientation-aware thinning of one cluster's raster cells.

    The cluster's confidences are placed on a zero raster shaped like
    conf_grid; two elongated average pools decide the local line
    orientation and the cell survives only if it is the maximum of a short
    max pool transverse to that orientation.  Ties keep the cell, so
    constant-confidence lines pass through untouched.
    """
    if not points:
        return []
    conf = np.zeros((conf_grid.height, conf_grid.width))
    for p in points:
        conf[p.row, p.col] = p.confidence
    grid = Grid2D(conf[:, :, None])
    along_cols = pool2d(grid, 5, 9, "avg").data[:, :, 0]
    along_rows = pool2d(grid, 9, 5, "avg").data[:, :, 0]
    thin_rows = pool2d(grid, 5, 1, "max").data[:, :, 0]
    thin_cols = pool2d(grid, 1, 5, "max").data[:, :, 0]
    keep = []
    for p in points:
        if along_cols[p.row, p.col] > along_rows[p.row, p.col]:
            peak = thin_rows[p.row, p.col]
        else:
            peak = thin_cols[p.row, p.col]
        if conf[p.row, p.col] == peak:
            keep.append(p)
    return keep


def _top_two_bins(scores: np.ndarray) -> list:
    order = np.argsort(-scores, kind="stable")
    return [int(order[0]), int(order[1])]


def _pick_unconsumed(p: ForegroundPoint, dir_soft: np.ndarray, consumed: set):
    for b in _top_two_bins(dir_soft[p.row, p.col]):
        if (p.row, p.col, b) not in consumed:
            return b
    return None


def connect_one_direction(start: ForegroundPoint, pool: list, dir_soft: np.ndarray,
                          consumed: set, step: float, dist_threshold: float) -> list:
    """Walk from start along predicted direction bins, consuming the pool.

    Each iteration steps ``step`` pixels along the current cell's best
    unconsumed bin, culls pool points that are closer to the current cell
    than step - 1 (they belong to the same stretch), then hops to the pool
    point nearest the stepped target.  The hop is rejected and the walk
    ends when that point is farther than dist_threshold from the current
    cell.  The pool and consumed set are shared with the caller so a
    second walk can continue from the same seed in the opposite
    direction.
    """
    n_dirs = dir_soft.shape[2]
    result = [start]
    p = start
    coords = np.array([[q.row, q.col] for q in pool], dtype=np.float64)
    while pool:
        b = _pick_unconsumed(p, dir_soft, consumed)
        if b is None:
            break
        consumed.add((p.row, p.col, b))
        theta = 2.0 * np.pi * b / n_dirs
        target = (p.row + step * np.cos(theta), p.col + step * np.sin(theta))
        from_p = np.hypot(coords[:, 0] - p.row, coords[:, 1] - p.col)
        keep = from_p >= step - 1.0
        if not keep.all():
            pool[:] = [q for q, k in zip(pool, keep) if k]
            coords = coords[keep]
        if not pool:
            break
        dists = np.hypot(coords[:, 0] - target[0], coords[:, 1] - target[1])
        qi = int(dists.argmin())
        q = pool[qi]
        if np.hypot(q.row - p.row, q.col - p.col) > dist_threshold:
            break
        pool.pop(qi)
        coords = np.delete(coords, qi, axis=0)
        result.append(q)
        back = (p.row - q.row, p.col - q.col)
        bins = _top_two_bins(dir_soft[q.row, q.col])
        angles = 2.0 * np.pi * np.asarray(bins) / n_dirs
        dots = np.cos(angles) * back[0] + np.sin(angles) * back[1]
        consumed.add((q.row, q.col, bins[int(dots.argmax())]))
        p = q
    return result


def connect_line(cluster: list, dir_soft: np.ndarray, bev: BevConfig,
                 step: float, dist_threshold: float):
    """Order one cluster's cells into a polyline via two opposite walks.

    The seed is the most confident cell (first in cluster order on ties);
    the two walks share the pool and the consumed-bin set, so the second
    leaves along the seed's other direction mode.  Returns None when fewer
    than two cells get connected.
    """
    if not cluster:
        return None
    confs = np.array([p.confidence for p in cluster])
    seed = cluster[int(confs.argmax())]
    pool = list(cluster)
    consumed: set = set()
    walk_fwd = connect_one_direction(seed, pool, dir_soft, consumed,
                                     step, dist_threshold)
    walk_bwd = connect_one_direction(seed, pool, dir_soft, consumed,
                                     step, dist_threshold)
    ordered = list(reversed(walk_bwd)) + walk_fwd[1:]
    cells = []
    for p in ordered:
        if cells and (p.row, p.col) == (cells[-1].row, cells[-1].col):
            continue
        cells.append(p)
    if len(cells) < 2:
        return None
    points = np.array([bev.cell_center(p.row, p.col) for p in cells])
    confidence = float(np.mean([p.confidence for p in cells]))
    return points, confidence


def vectorize(seg_softmax: Grid2D, embeddings: Grid2D, dir_softmax: Grid2D,
              bev: BevConfig, params: VectorizeParams | None = None) -> VectorMap:
    """Turn dense head outputs into a vectorized map.

    seg_softmax carries background in channel 0 and one channel per class;
    a cell is foreground for a class when its softmax exceeds
    params.fg_threshold.  Classes are processed in channel order and
    clusters in discovery order, so output element order is deterministic.
    """
    if params is None:
        params = VectorizeParams()
    h, w = seg_softmax.height, seg_softmax.width
    if seg_softmax.channels != len(CLASS_NAMES) + 1:
        raise ValueError(
            f"expected {len(CLASS_NAMES) + 1} segmentation channels, "
            f"got {seg_softmax.channels}"
        )
    for grid, name in ((embeddings, "embedding"), (dir_softmax, "direction")):
        if (grid.height, grid.width) != (h, w):
            raise ValueError(f"{name} grid does not match the segmentation raster")
    elements = []
    for ci, cname in enumerate(CLASS_NAMES):
        mask = seg_softmax.data[:, :, ci + 1] > params.fg_threshold
        rows, cols = np.nonzero(mask)
        points = [
            ForegroundPoint(int(r), int(c),
                            float(seg_softmax.data[r, c, ci + 1]),
                            embeddings.data[r, c])
            for r, c in zip(rows, cols)
        ]
        labels = dbscan(points, params.eps, params.min_pts)
        n_clusters = 1 + max((l for l in labels if l is not None), default=-1)
        conf_grid = Grid2D(seg_softmax.data[:, :, ci + 1])
        for k in range(n_clusters):
            cluster = [p for p, l in zip(points, labels) if l == k]
            cluster = directional_nms(cluster, conf_grid)
            made = connect_line(cluster, dir_softmax.data, bev,
                                params.step, params.dist_threshold)
            if made is None:
                continue
            pts, conf = made
            elements.append(Polyline(class_name=cname, points=pts, confidence=conf))
    return VectorMap(bev=bev, elements=elements)
