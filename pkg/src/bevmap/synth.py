"""Synthetic driving scenes: a curved two-way road with lane dividers,
boundaries and an occasional pedestrian crossing, plus a ground point
cloud with raised boundary curbs and per-camera semantic renders.

Everything is derived from a single integer seed, so datasets are
reproducible byte for byte.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bevnet import LabelPack, make_direction_labels
from .geometry import BevConfig, CameraModel, ipm_pixels_to_ground
from .io import (
    FormatError,
    bev_from_dict,
    bev_to_dict,
    read_grid,
    read_points,
    read_vector_map,
    rig_from_list,
    rig_to_list,
    write_grid,
    write_points,
    write_vector_map,
)
from .maps import (
    CLASS_NAMES,
    Polyline,
    VectorMap,
    _clip_unit_box,
    class_channel,
    polyline_cells,
    resolve_thickness,
)
from .numerics import Grid2D
from .pillars import PointCloud


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic scene; seed drives every random draw."""

    seed: int
    lane_count: int = 2
    lane_width: float = 3.5
    curvature_max: float = 0.02
    crossing_prob: float = 0.3
    point_density: float = 3.0
    boundary_bump: float = 0.2
    z_noise: float = 0.02
    lateral_jitter: float = 1.0
    heading_jitter: float = 0.15
    image_height: int = 48
    image_width: int = 64

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.lane_width <= 0.0:
            raise ValueError("lane_width must be positive")
        if self.curvature_max < 0.0 or self.crossing_prob < 0.0 or self.crossing_prob > 1.0:
            raise ValueError("curvature_max must be >= 0 and crossing_prob in [0, 1]")
        if self.image_height < 2 or self.image_width < 2:
            raise ValueError("camera raster must be at least 2x2")


@dataclass
class Scene:
    vm: VectorMap
    labels: LabelPack
    cams: dict
    points: PointCloud


def _camera_rotation(yaw: float, pitch_down: float) -> np.ndarray:
    """Extrinsic rotation for a camera at the given heading, pitched toward
    the ground.  Columns are the camera right / down / viewing axes in ego
    coordinates."""
    cp, sp = np.cos(pitch_down), np.sin(pitch_down)
    cyw, syw = np.cos(yaw), np.sin(yaw)
    view = np.array([cyw * cp, syw * cp, -sp])
    right = np.array([syw, -cyw, 0.0])
    down = np.cross(view, right)
    return np.column_stack([right, down, view])


def default_rig(spec: SceneSpec) -> list:
    """Front and rear cameras, slightly pitched down, matched to the spec's
    image raster.  Focal lengths scale with the raster so the field of
    view stays put when the resolution changes."""
    cx = (spec.image_width - 1) / 2.0
    cy = (spec.image_height - 1) / 2.0
    f = 0.625 * spec.image_width
    pitch = np.radians(8.0)
    return [
        CameraModel(fx=f, fy=f, cx=cx, cy=cy,
                    rotation=_camera_rotation(0.0, pitch),
                    translation=np.array([0.5, 0.0, 1.8]), name="front"),
        CameraModel(fx=f, fy=f, cx=cx, cy=cy,
                    rotation=_camera_rotation(np.pi, pitch),
                    translation=np.array([-0.5, 0.0, 1.8]), name="back"),
    ]


def clip_polyline_to_extent(points: np.ndarray, bev: BevConfig) -> list:
    """Split a polyline into the maximal runs inside the BEV extent.

    Segments are clipped against the extent rectangle; contiguous clipped
    segments merge into one run.  Runs shorter than two distinct points
    are dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    span_x = bev.x_max - bev.x_min
    span_y = bev.y_max - bev.y_min
    runs = []
    run: list = []

    def close():
        nonlocal run
        if len(run) >= 2:
            runs.append(np.array(run))
        run = []

    for a, b in zip(points[:-1], points[1:]):
        clip = _clip_unit_box(a[0] - bev.x_min, a[1] - bev.y_min,
                              b[0] - bev.x_min, b[1] - bev.y_min,
                              span_x, span_y)
        if clip is None:
            close()
            continue
        u0, v0, u1, v1 = clip
        pa = (u0 + bev.x_min, v0 + bev.y_min)
        pb = (u1 + bev.x_min, v1 + bev.y_min)
        if not run:
            run.append(pa)
        elif np.hypot(pa[0] - run[-1][0], pa[1] - run[-1][1]) > 1e-9:
            close()
            run.append(pa)
        if np.hypot(pb[0] - run[-1][0], pb[1] - run[-1][1]) > 1e-12:
            run.append(pb)
    close()
    return runs


def _arc(s: np.ndarray, heading: float, kappa: float, origin: np.ndarray):
    """Constant-curvature path: positions and headings at arc lengths s."""
    phi = heading + kappa * s
    if abs(kappa) < 1e-12:
        x = origin[0] + s * np.cos(heading)
        y = origin[1] + s * np.sin(heading)
    else:
        x = origin[0] + (np.sin(phi) - np.sin(heading)) / kappa
        y = origin[1] - (np.cos(phi) - np.cos(heading)) / kappa
    return np.column_stack([x, y]), phi


def _point_to_polyline_distance(xy: np.ndarray, lines: list) -> np.ndarray:
    """Distance from each query point to the nearest segment of any line."""
    best = np.full(len(xy), np.inf)
    for line in lines:
        pts = line.points
        for a, b in zip(pts[:-1], pts[1:]):
            d = b - a
            denom = float(d @ d)
            t = np.clip(((xy - a) @ d) / denom, 0.0, 1.0)
            proj = a + t[:, None] * d
            dist = np.hypot(xy[:, 0] - proj[:, 0], xy[:, 1] - proj[:, 1])
            best = np.minimum(best, dist)
    return best


def gen_scene(spec: SceneSpec, bev: BevConfig, rig: list | None = None,
              n_dirs: int = 36, step_px: float = 4.0, thickness=None) -> Scene:
    """Generate one scene: vector map, labels, camera renders, points.

    The road is a constant-curvature two-way carriageway with lane_count
    lanes per side: dividers at every interior lane edge (the centerline
    included) and boundaries at the outer edges, optionally crossed by a
    perpendicular pedestrian crossing.  All map elements are clipped to
    the BEV extent.
    """
    if rig is None:
        rig = default_rig(spec)
    if bev.height < 2 or bev.width < 2:
        raise ValueError("BEV extent is too small for a road scene")
    rng = np.random.default_rng(spec.seed)
    kappa = float(rng.uniform(0.0, spec.curvature_max))
    if rng.integers(0, 2):
        kappa = -kappa
    lateral = float(rng.uniform(-1.0, 1.0)) * spec.lateral_jitter
    heading = float(rng.uniform(-1.0, 1.0)) * spec.heading_jitter
    has_crossing = bool(rng.uniform() < spec.crossing_prob)
    crossing_s = float(rng.uniform(-5.0, 5.0))

    reach = bev.diagonal
    n_samples = int(np.ceil(2.0 * reach / 0.5)) + 1
    s = np.linspace(-reach, reach, n_samples)
    normal0 = np.array([-np.sin(heading), np.cos(heading)])
    center, phi = _arc(s, heading, kappa, lateral * normal0)
    normals = np.column_stack([-np.sin(phi), np.cos(phi)])

    half_width = spec.lane_count * spec.lane_width
    elements = []
    for k in range(-spec.lane_count, spec.lane_count + 1):
        cname = "boundary" if abs(k) == spec.lane_count else "divider"
        line = center + (k * spec.lane_width) * normals
        for run in clip_polyline_to_extent(line, bev):
            elements.append(Polyline(class_name=cname, points=run))
    if has_crossing:
        i = int(np.abs(s - crossing_s).argmin())
        a = center[i] - half_width * normals[i]
        b = center[i] + half_width * normals[i]
        for run in clip_polyline_to_extent(np.stack([a, b]), bev):
            elements.append(Polyline(class_name="ped_crossing", points=run))
    vm = VectorMap(bev=bev, elements=elements)
    labels = rasterize_vector_map(vm, bev, thickness=thickness,
                                  n_dirs=n_dirs, step_px=step_px)

    area = (bev.x_max - bev.x_min) * (bev.y_max - bev.y_min)
    n_pts = int(round(spec.point_density * area))
    xy = rng.uniform((bev.x_min, bev.y_min), (bev.x_max, bev.y_max), size=(n_pts, 2))
    boundaries = vm.by_class("boundary")
    if boundaries:
        d = _point_to_polyline_distance(xy, boundaries)
        z = spec.boundary_bump * np.maximum(0.0, 1.0 - d / 0.3)
    else:
        z = np.zeros(n_pts)
    z = z + rng.normal(0.0, spec.z_noise, n_pts)
    points = PointCloud(np.column_stack([xy, z]))

    cams = {}
    sem = labels.semantic.data
    n_ch = sem.shape[2]
    # 2x2 subpixel rays per pixel, averaged: thin far-away lines still leave
    # fractional evidence instead of aliasing away
    offsets = (-0.25, 0.25)
    for cam in rig:
        acc = np.zeros((spec.image_height * spec.image_width, n_ch))
        for dv in offsets:
            for du in offsets:
                vv, uu = np.meshgrid(
                    np.arange(spec.image_height, dtype=np.float64) + dv,
                    np.arange(spec.image_width, dtype=np.float64) + du,
                    indexing="ij")
                ground, valid = ipm_pixels_to_ground(cam, uu.ravel(), vv.ravel())
                img = np.zeros((spec.image_height * spec.image_width, n_ch))
                img[:, 0] = 1.0
                rows, cols = bev.xy_to_rc(ground[:, 0], ground[:, 1])
                ri = np.rint(rows).astype(np.int64)
                ci = np.rint(cols).astype(np.int64)
                ok = valid & (ri >= 0) & (ri < bev.height) & (ci >= 0) & (ci < bev.width)
                img[ok] = sem[ri[ok], ci[ok]]
                acc += img
        acc /= len(offsets) ** 2
        cams[cam.name] = Grid2D(acc.reshape(spec.image_height, spec.image_width, n_ch))
    return Scene(vm=vm, labels=labels, cams=cams, points=points)


def rasterize_vector_map(vm: VectorMap, bev: BevConfig, thickness=None,
                         n_dirs: int = 36, step_px: float = 4.0) -> LabelPack:
    """Rasterize a vector map into co-registered training labels.

    Elements are drawn in list order and later elements overwrite earlier
    ones, for semantics, instance ids and direction bins alike.  Instance
    id is the element's position in the map plus one.
    """
    h, w = bev.height, bev.width
    sem = np.zeros((h, w, len(CLASS_NAMES) + 1))
    sem[:, :, 0] = 1.0
    inst = np.zeros((h, w), dtype=np.int64)
    for idx, el in enumerate(vm.elements):
        cells = polyline_cells(el, bev, resolve_thickness(thickness, el.class_name))
        if not cells:
            warnings.warn(
                f"element {idx} ({el.class_name}) rasterizes to no cells",
                stacklevel=2,
            )
            continue
        rows = [c[0] for c in cells]
        cols = [c[1] for c in cells]
        sem[rows, cols, :] = 0.0
        sem[rows, cols, class_channel(el.class_name)] = 1.0
        inst[rows, cols] = idx + 1
    direction = make_direction_labels(vm, bev, n_dirs, step_px, thickness)
    return LabelPack(semantic=Grid2D(sem), instance=inst, direction=direction)


def ideal_grids(labels: LabelPack, delta_d: float = 3.0, embed_dim: int = 16):
    """Head outputs a perfect model would emit for the given labels.

    Segmentation softmax is the one-hot semantics; each instance id maps
    to a scaled embedding basis vector separated by 2 * delta_d under L1;
    the direction softmax puts 0.5 on each labeled bin.  Useful as a
    fixture for the vectorization stage.
    """
    ids = labels.instance
    top = int(ids.max()) if ids.size else 0
    if top > embed_dim:
        raise ValueError(f"{top} instances exceed embedding dimension {embed_dim}")
    emb = np.zeros((ids.shape[0], ids.shape[1], embed_dim))
    rows, cols = np.nonzero(ids > 0)
    emb[rows, cols, ids[rows, cols] - 1] = 2.0 * delta_d
    return labels.semantic.copy(), Grid2D(emb), Grid2D(labels.direction.data * 0.5)


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

DATASET_FORMAT = "bevmap-dataset-v1"


def _scene_dir(root: Path, index: int) -> Path:
    return root / f"scene_{index:05d}"


def save_scene(scene_dir, scene: Scene, meta: dict | None = None) -> None:
    out = Path(scene_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vector_map(out / "map.json", scene.vm)
    stacked = np.concatenate([
        scene.labels.semantic.data,
        scene.labels.instance[:, :, None].astype(np.float64),
        scene.labels.direction.data,
    ], axis=2)
    write_grid(out / "labels.bvg", Grid2D(stacked))
    for name, grid in scene.cams.items():
        write_grid(out / f"cam_{name}.bvg", grid)
    write_points(out / "points.bvp", scene.points)
    n_sem = scene.labels.semantic.channels
    n_dirs = scene.labels.direction.channels
    doc = {
        "bev": bev_to_dict(scene.vm.bev),
        "cameras": list(scene.cams),
        "n_dirs": n_dirs,
        "label_layout": {
            "semantic": [0, n_sem],
            "instance": [n_sem, n_sem + 1],
            "direction": [n_sem + 1, n_sem + 1 + n_dirs],
        },
    }
    if meta:
        doc.update(meta)
    (out / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_scene(scene_dir, rig: list, n_dirs: int) -> Scene:
    src = Path(scene_dir)
    vm = read_vector_map(src / "map.json")
    stacked = read_grid(src / "labels.bvg")
    n_sem = len(CLASS_NAMES) + 1
    want = n_sem + 1 + n_dirs
    if stacked.channels != want:
        raise FormatError(
            f"label grid has {stacked.channels} channels, expected {want}",
            src / "labels.bvg",
        )
    labels = LabelPack(
        semantic=Grid2D(stacked.data[:, :, :n_sem]),
        instance=np.rint(stacked.data[:, :, n_sem]).astype(np.int64),
        direction=Grid2D(stacked.data[:, :, n_sem + 1:]),
    )
    cams = {cam.name: read_grid(src / f"cam_{cam.name}.bvg") for cam in rig}
    points = read_points(src / "points.bvp")
    return Scene(vm=vm, labels=labels, cams=cams, points=points)


def generate_dataset(out_dir, n: int, base_spec: SceneSpec, bev: BevConfig,
                     rig: list | None = None, n_dirs: int = 36,
                     step_px: float = 4.0, thickness=None) -> None:
    """Write n scenes plus a manifest; scene i uses seed base_spec.seed + i."""
    if n < 1:
        raise ValueError("need at least one scene")
    if rig is None:
        rig = default_rig(base_spec)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        spec = dataclasses.replace(base_spec, seed=base_spec.seed + i)
        scene = gen_scene(spec, bev, rig, n_dirs=n_dirs, step_px=step_px,
                          thickness=thickness)
        save_scene(_scene_dir(root, i), scene, meta={"index": i, "seed": spec.seed})
    n_sem = len(CLASS_NAMES) + 1
    manifest = {
        "format": DATASET_FORMAT,
        "n": n,
        "seed": base_spec.seed,
        "bev": bev_to_dict(bev),
        "rig": rig_to_list(rig),
        "n_dirs": n_dirs,
        "step_px": step_px,
        "thickness": {name: resolve_thickness(thickness, name) for name in CLASS_NAMES},
        "image": [base_spec.image_height, base_spec.image_width],
        "classes": list(CLASS_NAMES),
        "label_layout": {
            "semantic": [0, n_sem],
            "instance": [n_sem, n_sem + 1],
            "direction": [n_sem + 1, n_sem + 1 + n_dirs],
        },
        "spec": {k: getattr(base_spec, k) for k in (
            "lane_count", "lane_width", "curvature_max", "crossing_prob",
            "point_density", "boundary_bump", "z_noise", "lateral_jitter",
            "heading_jitter",
        )},
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_manifest(dataset_dir) -> dict:
    root = Path(dataset_dir)
    path = root / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError("missing manifest.json", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
    if doc.get("format") != DATASET_FORMAT:
        raise FormatError("not a dataset manifest", path)
    doc["bev"] = bev_from_dict(doc["bev"], path)
    doc["rig"] = rig_from_list(doc["rig"], path)
    return doc


def load_dataset(dataset_dir):
    """Read a dataset directory back as (manifest, scenes)."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    scenes = [
        load_scene(_scene_dir(root, i), manifest["rig"], manifest["n_dirs"])
        for i in range(manifest["n"])
    ]
    return manifest, scenes
