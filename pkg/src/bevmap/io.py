"""File formats: binary grids (BVG1), binary point clouds (BVP1), the
vector-map JSON codec and rig/BEV config documents.

Grids and points are stored little-endian float32; in memory everything is
float64.  Parse failures raise FormatError carrying the file path and the
byte offset where parsing stopped, so the CLI can report them precisely.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import BevConfig, CameraModel
from .maps import CLASS_NAMES, Polyline, VectorMap
from .numerics import Grid2D

BVG_MAGIC = b"BVG1"
BVP_MAGIC = b"BVP1"
# refuse to allocate grids/clouds beyond ~1 GB from a 16-byte header
MAX_PAYLOAD_BYTES = 1 << 30


class FormatError(ValueError):
    """A malformed input file, with the byte offset where parsing failed."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = str(path) if path is not None else None
        self.offset = offset
        prefix = ""
        if self.path is not None:
            prefix += self.path
        if offset is not None:
            prefix += f" (byte {offset})"
        super().__init__(f"{prefix}: {message}" if prefix else message)


def grid_to_bytes(grid: Grid2D) -> bytes:
    head = BVG_MAGIC + struct.pack("<III", grid.height, grid.width, grid.channels)
    return head + np.ascontiguousarray(grid.data, dtype="<f4").tobytes()


def grid_from_bytes(data: bytes, path=None) -> Grid2D:
    if len(data) < 4 or data[:4] != BVG_MAGIC:
        raise FormatError("bad magic, expected BVG1", path, 0)
    if len(data) < 16:
        raise FormatError("truncated header", path, len(data))
    h, w, c = struct.unpack_from("<III", data, 4)
    if 4 * h * w * c > MAX_PAYLOAD_BYTES:
        raise FormatError(f"implausible dimensions {h}x{w}x{c}", path, 4)
    need = 16 + 4 * h * w * c
    if len(data) < need:
        raise FormatError(f"truncated payload, expected {need} bytes", path, len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after payload", path, need)
    vals = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=16)
    bad = np.nonzero(~np.isfinite(vals))[0]
    if len(bad):
        raise FormatError("non-finite grid value", path, 16 + 4 * int(bad[0]))
    return Grid2D(vals.astype(np.float64).reshape(h, w, c))


def write_grid(path, grid: Grid2D) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> Grid2D:
    return grid_from_bytes(Path(path).read_bytes(), path)


def points_to_bytes(points) -> bytes:
    n, k = points.count, points.feat_dim
    head = BVP_MAGIC + struct.pack("<II", n, k)
    rows = np.concatenate([points.xyz, points.feats], axis=1)
    return head + np.ascontiguousarray(rows, dtype="<f4").tobytes()


def points_from_bytes(data: bytes, path=None):
    from .pillars import PointCloud

    if len(data) < 4 or data[:4] != BVP_MAGIC:
        raise FormatError("bad magic, expected BVP1", path, 0)
    if len(data) < 12:
        raise FormatError("truncated header", path, len(data))
    n, k = struct.unpack_from("<II", data, 4)
    if 4 * n * (3 + k) > MAX_PAYLOAD_BYTES:
        raise FormatError(f"implausible dimensions n={n} k={k}", path, 4)
    need = 12 + 4 * n * (3 + k)
    if len(data) < need:
        raise FormatError(f"truncated payload, expected {need} bytes", path, len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after payload", path, need)
    vals = np.frombuffer(data, dtype="<f4", count=n * (3 + k), offset=12)
    bad = np.nonzero(~np.isfinite(vals))[0]
    if len(bad):
        raise FormatError("non-finite point value", path, 12 + 4 * int(bad[0]))
    rows = vals.astype(np.float64).reshape(n, 3 + k)
    return PointCloud(xyz=rows[:, :3], feats=rows[:, 3:])


def write_points(path, points) -> None:
    Path(path).write_bytes(points_to_bytes(points))


def read_points(path):
    return points_from_bytes(Path(path).read_bytes(), path)


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("cannot serialize non-finite number")
    return format(float(x), ".6f")


def encode_vector_map(vm: VectorMap) -> str:
    """Canonical JSON text for a vector map; numbers carry 6 decimals.

    The encoding is byte-deterministic, and decode(encode(vm)) == vm for
    maps whose numbers are representable at that precision.  Polylines
    whose consecutive points collide after quantization are rejected.
    """
    bev = vm.bev
    bev_txt = (
        '{"x_min":%s,"x_max":%s,"y_min":%s,"y_max":%s,"pitch":%s}'
        % (_fmt(bev.x_min), _fmt(bev.x_max), _fmt(bev.y_min), _fmt(bev.y_max), _fmt(bev.pitch))
    )
    elems = []
    for el in vm.elements:
        if el.class_name not in CLASS_NAMES:
            raise ValueError(f"unknown class {el.class_name!r}")
        pts = [(_fmt(x), _fmt(y)) for x, y in el.points]
        for (ax, ay), (bx, by) in zip(pts, pts[1:]):
            if ax == bx and ay == by:
                raise ValueError(
                    f"consecutive points of a {el.class_name} element collide "
                    "after 6-decimal quantization"
                )
        pts_txt = ",".join("[%s,%s]" % p for p in pts)
        elems.append(
            '{"class":"%s","confidence":%s,"points":[%s]}'
            % (el.class_name, _fmt(el.confidence), pts_txt)
        )
    return '{"bev":%s,"elements":[%s]}' % (bev_txt, ",".join(elems))


def write_vector_map(path, vm: VectorMap) -> None:
    Path(path).write_text(encode_vector_map(vm) + "\n")


def _require(cond: bool, message: str, path):
    if not cond:
        raise FormatError(message, path)


def decode_vector_map(text: str, path=None) -> VectorMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
    _require(isinstance(doc, dict), "document must be an object", path)
    _require(set(doc) == {"bev", "elements"}, "document keys must be {bev, elements}", path)
    bev_doc = doc["bev"]
    _require(isinstance(bev_doc, dict), "bev must be an object", path)
    keys = ("x_min", "x_max", "y_min", "y_max", "pitch")
    _require(set(bev_doc) == set(keys), f"bev keys must be {set(keys)}", path)
    for key in keys:
        _require(isinstance(bev_doc[key], (int, float)), f"bev.{key} must be a number", path)
    try:
        bev = BevConfig(**{k: float(bev_doc[k]) for k in keys})
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc
    _require(isinstance(doc["elements"], list), "elements must be a list", path)
    elements = []
    for i, el in enumerate(doc["elements"]):
        where = f"elements[{i}]"
        _require(isinstance(el, dict), f"{where} must be an object", path)
        _require(
            set(el) == {"class", "confidence", "points"},
            f"{where} keys must be {{class, confidence, points}}", path,
        )
        _require(el["class"] in CLASS_NAMES, f"{where}: unknown class {el['class']!r}", path)
        _require(isinstance(el["confidence"], (int, float)), f"{where}: bad confidence", path)
        pts = el["points"]
        _require(isinstance(pts, list) and len(pts) >= 2, f"{where}: needs >= 2 points", path)
        for p in pts:
            _require(
                isinstance(p, list) and len(p) == 2
                and all(isinstance(v, (int, float)) for v in p),
                f"{where}: points must be [x, y] numbers", path,
            )
        try:
            elements.append(
                Polyline(el["class"], np.asarray(pts, dtype=np.float64),
                         float(el["confidence"]))
            )
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}", path) from exc
    return VectorMap(bev=bev, elements=elements)


def read_vector_map(path) -> VectorMap:
    return decode_vector_map(Path(path).read_text(), path)


def bev_to_dict(bev: BevConfig) -> dict:
    return {"x_min": bev.x_min, "x_max": bev.x_max, "y_min": bev.y_min,
            "y_max": bev.y_max, "pitch": bev.pitch}


def bev_from_dict(doc: dict, path=None) -> BevConfig:
    keys = ("x_min", "x_max", "y_min", "y_max", "pitch")
    _require(isinstance(doc, dict) and set(keys) <= set(doc),
             f"BEV config needs keys {set(keys)}", path)
    try:
        return BevConfig(**{k: float(doc[k]) for k in keys})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad BEV config: {exc}", path) from exc


def load_bev(path) -> BevConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
    return bev_from_dict(doc, path)


def save_bev(path, bev: BevConfig) -> None:
    Path(path).write_text(json.dumps(bev_to_dict(bev), indent=2, sort_keys=True) + "\n")


def rig_to_list(rig: list) -> list:
    return [
        {
            "name": cam.name,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": [float(v) for v in cam.rotation.reshape(-1)],
            "translation": [float(v) for v in cam.translation],
        }
        for cam in rig
    ]


def rig_from_list(doc, path=None) -> list:
    _require(isinstance(doc, list) and len(doc) >= 1, "rig must be a nonempty list", path)
    rig = []
    for i, cd in enumerate(doc):
        where = f"camera[{i}]"
        _require(isinstance(cd, dict), f"{where} must be an object", path)
        needed = {"name", "fx", "fy", "cx", "cy", "rotation", "translation"}
        _require(needed <= set(cd), f"{where} needs keys {needed}", path)
        rot = cd["rotation"]
        tra = cd["translation"]
        _require(isinstance(rot, list) and len(rot) == 9, f"{where}: rotation needs 9 numbers", path)
        _require(isinstance(tra, list) and len(tra) == 3, f"{where}: translation needs 3 numbers", path)
        try:
            rig.append(CameraModel(
                fx=float(cd["fx"]), fy=float(cd["fy"]),
                cx=float(cd["cx"]), cy=float(cd["cy"]),
                rotation=np.asarray(rot, dtype=np.float64).reshape(3, 3),
                translation=np.asarray(tra, dtype=np.float64),
                name=str(cd["name"]),
            ))
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}", path) from exc
    names = [cam.name for cam in rig]
    _require(len(set(names)) == len(names), "camera names must be unique", path)
    return rig


def load_rig(path) -> list:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
    return rig_from_list(doc, path)


def save_rig(path, rig: list) -> None:
    Path(path).write_text(json.dumps(rig_to_list(rig), indent=2, sort_keys=True) + "\n")


def render_map_svg(vm: VectorMap, scale: float = 20.0) -> str:
    """A small deterministic SVG overlay of the map in BEV coordinates.

    Forward (+x) points up, left (+y) points left, matching how the BEV
    rasters are displayed.
    """
    colors = {"divider": "#1f77b4", "ped_crossing": "#2ca02c", "boundary": "#d62728"}
    bev = vm.bev
    width = (bev.y_max - bev.y_min) * scale
    height = (bev.x_max - bev.x_min) * scale

    def to_svg(x, y):
        return (bev.y_max - y) * scale, (bev.x_max - x) * scale

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%.1f" height="%.1f" '
        'viewBox="0 0 %.1f %.1f">' % (width, height, width, height),
        '<rect x="0" y="0" width="%.1f" height="%.1f" fill="#ffffff" '
        'stroke="#888888"/>' % (width, height),
    ]
    for el in vm.elements:
        pts = " ".join("%.2f,%.2f" % to_svg(x, y) for x, y in el.points)
        parts.append(
            '<polyline points="%s" fill="none" stroke="%s" stroke-width="2" '
            'stroke-opacity="%.2f"/>' % (pts, colors[el.class_name], min(1.0, max(0.1, el.confidence)))
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
