"""Binary and JSON codecs: round trips, canonical bytes, rejection paths."""
import json

import numpy as np
import pytest

from bevmap.geometry import BevConfig, CameraModel
from bevmap.io import (
    FormatError,
    bev_from_dict,
    bev_to_dict,
    decode_vector_map,
    encode_vector_map,
    grid_from_bytes,
    grid_to_bytes,
    load_bev,
    load_rig,
    points_from_bytes,
    points_to_bytes,
    read_grid,
    read_points,
    read_vector_map,
    render_map_svg,
    rig_from_list,
    rig_to_list,
    save_bev,
    save_rig,
    write_grid,
    write_points,
    write_vector_map,
)
from bevmap.maps import Polyline, VectorMap, map_equal
from bevmap.numerics import Grid2D
from bevmap.pillars import PointCloud


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestGridCodec:
    def test_round_trip_preserves_f32_values(self):
        rng = np.random.default_rng(0)
        g = Grid2D(_f32(rng.normal(size=(5, 7, 3))))
        back = grid_from_bytes(grid_to_bytes(g))
        assert back.data.shape == (5, 7, 3)
        assert np.array_equal(back.data, g.data)

    def test_file_round_trip(self, tmp_path):
        g = Grid2D(_f32(np.arange(24).reshape(2, 3, 4)))
        p = tmp_path / "g.bvg"
        write_grid(p, g)
        assert np.array_equal(read_grid(p).data, g.data)

    def test_bad_magic_rejected_at_offset_zero(self):
        with pytest.raises(FormatError) as err:
            grid_from_bytes(b"XXXX" + b"\x00" * 20)
        assert err.value.offset == 0

    def test_every_truncation_rejected(self):
        g = Grid2D(_f32(np.random.default_rng(1).normal(size=(3, 4, 2))))
        blob = grid_to_bytes(g)
        for cut in range(len(blob)):
            with pytest.raises(FormatError):
                grid_from_bytes(blob[:cut])

    def test_trailing_bytes_rejected(self):
        blob = grid_to_bytes(Grid2D(np.zeros((2, 2, 1))))
        with pytest.raises(FormatError, match="trailing"):
            grid_from_bytes(blob + b"\x00")

    def test_implausible_dimensions_rejected(self):
        import struct
        head = b"BVG1" + struct.pack("<III", 2 ** 20, 2 ** 20, 4)
        with pytest.raises(FormatError, match="implausible"):
            grid_from_bytes(head)

    def test_nonfinite_payload_rejected_with_offset(self):
        g = Grid2D(np.ones((1, 3, 1)))
        blob = bytearray(grid_to_bytes(g))
        blob[16 + 4:16 + 8] = np.array([np.inf], dtype="<f4").tobytes()
        with pytest.raises(FormatError) as err:
            grid_from_bytes(bytes(blob))
        assert err.value.offset == 20


class TestPointsCodec:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        pc = PointCloud(_f32(rng.normal(size=(11, 3))), _f32(rng.normal(size=(11, 2))))
        back = points_from_bytes(points_to_bytes(pc))
        assert np.array_equal(back.xyz, pc.xyz)
        assert np.array_equal(back.feats, pc.feats)

    def test_file_round_trip_empty_cloud(self, tmp_path):
        p = tmp_path / "pts.bvp"
        write_points(p, PointCloud(np.zeros((0, 3))))
        back = read_points(p)
        assert back.count == 0

    def test_truncations_rejected(self):
        pc = PointCloud(_f32(np.random.default_rng(3).normal(size=(4, 3))))
        blob = points_to_bytes(pc)
        for cut in range(len(blob)):
            with pytest.raises(FormatError):
                points_from_bytes(blob[:cut])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            points_from_bytes(b"BVG1" + b"\x00" * 16)


def _sample_map():
    bev = BevConfig(-6.0, 6.0, -3.0, 3.0, 0.5)
    return VectorMap(bev, [
        Polyline("divider", [[-5.0, 0.0], [5.0, 0.25]], 0.875),
        Polyline("ped_crossing", [[0.0, -2.0], [0.0, 2.0]], 0.5),
        Polyline("boundary", [[-5.0, -2.5], [0.0, -2.5], [5.0, -2.0]], 1.0),
    ])


class TestVectorMapCodec:
    def test_round_trip(self):
        vm = _sample_map()
        back = decode_vector_map(encode_vector_map(vm))
        assert map_equal(back, vm)

    def test_encoding_is_byte_stable(self):
        vm = _sample_map()
        a = encode_vector_map(vm)
        b = encode_vector_map(decode_vector_map(a))
        assert a == b

    def test_numbers_carry_six_decimals(self):
        txt = encode_vector_map(_sample_map())
        assert '"confidence":0.875000' in txt
        assert "[-5.000000,0.000000]" in txt

    def test_unknown_class_rejected(self):
        txt = encode_vector_map(_sample_map()).replace("ped_crossing", "crosswalk")
        with pytest.raises(FormatError, match="unknown class"):
            decode_vector_map(txt)

    def test_short_polyline_rejected(self):
        doc = json.loads(encode_vector_map(_sample_map()))
        doc["elements"][0]["points"] = [[0.0, 0.0]]
        with pytest.raises(FormatError, match="2 points"):
            decode_vector_map(json.dumps(doc))

    def test_extra_keys_rejected(self):
        doc = json.loads(encode_vector_map(_sample_map()))
        doc["version"] = 2
        with pytest.raises(FormatError):
            decode_vector_map(json.dumps(doc))

    def test_quantization_collision_rejected(self):
        bev = BevConfig(-1.0, 1.0, -1.0, 1.0, 0.5)
        vm = VectorMap(bev, [Polyline("divider", [[0.0, 0.0], [1e-9, 0.0]])])
        with pytest.raises(ValueError, match="quantization"):
            encode_vector_map(vm)

    def test_invalid_json_reports_offset(self):
        with pytest.raises(FormatError) as err:
            decode_vector_map('{"bev": ')
        assert err.value.offset is not None

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "map.json"
        vm = _sample_map()
        write_vector_map(p, vm)
        assert map_equal(read_vector_map(p), vm)

    def test_random_maps_round_trip(self):
        rng = np.random.default_rng(4)
        bev = BevConfig(-10.0, 10.0, -10.0, 10.0, 0.25)
        for _ in range(25):
            elems = []
            for _ in range(rng.integers(1, 6)):
                n = int(rng.integers(2, 8))
                pts = np.round(rng.uniform(-9, 9, size=(n, 2)), 4)
                while np.any(np.all(pts[1:] == pts[:-1], axis=1)):
                    pts = np.round(rng.uniform(-9, 9, size=(n, 2)), 4)
                name = ["divider", "ped_crossing", "boundary"][int(rng.integers(3))]
                elems.append(Polyline(name, pts, float(np.round(rng.uniform(), 4))))
            vm = VectorMap(bev, elems)
            assert map_equal(decode_vector_map(encode_vector_map(vm)), vm)


class TestConfigDocs:
    def test_bev_json_round_trip(self, tmp_path):
        bev = BevConfig(-15.0, 15.0, -10.0, 10.0, 0.5)
        p = tmp_path / "bev.json"
        save_bev(p, bev)
        assert load_bev(p) == bev
        assert bev_from_dict(bev_to_dict(bev)) == bev

    def test_bev_missing_key_rejected(self):
        with pytest.raises(FormatError):
            bev_from_dict({"x_min": 0.0, "x_max": 1.0})

    def test_rig_json_round_trip(self, tmp_path):
        rig = [
            CameraModel(100.0, 110.0, 32.0, 24.0, np.eye(3), np.array([1.0, 0.0, 1.5]), "front"),
            CameraModel(90.0, 90.0, 32.0, 24.0, np.eye(3), np.array([-1.0, 0.0, 1.5]), "back"),
        ]
        p = tmp_path / "rig.json"
        save_rig(p, rig)
        back = load_rig(p)
        assert [c.name for c in back] == ["front", "back"]
        for a, b in zip(rig, back):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)

    def test_rig_duplicate_names_rejected(self):
        doc = rig_to_list([CameraModel(1.0, 1.0, 0.0, 0.0, np.eye(3), np.zeros(3), "a")])
        with pytest.raises(FormatError, match="unique"):
            rig_from_list(doc + doc)

    def test_rig_bad_rotation_rejected(self):
        doc = rig_to_list([CameraModel(1.0, 1.0, 0.0, 0.0, np.eye(3), np.zeros(3), "a")])
        doc[0]["rotation"] = [2.0] + doc[0]["rotation"][1:]
        with pytest.raises(FormatError, match="orthonormal"):
            rig_from_list(doc)


class TestSvg:
    def test_svg_is_deterministic_and_lists_elements(self):
        vm = _sample_map()
        a = render_map_svg(vm)
        b = render_map_svg(vm)
        assert a == b
        assert a.count("<polyline") == 3
        assert a.startswith("<svg")
