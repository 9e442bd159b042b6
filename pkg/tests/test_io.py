"""File formats: PLY scenes, PNG/PPM images, camera JSON, dataset layout."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from splatforge import (
    Camera,
    Image,
    InvalidInputError,
    ParseError,
    read_cameras,
    read_dataset,
    read_image,
    read_ply,
    write_cameras,
    write_image,
    write_ply,
)
from splatforge.io import (
    decode_png,
    encode_png,
    read_camera_json,
    write_camera_json,
)
from splatforge.scene import quantize_array
from splatforge.synth import orbit_cameras, random_scene


@pytest.fixture
def scene():
    return random_scene(12, seed=7, bounds=0.8)


@pytest.fixture
def camera():
    return Camera(position=[0.1, -0.4, -2.5],
                  orientation=np.eye(3),
                  fov_x=math.radians(60), fov_y=math.radians(45),
                  width=48, height=36, near=0.05, far=50.0)


class TestPly:
    def test_round_trip_exact_at_float32(self, scene, tmp_path):
        path = tmp_path / "scene.ply"
        write_ply(scene, path)
        back = read_ply(path)
        assert len(back) == len(scene)
        for field in ("positions", "log_scales", "rotations",
                      "opacity_logits", "colors"):
            assert np.array_equal(
                getattr(back, field),
                getattr(scene, field).astype(np.float32).astype(np.float64))

    def test_byte_deterministic(self, scene, tmp_path):
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        write_ply(scene, a)
        write_ply(scene, b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_scene_round_trip(self, tmp_path):
        from splatforge import Scene
        path = tmp_path / "empty.ply"
        write_ply(Scene.empty(), path)
        assert len(read_ply(path)) == 0

    def test_shuffled_property_order(self, scene, tmp_path):
        path = tmp_path / "scene.ply"
        write_ply(scene, path)
        raw = path.read_bytes()
        header_end = raw.find(b"end_header\n") + len(b"end_header\n")
        header = raw[:header_end].decode("ascii").splitlines()
        props = [ln for ln in header if ln.startswith("property")]
        other = [ln for ln in header if not ln.startswith("property")]
        reordered = other[:-1] + props[::-1] + other[-1:]
        table = np.frombuffer(raw[header_end:], dtype="<f4").reshape(
            len(scene), len(props))
        shuffled = tmp_path / "shuffled.ply"
        with open(shuffled, "wb") as f:
            f.write(("\n".join(reordered) + "\n").encode("ascii"))
            f.write(np.ascontiguousarray(table[:, ::-1]).tobytes())
        back = read_ply(shuffled)
        assert np.array_equal(
            back.positions,
            scene.positions.astype(np.float32).astype(np.float64))

    def test_missing_property_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"ply\nformat binary_little_endian 1.0\n"
                         b"element vertex 0\nproperty float x\nend_header\n")
        with pytest.raises(ParseError, match="missing vertex properties"):
            read_ply(path)

    def test_truncated_body_rejected(self, scene, tmp_path):
        path = tmp_path / "scene.ply"
        write_ply(scene, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ParseError, match="truncated"):
            read_ply(path)

    def test_not_a_ply_rejected(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_bytes(b"hello world\nend_header\n")
        with pytest.raises(ParseError, match="not a PLY"):
            read_ply(path)

    def test_ascii_format_rejected(self, tmp_path):
        path = tmp_path / "ascii.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\n"
                         b"end_header\n")
        with pytest.raises(ParseError, match="binary_little_endian"):
            read_ply(path)


class TestImages:
    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_uint8_round_trip(self, ext, tmp_path, rng):
        px = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
        path = tmp_path / f"im{ext}"
        write_image(Image(px), path)
        back = read_image(path)
        assert back.quantized
        assert np.array_equal(back.pixels, px)

    def test_float_image_is_quantized_on_write(self, tmp_path, rng):
        px = rng.uniform(0, 1, (6, 6, 3))
        path = tmp_path / "im.png"
        write_image(Image(px), path)
        assert np.array_equal(read_image(path).pixels, quantize_array(px))

    def test_bare_array_accepted(self, tmp_path):
        path = tmp_path / "im.ppm"
        write_image(np.full((2, 2, 3), 0.5), path)
        assert read_image(path).pixels[0, 0, 0] == 128

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(InvalidInputError, match="extension"):
            write_image(np.zeros((2, 2, 3)), tmp_path / "im.jpg")
        with pytest.raises(InvalidInputError, match="extension"):
            read_image(tmp_path / "im.tiff")

    def test_ppm_header_comments(self, tmp_path):
        body = bytes(range(12))
        path = tmp_path / "im.ppm"
        path.write_bytes(b"P6\n# a comment\n2 2\n# another\n255\n" + body)
        im = read_image(path)
        assert im.pixels.shape == (2, 2, 3)
        assert np.array_equal(im.pixels.ravel(), np.frombuffer(body, np.uint8))

    def test_ppm_truncation_and_magic(self, tmp_path):
        path = tmp_path / "im.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x01")
        with pytest.raises(ParseError, match="truncated"):
            read_image(path)
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(ParseError, match="P6"):
            read_image(path)

    def test_png_codec_round_trip(self, rng):
        px = rng.integers(0, 256, (5, 8, 3), dtype=np.uint8)
        assert np.array_equal(decode_png(encode_png(Image(px))).pixels, px)

    def test_decode_garbage_rejected(self):
        with pytest.raises(ParseError, match="invalid PNG"):
            decode_png(b"not a png at all")


class TestCameraJson:
    def test_round_trip(self, camera, tmp_path):
        path = tmp_path / "cam.json"
        write_camera_json(camera, path)
        back = read_camera_json(path)
        assert np.array_equal(back.position, camera.position)
        assert np.array_equal(back.orientation, camera.orientation)
        assert (back.fov_x, back.fov_y) == (camera.fov_x, camera.fov_y)
        assert (back.width, back.height) == (camera.width, camera.height)
        assert (back.near, back.far) == (camera.near, camera.far)

    def test_clip_planes_default_when_absent(self, camera, tmp_path):
        path = tmp_path / "cam.json"
        write_camera_json(camera, path)
        doc = json.loads(path.read_text())
        del doc["near"], doc["far"]
        path.write_text(json.dumps(doc))
        back = read_camera_json(path)
        assert (back.near, back.far) == (0.01, 100.0)

    def test_missing_field_reported(self, camera, tmp_path):
        path = tmp_path / "cam.json"
        write_camera_json(camera, path)
        doc = json.loads(path.read_text())
        del doc["fov_x"]
        path.write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="fov_x"):
            read_camera_json(path)

    def test_malformed_json_carries_offset(self, tmp_path):
        path = tmp_path / "cam.json"
        path.write_text('{"position": [1, 2, }')
        with pytest.raises(ParseError, match="offset"):
            read_camera_json(path)


class TestDatasetLayout:
    def write_views(self, directory, cams, ext=".png"):
        for i in range(len(cams)):
            write_image(np.full((4, 4, 3), i / 8), directory / f"view_{i:04d}{ext}")

    def test_cameras_round_trip_sorted(self, tmp_path):
        cams = orbit_cameras(5, seed=2, width=16, height=16)
        paths = write_cameras(cams, tmp_path / "ds")
        assert [p.split("/")[-1] for p in paths] == \
            [f"cam_{i:04d}.json" for i in range(5)]
        back = read_cameras(tmp_path / "ds")
        assert len(back) == 5
        for a, b in zip(back, cams):
            assert np.array_equal(a.position, b.position)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InvalidInputError, match="not found"):
            read_cameras(tmp_path / "nope")

    def test_empty_directory(self, tmp_path):
        (tmp_path / "ds").mkdir()
        with pytest.raises(InvalidInputError, match="no cam_"):
            read_cameras(tmp_path / "ds")

    def test_dataset_pairs_by_suffix(self, tmp_path):
        cams = orbit_cameras(3, seed=4, width=4, height=4)
        write_cameras(cams, tmp_path)
        self.write_views(tmp_path, cams)
        pairs = read_dataset(tmp_path)
        assert len(pairs) == 3
        for i, (cam, image) in enumerate(pairs):
            assert np.array_equal(cam.position, cams[i].position)
            assert image.pixels[0, 0, 0] == quantize_array(
                np.array([i / 8]))[0]

    def test_ppm_fallback(self, tmp_path):
        cams = orbit_cameras(2, seed=4, width=4, height=4)
        write_cameras(cams, tmp_path)
        self.write_views(tmp_path, cams, ext=".ppm")
        assert len(read_dataset(tmp_path)) == 2

    def test_missing_view_names_expected_path(self, tmp_path):
        cams = orbit_cameras(2, seed=4, width=4, height=4)
        write_cameras(cams, tmp_path)
        self.write_views(tmp_path, cams[:1])
        with pytest.raises(InvalidInputError,
                           match="cam_0001.json.*view_0001.png"):
            read_dataset(tmp_path)
