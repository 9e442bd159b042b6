"""File formats: binary PLY scenes, PNG/PPM images, JSON cameras.

The PLY layout is one vertex element per Gaussian with float32 properties
in order: x, y, z, opacity (logit), scale_0..2 (log), rot_0..3 (w,x,y,z),
f_dc_0..2 (color). Writers are byte-deterministic: the same scene always
produces the same file.
"""

from __future__ import annotations

import json
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .scene import Camera, Image, InvalidInputError, Scene

PLY_PROPERTIES = [
    "x", "y", "z",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
]


class ParseError(ValueError):
    """Malformed file; message carries the byte offset where parsing failed."""


def write_ply(scene: Scene, path) -> None:
    """Write a scene as binary little-endian PLY."""
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = np.empty((n, len(PLY_PROPERTIES)), dtype="<f4")
    data[:, 0:3] = scene.positions
    data[:, 3] = scene.opacity_logits
    data[:, 4:7] = scene.log_scales
    data[:, 7:11] = scene.rotations
    data[:, 11:14] = scene.colors
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def read_ply(path, background=(0.0, 0.0, 0.0)) -> Scene:
    """Read a binary little-endian PLY scene.

    Properties may appear in any order but all fourteen must be present
    as float32. The background color is not stored in the file and is
    supplied by the caller.
    """
    raw = Path(path).read_bytes()
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if end < 0:
        raise ParseError("missing end_header (offset 0)")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise ParseError("not a PLY file (offset 0)")
    fmt = next((ln for ln in header_lines if ln.startswith("format ")), "")
    if "binary_little_endian" not in fmt:
        raise ParseError("only binary_little_endian PLY is supported (offset 4)")
    n = None
    props: list[str] = []
    in_vertex = False
    for ln in header_lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
            in_vertex = True
        elif parts and parts[0] == "element":
            in_vertex = False
        elif in_vertex and parts and parts[0] == "property":
            if parts[1] != "float":
                raise ParseError(f"vertex property {parts[-1]!r} is not float")
            props.append(parts[2])
    if n is None:
        raise ParseError("no vertex element in header")
    missing = [p for p in PLY_PROPERTIES if p not in props]
    if missing:
        raise ParseError(f"missing vertex properties: {missing}")
    body_offset = end + len(end_marker)
    expected = n * len(props) * 4
    body = raw[body_offset:body_offset + expected]
    if len(body) < expected:
        raise ParseError(f"truncated vertex data (offset {body_offset + len(body)})")
    table = np.frombuffer(body, dtype="<f4").reshape(n, len(props)).astype(np.float64)
    col = {name: table[:, i] for i, name in enumerate(props)}
    return Scene(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=1),
        log_scales=np.stack([col[f"scale_{i}"] for i in range(3)], axis=1),
        rotations=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1),
        opacity_logits=col["opacity"],
        colors=np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1),
        background=np.asarray(background, dtype=np.float64),
    )


def _as_quantized_pixels(image) -> np.ndarray:
    from .scene import quantize_array

    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    if px.dtype != np.uint8:
        px = quantize_array(px)
    return px


def write_image(image, path) -> None:
    """Write an image as PNG or PPM (P6), chosen by file extension.

    Float images are quantized first.
    """
    px = _as_quantized_pixels(image)
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        h, w = px.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(px.tobytes())
    elif suffix == ".png":
        PILImage.fromarray(px, mode="RGB").save(path, format="PNG")
    else:
        raise InvalidInputError(f"unsupported image extension {suffix!r}")


def read_image(path) -> Image:
    """Read a PNG or PPM image as a quantized Image."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        raw = Path(path).read_bytes()
        fields = []
        pos = 0
        # P6 header: magic, width, height, maxval, separated by whitespace/comments
        while len(fields) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if pos < len(raw) and raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ParseError(f"truncated PPM header (offset {pos})")
            fields.append(raw[start:pos])
        if fields[0] != b"P6":
            raise ParseError("not a P6 PPM (offset 0)")
        w, h, maxval = (int(x) for x in fields[1:])
        if maxval != 255:
            raise ParseError("only maxval 255 PPM is supported")
        pos += 1  # single whitespace after maxval
        body = raw[pos:pos + w * h * 3]
        if len(body) < w * h * 3:
            raise ParseError(f"truncated PPM data (offset {pos + len(body)})")
        return Image(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())
    if suffix == ".png":
        with PILImage.open(path) as img:
            return Image(np.asarray(img.convert("RGB"), dtype=np.uint8))
    raise InvalidInputError(f"unsupported image extension {suffix!r}")


def encode_png(image) -> bytes:
    """PNG-encode an image (quantizing floats) to bytes."""
    px = _as_quantized_pixels(image)
    buf = BytesIO()
    PILImage.fromarray(px, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> Image:
    """Decode PNG bytes to a quantized Image."""
    try:
        with PILImage.open(BytesIO(data)) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ParseError(f"invalid PNG data: {exc}") from exc
    return Image(pixels=px)


def write_camera_json(cam: Camera, path) -> None:
    doc = {
        "position": [float(v) for v in cam.position],
        "orientation": [float(v) for v in cam.orientation.reshape(-1)],
        "fov_x": cam.fov_x,
        "fov_y": cam.fov_y,
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_camera_json(path) -> Camera:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid camera JSON (offset {e.pos}): {e.msg}") from e
    try:
        return Camera(
            position=np.array(doc["position"], dtype=np.float64),
            orientation=np.array(doc["orientation"], dtype=np.float64).reshape(3, 3),
            fov_x=doc["fov_x"],
            fov_y=doc["fov_y"],
            width=doc["width"],
            height=doc["height"],
            near=doc.get("near", 0.01),
            far=doc.get("far", 100.0),
        )
    except KeyError as e:
        raise ParseError(f"camera JSON missing field {e.args[0]!r}") from e


def write_cameras(cams, directory) -> list[str]:
    """Write cam_NNNN.json files into the directory; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cam in enumerate(cams):
        path = directory / f"cam_{i:04d}.json"
        write_camera_json(cam, path)
        paths.append(str(path))
    return paths


def read_cameras(directory) -> list[Camera]:
    """Read every cam_*.json in the directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"camera directory not found: {directory}")
    paths = sorted(directory.glob("cam_*.json"))
    if not paths:
        raise InvalidInputError(f"no cam_*.json files in {directory}")
    return [read_camera_json(p) for p in paths]


def read_dataset(directory) -> list[tuple[Camera, Image]]:
    """Pair cam_NNNN.json with view_NNNN.png (or .ppm) by shared suffix."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"dataset directory not found: {directory}")
    cam_paths = sorted(directory.glob("cam_*.json"))
    if not cam_paths:
        raise InvalidInputError(f"no cam_*.json files in {directory}")
    pairs = []
    for cam_path in cam_paths:
        suffix = cam_path.stem[len("cam_"):]
        view = directory / f"view_{suffix}.png"
        if not view.exists():
            view = directory / f"view_{suffix}.ppm"
        if not view.exists():
            raise InvalidInputError(
                f"missing image for {cam_path.name}: expected "
                f"{directory / f'view_{suffix}.png'}")
        pairs.append((read_camera_json(cam_path), read_image(view)))
    return pairs
