"""File formats and the on-disk training-bundle layout.

Readers cover COLMAP sparse models (binary and text), PGM (8/16-bit), PFM
(grayscale, either endianness) and a minimal PNG subset (8/16-bit gray or
RGB, non-interlaced). Writers emit PGM, PFM, COLMAP models and the scene
checkpoint format:

    magic "TDGS" | u32 version | u32 count | positions | log_scales |
    rotations | opacity_logits | thermal_features      (little-endian f32)

A bundle directory glues them together::

    <root>/sparse/0/{cameras,images,points3D}.txt   camera poses + seed points
    <root>/thermal/<view>.pgm                        one image per posed view
    <root>/depth/<view>.pfm                          optional depth priors
    <root>/split.txt                                 "train <view>" / "test <view>"
"""

from __future__ import annotations

import math
import os
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    IncompatibleCheckpointError,
    InvalidInputError,
    ParseError,
    UnsupportedModelError,
)
from .scene import Camera, FIELD_NAMES, GaussianScene, quat_normalize, quat_to_rotation

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

CHECKPOINT_MAGIC = b"TDGS"
CHECKPOINT_VERSION = 1

# COLMAP camera model table (id, name, parameter count). Only the two pinhole
# models are accepted; the rest are recognized for error reporting.
COLMAP_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
COLMAP_MODEL_IDS = {name: mid for mid, (name, _) in COLMAP_MODELS.items()}
SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


@dataclass(frozen=True)
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray  # fx, fy, cx, cy (SIMPLE_PINHOLE expanded to this form)


@dataclass(frozen=True)
class ColmapImage:
    image_id: int
    qvec: np.ndarray  # (4,) w, x, y, z world-to-camera
    tvec: np.ndarray  # (3,)
    camera_id: int
    name: str


@dataclass
class View:
    """One posed thermal observation, optionally with a depth prior."""

    name: str
    camera: Camera
    thermal: np.ndarray
    depth_prior: np.ndarray | None = None
    prior_source: str | None = None


@dataclass
class TrainingBundle:
    """Everything one scene needs for training and held-out evaluation."""

    views: list
    initial_points: np.ndarray        # (N, 3)
    initial_intensities: np.ndarray   # (N,)
    train_indices: list
    test_indices: list
    scene_name: str = ""

    def __post_init__(self):
        self.initial_points = np.asarray(self.initial_points, dtype=np.float64).reshape(-1, 3)
        self.initial_intensities = np.asarray(self.initial_intensities, dtype=np.float64).ravel()
        self.validate()

    def validate(self):
        shapes = {v.thermal.shape for v in self.views}
        if len(shapes) > 1:
            raise InvalidInputError(f"views disagree in resolution: {sorted(shapes)}")
        n = len(self.views)
        all_idx = list(self.train_indices) + list(self.test_indices)
        if any(not 0 <= i < n for i in all_idx):
            raise InvalidInputError("split index out of range")
        if len(set(self.train_indices)) + len(set(self.test_indices)) != len(all_idx) or (
            set(self.train_indices) & set(self.test_indices)
        ):
            raise InvalidInputError("train/test splits must be disjoint without duplicates")
        if self.initial_intensities.shape[0] != self.initial_points.shape[0]:
            raise InvalidInputError("initial point and intensity counts differ")

    def train_views(self):
        return [self.views[i] for i in self.train_indices]

    def test_views(self):
        return [self.views[i] for i in self.test_indices]


def rgb_to_intensity(rgb) -> np.ndarray:
    """Luma reduction of RGB values in [0, 1] (or [0, 255] for uint8 inputs)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.asarray(LUMA_WEIGHTS)


# ---------------------------------------------------------------------------
# PGM


def _read_pgm_tokens(data: bytes, path, count: int):
    """Read `count` whitespace-separated header tokens after the magic."""
    tokens = []
    pos = 2  # past "P5"
    while len(tokens) < count:
        if pos >= len(data):
            raise ParseError(f"{path}: truncated header at byte {pos}")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ParseError(f"{path}: unterminated comment at byte {pos}")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tok = data[pos:end]
            if not tok.isdigit():
                raise ParseError(f"{path}: bad header token {tok!r} at byte {pos}")
            tokens.append(int(tok))
            pos = end
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError(f"{path}: missing whitespace after header at byte {pos}")
    return tokens, pos + 1


def read_pgm(path):
    """Parse a binary PGM (P5) file; returns (raw samples as float64, maxval)."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (width, height, maxval), offset = _read_pgm_tokens(data, path, 3)
    if maxval not in (255, 65535):
        raise ParseError(f"{path}: unsupported PGM maxval {maxval} (need 255 or 65535)")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[offset:offset + need]
    if len(raster) < need:
        raise ParseError(f"{path}: truncated pixel data at byte {offset + len(raster)}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.float64)
    return img, maxval


def write_pgm(path, image, maxval: int = 255):
    """Write values in [0, 1] as a binary PGM, rounding to the sample grid."""
    image = np.asarray(image, dtype=np.float64)
    if maxval not in (255, 65535):
        raise InvalidInputError(f"unsupported PGM maxval {maxval}")
    quant = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    data = quant.astype(">u2" if maxval == 65535 else "u1").tobytes()
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    atomic_write(path, header + data)


def read_gray_image(path):
    """Load a grayscale image in [0, 1] from PGM or PNG (RGB reduced by luma)."""
    path = Path(path)
    magic = path.read_bytes()[:8] if path.exists() else b""
    if magic[:2] == b"P5":
        img, maxval = read_pgm(path)
        return img / maxval
    if magic == b"\x89PNG\r\n\x1a\n":
        return _read_png_gray(path)
    raise ParseError(f"{path}: unrecognized image format (magic {magic[:4]!r})")


# ---------------------------------------------------------------------------
# PFM


def read_pfm(path):
    """Parse a grayscale PFM; returns rows top-down as float64."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise ParseError(f"{path}: truncated PFM header")
    magic, dims, scale_line, raster = parts
    if magic.strip() == b"PF":
        raise ParseError(f"{path}: color PFM not supported, expected grayscale 'Pf'")
    if magic.strip() != b"Pf":
        raise ParseError(f"{path}: not a PFM file (magic {magic!r})")
    try:
        width, height = (int(tok) for tok in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PFM header: {exc}") from None
    if scale == 0.0:
        raise ParseError(f"{path}: PFM scale factor must be nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = width * height * 4
    if len(raster) < need:
        raise ParseError(f"{path}: truncated pixel data ({len(raster)} of {need} bytes)")
    img = np.frombuffer(raster[:need], dtype=dtype).reshape(height, width)
    return np.flipud(img).astype(np.float64)  # PFM stores rows bottom-up


def write_pfm(path, image):
    """Write a float map as little-endian grayscale PFM (values kept as f32)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidInputError("write_pfm expects a 2D map")
    header = f"Pf\n{image.shape[1]} {image.shape[0]}\n-1.0\n".encode()
    atomic_write(path, header + np.flipud(image).astype("<f4").tobytes())


def read_depth_map(path):
    """Load a depth prior, keeping raw values (no rescaling at read time).

    Accepts grayscale PFM or 16-bit PGM. Non-finite pixels are zeroed with a
    counted warning so a stray bad pixel cannot poison training.
    """
    path = Path(path)
    magic = path.read_bytes()[:2] if path.exists() else b""
    if magic in (b"Pf", b"PF"):
        depth = read_pfm(path)
    elif magic == b"P5":
        depth, maxval = read_pgm(path)
        if maxval != 65535:
            raise ParseError(f"{path}: depth PGM must be 16-bit (maxval 65535)")
    else:
        raise ParseError(f"{path}: unrecognized depth format (magic {magic!r})")
    bad = ~np.isfinite(depth)
    n_bad = int(bad.sum())
    if n_bad:
        depth = np.where(bad, 0.0, depth)
        warnings.warn(f"{path}: replaced {n_bad} non-finite depth pixels with 0", stacklevel=2)
    return depth


# ---------------------------------------------------------------------------
# PNG (reader only; minimal subset)


def _png_unfilter(raw: bytes, height: int, stride: int, bpp: int, path) -> bytes:
    out = bytearray()
    prev = bytearray(stride)
    pos = 0
    for row in range(height):
        if pos + 1 + stride > len(raw):
            raise ParseError(f"{path}: truncated PNG scanline {row}")
        ftype = raw[pos]
        line = bytearray(raw[pos + 1:pos + 1 + stride])
        pos += 1 + stride
        if ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + (left + prev[i]) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up = prev[i]
                ul = prev[i - bpp] if i >= bpp else 0
                p = left + up - ul
                pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
                if pa <= pb and pa <= pc:
                    pred = left
                elif pb <= pc:
                    pred = up
                else:
                    pred = ul
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise ParseError(f"{path}: unknown PNG filter type {ftype} in scanline {row}")
        out.extend(line)
        prev = line
    return bytes(out)


def _read_png_gray(path):
    data = Path(path).read_bytes()
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        chunk = data[pos + 8:pos + 8 + length]
        if len(chunk) < length:
            raise ParseError(f"{path}: truncated PNG chunk {ctype!r} at byte {pos}")
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", chunk)
        elif ctype == b"IDAT":
            idat.extend(chunk)
        elif ctype == b"IEND":
            break
        pos += 12 + length
    if ihdr is None:
        raise ParseError(f"{path}: PNG has no IHDR chunk")
    width, height, depth, color, comp, filt, interlace = ihdr
    if depth not in (8, 16):
        raise ParseError(f"{path}: unsupported PNG bit depth {depth}")
    if color not in (0, 2):
        raise ParseError(f"{path}: unsupported PNG color type {color} (need gray or RGB)")
    if comp != 0 or filt != 0 or interlace != 0:
        raise ParseError(f"{path}: unsupported PNG compression/filter/interlace settings")
    channels = 1 if color == 0 else 3
    sample_bytes = depth // 8
    stride = width * channels * sample_bytes
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise ParseError(f"{path}: bad PNG stream: {exc}") from None
    pixels = _png_unfilter(raw, height, stride, channels * sample_bytes, path)
    dtype = np.dtype(">u2") if depth == 16 else np.dtype("u1")
    img = np.frombuffer(pixels, dtype=dtype).reshape(height, width, channels).astype(np.float64)
    img /= float(2 ** depth - 1)
    if channels == 3:
        return rgb_to_intensity(img)
    return img[:, :, 0]


# ---------------------------------------------------------------------------
# COLMAP sparse models


def _need_bytes(fid, count, path):
    data = fid.read(count)
    if len(data) < count:
        raise ParseError(f"{path}: truncated at byte {fid.tell() - len(data) + count}")
    return data


def _check_model(model: str, path):
    if model not in SUPPORTED_MODELS:
        raise UnsupportedModelError(f"{path}: unsupported camera model {model} "
                                    f"(supported: {', '.join(SUPPORTED_MODELS)})")


def _expand_params(model: str, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    expected = COLMAP_MODELS[COLMAP_MODEL_IDS[model]][1]
    if params.shape != (expected,):
        raise ParseError(f"{model} camera needs {expected} parameters, got {params.size}")
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        return np.array([f, f, cx, cy])
    return params


def _contract_params(cam: ColmapCamera) -> np.ndarray:
    # ColmapCamera always stores the expanded (fx, fy, cx, cy) form
    if cam.model == "SIMPLE_PINHOLE":
        return cam.params[[0, 2, 3]]
    return cam.params


def _read_cameras_bin(path):
    cameras = {}
    with open(path, "rb") as fid:
        (n,) = struct.unpack("<Q", _need_bytes(fid, 8, path))
        for _ in range(n):
            cam_id, model_id, width, height = struct.unpack("<iiQQ", _need_bytes(fid, 24, path))
            if model_id not in COLMAP_MODELS:
                raise UnsupportedModelError(f"{path}: unknown camera model id {model_id}")
            model, n_params = COLMAP_MODELS[model_id]
            params = struct.unpack(f"<{n_params}d", _need_bytes(fid, 8 * n_params, path))
            _check_model(model, path)
            cameras[cam_id] = ColmapCamera(cam_id, model, int(width), int(height),
                                           _expand_params(model, params))
    return cameras


def _read_cameras_txt(path):
    cameras = {}
    for line in _text_lines(path):
        elems = line.split()
        cam_id = int(elems[0])
        model = elems[1]
        _check_model(model, path)
        params = np.array([float(x) for x in elems[4:]])
        cameras[cam_id] = ColmapCamera(cam_id, model, int(elems[2]), int(elems[3]),
                                       _expand_params(model, params))
    return cameras


def _read_images_bin(path):
    images = []
    with open(path, "rb") as fid:
        (n,) = struct.unpack("<Q", _need_bytes(fid, 8, path))
        for _ in range(n):
            props = struct.unpack("<idddddddi", _need_bytes(fid, 64, path))
            image_id = props[0]
            qvec = np.array(props[1:5])
            tvec = np.array(props[5:8])
            camera_id = props[8]
            name_bytes = bytearray()
            while True:
                ch = _need_bytes(fid, 1, path)
                if ch == b"\x00":
                    break
                name_bytes.extend(ch)
            (n_pts,) = struct.unpack("<Q", _need_bytes(fid, 8, path))
            _need_bytes(fid, 24 * n_pts, path)  # 2D observations are not used
            images.append(ColmapImage(image_id, qvec, tvec, camera_id, name_bytes.decode("utf-8")))
    images.sort(key=lambda im: im.image_id)
    return images


def _read_images_txt(path):
    images = []
    lines = _text_lines(path, keep_empty=True)
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line:
            i += 1
            continue
        elems = line.split()
        if len(elems) < 10:
            raise ParseError(f"{path}: malformed image line: {line!r}")
        images.append(ColmapImage(
            image_id=int(elems[0]),
            qvec=np.array([float(x) for x in elems[1:5]]),
            tvec=np.array([float(x) for x in elems[5:8]]),
            camera_id=int(elems[8]),
            name=elems[9],
        ))
        i += 2  # skip the 2D-observation line that follows each image
    images.sort(key=lambda im: im.image_id)
    return images


def _read_points_bin(path):
    positions = []
    rgbs = []
    with open(path, "rb") as fid:
        (n,) = struct.unpack("<Q", _need_bytes(fid, 8, path))
        for _ in range(n):
            props = struct.unpack("<QdddBBBd", _need_bytes(fid, 43, path))
            positions.append(props[1:4])
            rgbs.append(props[4:7])
            (track_len,) = struct.unpack("<Q", _need_bytes(fid, 8, path))
            _need_bytes(fid, 8 * track_len, path)
    return _points_arrays(positions, rgbs)


def _read_points_txt(path):
    positions = []
    rgbs = []
    for line in _text_lines(path):
        elems = line.split()
        positions.append([float(x) for x in elems[1:4]])
        rgbs.append([int(x) for x in elems[4:7]])
    return _points_arrays(positions, rgbs)


def _points_arrays(positions, rgbs):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rgbs = np.asarray(rgbs, dtype=np.float64).reshape(-1, 3)
    intensities = rgb_to_intensity(rgbs) / 255.0
    return positions, intensities


def _text_lines(path, keep_empty: bool = False):
    out = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line.startswith("#"):
            continue
        if line or keep_empty:
            out.append(line)
    return out


def read_colmap_sparse(directory):
    """Parse a COLMAP sparse model directory (binary or text layout).

    Returns ``(cameras, images, (positions, intensities))`` where cameras is
    a dict keyed by camera id, images are sorted by image id, and point RGB
    colors are reduced to scalar intensities in [0, 1].
    """
    directory = Path(directory)

    def pick(stem):
        for ext in (".bin", ".txt"):
            candidate = directory / f"{stem}{ext}"
            if candidate.exists():
                return candidate
        raise ParseError(f"{directory}: missing {stem}.bin/.txt")

    cameras_path = pick("cameras")
    images_path = pick("images")
    points_path = pick("points3D")
    cameras = _read_cameras_bin(cameras_path) if cameras_path.suffix == ".bin" else _read_cameras_txt(cameras_path)
    images = _read_images_bin(images_path) if images_path.suffix == ".bin" else _read_images_txt(images_path)
    points = _read_points_bin(points_path) if points_path.suffix == ".bin" else _read_points_txt(points_path)
    return cameras, images, points


def colmap_to_camera(cam: ColmapCamera, image: ColmapImage, near_clip: float = 0.01) -> Camera:
    """Build a renderable camera from COLMAP intrinsics and a posed image."""
    fx, fy, cx, cy = cam.params
    rotation = quat_to_rotation(quat_normalize(image.qvec))
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=cam.width, height=cam.height,
                  rotation=rotation, translation=image.tvec.astype(np.float64),
                  near_clip=near_clip)


def write_colmap_text(directory, cameras, images, points):
    """Write a COLMAP text model; floats use repr for lossless round-trips."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    positions, intensities = points

    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cam in sorted(cameras.values(), key=lambda c: c.camera_id):
        params = " ".join(repr(float(p)) for p in _contract_params(cam))
        lines.append(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}")
    atomic_write(directory / "cameras.txt", ("\n".join(lines) + "\n").encode())

    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for im in sorted(images, key=lambda im: im.image_id):
        q = " ".join(repr(float(x)) for x in im.qvec)
        t = " ".join(repr(float(x)) for x in im.tvec)
        lines.append(f"{im.image_id} {q} {t} {im.camera_id} {im.name}")
        lines.append("")
    atomic_write(directory / "images.txt", ("\n".join(lines) + "\n").encode())

    lines = ["# 3D point list with one line of data per point:",
             "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for i in range(positions.shape[0]):
        xyz = " ".join(repr(float(x)) for x in positions[i])
        gray = int(round(float(np.clip(intensities[i], 0.0, 1.0)) * 255.0))
        lines.append(f"{i + 1} {xyz} {gray} {gray} {gray} 0.0")
    atomic_write(directory / "points3D.txt", ("\n".join(lines) + "\n").encode())


def write_colmap_binary(directory, cameras, images, points):
    """Write the same model in COLMAP's binary layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    positions, intensities = points

    buf = bytearray(struct.pack("<Q", len(cameras)))
    for cam in sorted(cameras.values(), key=lambda c: c.camera_id):
        model_id = COLMAP_MODEL_IDS[cam.model]
        buf += struct.pack("<iiQQ", cam.camera_id, model_id, cam.width, cam.height)
        params = _contract_params(cam)
        buf += struct.pack(f"<{len(params)}d", *params)
    atomic_write(directory / "cameras.bin", bytes(buf))

    buf = bytearray(struct.pack("<Q", len(images)))
    for im in sorted(images, key=lambda im: im.image_id):
        buf += struct.pack("<idddddddi", im.image_id, *im.qvec, *im.tvec, im.camera_id)
        buf += im.name.encode("utf-8") + b"\x00"
        buf += struct.pack("<Q", 0)
    atomic_write(directory / "images.bin", bytes(buf))

    buf = bytearray(struct.pack("<Q", positions.shape[0]))
    for i in range(positions.shape[0]):
        gray = int(round(float(np.clip(intensities[i], 0.0, 1.0)) * 255.0))
        buf += struct.pack("<QdddBBBd", i + 1, *positions[i], gray, gray, gray, 0.0)
        buf += struct.pack("<Q", 0)
    atomic_write(directory / "points3D.bin", bytes(buf))


# ---------------------------------------------------------------------------
# Render outputs and checkpoints


def write_render(output, directory, view_name):
    """Write thermal (8-bit PGM), depth (PFM) and alpha (8-bit PGM) maps.

    Returns the list of written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [
        directory / f"{view_name}_thermal.pgm",
        directory / f"{view_name}_depth.pfm",
        directory / f"{view_name}_alpha.pgm",
    ]
    write_pgm(paths[0], output.thermal)
    write_pfm(paths[1], output.depth)
    write_pgm(paths[2], output.alpha_acc)
    return paths


def save_scene(scene: GaussianScene, path):
    """Serialize a scene checkpoint (little-endian float32 fields)."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, scene.count)
    for name in FIELD_NAMES:
        buf += getattr(scene, name).astype("<f4").tobytes()
    atomic_write(path, bytes(buf))


def load_scene(path) -> GaussianScene:
    """Load a checkpoint written by :func:`save_scene`."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a scene checkpoint (bad magic)")
    version, count = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    widths = {"positions": 3, "log_scales": 3, "rotations": 4,
              "opacity_logits": 1, "thermal_features": 1}
    need = 12 + 4 * count * sum(widths.values())
    if len(data) != need:
        raise ParseError(f"{path}: checkpoint is {len(data)} bytes, expected {need}")
    fields = {}
    offset = 12
    for name in FIELD_NAMES:
        w = widths[name]
        nbytes = 4 * count * w
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").astype(np.float64)
        fields[name] = arr.reshape(count, w) if w > 1 else arr
        offset += nbytes
    return GaussianScene(**fields)


# ---------------------------------------------------------------------------
# Bundle directories


def write_bundle(bundle: TrainingBundle, root):
    """Materialize a bundle directory in the layout :func:`read_bundle` expects."""
    root = Path(root)
    (root / "thermal").mkdir(parents=True, exist_ok=True)
    sparse = root / "sparse" / "0"
    sparse.mkdir(parents=True, exist_ok=True)

    cameras = {}
    images = []
    for i, view in enumerate(bundle.views):
        cam = view.camera
        cam_id = i + 1
        cameras[cam_id] = ColmapCamera(cam_id, "PINHOLE", cam.width, cam.height,
                                       np.array([cam.fx, cam.fy, cam.cx, cam.cy]))
        images.append(ColmapImage(cam_id, _rotmat_to_quat(cam.rotation), cam.translation,
                                  cam_id, f"{view.name}.pgm"))
        write_pgm(root / "thermal" / f"{view.name}.pgm", view.thermal, maxval=65535)
        if view.depth_prior is not None:
            (root / "depth").mkdir(exist_ok=True)
            write_pfm(root / "depth" / f"{view.name}.pfm", view.depth_prior)

    write_colmap_text(sparse, cameras, images,
                      (bundle.initial_points, bundle.initial_intensities))
    lines = [f"train {bundle.views[i].name}" for i in bundle.train_indices]
    lines += [f"test {bundle.views[i].name}" for i in bundle.test_indices]
    atomic_write(root / "split.txt", ("\n".join(lines) + "\n").encode())


def read_bundle(root, near_clip: float = 0.01, scene_name: str | None = None) -> TrainingBundle:
    """Load a bundle directory (COLMAP model + thermal images + split).

    Depth priors are attached separately, see ``priors.attach_priors``.
    """
    root = Path(root)
    sparse = next((p for p in (root / "sparse" / "0", root / "sparse", root)
                   if (p / "cameras.bin").exists() or (p / "cameras.txt").exists()), None)
    if sparse is None:
        raise ParseError(f"{root}: no COLMAP sparse model found")
    cameras, images, (positions, intensities) = read_colmap_sparse(sparse)

    views = []
    for im in images:
        if im.camera_id not in cameras:
            raise ParseError(f"{root}: image {im.name} references unknown camera {im.camera_id}")
        camera = colmap_to_camera(cameras[im.camera_id], im, near_clip=near_clip)
        stem = Path(im.name).stem
        image_path = root / "thermal" / im.name
        if not image_path.exists():
            raise ParseError(f"{root}: missing thermal image {image_path}")
        thermal = read_gray_image(image_path)
        if thermal.shape != (camera.height, camera.width):
            raise InvalidInputError(
                f"{image_path}: image is {thermal.shape}, camera expects "
                f"{(camera.height, camera.width)}")
        views.append(View(name=stem, camera=camera, thermal=thermal))

    split_file = root / "split.txt"
    if split_file.exists():
        train_idx, test_idx = _read_split(split_file, views)
    else:
        from .training import split_train_test
        train_idx, test_idx = split_train_test(views, 0.8, seed=0)
    return TrainingBundle(views=views, initial_points=positions,
                          initial_intensities=intensities,
                          train_indices=train_idx, test_indices=test_idx,
                          scene_name=scene_name or root.name)


def _read_split(path, views):
    by_name = {v.name: i for i, v in enumerate(views)}
    train_idx, test_idx = [], []
    for line in _text_lines(path):
        kind, _, name = line.partition(" ")
        if name not in by_name:
            raise ParseError(f"{path}: split references unknown view {name!r}")
        (train_idx if kind == "train" else test_idx).append(by_name[name])
    return train_idx, test_idx


def _rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (w, x, y, z), w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                          (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                          0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def atomic_write(path, data: bytes):
    """Write bytes via a temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
