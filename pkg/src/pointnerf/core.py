"""Geometry, camera and image primitives shared by every other module.

Conventions used throughout the package:

* pixel ``(px, py)`` is sampled at its center ``(px + 0.5, py + 0.5)``;
* cameras store a world-to-camera rigid transform, camera looks down +z;
* perspective coordinates are ``(u, v, 1/z)`` with ``z`` the camera-space depth;
* all arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4)[:3].copy())

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (3, 4):
            raise ValueError(f"world_to_camera must be 3x4, got {w2c.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be at least 1x1")
        rot = w2c[:, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_world(self, pts_cam: np.ndarray) -> np.ndarray:
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        return (pts_cam - self.translation) @ self.rotation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "CameraModel":
        """Camera at ``eye`` looking at ``target``; image y axis points along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.concatenate([rot, (-rot @ eye)[:, None]], axis=1)
        return cls(fx, fy, cx, cy, width, height, w2c)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"invalid ray interval [{self.t_near}, {self.t_far}]")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


class ImageBuffer:
    """RGB image with float64 channels in [0, 1], stored as (height, width, 3)."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = pixels

    @classmethod
    def filled(cls, width: int, height: int, color) -> "ImageBuffer":
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)).copy())

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)


def _check_pixel(camera: CameraModel, px, py):
    px = np.asarray(px)
    py = np.asarray(py)
    if np.any(px < 0) or np.any(px >= camera.width) or np.any(py < 0) or np.any(py >= camera.height):
        raise ValueError("pixel index out of range")


def pixel_directions(camera: CameraModel, px, py) -> np.ndarray:
    """World-space unit directions through the centers of pixels ``(px, py)``."""
    _check_pixel(camera, px, py)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, np.ones_like(px)],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_ray(camera: CameraModel, px: int, py: int, t_near: float = 0.0, t_far: float = 1e6) -> Ray:
    direction = pixel_directions(camera, px, py)
    return Ray(camera.center, direction, t_near, t_far)


def world_to_perspective(camera: CameraModel, p) -> np.ndarray:
    """Map world points to ``(u, v, 1/z)``. Accepts a single point or an (N, 3) array."""
    cam = camera.to_camera(p)
    z = cam[..., 2]
    if np.any(z <= 0):
        raise ValueError("point behind camera (non-positive depth)")
    u = camera.fx * cam[..., 0] / z + camera.cx
    v = camera.fy * cam[..., 1] / z + camera.cy
    return np.stack([u, v, 1.0 / z], axis=-1)


def perspective_to_world(camera: CameraModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    z = 1.0 / q[..., 2]
    x = (q[..., 0] - camera.cx) * z / camera.fx
    y = (q[..., 1] - camera.cy) * z / camera.fy
    return camera.to_world(np.stack([x, y, z], axis=-1))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    pa = a.pixels if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    pb = b.pixels if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"image size mismatch: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    return mse_to_psnr(mse)


def mse_to_psnr(mse: float) -> float:
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# file formats: cameras.txt and PPM


def write_cameras(path, cameras: dict[int, CameraModel]) -> None:
    lines = []
    for view_id, cam in sorted(cameras.items()):
        vals = [cam.fx, cam.fy, cam.cx, cam.cy]
        w2c = cam.world_to_camera
        mat = [repr(float(v)) for v in w2c.reshape(-1)]
        lines.append(" ".join([str(view_id)] + [repr(float(v)) for v in vals]
                              + [str(cam.width), str(cam.height)] + mat))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> dict[int, CameraModel]:
    cameras = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 19:
            raise ValueError(f"{path}:{lineno}: expected 19 fields, got {len(parts)}")
        view_id = int(parts[0])
        fx, fy, cx, cy = map(float, parts[1:5])
        width, height = int(parts[5]), int(parts[6])
        w2c = np.array([float(v) for v in parts[7:]]).reshape(3, 4)
        cameras[view_id] = CameraModel(fx, fy, cx, cy, width, height, w2c)
    return cameras


def encode_channels(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Binary P6 for RGB images, P5 for single-channel (H, W) arrays."""
    pixels = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    data = encode_channels(pixels)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path) -> ImageBuffer | np.ndarray:
    """Read P6 (returns ImageBuffer) or P5 (returns an (H, W) float array)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported magic {magic!r}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    values = data.astype(np.float64) / 255.0
    if channels == 1:
        return values.reshape(h, w)
    return ImageBuffer(values.reshape(h, w, 3))
