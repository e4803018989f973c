"""Initial neural point clouds from depth maps + probability volumes or PLY files.

Also home to the on-disk formats those inputs come in: PLY (ASCII and binary
little-endian), PFM depth maps and raw float32 probability volumes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CameraModel
from .field import FEATURE_DIM, NeuralPointCloud
from .nnet import logit

log = logging.getLogger(__name__)

GAMMA_CLAMP = (1e-4, 1.0 - 1e-4)
DEFAULT_GAMMA = 0.3
FEATURE_STRATEGIES = ("kaiming_random", "from_point_colors", "zeros")


@dataclass
class DepthViewInput:
    camera: CameraModel
    depth: np.ndarray  # (H, W), world units along the camera z axis, 0 = invalid
    prob: np.ndarray | None = None  # (H, W, P)
    planes: np.ndarray | None = None  # (P,) strictly increasing

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.planes is not None:
            self.planes = np.asarray(self.planes, dtype=np.float64)
            if np.any(np.diff(self.planes) <= 0):
                raise ValueError("plane depths must be strictly increasing")
        if self.prob is not None:
            self.prob = np.asarray(self.prob, dtype=np.float64)
            if not np.all(np.isfinite(self.prob)):
                raise ValueError("probabilities must be finite")


@dataclass(frozen=True)
class FeatureInitStrategy:
    kind: str = "kaiming_random"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FEATURE_STRATEGIES:
            raise ValueError(f"unknown feature strategy {self.kind!r}")


def strided_pixels(view: DepthViewInput, stride: int):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = view.depth.shape
    py, px = np.mgrid[0:h:stride, 0:w:stride]
    px, py = px.ravel(), py.ravel()
    valid = view.depth[py, px] > 0
    return px[valid], py[valid]


def unproject_depth(view: DepthViewInput, stride: int = 1) -> np.ndarray:
    """World points for every valid depth pixel on the stride lattice."""
    px, py = strided_pixels(view, stride)
    if len(px) == 0:
        return np.zeros((0, 3))
    cam = view.camera
    z = view.depth[py, px]
    x = (px + 0.5 - cam.cx) / cam.fx * z
    y = (py + 0.5 - cam.cy) / cam.fy * z
    return cam.to_world(np.stack([x, y, z], axis=1))


def confidence_from_volume(view: DepthViewInput, points) -> tuple[np.ndarray, int]:
    """Trilinear lookup of the probability volume at each point.

    Nodes sit at pixel centers and at the plane depths. Points projecting
    outside the image or the plane range get the lower clamp; their count is
    returned alongside the confidences.
    """
    if view.prob is None or view.planes is None:
        raise ValueError("view has no probability volume")
    cam = view.camera
    pc = cam.to_camera(points)
    z = pc[:, 2]
    h, w, P = view.prob.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        fx = cam.fx * pc[:, 0] / z + cam.cx - 0.5
        fy = cam.fy * pc[:, 1] / z + cam.cy - 0.5
    planes = view.planes
    inside = (z > 0) & (fx >= -0.5) & (fx <= w - 0.5) & (fy >= -0.5) & (fy <= h - 0.5) \
        & (z >= planes[0]) & (z <= planes[-1])
    out = np.full(len(z), GAMMA_CLAMP[0])
    n_out = int((~inside).sum())
    if n_out:
        log.warning("%d points outside the probability volume", n_out)
    if not inside.any():
        return out, n_out
    fx, fy, zz = np.clip(fx[inside], 0, w - 1), np.clip(fy[inside], 0, h - 1), z[inside]
    k = np.clip(np.searchsorted(planes, zz, side="right") - 1, 0, max(P - 2, 0))
    fz = (zz - planes[k]) / (planes[k + 1] - planes[k]) if P > 1 else np.zeros_like(zz)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    k1 = np.minimum(k + 1, P - 1)
    ax, ay = fx - x0, fy - y0
    vol = view.prob
    val = 0.0
    for yi, wy in ((y0, 1 - ay), (y1, ay)):
        for xi, wx in ((x0, 1 - ax), (x1, ax)):
            for ki, wz in ((k, 1 - fz), (k1, fz)):
                val = val + wy * wx * wz * vol[yi, xi, ki]
    out[inside] = val
    return out, n_out


def init_cloud(positions, gammas=None, strategy: FeatureInitStrategy = FeatureInitStrategy(),
               D: int = FEATURE_DIM, colors=None) -> NeuralPointCloud:
    """Neural points with confidence 0.3 unless given and features per ``strategy``."""
    if D < 1:
        raise ValueError("D must be >= 1")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if gammas is None:
        gammas = np.full(n, DEFAULT_GAMMA)
    gammas = np.clip(np.asarray(gammas, dtype=np.float64).reshape(n), *GAMMA_CLAMP)
    rng = np.random.default_rng(strategy.seed)
    if strategy.kind == "zeros":
        features = np.zeros((n, D))
    else:
        features = rng.normal(0.0, np.sqrt(2.0 / D), size=(n, D))
        if strategy.kind == "from_point_colors":
            if colors is None:
                raise ValueError("from_point_colors needs per-point colors")
            c = min(3, D)
            features[:, :c] = np.asarray(colors, dtype=np.float64).reshape(n, 3)[:, :c]
    return NeuralPointCloud(positions, features, logit(gammas))


def merge_clouds(clouds) -> NeuralPointCloud:
    clouds = list(clouds)
    if not clouds:
        raise ValueError("nothing to merge")
    dims = {c.feature_dim for c in clouds}
    if len(dims) != 1:
        raise ValueError(f"feature dimensions differ: {sorted(dims)}")
    return NeuralPointCloud(np.concatenate([c.positions for c in clouds]),
                            np.concatenate([c.features for c in clouds]),
                            np.concatenate([c.confidence_logits for c in clouds]))


def cloud_from_depth_views(views, stride: int = 1, strategy=FeatureInitStrategy(), D: int = FEATURE_DIM):
    """Unproject every view and merge; with ``D >= 3`` the last three feature
    channels hold the unit direction from the source camera to the point."""
    clouds = []
    for i, view in enumerate(views):
        pts = unproject_depth(view, stride)
        gam = confidence_from_volume(view, pts)[0] if view.prob is not None else None
        cloud = init_cloud(pts, gam, FeatureInitStrategy(strategy.kind, strategy.seed + i), D)
        if D >= 3 and len(pts):
            rays = pts - view.camera.center
            cloud.features[:, -3:] = rays / np.linalg.norm(rays, axis=1, keepdims=True)
        clouds.append(cloud)
    return merge_clouds(clouds)


# -- PLY ------------------------------------------------------------------------

class PlyError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PlyData:
    positions: np.ndarray
    colors: np.ndarray | None = None  # uint8 (N, 3)
    confidence: np.ndarray | None = None
    features: np.ndarray | None = None


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyError("line 1: not a PLY file (missing 'ply' magic or end_header)")
    nl = raw.find(b"\n", end)
    body_offset = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {' '.join(parts[1:])!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not re.fullmatch(r"\d+", parts[2]):
                raise PlyError(f"line {lineno}: malformed element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PlyError(f"line {lineno}: malformed list property")
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PlyError(f"line {lineno}: malformed property {line!r}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, body_offset


def _extract(names, cols) -> PlyData:
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    pos = np.stack([np.asarray(cols["x"], np.float64), np.asarray(cols["y"], np.float64),
                    np.asarray(cols["z"], np.float64)], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(cols[c]) for c in ("red", "green", "blue")], axis=1).astype(np.uint8)
    conf = np.asarray(cols["confidence"], np.float64) if "confidence" in names else None
    feat_names = sorted((n for n in names if re.fullmatch(r"feature_\d+", n)), key=lambda n: int(n[8:]))
    feats = None
    if feat_names:
        if [int(n[8:]) for n in feat_names] != list(range(len(feat_names))):
            raise PlyError("feature_* properties are not contiguous from 0")
        feats = np.stack([np.asarray(cols[n], np.float64) for n in feat_names], axis=1)
    return PlyData(pos, colors, conf, feats)


def load_ply(path) -> PlyData:
    raw = Path(path).read_bytes()
    fmt, elements, offset = _parse_header(raw)
    result = None
    if fmt == "ascii":
        tokens = raw[offset:].split()
        pos = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                if name == "vertex":
                    raise PlyError("list properties on vertices are not supported")
                for _ in range(count):  # skip list elements (e.g. faces)
                    for _, t in props:
                        if isinstance(t, tuple):
                            n = int(tokens[pos])
                            pos += 1 + n
                        else:
                            pos += 1
                continue
            width = len(props)
            need = count * width
            if pos + need > len(tokens):
                raise PlyError(f"element {name!r}: expected {count} rows, data ends after "
                               f"{(len(tokens) - pos) // max(width, 1)}")
            table = np.array(tokens[pos:pos + need], dtype=np.float64).reshape(count, width)
            pos += need
            if name == "vertex":
                cols = {p: table[:, i] for i, (p, _) in enumerate(props)}
                result = _extract([p for p, _ in props], cols)
    else:
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                if name == "vertex":
                    raise PlyError("list properties on vertices are not supported")
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            size_t = np.dtype(t[1])
                            n = int(np.frombuffer(raw, dtype="<" + t[1], count=1, offset=offset)[0])
                            offset += size_t.itemsize + n * np.dtype(t[2]).itemsize
                        else:
                            offset += np.dtype(t).itemsize
                continue
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            need = count * dtype.itemsize
            if offset + need > len(raw):
                raise PlyError(f"element {name!r} at byte offset {offset}: needs {need} bytes, "
                               f"only {len(raw) - offset} available")
            table = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += need
            if name == "vertex":
                result = _extract(list(dtype.names), {p: table[p] for p in dtype.names})
    if result is None:
        raise PlyError("no vertex element")
    return result


def save_ply(path, positions, colors=None, confidence=None, features=None, ascii: bool = False) -> None:
    """Write vertices with float32 x/y/z, optional uchar colors, float32 confidence and features."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    data = {"x": positions[:, 0], "y": positions[:, 1], "z": positions[:, 2]}
    if colors is not None:
        colors = np.asarray(colors).reshape(n, 3)
        for i, c in enumerate(("red", "green", "blue")):
            fields.append((c, "u1"))
            data[c] = colors[:, i]
    if confidence is not None:
        fields.append(("confidence", "f4"))
        data["confidence"] = np.asarray(confidence).reshape(n)
    if features is not None:
        features = np.asarray(features)
        features = features.reshape(n, features.shape[-1] if features.ndim == 2 else -1)
        for i in range(features.shape[1]):
            fields.append((f"feature_{i}", "f4"))
            data[f"feature_{i}"] = features[:, i]
    names = {"f4": "float", "u1": "uchar"}
    header = ["ply", "format " + ("ascii 1.0" if ascii else "binary_little_endian 1.0"),
              f"element vertex {n}"] + [f"property {names[t]} {p}" for p, t in fields] + ["end_header"]
    table = np.empty(n, dtype=[(p, "<" + t) for p, t in fields])
    for p, _ in fields:
        table[p] = data[p]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            for row in table:
                f.write((" ".join(repr(float(v)) if t == "f4" else str(int(v))
                                  for v, (_, t) in zip(row, fields)) + "\n").encode("ascii"))
        else:
            f.write(table.tobytes())


def save_cloud_ply(path, cloud: NeuralPointCloud) -> None:
    save_ply(path, cloud.positions, confidence=cloud.gammas, features=cloud.features)


def load_cloud_ply(path) -> NeuralPointCloud:
    data = load_ply(path)
    n = len(data.positions)
    if data.features is None:
        raise PlyError(f"{path}: no feature_* properties")
    gam = data.confidence if data.confidence is not None else np.full(n, DEFAULT_GAMMA)
    return NeuralPointCloud(data.positions, data.features, logit(np.clip(gam, *GAMMA_CLAMP)))


# -- PFM and probability volumes ----------------------------------------------------

def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = raw.split(b"\n", 3)
    magic = header[0].strip()
    if magic not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    w, h = map(int, header[1].split())
    scale = float(header[2])
    channels = 1 if magic == b"Pf" else 3
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(header[3], dtype=dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_probvol(path, prob: np.ndarray, planes: np.ndarray) -> None:
    """Text line ``H W P``, then P float32 plane depths, then H*W*P float32 values (row-major, LE)."""
    prob = np.asarray(prob, dtype="<f4")
    h, w, p = prob.shape
    with open(path, "wb") as f:
        f.write(b"%d %d %d\n" % (h, w, p))
        f.write(np.asarray(planes, dtype="<f4").tobytes())
        f.write(prob.tobytes())


def read_probvol(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    h, w, p = map(int, raw[:nl].split())
    planes = np.frombuffer(raw, dtype="<f4", count=p, offset=nl + 1).astype(np.float64)
    prob = np.frombuffer(raw, dtype="<f4", count=h * w * p, offset=nl + 1 + 4 * p)
    return prob.reshape(h, w, p).astype(np.float64), planes

