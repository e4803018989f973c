"""Analytic ground-truth scenes, an independent dense ray marcher, synthetic
datasets and a surface-coverage metric.

Nothing here imports the neural rendering path: ``oracle_render`` integrates
the analytic density and color fields directly and is the reference against
which the point renderer is judged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraModel, ImageBuffer, pixel_directions, read_cameras, read_ppm, write_cameras, write_ppm

SCENE_KINDS = ("sphere", "two_spheres", "box_with_hole")


@dataclass
class Solid:
    kind: str  # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray  # radius (sphere) or half extents (box)
    density: float
    color: np.ndarray  # base RGB at the center
    color_gradient: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def contains(self, x: np.ndarray) -> np.ndarray:
        rel = x - self.center
        if self.kind == "sphere":
            return np.einsum("...i,...i->...", rel, rel) <= self.size[0] ** 2
        return np.all(np.abs(rel) <= self.size, axis=-1)

    def color_at(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.color + (x - self.center) @ self.color_gradient.T, 0.0, 1.0)

    def bbox(self):
        half = np.full(3, self.size[0]) if self.kind == "sphere" else self.size
        return self.center - half, self.center + half


@dataclass
class AnalyticScene:
    """Union of solids (density = max over solids) minus cylindrical holes."""

    kind: str
    solids: list[Solid]
    holes: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)  # (point, axis, radius)
    params: dict = field(default_factory=dict)

    def in_hole(self, x):
        out = np.zeros(x.shape[:-1], bool)
        for p, axis, r in self.holes:
            rel = x - p
            radial = rel - np.einsum("...i,i->...", rel, axis)[..., None] * axis
            out |= np.einsum("...i,...i->...", radial, radial) < r * r
        return out

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        sigma = np.zeros(x.shape[:-1])
        for s in self.solids:
            sigma = np.maximum(sigma, np.where(s.contains(x), s.density, 0.0))
        return np.where(self.in_hole(x), 0.0, sigma)

    def color(self, x) -> np.ndarray:
        """Color of the densest solid containing ``x`` (first one on ties)."""
        x = np.asarray(x, dtype=np.float64)
        rgb = np.zeros(x.shape)
        best = np.full(x.shape[:-1], -1.0)
        for s in self.solids:
            inside = s.contains(x) & (s.density > best)
            rgb = np.where(inside[..., None], s.color_at(x), rgb)
            best = np.where(inside, s.density, best)
        return rgb

    def bbox(self):
        boxes = [s.bbox() for s in self.solids]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


def _linear_color(rng, base):
    return np.asarray(base, dtype=np.float64), rng.uniform(-0.35, 0.35, size=(3, 3))


def make_scene(kind: str = "sphere", params: dict | None = None, seed: int = 0) -> AnalyticScene:
    """Deterministic analytic scene.

    Parameters (all optional): ``radius`` (0 < r <= 5, default 1), ``density``
    (> 0, default 20), ``textured`` (position-linear colors, default True);
    ``two_spheres`` also takes ``separation`` (default 2.5 radii apart).
    """
    params = dict(params or {})
    radius = float(params.get("radius", 1.0))
    density = float(params.get("density", 20.0))
    textured = bool(params.get("textured", True))
    if not (0 < radius <= 5):
        raise ValueError("radius must be in (0, 5]")
    if not density > 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)

    def color(base):
        base, grad = _linear_color(rng, base)
        return (base, grad) if textured else (base, np.zeros((3, 3)))

    if kind == "sphere":
        base, grad = color([0.7, 0.5, 0.3])
        solids = [Solid("sphere", np.zeros(3), np.array([radius]), density, base, grad)]
        holes = []
    elif kind == "two_spheres":
        sep = float(params.get("separation", 2.5)) * radius
        if sep <= 0:
            raise ValueError("separation must be positive")
        c1, g1 = color([0.8, 0.3, 0.2])
        c2, g2 = color([0.2, 0.4, 0.8])
        solids = [Solid("sphere", np.array([-sep / 2, 0, 0]), np.array([radius]), density, c1, g1),
                  Solid("sphere", np.array([sep / 2, 0, 0]), np.array([radius]), density, c2, g2)]
        holes = []
    elif kind == "box_with_hole":
        base, grad = color([0.3, 0.7, 0.4])
        half = np.full(3, radius * 0.8)
        solids = [Solid("box", np.zeros(3), half, density, base, grad)]
        holes = [(np.zeros(3), np.array([0.0, 0.0, 1.0]), float(params.get("hole_radius", 0.35 * radius)))]
    else:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    echo = dict(radius=radius, density=density, textured=textured, **{k: v for k, v in params.items()
                                                                     if k not in ("radius", "density", "textured")})
    return AnalyticScene(kind, solids, holes, echo)


def _crossings(scene: AnalyticScene, origins, dirs) -> np.ndarray:
    """Ray parameters where the analytic density can change: solid and hole boundaries.

    Returns ``(B, n)``; NaN where a ray misses a boundary.
    """
    out = []
    for s in scene.solids:
        rel = origins - s.center
        if s.kind == "sphere":
            b = np.einsum("bi,bi->b", rel, dirs)
            disc = b * b - (np.einsum("bi,bi->b", rel, rel) - s.size[0] ** 2)
            root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            out += [-b - root, -b + root]
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-s.size - rel) / dirs
                t1 = (s.size - rel) / dirs
            out += [t0[:, i] for i in range(3)] + [t1[:, i] for i in range(3)]
    for p, axis, r in scene.holes:
        rel = origins - p
        rr = rel - np.outer(rel @ axis, axis)
        dr = dirs - np.outer(dirs @ axis, axis)
        a = np.einsum("bi,bi->b", dr, dr)
        b = np.einsum("bi,bi->b", rr, dr)
        c = np.einsum("bi,bi->b", rr, rr) - r * r
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            root = np.sqrt(np.where((disc >= 0) & (a > 0), disc, np.nan))
            out += [(-b - root) / a, (-b + root) / a]
    return np.stack(out, axis=1) if out else np.zeros((len(origins), 0))


def oracle_colors(scene: AnalyticScene, origins, dirs, samples: int, background) -> np.ndarray:
    """Ray marching of the analytic fields inside the scene box.

    The box span is cut into ``samples`` equal intervals, which are further
    split wherever the ray crosses a solid or hole boundary. Density is then
    constant on every piece, so transmittance is exact; color is taken at each
    piece's midpoint.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples per ray")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lo, hi = scene.bbox()
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    tmin = np.nanmax(np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)), axis=1)
    tmax = np.nanmin(np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)), axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    tmax = np.where(hit, tmax, tmin)
    cross = _crossings(scene, origins, dirs)
    out = np.empty((len(origins), 3))
    bg = np.asarray(background, dtype=np.float64)
    for start in range(0, len(origins), 512):
        sl = slice(start, start + 512)
        lo_t, hi_t = tmin[sl, None], tmax[sl, None]
        grid = lo_t + (hi_t - lo_t) * np.arange(samples + 1) / samples
        extra = cross[sl]
        extra = np.where(np.isfinite(extra), np.clip(extra, lo_t, hi_t), hi_t)
        edges = np.sort(np.concatenate([grid, extra], axis=1), axis=1)
        length = np.diff(edges, axis=1)
        mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
        x = origins[sl, None, :] + mid[..., None] * dirs[sl, None, :]
        sigma = scene.density(x)
        rgb = scene.color(x)
        alpha = 1.0 - np.exp(-sigma * length)
        trans = np.cumprod(1.0 - alpha, axis=1)
        tau = np.concatenate([np.ones((len(mid), 1)), trans[:, :-1]], axis=1)
        out[sl] = np.einsum("bm,bmc->bc", tau * alpha, rgb) + trans[:, -1:] * bg
    return out


def oracle_render(scene: AnalyticScene, camera: CameraModel, samples: int = 256, background=(0.0, 0.0, 0.0)) -> ImageBuffer:
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    dirs = pixel_directions(camera, px.ravel(), py.ravel())
    origins = np.broadcast_to(camera.center, dirs.shape)
    colors = oracle_colors(scene, origins, dirs, samples, background)
    return ImageBuffer(np.clip(colors, 0.0, 1.0).reshape(camera.height, camera.width, 3))


# -- surface sampling and coverage -------------------------------------------

def _sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _on_surface(scene: AnalyticScene, pts: np.ndarray, owner: int) -> np.ndarray:
    """Drop samples hidden inside another solid or inside a hole."""
    keep = ~scene.in_hole(pts)
    for i, s in enumerate(scene.solids):
        if i != owner:
            keep &= ~s.contains(pts)
    return keep


def _raw_surface(scene: AnalyticScene, n: int, rng) -> np.ndarray:
    areas = []
    for s in scene.solids:
        if s.kind == "sphere":
            areas.append(4 * math.pi * s.size[0] ** 2)
        else:
            a, b, c = 2 * s.size
            areas.append(2 * (a * b + b * c + a * c))
    counts = rng.multinomial(n, np.array(areas) / sum(areas))
    out = []
    for i, (s, m) in enumerate(zip(scene.solids, counts)):
        if s.kind == "sphere":
            pts = s.center + s.size[0] * _sphere_dirs(rng, m)
        else:
            e = 2 * s.size
            face_area = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]] * 2)
            face = rng.choice(6, size=m, p=face_area / face_area.sum())
            pts = rng.uniform(-1, 1, size=(m, 3)) * s.size
            axis = face % 3
            sign = np.where(face < 3, 1.0, -1.0)
            pts[np.arange(m), axis] = sign * s.size[axis]
            pts = pts + s.center
        out.append(pts[_on_surface(scene, pts, i)])
    return np.concatenate(out) if out else np.zeros((0, 3))


def sample_surface_points(scene: AnalyticScene, n: int, seed: int = 0, cap_axis=None,
                          cap_angle_deg: float = 0.0) -> np.ndarray:
    """``n`` area-uniform surface samples, then optionally drop a cap.

    The cap is the set of points whose direction from their solid's center is
    within ``cap_angle_deg`` of ``cap_axis`` (sphere solids only), so fewer
    than ``n`` points are returned when a cap is removed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _raw_surface(scene, n, rng)
    if cap_axis is not None and cap_angle_deg > 0:
        pts = pts[~in_cap(scene, pts, cap_axis, cap_angle_deg)]
    return pts


def in_cap(scene: AnalyticScene, pts, cap_axis, cap_angle_deg: float) -> np.ndarray:
    axis = np.asarray(cap_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    cos_lim = math.cos(math.radians(cap_angle_deg))
    mask = np.zeros(len(pts), bool)
    for s in scene.solids:
        if s.kind != "sphere":
            continue
        rel = pts - s.center
        r = np.linalg.norm(rel, axis=1)
        on = np.abs(r - s.size[0]) < 1e-6 * max(1.0, s.size[0])
        mask |= on & (rel @ axis >= cos_lim * r)
    return mask


def outlier_points(scene: AnalyticScene, n: int, seed: int = 0, margin: float = 0.3,
                   pad: float = 0.8) -> np.ndarray:
    """``n`` points uniform in the scene bounding box grown by ``pad``, rejecting
    any that lie inside a solid or within ``margin`` of the surface."""
    if n < 0 or margin < 0 or pad <= margin:
        raise ValueError("need n >= 0 and 0 <= margin < pad")
    rng = np.random.default_rng(seed)
    lo, hi = scene.bbox()
    lo, hi = lo - pad, hi + pad
    tree = cKDTree(sample_surface_points(scene, 50_000, seed + 1))
    out = np.zeros((0, 3))
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(4 * n + 16, 3))
        ok = scene.density(cand) == 0
        ok[ok] = tree.query(cand[ok])[0] > margin
        out = np.concatenate([out, cand[ok]])
    return out[:n]


COVERAGE_SAMPLES = 10_000
COVERAGE_SEED = 20240601


def coverage(positions, scene: AnalyticScene, tolerance: float) -> float:
    """Fraction of fixed surface samples with a cloud point within ``tolerance``."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return 0.0
    probe = sample_surface_points(scene, COVERAGE_SAMPLES, COVERAGE_SEED)
    dist, _ = cKDTree(positions).query(probe)
    return float(np.mean(dist <= tolerance))


# -- datasets -------------------------------------------------------------------

@dataclass
class DepthView:
    depth: np.ndarray  # (H, W) camera-space z, 0 = no surface
    prob: np.ndarray  # (H, W, P)
    planes: np.ndarray  # (P,)


@dataclass
class View:
    camera: CameraModel
    image: ImageBuffer
    split: str
    depth: DepthView | None = None


@dataclass
class SceneDataset:
    scene: AnalyticScene
    views: list[View]
    background: np.ndarray

    def split(self, name: str) -> list[View]:
        return [v for v in self.views if v.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")


def spiral_cameras(n: int, size: int, radius: float = 4.0, fov_deg: float = 40.0, offset: float = 0.0):
    """Cameras on a Fibonacci spiral over the view sphere, all looking at the origin."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        y = 1.0 - 2.0 * (i + 0.5 + offset) / (n + 2 * offset)
        y = float(np.clip(y, -0.9, 0.9))
        r = math.sqrt(1.0 - y * y)
        theta = golden * (i + offset * 7.3)
        eye = radius * np.array([r * math.cos(theta), y, r * math.sin(theta)])
        cams.append(CameraModel.look_at(eye, np.zeros(3), [0.0, 1.0, 0.0], f, f, size / 2, size / 2, size, size))
    return cams


def first_hit_depth(scene: AnalyticScene, camera: CameraModel, step: float = 1e-3) -> np.ndarray:
    """Camera-space depth of the first point with positive density per pixel (0 if none)."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    dirs = pixel_directions(camera, px.ravel(), py.ravel())
    origin = camera.center
    lo, hi = scene.bbox()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    dmax = np.linalg.norm(corners - origin, axis=1).max()
    ts = np.arange(0.0, dmax + step, step)
    depth = np.zeros(len(dirs))
    for start in range(0, len(dirs), 256):
        d = dirs[start:start + 256]
        occ = scene.density(origin + ts[None, :, None] * d[:, None, :]) > 0
        any_hit = occ.any(axis=1)
        idx = np.argmax(occ, axis=1)
        a = np.where(any_hit, ts[np.maximum(idx - 1, 0)], 0.0)
        b = np.where(any_hit, ts[idx], 0.0)
        for _ in range(60):
            mid = 0.5 * (a + b)
            inside = scene.density(origin + mid[:, None] * d) > 0
            b = np.where(inside, mid, b)
            a = np.where(inside, a, mid)
        t_hit = np.where(any_hit, b, 0.0)
        cos = d @ camera.rotation[2]
        depth[start:start + 256] = t_hit * cos
    return depth.reshape(camera.height, camera.width)


def probability_volume(depth: np.ndarray, planes: np.ndarray) -> np.ndarray:
    """Per-pixel Gaussian over depth planes (std = one plane spacing), normalized to sum 1."""
    spacing = planes[1] - planes[0]
    g = np.exp(-0.5 * ((planes[None, None, :] - depth[..., None]) / spacing) ** 2)
    g = np.where(depth[..., None] > 0, g, 0.0)
    total = g.sum(axis=-1, keepdims=True)
    return np.where(total > 0, g / np.where(total > 0, total, 1.0), 0.0)


def make_dataset(scene: AnalyticScene, n_train: int, n_test: int, size: int, seed: int = 0,
                 with_depth: bool = False, samples: int = 256, background=(0.0, 0.0, 0.0),
                 n_planes: int = 64, camera_radius: float = 4.0) -> SceneDataset:
    if n_train < 1 or n_test < 1 or size < 1:
        raise ValueError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    offset = float(rng.uniform(0.0, 0.5))
    train = spiral_cameras(n_train, size, camera_radius, offset=offset)
    test = spiral_cameras(n_test, size, camera_radius, offset=offset + 0.5)
    views = []
    lo, hi = scene.bbox()
    planes = None
    if with_depth:
        near = max(camera_radius - float(np.max(np.abs(np.concatenate([lo, hi])))) * math.sqrt(3), 0.1)
        far = camera_radius + float(np.max(np.abs(np.concatenate([lo, hi])))) * math.sqrt(3)
        planes = np.linspace(near, far, n_planes)
    for split, cams in (("train", train), ("test", test)):
        for cam in cams:
            image = oracle_render(scene, cam, samples, background)
            dv = None
            if with_depth:
                depth = first_hit_depth(scene, cam)
                dv = DepthView(depth, probability_volume(depth, planes), planes)
            views.append(View(cam, image, split, dv))
    return SceneDataset(scene, views, np.asarray(background, dtype=np.float64))


def save_dataset(ds: SceneDataset, out) -> None:
    """Write ``cameras.txt``, ``train/####.ppm``, ``test/####.ppm``, optional depth/probvol, ``scene.txt``."""
    from .pointgen import write_pfm, write_probvol

    out = Path(out)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    cams = {}
    for view_id, v in enumerate(ds.views):
        cams[view_id] = v.camera
        write_ppm(out / v.split / f"{view_id:04d}.ppm", v.image)
        if v.depth is not None:
            (out / "depth").mkdir(exist_ok=True)
            (out / "probvol").mkdir(exist_ok=True)
            write_pfm(out / "depth" / f"{view_id:04d}.pfm", v.depth.depth)
            write_probvol(out / "probvol" / f"{view_id:04d}.bin", v.depth.prob, v.depth.planes)
    write_cameras(out / "cameras.txt", cams)
    lines = [f"kind = {ds.scene.kind}"] + [f"{k} = {v}" for k, v in sorted(ds.scene.params.items())]
    lines.append("background = " + " ".join(repr(float(c)) for c in ds.background))
    (out / "scene.txt").write_text("\n".join(lines) + "\n")


def load_dataset_views(root) -> tuple[dict[int, CameraModel], list[tuple[int, str, ImageBuffer]]]:
    """Cameras and ``(view_id, split, image)`` triples of a saved dataset directory."""
    root = Path(root)
    cams = read_cameras(root / "cameras.txt")
    views = []
    for split in ("train", "test"):
        for path in sorted((root / split).glob("*.ppm")):
            views.append((int(path.stem), split, read_ppm(path)))
    return cams, views


def read_scene_echo(root) -> dict:
    out = {}
    for line in (Path(root) / "scene.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
