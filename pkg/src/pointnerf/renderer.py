"""Differentiable volume rendering of the point field along camera rays."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import CameraModel, ImageBuffer, Ray, pixel_directions
from .field import NeuralPointCloud, RadianceFieldParams, shade_backward, shade_batch
from .spatial_index import PerspectiveGrid, QueryConfig, query_neighbors_batch

ALPHA_MAX = 1.0 - 1e-10


@dataclass
class RenderOptions:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    step: float | None = None
    query: QueryConfig = field(default_factory=QueryConfig)
    max_samples: int = 64
    opacity_map: bool = False
    depth_map: bool = False
    chunk: int = 1024

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")

    @property
    def sample_step(self) -> float:
        return self.step if self.step is not None else self.query.R / 2.0


@dataclass
class RayMarchState:
    """Per-sample and per-ray quantities of a batch of marched rays.

    Dense ``(B, M)`` arrays hold retained, shaded samples in order of
    increasing t; unused slots have ``alpha = 0``.
    """

    ts: np.ndarray
    xs: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    tau: np.ndarray
    mask: np.ndarray
    tau_end: np.ndarray
    color: np.ndarray
    background: np.ndarray
    clamped: np.ndarray
    rows: np.ndarray = None
    cols: np.ndarray = None
    tape: object = None
    consumed: bool = False

    @property
    def weights(self) -> np.ndarray:
        return self.tau * self.alpha

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 - self.tau_end

    def expected_depth(self) -> np.ndarray:
        w = self.weights
        return (w * self.ts).sum(axis=1) / np.maximum(w.sum(axis=1), 1e-10)


def ray_box_interval(origins, dirs, lo, hi):
    """Slab-test intersection of rays with an axis-aligned box (t clamped at 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return np.maximum(tmin.max(axis=1), 0.0), tmax.min(axis=1)


def ray_bounds(cloud: NeuralPointCloud, grid: PerspectiveGrid, origins, dirs, R: float):
    """Parametric range where a sample can be within R of a registered point."""
    pts = cloud.positions[grid.point_ids]
    if len(pts) == 0:
        n = len(origins)
        return np.zeros(n), np.zeros(n)
    return ray_box_interval(origins, dirs, pts.min(axis=0) - R, pts.max(axis=0) + R)


def composite(sigma, rgb, deltas, background, mask=None):
    """Alpha-composite dense ``(B, M)`` samples front to back.

    Returns ``(color, alpha, tau, tau_end, clamped)``.
    """
    raw = 1.0 - np.exp(-sigma * deltas)
    clamped = raw > ALPHA_MAX
    alpha = np.minimum(raw, ALPHA_MAX)
    if mask is not None:
        alpha = np.where(mask, alpha, 0.0)
    trans = 1.0 - alpha
    tau = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        tau[:, 1:] = np.cumprod(trans[:, :-1], axis=1)
    tau_end = tau[:, -1] * trans[:, -1] if alpha.shape[1] else np.ones(alpha.shape[0])
    w = tau * alpha
    color = np.einsum("bm,bmc->bc", w, rgb) + tau_end[:, None] * background
    return color, alpha, tau, tau_end, clamped


def march_rays(cloud: NeuralPointCloud, grid: PerspectiveGrid, params: RadianceFieldParams,
               origins, dirs, t_near, t_far, opts: RenderOptions, record: bool = False) -> RayMarchState:
    grid.check_fresh(cloud)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    B = len(origins)
    step = opts.sample_step
    t_near = np.asarray(t_near, dtype=np.float64).reshape(B)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(B)
    span = np.where(t_far > t_near, t_far - t_near, 0.0)
    n = np.where(span > 0, np.maximum(np.ceil(span / step - 1e-12), 1), 0).astype(np.int64)

    # uniform midpoint samples, flattened ray-major
    ray_of = np.repeat(np.arange(B), n)
    j = np.arange(len(ray_of)) - np.repeat(np.cumsum(n) - n, n)
    ts = t_near[ray_of] + (j + 0.5) * step
    xs = origins[ray_of] + ts[:, None] * dirs[ray_of]
    keep = grid.near_occupied(xs) if len(xs) else np.zeros(0, bool)
    ray_of, ts, xs = ray_of[keep], ts[keep], xs[keep]

    # neighbor lookup; samples without neighbors are empty space (sigma = 0)
    sidx, pidx, dist = query_neighbors_batch(grid, cloud.positions, xs, opts.query.K, opts.query.R)
    has = np.zeros(len(xs), bool)
    has[sidx] = True
    remap = np.cumsum(has) - 1
    ray_of, ts, xs = ray_of[has], ts[has], xs[has]
    sidx = remap[sidx]

    # cap per ray
    first = np.searchsorted(ray_of, ray_of, side="left")
    col = np.arange(len(ray_of)) - first
    capped = col < opts.max_samples
    if not capped.all():
        keep_pair = capped[sidx]
        remap = np.cumsum(capped) - 1
        sidx, pidx, dist = remap[sidx[keep_pair]], pidx[keep_pair], dist[keep_pair]
        ray_of, ts, xs, col = ray_of[capped], ts[capped], xs[capped], col[capped]

    S = len(ray_of)
    if S:
        sigma_s, rgb_s, tape = shade_batch(cloud, params, xs, dirs[ray_of], sidx, pidx, dist, record)
    else:
        sigma_s, rgb_s, tape = np.zeros(0), np.zeros((0, 3)), None
    M = int(col.max()) + 1 if S else 0
    sigma = np.zeros((B, M))
    rgb = np.zeros((B, M, 3))
    tsd = np.zeros((B, M))
    xsd = np.zeros((B, M, 3))
    mask = np.zeros((B, M), bool)
    sigma[ray_of, col] = sigma_s
    rgb[ray_of, col] = rgb_s
    tsd[ray_of, col] = ts
    xsd[ray_of, col] = xs
    mask[ray_of, col] = True
    deltas = np.where(mask, step, 0.0)
    color, alpha, tau, tau_end, clamped = composite(sigma, rgb, deltas, opts.background, mask)
    return RayMarchState(tsd, xsd, deltas, sigma, rgb, alpha, tau, mask, tau_end, color,
                         opts.background, clamped, ray_of, col, tape)


def march_ray(cloud, grid, params, ray: Ray, opts: RenderOptions, record: bool = False):
    state = march_rays(cloud, grid, params, ray.origin[None], ray.direction[None],
                       [ray.t_near], [ray.t_far], opts, record)
    return state.color[0], state


def composite_backward(state: RayMarchState, d_color):
    """Gradients of the composited colors w.r.t. per-sample density and radiance."""
    d_color = np.asarray(d_color, dtype=np.float64).reshape(-1, 3)
    alpha, tau, rgb = state.alpha, state.tau, state.rgb
    B, M = alpha.shape
    behind = np.empty((B, M, 3))  # color seen behind sample j, normalized by its transmittance
    acc = np.broadcast_to(state.background, (B, 3)).copy()
    for j in range(M - 1, -1, -1):
        behind[:, j] = acc
        acc = alpha[:, j, None] * rgb[:, j] + (1.0 - alpha[:, j, None]) * acc
    d_alpha = np.einsum("bc,bmc->bm", d_color, rgb - behind) * tau
    d_sigma = np.where(state.mask & ~state.clamped, d_alpha * state.deltas * (1.0 - alpha), 0.0)
    d_rgb = (tau * alpha)[..., None] * d_color[:, None, :]
    return d_sigma, d_rgb


def backward_rays(state: RayMarchState, d_color, feature_grad=None, logit_grad=None) -> None:
    """Push d(loss)/d(color) through compositing and shading into all gradients."""
    if state.consumed:
        raise RuntimeError("ray state already consumed")
    if state.tape is None and len(state.rows):
        raise RuntimeError("ray state was marched without recording")
    state.consumed = True
    if not len(state.rows):
        return
    d_sigma, d_rgb = composite_backward(state, d_color)
    shade_backward(state.tape, d_sigma[state.rows, state.cols], d_rgb[state.rows, state.cols],
                   feature_grad, logit_grad)


backward_ray = backward_rays


def camera_rays(camera: CameraModel, px=None, py=None):
    if px is None:
        py, px = np.mgrid[0:camera.height, 0:camera.width]
        px, py = px.ravel(), py.ravel()
    dirs = pixel_directions(camera, px, py)
    origins = np.broadcast_to(camera.center, dirs.shape)
    return origins, dirs


def render_rays(cloud, grid, params, origins, dirs, opts: RenderOptions, record=False) -> RayMarchState:
    t0, t1 = ray_bounds(cloud, grid, origins, dirs, opts.query.R)
    return march_rays(cloud, grid, params, origins, dirs, t0, t1, opts, record)


def render_image(cloud: NeuralPointCloud, grid: PerspectiveGrid, params: RadianceFieldParams,
                 camera: CameraModel, opts: RenderOptions, threads: int = 1):
    """Render every pixel. Returns ``(image, aux)`` with optional opacity/depth maps in ``aux``.

    Work is split into fixed-size chunks independent of ``threads``, so the
    result is bit-identical for any thread count.
    """
    origins, dirs = camera_rays(camera)
    chunks = [slice(s, s + opts.chunk) for s in range(0, len(dirs), opts.chunk)]

    def run(sl):
        st = render_rays(cloud, grid, params, origins[sl], dirs[sl], opts)
        return st.color, st.opacity, st.expected_depth()

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(sl) for sl in chunks]
    h, w = camera.height, camera.width
    color = np.concatenate([r[0] for r in results]).reshape(h, w, 3)
    image = ImageBuffer(np.clip(color, 0.0, 1.0))
    aux = {}
    if opts.opacity_map:
        aux["opacity"] = np.concatenate([r[1] for r in results]).reshape(h, w)
    if opts.depth_map:
        aux["depth"] = np.concatenate([r[2] for r in results]).reshape(h, w)
    return image, aux
