"""Per-scene optimization: losses, Adam training loop, point pruning and growing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from . import nnet
from .core import CameraModel, ImageBuffer, mse_to_psnr, psnr
from .field import EPS_MIN, NeuralPointCloud, RadianceFieldParams
from .nnet import AdamState, ParameterStore, adam_step
from .renderer import RenderOptions, backward_rays, camera_rays, render_image, render_rays
from .spatial_index import PerspectiveGrid, QueryConfig, default_world_cell, perspective_cell_size

log = logging.getLogger(__name__)

GAMMA_CLAMP = (1e-4, 1.0 - 1e-4)
GROWN_GAMMA = 0.3
FEATURES = "points.features"
LOGITS = "points.logits"


@dataclass
class TrainConfig:
    lr: float = 5e-4
    confidence_lr: float | None = None  # Adam rate of the confidence logits; None: same as lr
    sparsity_weight: float = 2e-3
    batch_rays: int = 256
    iterations: int = 2000
    prune_grow_interval: int = 500
    prune_threshold: float = 0.1
    t_opacity: float = 0.7
    t_dist: float | None = None  # None: mean nearest-neighbor spacing at grow time
    grow_neighbors: int = 8
    grow_rays_per_view: int | None = None  # None: every pixel
    max_grow_cycles: int | None = None
    seed: int = 0
    K: int = 8
    R: float | None = None  # None: cell diagonal at median depth
    step: float | None = None  # None: R / 2
    points_per_cell: float = 4.0
    max_samples: int = 64
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.confidence_lr is not None and not self.confidence_lr > 0:
            raise ValueError("confidence_lr must be positive")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity weight must be non-negative")
        if not 0 < self.prune_threshold < 1:
            raise ValueError("prune threshold must be in (0, 1)")
        if not 0 <= self.t_opacity < 1:
            raise ValueError("T_opacity must be in [0, 1)")
        if self.t_dist is not None and self.t_dist < 0:
            raise ValueError("T_dist must be non-negative")
        if self.batch_rays < 1 or self.iterations < 0 or self.prune_grow_interval < 1:
            raise ValueError("batch, iterations and interval must be positive")


@dataclass
class LossReport:
    iteration: int
    L_render: float
    L_sparse: float
    L_opt: float
    psnr: float
    n_points: int
    pruned: int = 0
    grown: int = 0

    def csv_row(self) -> list:
        return [self.iteration, repr(self.L_render), repr(self.L_sparse), repr(self.L_opt),
                "inf" if math.isinf(self.psnr) else repr(self.psnr), self.n_points, self.pruned, self.grown]


CSV_HEADER = ["iter", "L_render", "L_sparse", "L_opt", "psnr", "n_points", "pruned", "grown"]


@dataclass
class GrowCandidate:
    location: np.ndarray
    alpha: float
    distance: float
    ray_id: int


class TrainingAborted(RuntimeError):
    def __init__(self, message, dump: dict):
        super().__init__(message)
        self.dump = dump


class DegenerateSceneError(RuntimeError):
    pass


# -- losses --------------------------------------------------------------------------

def render_loss(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def sparsity_loss(gammas) -> float:
    g = np.clip(np.asarray(gammas, dtype=np.float64), *GAMMA_CLAMP)
    if g.size == 0:
        return 0.0
    return float(np.mean(np.log(g) + np.log1p(-g)))


def sparsity_grad_gamma(gammas) -> np.ndarray:
    """d(sparsity_loss)/d(gamma); zero where the clamp is active."""
    g = np.asarray(gammas, dtype=np.float64)
    inside = (g > GAMMA_CLAMP[0]) & (g < GAMMA_CLAMP[1])
    gc = np.clip(g, *GAMMA_CLAMP)
    return np.where(inside, (1.0 / gc - 1.0 / (1.0 - gc)) / max(g.size, 1), 0.0)


# -- scene state ------------------------------------------------------------------------

class SceneState:
    """Cloud, field parameters, Adam state and per-camera index cache for one scene.

    Point features and confidence logits live in ``points`` (a ParameterStore)
    and the cloud shares those arrays, so Adam updates show up in the cloud
    without changing its generation.
    """

    def __init__(self, cloud: NeuralPointCloud, params: RadianceFieldParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.points = ParameterStore()
        self.adam = AdamState(lr=cfg.lr)
        self.point_adam = AdamState(lr=cfg.lr)
        self.conf_adam = AdamState(lr=cfg.lr if cfg.confidence_lr is None else cfg.confidence_lr)
        self._grids: dict[int, PerspectiveGrid] = {}
        self._cell: float | None = None
        self.set_cloud(cloud)

    def set_cloud(self, cloud: NeuralPointCloud, keep=None, n_new: int = 0) -> None:
        """Install a (possibly resized) cloud; remap Adam moments of surviving points."""
        self.points.set(FEATURES, cloud.features)
        self.points.set(LOGITS, cloud.confidence_logits)
        for name, adam in ((FEATURES, self.point_adam), (LOGITS, self.conf_adam)):
            for moments in (adam.m, adam.v):
                if name in moments and keep is not None:
                    old = moments[name][keep]
                    pad = np.zeros((n_new,) + old.shape[1:])
                    moments[name] = np.concatenate([old, pad])
                elif name in moments:
                    del moments[name]
        self.cloud = NeuralPointCloud(cloud.positions, self.points[FEATURES], self.points[LOGITS],
                                      cloud.generation)
        self._grids.clear()

    def grid(self, key, camera: CameraModel) -> PerspectiveGrid:
        grid = self._grids.get(key)
        if grid is None or grid.generation != self.cloud.generation:
            if self._cell is None:
                self._cell = default_world_cell(self.cloud.positions, camera, self.cfg.points_per_cell)
            size = perspective_cell_size(self.cloud.positions, camera, self._cell)
            grid = PerspectiveGrid(camera, size, self.cloud.positions, self.cloud.generation, 1, self._cell)
            self._grids[key] = grid
        return grid

    def render_options(self, key=None, camera=None) -> RenderOptions:
        cfg = self.cfg
        if cfg.R is None:
            if self._cell is None:
                self.grid(key, camera)
            R = self._cell * math.sqrt(3.0)
        else:
            R = cfg.R
        return RenderOptions(background=np.asarray(cfg.background, dtype=np.float64), step=cfg.step,
                             query=QueryConfig(cfg.K, R, 1), max_samples=cfg.max_samples)

    def render(self, key, camera: CameraModel, threads: int = 1) -> ImageBuffer:
        grid = self.grid(key, camera)
        return render_image(self.cloud, grid, self.params, camera, self.render_options(key, camera), threads)[0]

    def step(self) -> None:
        adam_step(self.params.store, self.adam)
        adam_step(self.points, self.point_adam, [FEATURES])
        adam_step(self.points, self.conf_adam, [LOGITS])


def loss_and_grads(state: SceneState, key, camera: CameraModel, origins, dirs, gt):
    """Forward + backward for one ray batch; gradients accumulate in the stores."""
    cfg = state.cfg
    grid = state.grid(key, camera)
    opts = state.render_options(key, camera)
    rs = render_rays(state.cloud, grid, state.params, origins, dirs, opts, record=True)
    gt = np.asarray(gt, dtype=np.float64)
    L_render = render_loss(rs.color, gt)
    gammas = state.cloud.gammas
    L_sparse = sparsity_loss(gammas)
    L_opt = L_render + cfg.sparsity_weight * L_sparse
    if not np.isfinite(L_opt):
        raise TrainingAborted("non-finite loss", {
            "L_render": L_render, "L_sparse": L_sparse, "color": rs.color, "sigma": rs.sigma,
            "features": state.cloud.features.copy(), "logits": state.cloud.confidence_logits.copy()})
    d_color = 2.0 * (rs.color - gt) / gt.size
    backward_rays(rs, d_color, state.points.grads[FEATURES], state.points.grads[LOGITS])
    if cfg.sparsity_weight:
        state.points.grads[LOGITS] += cfg.sparsity_weight * sparsity_grad_gamma(gammas) * gammas * (1 - gammas)
    return L_render, L_sparse, L_opt, rs


def train_step(state: SceneState, key, camera: CameraModel, origins, dirs, gt, iteration: int = 0) -> LossReport:
    """One Adam step on features, confidence logits and F/T/R weights (positions stay fixed)."""
    L_render, L_sparse, L_opt, _ = loss_and_grads(state, key, camera, origins, dirs, gt)
    state.step()
    return LossReport(iteration, L_render, L_sparse, L_opt, mse_to_psnr(L_render), len(state.cloud))


# -- pruning and growing --------------------------------------------------------------------

def prune(cloud: NeuralPointCloud, threshold: float = 0.1):
    """Drop points with confidence below ``threshold``; returns ``(cloud, removed, keep_mask)``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    keep = cloud.gammas >= threshold
    removed = int((~keep).sum())
    if removed == 0:
        return cloud, 0, keep
    if not keep.any():
        raise DegenerateSceneError(f"pruning at {threshold} would remove all {len(cloud)} points; "
                                   "lower the threshold or reduce the sparsity weight")
    return NeuralPointCloud(cloud.positions[keep], cloud.features[keep], cloud.confidence_logits[keep]), removed, keep


def mean_spacing(positions) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        return 0.0
    d, _ = cKDTree(positions).query(positions, k=2)
    return float(d[:, 1].mean())


def collect_grow_candidates(states, cloud: NeuralPointCloud, t_opacity: float, t_dist: float,
                            ray_offset: int = 0) -> list[GrowCandidate]:
    """At most one candidate per ray: its highest-opacity sample, if opaque and far from all points."""
    if isinstance(states, (list, tuple)):
        out, offset = [], ray_offset
        for st in states:
            out += collect_grow_candidates(st, cloud, t_opacity, t_dist, offset)
            offset += st.alpha.shape[0]
        return out
    st = states
    if st.alpha.shape[1] == 0:
        return []
    j = np.argmax(st.alpha, axis=1)
    rows = np.arange(st.alpha.shape[0])
    amax = st.alpha[rows, j]
    sel = np.flatnonzero(amax > t_opacity)
    if len(sel) == 0:
        return []
    loc = st.xs[sel, j[sel]]
    if len(cloud):
        eps, _ = cKDTree(cloud.positions).query(loc)
    else:
        eps = np.full(len(sel), np.inf)
    return [GrowCandidate(loc[i], float(amax[r]), float(eps[i]), ray_offset + int(r))
            for i, r in enumerate(sel) if eps[i] > t_dist]


def grow(cloud: NeuralPointCloud, candidates, t_dist: float, K: int = 8):
    """Append accepted candidates; features by inverse-distance interpolation, confidence 0.3.

    Candidates are taken greedily in ray order and each must be farther than
    ``t_dist`` from the cloud and from every point accepted before it.
    Returns ``(cloud, added)``.
    """
    if not candidates:
        return cloud, 0
    cands = sorted(candidates, key=lambda c: c.ray_id)
    tree = cKDTree(cloud.positions) if len(cloud) else None
    accepted = []
    for c in cands:
        if tree is not None and tree.query(c.location)[0] <= t_dist:
            continue
        if any(np.linalg.norm(c.location - a) <= t_dist for a in accepted):
            continue
        accepted.append(c.location)
    if not accepted:
        return cloud, 0
    new_pos = np.array(accepted)
    if tree is not None:
        k = min(K, len(cloud))
        d, idx = tree.query(new_pos, k=k)
        d, idx = d.reshape(len(new_pos), k), idx.reshape(len(new_pos), k)
        w = 1.0 / np.maximum(d, EPS_MIN)
        w /= w.sum(axis=1, keepdims=True)
        new_feat = np.einsum("nk,nkd->nd", w, cloud.features[idx])
    else:
        new_feat = np.zeros((len(new_pos), cloud.feature_dim))
    new_logit = np.full(len(new_pos), float(nnet.logit(GROWN_GAMMA)))
    grown = NeuralPointCloud(np.concatenate([cloud.positions, new_pos]),
                             np.concatenate([cloud.features, new_feat]),
                             np.concatenate([cloud.confidence_logits, new_logit]))
    return grown, len(new_pos)


def grow_pass(state: SceneState, views, rng) -> int:
    """Render training views, collect candidates and grow; returns the number of added points."""
    cfg = state.cfg
    t_dist = cfg.t_dist if cfg.t_dist is not None else mean_spacing(state.cloud.positions)
    cands = []
    offset = 0
    for key, (camera, _) in enumerate(views):
        origins, dirs = camera_rays(camera)
        if cfg.grow_rays_per_view is not None and cfg.grow_rays_per_view < len(dirs):
            sel = np.sort(rng.choice(len(dirs), cfg.grow_rays_per_view, replace=False))
            origins, dirs = origins[sel], dirs[sel]
        grid = state.grid(key, camera)
        opts = state.render_options(key, camera)
        for start in range(0, len(dirs), opts.chunk):
            sl = slice(start, start + opts.chunk)
            rs = render_rays(state.cloud, grid, state.params, origins[sl], dirs[sl], opts)
            cands += collect_grow_candidates(rs, state.cloud, cfg.t_opacity, t_dist, offset)
            offset += len(dirs[sl])
    new_cloud, added = grow(state.cloud, cands, t_dist, cfg.grow_neighbors)
    if added:
        state.set_cloud(new_cloud, keep=np.ones(len(state.cloud), bool), n_new=added)
    return added


def prune_pass(state: SceneState) -> int:
    new_cloud, removed, keep = prune(state.cloud, state.cfg.prune_threshold)
    if removed:
        state.set_cloud(new_cloud, keep=keep, n_new=0)
    return removed


# -- training loop ------------------------------------------------------------------------

def view_pixels(image: ImageBuffer) -> np.ndarray:
    return image.pixels.reshape(-1, 3)


def train(state: SceneState, views, iterations: int | None = None, log_every: int = 1,
          callback=None) -> list[LossReport]:
    """Run the optimization loop over ``views`` = list of (camera, ImageBuffer).

    Every ``prune_grow_interval`` iterations the cloud is pruned, then grown,
    and the index cache is rebuilt.
    """
    cfg = state.cfg
    n_iter = cfg.iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed)
    rays = [camera_rays(cam) for cam, _ in views]
    targets = [view_pixels(img) for _, img in views]
    reports = []
    cycles = 0
    for it in range(1, n_iter + 1):
        key = int(rng.integers(len(views)))
        n_pix = len(targets[key])
        sel = rng.choice(n_pix, min(cfg.batch_rays, n_pix), replace=False)
        origins, dirs = rays[key]
        report = train_step(state, key, views[key][0], origins[sel], dirs[sel], targets[key][sel], it)
        if it % cfg.prune_grow_interval == 0 and (
                cfg.max_grow_cycles is None or cycles < cfg.max_grow_cycles):
            cycles += 1
            report.pruned = prune_pass(state)
            report.grown = grow_pass(state, views, rng)
            report.n_points = len(state.cloud)
            log.info("iter %d: pruned %d, grew %d, %d points", it, report.pruned, report.grown,
                     report.n_points)
        if it % log_every == 0 or report.pruned or report.grown:
            reports.append(report)
        if callback is not None:
            callback(report)
    return reports


def evaluate_views(state: SceneState, views, key_offset: int = 0, threads: int = 1) -> list[float]:
    """PSNR of each (camera, image) pair; cached grids keyed from ``key_offset``."""
    return [psnr(state.render(key_offset + i, cam, threads), img) for i, (cam, img) in enumerate(views)]


def write_metrics(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def config_items(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
