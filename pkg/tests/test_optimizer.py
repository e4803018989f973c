import math

import numpy as np
import pytest

from pointnerf.field import NeuralPointCloud, RadianceFieldParams
from pointnerf.harness import coverage, make_dataset, make_scene, sample_surface_points
from pointnerf.nnet import logit, sigmoid
from pointnerf.optimizer import (FEATURES, LOGITS, GrowCandidate, SceneState, TrainConfig, TrainingAborted,
                                 DegenerateSceneError, collect_grow_candidates, grow, grow_pass,
                                 mean_spacing, prune, prune_pass, render_loss, sparsity_grad_gamma, sparsity_loss,
                                 train, train_step, write_metrics)
from pointnerf.pointgen import init_cloud
from pointnerf.renderer import RayMarchState, camera_rays


def test_render_loss():
    a = np.random.default_rng(0).uniform(size=(7, 3))
    assert render_loss(a, a) == 0.0
    assert render_loss(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)
    b = np.random.default_rng(1).uniform(size=(7, 3))
    assert render_loss(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 21, abs=1e-12)
    with pytest.raises(ValueError):
        render_loss(a, a[:5])


def test_sparsity_loss_examples():
    assert sparsity_loss([0.5, 0.5]) == pytest.approx(-2 * math.log(2), abs=1e-12)
    assert sparsity_loss([0.1]) == pytest.approx(math.log(0.1) + math.log(0.9), abs=1e-12)
    assert sparsity_grad_gamma([0.5])[0] == 0.0
    g = np.random.default_rng(2).uniform(1e-6, 1 - 1e-6, 500)
    assert sparsity_loss(g) <= -2 * math.log(2) + 1e-12
    assert np.isfinite(sparsity_loss([0.0, 1.0]))


def test_sparsity_gradient_sign_and_fd():
    g = np.array([0.05, 0.3, 0.49, 0.51, 0.7, 0.95])
    grad = sparsity_grad_gamma(g)
    # descent direction -grad moves gamma away from 0.5
    assert np.all(np.sign(-grad) == np.sign(g - 0.5))
    h = 1e-7
    for i in range(len(g)):
        gp, gm = g.copy(), g.copy()
        gp[i] += h
        gm[i] -= h
        assert grad[i] == pytest.approx((sparsity_loss(gp) - sparsity_loss(gm)) / (2 * h), rel=1e-6)
    assert sparsity_grad_gamma([1e-5, 1 - 1e-6]).tolist() == [0.0, 0.0]


def cloud_with_gammas(gammas, D=3):
    n = len(gammas)
    return NeuralPointCloud(np.arange(3 * n, dtype=float).reshape(n, 3), np.arange(n * D, dtype=float).reshape(n, D),
                            logit(np.asarray(gammas, dtype=float)))


def test_prune_examples():
    c, removed, keep = prune(cloud_with_gammas([0.05, 0.5, 0.09]), 0.1)
    assert removed == 2 and len(c) == 1
    np.testing.assert_array_equal(c.positions, [[3, 4, 5]])
    np.testing.assert_array_equal(c.features, [[3, 4, 5]])
    orig = cloud_with_gammas([0.2, 0.5])
    same, removed, _ = prune(orig, 0.1)
    assert removed == 0 and same is orig
    with pytest.raises(DegenerateSceneError):
        prune(cloud_with_gammas([0.01, 0.02]), 0.1)
    with pytest.raises(ValueError):
        prune(orig, 1.0)


def test_prune_oracle_and_idempotent(rng):
    g = rng.uniform(0.01, 0.99, 300)
    c, removed, _ = prune(cloud_with_gammas(g), 0.3)
    expected = [i for i in range(300) if sigmoid(logit(g[i])) >= 0.3]
    np.testing.assert_array_equal(c.positions[:, 0], np.array(expected) * 3.0)
    assert removed == 300 - len(expected)
    c2, removed2, _ = prune(c, 0.3)
    assert removed2 == 0 and len(c2) == len(c)


def march_state(alpha_rows, xs_rows):
    alpha = np.array(alpha_rows, dtype=float)
    B, M = alpha.shape
    z = np.zeros((B, M))
    return RayMarchState(z, np.array(xs_rows, dtype=float), z, z, np.zeros((B, M, 3)), alpha, z + 1,
                         alpha > 0, np.ones(B), np.zeros((B, 3)), np.zeros(3), z.astype(bool))


def test_collect_candidates_examples():
    far = cloud_with_gammas([0.5])
    far.positions[:] = 100.0
    xs = [[[0, 0, 1], [0, 0, 2], [0, 0, 3]], [[1, 0, 1], [1, 0, 2], [1, 0, 3]]]
    st = march_state([[0.1, 0.8, 0.3], [0.2, 0.6, 0.5]], xs)
    cands = collect_grow_candidates(st, far, 0.7, 0.5)
    assert len(cands) == 1
    np.testing.assert_array_equal(cands[0].location, [0, 0, 2])
    assert cands[0].alpha == 0.8 and cands[0].ray_id == 0
    on_point = cloud_with_gammas([0.5])
    on_point.positions[:] = [0, 0, 2]
    assert collect_grow_candidates(st, on_point, 0.7, 0.0) == []
    # ray ids continue across batches
    two = collect_grow_candidates([st, st], far, 0.7, 0.5)
    assert [c.ray_id for c in two] == [0, 2]


def test_grow_examples(rng):
    base = NeuralPointCloud(rng.normal(size=(20, 3)), rng.normal(size=(20, 4)), np.zeros(20))
    same, added = grow(base, [], 0.1)
    assert added == 0 and same is base
    loc = np.array([5.0, 5.0, 5.0])
    g, added = grow(base, [GrowCandidate(loc, 0.9, 9.0, 0)], 0.1, K=3)
    assert added == 1 and len(g) == 21
    d = np.linalg.norm(base.positions - loc, axis=1)
    idx = np.argsort(d)[:3]
    w = (1 / d[idx]) / (1 / d[idx]).sum()
    np.testing.assert_allclose(g.features[-1], w @ base.features[idx], rtol=1e-12)
    assert g.gammas[-1] == pytest.approx(0.3, abs=1e-12)
    np.testing.assert_array_equal(g.features[:20], base.features)


def test_grow_dedupe_greedy_in_ray_order(rng):
    base = NeuralPointCloud(np.zeros((1, 3)), np.ones((1, 2)), np.zeros(1))
    cands = [GrowCandidate(np.array([1.05, 0, 0]), 0.9, 1.0, 3),
             GrowCandidate(np.array([1.0, 0, 0]), 0.9, 1.0, 1),
             GrowCandidate(np.array([3.0, 0, 0]), 0.9, 3.0, 2),
             GrowCandidate(np.array([0.05, 0, 0]), 0.9, 0.05, 0)]
    g, added = grow(base, cands, 0.2)
    assert added == 2
    np.testing.assert_array_equal(g.positions[1:], [[1.0, 0, 0], [3.0, 0, 0]])
    # every accepted point is farther than T_dist from everything before it
    for i in range(1, len(g)):
        assert np.linalg.norm(g.positions[:i] - g.positions[i], axis=1).min() > 0.2


def tiny_setup(n_points=300, size=16, D=8, cfg=None, seed=0):
    scene = make_scene("sphere", seed=0)
    ds = make_dataset(scene, 4, 1, size, seed=0, samples=64)
    pts = sample_surface_points(scene, n_points, seed=1)
    cloud = init_cloud(pts, D=D)
    params = RadianceFieldParams(feature_dim=D, c2=16, hidden_f=32, hidden_t=16, hidden_r=16, seed=seed)
    cfg = cfg or TrainConfig(batch_rays=64, iterations=20)
    return SceneState(cloud, params, cfg), [(v.camera, v.image) for v in ds.train], scene


def test_zero_loss_leaves_parameters_unchanged():
    st, views, _ = tiny_setup(cfg=TrainConfig(sparsity_weight=0.0, batch_rays=32))
    st.set_cloud(NeuralPointCloud(st.cloud.positions, st.cloud.features, np.zeros(len(st.cloud))))
    cam = views[0][0]
    o, d = camera_rays(cam)
    o, d = o[:40], d[:40]
    from pointnerf.renderer import render_rays
    gt = render_rays(st.cloud, st.grid(0, cam), st.params, o, d, st.render_options(0, cam)).color
    before = {n: st.params.store[n].copy() for n in st.params.store.names()}
    feats = st.cloud.features.copy()
    rep = train_step(st, 0, cam, o, d, gt)
    assert rep.L_render == 0.0
    for n in before:
        np.testing.assert_array_equal(before[n], st.params.store[n])
    np.testing.assert_array_equal(feats, st.cloud.features)
    assert st.adam.t == 1


def test_single_pixel_overfit_decreases():
    st, views, _ = tiny_setup()
    cam, img = views[0]
    o, d = camera_rays(cam)
    k = np.array([8 * 16 + 8])
    gt = img.pixels.reshape(-1, 3)[k]
    losses = [train_step(st, 0, cam, o[k], d[k], gt, i).L_render for i in range(50)]
    violations = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert violations <= 5 and losses[-1] < losses[0]


def test_loss_decomposition_and_positions_fixed():
    st, views, _ = tiny_setup(cfg=TrainConfig(batch_rays=64, iterations=10))
    pos = st.cloud.positions.copy()
    reps = train(st, views)
    for r in reps:
        assert r.L_opt == pytest.approx(r.L_render + 2e-3 * r.L_sparse, abs=1e-12)
    np.testing.assert_array_equal(st.cloud.positions, pos)


def test_deterministic_logs(tmp_path):
    logs = []
    for i in range(2):
        st, views, _ = tiny_setup(cfg=TrainConfig(batch_rays=64, iterations=8, prune_grow_interval=4))
        write_metrics(tmp_path / f"m{i}.csv", train(st, views))
        logs.append((tmp_path / f"m{i}.csv").read_text())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == "iter,L_render,L_sparse,L_opt,psnr,n_points,pruned,grown"


def test_interval_beyond_iterations_keeps_points():
    st, views, _ = tiny_setup(cfg=TrainConfig(batch_rays=32, iterations=6, prune_grow_interval=100))
    n = len(st.cloud)
    assert all(r.n_points == n for r in train(st, views))


def test_nan_aborts_with_dump():
    st, views, _ = tiny_setup()
    st.points.params[FEATURES][:] = np.nan
    cam, img = views[0]
    o, d = camera_rays(cam)
    with pytest.raises(TrainingAborted) as exc:
        train_step(st, 0, cam, o, d, img.pixels.reshape(-1, 3))
    assert "logits" in exc.value.dump


def test_adam_moments_follow_prune_and_grow():
    st, views, _ = tiny_setup()
    train(st, views, iterations=3)
    m_before = st.conf_adam.m[LOGITS].copy()
    logits = st.points.params[LOGITS]
    logits[:5] = logit(0.01)
    removed = prune_pass(st)
    assert removed == 5
    np.testing.assert_array_equal(st.conf_adam.m[LOGITS], m_before[5:])
    assert st.point_adam.m[FEATURES].shape == st.cloud.features.shape
    n = len(st.cloud)
    st.cfg.t_opacity = 0.0
    added = grow_pass(st, views, np.random.default_rng(0))
    assert len(st.cloud) == n + added
    if added:
        assert np.all(st.conf_adam.m[LOGITS][n:] == 0)
        assert np.all(st.point_adam.v[FEATURES][n:] == 0)
    train(st, views, iterations=2)


def test_grown_points_satisfy_thresholds():
    st, views, _ = tiny_setup()
    train(st, views, iterations=5)
    st.cfg.t_opacity = 0.05
    before = st.cloud.positions.copy()
    t_dist = mean_spacing(before)
    grow_pass(st, views, np.random.default_rng(0))
    new = st.cloud.positions[len(before):]
    for i, p in enumerate(new):
        prior = np.concatenate([before, new[:i]])
        assert np.linalg.norm(prior - p, axis=1).min() > t_dist


def plate_params(D, c2=8):
    """Density concentrated on the plane z = 0, exactly representable by the F/T ReLU layers.

    Feature channel 0 carries each point's own z, so F sees z = (x - p)_z + f_0 and
    emits |z| in channel 0; T maps it to softplus(200 - 1e4 |z|).
    """
    p = RadianceFieldParams(feature_dim=D, c2=c2, hidden_f=16, hidden_t=4, hidden_r=8, seed=0)
    s = p.store.params
    for n in p.store.names():
        if n.startswith(("F.", "T.")):
            s[n][...] = 0.0
    rel_z, f0 = 2 * 13, 39  # encoded layout: 13 entries per relative-position component
    s["F.w0"][[rel_z, f0], 0] = 1.0
    s["F.w0"][[rel_z, f0], 1] = -1.0
    s["F.w1"][:2, 0] = 1.0
    s["T.w0"][0, 0] = 1.0
    s["T.w1"][0, 0] = -1e4
    s["T.b1"][0] = 200.0
    return p


def test_sparse_start_growing_increases_coverage():
    from pointnerf.core import CameraModel
    from pointnerf.harness import AnalyticScene, Solid
    plate = AnalyticScene("plate", [Solid("box", np.zeros(3), np.array([1.0, 1.0, 0.002]), 50.0, np.ones(3) * 0.5)])
    pts = sample_surface_points(plate, 150, seed=3)
    pts = pts[np.abs(pts[:, 2]) > 0.0019]  # top and bottom faces only
    t_dist = mean_spacing(pts) / 2
    feats = np.zeros((len(pts), 4))
    feats[:, 0] = pts[:, 2]
    cloud = NeuralPointCloud(pts, feats, np.full(len(pts), logit(0.9)))
    cams = [CameraModel.look_at(eye, [0, 0, 0], [0, 1, 0], 30, 30, 16, 16, 32, 32)
            for eye in ([0.3, -0.2, 3.0], [-1.5, 0.4, 2.5], [1.2, 1.1, 2.4], [0.2, -1.6, 2.2])]
    views = [(c, None) for c in cams]
    cfg = TrainConfig(t_opacity=0.5, t_dist=t_dist, step=0.01, max_samples=400, K=4, grow_rays_per_view=60)
    st = SceneState(cloud, plate_params(4), cfg)
    covs = [coverage(st.cloud.positions, plate, t_dist)]
    rng = np.random.default_rng(0)  # fresh ray subsets each cycle
    for _ in range(3):
        n = len(st.cloud)
        assert grow_pass(st, views, rng) > 0
        assert np.abs(st.cloud.positions[n:, 2]).max() <= 0.02
        covs.append(coverage(st.cloud.positions, plate, t_dist))
    assert all(b > a for a, b in zip(covs, covs[1:])), covs
