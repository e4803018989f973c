"""Point-based radiance field: per-point features, inverse-distance aggregation,
confidence-gated density and view-dependent radiance."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import nnet
from .nnet import MlpConfig, ParameterStore, Tape, encoded_width, positional_encode
from .spatial_index import PerspectiveGrid, QueryConfig, query_neighbors

EPS_MIN = 1e-6  # lower clamp on point-to-sample distance in 1/dist weights
FEATURE_DIM = 59

_generations = itertools.count(1)


class NeuralPointCloud:
    """Positions, features and confidence logits of N neural points.

    ``generation`` changes whenever points are added or removed; feature and
    confidence updates keep it, so spatial indices survive optimization steps.
    """

    def __init__(self, positions, features, confidence_logits, generation: int | None = None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        features = np.asarray(features, dtype=np.float64)
        logits = np.asarray(confidence_logits, dtype=np.float64).reshape(-1)
        if features.ndim != 2 or len(features) != n or len(logits) != n:
            raise ValueError(f"inconsistent point counts: positions {n}, features {features.shape}, "
                             f"logits {logits.shape}")
        self.features = features
        self.confidence_logits = logits
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        self.generation = next(_generations) if generation is None else generation

    @classmethod
    def empty(cls, D: int = FEATURE_DIM) -> "NeuralPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, D)), np.zeros(0))

    def __len__(self):
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def gammas(self) -> np.ndarray:
        return nnet.sigmoid(self.confidence_logits)

    def translated(self, offset) -> "NeuralPointCloud":
        return NeuralPointCloud(self.positions + np.asarray(offset), self.features.copy(),
                                self.confidence_logits.copy())

    def copy(self) -> "NeuralPointCloud":
        return NeuralPointCloud(self.positions.copy(), self.features.copy(),
                                self.confidence_logits.copy(), self.generation)


@dataclass(frozen=True)
class EncodingConfig:
    rel_freqs: int = 6
    dir_freqs: int = 4
    feat_freqs: int = 0


class RadianceFieldParams:
    """Configs and weights of the point network F, density head T and radiance head R."""

    def __init__(self, feature_dim: int = FEATURE_DIM, encoding: EncodingConfig = EncodingConfig(),
                 c2: int = 128, hidden_f: int = 256, hidden_t: int = 256, hidden_r: int = 128,
                 seed=0):
        self.feature_dim = feature_dim
        self.encoding = encoding
        self.c2 = c2
        self.rel_width = encoded_width(3, encoding.rel_freqs)
        f_in = self.rel_width + encoded_width(feature_dim, encoding.feat_freqs)
        self.F = MlpConfig((f_in, hidden_f, c2), "relu", "none")
        self.T = MlpConfig((c2, hidden_t, 1), "relu", "softplus")
        self.R = MlpConfig((c2 + encoded_width(3, encoding.dir_freqs), hidden_r, hidden_r, 3),
                           "relu", "sigmoid")
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        nnet.kaiming_init(self.F, rng, "F", self.store)
        nnet.kaiming_init(self.T, rng, "T", self.store)
        nnet.kaiming_init(self.R, rng, "R", self.store)

    def hyper(self) -> dict:
        e = self.encoding
        return dict(feature_dim=self.feature_dim, c2=self.c2, hidden_f=self.F.layer_widths[1],
                    hidden_t=self.T.layer_widths[1], hidden_r=self.R.layer_widths[1],
                    rel_freqs=e.rel_freqs, dir_freqs=e.dir_freqs, feat_freqs=e.feat_freqs)

    @classmethod
    def from_hyper(cls, hyper: dict, tensors: dict | None = None) -> "RadianceFieldParams":
        h = dict(hyper)
        enc = EncodingConfig(int(h.pop("rel_freqs")), int(h.pop("dir_freqs")), int(h.pop("feat_freqs")))
        params = cls(encoding=enc, **{k: int(v) for k, v in h.items()})
        if tensors is not None:
            for name in params.store.names():
                if tensors[name].shape != params.store[name].shape:
                    raise ValueError(f"shape mismatch for {name}")
                params.store.params[name][...] = tensors[name]
        return params


@dataclass
class ShadingResult:
    sigma: float
    radiance: np.ndarray
    point_sigmas: np.ndarray
    weights: np.ndarray
    neighbors: np.ndarray


# -- single-point operations ------------------------------------------------

def point_input(params: RadianceFieldParams, f_i, x_minus_p) -> np.ndarray:
    enc = params.encoding
    return np.concatenate([positional_encode(np.asarray(x_minus_p, dtype=np.float64), enc.rel_freqs),
                           positional_encode(np.asarray(f_i, dtype=np.float64), enc.feat_freqs)], axis=-1)


def per_point_feature(params: RadianceFieldParams, f_i, x_minus_p) -> np.ndarray:
    f_i = np.asarray(f_i, dtype=np.float64)
    if f_i.shape[-1] != params.feature_dim:
        raise ValueError(f"feature width {f_i.shape[-1]} != {params.feature_dim}")
    return nnet.mlp_forward(params.F, params.store, point_input(params, f_i, x_minus_p), prefix="F")


def normalized_weights(dists) -> np.ndarray:
    w = 1.0 / np.maximum(np.asarray(dists, dtype=np.float64), EPS_MIN)
    return w / w.sum()


def aggregate_feature(features, gammas, dists) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("empty neighbor list")
    if not (len(features) == len(gammas) == len(dists)):
        raise ValueError("length mismatch")
    coef = np.asarray(gammas, dtype=np.float64) * normalized_weights(dists)
    return coef @ features.reshape(len(coef), -1)


def density_at(params: RadianceFieldParams, features, gammas, dists):
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return 0.0, np.zeros(0)
    point_sigmas = nnet.mlp_forward(params.T, params.store, features, prefix="T")[:, 0]
    coef = np.asarray(gammas, dtype=np.float64) * normalized_weights(dists)
    return float(coef @ point_sigmas), point_sigmas


def radiance_at(params: RadianceFieldParams, f_x, d) -> np.ndarray:
    inp = np.concatenate([np.asarray(f_x, dtype=np.float64),
                          positional_encode(np.asarray(d, dtype=np.float64), params.encoding.dir_freqs)])
    return nnet.mlp_forward(params.R, params.store, inp, prefix="R")


def evaluate(cloud: NeuralPointCloud, grid: PerspectiveGrid, params: RadianceFieldParams,
             x, d, cfg: QueryConfig) -> ShadingResult:
    x = np.asarray(x, dtype=np.float64)
    nb = query_neighbors(grid, cloud, x, cfg)
    if len(nb) == 0:
        return ShadingResult(0.0, np.zeros(3), np.zeros(0), np.zeros(0), nb.indices)
    idx = nb.indices
    feats = np.stack([per_point_feature(params, cloud.features[i], x - cloud.positions[i]) for i in idx])
    gammas = cloud.gammas[idx]
    f_x = aggregate_feature(feats, gammas, nb.distances)
    sigma, point_sigmas = density_at(params, feats, gammas, nb.distances)
    rgb = radiance_at(params, f_x, d)
    return ShadingResult(sigma, rgb, point_sigmas, normalized_weights(nb.distances), idx)


# -- batched path used by the renderer ---------------------------------------

class ShadeTape:
    """Intermediates of one batched shading pass needed for the reverse pass."""

    def __init__(self):
        self.consumed = False


def shade_batch(cloud: NeuralPointCloud, params: RadianceFieldParams, xs, dirs,
                sample_idx, point_idx, dists, record: bool = False):
    """Density and radiance at ``S`` samples given their flattened neighbor lists.

    ``sample_idx`` must be sorted and cover every sample at least once.
    Returns ``(sigma (S,), rgb (S, 3), tape or None)``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    S = len(xs)
    enc = params.encoding
    rel = xs[sample_idx] - cloud.positions[point_idx]
    feats = cloud.features[point_idx]
    inp = np.concatenate([positional_encode(rel, enc.rel_freqs),
                          positional_encode(feats, enc.feat_freqs)], axis=1)
    store = params.store
    tf = Tape(params.F, store, "F") if record else None
    tt = Tape(params.T, store, "T") if record else None
    tr = Tape(params.R, store, "R") if record else None
    fpx = nnet.mlp_forward(params.F, store, inp, tf, "F")
    point_sigma = nnet.mlp_forward(params.T, store, fpx, tt, "T")[:, 0]

    w = 1.0 / np.maximum(dists, EPS_MIN)
    wsum = np.bincount(sample_idx, weights=w, minlength=S)
    wn = w / wsum[sample_idx]
    gam = nnet.sigmoid(cloud.confidence_logits[point_idx])
    coef = gam * wn
    P = len(point_idx)
    A = sparse.csr_matrix((coef, (sample_idx, np.arange(P))), shape=(S, P))
    f_x = A @ fpx
    sigma = A @ point_sigma
    rin = np.concatenate([f_x, positional_encode(dirs, enc.dir_freqs)], axis=1)
    rgb = nnet.mlp_forward(params.R, store, rin, tr, "R")
    if not record:
        return sigma, rgb, None
    tape = ShadeTape()
    tape.__dict__.update(tf=tf, tt=tt, tr=tr, A=A, fpx=fpx, point_sigma=point_sigma, wn=wn, gam=gam,
                         sample_idx=sample_idx, point_idx=point_idx, feats=feats, params=params,
                         n_points=len(cloud))
    return sigma, rgb, tape


def shade_backward(tape: ShadeTape, d_sigma, d_rgb, feature_grad: np.ndarray | None,
                   logit_grad: np.ndarray | None) -> None:
    """Reverse pass of :func:`shade_batch`.

    MLP gradients go to the parameter store; point feature and confidence-logit
    gradients are accumulated into the given arrays.
    """
    if tape.consumed:
        raise RuntimeError("shading tape already consumed")
    tape.consumed = True
    params = tape.params
    c2 = params.c2
    d_rin = nnet.backward(tape.tr, d_rgb)
    d_fx = d_rin[:, :c2]
    A = tape.A
    d_fpx = A.T @ d_fx
    d_psig = A.T @ d_sigma
    si = tape.sample_idx
    d_coef = np.einsum("pc,pc->p", d_fx[si], tape.fpx) + d_sigma[si] * tape.point_sigma
    d_fpx += nnet.backward(tape.tt, d_psig[:, None])
    d_inp = nnet.backward(tape.tf, d_fpx)
    pi = tape.point_idx
    if logit_grad is not None:
        g = tape.gam
        d_logit = d_coef * tape.wn * g * (1.0 - g)
        logit_grad += np.bincount(pi, weights=d_logit, minlength=tape.n_points)
    if feature_grad is not None:
        d_feat = nnet.positional_encode_backward(tape.feats, params.encoding.feat_freqs,
                                                 d_inp[:, params.rel_width:])
        np.add.at(feature_grad, pi, d_feat)
