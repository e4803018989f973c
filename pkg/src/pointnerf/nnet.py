"""Small dense MLPs with a hand-written reverse pass, Kaiming init and Adam.

Tensors are plain float64 numpy arrays. An MLP forward pass can record a
:class:`Tape`; :func:`backward` consumes it, accumulates parameter gradients
into the :class:`ParameterStore` and returns the gradient w.r.t. the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "none")
OUTPUT_ACTIVATIONS = ("none", "softplus", "sigmoid")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def positional_encode(v, L: int) -> np.ndarray:
    """Frequency encoding; each scalar p becomes [p, sin(2^k pi p), cos(2^k pi p), ...]."""
    if L < 0:
        raise ValueError("L must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if L == 0:
        return v.copy()
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = v[..., :, None] * freqs  # (..., d, L)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*v.shape, 2 * L)
    out = np.concatenate([v[..., None], parts], axis=-1)
    return out.reshape(*v.shape[:-1], v.shape[-1] * (1 + 2 * L))


def positional_encode_backward(v, L: int, grad_out) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if L == 0:
        return np.asarray(grad_out, dtype=np.float64).copy()
    g = np.asarray(grad_out).reshape(*v.shape, 1 + 2 * L)
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = v[..., :, None] * freqs
    g_sin = g[..., 1::2]
    g_cos = g[..., 2::2]
    return g[..., 0] + np.sum((g_sin * np.cos(ang) - g_cos * np.sin(ang)) * freqs, axis=-1)


def encoded_width(d: int, L: int) -> int:
    return d * (1 + 2 * L)


@dataclass(frozen=True)
class MlpConfig:
    """``layer_widths`` lists input, hidden and output widths (so n layers -> n+1 entries)."""

    layer_widths: tuple[int, ...]
    activation: str | tuple[str, ...] = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) <= 0:
            raise ValueError("need at least two positive layer widths")
        object.__setattr__(self, "layer_widths", widths)
        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(widths) - 2)
        acts = tuple(acts)
        if len(acts) != len(widths) - 2 or any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"bad hidden activations {acts!r}")
        object.__setattr__(self, "activation", acts)
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"bad output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


class ParameterStore:
    """Named float64 parameter arrays with same-shaped gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def set(self, name: str, value) -> None:
        """Replace a parameter (possibly with a new shape) and reset its gradient."""
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def update(self, other: "ParameterStore") -> None:
        for name in other.names():
            self.add(name, other.params[name])

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value)
            out.grads[name][...] = self.grads[name]
        return out

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())


def layer_names(prefix: str, layer: int) -> tuple[str, str]:
    return f"{prefix}.w{layer}", f"{prefix}.b{layer}"


class Tape:
    """Saved activations of one MLP forward pass, consumed by :func:`backward`."""

    def __init__(self, cfg: MlpConfig, params: ParameterStore, prefix: str):
        self.cfg = cfg
        self.params = params
        self.prefix = prefix
        self.inputs: list[np.ndarray] = []
        self.pre: list[np.ndarray] = []
        self.output: np.ndarray | None = None
        self.consumed = False


def mlp_forward(cfg: MlpConfig, params: ParameterStore, x, tape: Tape | None = None,
                prefix: str = "mlp") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.in_width:
        raise ValueError(f"input width {x.shape[-1]} != {cfg.in_width}")
    if tape is not None:
        prefix = tape.prefix
    h = x
    for layer in range(cfg.n_layers):
        wname, bname = layer_names(prefix, layer)
        if tape is not None:
            tape.inputs.append(h)
        z = h @ params[wname] + params[bname]
        if tape is not None:
            tape.pre.append(z)
        if layer < cfg.n_layers - 1:
            h = np.maximum(z, 0.0) if cfg.activation[layer] == "relu" else z
        elif cfg.output_activation == "softplus":
            h = softplus(z)
        elif cfg.output_activation == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    if tape is not None:
        tape.output = h
    return h


def backward(tape: Tape, output_gradient) -> np.ndarray:
    """Accumulate parameter gradients into the tape's store; return d(loss)/d(input)."""
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    tape.consumed = True
    cfg, params = tape.cfg, tape.params
    g = np.asarray(output_gradient, dtype=np.float64)
    for layer in reversed(range(cfg.n_layers)):
        z = tape.pre[layer]
        if layer == cfg.n_layers - 1:
            if cfg.output_activation == "softplus":
                g = g * sigmoid(z)
            elif cfg.output_activation == "sigmoid":
                s = tape.output
                g = g * s * (1.0 - s)
        elif cfg.activation[layer] == "relu":
            g = g * (z > 0)
        wname, bname = layer_names(tape.prefix, layer)
        h = tape.inputs[layer]
        h2 = h.reshape(-1, h.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        params.grads[wname] += h2.T @ g2
        params.grads[bname] += g2.sum(axis=0)
        g = g @ params[wname].T
    tape.inputs.clear()
    tape.pre.clear()
    return g


def kaiming_init(cfg: MlpConfig, seed, prefix: str = "mlp", store: ParameterStore | None = None) -> ParameterStore:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParameterStore() if store is None else store
    for layer in range(cfg.n_layers):
        fan_in, fan_out = cfg.layer_widths[layer], cfg.layer_widths[layer + 1]
        wname, bname = layer_names(prefix, layer)
        store.add(wname, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        store.add(bname, np.zeros(fan_out))
    return store


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in (params.names() if names is None else names):
        p, g = params.params[name], params.grads[name]
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        g.fill(0.0)


# ---------------------------------------------------------------------------
# tensor file segment: magic PNRF, u32 version, then per tensor
# u32 name length, name bytes (utf-8), u32 rank, u64 dims, little-endian f64 values

MAGIC = b"PNRF"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", VERSION))
        for name, value in tensors.items():
            value = np.ascontiguousarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(value.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 8
    out = {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out
