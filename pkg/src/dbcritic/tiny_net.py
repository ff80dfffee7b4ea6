"""Small batched MLP with hand-written reverse mode, Adam and checkpoints.

Arrays are row-major batches: an input matrix is ``(N, in_dim)`` and every
forward pass returns a cache that :func:`mlp_backward` consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_ACT = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(x.dtype)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


@dataclass
class MlpParams:
    """Dense layers ``weights[l]`` of shape (in, out); hidden layers use
    ``activation`` and the last layer is linear."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"bad layer shapes {w.shape} / {b.shape}")
        for w, nxt in zip(self.weights, self.weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ShapeError(f"layers do not compose: {w.shape} -> {nxt.shape}")

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng,
        activation: str = "relu",
        final_scale: float = 0.1,
    ) -> "MlpParams":
        """Fan-in scaled uniform init; the output layer is shrunk by ``final_scale``."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == len(sizes) - 2:
                w, b = w * final_scale, b * final_scale
            weights.append(w)
            biases.append(b)
        return cls(weights, biases, activation)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activation,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def load_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for arr in self.arrays():
            arr[...] = vec[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Returns ``(out, cache)`` with ``out`` of shape (N, out_dim)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match first layer {params.weights[0].shape}")
    act, _ = _ACT[params.activation]
    inputs, pre = [x], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        p = h @ w + b
        if i < last:
            pre.append(p)
            h = act(p)
            inputs.append(h)
        else:
            h = p
    return h, (inputs, pre)


def mlp_backward(params: MlpParams, cache, upstream: np.ndarray):
    """Reverse pass; returns ``(param_grads, d_input)``."""
    inputs, pre = cache
    _, dact = _ACT[params.activation]
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    n_layers = len(params.weights)
    dws, dbs = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        dws[i] = inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * dact(pre[i - 1], inputs[i])
    return MlpParams(dws, dbs, params.activation), g


def cosine_embed(x, dim: int) -> np.ndarray:
    """``[cos(pi x), cos(2 pi x), ..., cos(dim pi x)]`` along a trailing axis."""
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    x = np.asarray(x, dtype=float)
    k = np.arange(1, dim + 1, dtype=float)
    return np.cos(np.pi * x[..., None] * k)


def _rows(v, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.broadcast_to(v, (n, v.size))
    if v.ndim != 2 or v.shape[0] != n:
        raise ShapeError(f"expected {n} rows, got shape {v.shape}")
    return v


def critic_features(z, t, tau, s, a, embed_dim: int) -> np.ndarray:
    """Input layout ``[s, a, z_t, cos_embed(t), cos_embed(tau)]``, one row per atom."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = z.size
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    return np.concatenate(
        [
            _rows(s, n),
            _rows(a, n),
            z[:, None],
            cosine_embed(t, embed_dim),
            cosine_embed(tau, embed_dim),
        ],
        axis=1,
    )


def critic_input_dim(state_dim: int, action_dim: int, embed_dim: int) -> int:
    return state_dim + action_dim + 1 + 2 * embed_dim


def forward(params: MlpParams, z_t, t, tau, s, a, embed_dim: int = 32):
    """Endpoint prediction ``f(z_t, t, tau, s, a)`` for a batch of atoms.

    Returns ``(prediction, cache)``; ``prediction`` has shape (N,).
    """
    s = np.asarray(s, dtype=float)
    x = critic_features(z_t, t, tau, s, a, embed_dim)
    out, cache = mlp_forward(params, x)
    z_col = s.shape[-1] + np.asarray(a, dtype=float).shape[-1]
    return out[:, 0], (cache, z_col)


def backward(params: MlpParams, cache, upstream):
    """Gradients w.r.t. all parameters and w.r.t. the ``z_t`` input column."""
    inner, z_col = cache
    grads, dx = mlp_backward(params, inner, np.asarray(upstream, dtype=float).reshape(-1, 1))
    return grads, dx[:, z_col]


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5

    @classmethod
    def for_params(cls, params: MlpParams, lr=3e-4, eps=1e-5, beta1=0.9, beta2=0.999) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if params.sizes != grads.sizes:
        raise ShapeError("gradient shapes do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads: Iterable[MlpParams]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for g in grads for a in g.arrays())))


def grad_clip(grads, max_norm: float):
    """Global-norm clipping over one gradient set or a list of them."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    single = isinstance(grads, MlpParams)
    group = [grads] if single else list(grads)
    norm = global_norm(group)
    scale = max_norm / norm if norm > max_norm else 1.0
    out = [
        MlpParams([w * scale for w in g.weights], [b * scale for b in g.biases], g.activation)
        for g in group
    ]
    return out[0] if single else out


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (flat float64) and ``<path>.json`` (shape manifest)."""
    path = Path(path)
    manifest = {"dtype": "float64", "nets": {}, "meta": meta or {}}
    chunks, offset = [], 0
    for name, net in nets.items():
        flat = net.flat()
        manifest["nets"][name] = {
            "offset": offset,
            "size": int(flat.size),
            "sizes": net.sizes,
            "activation": net.activation,
        }
        chunks.append(flat)
        offset += flat.size
    np.concatenate(chunks).astype("<f8").tofile(path.with_suffix(".bin"))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    nets = {}
    for name, info in manifest["nets"].items():
        net = MlpParams.init(info["sizes"], 0, info["activation"])
        net.load_flat(flat[info["offset"] : info["offset"] + info["size"]])
        nets[name] = net
    return nets, manifest["meta"]
