"""Diffusion-bridge quantile critic: sampling, targets, losses and updates.

A critic head maps ``(z_t, t, tau, s, a)`` to a prediction of the bridge's
data endpoint.  Returns are generated by starting the bridge at
``z_start = tau`` and stepping with the exact interval weights
``xi(t_m) - xi(t_{m+1})``, so a perfect endpoint predictor lands on its
target for any number of steps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bridge_schedule import BridgeParams, TimeGrid, ctilde_weights, interpolate
from .quantile_core import (
    ParticleSet,
    QuantileLevels,
    draw_taus,
    huber,
    huber_grad,
    quantile_loss,
    quantile_loss_grad,
    sample_quantile_rows,
)
from .tiny_net import (
    AdamState,
    MlpParams,
    adam_step,
    cosine_embed,
    critic_input_dim,
    global_norm,
    grad_clip,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


@dataclass
class Transition:
    """One environment step, or a batch of them when ``s`` is 2-D.

    ``m`` is the terminal mask: 0 when ``s_next`` ends the episode.
    ``log_pi_next`` feeds the optional entropy correction of the target.
    """

    s: np.ndarray
    a: np.ndarray
    r: float | np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    m: float | np.ndarray = 1.0
    log_pi_next: float | np.ndarray = 0.0

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.s_next = np.asarray(self.s_next, dtype=float)
        self.a_next = np.asarray(self.a_next, dtype=float)
        m = np.asarray(self.m, dtype=float)
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("terminal mask must be 0 or 1")
        for v in (self.s, self.a, self.r, self.s_next, self.a_next):
            if not np.all(np.isfinite(v)):
                raise ValueError("transition entries must be finite")

    @property
    def batch_size(self) -> int:
        return self.s.shape[0] if self.s.ndim == 2 else 1

    def as_batch(self) -> "Transition":
        if self.s.ndim == 2:
            b = self.s.shape[0]
            return Transition(
                self.s, self.a, np.broadcast_to(np.asarray(self.r, float), (b,)),
                self.s_next, self.a_next,
                np.broadcast_to(np.asarray(self.m, float), (b,)),
                np.broadcast_to(np.asarray(self.log_pi_next, float), (b,)),
            )
        return Transition(
            self.s[None], self.a[None], np.atleast_1d(np.asarray(self.r, float)),
            self.s_next[None], self.a_next[None],
            np.atleast_1d(np.asarray(self.m, float)),
            np.atleast_1d(np.asarray(self.log_pi_next, float)),
        )

    @classmethod
    def stack(cls, items: Sequence["Transition"]) -> "Transition":
        return cls(
            np.stack([t.s for t in items]),
            np.stack([t.a for t in items]),
            np.array([float(t.r) for t in items]),
            np.stack([t.s_next for t in items]),
            np.stack([t.a_next for t in items]),
            np.array([float(t.m) for t in items]),
            np.array([float(t.log_pi_next) for t in items]),
        )


@dataclass
class DbcConfig:
    gamma: float = 0.99
    kappa: float = 1.0
    anchor_weight: float = 0.01
    # 0 disables the quantile term (anchor-only ablation)
    quantile_weight: float = 1.0
    k_tgt: int = 128
    k_onl: int = 64
    flow_steps: int = 5
    n_heads: int = 2
    drop_count: int = 0
    tau_tgt: float = 0.005
    bridge: BridgeParams = field(default_factory=BridgeParams)
    entropy_alpha: float = 0.0
    lr: float = 3e-4
    adam_eps: float = 1e-5
    grad_clip: float = 1.0
    hidden: tuple = (64, 64)
    embed_dim: int = 32
    activation: str = "relu"
    final_scale: float = 0.1

    def __post_init__(self):
        if isinstance(self.bridge, dict):
            self.bridge = BridgeParams.from_dict(self.bridge)
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 <= self.gamma < 1.0, "gamma must be in [0, 1)"),
            (self.kappa >= 0, "kappa must be >= 0"),
            (self.anchor_weight >= 0, "anchor_weight must be >= 0"),
            (self.quantile_weight >= 0, "quantile_weight must be >= 0"),
            (self.k_tgt >= self.k_onl >= 1, "need k_tgt >= k_onl >= 1"),
            (self.flow_steps >= 1, "flow_steps must be >= 1"),
            (self.n_heads >= 1, "n_heads must be >= 1"),
            (0 <= self.drop_count < self.k_tgt * self.n_heads, "need 0 <= drop_count < k_tgt * n_heads"),
            (0.0 < self.tau_tgt <= 1.0, "tau_tgt must be in (0, 1]"),
            (self.entropy_alpha >= 0, "entropy_alpha must be >= 0"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.grad_clip > 0, "grad_clip must be > 0"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bridge"] = self.bridge.to_dict()
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DbcConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DbcConfig":
        return cls.from_dict(json.loads(text))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.flow_steps)


@dataclass
class CriticEnsemble:
    online: list
    target: list
    adam: list
    config: DbcConfig
    state_dim: int
    action_dim: int

    @classmethod
    def create(cls, config: DbcConfig, state_dim: int, action_dim: int, seed=0) -> "CriticEnsemble":
        rng = np.random.default_rng(seed)
        sizes = [critic_input_dim(state_dim, action_dim, config.embed_dim), *config.hidden, 1]
        online = [
            MlpParams.init(sizes, rng, config.activation, config.final_scale) for _ in range(config.n_heads)
        ]
        return cls(
            online=online,
            target=[h.copy() for h in online],
            adam=[AdamState.for_params(h, config.lr, config.adam_eps) for h in online],
            config=config,
            state_dim=state_dim,
            action_dim=action_dim,
        )

    def copy(self) -> "CriticEnsemble":
        return CriticEnsemble(
            [h.copy() for h in self.online],
            [h.copy() for h in self.target],
            [s.copy() for s in self.adam],
            self.config,
            self.state_dim,
            self.action_dim,
        )

    def save(self, path) -> None:
        nets = {f"online{i}": h for i, h in enumerate(self.online)}
        nets.update({f"target{i}": h for i, h in enumerate(self.target)})
        meta = {
            "config": self.config.to_dict(),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
        }
        save_checkpoint(path, nets, meta)

    @classmethod
    def load(cls, path) -> "CriticEnsemble":
        nets, meta = load_checkpoint(path)
        config = DbcConfig.from_dict(meta["config"])
        h = config.n_heads
        online = [nets[f"online{i}"] for i in range(h)]
        return cls(
            online,
            [nets[f"target{i}"] for i in range(h)],
            [AdamState.for_params(p, config.lr, config.adam_eps) for p in online],
            config,
            meta["state_dim"],
            meta["action_dim"],
        )


@dataclass
class StepReport:
    quantile_loss: float
    anchor_loss: float
    total: float
    grad_norm: float


class _Inputs:
    """Feature matrix for a batch of atoms with mutable ``z`` / ``t`` columns."""

    def __init__(self, S, A, taus, embed_dim):
        n = taus.size
        ds, da = S.shape[1], A.shape[1]
        self.z_col = ds + da
        self.t_cols = slice(ds + da + 1, ds + da + 1 + embed_dim)
        self.embed_dim = embed_dim
        self.x = np.empty((n, ds + da + 1 + 2 * embed_dim))
        self.x[:, :ds] = S
        self.x[:, ds : ds + da] = A
        self.x[:, ds + da + 1 + embed_dim :] = cosine_embed(taus, embed_dim)

    def set(self, z, t):
        self.x[:, self.z_col] = z
        # a scalar time broadcasts one embedding row
        self.x[:, self.t_cols] = cosine_embed(t, self.embed_dim)
        return self.x


def _as_rows(v, n):
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v, (n, v.shape[-1])) if v.ndim == 1 else v


def generate(heads, S, A, taus, config: DbcConfig, grid: TimeGrid | None = None) -> np.ndarray:
    """Run the bridge sampler for every head on a batch of atoms.

    ``S`` (N, ds) / ``A`` (N, da) may be single rows that broadcast; ``taus``
    is (N,).  Returns an (H, N) array of generated returns.
    """
    grid = grid or config.grid
    taus = np.asarray(taus, dtype=float).reshape(-1)
    n = taus.size
    inputs = _Inputs(_as_rows(S, n), _as_rows(A, n), taus, config.embed_dim)
    weights = ctilde_weights(config.bridge, grid)
    out = np.empty((len(heads), n))
    for h, params in enumerate(heads):
        z = taus.copy()
        for t_m, w in zip(grid.points[:-1], weights):
            zhat, _ = mlp_forward(params, inputs.set(z, t_m))
            z = z + w * (zhat[:, 0] - taus)
        out[h] = z
    return out


def sample_returns(heads, s, a, taus, config: DbcConfig, grid: TimeGrid | None = None) -> list:
    """One ParticleSet per head, aligned with ``taus`` (not sorted)."""
    levels = taus if isinstance(taus, QuantileLevels) else QuantileLevels(taus)
    z = generate(heads, np.atleast_2d(s), np.atleast_2d(a), levels.taus, config, grid)
    return [ParticleSet(row) for row in z]


def sample_returns_grad(params: MlpParams, s, a, taus, config: DbcConfig, upstream=None, grid=None):
    """Backpropagate ``sum(upstream * z_final)`` through the whole sampler.

    Defaults to the gradient of the mean generated return.  Returns
    ``(z_final, param_grads)``.
    """
    grid = grid or config.grid
    taus = np.asarray(taus, dtype=float).reshape(-1)
    n = taus.size
    inputs = _Inputs(_as_rows(np.atleast_2d(s), n), _as_rows(np.atleast_2d(a), n), taus, config.embed_dim)
    weights = ctilde_weights(config.bridge, grid)
    z = taus.copy()
    caches = []
    for t_m, w in zip(grid.points[:-1], weights):
        zhat, cache = mlp_forward(params, inputs.set(z, t_m).copy())
        caches.append(cache)
        z = z + w * (zhat[:, 0] - taus)
    g = np.full(n, 1.0 / n) if upstream is None else np.asarray(upstream, dtype=float)
    total = params.zeros_like()
    for cache, w in zip(reversed(caches), weights[::-1]):
        grads, dx = mlp_backward(params, cache, g * w)
        for acc, part in zip(total.arrays(), grads.arrays()):
            acc += part
        g = g + dx[:, inputs.z_col]
    return z, total


def target_atoms(ensemble: CriticEnsemble, batch: Transition, rng) -> np.ndarray:
    """Target particles for a transition batch, shape (B, H*k_tgt - drop_count).

    Rows come back sorted.  Target heads only; nothing here is differentiated.
    """
    cfg = ensemble.config
    b = batch.batch_size
    taus = draw_taus(rng, (b, cfg.k_tgt))
    S = np.repeat(batch.s_next, cfg.k_tgt, axis=0)
    A = np.repeat(batch.a_next, cfg.k_tgt, axis=0)
    z = generate(ensemble.target, S, A, taus.reshape(-1), cfg)
    stacked = z.reshape(cfg.n_heads, b, cfg.k_tgt).transpose(1, 0, 2).reshape(b, -1)
    stacked = np.sort(stacked, axis=1)
    if cfg.drop_count:
        stacked = stacked[:, : stacked.shape[1] - cfg.drop_count]
    soft = stacked - cfg.entropy_alpha * np.asarray(batch.log_pi_next)[:, None]
    return np.asarray(batch.r)[:, None] + (np.asarray(batch.m) * cfg.gamma)[:, None] * soft


def build_targets(ensemble: CriticEnsemble, tr: Transition, rng) -> ParticleSet:
    y = target_atoms(ensemble, tr.as_batch(), np.random.default_rng(rng))
    # r + m * gamma * z is monotone in z, so the sorted rows stay sorted
    return ParticleSet(y[0], sorted=True)


def quantile_loss_term(pred, targets, taus, kappa: float):
    """Huberized quantile loss of every prediction against every target.

    ``pred`` and ``taus`` are (..., K); ``targets`` is (..., J).  The double
    sum is divided by the number of targets J.  Returns ``(loss, dloss/dpred)``
    with ``loss`` of shape (...).
    """
    pred = np.asarray(pred, dtype=float)
    targets = np.asarray(targets, dtype=float)
    taus = np.asarray(taus, dtype=float)
    u = targets[..., None, :] - pred[..., :, None]
    tau = taus[..., :, None]
    j = targets.shape[-1]
    loss = quantile_loss(u, tau, kappa).sum(axis=(-1, -2)) / j
    grad = -quantile_loss_grad(u, tau, kappa).sum(axis=-1) / j
    return loss, grad


def anchor_loss_term(pred, targets, taus, kappa: float):
    """Huber regression of each prediction onto the sample quantile of the targets.

    Returns ``(loss, dloss/dpred, anchors)``.
    """
    pred = np.asarray(pred, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        anchors = sample_quantile_rows(targets[None], np.atleast_2d(taus))[0]
    else:
        anchors = sample_quantile_rows(targets, taus)
    diff = pred - anchors
    loss = np.asarray(huber(diff, kappa)).sum(axis=-1)
    return loss, huber_grad(diff, kappa), anchors


def _head_pass(params, inputs, z, t):
    out, cache = mlp_forward(params, inputs.set(z, t).copy())
    return out[:, 0], cache


def fit_targets(ensemble: CriticEnsemble, s, a, y, rng) -> StepReport:
    """Quantile + anchor update of every online head towards target atoms ``y``.

    ``s`` (B, ds), ``a`` (B, da) and ``y`` (B, J).  Heads are evaluated at
    t=0 on ``z_start = tau`` and at one random bridge time on the
    interpolation between ``tau`` and the per-level anchor.  Gradients are
    clipped jointly over heads before each head's Adam step.  Targets are
    left untouched.
    """
    rng = np.random.default_rng(rng)
    cfg = ensemble.config
    y = np.atleast_2d(np.asarray(y, dtype=float))
    b, k = y.shape[0], cfg.k_onl
    s = _as_rows(np.atleast_2d(s), b)
    a = _as_rows(np.atleast_2d(a), b)

    taus = draw_taus(rng, (b, k))
    anchors = sample_quantile_rows(y, taus)
    t_m = rng.random(b)
    z_tm = interpolate(taus, anchors, cfg.bridge, t_m[:, None])

    flat_taus = taus.reshape(-1)
    inputs = _Inputs(np.repeat(s, k, axis=0), np.repeat(a, k, axis=0), flat_taus, cfg.embed_dim)
    times = [(flat_taus, 0.0), (z_tm.reshape(-1), np.repeat(t_m, k))]

    scale = 1.0 / (b * cfg.n_heads)
    q_sum = a_sum = 0.0
    head_grads = []
    for params in ensemble.online:
        total = params.zeros_like()
        for z_in, t_in in times:
            pred, cache = _head_pass(params, inputs, z_in, t_in)
            pred = pred.reshape(b, k)
            lq, gq = quantile_loss_term(pred, y, taus, cfg.kappa)
            diff = pred - anchors
            q_sum += lq.sum()
            a_sum += np.sum(huber(diff, cfg.kappa))
            upstream = cfg.quantile_weight * gq + cfg.anchor_weight * huber_grad(diff, cfg.kappa)
            grads, _ = mlp_backward(params, cache, (upstream * scale).reshape(-1))
            for acc, part in zip(total.arrays(), grads.arrays()):
                acc += part
        head_grads.append(total)

    q_loss = q_sum * scale
    a_loss = a_sum * scale
    loss = cfg.quantile_weight * q_loss + cfg.anchor_weight * a_loss
    norm = global_norm(head_grads)
    if not (np.isfinite(loss) and np.isfinite(norm)):
        raise DivergenceError(f"non-finite critic loss {loss} (grad norm {norm})")
    clipped = grad_clip(head_grads, cfg.grad_clip)
    for params, state, g in zip(ensemble.online, ensemble.adam, clipped):
        adam_step(state, params, g)
    return StepReport(float(q_loss), float(a_loss), float(loss), norm)


def train_step(ensemble: CriticEnsemble, tr: Transition, rng) -> StepReport:
    """One critic update: bootstrapped targets from the target heads, the
    online update of :func:`fit_targets`, then a soft target update.

    A batched ``tr`` averages the per-transition losses.
    """
    rng = np.random.default_rng(rng)
    batch = tr.as_batch()
    y = target_atoms(ensemble, batch, rng)
    report = fit_targets(ensemble, batch.s, batch.a, y, rng)
    soft_update(ensemble)
    return report


def soft_update(ensemble: CriticEnsemble, rate: float | None = None) -> CriticEnsemble:
    """Polyak average ``target <- rate * online + (1 - rate) * target``."""
    rate = ensemble.config.tau_tgt if rate is None else rate
    if not 0.0 < rate <= 1.0:
        raise ValueError("soft update rate must be in (0, 1]")
    for on, tg in zip(ensemble.online, ensemble.target):
        for p, q in zip(on.arrays(), tg.arrays()):
            if rate == 1.0:
                q[...] = p
            else:
                q *= 1.0 - rate
                q += rate * p
    return ensemble


def q_value(ensemble: CriticEnsemble, s, a, rng, n_taus: int | None = None) -> float:
    """Mean over ``H * n_taus`` online atoms at fresh uniform levels (no DropTop)."""
    rng = np.random.default_rng(rng)
    n = n_taus or ensemble.config.k_onl
    taus = draw_taus(rng, n)
    z = generate(ensemble.online, np.atleast_2d(s), np.atleast_2d(a), taus, ensemble.config)
    return float(z.mean())


def quantile_curve(ensemble: CriticEnsemble, s, a, taus, heads: str = "online") -> np.ndarray:
    """Head-averaged generated returns at the given levels."""
    nets = ensemble.online if heads == "online" else ensemble.target
    z = generate(nets, np.atleast_2d(s), np.atleast_2d(a), np.asarray(taus, float), ensemble.config)
    return z.mean(axis=0)


# --- flow-matching baseline -------------------------------------------------


@dataclass
class FlowBaselineModel:
    """Scalar flow-matching model with a learned velocity ``v(z, t, s, a)``."""

    params: MlpParams
    adam: AdamState
    steps: int = 20
    embed_dim: int = 16
    state_dim: int = 0
    action_dim: int = 0
    grad_clip: float = 1.0

    @classmethod
    def create(
        cls,
        state_dim: int = 0,
        action_dim: int = 0,
        hidden: Sequence[int] = (64, 64),
        seed=0,
        lr: float = 1e-3,
        steps: int = 20,
        embed_dim: int = 16,
        activation: str = "relu",
    ) -> "FlowBaselineModel":
        sizes = [state_dim + action_dim + 1 + embed_dim, *hidden, 1]
        params = MlpParams.init(sizes, seed, activation, final_scale=0.1)
        return cls(params, AdamState.for_params(params, lr), steps, embed_dim, state_dim, action_dim)

    def features(self, z, t, s=None, a=None) -> np.ndarray:
        n = z.size
        s = np.zeros((n, self.state_dim)) if s is None else _as_rows(s, n)
        a = np.zeros((n, self.action_dim)) if a is None else _as_rows(a, n)
        return np.concatenate([s, a, z[:, None], cosine_embed(t, self.embed_dim)], axis=1)

    def velocity(self, z, t, s=None, a=None) -> np.ndarray:
        out, _ = mlp_forward(self.params, self.features(z, np.broadcast_to(t, z.shape), s, a))
        return out[:, 0]


def fm_train_step(model: FlowBaselineModel, targets, rng, s=None, a=None) -> float:
    """Linear-interpolant flow matching on scalar targets from N(0, 1) noise."""
    rng = np.random.default_rng(rng)
    z1 = np.asarray(targets, dtype=float).reshape(-1)
    if z1.size == 0:
        raise ValueError("need at least one target sample")
    z0 = rng.standard_normal(z1.size)
    t = rng.random(z1.size)
    zt = (1.0 - t) * z0 + t * z1
    out, cache = mlp_forward(model.params, model.features(zt, t, s, a))
    resid = out[:, 0] - (z1 - z0)
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite flow-matching loss {loss}")
    grads, _ = mlp_backward(model.params, cache, 2.0 * resid / z1.size)
    adam_step(model.adam, model.params, grad_clip(grads, model.grad_clip))
    return loss


def fm_sample(model: FlowBaselineModel, n: int, rng, steps: int | None = None, s=None, a=None) -> ParticleSet:
    """Euler-integrate the learned velocity from standard normal draws."""
    rng = np.random.default_rng(rng)
    steps = steps or model.steps
    z = rng.standard_normal(n)
    dt = 1.0 / steps
    for i in range(steps):
        z = z + dt * model.velocity(z, i * dt, s, a)
    return ParticleSet(z)


def with_overrides(config: DbcConfig, **kw) -> DbcConfig:
    return replace(config, **kw)


def load_config(path) -> DbcConfig:
    return DbcConfig.from_json(Path(path).read_text())
