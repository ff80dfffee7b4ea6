"""End-to-end experiment runners used by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dbc_critic import (
    CriticEnsemble,
    DbcConfig,
    FlowBaselineModel,
    Transition,
    fit_targets,
    fm_sample,
    fm_train_step,
    generate,
    sample_returns,
    soft_update,
    target_atoms,
    train_step,
)
from .quantile_core import draw_taus, wasserstein1
from .toy_envs import (
    DriftTask,
    ReturnOracle,
    TabularMdp,
    bimodality_gap,
    cached_oracle,
    drift_modes,
    drift_true_distribution,
    mdp_sample_transition,
)


def _from_dict(cls, d: dict, nested: dict):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kw = dict(d)
    for key, sub in nested.items():
        if key in kw and isinstance(kw[key], dict):
            kw[key] = sub.from_dict(kw[key])
    return cls(**kw)


def _desk_critic() -> DbcConfig:
    return DbcConfig(kappa=0.0, k_tgt=32, k_onl=32, embed_dim=16, lr=1e-3, tau_tgt=0.02)


@dataclass
class MdpRunConfig:
    """Desk fixture for critic training on a tabular MDP.

    The critic's discount is replaced by the MDP's.  The learning rate is
    decayed linearly from ``critic.lr`` to ``lr_end``.  From step
    ``average_from * steps`` on, evaluation uses the running mean of the
    online weights (tail averaging); 1.0 evaluates the raw online heads.
    """

    critic: DbcConfig = field(default_factory=_desk_critic)
    steps: int = 5000
    batch_size: int = 16
    lr_end: float = 1e-3
    average_from: float = 0.4
    eval_every: int = 500
    eval_levels: int = 200
    oracle_samples: int = 1_000_000
    oracle_seed: int = 0
    w1_tol: float = 0.1
    mean_tol: float = 0.05

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1 or self.eval_levels < 1:
            raise ValueError("step, batch and evaluation sizes must be positive")
        if not 0.0 <= self.average_from <= 1.0:
            raise ValueError("average_from must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critic"] = self.critic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MdpRunConfig":
        return _from_dict(cls, d, {"critic": DbcConfig})


def mdp_oracles(mdp: TabularMdp, cfg: MdpRunConfig, cache_dir) -> dict:
    return {
        p: cached_oracle(mdp, *p, cache_dir, cfg.oracle_samples, cfg.oracle_seed)
        for p in mdp.live_pairs()
    }


def evaluate_pairs(ens: CriticEnsemble, mdp: TabularMdp, oracles: dict, levels: int) -> list[dict]:
    """W1 and mean error per (s, a), from atoms at a midpoint level grid."""
    taus = (np.arange(levels) + 0.5) / levels
    rows = []
    for (s, a), oracle in oracles.items():
        sets = sample_returns(ens.online, mdp.one_hot_state(s), mdp.one_hot_action(a), taus, ens.config)
        atoms = np.concatenate([p.atoms for p in sets])
        q = float(atoms.mean())
        rows.append(
            {
                "s": s,
                "a": a,
                "w1": oracle.w1_to(atoms),
                "iqr": oracle.iqr(),
                "q_value": q,
                "oracle_mean": oracle.mean(),
                "abs_err": abs(q - oracle.mean()),
                "mean_abs": oracle.mean_abs(),
            }
        )
    return rows


def run_train_mdp(mdp: TabularMdp, cfg: MdpRunConfig, seed: int, oracles: dict) -> dict:
    """Train one critic ensemble; returns metric rows, loss rows and the final check."""
    critic = replace(cfg.critic, gamma=mdp.gamma)
    ens = CriticEnsemble.create(critic, mdp.n_states, mdp.n_actions, seed)
    rng = np.random.default_rng([seed, 1])
    live = [s for s in range(mdp.n_states) if s not in mdp.absorbing]
    start = int(cfg.average_from * cfg.steps) + 1 if cfg.average_from < 1.0 else cfg.steps + 1
    avg, n_avg = None, 0
    metrics, losses = [], []
    for step in range(1, cfg.steps + 1):
        frac = (step - 1) / cfg.steps
        for st in ens.adam:
            st.lr = critic.lr + (cfg.lr_end - critic.lr) * frac
        batch = Transition.stack(
            [mdp_sample_transition(mdp, int(rng.choice(live)), rng) for _ in range(cfg.batch_size)]
        )
        rep = train_step(ens, batch, rng)
        losses.append({"step": step, "quantile_loss": rep.quantile_loss, "anchor_loss": rep.anchor_loss, "total": rep.total})
        if step >= start:
            n_avg += 1
            flats = [h.flat() for h in ens.online]
            avg = flats if avg is None else [m + (f - m) / n_avg for m, f in zip(avg, flats)]
        if step % cfg.eval_every == 0 or step == cfg.steps:
            for r in evaluate_pairs(_averaged(ens, avg), mdp, oracles, cfg.eval_levels):
                r["passed"] = r["w1"] <= cfg.w1_tol * r["iqr"] and r["abs_err"] <= cfg.mean_tol * r["mean_abs"]
                metrics.append({"step": step, **r})
    final = [r for r in metrics if r["step"] == cfg.steps]
    return {"metrics": metrics, "losses": losses, "final": final, "ensemble": _averaged(ens, avg)}


def _averaged(ens: CriticEnsemble, avg) -> CriticEnsemble:
    if avg is None:
        return ens
    out = ens.copy()
    for head, vec in zip(out.online, avg):
        head.load_flat(vec)
    return out


def majority_verdict(finals_by_seed: dict) -> dict:
    """Per (s, a): passes when more than half of the seeds pass."""
    pairs = {}
    for seed, rows in finals_by_seed.items():
        for r in rows:
            pairs.setdefault(f"{r['s']},{r['a']}", []).append(bool(r["passed"]))
    per_pair = {k: sum(v) > len(v) / 2 for k, v in pairs.items()}
    return {"per_pair": per_pair, "passed": all(per_pair.values())}


# --- drift study ----------------------------------------------------------------


def _drift_critic() -> DbcConfig:
    return DbcConfig(kappa=0.0, k_tgt=64, k_onl=64, embed_dim=64, lr=1e-3, n_heads=2)


@dataclass
class DriftRunConfig:
    """Desk fixture for the iterated Bellman drift study."""

    task: DriftTask = field(default_factory=DriftTask)
    critic: DbcConfig = field(default_factory=_drift_critic)
    dbc_batch: int = 2
    fm_batch: int = 256
    fm_hidden: tuple = (64, 64)
    fm_lr: float = 1e-3
    fm_steps: int = 20
    fm_embed: int = 64
    n_eval: int = 10_000
    lr_floor: float = 0.1

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = DriftTask.from_dict(self.task)
        self.fm_hidden = tuple(int(h) for h in self.fm_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.to_dict()
        d["critic"] = self.critic.to_dict()
        d["fm_hidden"] = list(self.fm_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DriftRunConfig":
        return _from_dict(cls, d, {"critic": DbcConfig})


_EMPTY = np.zeros((1, 0))


def _phase_lr(states, base: float, floor: float, i: int, n: int) -> None:
    """Linear decay from ``base`` to ``floor * base`` across one fitting phase."""
    lr = base * (1.0 - (1.0 - floor) * i / max(n - 1, 1))
    for st in states:
        st.lr = lr


def _dbc_draw(ens: CriticEnsemble, n: int, rng, heads="online") -> np.ndarray:
    """n returns from a head mixture: sample i comes from head ``i mod H``."""
    nets = ens.online if heads == "online" else ens.target
    taus = draw_taus(rng, n)
    z = generate(nets, _EMPTY, _EMPTY, taus, ens.config)
    return z[np.arange(n) % len(nets), np.arange(n)]


def _drift_record(task: DriftTask, k: int, samples: np.ndarray) -> dict:
    truth = drift_true_distribution(task, k)
    lo, hi, width = drift_modes(task, k)
    n = samples.size
    ref = truth.quantile((np.arange(n) + 0.5) / n)
    return {
        "iteration": k,
        "w1": wasserstein1(samples, ref),
        "gap": bimodality_gap(samples, lo, hi, width),
        "mean": float(samples.mean()),
        "std": float(samples.std()),
    }


def run_drift_dbc(cfg: DriftRunConfig, seed: int) -> tuple[list, list, list]:
    """Iteration 0 fits the true start; later iterations fit ``r + gamma Z``
    drawn from a frozen copy of the previous iterate.

    Returns per-iteration records, per-step losses and the evaluation draws.
    """
    task = cfg.task
    critic = replace(cfg.critic, gamma=task.gamma)
    ens = CriticEnsemble.create(critic, 0, 0, seed)
    rng = np.random.default_rng([seed, 2])
    j = critic.n_heads * critic.k_tgt - critic.drop_count
    s = np.zeros((cfg.dbc_batch, 0))
    records, losses, draws = [], [], []
    for i in range(task.initial_steps):
        _phase_lr(ens.adam, critic.lr, cfg.lr_floor, i, task.initial_steps)
        y = task.mixture.sample(cfg.dbc_batch * j, rng).reshape(cfg.dbc_batch, j)
        rep = fit_targets(ens, s, s, y, rng)
        losses.append({"iteration": 0, **asdict(rep)})
    draws.append(_dbc_draw(ens, cfg.n_eval, rng))
    records.append(_drift_record(task, 0, draws[-1]))
    boot = Transition(s, s, np.full(cfg.dbc_batch, task.r), s, s, np.ones(cfg.dbc_batch)).as_batch()
    for k in range(1, task.iterations + 1):
        soft_update(ens, 1.0)
        for i in range(task.inner_steps):
            _phase_lr(ens.adam, critic.lr, cfg.lr_floor, i, task.inner_steps)
            y = target_atoms(ens, boot, rng)
            rep = fit_targets(ens, s, s, y, rng)
            losses.append({"iteration": k, **asdict(rep)})
        draws.append(_dbc_draw(ens, cfg.n_eval, rng))
        records.append(_drift_record(task, k, draws[-1]))
    return records, losses, draws


def run_drift_flow(cfg: DriftRunConfig, seed: int) -> tuple[list, list, list]:
    task = cfg.task
    model = FlowBaselineModel.create(
        hidden=cfg.fm_hidden, seed=seed, lr=cfg.fm_lr, steps=cfg.fm_steps, embed_dim=cfg.fm_embed
    )
    rng = np.random.default_rng([seed, 3])
    records, losses, draws = [], [], []
    for i in range(task.initial_steps):
        _phase_lr([model.adam], cfg.fm_lr, cfg.lr_floor, i, task.initial_steps)
        loss = fm_train_step(model, task.mixture.sample(cfg.fm_batch, rng), rng)
        losses.append({"iteration": 0, "loss": loss})
    draws.append(fm_sample(model, cfg.n_eval, rng).atoms)
    records.append(_drift_record(task, 0, draws[-1]))
    for k in range(1, task.iterations + 1):
        frozen = FlowBaselineModel(model.params.copy(), model.adam, model.steps, model.embed_dim)
        for i in range(task.inner_steps):
            _phase_lr([model.adam], cfg.fm_lr, cfg.lr_floor, i, task.inner_steps)
            prev = fm_sample(frozen, cfg.fm_batch, rng).atoms
            loss = fm_train_step(model, task.r + task.gamma * prev, rng)
            losses.append({"iteration": k, "loss": loss})
        draws.append(fm_sample(model, cfg.n_eval, rng).atoms)
        records.append(_drift_record(task, k, draws[-1]))
    return records, losses, draws


def drift_verdict(runs: dict, k0_w1: float = 0.15, retain: float = 0.5) -> dict:
    """``runs[seed] = {"dbc": records, "flow_baseline": records}``."""
    per_seed = {}
    for seed, rec in runs.items():
        dbc, fm = rec["dbc"], rec["flow_baseline"]
        per_seed[seed] = {
            "dbc_gap_0": dbc[0]["gap"],
            "dbc_gap_K": dbc[-1]["gap"],
            "fm_gap_K": fm[-1]["gap"],
            "retained": dbc[-1]["gap"] >= retain * dbc[0]["gap"],
            "beats_baseline": dbc[-1]["gap"] > fm[-1]["gap"],
            "k0_fit": dbc[0]["w1"] < k0_w1 and fm[0]["w1"] < k0_w1,
        }
    n = len(per_seed)
    wins = sum(v["beats_baseline"] for v in per_seed.values())
    retained = all(v["retained"] for v in per_seed.values())
    return {
        "per_seed": per_seed,
        "dbc_retains_gap": retained,
        "dbc_beats_baseline_seeds": wins,
        "passed": retained and wins * 3 >= 2 * n,
    }


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, ReturnOracle):
        return {"mode": o.mode, "size": o.size}
    raise TypeError(f"not JSON serializable: {type(o)}")
