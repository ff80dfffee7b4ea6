"""Executable property suites with measured statistics.

Each suite returns a list of :class:`PropResult`; :func:`run_suites` bundles
them into a JSON-ready report.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bridge_schedule import (
    REFERENCE_BIAS_TABLE,
    BridgeParams,
    ScheduleKind,
    ThetaSchedule,
    TimeGrid,
    bias_table,
    ctilde_weights,
    velocity_coeff,
    xi,
)
from .dbc_critic import (
    CriticEnsemble,
    DbcConfig,
    Transition,
    build_targets,
    generate,
    sample_returns,
    sample_returns_grad,
    train_step,
)
from .quantile_core import (
    droptop,
    order_index,
    quantile_loss,
    sample_quantile,
    subgradient_counts,
)
from .tiny_net import MlpParams, critic_input_dim, mlp_backward, mlp_forward
from .toy_envs import (
    DriftTask,
    bellman_pushforward,
    bimodal_chain_mdp,
    bandit_mdp,
    drift_sample_target,
    drift_true_distribution,
    oracle_return_distribution,
)

ALL_SCHEDULES = [ThetaSchedule(k) for k in ScheduleKind]


@dataclass
class PropResult:
    suite: str
    name: str
    passed: bool
    stats: dict = field(default_factory=dict)
    seconds: float = 0.0


def _timed(suite, name, fn):
    t0 = time.perf_counter()
    passed, stats = fn()
    return PropResult(suite, name, bool(passed), stats, round(time.perf_counter() - t0, 4))


# --- bridge -------------------------------------------------------------------


def bridge_suite(seed: int = 0) -> list[PropResult]:
    rng = np.random.default_rng(seed)
    out = []

    def boundaries():
        worst = 0.0
        for sched in ALL_SCHEDULES:
            for lam2 in (1e-3, 1.0, 1e3):
                p = BridgeParams(sched, lam2)
                worst = max(worst, abs(xi(p, 0.0) - 1.0), abs(xi(p, 1.0)))
        return worst == 0.0, {"max_error": worst}

    def lambda_independence():
        worst = 0.0
        ts = rng.random(200)
        for sched in ALL_SCHEDULES:
            a, b = BridgeParams(sched, 0.01), BridgeParams(sched, 250.0)
            worst = max(
                worst,
                float(np.max(np.abs(xi(a, ts) - xi(b, ts)))),
                float(np.max(np.abs(velocity_coeff(a, ts) - velocity_coeff(b, ts)))),
            )
        return worst <= 1e-12, {"max_diff": worst}

    def derivative_identity():
        h = 1e-6
        ts = np.linspace(0.0, 1.0, 1001)
        worst = 0.0
        for sched in ALL_SCHEDULES:
            p = BridgeParams(sched)
            c = velocity_coeff(p, ts)
            inner = ts[1:-1]
            fd = (xi(p, inner + h) - xi(p, inner - h)) / (2 * h)
            left = (xi(p, h) - xi(p, 0.0)) / h
            right = (xi(p, 1.0) - xi(p, 1.0 - h)) / h
            errs = np.concatenate([np.abs(c[1:-1] + fd), [abs(c[0] + left), abs(c[-1] + right)]])
            worst = max(worst, float(errs.max()))
        return worst <= 1e-5, {"max_error": worst}

    def integral_identity():
        n = 1_000_000
        mids = (np.arange(n) + 0.5) / n
        errs = {s.kind.value: abs(float(velocity_coeff(BridgeParams(s), mids).sum() / n) - 1.0) for s in ALL_SCHEDULES}
        return max(errs.values()) <= 1e-6, errs

    def telescoping():
        worst = 0.0
        for _ in range(200):
            cuts = np.sort(rng.uniform(1e-6, 1 - 1e-6, rng.integers(0, 40)))
            cuts = np.unique(cuts)
            sched = ALL_SCHEDULES[rng.integers(3)]
            w = ctilde_weights(BridgeParams(sched), TimeGrid((0.0, *cuts, 1.0)))
            worst = max(worst, abs(float(w.sum()) - 1.0))
        return worst <= 1e-15, {"max_error": worst, "partitions": 200}

    def table():
        rows = bias_table()
        worst, cell = 0.0, None
        for row in rows:
            for j, key in enumerate(("constant_pct", "linear_pct", "cosine_pct")):
                d = abs(row[key] - REFERENCE_BIAS_TABLE[row["steps"]][j])
                if d > worst:
                    worst, cell = d, (row["steps"], key)
        return worst <= 0.05, {"max_abs_diff_pp": worst, "worst_cell": cell, "cells": 3 * len(rows)}

    for name, fn in [
        ("xi_boundaries", boundaries),
        ("lambda2_independence", lambda_independence),
        ("derivative_identity", derivative_identity),
        ("integral_identity", integral_identity),
        ("telescoping", telescoping),
        ("bias_table", table),
    ]:
        out.append(_timed("bridge", name, fn))
    return out


# --- quantile -----------------------------------------------------------------


def minimizer_scan(n_cases: int = 500, scan: int = 10_000, seed: int = 0) -> tuple[bool, dict]:
    """Order-statistic risk never exceeds the best scanned candidate."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    subgrad_ok = True
    for _ in range(n_cases):
        n = int(rng.integers(1, 65))
        y = rng.normal(0, rng.uniform(0.1, 10), n)
        if rng.random() < 0.3:
            y = np.round(y)  # exercise ties
        tau = float(rng.uniform(0.001, 0.999))
        q = sample_quantile(y, tau)
        grid = np.linspace(y.min() - 1, y.max() + 1, scan)
        risks = np.empty(scan)
        for lo in range(0, scan, 2500):
            g = grid[lo : lo + 2500]
            risks[lo : lo + 2500] = quantile_loss(y[None, :] - g[:, None], tau, 0.0).sum(axis=1)
        at_q = float(np.sum(quantile_loss(y - q, tau, 0.0)))
        worst = max(worst, at_q - float(risks.min()))
        n_lt, n_le = subgradient_counts(y, q)
        subgrad_ok &= n_lt <= n * tau + 1e-9 and n * tau <= n_le + 1e-9
    return worst <= 1e-12 and subgrad_ok, {
        "cases": n_cases,
        "scan_points": scan,
        "max_slack": worst,
        "subgradient_ok": bool(subgrad_ok),
    }


def _uniform_order_stats(n: int, taus, seeds: int, rng, chunk_elems: int = 5_000_000) -> np.ndarray:
    """Sample quantiles of ``seeds`` independent Uniform(0,1) samples of size n.

    Returns an array (seeds, len(taus)).
    """
    ks = order_index(n, np.asarray(taus)) - 1
    rows = max(1, chunk_elems // n)
    out = np.empty((seeds, len(ks)))
    done = 0
    while done < seeds:
        m = min(rows, seeds - done)
        u = rng.random((m, n))
        part = np.partition(u, ks, axis=1)
        out[done : done + m] = part[:, ks]
        done += m
    return out


def asymptotics(seed: int = 0) -> list[PropResult]:
    """Consistency, bias decay and variance of the sample quantile on U(0,1)."""
    rng = np.random.default_rng(seed)
    taus = (0.25, 0.5, 0.75)
    results = []

    def consistency():
        med = {}
        for n in (100, 1_000, 10_000, 100_000):
            q = _uniform_order_stats(n, taus, 100, rng)
            med[n] = np.median(np.abs(q - np.asarray(taus)), axis=0)
        ok = True
        stats = {}
        for j, tau in enumerate(taus):
            seq = [float(med[n][j]) for n in sorted(med)]
            stats[str(tau)] = seq
            ok &= all(b <= a for a, b in zip(seq, seq[1:]))
        return ok, {"median_abs_error": stats}

    big = {}

    def bias_decay():
        stats, ok = {}, True
        for n in (100, 10_000):
            big[n] = _uniform_order_stats(n, taus, 10_000, rng)
        for j, tau in enumerate(taus):
            scaled = [abs(float(big[n][:, j].mean()) - tau) * math.sqrt(n) for n in (100, 10_000)]
            stats[str(tau)] = scaled
            ok &= scaled[1] < scaled[0]
        return ok, {"sqrt_n_abs_bias": stats}

    def normality():
        n = 10_000
        var = float(big[n][:, 1].var(ddof=1))
        ref = 0.25 / n
        ratio = var / ref
        return abs(ratio - 1.0) <= 0.2, {"variance": var, "reference": ref, "ratio": ratio}

    results.append(_timed("asymptotics", "consistency", consistency))
    results.append(_timed("asymptotics", "bias_decay", bias_decay))
    results.append(_timed("asymptotics", "normality", normality))
    return results


def quantile_suite(seed: int = 0) -> list[PropResult]:
    rng = np.random.default_rng(seed)

    def monotone():
        bad = 0
        for _ in range(500):
            y = rng.normal(size=int(rng.integers(1, 65)))
            t1, t2 = np.sort(rng.uniform(0.001, 0.999, 2))
            bad += sample_quantile(y, t1) > sample_quantile(y, t2)
        return bad == 0, {"violations": int(bad), "cases": 500}

    def conservative_droptop():
        bad = 0
        for _ in range(500):
            y = rng.normal(size=int(rng.integers(2, 65)))
            d = int(rng.integers(0, y.size))
            bad += droptop(y, d).mean() > y.mean() + 1e-12
        return bad == 0, {"violations": int(bad), "cases": 500}

    return [
        _timed("quantile", "minimizer_scan", lambda: minimizer_scan(seed=seed)),
        _timed("quantile", "monotone_in_tau", monotone),
        _timed("quantile", "droptop_conservative", conservative_droptop),
    ]


# --- nn -------------------------------------------------------------------------


def gradient_probe(params: MlpParams, x, upstream, probes: int = 64, h: float = 1e-6, seed: int = 0):
    """Worst relative mismatch of analytic vs central-difference parameter
    gradients over random coordinates."""
    rng = np.random.default_rng(seed)

    def loss(p):
        out, _ = mlp_forward(p, x)
        return float(np.sum(out[:, 0] * upstream))

    _, cache = mlp_forward(params, x)
    grads, _ = mlp_backward(params, cache, upstream)
    flat, g = params.flat(), grads.flat()
    probe = params.copy()
    worst = 0.0
    for idx in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
        v = flat.copy()
        v[idx] += h
        probe.load_flat(v)
        plus = loss(probe)
        v[idx] -= 2 * h
        probe.load_flat(v)
        minus = loss(probe)
        fd = (plus - minus) / (2 * h)
        err = abs(g[idx] - fd) / max(abs(fd), abs(g[idx]), 1e-6)
        worst = max(worst, err)
    return worst


def nn_suite(seed: int = 0, config: DbcConfig | None = None, state_dim: int = 5, action_dim: int = 2):
    cfg = config or DbcConfig()
    rng = np.random.default_rng(seed)
    results = []
    for act in ("relu", "tanh"):
        sizes = [critic_input_dim(state_dim, action_dim, cfg.embed_dim), *cfg.hidden, 1]
        params = MlpParams.init(sizes, rng, act, final_scale=1.0)
        x = rng.normal(size=(16, sizes[0]))
        up = rng.normal(size=16)
        worst = gradient_probe(params, x, up, seed=seed)
        results.append(PropResult("nn", f"gradient_check_{act}", worst <= 1e-4, {"max_rel_error": worst, "probes": 64}))
    return results


def sampler_gradient_check(seed: int = 0, steps: int = 5, probes: int = 64) -> tuple[bool, dict]:
    """Backprop through the full bridge sampler vs central differences."""
    cfg = DbcConfig(flow_steps=steps, hidden=(32, 32), embed_dim=8, activation="tanh")
    ens = CriticEnsemble.create(cfg, 2, 1, seed=seed)
    net = ens.online[0]
    net.weights[-1] *= 10.0
    s, a = np.array([0.3, -0.2]), np.array([0.7])
    taus = np.linspace(0.05, 0.95, 9)
    _, grads = sample_returns_grad(net, s, a, taus, cfg)
    flat, g = net.flat(), grads.flat()
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for idx in rng.choice(flat.size, size=probes, replace=False):
        v = flat.copy()
        v[idx] += h
        net.load_flat(v)
        plus = generate([net], s, a, taus, cfg)[0].mean()
        v[idx] -= 2 * h
        net.load_flat(v)
        minus = generate([net], s, a, taus, cfg)[0].mean()
        fd = (plus - minus) / (2 * h)
        worst = max(worst, abs(g[idx] - fd) / max(abs(fd), abs(g[idx]), 1e-6))
    net.load_flat(flat)
    return worst <= 1e-3, {"max_rel_error": worst, "probes": probes, "flow_steps": steps}


# --- critic ---------------------------------------------------------------------


def endpoint_consistency(seed: int = 0, n_endpoints: int = 20) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for sched in ALL_SCHEDULES:
        for steps in (1, 2, 5, 10, 100):
            cfg = DbcConfig(flow_steps=steps, bridge=BridgeParams(sched), hidden=(8,), embed_dim=4)
            taus = rng.uniform(0.01, 0.99, 5)
            for z_end in rng.normal(0, 10, n_endpoints):
                net = MlpParams.init([critic_input_dim(1, 1, cfg.embed_dim), 8, 1], 0)
                for arr in net.arrays():
                    arr[...] = 0.0
                net.biases[-1][...] = z_end
                (ps,) = sample_returns([net], [0.0], [0.0], taus, cfg)
                worst = max(worst, float(np.max(np.abs(ps.atoms - z_end))))
    return worst <= 1e-12, {"max_error": worst, "cases": 3 * 5 * n_endpoints}


def critic_suite(seed: int = 0) -> list[PropResult]:
    def stop_gradient():
        cfg = DbcConfig(k_tgt=16, k_onl=8, hidden=(16, 16), embed_dim=4)
        ens = CriticEnsemble.create(cfg, 2, 1, seed)
        tr = Transition(np.ones(2), np.zeros(1), 1.0, np.ones(2), np.ones(1))
        before = build_targets(ens, tr, 3).atoms
        for net in ens.online:
            for arr in net.arrays():
                arr += 0.5
        after = build_targets(ens, tr, 3).atoms
        return bool(np.array_equal(before, after)), {}

    def conservatism():
        base = DbcConfig(k_tgt=16, k_onl=8, n_heads=3, hidden=(16, 16), embed_dim=4)
        ens = CriticEnsemble.create(base, 2, 1, seed)
        tr = Transition(np.ones(2), np.zeros(1), 1.0, np.ones(2), np.ones(1))
        full = build_targets(ens, tr, 5).mean()
        ens.config = DbcConfig(**{**base.to_dict(), "drop_count": 6})
        cut = build_targets(ens, tr, 5).mean()
        return cut <= full, {"mean_full": full, "mean_dropped": cut}

    def determinism():
        cfg = DbcConfig(k_tgt=16, k_onl=8, hidden=(16, 16), embed_dim=4)
        a = CriticEnsemble.create(cfg, 2, 1, seed)
        b = a.copy()
        tr = Transition(np.ones(2), np.zeros(1), 1.0, np.ones(2), np.ones(1))
        ra = [train_step(a, tr, i) for i in range(3)]
        rb = [train_step(b, tr, i) for i in range(3)]
        same = ra == rb and all(np.array_equal(x.flat(), y.flat()) for x, y in zip(a.online, b.online))
        return same, {}

    return [
        _timed("critic", "endpoint_consistency", lambda: endpoint_consistency(seed)),
        _timed("critic", "backprop_through_sampling", lambda: sampler_gradient_check(seed)),
        _timed("critic", "target_stop_gradient", stop_gradient),
        _timed("critic", "droptop_conservatism", conservatism),
        _timed("critic", "determinism", determinism),
    ]


# --- envs -----------------------------------------------------------------------


def envs_suite(seed: int = 0, n_samples: int = 200_000) -> list[PropResult]:
    def oracle_agreement():
        stats, ok = {}, True
        tol = 3.0 / math.sqrt(n_samples)
        for mdp in (bandit_mdp(), bimodal_chain_mdp()):
            for s, a in mdp.live_pairs():
                exact = oracle_return_distribution(mdp, s, a, mode="exact")
                mc = oracle_return_distribution(mdp, s, a, n_samples, seed, mode="monte_carlo")
                d = exact.w1_oracle(mc)
                stats[f"{mdp.name}[{s},{a}]"] = d
                ok &= d <= tol
        return ok, {"w1": stats, "tolerance": tol}

    def bellman_fixed_point():
        stats, ok = {}, True
        for mdp in (bandit_mdp(), bimodal_chain_mdp()):
            oracles = {p: oracle_return_distribution(mdp, *p, mode="exact") for p in mdp.live_pairs()}
            for (s, a), oracle in oracles.items():
                pushed = bellman_pushforward(mdp, s, a, oracles)
                d = pushed.w1_oracle(oracle)
                stats[f"{mdp.name}[{s},{a}]"] = d
                ok &= d <= 1e-3
        return ok, {"w1": stats}

    def drift_affine():
        task = DriftTask()
        rng = np.random.default_rng(seed)
        x = task.mixture.sample(n_samples, rng)
        taus = (np.arange(n_samples) + 0.5) / n_samples
        stats, ok = {}, True
        for k in range(1, task.iterations + 1):
            x = drift_sample_target(x, task.r, task.gamma).atoms
            truth = drift_true_distribution(task, k).quantile(taus)
            d = float(np.mean(np.abs(np.sort(x) - truth)))
            stats[str(k)] = d
            ok &= d <= 3.0 * 2.0 / math.sqrt(n_samples)
        return ok, {"w1": stats}

    return [
        _timed("envs", "oracle_self_consistency", oracle_agreement),
        _timed("envs", "bellman_fixed_point", bellman_fixed_point),
        _timed("envs", "drift_affine_law", drift_affine),
    ]


SUITES = {
    "bridge": bridge_suite,
    "quantile": quantile_suite,
    "asymptotics": asymptotics,
    "nn": nn_suite,
    "critic": critic_suite,
    "envs": envs_suite,
}


def run_suites(names=None, seed: int = 0) -> dict:
    names = list(SUITES) if not names or names == ["all"] else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites: {unknown}")
    results = []
    for name in names:
        results.extend(SUITES[name](seed))
    return {
        "seed": seed,
        "passed": all(r.passed for r in results),
        "results": [asdict(r) for r in results],
    }
