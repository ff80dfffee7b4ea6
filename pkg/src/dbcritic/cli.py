"""Command-line experiments: ``dbc bias-table | toy-drift | train-mdp | props``.

Exit codes: 0 success, 2 acceptance mismatch, 3 divergence, 4 config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .bridge_schedule import REFERENCE_BIAS_TABLE, EvalRule, bias_table
from .dbc_critic import ConfigError, DivergenceError
from .experiments import (
    DriftRunConfig,
    MdpRunConfig,
    drift_verdict,
    majority_verdict,
    mdp_oracles,
    run_drift_dbc,
    run_drift_flow,
    run_train_mdp,
    write_csv,
    write_json,
)
from .props import run_suites
from .toy_envs import TabularMdp, desk_suite

EXIT_OK, EXIT_MISMATCH, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3, 4
OUT_ENV = "DBC_OUT_ROOT"
TABLE_TOL_PP = 0.05


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    outputs: list = field(default_factory=list)
    version: str = field(default_factory=code_version)
    status: str = "running"
    exit_code: int | None = None
    started_at: float = field(default_factory=time.time)
    wall_clock_s: float | None = None

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def finalize(self, out_dir: Path, code: int) -> None:
        self.exit_code = code
        self.status = {EXIT_OK: "ok", EXIT_MISMATCH: "mismatch", EXIT_DIVERGED: "diverged"}.get(code, "error")
        self.wall_clock_s = round(time.time() - self.started_at, 3)
        self.write(out_dir)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _out_dir(args, command: str) -> Path:
    root = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / command
    root.mkdir(parents=True, exist_ok=True)
    return root


# --- commands -------------------------------------------------------------------


def cmd_bias_table(args, out: Path, manifest: RunManifest) -> int:
    rule = EvalRule(args.eval_rule)
    steps = [int(s) for s in args.steps.split(",")] if args.steps else sorted(REFERENCE_BIAS_TABLE)
    rows = bias_table(steps, eval_rule=rule)
    write_csv(out / "bias_table.csv", rows)
    manifest.outputs.append("bias_table.csv")
    summary = {"eval_rule": rule.value, "steps": steps}
    code = EXIT_OK
    if rule is EvalRule.RIGHT:
        worst, cell = 0.0, None
        for row in rows:
            ref = REFERENCE_BIAS_TABLE.get(row["steps"])
            if ref is None:
                continue
            for j, key in enumerate(("constant_pct", "linear_pct", "cosine_pct")):
                d = abs(row[key] - ref[j])
                if d > worst:
                    worst, cell = d, {"steps": row["steps"], "schedule": key[:-4], "got": row[key], "ref": ref[j]}
        summary.update(compared=True, max_abs_diff_pp=worst, worst_cell=cell, passed=worst <= TABLE_TOL_PP)
        if worst > TABLE_TOL_PP:
            print(f"bias table mismatch: worst cell {cell}", file=sys.stderr)
            code = EXIT_MISMATCH
    else:
        summary.update(compared=False, note="left-endpoint Euler rule; reference table uses the right rule")
    write_json(out / "summary.json", summary)
    manifest.outputs.append("summary.json")
    for row in rows:
        print(f"M={row['steps']:>5}  const={row['constant_pct']:.2f}  lin={row['linear_pct']:.2f}  cos={row['cosine_pct']:.2f}")
    return code


def cmd_toy_drift(args, out: Path, manifest: RunManifest) -> int:
    cfg = DriftRunConfig.from_dict(manifest.config)
    runs = {}
    for seed in manifest.seeds:
        runs[seed] = {}
        for method, runner in (("flow_baseline", run_drift_flow), ("dbc", run_drift_dbc)):
            records, losses, draws = runner(cfg, seed)
            runs[seed][method] = records
            tables = [(f"drift_{method}_seed{seed}.csv", records), (f"loss_{method}_seed{seed}.csv", losses)]
            tables += [(f"samples_{method}_seed{seed}_k{k}.csv", [{"x": x} for x in d]) for k, d in enumerate(draws)]
            for name, rows in tables:
                write_csv(out / name, rows)
                manifest.outputs.append(name)
            gaps = " ".join(f"{r['gap']:.3f}" for r in records)
            print(f"seed {seed} {method:>13}: gap per iteration {gaps}; W1 at k=0 {records[0]['w1']:.3f}")
    verdict = drift_verdict(runs)
    summary = {
        "gap_trajectories": {
            str(seed): {m: [r["gap"] for r in recs] for m, recs in rec.items()} for seed, rec in runs.items()
        },
        "w1_trajectories": {
            str(seed): {m: [r["w1"] for r in recs] for m, recs in rec.items()} for seed, rec in runs.items()
        },
        "verdict": verdict,
    }
    write_json(out / "summary.json", summary)
    manifest.outputs.append("summary.json")
    return EXIT_OK if verdict["passed"] else EXIT_MISMATCH


def _mdps(args) -> dict:
    if args.mdp:
        try:
            mdp = TabularMdp.from_json(Path(args.mdp).read_text())
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"bad MDP spec {args.mdp}: {exc}") from exc
        return {mdp.name: mdp}
    suite = desk_suite()
    if args.suite in (None, "all"):
        return suite
    names = args.suite.split(",")
    missing = [n for n in names if n not in suite]
    if missing:
        raise ConfigError(f"unknown MDPs {missing}; choose from {sorted(suite)}")
    return {n: suite[n] for n in names}


def cmd_train_mdp(args, out: Path, manifest: RunManifest) -> int:
    cfg = MdpRunConfig.from_dict(manifest.config)
    cache = Path(os.environ.get("DBC_ORACLE_CACHE", out / "oracles"))
    summary = {}
    ok = True
    for name, mdp in _mdps(args).items():
        oracles = mdp_oracles(mdp, cfg, cache)
        finals = {}
        for seed in manifest.seeds:
            res = run_train_mdp(mdp, cfg, seed, oracles)
            for kind in ("metrics", "losses"):
                fname = f"{kind}_{name}_seed{seed}.csv"
                write_csv(out / fname, res[kind])
                manifest.outputs.append(fname)
            finals[seed] = res["final"]
            for r in res["final"]:
                print(
                    f"{name} seed {seed} (s={r['s']}, a={r['a']}): W1 {r['w1']:.4f} (IQR {r['iqr']:.3f}), "
                    f"|Q - mean| {r['abs_err']:.4f} (scale {r['mean_abs']:.3f}) {'ok' if r['passed'] else 'FAIL'}"
                )
        verdict = majority_verdict(finals)
        summary[name] = {"final": {str(k): v for k, v in finals.items()}, "verdict": verdict}
        ok &= verdict["passed"]
    summary["passed"] = ok
    write_json(out / "summary.json", summary)
    manifest.outputs.append("summary.json")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_props(args, out: Path, manifest: RunManifest) -> int:
    names = args.suite.split(",") if args.suite else None
    reports = {}
    try:
        for seed in manifest.seeds:
            reports[str(seed)] = run_suites(names, seed)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    passed = all(r["passed"] for r in reports.values())
    write_json(out / "props_report.json", {"passed": passed, "reports": reports})
    manifest.outputs.append("props_report.json")
    for seed, rep in reports.items():
        for r in rep["results"]:
            print(f"[seed {seed}] {r['suite']}/{r['name']}: {'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_MISMATCH


COMMANDS = {
    "bias-table": cmd_bias_table,
    "toy-drift": cmd_toy_drift,
    "train-mdp": cmd_train_mdp,
    "props": cmd_props,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--steps", help="bias-table: list of M; toy-drift: iteration-0 steps; train-mdp: steps")
    common.add_argument("--suite", help="train-mdp: MDP names; props: suite names")

    parser = argparse.ArgumentParser(prog="dbc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    bt = sub.add_parser("bias-table", parents=[common], help="Euler endpoint-error table")
    bt.add_argument("--eval-rule", choices=["left", "right"], default="right")
    sub.add_parser("toy-drift", parents=[common], help="mixture drift study: DBC vs flow matching")
    tm = sub.add_parser("train-mdp", parents=[common], help="train on desk MDPs against return oracles")
    tm.add_argument("--mdp", help="path to an MDP JSON spec (overrides --suite)")
    sub.add_parser("props", parents=[common], help="run property suites")
    return parser


def _config_for(args) -> dict:
    raw = _load_json(args.config)
    if args.command == "toy-drift":
        cfg = DriftRunConfig.from_dict(raw)
        if args.steps:
            cfg.task = type(cfg.task)(**{**cfg.task.to_dict(), "initial_steps": int(args.steps)})
        return cfg.to_dict()
    if args.command == "train-mdp":
        cfg = MdpRunConfig.from_dict(raw)
        if args.steps:
            cfg.steps = int(args.steps)
        return cfg.to_dict()
    return {**raw, **{k: v for k, v in vars(args).items() if k in ("eval_rule", "steps", "suite") and v}}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seeds = _parse_seeds(args.seeds)
        config = _config_for(args)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args, args.command)
    manifest = RunManifest(args.command, config, seeds)
    manifest.write(out)
    try:
        code = COMMANDS[args.command](args, out, manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    manifest.finalize(out, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
