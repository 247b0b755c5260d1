"""Command-line interface: experiment orchestration and stable output files.

Subcommands: ``train``, ``evaluate``, ``dp``, ``cdlp``, ``a2c``,
``queueing-train``, ``queueing-eval``, ``table``.  Instances and configs are
JSON; all tabular outputs are CSV.  Every run appends one row per result to
``manifest.csv`` in the output directory and one provenance row to
``runs.csv``.  Seeds are mandatory (from the config or ``--seed``) so runs
are reproducible; exit code 2 flags validation problems, 3 a training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, learn, queueing
from .model import (
    Constant,
    LinearRamp,
    NetworkInstance,
    PiecewiseConstant,
    Segment,
    SegmentedMNL,
    Sinusoidal,
    ValidationError,
)
from .policy import (
    BernoulliNNPolicy,
    GreedyPolicy,
    LinearPairPolicy,
    LinearROPolicy,
    UniformRandomPolicy,
    load_policy_params,
    save_policy_params,
)
from .simulate import RngStream, dump_trajectories, roll_batch

EXIT_VALIDATION = 2
EXIT_DIVERGED = 3

ARRIVAL_TYPES = {
    "constant": (Constant, ("rate",)),
    "piecewise_constant": (PiecewiseConstant, ("breakpoints", "rates")),
    "sinusoidal": (Sinusoidal, ("base", "amplitude", "period")),
    "linear_ramp": (LinearRamp, ("start", "end", "duration")),
}


class CliError(SystemExit):
    def __init__(self, message):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(EXIT_VALIDATION)


# ---------------------------------------------------------------------------
# JSON parsing (the CLI owns parsing; the model owns validation)


def rate_from_dict(node, field: str):
    if not isinstance(node, dict) or "type" not in node:
        raise CliError(f"{field}: expected an object with a 'type' key")
    kind = node["type"]
    if kind not in ARRIVAL_TYPES:
        raise CliError(f"{field}.type: unknown rate type {kind!r} (choose from {sorted(ARRIVAL_TYPES)})")
    cls, keys = ARRIVAL_TYPES[kind]
    params = node.get("params", {})
    missing = [k for k in keys if k not in params]
    if missing:
        raise CliError(f"{field}.params: missing {missing} for type {kind!r}")
    return cls(**{k: params[k] for k in keys})


def rate_to_dict(rate) -> dict:
    for name, (cls, keys) in ARRIVAL_TYPES.items():
        if isinstance(rate, cls):
            return {"type": name, "params": {k: getattr(rate, k) for k in keys}}
    raise ValueError(f"unknown rate object {rate!r}")


def instance_from_dict(doc: dict) -> NetworkInstance:
    for key in ("m", "n", "A", "p", "c", "T", "arrival", "segments"):
        if key not in doc:
            raise CliError(f"instance file: missing key {key!r}")
    m, n = int(doc["m"]), int(doc["n"])
    A = np.asarray(doc["A"], dtype=np.int64).reshape(m, n)  # row-major
    segments = []
    for i, seg in enumerate(doc["segments"]):
        for key in ("share", "products", "weights", "no_purchase_weight"):
            if key not in seg:
                raise CliError(f"segments[{i}]: missing key {key!r}")
        segments.append(Segment(seg["share"], tuple(seg["products"]), tuple(seg["weights"]), seg["no_purchase_weight"]))
    try:
        return NetworkInstance(A, doc["p"], doc["c"], doc["T"], rate_from_dict(doc["arrival"], "arrival"), SegmentedMNL(segments))
    except ValidationError as exc:
        raise CliError(f"instance file: {exc}")


def instance_to_dict(inst: NetworkInstance) -> dict:
    return {
        "m": inst.m,
        "n": inst.n,
        "A": inst.A.ravel().tolist(),
        "p": inst.p.tolist(),
        "c": inst.c.tolist(),
        "T": inst.T,
        "arrival": rate_to_dict(inst.arrival),
        "segments": [
            {
                "share": seg.share,
                "products": list(seg.products),
                "weights": list(seg.weights),
                "no_purchase_weight": seg.no_purchase_weight,
            }
            for seg in inst.choice.segments
        ],
    }


def queue_from_dict(doc: dict) -> queueing.QueueInstance:
    for key in ("C", "T", "K1", "K2", "K3", "lambda", "mu"):
        if key not in doc:
            raise CliError(f"queue instance file: missing key {key!r}")
    try:
        return queueing.QueueInstance(
            capacity=int(doc["C"]),
            T=float(doc["T"]),
            admission_reward=float(doc["K1"]),
            holding_cost=float(doc["K2"]),
            terminal_penalty=float(doc["K3"]),
            arrival=rate_from_dict(doc["lambda"], "lambda"),
            service=rate_from_dict(doc["mu"], "mu"),
        )
    except ValidationError as exc:
        raise CliError(f"queue instance file: {exc}")


def queue_to_dict(inst: queueing.QueueInstance) -> dict:
    return {
        "C": inst.capacity,
        "T": inst.T,
        "K1": inst.admission_reward,
        "K2": inst.holding_cost,
        "K3": inst.terminal_penalty,
        "lambda": rate_to_dict(inst.arrival),
        "mu": rate_to_dict(inst.service),
    }


def _load_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} file {path}: invalid JSON at line {exc.lineno}: {exc.msg}")


# ---------------------------------------------------------------------------
# run manifest


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _append_csv(path: Path, header: list, row: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(header)
        w.writerow(row)


MANIFEST_HEADER = ["policy", "instance", "mean", "ci99", "paths", "seed", "wallclock_s"]


def record_result(out_dir: Path, policy: str, instance: str, mean: float, ci99: float, paths: int, seed, wallclock: float) -> None:
    _append_csv(out_dir / "manifest.csv", MANIFEST_HEADER, [policy, instance, f"{mean:.6f}", f"{ci99:.6f}", paths, seed, f"{wallclock:.3f}"])


def record_run(out_dir: Path, command: str, instance: str, config_doc, seed, outputs: list) -> None:
    _append_csv(
        out_dir / "runs.csv",
        ["command", "instance", "config_hash", "seed", "git_describe", "outputs"],
        [command, instance, _config_hash(config_doc), seed, _git_describe(), ";".join(outputs)],
    )


def write_curve(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "avg_revenue", "ci99", "wallclock_s"])
        for p in curve:
            w.writerow([p.episode, f"{p.avg_revenue:.6f}", f"{p.ci99:.6f}", f"{p.wallclock_s:.3f}"])


# ---------------------------------------------------------------------------
# subcommands


def _require_seed(cfg: dict, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise CliError("a seed is required (config key 'seed' or --seed); wall-clock seeding is not supported")
    return int(seed)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("INTENSITY_RL_THREADS", "1"))


def _train_config(cfg: dict, seed: int, out_dir) -> learn.TrainConfig:
    return learn.TrainConfig(
        episodes=int(cfg.get("episodes", 0)),
        batch_size=int(cfg.get("batch", cfg.get("batch_size", 10))),
        gamma=float(cfg.get("gamma", 1e-3)),
        lr_phi=float(cfg.get("lr_phi", 1e-5)),
        lr_theta=float(cfg.get("lr_theta", 0.0)),
        degree=int(cfg.get("degree", 2)),
        quad_order=int(cfg.get("quad_order", 8)),
        seed=seed,
        pe_method=cfg.get("pe_method", "mc"),
        eval_every=int(cfg.get("eval_every", 0)),
        eval_paths=int(cfg.get("eval_paths", 2000)),
        actor_hidden=tuple(cfg.get("actor_hidden", (64, 64))),
        critic_hidden=tuple(cfg.get("critic_hidden", (64, 64))),
        checkpoint_every=int(cfg.get("checkpoint_every", 0)),
        out_dir=str(out_dir),
    )


def cmd_train(args) -> int:
    doc = _load_json(args.instance, "instance")
    cfg = _load_json(args.config, "config")
    inst = instance_from_dict(doc)
    seed = _require_seed(cfg, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parametrization = cfg.get("parametrization", "linear-pair")
    tcfg = _train_config(cfg, seed, out_dir)
    try:
        res = learn.train_actor_critic(inst, tcfg, parametrization)
    except learn.TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve_path = out_dir / "learning_curve.csv"
    write_curve(curve_path, res.curve)
    params_path = out_dir / "final_params.npz"
    save_policy_params(params_path, res.policy)
    final = res.curve[-1]
    record_result(out_dir, parametrization, args.instance, final.avg_revenue, final.ci99, tcfg.eval_paths, seed, final.wallclock_s)
    record_run(out_dir, "train", args.instance, cfg, seed, [str(curve_path), str(params_path)])
    print(f"trained {parametrization} for {res.n_updates} updates; final revenue {final.avg_revenue:.3f} +- {final.ci99:.3f}")
    return 0


def _policy_by_name(name: str, inst, params_file=None, cfg=None):
    cfg = cfg or {}
    if name == "uniform-random":
        return UniformRandomPolicy(inst)
    if name == "greedy":
        return GreedyPolicy(inst)
    if name == "cdlp":
        sol = baselines.solve_cdlp(inst)
        return baselines.CDLPSchedulePolicy(inst, sol)
    if name in ("linear-pair", "linear-ro", "bernoulli-nn"):
        if params_file is None:
            raise CliError(f"policy {name!r} needs --params with a saved parameter file")
        header = json.loads(str(np.load(params_file)["header"]))
        gamma, d = header.get("gamma"), header.get("d")
        if name == "linear-pair":
            pol = LinearPairPolicy(inst, d, gamma)
        elif name == "linear-ro":
            pol = LinearROPolicy(inst, d, gamma)
        else:
            from .tinynn import MLP

            pol = BernoulliNNPolicy(inst, MLP(header["widths"], rng=RngStream(0)), gamma)
        load_policy_params(params_file, pol)
        return pol
    raise CliError(f"unknown policy {name!r}")


def cmd_evaluate(args) -> int:
    doc = _load_json(args.instance, "instance")
    inst = instance_from_dict(doc)
    if args.seed is None:
        raise CliError("--seed is required for evaluation")
    if args.paths < 2:
        raise CliError("--paths must be at least 2")
    out_dir = Path(args.out)
    policy = _policy_by_name(args.policy, inst, args.params)
    rep = baselines.evaluate(inst, policy, args.paths, RngStream(args.seed), label=args.policy, threads=_threads(args))
    record_result(out_dir, args.policy, args.instance, rep.mean, rep.ci99, rep.paths, args.seed, rep.wallclock_s)
    record_run(out_dir, "evaluate", args.instance, {"policy": args.policy, "paths": args.paths}, args.seed, [])
    if args.dump_trajectories:
        trajs = roll_batch(inst, policy, min(args.paths, 1000), RngStream(args.seed).split(999))
        dump_trajectories(args.dump_trajectories, trajs)
    print(f"{args.policy}: {rep.mean:.3f} +- {rep.ci99:.3f} over {rep.paths} paths")
    return 0


def cmd_dp(args) -> int:
    doc = _load_json(args.instance, "instance")
    inst = instance_from_dict(doc)
    out_dir = Path(args.out)
    t0 = time.perf_counter()
    try:
        sol = baselines.solve_dp(inst, args.dt)
    except MemoryError as exc:
        raise CliError(str(exc))
    wall = time.perf_counter() - t0
    record_result(out_dir, f"dp-{args.dt:g}", args.instance, sol.v0, 0.0, 0, args.seed or 0, wall)
    record_run(out_dir, "dp", args.instance, {"dt": args.dt}, args.seed or 0, [])
    print(f"V*(0, c) = {sol.v0:.3f} at dt={args.dt:g} ({wall:.1f}s)")
    return 0


def cmd_cdlp(args) -> int:
    doc = _load_json(args.instance, "instance")
    inst = instance_from_dict(doc)
    out_dir = Path(args.out)
    t0 = time.perf_counter()
    sol = baselines.solve_cdlp(inst)
    wall = time.perf_counter() - t0
    record_result(out_dir, "cdlp-bound", args.instance, sol.objective, 0.0, 0, args.seed or 0, wall)
    outputs = []
    if args.paths:
        if args.seed is None:
            raise CliError("--seed is required when simulating the schedule policy")
        rep = baselines.evaluate(inst, baselines.CDLPSchedulePolicy(inst, sol), args.paths, RngStream(args.seed), threads=_threads(args))
        record_result(out_dir, "cdlp", args.instance, rep.mean, rep.ci99, rep.paths, args.seed, rep.wallclock_s)
        print(f"cdlp schedule policy: {rep.mean:.3f} +- {rep.ci99:.3f}")
    record_run(out_dir, "cdlp", args.instance, {"paths": args.paths}, args.seed or 0, outputs)
    print(f"z_CDLP = {sol.objective:.3f} ({wall:.2f}s)")
    return 0


def cmd_a2c(args) -> int:
    doc = _load_json(args.instance, "instance")
    cfg = _load_json(args.config, "config")
    inst = instance_from_dict(doc)
    seed = _require_seed(cfg, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parametrization = cfg.get("parametrization", "linear-pair")
    acfg = baselines.A2CConfig(
        dt=float(args.dt if args.dt is not None else cfg.get("dt", 0.5)),
        episodes=int(cfg.get("episodes", 0)),
        batch_size=int(cfg.get("batch", 10)),
        gamma=float(cfg.get("gamma", 1e-3)),
        lr_phi=float(cfg.get("lr_phi", 1e-5)),
        lr_theta=float(cfg.get("lr_theta", 0.0)),
        value_loss_weight=float(cfg.get("value_loss_weight", 1.0)),
        degree=int(cfg.get("degree", 2)),
        seed=seed,
        eval_every=int(cfg.get("eval_every", 0)),
        eval_paths=int(cfg.get("eval_paths", 2000)),
        actor_hidden=tuple(cfg.get("actor_hidden", (64, 64))),
        critic_hidden=tuple(cfg.get("critic_hidden", (64, 64))),
    )
    try:
        res = baselines.train_a2c(inst, acfg, parametrization)
    except learn.TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve_path = out_dir / "learning_curve.csv"
    write_curve(curve_path, res.curve)
    params_path = out_dir / "final_params.npz"
    save_policy_params(params_path, res.policy.policy)
    final = res.curve[-1]
    record_result(out_dir, f"a2c-{parametrization}-dt{acfg.dt:g}", args.instance, final.avg_revenue, final.ci99, acfg.eval_paths, seed, final.wallclock_s)
    record_run(out_dir, "a2c", args.instance, cfg, seed, [str(curve_path), str(params_path)])
    print(f"a2c dt={acfg.dt:g}: final revenue {final.avg_revenue:.3f} +- {final.ci99:.3f}")
    return 0


def cmd_queueing_train(args) -> int:
    doc = _load_json(args.instance, "queue instance")
    cfg = _load_json(args.config, "config")
    inst = queue_from_dict(doc)
    seed = _require_seed(cfg, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    qcfg = queueing.QueueTrainConfig(
        episodes=int(cfg.get("episodes", 0)),
        batch_size=int(cfg.get("batch", 100)),
        gamma=float(cfg.get("gamma", 1e-3)),
        lr_phi=float(cfg.get("lr_phi", 1e-5)),
        lr_theta=float(cfg.get("lr_theta", 3e-2)),
        quad_order=int(cfg.get("quad_order", 8)),
        seed=seed,
        eval_every=int(cfg.get("eval_every", 0)),
        eval_paths=int(cfg.get("eval_paths", 2000)),
        actor_hidden=tuple(cfg.get("actor_hidden", (8, 8))),
        critic_hidden=tuple(cfg.get("critic_hidden", (8, 8))),
    )
    try:
        res = queueing.train_queue_actor_critic(inst, qcfg)
    except learn.TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve_path = out_dir / "learning_curve.csv"
    write_curve(curve_path, res.curve)
    params_path = out_dir / "final_params.npz"
    save_policy_params(params_path, res.policy)
    final = res.curve[-1]
    record_result(out_dir, "queue-bernoulli-mlp", args.instance, final.avg_revenue, final.ci99, qcfg.eval_paths, seed, final.wallclock_s)
    record_run(out_dir, "queueing-train", args.instance, cfg, seed, [str(curve_path), str(params_path)])
    print(f"trained admission policy; final objective {final.avg_revenue:.3f} +- {final.ci99:.3f}")
    return 0


def cmd_queueing_eval(args) -> int:
    doc = _load_json(args.instance, "queue instance")
    inst = queue_from_dict(doc)
    if args.seed is None:
        raise CliError("--seed is required for evaluation")
    out_dir = Path(args.out)
    rng = RngStream(args.seed)
    t0 = time.perf_counter()
    if args.policy == "uniform-random":
        rep = queueing.evaluate_queue(inst, queueing.QueueUniformRandomPolicy(inst), args.paths, rng)
        label = "queue-uniform"
    elif args.policy == "best-threshold":
        xbar, rep = queueing.best_threshold(inst, args.paths, rng)
        label = f"threshold-{xbar}"
    elif args.policy == "dp":
        V = queueing.solve_queue_dp(inst, args.dt)
        record_result(out_dir, f"queue-dp-{args.dt:g}", args.instance, float(V[0, 0]), 0.0, 0, args.seed, time.perf_counter() - t0)
        record_run(out_dir, "queueing-eval", args.instance, {"policy": "dp", "dt": args.dt}, args.seed, [])
        print(f"V*(0, 0) = {V[0, 0]:.3f} at dt={args.dt:g}")
        return 0
    elif args.policy.startswith("threshold-"):
        xbar = int(args.policy.split("-", 1)[1])
        rep = queueing.evaluate_queue(inst, queueing.ThresholdPolicy(inst, xbar), args.paths, rng)
        label = args.policy
    else:
        raise CliError(f"unknown queue policy {args.policy!r}")
    record_result(out_dir, label, args.instance, rep.mean, rep.ci99, rep.paths, args.seed, rep.wallclock_s)
    record_run(out_dir, "queueing-eval", args.instance, {"policy": args.policy, "paths": args.paths}, args.seed, [])
    print(f"{label}: {rep.mean:.3f} +- {rep.ci99:.3f} over {rep.paths} paths")
    return 0


def cmd_table(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError("manifest is empty")
    ref = None
    for row in rows:
        if row["policy"].startswith("dp"):
            ref = float(row["mean"])
            break
    if ref is None:
        ref = max(float(r["mean"]) for r in rows)
    name_w = max(len(r["policy"]) for r in rows) + 2
    print(f"{'policy':<{name_w}}{'mean':>12}{'ci99':>10}{'paths':>10}{'ratio %':>10}")
    for row in rows:
        mean = float(row["mean"])
        ratio = 100.0 * mean / ref if ref else 100.0
        print(f"{row['policy']:<{name_w}}{mean:>12.3f}{float(row['ci99']):>10.3f}{row['paths']:>10}{ratio:>10.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intensity-rl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=False, paths=False, dt=None):
        p.add_argument("--instance", required=True)
        p.add_argument("--out", default="runs")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if config:
            p.add_argument("--config", required=True)
        if paths:
            p.add_argument("--paths", type=int, default=10000)
        if dt is not None:
            p.add_argument("--dt", type=float, default=dt)

    p = sub.add_parser("train", help="continuous-time actor-critic training")
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation of a policy")
    common(p, paths=True)
    p.add_argument("--policy", default="uniform-random")
    p.add_argument("--params", default=None, help="saved parameter file for trained policies")
    p.add_argument("--dump-trajectories", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dp", help="exact dynamic program on a time grid")
    common(p, dt=0.001)
    p.set_defaults(func=cmd_dp)

    p = sub.add_parser("cdlp", help="deterministic LP bound and schedule policy")
    common(p)
    p.add_argument("--paths", type=int, default=0, help="simulate the schedule policy on this many paths")
    p.set_defaults(func=cmd_cdlp)

    p = sub.add_parser("a2c", help="discrete-time advantage actor-critic")
    common(p, config=True, dt=None)
    p.add_argument("--dt", type=float, default=None)
    p.set_defaults(func=cmd_a2c)

    p = sub.add_parser("queueing-train", help="queue admission actor-critic")
    common(p, config=True)
    p.set_defaults(func=cmd_queueing_train)

    p = sub.add_parser("queueing-eval", help="queue baselines and DP")
    common(p, paths=True, dt=0.001)
    p.add_argument("--policy", default="uniform-random")
    p.set_defaults(func=cmd_queueing_eval)

    p = sub.add_parser("table", help="format a manifest as a comparison table")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_table)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return exc.code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
