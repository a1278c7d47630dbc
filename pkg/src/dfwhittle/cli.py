"""Command-line entry point: generate / train / evaluate / bench.

Exit codes: 0 success, 1 usage error, 2 numeric abort, 3 I/O error.

Files written:
  generate   spec.json, instance_<k>.json, features_<k>.json, trajectories_<k>.json
  train      checkpoint.json, checkpoint_best.json, train_log.csv, summary.json
             (train_log.csv columns: epoch, split, nll, is_eval, soft_is_eval, sim_eval, ms_per_step)
  evaluate   metrics JSON (stdout, or --out)
  bench      CSV with columns: sweep, arms, states, reps, mean_ms, std_ms, reference_ms
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OMEGA = 2.373


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfwhittle", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--num-instances", type=int, default=20)
    g.add_argument("--arms", type=int, default=100)
    g.add_argument("--states", type=int, default=2)
    g.add_argument("--budget", type=int, default=20)
    g.add_argument("--horizon", type=int, default=10)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--trajectories", type=int, default=10)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--observability", choices=("full", "collapsing"), default="full")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train a predictor on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--method", choices=("two-stage", "df-whittle"), default="df-whittle")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--learning-rate", type=float, default=0.01)
    t.add_argument("--epsilon", type=float, default=0.1)
    t.add_argument("--max-iters", type=int, default=200)
    t.add_argument("--convergence-tol", type=float, default=1e-6)
    t.add_argument("--gamma", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--eval-variant", choices=("cwpdis", "single-trajectory"), default="cwpdis")
    t.add_argument("--sim-episodes", type=int, default=100)
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--hidden-dim", type=int, default=64)
    t.add_argument("--dropout", type=float, default=0.2)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint (or the true kernels) on a split")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--truth", action="store_true", help="use the true kernels instead of a model")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--sim-episodes", type=int, default=1000)
    e.add_argument("--eval-variant", choices=("cwpdis", "single-trajectory"), default="cwpdis")
    e.add_argument("--epsilon", type=float, default=0.1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    b = sub.add_parser("bench", help="time one decision-focused gradient step over a grid")
    b.add_argument("--arms", type=int, nargs="+", default=[10, 20, 40, 80])
    b.add_argument("--states", type=int, nargs="+", default=[2, 3, 4, 5])
    b.add_argument("--fixed-arms", type=int, default=10)
    b.add_argument("--fixed-states", type=int, default=2)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    return p


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args) -> int:
    from pathlib import Path

    from .datagen import DatasetSpec, generate_dataset, write_dataset

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_IO
    try:
        spec = DatasetSpec(args.num_instances, args.arms, args.states, args.budget, args.horizon, args.gamma,
                           args.trajectories, args.feature_dim, args.seed, args.observability)
    except ValueError as err:
        raise UsageError(str(err)) from err
    if out.exists() and args.force:
        for f in out.glob("*.json"):
            f.unlink()
    digest = write_dataset(out, spec, generate_dataset(spec))
    print(digest)
    return EXIT_OK


def _train_config(args, method=None):
    from .softtopk import SoftTopKConfig
    from .training import TrainConfig

    try:
        return TrainConfig(method=method or args.method, epochs=args.epochs, learning_rate=args.learning_rate,
                           topk=SoftTopKConfig(args.epsilon, args.max_iters, args.convergence_tol),
                           gamma=args.gamma, seed=args.seed, split_seed=args.split_seed,
                           eval_variant=args.eval_variant, sim_episodes=args.sim_episodes,
                           eval_every=args.eval_every)
    except ValueError as err:
        raise UsageError(str(err)) from err


def cmd_train(args) -> int:
    from pathlib import Path

    from .core import write_json
    from .datagen import read_dataset
    from .predictor import PredictorModel
    from .training import train

    spec, data = read_dataset(args.data)
    if spec.observability != "full":
        raise UsageError("training supports fully observable datasets only")
    cfg = _train_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_IO
    out.mkdir(parents=True, exist_ok=True)
    model = PredictorModel(spec.feature_dim, spec.states, args.hidden_dim, args.dropout, seed=args.seed)
    trained, log = train(data, model, cfg)
    write_json(out / "checkpoint.json", trained.to_json())
    best = trained.copy()
    if log.best_params is not None:
        best.params = log.best_params
    write_json(out / "checkpoint_best.json", best.to_json())
    (out / "train_log.csv").write_text(log.to_csv())
    write_json(out / "summary.json", {"config": cfg.to_json(), **log.summary()})
    print(json.dumps(log.summary()["final"], sort_keys=True))
    return EXIT_OK


def evaluate_dataset(data, items, cfg, model=None, truth=False) -> dict:
    """Per-instance metrics, their mean and standard error, and the
    no-action / random-policy baselines."""
    import numpy as np

    from .core import stack_trajectories
    from .evaluation import NoActionPolicy, RandomPolicy, empirical_kernels, simulate_eval
    from .training import _sim_seed, estimate, evaluate_model

    chosen = [data[i] for i in items]
    fn = (lambda item: item.instance.arms) if truth else None
    metrics = evaluate_model(chosen, model, cfg, kernels_fn=fn)
    rows = []
    for j, (i, item, m) in enumerate(zip(items, chosen, metrics.per_instance)):
        inst = item.instance
        logs = stack_trajectories(item.trajectories)
        emp, _ = empirical_kernels(logs, inst.num_states)
        starts = logs["states"][:, 0]
        base = {}
        for name, probs, policy in (("no_action", np.zeros(logs["states"].shape), NoActionPolicy()),
                                    ("random", np.full(logs["states"].shape, inst.budget / inst.num_arms),
                                     RandomPolicy(inst.budget))):
            sim = simulate_eval(emp, inst.reward, policy, inst.discount, inst.horizon, max(cfg.sim_episodes, 2),
                                seed=_sim_seed(cfg, j), initial_states=starts)
            base[name] = {"is_eval": estimate(probs, logs, inst.discount, cfg.eval_variant).value,
                          "sim_eval": sim.value, "sim_se": sim.std_error}
        rows.append({"instance": int(i), **{k: float(v) for k, v in m.items()}, "baselines": base})

    def agg(values):
        values = np.asarray(values, dtype=float)
        se = values.std(ddof=1) / np.sqrt(len(values)) if len(values) > 1 else 0.0
        return {"mean": float(values.mean()), "se": float(se)}

    keys = ("nll", "is_eval", "soft_is_eval", "sim_eval")
    summary = {k: agg([r[k] for r in rows]) for k in keys}
    for name in ("no_action", "random"):
        summary[name] = {k: agg([r["baselines"][name][k] for r in rows]) for k in ("is_eval", "sim_eval")}
    summary["improvement_over_no_action"] = {
        k: agg([r[k] - r["baselines"]["no_action"][k] for r in rows]) for k in ("is_eval", "sim_eval")}
    return {"instances": rows, "aggregate": summary}


def cmd_evaluate(args) -> int:
    import numpy as np

    from .core import read_json
    from .datagen import read_dataset
    from .predictor import PredictorModel
    from .softtopk import SoftTopKConfig
    from .training import TrainConfig, split_dataset

    spec, data = read_dataset(args.data)
    if spec.observability != "full":
        raise UsageError("evaluation supports fully observable datasets only")
    model = None
    if args.checkpoint:
        model = PredictorModel.from_json(read_json(args.checkpoint))
        if model.input_dim != spec.feature_dim or model.num_states != spec.states:
            print("error: checkpoint dimensions do not match the dataset", file=sys.stderr)
            return EXIT_IO
    try:
        cfg = TrainConfig(topk=SoftTopKConfig(args.epsilon), seed=args.seed, eval_variant=args.eval_variant,
                          sim_episodes=args.sim_episodes)
    except ValueError as err:
        raise UsageError(str(err)) from err
    if args.split == "all":
        items = np.arange(len(data))
    else:
        items = split_dataset(len(data), args.split_seed)[args.split]
    report = evaluate_dataset(data, items, cfg, model=model, truth=args.truth)
    _emit(json.dumps(report, indent=1, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def bench_point(arms: int, states: int, reps: int, seed: int) -> list[float]:
    """Wall-clock (ms) of ``reps`` full gradient steps after one warm-up step."""
    import time

    from .datagen import DatasetSpec, generate_dataset
    from .predictor import PredictorModel
    from .training import TrainConfig, df_gradient

    spec = DatasetSpec(num_instances=1, arms=arms, states=states, budget=max(1, arms // 5), horizon=10,
                       trajectories=10, seed=seed)
    item = generate_dataset(spec)[0]
    model = PredictorModel(spec.feature_dim, states, dropout=0.0, seed=seed)
    cfg = TrainConfig()
    df_gradient(model, item, cfg)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        _, grads = df_gradient(model, item, cfg)
        model.step(grads, cfg.learning_rate)
        times.append(1e3 * (time.perf_counter() - start))
    return times


def run_bench(arms, states, fixed_arms, fixed_states, reps, seed):
    """Time both sweeps; returns ``(rows, slopes)``."""
    import numpy as np

    if reps < 5:
        raise UsageError("bench needs at least 5 repetitions per point")
    rows = []
    for sweep, grid in (("arms", [(n, fixed_states) for n in arms]), ("states", [(fixed_arms, m) for m in states])):
        for n, m in grid:
            t = np.array(bench_point(n, m, reps, seed))
            rows.append({"sweep": sweep, "arms": n, "states": m, "reps": reps,
                         "mean_ms": float(t.mean()), "std_ms": float(t.std(ddof=1))})
    slopes = {}
    for sweep, key in (("arms", "arms"), ("states", "states")):
        pts = [r for r in rows if r["sweep"] == sweep]
        x = np.log([r[key] for r in pts])
        y = np.log([r["mean_ms"] for r in pts])
        slopes[sweep] = float(np.polyfit(x, y, 1)[0]) if len(pts) > 1 else float("nan")
        # reference c * N * M^(omega+1), anchored at the first point of the sweep
        ref = np.array([r["arms"] * r["states"] ** (OMEGA + 1) for r in pts], dtype=float)
        for r, v in zip(pts, pts[0]["mean_ms"] * ref / ref[0]):
            r["reference_ms"] = float(v)
    return rows, slopes


def cmd_bench(args) -> int:
    import csv
    import io

    rows, slopes = run_bench(args.arms, args.states, args.fixed_arms, args.fixed_states, args.reps, args.seed)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["sweep", "arms", "states", "reps", "mean_ms", "std_ms", "reference_ms"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _emit(buf.getvalue(), args.out)
    print(f"slope vs arms: {slopes['arms']:.3f}  slope vs states: {slopes['states']:.3f}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .core import RmabError
    from .predictor import PredictorError
    from .softtopk import SoftTopKError
    from .training import TrainingError
    from .whittle import WhittleError

    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, WhittleError, SoftTopKError, ArithmeticError) as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError, KeyError, RmabError, PredictorError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
