"""Command-line entry point: ``lowrank-mtl {generate,train,eval,gradcheck,sweep}``.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric failure.
Settings resolve as built-in defaults < ``--config`` JSON file < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from lowrank_mtl import checkpoint, data, gradcheck
from lowrank_mtl.errors import ConfigError, DataError, DimensionError, NumericError
from lowrank_mtl.experiment import RunConfig, eval_report, numerical_rank, run_training, sparsity_fraction

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_VALUES = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)

log = logging.getLogger("lowrank_mtl")


class UsageError(Exception):
    pass


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _bools(text):
    return [t.strip().lower() in ("1", "true", "on", "yes") for t in text.split(",") if t.strip()]


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Run configuration assembly


def _add_run_flags(p):
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", help="JSON file mirroring the run configuration")
    g.add_argument("--data", help="dataset JSON-lines file")
    for c in ("c1", "c2", "c3", "c4"):
        g.add_argument(f"--{c}", type=float, help=f"weight {c.upper()}")
    g.add_argument("--step-size", type=float)
    g.add_argument("--l1-epsilon", type=float)
    g.add_argument("--no-backtracking", action="store_true", default=None)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--rel-tol", type=float)
    g.add_argument("--seed", type=int, help="parameter initialization seed")
    g.add_argument("--split-seed", type=int)
    g.add_argument("--split-fraction", type=float)
    g.add_argument("--channels", type=_ints, help="four comma-separated channel counts")
    g.add_argument("--kernels", type=_ints, help="four comma-separated kernel extents")
    g.add_argument("--relu", type=_bools, help="four comma-separated on/off flags")


def _run_config(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
    for section in ("network", "hyper", "stop", "split", "paths"):
        doc.setdefault(section, {})
    hyper = doc["hyper"]
    for c in ("c1", "c2", "c3", "c4"):
        if getattr(args, c) is not None:
            hyper[c] = getattr(args, c)
    if args.step_size is not None:
        hyper["step_size"] = args.step_size
    if args.l1_epsilon is not None:
        hyper["l1_epsilon"] = args.l1_epsilon
    if args.no_backtracking:
        hyper["backtracking"] = False
    if args.max_iters is not None:
        doc["stop"]["max_outer_iters"] = args.max_iters
    if args.rel_tol is not None:
        doc["stop"]["rel_tol"] = args.rel_tol
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.split_seed is not None:
        doc["split"]["seed"] = args.split_seed
    if args.split_fraction is not None:
        doc["split"]["fraction"] = args.split_fraction
    for name in ("channels", "kernels", "relu"):
        if getattr(args, name) is not None:
            doc["network"][name] = getattr(args, name)
    for name in ("data", "checkpoint", "metrics"):
        value = getattr(args, name, None)
        if value is not None:
            doc["paths"][{"data": "dataset"}.get(name, name)] = value
    return RunConfig.from_dict(doc)


def _require_path(run: RunConfig, key: str, flag: str) -> str:
    path = run.paths.get(key)
    if not path:
        raise UsageError(f"missing {flag} (or paths.{key} in --config)")
    return path


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    ds = data.generate_synthetic(args.seed, args.n, args.m, args.len, args.rank, args.noise)
    data.save_dataset(ds, args.out)
    _emit({"n": len(ds), "m": ds.m, "input_shape": list(ds.input_shape)})
    return EXIT_OK


def _train_once(run: RunConfig, dataset, ckpt_path, metrics_path, state=None):
    result = run_training(run, dataset, state)
    st = result.state
    checkpoint.save_checkpoint(st, ckpt_path)
    Path(metrics_path).write_text(checkpoint.metrics_csv(result.rows, run.to_dict()))
    last = result.rows[-1]
    return {
        "iter": st.iter,
        "initial_total": st.history[0].total,
        "final_total": st.history[-1].total,
        "train_accuracy": last["train_accuracy"],
        "test_accuracy": last["test_accuracy"],
        "numerical_rank_w1": numerical_rank(st.params.heads.w1),
        "sparsity_w2": sparsity_fraction(st.params.heads.w2),
        "rejected_steps": len(st.warnings),
    }


def cmd_train(args) -> int:
    run = _run_config(args)
    dataset = data.load_dataset(_require_path(run, "dataset", "--data"))
    ckpt = _require_path(run, "checkpoint", "--checkpoint")
    metrics = _require_path(run, "metrics", "--metrics")
    state = checkpoint.load_checkpoint(args.resume) if args.resume else None
    _emit(_train_once(run, dataset, ckpt, metrics, state))
    return EXIT_OK


def cmd_eval(args) -> int:
    state = checkpoint.load_checkpoint(args.checkpoint)
    dataset = data.load_dataset(args.data)
    if args.subset != "all":
        train_set, test_set = data.split(dataset, data.SplitSpec(args.split_seed, args.split_fraction))
        dataset = train_set if args.subset == "train" else test_set
    _emit(eval_report(state.params, dataset, state.hyper))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.default_gradcheck(args.epsilon, args.tolerance, args.seed)
    for block in report.blocks:
        print(block.line())
    if report.passed:
        print("gradcheck passed")
        return EXIT_OK
    worst = report.worst()
    print(f"gradcheck FAILED; worst block: {worst.name} (max_rel_err={worst.max_rel_err:.3e})")
    return EXIT_CHECK


def cmd_sweep(args) -> int:
    run = _run_config(args)
    dataset = data.load_dataset(_require_path(run, "dataset", "--data"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for value in args.values:
        tag = f"{args.param}_{format(value, 'g')}"
        res = _train_once(
            run.with_hyper(**{args.param: value}),
            dataset,
            out / f"{tag}.checkpoint.json",
            out / f"{tag}.metrics.csv",
        )
        summary.append({"value": value, **res})
        print(json.dumps({"param": args.param, **summary[-1]}, sort_keys=True))
    cols = ["value", "final_total", "train_accuracy", "test_accuracy", "numerical_rank_w1", "sparsity_w2"]
    lines = [",".join(cols)] + [",".join(checkpoint.fmt(r[c]) for c in cols) for r in summary]
    (out / f"sweep_{args.param}.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowrank-mtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic multi-task dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--len", type=int, default=64)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on the training split, write checkpoint + metrics CSV")
    _add_run_flags(p)
    p.add_argument("--checkpoint", help="output checkpoint JSON")
    p.add_argument("--metrics", help="output metrics CSV")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print accuracy, objective, rank and sparsity as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=("all", "train", "test"), default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients on a tiny model")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=None, help="override every block tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train once per value of one weight")
    _add_run_flags(p)
    p.add_argument("--param", choices=("c1", "c2", "c3", "c4"), required=True)
    p.add_argument("--values", type=_floats, default=list(SWEEP_VALUES))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
