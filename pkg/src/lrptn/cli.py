"""Command-line entry point.

Subcommands: train, gradcheck, count-params, gen-task, eval, baseline.
Exit codes: 0 success, 1 runtime error, 2 usage error. Flags override
values from an optional JSON config file (--config); the fully resolved
configuration is printed at the start of every training run and feeding it
back via --config reproduces the run.
"""

import argparse
import json
import sys

from . import checks, harness, tasks
from .errors import ConfigError, UsageError
from .harness import MNIST_DIR_ENV, TrainConfig
from .linalg import Rng


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--task", choices=["copy", "addition", "pmnist", "mnist"])
    p.add_argument("--model", choices=["gru", "vanilla", "highway"])
    p.add_argument("--N", type=int, dest="copy_lag", help="copy-task temporal gap")
    p.add_argument("--variant", choices=list(tasks.COPY_VARIANTS), dest="copy_variant")
    p.add_argument("--T", type=int, dest="seq_len", help="addition-task sequence length")
    p.add_argument("--n", type=int, help="state dimension")
    p.add_argument("--d", type=int, help="inner rank of the factored maps")
    p.add_argument("--param", choices=["full", "lr", "lrd"])
    p.add_argument("--depth", type=int, help="highway hidden layers")
    p.add_argument("--carry-bias", type=float, dest="carry_bias")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--updates", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=["rmsprop", "adam"])
    p.add_argument("--clip", choices=["component", "norm", "none"])
    p.add_argument("--clip-limit", type=float, dest="clip_limit")
    p.add_argument("--schedule", choices=["plateau", "none"])
    p.add_argument("--l2-output", type=float, dest="l2_output")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--valid-size", type=int, dest="valid_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--mnist-dir", dest="mnist_dir",
                   help=f"directory with the four IDX files (fallback: ${MNIST_DIR_ENV})")
    p.add_argument("--mnist-limit", type=int, dest="mnist_limit")
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics-out", dest="metrics_out")
    p.add_argument("--checkpoint-out", dest="checkpoint_out")
    p.add_argument("--threads", type=int)
    p.add_argument("--no-wall-time", action="store_true",
                   help="write 0.0 wall-clock (bit-reproducible metrics)")


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    data = {}
    if args.config:
        with open(args.config) as f:
            data.update(json.load(f))
    for key in (f.name for f in TrainConfig.__dataclass_fields__.values()):
        if hasattr(args, key) and getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.no_wall_time:
        data["record_wall_time"] = False
    cfg = TrainConfig.from_dict(data)
    if cfg.param == "full" and any(getattr(args, k, None) is not None for k in ("d",)) and args.d:
        raise UsageError("--d has no meaning with --param full")
    if cfg.param == "full":
        cfg.d = None
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    result = harness.train(cfg, log=lambda msg: print(msg, file=sys.stderr))
    last = result.history[-1]
    print(f"done: {len(result.history)} metrics rows, best valid loss "
          f"{result.best_valid_loss:.6f}, skipped updates {result.skipped_updates}")
    if last.get("valid_accuracy") is not None:
        print(f"final valid accuracy {last['valid_accuracy']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cell_kinds = checks.CELL_KINDS if args.cell == "all" else (args.cell,)
    param_kinds = ("full", "lr", "lrd") if args.param == "all" else (args.param,)
    reports = checks.gradcheck_suite(cell_kinds, param_kinds, n=args.n, d=args.d,
                                     steps=args.T, h=args.h, tol=args.tol, seed=args.seed)
    print(f"{'cell':<10s} {'param':<6s} {'max rel err':>12s}  status")
    ok = True
    for (ck, pk), report in reports.items():
        ok &= report.passed
        print(f"{ck:<10s} {pk:<6s} {report.max_rel_err:>12.3e}  "
              f"{'ok' if report.passed else 'FAIL'}")
    print(f"tolerance {args.tol:g} at h={args.h:g}")
    return 0 if ok else 1


def cmd_count_params(args) -> int:
    d = None if args.param == "full" else args.d
    cfg = TrainConfig(task=args.task, model=args.model, n=args.n, d=d,
                      param=args.param, depth=args.depth, updates=0)
    model = harness.build_model(cfg, Rng(args.seed).fork("init"))
    for block, count in harness.count_params(model).items():
        print(f"{block:<36s} {count:>12,d}")
    return 0


def cmd_gen_task(args) -> int:
    rng = Rng(args.seed).fork("gen-task")
    if args.task == "copy":
        spec = tasks.CopySpec(args.copy_lag, args.copy_variant)
        gen = lambda: tasks.gen_copy(spec, rng)
    elif args.task == "addition":
        spec = tasks.AdditionSpec(args.seq_len)
        gen = lambda: tasks.gen_addition(spec, rng)
    else:
        raise UsageError("gen-task covers the generated tasks: copy, addition")
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for _ in range(args.count):
            out.write(json.dumps(tasks.sample_to_record(gen())) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    model, info = harness.load_checkpoint(args.checkpoint)
    cfg: TrainConfig = info["config"]
    if args.mnist_dir:
        cfg.mnist_dir = args.mnist_dir
    datasets = harness.build_datasets(cfg)
    metrics = harness.evaluate(model, datasets[args.split], harness.loss_kind_for(cfg),
                               batch=args.batch)
    line = f"{args.split} loss {metrics['loss']:.6f}"
    if "accuracy" in metrics:
        line += f" accuracy {metrics['accuracy']:.4f}"
    print(line)
    return 0


def cmd_baseline(args) -> int:
    if args.task == "copy":
        value = tasks.copy_baseline_ce(tasks.CopySpec(args.copy_lag, "fixed"))
        print(f"copy N={args.copy_lag} memoryless-optimal cross-entropy: {value:.6f} nats/step")
    elif args.task == "addition":
        value = tasks.addition_baseline_mse()
        print(f"addition best-constant-predictor MSE: {value:.6f}")
    else:
        raise UsageError("baseline covers: copy, addition")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrptn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per config/flags")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--cell", default="all", choices=["all", *checks.CELL_KINDS])
    p.add_argument("--param", default="all", choices=["all", "full", "lr", "lrd"])
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--T", type=int, default=3, dest="T")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("count-params", help="per-block parameter counts for a model spec")
    p.add_argument("--task", default="copy", choices=["copy", "addition", "pmnist", "mnist"])
    p.add_argument("--model", default="gru", choices=["gru", "vanilla", "highway"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--param", default="full", choices=["full", "lr", "lrd"])
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("gen-task", help="dump task samples as JSON lines")
    p.add_argument("--task", required=True, choices=["copy", "addition"])
    p.add_argument("--N", type=int, default=50, dest="copy_lag")
    p.add_argument("--variant", default="fixed", choices=list(tasks.COPY_VARIANTS),
                   dest="copy_variant")
    p.add_argument("--T", type=int, default=100, dest="seq_len")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_task)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--mnist-dir", dest="mnist_dir")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="print analytic task baselines")
    p.add_argument("--task", required=True, choices=["copy", "addition"])
    p.add_argument("--N", type=int, default=500, dest="copy_lag")
    p.set_defaults(fn=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: bad files, non-finite losses, ...
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
