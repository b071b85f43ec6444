"""``rirkit`` command line: train, eval, ablate, sweep, verify."""
import argparse
import sys
from pathlib import Path

from . import _accel
from .config import DATASETS, INITS, RunConfig
from .data import default_data_path
from .errors import RirError, UnsupportedModelError
from .model import ModelKind
from .optim import OPTIMIZERS
from .train import EXIT_FAIL, EXIT_OK, ablate_checkpoint, eval_checkpoint, parse_grid, sweep, train
from .verify import run_all

KINDS = [k.value for k in ModelKind]


def _run_args(p):
    p.add_argument("--arch", default="tiny", help="baseline32, wide18, tiny or desk-b<B>-l<L>-f<F>")
    p.add_argument("--kind", default="rir", choices=KINDS)
    p.add_argument("--dataset", default="cifar10", choices=DATASETS)
    p.add_argument("--data-path", default=None, help="CIFAR binary directory (default: $RIRKIT_DATA)")
    p.add_argument("--subset", type=int, default=5000, help="stratified train subset size; 0 = all")
    p.add_argument("--subset-seed", type=int, default=0)
    p.add_argument("--test-subset", type=int, default=0, help="stratified test subset size; 0 = all")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--opt", default="sgdm", choices=OPTIMIZERS)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--no-center-decay", action="store_true", help="decay fused kernels toward 0, not the identity")
    p.add_argument("--init", default="msr", choices=INITS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--synthetic-train", type=int, default=5000)
    p.add_argument("--synthetic-test", type=int, default=1000)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--f64", action="store_true", help="compute in float64")


def config_from_args(args, command):
    return RunConfig(
        command=command,
        arch=args.arch,
        kind=args.kind,
        dataset=args.dataset,
        data_path=args.data_path or default_data_path(),
        subset=args.subset or None,
        subset_seed=args.subset_seed,
        test_subset=args.test_subset or None,
        epochs=args.epochs,
        batch_size=args.batch_size,
        opt=args.opt,
        lr=args.lr,
        momentum=args.momentum,
        l2=args.l2,
        center_decay=not args.no_center_decay,
        init=args.init,
        seed=args.seed,
        augment=not args.no_augment,
        out=args.out,
        f64=args.f64,
        synthetic_train=args.synthetic_train,
        synthetic_test=args.synthetic_test,
    )


def build_parser():
    ap = argparse.ArgumentParser(prog="rirkit", description="Dual-stream residual networks on CIFAR.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _run_args(p)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-path", default=None)

    p = sub.add_parser("ablate", help="per-layer stream ablation of a resnet-init/rir checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-path", default=None)
    p.add_argument("--out", default=None, help="CSV path (default: ablation.csv next to the checkpoint)")

    p = sub.add_parser("sweep", help="train a grid of blocks x layers-per-block")
    _run_args(p)
    p.add_argument("--grid", default="3x2,3x4", help="comma list of TOTALBLOCKSxLAYERS, e.g. 3x2,6x2")
    p.add_argument("--kinds", default="resnet,rir", help="comma list of model kinds per cell")
    p.add_argument("--filters", type=int, default=8, help="first-stage filters per stream")

    p = sub.add_parser("verify", help="run the equivalence and gradient self-checks")
    p.add_argument("--inject-fault", action="store_true", help="perturb fused kernels by 1e-2 (must fail)")
    p.add_argument("--configs", type=int, default=200)
    return ap


def _err(msg):
    print(f"rirkit: {msg}", file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = config_from_args(args, "train")
            print(f"backend={_accel.backend()}")
            res = train(cfg)
            if res.status != EXIT_OK:
                _err(f"{res.message}; last good state saved to {Path(cfg.out) / 'last_good.rir'}")
            return res.status
        if args.command == "eval":
            acc, ck = eval_checkpoint(args.checkpoint, args.data_path or default_data_path())
            print(f"test_acc={acc:.6f}")
            return EXIT_OK
        if args.command == "ablate":
            out = args.out or str(Path(args.checkpoint).with_name("ablation.csv"))
            rows = ablate_checkpoint(args.checkpoint, out, args.data_path or default_data_path())
            print(f"wrote {len(rows)} rows to {out}")
            return EXIT_OK
        if args.command == "sweep":
            cfg = config_from_args(args, "sweep")
            kinds = [ModelKind.parse(k).value for k in args.kinds.split(",") if k.strip()]
            rows = sweep(cfg, parse_grid(args.grid), kinds, args.filters)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"wrote {len(rows)} rows to {Path(cfg.out) / 'sweep.csv'} ({failed} not ok)")
            return EXIT_OK
        if args.command == "verify":
            results = run_all(args.inject_fault, args.configs)
            failed = [r.name for r in results if not r.passed]
            print("verify: " + ("all checks passed" if not failed else f"FAILED {', '.join(failed)}"))
            return EXIT_FAIL if failed else EXIT_OK
    except UnsupportedModelError as exc:
        _err(str(exc))
        return 2
    except (RirError, FileNotFoundError, KeyError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
