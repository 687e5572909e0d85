"""Command-line entry point.

Subcommands: synth, train, eval, perturb, check, sweep. Exit codes are a
stable contract: 0 success, 1 configuration error, 2 data error, 3 numeric
failure. `HUGNN_THREADS` caps sweep parallelism.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .checkpoint import hyper_to_dict, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DataError, NumericError
from .graph import (homophily_ratio, load_bundle, save_bundle,
                    synth_heterophily, two_hop_homophily)
from .model import HyperParams, compute_u0, parse_ablate
from .perturb import PerturbSpec, feature_pgd, perturb
from .rng import Rng
from .theory import (contraction_probe, gradient_check, theorem3_experiment,
                     toy_bundle)
from .training import TrainConfig, evaluate, train


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; configuration problems
    here are exit 1, so route them through ConfigError instead."""

    def error(self, message):
        raise ConfigError(message)


def _add_hyper_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--hidden", type=int, default=64, help="hidden width")
    sp.add_argument("--layers", type=int, default=2, help="local layers")
    sp.add_argument("--communities", type=int, default=0,
                    help="community count; 0 picks max(2, round(sqrt(n)))")
    sp.add_argument("--temp-start", type=float, default=1.0)
    sp.add_argument("--temp-end", type=float, default=0.1)
    sp.add_argument("--dropout", type=float, default=0.5)
    sp.add_argument("--tau-calib", type=float, default=0.1,
                    help="uncertainty margin in the calibration loss")
    sp.add_argument("--beta1", type=float, default=0.3,
                    help="sharpening loss weight")
    sp.add_argument("--beta2", type=float, default=0.1,
                    help="calibration loss weight")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=5e-4)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--patience", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ablate", type=str, default="none",
                    help="none | community | global | uncertainty, "
                         "plus-joined for combinations")
    sp.add_argument("--beta2-single-shot", action="store_true",
                    help="apply the calibration-weight update once instead "
                         "of every check interval")
    sp.add_argument("--init-epochs", type=int, default=100,
                    help="epochs for the feature-only initializer")


def _hyper_from_args(args) -> HyperParams:
    return HyperParams(
        hidden_dim=args.hidden, layers=args.layers,
        communities=args.communities, temp_start=args.temp_start,
        temp_end=args.temp_end, dropout=args.dropout,
        tau_calib=args.tau_calib, beta1=args.beta1, beta2=args.beta2,
        lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
        seed=args.seed, ablate=parse_ablate(args.ablate))


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="hugnn",
                     description="hierarchical uncertainty-gated GNN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic bundle")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--degree", type=int, required=True)
    p.add_argument("--p", type=float, required=True,
                   help="same-class neighbor probability in (0, 1]")
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a bundle directory")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--export", type=str, default=None,
                   help="write per-node state JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="corrupt a bundle and re-evaluate")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--kind", type=str, required=True,
                   choices=["drop_edge", "feature_noise", "greedy_flip",
                            "feature_pgd"])
    p.add_argument("--intensity", type=float, required=True,
                   help="edge ratio or feature epsilon")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("check", help="gradient check and fixed-point probe")
    p.add_argument("--data", type=str, default=None,
                   help="bundle for the probe; omitted -> internal graphs")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theorem3", type=str, default=None,
                   help="also run the heterophily experiment, CSV to this path")
    p.add_argument("--theorem3-seeds", type=int, default=3)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="grid over the auxiliary loss weights")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--beta1-grid", type=str, default="0.1,0.3,1.0")
    p.add_argument("--beta2-grid", type=str, default="0.05,0.10,0.20")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if not 0.0 < args.p <= 1.0:
        raise ConfigError(f"--p must be in (0, 1], got {args.p}")
    if args.n < 1 or args.classes < 2 or args.degree < 1:
        raise ConfigError("need --n >= 1, --classes >= 2, --degree >= 1")
    bundle = synth_heterophily(n=args.n, num_classes=args.classes,
                               degree=args.degree, p=args.p,
                               feature_noise=args.feature_noise,
                               rng=Rng(args.seed).child("synth"))
    save_bundle(bundle, args.out)
    _emit({"out": args.out, "n": bundle.n, "m": bundle.graph.m,
           "d": bundle.d, "num_classes": bundle.num_classes,
           "homophily": homophily_ratio(bundle),
           "two_hop_homophily": two_hop_homophily(bundle)})
    return 0


def cmd_train(args) -> int:
    bundle = load_bundle(args.data)
    hyper = _hyper_from_args(args)
    config = TrainConfig(hyper=hyper, patience=args.patience,
                         beta2_single_shot=args.beta2_single_shot,
                         init_epochs=args.init_epochs)
    result = train(bundle, config, Rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"subcommand": "train", "data": args.data, "out": args.out,
                   "hyper": hyper_to_dict(hyper), "patience": args.patience,
                   "beta2_single_shot": args.beta2_single_shot,
                   "init_epochs": args.init_epochs, "seed": args.seed},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "metrics.jsonl"), "w", encoding="utf-8",
              newline="\n") as fh:
        for record in result.history:
            fh.write(json.dumps(record.to_json_dict(), sort_keys=True))
            fh.write("\n")
    save_checkpoint(result.params, hyper, args.seed,
                    os.path.join(args.out, "ckpt-best"))
    _emit({"out": args.out, "epochs_run": len(result.history),
           "best_epoch": result.best_epoch,
           "best_val_acc": result.best_val_acc,
           "test_acc": result.test_acc,
           "final_beta2": result.final_beta2})
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.data)
    params, hyper, _seed = load_checkpoint(args.ckpt)
    u0 = compute_u0(bundle, params)
    state, metrics = evaluate(bundle, params, hyper, u0)
    if args.export:
        with open(args.export, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(state.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(metrics)
    return 0


def cmd_perturb(args) -> int:
    bundle = load_bundle(args.data)
    params, hyper, _seed = load_checkpoint(args.ckpt)
    u0 = compute_u0(bundle, params)
    _, baseline = evaluate(bundle, params, hyper, u0)
    if args.kind == "feature_pgd":
        attacked = feature_pgd(bundle, params, hyper, u0, eps=args.intensity)
    else:
        attacked = perturb(bundle, PerturbSpec(kind=args.kind,
                                               intensity=args.intensity,
                                               seed=args.seed))
    u0_attacked = compute_u0(attacked, params)
    _, corrupted = evaluate(attacked, params, hyper, u0_attacked)
    _emit({"kind": args.kind, "intensity": args.intensity,
           "baseline": baseline, "perturbed": corrupted,
           "test_acc_drop": baseline["test_acc"] - corrupted["test_acc"]})
    return 0


def cmd_check(args) -> int:
    failures = 0
    grad = gradient_check(seed=args.seed)
    ok = grad.passed(1e-4)
    print(f"grad-check: {'PASS' if ok else 'FAIL'} "
          f"max_rel_err={grad.max_rel_err:.3e} over {grad.checked} entries "
          f"(worst {grad.worst_param})")
    failures += 0 if ok else 1

    if args.data:
        bundle = load_bundle(args.data)
    else:
        bundle = synth_heterophily(n=60, num_classes=2, degree=4, p=0.5,
                                   feature_noise=0.5,
                                   rng=Rng(args.seed).child("probe-bundle"))
    probe = contraction_probe(bundle, trials=args.trials, iters=args.iters,
                              mode="full", seed=args.seed)
    print(f"contraction: {'PASS' if probe.converged else 'FAIL'} "
          f"{probe.trials} trials, <= {probe.iterations_used} iterations, "
          f"max initial Lipschitz ratio "
          f"{max(probe.lipschitz_ratios):.4f}")
    failures += 0 if probe.converged else 1

    if args.theorem3:
        rows = theorem3_experiment(p_grid=(0.1, 0.2),
                                   seeds=range(args.theorem3_seeds))
        with open(args.theorem3, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "variant", "p", "seed", "q_measured", "test_acc", "ece",
                "mean_u"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"theorem3: wrote {len(rows)} rows to {args.theorem3}")
    return 0 if failures == 0 else 3


def _sweep_point(payload) -> dict:
    data_dir, hyper_dict, patience, init_epochs, b1, b2 = payload
    bundle = load_bundle(data_dir)
    hyper = HyperParams(**{**hyper_dict,
                           "ablate": frozenset(hyper_dict["ablate"]),
                           "beta1": b1, "beta2": b2})
    config = TrainConfig(hyper=hyper, patience=patience,
                         init_epochs=init_epochs)
    result = train(bundle, config, Rng(hyper.seed))
    _, metrics = evaluate(bundle, result.params, hyper, result.u0)
    return {"beta1": b1, "beta2": b2, "val_acc": result.best_val_acc,
            "test_acc": result.test_acc, "val_ece": metrics["val_ece"],
            "test_ece": metrics["test_ece"], "best_epoch": result.best_epoch}


def cmd_sweep(args) -> int:
    try:
        grid1 = [float(x) for x in args.beta1_grid.split(",") if x.strip()]
        grid2 = [float(x) for x in args.beta2_grid.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("grids must be comma-separated numbers")
    if not grid1 or not grid2:
        raise ConfigError("both grids need at least one value")
    load_bundle(args.data)  # fail fast on bad data before any training
    hyper = _hyper_from_args(args)
    hyper_dict = hyper_to_dict(hyper)
    points = [(args.data, hyper_dict, args.patience, args.init_epochs, b1, b2)
              for b1 in grid1 for b2 in grid2]
    threads = max(1, int(os.environ.get("HUGNN_THREADS", "1")))
    if threads > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(points))) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(pt) for pt in points]
    rows.sort(key=lambda r: (r["beta1"], r["beta2"]))
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "sweep.csv")
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["beta1", "beta2", "val_acc",
                                                "test_acc", "val_ece",
                                                "test_ece", "best_epoch"])
        writer.writeheader()
        writer.writerows(rows)
    best = max(rows, key=lambda r: (r["val_acc"], -r["val_ece"]))
    _emit({"out": out_csv, "rows": len(rows), "best": best})
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
