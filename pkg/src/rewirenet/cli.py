"""Command-line front end.

Subcommands: train, eval, sweep, sensitivity, inspect-checkpoint.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (non-finite loss or gradient).
"""

import argparse
import sys
from dataclasses import fields

from .attacks import AttackConfig
from .data import load_dataset
from .exceptions import ConfigError, DataError, NumericalError
from .harness import (ExperimentConfig, _parse_value, attack_sweep, evaluate,
                      run_training, sensitivity_scan)
from .layers import load_checkpoint
from .rewiring import compression_ratio


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        overrides[key.strip()] = raw.strip()
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if not overrides:
        return cfg
    # route overrides through the same parser as config files so types and
    # validation stay identical
    vals = {f.name: getattr(cfg, f.name) for f in fields(ExperimentConfig)}
    for key, raw in overrides.items():
        if key not in vals:
            raise ConfigError(f"unknown config key {key!r}")
        vals[key] = _parse_value(str(raw), getattr(ExperimentConfig, key), f"--set {key}")
    return ExperimentConfig(**vals)


def _dataset_from_args(args):
    return load_dataset(args.dataset, args.split, args.data_dir, args.samples, args.data_seed)


def _add_data_flags(p):
    p.add_argument("--dataset", default="synth-digits")
    p.add_argument("--data-dir", default="")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--samples", type=int, default=0, help="0 = full split")
    p.add_argument("--data-seed", type=int, default=0)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = run_training(cfg)
    for row in result["metrics"]:
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
              f"clean {row['clean_acc']:.4f}  fgsm {row['fgsm_acc']:.4f}  "
              f"pgd {row['pgd_acc']:.4f}  compression {row['compression']:.2f}x")
    if cfg.output_dir:
        print(f"artifacts written to {cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _dataset_from_args(args)
    attack = None
    if args.epsilon > 0:
        attack = AttackConfig(args.epsilon, args.alpha, args.iterations)
    res = evaluate(model, ds, attack)
    print(f"clean accuracy: {res['clean_acc']:.4f}")
    if attack is not None:
        print(f"fgsm accuracy (eps={args.epsilon}): {res['fgsm_acc']:.4f}")
        print(f"pgd accuracy (eps={args.epsilon}, k={args.iterations}): {res['pgd_acc']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _dataset_from_args(args)
    epsilons = [float(v) for v in args.epsilons.split(",") if v]
    iters = [int(v) for v in args.iterations_list.split(",") if v]
    rows = attack_sweep(model, ds, epsilons, iters, alpha=args.alpha,
                        fixed_epsilon=args.fixed_epsilon,
                        fixed_iterations=args.fixed_iterations)
    for eps, acc in rows["fgsm"]:
        print(f"fgsm eps={eps:.4f} acc={acc:.4f}")
    for eps, acc in rows["pgd_epsilon"]:
        print(f"pgd  eps={eps:.4f} k={args.fixed_iterations} acc={acc:.4f}")
    for k, acc in rows["pgd_iterations"]:
        print(f"pgd  eps={args.fixed_epsilon:.4f} k={k} acc={acc:.4f}")
    return 0


def cmd_sensitivity(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _dataset_from_args(args)
    fractions = [float(v) for v in args.fractions.split(",") if v]
    attack = AttackConfig(args.epsilon, args.alpha, args.iterations) if args.epsilon > 0 else None
    for row in sensitivity_scan(model, ds, fractions, attack):
        print(f"{row['slot']:24s} prune={row['fraction']:.2f} "
              f"clean_drop={row['clean_drop']:+.4f} pgd_drop={row['pgd_drop']:+.4f}")
    return 0


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    print(f"arch: {model.arch}")
    print(f"input shape: {model.input_shape}  classes: {model.num_classes}")
    print(f"parameters: {model.num_params()}  compression: {compression_ratio(model):.2f}x")
    for name, slot in model.slots.items():
        live = slot.nonzeros()
        tag = "prunable" if slot.prunable else "dense"
        print(f"  {name:24s} {str(slot.theta.shape):20s} {tag:9s} "
              f"live {live}/{slot.size} ({live / slot.size:.3f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rewirenet",
                                     description="Sparse training with magnitude pruning, "
                                                 "momentum-guided regrowth, and adversarial hardening.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default="", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field (repeatable)")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally under attack")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy across attack strengths")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--epsilons", default="0,0.01,0.02,0.05,0.1")
    p.add_argument("--iterations-list", default="1,3,7,15")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--fixed-epsilon", type=float, default=8.0 / 255.0)
    p.add_argument("--fixed-iterations", type=int, default=7)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sensitivity", help="per-layer accuracy drop from pruning that layer alone")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--fractions", default="0.1,0.3,0.5")
    p.add_argument("--epsilon", type=float, default=0.0, help="0 = clean drops only")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=7)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint structure and density")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
