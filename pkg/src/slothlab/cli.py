"""Command-line entry point: ``python3 -m slothlab <subcommand> ...``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import AttackBlock, ConfigError, ExperimentConfig, load_config
from .data import Dataset, import_csv, load_dataset, save_dataset, split
from .exitpolicy import ExitPolicy, calibrate
from .metrics import evaluate, read_reports_csv, write_eec_csv, write_reports_csv
from .multiexit import load_model, save_model

log = logging.getLogger("slothlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _policy(path) -> ExitPolicy:
    return ExitPolicy.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    from .experiment import make_dataset

    ds = import_csv(args.import_csv, cfg.data.num_classes, cfg.data.shape) if args.import_csv else make_dataset(cfg)
    out = _out(cfg)
    for name, part in split(ds, cfg.data.test_frac, cfg.data.holdout_frac, seed=cfg.seed).items():
        save_dataset(part, out / f"{name}.mxds")
        print(f"{name}: {len(part)} samples -> {out / f'{name}.mxds'}")


def cmd_train(args, cfg):
    from .experiment import train_model

    net = train_model(cfg.model, load_dataset(args.data), cfg.seed)
    path = _out(cfg) / "model.mxnn"
    save_model(net, path)
    print(f"model -> {path}")


def cmd_advtrain(args, cfg):
    from .advtrain import adversarial_train
    from .experiment import advtrain_config

    net = load_model(args.model)
    ds = load_dataset(args.data)
    adversarial_train(net, ds.X, ds.y, advtrain_config(cfg, args.regime))
    path = _out(cfg) / f"at_{args.regime}.mxnn"
    save_model(net, path)
    print(f"model -> {path}")


def cmd_calibrate(args, cfg):
    net = load_model(args.model)
    ds = load_dataset(args.data)
    policy = calibrate(net, ds.X, ds.y, args.criterion or cfg.policy.criterion, args.rad)
    path = _out(cfg) / "policy.json"
    path.write_text(json.dumps(policy.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"threshold {policy.thresholds[0]} (feasible={policy.feasible}) -> {path}")


def cmd_attack(args, cfg):
    from .experiment import craft

    net = load_model(args.model)
    ds = load_dataset(args.data)
    train_set = load_dataset(args.train_data) if args.train_data else ds
    block = AttackBlock(args.name or args.kind, kind=args.kind, norm=args.norm, epsilon=args.epsilon,
                        scope=args.scope, target_mode=args.target_mode, target_class=args.target_class,
                        overrides=json.loads(args.overrides) if args.overrides else {})
    block.validate()
    policy = _policy(args.policy) if args.policy else None
    if block.kind == "deepsloth" and block.norm == "l2" and policy is None:
        raise ConfigError("the l2 DeepSloth attack needs --policy")
    X_adv = craft(block, net, ds.X, ds.y, train_set, cfg.seed, policy)
    path = _out(cfg) / f"{block.name}.mxds"
    save_dataset(Dataset(X_adv, ds.y, ds.num_classes), path)
    print(f"perturbed samples -> {path}")


def cmd_eval(args, cfg):
    net = load_model(args.model)
    ds = load_dataset(args.data)
    rep = evaluate(net, _policy(args.policy), ds.X, ds.y, args.tag)
    out = _out(cfg)
    write_reports_csv([rep], out / f"{args.tag}.csv")
    write_eec_csv(rep.curve, out / f"{args.tag}_eec.csv")
    print(f"{args.tag}: efficacy {rep.efficacy:.4f} accuracy {rep.accuracy:.4f} exits {rep.per_exit_counts}")


def cmd_partition(args, cfg):
    from .partition import PartitionScenario, amplification, simulate, write_traffic_csv

    net = load_model(args.model)
    policy = _policy(args.policy)
    p = cfg.partition
    scenario = PartitionScenario(p.split_exit, p.edge_latency_ms, p.remote_latency_ms, p.adversary_craft_ms)
    clean = simulate(net, policy, load_dataset(args.data).X, replace(scenario, name="clean"))
    rows = [clean]
    if args.attacked:
        hit = simulate(net, policy, load_dataset(args.attacked).X, replace(scenario, name="attacked"))
        rows.append(replace(hit, amplification=amplification(clean, hit, scenario)))
    path = _out(cfg) / "traffic.csv"
    write_traffic_csv(rows, path)
    for r in rows:
        print(f"{r.scenario}: p={r.transmission_fraction:.4f} latency={r.avg_latency_ms:.3f} ms "
              f"amplification={r.amplification}")


def cmd_transfer(args, cfg):
    from .experiment import _transfer_stage, make_dataset, train_model, write_transfer_csv

    if not cfg.transfer.scenarios:
        cfg.transfer.scenarios = ["cross_architecture", "limited_data", "cross_domain"]
    splits = split(make_dataset(cfg), cfg.data.test_frac, cfg.data.holdout_frac, seed=cfg.seed)
    victim = load_model(args.victim) if args.victim else train_model(cfg.model, splits["train"], cfg.seed)
    hold = splits["holdout"]
    policy = calibrate(victim, hold.X, hold.y, cfg.policy.criterion, cfg.policy.rad_budgets[0])
    rows = _transfer_stage(cfg, victim, policy, splits)
    path = _out(cfg) / "transfer.csv"
    write_transfer_csv(rows, path)
    for r in rows:
        print(f"{r.scenario} {r.fraction or ''}: victim efficacy {r.victim_clean_efficacy:.3f} -> "
              f"{r.transferred_efficacy:.3f} ({100 * r.efficacy_drop:.1f}% drop)")


def cmd_report(args, cfg):
    from .experiment import run_experiment

    if args.summarize:
        out = Path(args.summarize)
    else:
        run_experiment(cfg)
        out = Path(cfg.out)
    for name in ("table1", "table2", "table3"):
        path = out / f"{name}.csv"
        if path.exists():
            print(f"== {name}")
            for r in read_reports_csv(path):
                print(f"{r['tag']:<40} efficacy {r['efficacy']:.3f}  accuracy {r['accuracy']:.3f}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, default):
        parser.add_argument("--config", default=default, help="JSON experiment config")
        parser.add_argument("--seed", type=int, default=default, help="overrides the config seed")
        parser.add_argument("--out", default=default, help="output directory (overrides the config)")
        parser.add_argument("-v", "--verbose", action="store_true", default=default or False)

    # flags may come before or after the subcommand; the copy on each
    # subcommand must not reset values given before it
    common = _Parser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    p = _Parser(prog="slothlab", description="Slowdown attacks on multi-exit networks")
    global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate (or import) a dataset and split it")
    s.add_argument("--import-csv", help="read label,v0,v1,... rows instead of generating")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train a multi-exit model")
    s.add_argument("--data", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("advtrain", parents=[common], help="adversarially train a model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--regime", default="pgd10")
    s.set_defaults(fn=cmd_advtrain)

    s = sub.add_parser("calibrate", parents=[common], help="pick exit thresholds under a RAD budget")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="holdout set")
    s.add_argument("--rad", type=float, default=0.05)
    s.add_argument("--criterion", choices=["confidence", "entropy"])
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("attack", parents=[common], help="craft perturbed samples")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--train-data", help="pool for universal perturbations (defaults to --data)")
    s.add_argument("--policy")
    s.add_argument("--kind", default="deepsloth", choices=["deepsloth", "pgd", "pgd_avg", "pgd_max", "uap"])
    s.add_argument("--name")
    s.add_argument("--norm", default="linf", choices=["linf", "l2", "l1"])
    s.add_argument("--epsilon", type=float)
    s.add_argument("--scope", default="per_sample", choices=["per_sample", "universal", "class_universal"])
    s.add_argument("--target-mode", default="uniform",
                   choices=["uniform", "preserve_accuracy", "hurt_accuracy"])
    s.add_argument("--target-class", type=int)
    s.add_argument("--overrides", help="JSON object of attack hyperparameters")
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("eval", parents=[common], help="efficacy and accuracy of a model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tag", default="eval")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("partition", parents=[common], help="edge/cloud traffic and latency")
    s.add_argument("--model", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--attacked", help="perturbed version of --data")
    s.set_defaults(fn=cmd_partition)

    s = sub.add_parser("transfer", parents=[common], help="surrogate-to-victim transfer scenarios")
    s.add_argument("--victim", help="victim model (trained from the config if omitted)")
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("report", parents=[common], help="run the full pipeline and print the tables")
    s.add_argument("--summarize", help="only print tables from an existing output directory")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported with its stage, mapped to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
