"""Adversarial training trade-off on the desk benchmark.

Fine-tunes a copy of the undefended model with each regime and seed, then
reports clean and DeepSloth efficacy under a freshly calibrated RAD<5% policy.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from slothlab.advtrain import adversarial_train
from slothlab.config import AttackBlock, load_config
from slothlab.data import split
from slothlab.exitpolicy import calibrate
from slothlab.experiment import advtrain_config, craft, make_dataset, train_model
from slothlab.metrics import evaluate

HERE = Path(__file__).resolve().parent.parent


def report(net, splits, cfg):
    hold, test = splits["holdout"], splits["test"]
    policy = calibrate(net, hold.X, hold.y, cfg.policy.criterion, cfg.policy.rad_budgets[0])
    clean = evaluate(net, policy, test.X, test.y).efficacy
    X_adv = craft(AttackBlock("deepsloth"), net, test.X, test.y, splits["train"], cfg.seed, policy)
    return clean, evaluate(net, policy, X_adv, test.y).efficacy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "desk.json")
    ap.add_argument("--regimes", nargs="+", default=["pgd10", "deepsloth"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1])
    ap.add_argument("--epsilon", type=float, help="overrides the config")
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.epsilon is not None:
        cfg = replace(cfg, advtrain=replace(cfg.advtrain, epsilon=args.epsilon))

    splits = split(make_dataset(cfg), cfg.data.test_frac, cfg.data.holdout_frac, seed=cfg.seed)
    base = train_model(cfg.model, splits["train"], cfg.seed)
    clean, ds = report(base, splits, cfg)
    print(f"undefended          clean {clean:.3f}  deepsloth {ds:.4f}", flush=True)
    for regime in args.regimes:
        for seed in args.seeds:
            t0 = time.perf_counter()
            net = base.copy()
            adversarial_train(net, splits["train"].X, splits["train"].y,
                              replace(advtrain_config(cfg, regime), seed=seed))
            clean, ds = report(net, splits, cfg)
            print(f"{regime:<10} seed {seed}   clean {clean:.3f}  deepsloth {ds:.4f}  "
                  f"({time.perf_counter() - t0:.0f} s)", flush=True)


if __name__ == "__main__":
    main()
