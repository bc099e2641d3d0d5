"""Transfer of per-sample DeepSloth from surrogates to the desk victim.

Trains the victim once, then each surrogate scenario in turn, and writes transfer.csv.
"""
import argparse
from pathlib import Path

from slothlab.config import load_config
from slothlab.data import split
from slothlab.exitpolicy import calibrate
from slothlab.experiment import make_dataset, run_transfer, train_model, write_transfer_csv

HERE = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "desk.json")
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()
    cfg = load_config(args.config)

    splits = split(make_dataset(cfg), cfg.data.test_frac, cfg.data.holdout_frac, seed=cfg.seed)
    victim = train_model(cfg.model, splits["train"], cfg.seed)
    hold = splits["holdout"]
    policy = calibrate(victim, hold.X, hold.y, cfg.policy.criterion, cfg.policy.rad_budgets[0])

    rows = []
    for scenario in ("cross_architecture", "limited_data", "cross_domain"):
        for f in cfg.transfer.fractions if scenario == "limited_data" else [None]:
            r = run_transfer(cfg, victim, policy, splits, scenario, f)
            print(f"{scenario:<20} {'' if f is None else f:<5} efficacy {r.victim_clean_efficacy:.3f} -> "
                  f"{r.transferred_efficacy:.3f} (drop {r.efficacy_drop:.1%})", flush=True)
            rows.append(r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_transfer_csv(rows, out / "transfer.csv")


if __name__ == "__main__":
    main()
