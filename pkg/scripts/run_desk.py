"""Full desk pipeline: data, training, calibration, attacks, adversarial training, transfer.

    python scripts/run_desk.py [--config configs/desk.json] [--out runs/desk]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from slothlab.config import load_config
from slothlab.experiment import run_experiment
from slothlab.metrics import read_reports_csv

HERE = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "desk.json")
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    files = run_experiment(cfg)
    for name in ("table1", "table2", "table3"):
        if name in files:
            print(f"== {name}")
            for r in read_reports_csv(files[name]):
                print(f"{r['tag']:<40} efficacy {r['efficacy']:.3f}  accuracy {r['accuracy']:.3f}")
    print(f"outputs in {cfg.out}")


if __name__ == "__main__":
    main()
