"""Experiment pipelines: data -> train -> calibrate -> attack -> evaluate -> partition.

Report files (CSV/JSON, EEC curves, models, perturbed datasets) depend
only on the config and seed. Wall-clock crafting times go to
``timing.csv``, which is the one machine-dependent output.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .advtrain import AdvTrainConfig, adversarial_train, train
from .attacks import (PerturbationBudget, apply_perturbation, deepsloth, deepsloth_defaults, pgd, pgd_avg,
                      pgd_defaults, pgd_max, select_scope_data, uap, uap_defaults)
from .config import AttackBlock, ExperimentConfig, ModelConfig
from .data import Dataset, gen_domain_shift, gen_synthetic, load_dataset, save_dataset, split
from .exitpolicy import ExitPolicy, calibrate
from .metrics import EvalReport, evaluate, write_eec_csv, write_reports_csv
from .multiexit import MultiExitNetwork, build_convnet, build_mlp, save_model
from .partition import PartitionScenario, TrafficReport, amplification, simulate, write_traffic_csv

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def rad_label(rad: float) -> str:
    return f"rad{round(rad * 100)}"


# --------------------------------------------------------------------------
# building blocks


def make_dataset(cfg: ExperimentConfig, domain_shift: bool = False) -> Dataset:
    d = cfg.data
    if d.path is not None:
        return load_dataset(d.path)
    gen = gen_domain_shift if domain_shift else gen_synthetic
    return gen(d.num_classes, d.n, tuple(d.shape), d.difficulty, seed=cfg.seed)


def build_model(mcfg: ModelConfig, input_shape, num_classes: int) -> MultiExitNetwork:
    if mcfg.arch == "mlp":
        return build_mlp(tuple(input_shape), num_classes, tuple(mcfg.widths), seed=mcfg.init_seed)
    return build_convnet(tuple(input_shape), num_classes, tuple(mcfg.widths), mcfg.hidden, seed=mcfg.init_seed)


def train_model(mcfg: ModelConfig, ds: Dataset, seed: int) -> MultiExitNetwork:
    net = build_model(mcfg, ds.sample_shape, ds.num_classes)
    train(net, ds.X, ds.y, mcfg.epochs, mcfg.lr, mcfg.exit_loss_weights, seed, mcfg.batch_size)
    return net


def attack_config(block: AttackBlock, seed: int, target_class=None):
    over = dict(block.overrides)
    scope = over.pop("scope", block.scope)
    mode = over.pop("target_mode", block.target_mode)
    tc = over.pop("target_class", target_class if target_class is not None else block.target_class)
    if scope == "class_universal" and tc is None:
        tc = 0  # placeholder; craft() sets each class in turn
    if block.kind == "deepsloth":
        cfg = deepsloth_defaults(block.norm, scope, mode, target_class=tc, **over)
    elif block.kind == "uap":
        cfg = uap_defaults(block.eps, **over)
    else:
        cfg = pgd_defaults(block.eps, **over)
    return replace(cfg, seed=seed)


def craft(block: AttackBlock, net: MultiExitNetwork, X, y, train_set: Dataset, seed: int,
          policy: ExitPolicy | None = None) -> np.ndarray:
    """Adversarial versions of ``X`` for one attack block."""
    budget = PerturbationBudget(block.norm, block.eps)
    if block.kind in ("pgd", "pgd_avg", "pgd_max"):
        fn = {"pgd": pgd, "pgd_avg": pgd_avg, "pgd_max": pgd_max}[block.kind]
        return X + fn(net, X, y, budget, attack_config(block, seed))
    if block.kind == "uap":
        cfg = attack_config(block, seed)
        Xs, ys = select_scope_data(train_set.X, train_set.y, cfg)
        return apply_perturbation(X, uap(net, Xs, ys, budget, cfg))
    cfg = attack_config(block, seed)
    if cfg.scope == "per_sample":
        return X + deepsloth(net, X, budget, cfg, policy=policy, y=y)
    if cfg.scope == "universal":
        Xs, ys = select_scope_data(train_set.X, train_set.y, cfg)
        return apply_perturbation(X, deepsloth(net, Xs, budget, cfg, policy=policy, y=ys))
    classes = [block.target_class] if block.target_class is not None else np.unique(y)
    X_adv = X.copy()
    for c in classes:
        cfg_c = replace(cfg, target_class=int(c))
        Xs, ys = select_scope_data(train_set.X, train_set.y, cfg_c)
        v = deepsloth(net, Xs, budget, cfg_c, policy=policy, y=ys)
        mask = y == c
        X_adv[mask] = apply_perturbation(X[mask], v)
    return X_adv


# --------------------------------------------------------------------------
# full pipeline


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return run
    return wrap


def run_experiment(cfg: ExperimentConfig) -> dict[str, Path]:
    """Run the configured pipeline and write every report under ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    for sub in ("curves", "perturbed", "models", "data"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in cfg.to_json().items() if k != "out"}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    splits = _stage("data")(_data_stage)(cfg, out)
    net = _stage("train")(_train_stage)(cfg, splits, out)
    policies = _stage("calibrate")(_calibrate_stage)(cfg, net, splits, out)
    test = splits["test"] if cfg.n_eval is None else splits["test"].subset(np.arange(min(cfg.n_eval, len(splits["test"]))))
    reports, traffic, timing = _stage("attack")(_attack_stage)(cfg, net, policies, splits["train"], test, out)

    baseline_kinds = {"pgd", "pgd_avg", "pgd_max", "uap"}
    kinds = {b.name: b.kind for b in cfg.attacks}
    table1 = [r for r in reports if r.tag.split("/")[1] in ("clean",) or kinds.get(r.tag.split("/")[1]) in baseline_kinds]
    table2 = [r for r in reports if r.tag.split("/")[1] == "clean" or kinds.get(r.tag.split("/")[1]) == "deepsloth"]
    write_reports_csv(table1, out / "table1.csv")
    write_reports_csv(table2, out / "table2.csv")
    _write_exits(reports, out / "exits.csv")
    write_traffic_csv(traffic, out / "traffic.csv")
    _write_timing(timing, out / "timing.csv")
    files = {"table1": out / "table1.csv", "table2": out / "table2.csv", "exits": out / "exits.csv",
             "traffic": out / "traffic.csv", "policies": out / "policies.json", "timing": out / "timing.csv"}

    if cfg.advtrain.regimes:
        table3 = _stage("advtrain")(_advtrain_stage)(cfg, net, splits, test, out)
        write_reports_csv(table3, out / "table3.csv")
        files["table3"] = out / "table3.csv"
    if cfg.transfer.scenarios:
        rows = _stage("transfer")(_transfer_stage)(cfg, net, policies[0], splits)
        write_transfer_csv(rows, out / "transfer.csv")
        files["transfer"] = out / "transfer.csv"
    return files


def _data_stage(cfg, out):
    splits = split(make_dataset(cfg), cfg.data.test_frac, cfg.data.holdout_frac, seed=cfg.seed)
    for name, ds in splits.items():
        save_dataset(ds, out / "data" / f"{name}.mxds")
    return splits


def _train_stage(cfg, splits, out):
    net = train_model(cfg.model, splits["train"], cfg.seed)
    save_model(net, out / "models" / "undefended.mxnn")
    return net


def _calibrate_stage(cfg, net, splits, out):
    hold = splits["holdout"]
    policies = [calibrate(net, hold.X, hold.y, cfg.policy.criterion, r) for r in cfg.policy.rad_budgets]
    blob = {rad_label(r): p.to_json() for r, p in zip(cfg.policy.rad_budgets, policies)}
    (out / "policies.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
    return policies


def _attack_stage(cfg, net, policies, train_set, test, out):
    part = cfg.partition
    scenario = PartitionScenario(part.split_exit, part.edge_latency_ms, part.remote_latency_ms,
                                 part.adversary_craft_ms)
    reports: list[EvalReport] = []
    traffic: list[TrafficReport] = []
    timing: list[tuple[str, float, int]] = []
    adv_cache: dict[str, np.ndarray] = {}
    for rad, policy in zip(cfg.policy.rad_budgets, policies):
        label = rad_label(rad)
        clean = evaluate(net, policy, test.X, test.y, f"{label}/clean")
        reports.append(clean)
        write_eec_csv(clean.curve, out / "curves" / f"{label}_clean.csv")
        clean_traffic = simulate(net, policy, test.X, replace(scenario, name=f"{label}/clean"))
        traffic.append(clean_traffic)
        for block in cfg.attacks:
            # only the l2 variant depends on the policy (it judges success by exits firing)
            key = f"{block.name}@{label}" if block.norm == "l2" else block.name
            if key not in adv_cache:
                t0 = time.perf_counter()
                adv_cache[key] = craft(block, net, test.X, test.y, train_set, cfg.seed, policy)
                timing.append((key, time.perf_counter() - t0, len(test)))
                save_dataset(Dataset(adv_cache[key], test.y, test.num_classes),
                             out / "perturbed" / f"{key.replace('@', '_')}.mxds")
            X_adv = adv_cache[key]
            tag = f"{label}/{block.name}"
            rep = evaluate(net, policy, X_adv, test.y, tag)
            reports.append(rep)
            write_eec_csv(rep.curve, out / "curves" / f"{label}_{block.name}.csv")
            t = simulate(net, policy, X_adv, replace(scenario, name=tag))
            traffic.append(replace(t, amplification=amplification(clean_traffic, t, scenario)))
            log.info("%s efficacy %.3f accuracy %.3f", tag, rep.efficacy, rep.accuracy)
    return reports, traffic, timing


def _write_exits(reports: list[EvalReport], path) -> None:
    K = len(reports[0].per_exit_counts)
    lines = ["tag," + ",".join(f"exit_{i + 1}" for i in range(K))]
    lines += [r.tag + "," + ",".join(str(c) for c in r.per_exit_counts) for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_timing(timing, path) -> None:
    lines = ["attack,seconds,n_samples,ms_per_sample"]
    lines += [f"{k},{s:.3f},{n},{1000 * s / n:.3f}" for k, s, n in timing]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# adversarial training table


def advtrain_config(cfg: ExperimentConfig, regime: str) -> AdvTrainConfig:
    a = cfg.advtrain
    return AdvTrainConfig(regime=regime, epsilon=a.epsilon, inner_iterations=a.inner_iterations,
                          phase1_epochs=a.phase1_epochs, phase2_epochs=a.phase2_epochs, lr=a.lr,
                          batch_size=cfg.model.batch_size, freeze_trunk=a.freeze_trunk,
                          clean_fraction=a.clean_fraction, seed=cfg.seed)


def _advtrain_stage(cfg, base, splits, test, out) -> list[EvalReport]:
    eval_blocks = [AttackBlock("pgd20", kind="pgd"), AttackBlock("pgd20_avg", kind="pgd_avg"),
                   AttackBlock("pgd20_max", kind="pgd_max"), AttackBlock("deepsloth")]
    rows = []
    models = [("undefended", base)]
    for regime in cfg.advtrain.regimes:
        net = build_model(cfg.model, base.input_shape, base.num_classes) if cfg.advtrain.from_scratch else base.copy()
        adversarial_train(net, splits["train"].X, splits["train"].y, advtrain_config(cfg, regime))
        save_model(net, out / "models" / f"at_{regime}.mxnn")
        models.append((regime, net))
    hold = splits["holdout"]
    for name, net in models:
        policy = calibrate(net, hold.X, hold.y, cfg.policy.criterion, cfg.policy.rad_budgets[0])
        rows.append(evaluate(net, policy, test.X, test.y, f"{name}/clean"))
        for block in eval_blocks:
            X_adv = craft(block, net, test.X, test.y, splits["train"], cfg.seed, policy)
            rows.append(evaluate(net, policy, X_adv, test.y, f"{name}/{block.name}"))
    return rows


# --------------------------------------------------------------------------
# transferability


@dataclass
class TransferReport:
    scenario: str
    fraction: float | None
    victim_clean_efficacy: float
    victim_clean_accuracy: float
    transferred_efficacy: float
    transferred_accuracy: float

    @property
    def efficacy_drop(self) -> float:
        if self.victim_clean_efficacy == 0:
            return 0.0
        return 1.0 - self.transferred_efficacy / self.victim_clean_efficacy


def run_transfer(cfg: ExperimentConfig, victim: MultiExitNetwork, victim_policy: ExitPolicy,
                 splits: dict[str, Dataset], scenario: str, fraction: float | None = None,
                 surrogate_model: ModelConfig | None = None,
                 surrogate_net: MultiExitNetwork | None = None) -> TransferReport:
    """Craft per-sample l_inf DeepSloth on a surrogate and evaluate it on the victim.

    ``surrogate_net`` skips surrogate training and attacks that model directly.
    """
    sur_cfg = surrogate_model or cfg.transfer.surrogate
    train_set = splits["train"]
    if scenario == "cross_architecture":
        sur_train = train_set
    elif scenario == "limited_data":
        if fraction is None:
            raise ValueError("limited_data needs a fraction")
        rng = np.random.default_rng(cfg.seed + 1)
        k = max(2, int(round(fraction * len(train_set))))
        sur_train = train_set.subset(np.sort(rng.choice(len(train_set), k, replace=False)))
        sur_cfg = replace(cfg.model, init_seed=cfg.model.init_seed + 1)
    elif scenario == "cross_domain":
        sur_train = split(make_dataset(cfg, domain_shift=True), cfg.data.test_frac, cfg.data.holdout_frac,
                          seed=cfg.seed)["train"]
        sur_cfg = replace(cfg.model, init_seed=cfg.model.init_seed + 1)
    else:
        raise ValueError(f"unknown transfer scenario {scenario!r}")
    if sur_train.sample_shape != victim.input_shape:
        raise ValueError(f"surrogate input shape {sur_train.sample_shape} differs from victim {victim.input_shape}")
    surrogate = surrogate_net if surrogate_net is not None else train_model(sur_cfg, sur_train, cfg.seed + 1)

    test = splits["test"] if cfg.n_eval is None else splits["test"].subset(np.arange(min(cfg.n_eval, len(splits["test"]))))
    X_adv = craft(AttackBlock("deepsloth"), surrogate, test.X, test.y, sur_train, cfg.seed)
    clean = evaluate(victim, victim_policy, test.X, test.y)
    moved = evaluate(victim, victim_policy, X_adv, test.y)
    return TransferReport(scenario, fraction, clean.efficacy, clean.accuracy, moved.efficacy, moved.accuracy)


def _transfer_stage(cfg, victim, policy, splits) -> list[TransferReport]:
    rows = []
    for scenario in cfg.transfer.scenarios:
        fractions = cfg.transfer.fractions if scenario == "limited_data" else [None]
        for f in fractions:
            rows.append(run_transfer(cfg, victim, policy, splits, scenario, f))
    return rows


TRANSFER_HEADER = ["scenario", "fraction", "victim_clean_efficacy", "victim_clean_accuracy",
                   "transferred_efficacy", "transferred_accuracy"]


def write_transfer_csv(rows: list[TransferReport], path) -> None:
    lines = [",".join(TRANSFER_HEADER)]
    for r in rows:
        d = asdict(r)
        lines.append(",".join("" if d[k] is None else (d[k] if isinstance(d[k], str) else repr(float(d[k])))
                              for k in TRANSFER_HEADER))
    Path(path).write_text("\n".join(lines) + "\n")
