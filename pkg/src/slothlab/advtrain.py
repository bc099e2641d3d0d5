"""Standard and adversarial training for multi-exit networks (plain minibatch SGD)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacks import PerturbationBudget, deepsloth_defaults, deepsloth_linf, pgd, pgd_avg, pgd_defaults, pgd_max
from .multiexit import MultiExitNetwork, forward_all_exits
from .tensorcore import cross_entropy, cross_entropy_grad, one_hot

log = logging.getLogger(__name__)

REGIMES = ("pgd10", "pgd10_avg", "pgd10_max", "deepsloth", "deepsloth_plus_pgd10")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    exit_loss_weights: list[float] | None = None
    seed: int = 0


@dataclass
class TrainResult:
    net: MultiExitNetwork
    loss_history: list[float] = field(default_factory=list)


def _weights(net, exit_loss_weights):
    w = [1.0] * net.K if exit_loss_weights is None else [float(v) for v in exit_loss_weights]
    if len(w) != net.K or any(v < 0 for v in w) or w[-1] <= 0:
        raise ValueError("need K non-negative exit-loss weights with a positive final weight")
    return w


def sgd_step(net: MultiExitNetwork, X, y, weights, lr: float, trainable: str = "all") -> np.ndarray:
    """One SGD step on sum_i w_i * mean CE(F_i(X), y); returns per-sample losses."""
    logits, tape = forward_all_exits(net, X, record=True, batched=True)
    target = one_hot(y, net.num_classes)
    n = len(y)
    loss = np.zeros(n)
    seeds = []
    for w, z in zip(weights, logits):
        if w == 0:
            seeds.append(None)
            continue
        loss += w * cross_entropy(z, target)
        seeds.append(w * cross_entropy_grad(z, target) / n)
    if not np.all(np.isfinite(loss)):
        raise DivergenceError("non-finite training loss")
    grads = tape.backward(seeds)
    params = list(net.parameters())
    n_trunk = sum(1 for _ in net.trunk_parameters())
    for k, ((layer, name), g) in enumerate(zip(params, grads.iter_params())):
        if trainable == "heads" and k < n_trunk:
            continue
        setattr(layer, name, getattr(layer, name) - lr * g)
    return loss


def train(net: MultiExitNetwork, X, y, epochs: int = 20, lr: float = 0.05, exit_loss_weights=None,
          seed: int = 0, batch_size: int = 32, trainable: str = "all", example_fn=None) -> TrainResult:
    """Minibatch SGD on the joint multi-exit loss.

    ``example_fn(net, Xb, yb, rng)`` may replace each batch's inputs
    (adversarial training); it sees the model as currently trained.
    """
    weights = _weights(net, exit_loss_weights)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(y))
        per_sample = np.zeros(len(y))
        for s in range(0, len(y), batch_size):
            idx = perm[s:s + batch_size]
            Xb = X[idx] if example_fn is None else example_fn(net, X[idx], y[idx], rng)
            try:
                per_sample[idx] = sgd_step(net, Xb, y[idx], weights, lr, trainable)
            except FloatingPointError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch + 1}: {exc}") from exc
        history.append(float(per_sample.mean()))
        log.debug("epoch %d loss %.5f", epoch + 1, history[-1])
    return TrainResult(net, history)


@dataclass
class AdvTrainConfig:
    """Two-phase adversarial training at desk scale.

    Phase 1 trains trunk and final exit on PGD examples against the final
    exit; phase 2 trains the exit heads on regime-specific examples.
    """

    regime: str = "pgd10"
    epsilon: float = 0.03
    inner_iterations: int = 10
    phase1_epochs: int = 10
    phase2_epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    freeze_trunk: bool = True
    clean_fraction: float = 0.0  # share of each batch left unperturbed
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epsilon < 0 or self.inner_iterations < 0:
            raise ValueError("epsilon and inner_iterations must be non-negative")
        if not 0.0 <= self.clean_fraction < 1.0:
            raise ValueError("clean_fraction must lie in [0, 1)")


def _crafter(kind: str, cfg: AdvTrainConfig):
    budget = PerturbationBudget("linf", cfg.epsilon)
    inner = pgd_defaults(cfg.epsilon, iterations=cfg.inner_iterations)
    if kind == "deepsloth":
        inner = deepsloth_defaults("linf", iterations=cfg.inner_iterations, step_size=cfg.epsilon / 4)
        attack = lambda net, Xb, yb: deepsloth_linf(net, Xb, budget, inner)
    else:
        fn = {"pgd10": pgd, "pgd10_avg": pgd_avg, "pgd10_max": pgd_max}[kind]
        attack = lambda net, Xb, yb: fn(net, Xb, yb, budget, inner)

    def craft(net, Xb, yb):
        n_clean = int(round(cfg.clean_fraction * len(Xb)))
        if n_clean == len(Xb):
            return Xb
        out = Xb.copy()
        out[n_clean:] += attack(net, Xb[n_clean:], yb[n_clean:])
        return out

    return craft


def adversarial_train(net: MultiExitNetwork, X, y, cfg: AdvTrainConfig) -> TrainResult:
    """Train ``net`` in place; returns the joint loss history of both phases."""
    final_only = [0.0] * (net.K - 1) + [1.0]
    pgd10 = _crafter("pgd10", cfg)
    phase1 = train(net, X, y, cfg.phase1_epochs, cfg.lr, final_only, cfg.seed, cfg.batch_size,
                   example_fn=lambda n, Xb, yb, rng: pgd10(n, Xb, yb))

    if cfg.regime == "deepsloth_plus_pgd10":
        crafters = [_crafter("deepsloth", cfg), pgd10]
    else:
        crafters = [_crafter(cfg.regime, cfg)]
    batch = [0]

    def regime_examples(n, Xb, yb, rng):
        craft = crafters[batch[0] % len(crafters)]
        batch[0] += 1
        return craft(n, Xb, yb)

    phase2 = train(net, X, y, cfg.phase2_epochs, cfg.lr, None, cfg.seed + 1, cfg.batch_size,
                   trainable="heads" if cfg.freeze_trunk else "all", example_fn=regime_examples)
    return TrainResult(net, phase1.loss_history + phase2.loss_history)
