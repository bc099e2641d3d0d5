"""Slowdown (DeepSloth) and misclassification (PGD-family, UAP) perturbations.

DeepSloth pushes every internal exit's softmax towards a target
distribution (uniform by default) so that no confidence or entropy
stopping rule fires. The l_inf variant is signed-gradient descent with a
box projection, the l2 variant adapts decoupled direction/norm (DDN)
updates, and the l1 variant adapts sparse percentile steps (SLIDE) with a
Euclidean projection onto the l1 ball.

Per-sample attacks take a batch ``X`` of shape (n, *input_shape) and
return one perturbation per row. Universal and class-universal attacks
return a single perturbation of shape ``input_shape``; it is applied as
``clip(x + v, 0, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .exitpolicy import ExitPolicy, exit_decisions
from .multiexit import MultiExitNetwork, forward_all_exits
from .tensorcore import cross_entropy, cross_entropy_grad, one_hot

NORMS = ("linf", "l2", "l1")
SCOPES = ("per_sample", "universal", "class_universal")
TARGET_MODES = ("uniform", "preserve_accuracy", "hurt_accuracy")

# default budgets by dataset scale
DEFAULT_EPSILON = {
    "cifar10": {"linf": 0.03, "l1": 8.0, "l2": 0.35},
    "tinyimagenet": {"linf": 0.03, "l1": 16.0, "l2": 0.6},
}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationBudget:
    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in NORMS:
            raise AttackError(f"unknown norm {self.norm!r}")
        if not self.epsilon > 0:
            raise AttackError("epsilon must be positive")

    @classmethod
    def default(cls, norm: str, scale: str = "cifar10") -> "PerturbationBudget":
        return cls(norm, DEFAULT_EPSILON[scale][norm])

    def norms(self, v, batched: bool) -> np.ndarray:
        flat = v.reshape(len(v), -1) if batched else v.reshape(1, -1)
        if self.norm == "linf":
            return np.abs(flat).max(axis=1)
        if self.norm == "l2":
            return np.sqrt((flat ** 2).sum(axis=1))
        return np.abs(flat).sum(axis=1)

    def contains(self, v, batched: bool = True, tol: float = 1e-9) -> bool:
        """l_inf is checked exactly, l1/l2 within ``tol``."""
        n = self.norms(np.asarray(v), batched)
        return bool(np.all(n <= self.epsilon)) if self.norm == "linf" else bool(np.all(n <= self.epsilon + tol))


@dataclass
class AttackConfig:
    iterations: int = 30
    step_size: float = 0.002
    scope: str = "per_sample"
    target_class: int | None = None
    target_mode: str = "uniform"
    delta: float = 0.2
    exits: list[int] | None = None  # 1-based; None = internal exits 1..K-1
    decay_every: int | None = None
    decay_factor: float = 0.1
    sparsity: float = 99.0
    norm_adjust: float = 0.1
    init_norm: float = 1.0
    n_scope_samples: int = 250
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise AttackError("iterations must be >= 0")
        if not self.step_size > 0:
            raise AttackError("step_size must be positive")
        if self.scope not in SCOPES:
            raise AttackError(f"unknown scope {self.scope!r}")
        if self.scope == "class_universal" and self.target_class is None:
            raise AttackError("class_universal scope needs target_class")
        if self.target_mode not in TARGET_MODES:
            raise AttackError(f"unknown target mode {self.target_mode!r}")
        if not 0.0 <= self.delta < 1.0:
            raise AttackError("delta must lie in [0, 1)")
        if not 0.0 < self.sparsity < 100.0:
            raise AttackError("sparsity percentile must lie in (0, 100)")

    def step_at(self, t: int) -> float:
        if self.decay_every:
            return self.step_size * self.decay_factor ** (t // self.decay_every)
        return self.step_size

    @property
    def universal(self) -> bool:
        return self.scope != "per_sample"


def deepsloth_defaults(norm: str = "linf", scope: str = "per_sample", target_mode: str = "uniform",
                       **overrides) -> AttackConfig:
    """Default hyperparameters for each DeepSloth variant."""
    universal = scope != "per_sample"
    if norm == "linf":
        if universal:
            cfg = AttackConfig(iterations=12, step_size=0.005, decay_every=4, decay_factor=0.1)
        elif target_mode != "uniform":
            cfg = AttackConfig(iterations=75, step_size=0.001)
        else:
            cfg = AttackConfig(iterations=30, step_size=0.002)
    elif norm == "l2":
        cfg = AttackConfig(iterations=550, step_size=1.0, norm_adjust=0.1, init_norm=1.0)
    elif norm == "l1":
        cfg = AttackConfig(iterations=100 if universal else 250, step_size=0.5,
                           sparsity=90.0 if universal else 99.0)
    else:
        raise AttackError(f"unknown norm {norm!r}")
    return replace(cfg, scope=scope, target_mode=target_mode, **overrides)


def pgd_defaults(epsilon: float, iterations: int = 20, **overrides) -> AttackConfig:
    return replace(AttackConfig(iterations=iterations, step_size=epsilon / 4), **overrides)


# --------------------------------------------------------------------------
# helpers


def apply_perturbation(X, v) -> np.ndarray:
    return np.clip(np.asarray(X) + v, 0.0, 1.0)


def fit_box(X, v, epsilon: float | None = None) -> np.ndarray:
    """Shrink ``v`` so that X + v lies in [0, 1] (and |v| <= epsilon), exactly in floating point."""
    if epsilon is not None:
        v = np.clip(v, -epsilon, epsilon)
    v = np.clip(X + v, 0.0, 1.0) - X
    if epsilon is not None:
        v = np.clip(v, -epsilon, epsilon)
    # rounding can leave X + v one ulp outside the box; step v towards zero
    for _ in range(8):
        s = X + v
        bad_hi, bad_lo = s > 1.0, s < 0.0
        if not (bad_hi.any() or bad_lo.any()):
            break
        v = np.where(bad_hi, np.nextafter(v, -np.inf), v)
        v = np.where(bad_lo, np.nextafter(v, np.inf), v)
    return v


def project_l1(v, epsilon: float) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the l1 ball of radius epsilon (Duchi et al.)."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(len(v), -1)
    out = flat.copy()
    for r, row in enumerate(flat):
        a = np.abs(row)
        if a.sum() <= epsilon:
            continue
        u = np.sort(a)[::-1]
        css = np.cumsum(u)
        j = np.arange(1, len(u) + 1)
        rho = np.nonzero(u - (css - epsilon) / j > 0)[0][-1]
        theta = (css[rho] - epsilon) / (rho + 1)
        out[r] = np.sign(row) * np.maximum(a - theta, 0.0)
        # guard against the last-bit overshoot of the cumulative sum
        total = np.abs(out[r]).sum()
        if total > epsilon:
            out[r] *= epsilon / total
    return out.reshape(v.shape)


def project_l2(v, radius) -> np.ndarray:
    flat = v.reshape(len(v), -1)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), norms.shape)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return v * scale.reshape((-1,) + (1,) * (v.ndim - 1))


def make_target(mode: str, m: int, true_label=None, delta: float = 0.2, wrong_label=None) -> np.ndarray:
    """Target distribution for the slowdown objective.

    ``uniform`` is 1/m everywhere. The accuracy variants mix the uniform
    distribution with a one-hot vector: on the true label (preserve) or on
    ``wrong_label`` (hurt). Labels may be arrays, giving one row per sample.
    """
    if not 0.0 <= delta < 1.0:
        raise AttackError("delta must lie in [0, 1)")
    uniform = np.full(m, 1.0 / m)
    if mode == "uniform":
        return uniform
    if mode == "preserve_accuracy":
        if true_label is None:
            raise AttackError("preserve_accuracy needs the true label")
        return (1 - delta) * uniform + delta * one_hot(true_label, m)
    if mode == "hurt_accuracy":
        if wrong_label is None:
            raise AttackError("hurt_accuracy needs a wrong label")
        return (1 - delta) * uniform + delta * one_hot(wrong_label, m)
    raise AttackError(f"unknown target mode {mode!r}")


def _internal_exits(net, exits):
    exits = list(range(1, net.K)) if exits is None else list(exits)
    if not exits:
        raise AttackError("slowdown objective needs at least one exit")
    if any(not 1 <= i <= net.K for i in exits):
        raise AttackError(f"exit indices must lie in 1..{net.K}")
    return exits


def slowdown_loss(net: MultiExitNetwork, x, target, exits=None, batched: bool = False,
                  need_grad: bool = True):
    """Sum over the selected exits (and over the batch) of CE(F_i(x), target).

    Returns ``(loss, grad)`` where ``grad`` is d loss / d x (None when
    ``need_grad`` is false).
    """
    exits = _internal_exits(net, exits)
    logits, tape = forward_all_exits(net, x, record=need_grad, batched=batched)
    loss = 0.0
    seeds = [None] * net.K
    for i in exits:
        z = logits[i - 1]
        t = np.broadcast_to(target, z.shape)
        loss += float(np.sum(cross_entropy(z, t)))
        if need_grad:
            seeds[i - 1] = cross_entropy_grad(z, t)
    if not need_grad:
        return loss, None
    return loss, tape.backward(seeds).input


def misclassification_loss(net: MultiExitNetwork, X, y, exits, reduce: str = "sum"):
    """CE against the true labels at the given exits (mean over exits if reduce='mean').

    Returns per-sample losses and d(sum of losses)/dX.
    """
    logits, tape = forward_all_exits(net, X, record=True, batched=True)
    target = one_hot(y, net.num_classes)
    w = 1.0 / len(exits) if reduce == "mean" else 1.0
    loss = np.zeros(len(X))
    seeds = [None] * net.K
    for i in exits:
        loss += w * cross_entropy(logits[i - 1], target)
        seeds[i - 1] = w * cross_entropy_grad(logits[i - 1], target)
    return loss, tape.backward(seeds).input


def _batched_grad(grad_fn, X, batch_size: int) -> np.ndarray:
    """Per-sample gradients computed in chunks, then stacked in sample order."""
    return np.concatenate([grad_fn(X[s:s + batch_size], slice(s, s + batch_size))
                           for s in range(0, len(X), batch_size)])


def _reduce_universal(G, X, v) -> np.ndarray:
    # the clamp blocks gradient flow where x + v leaves the box
    inside = (X + v > 0.0) & (X + v < 1.0)
    return np.sum(np.where(inside, G, 0.0), axis=0)


def _check_input(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != len(net.input_shape) + 1 or tuple(X.shape[1:]) != net.input_shape:
        raise AttackError(f"expected a batch of shape (n, {net.input_shape}), got {X.shape}")
    if len(X) == 0:
        raise AttackError("empty sample set")
    return X


def _targets(net, X, y, cfg: AttackConfig):
    m = net.num_classes
    if cfg.target_mode == "uniform":
        return make_target("uniform", m)
    if cfg.target_mode == "preserve_accuracy":
        if y is None:
            raise AttackError("preserve_accuracy needs labels")
        return make_target("preserve_accuracy", m, true_label=y, delta=cfg.delta)
    # least-likely clean prediction of the final exit
    logits, _ = forward_all_exits(net, X, batched=True)
    wrong = logits[-1].argmin(axis=1)
    return make_target("hurt_accuracy", m, wrong_label=wrong, delta=cfg.delta)


# --------------------------------------------------------------------------
# DeepSloth


def deepsloth_linf(net: MultiExitNetwork, X, budget: PerturbationBudget, cfg: AttackConfig, y=None):
    """Signed-gradient descent of the slowdown loss inside the l_inf ball."""
    if budget.norm != "linf":
        raise AttackError("deepsloth_linf needs an linf budget")
    X = _check_input(net, X)
    target = _targets(net, X, y, cfg)
    eps = budget.epsilon

    def grad(Xc, sl):
        t = target if target.ndim == 1 else target[sl]
        return slowdown_loss(net, Xc, t, cfg.exits, batched=True)[1]

    if cfg.universal:
        v = np.zeros(net.input_shape)
        for t in range(cfg.iterations):
            G = _batched_grad(grad, apply_perturbation(X, v), cfg.batch_size)
            v = np.clip(v - cfg.step_at(t) * np.sign(_reduce_universal(G, X, v)), -eps, eps)
        return v
    v = np.zeros_like(X)
    for t in range(cfg.iterations):
        G = _batched_grad(grad, X + v, cfg.batch_size)
        v = fit_box(X, v - cfg.step_at(t) * np.sign(G), eps)
    return v


def _no_internal_exit(net, policy: ExitPolicy, Xp) -> np.ndarray:
    logits, _ = forward_all_exits(net, Xp, batched=True)
    return exit_decisions(logits, policy.criterion, policy.thresholds) == net.K - 1


def deepsloth_l2(net: MultiExitNetwork, X, budget: PerturbationBudget, cfg: AttackConfig,
                 policy: ExitPolicy | None = None, y=None, trace: list | None = None):
    """DDN-style l2 slowdown attack.

    Each iteration takes a normalized gradient step, rescales the
    perturbation to the running radius rho, then shrinks rho by
    (1 - gamma) if no internal exit fires and grows it by (1 + gamma)
    otherwise, capped at epsilon. Returns the smallest successful
    perturbation seen, else the final iterate.
    """
    if budget.norm != "l2":
        raise AttackError("deepsloth_l2 needs an l2 budget")
    if policy is None:
        raise AttackError("deepsloth_l2 needs a calibrated exit policy to judge success")
    X = _check_input(net, X)
    target = _targets(net, X, y, cfg)
    eps, gamma = budget.epsilon, cfg.norm_adjust

    def grad(Xc, sl):
        t = target if target.ndim == 1 else target[sl]
        return slowdown_loss(net, Xc, t, cfg.exits, batched=True)[1]

    universal = cfg.universal
    v = np.zeros((1,) + net.input_shape) if universal else np.zeros_like(X)
    n_v = len(v)
    rho = np.full(n_v, float(cfg.init_norm))
    best = v.copy()
    best_norm = np.full(n_v, np.inf)
    for t in range(cfg.iterations):
        # cosine-annealed step as in DDN
        alpha = cfg.step_size * (0.01 + 0.99 * 0.5 * (1 + math.cos(math.pi * t / max(cfg.iterations, 1))))
        if universal:
            G = _batched_grad(grad, apply_perturbation(X, v[0]), cfg.batch_size)
            g = _reduce_universal(G, X, v[0])[None]
        else:
            g = _batched_grad(grad, X + v, cfg.batch_size)
        gn = np.sqrt((g.reshape(n_v, -1) ** 2).sum(axis=1))
        gn = np.where(gn > 0, gn, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
        v = v - alpha * g / gn
        radius = np.minimum(rho, eps)
        vn = np.sqrt((v.reshape(n_v, -1) ** 2).sum(axis=1))
        v = v * (radius / np.where(vn > 0, vn, 1.0)).reshape((-1,) + (1,) * (v.ndim - 1))
        v = project_l2(v, eps)
        if not universal:
            v = fit_box(X, v)
        if universal:
            success = np.array([bool(np.all(_no_internal_exit(net, policy, apply_perturbation(X, v[0]))))])
        else:
            success = _no_internal_exit(net, policy, X + v)
        norms = np.sqrt((v.reshape(n_v, -1) ** 2).sum(axis=1))
        improve = success & (norms < best_norm)
        best[improve] = v[improve]
        best_norm[improve] = norms[improve]
        rho = np.minimum(np.where(success, rho * (1 - gamma), rho * (1 + gamma)), eps)
        if trace is not None:
            trace.append(rho.copy())
    out = np.where((best_norm < np.inf).reshape((-1,) + (1,) * (v.ndim - 1)), best, v)
    out = project_l2(out, eps)
    return out[0] if universal else out


def deepsloth_l1(net: MultiExitNetwork, X, budget: PerturbationBudget, cfg: AttackConfig, y=None):
    """SLIDE-style l1 slowdown attack: sparse signed steps, then l1-ball projection."""
    if budget.norm != "l1":
        raise AttackError("deepsloth_l1 needs an l1 budget")
    X = _check_input(net, X)
    target = _targets(net, X, y, cfg)
    eps = budget.epsilon

    def grad(Xc, sl):
        t = target if target.ndim == 1 else target[sl]
        return slowdown_loss(net, Xc, t, cfg.exits, batched=True)[1]

    universal = cfg.universal
    v = np.zeros((1,) + net.input_shape) if universal else np.zeros_like(X)
    for t in range(cfg.iterations):
        if universal:
            G = _batched_grad(grad, apply_perturbation(X, v[0]), cfg.batch_size)
            g = _reduce_universal(G, X, v[0])[None]
        else:
            g = _batched_grad(grad, X + v, cfg.batch_size)
        v = v - cfg.step_at(t) * sparse_sign(g, cfg.sparsity)
        v = project_l1(v, eps)
        if not universal:
            v = fit_box(X, v)
    return v[0] if universal else v


def sparse_sign(g, q: float) -> np.ndarray:
    """sign(g) on coordinates whose |g| reaches the row's q-th percentile, zero elsewhere."""
    flat = np.abs(g.reshape(len(g), -1))
    thr = np.percentile(flat, q, axis=1, keepdims=True)
    mask = (flat >= thr) & (flat > 0)
    return (np.sign(g.reshape(len(g), -1)) * mask).reshape(g.shape)


def deepsloth(net: MultiExitNetwork, X, budget: PerturbationBudget, cfg: AttackConfig,
              policy: ExitPolicy | None = None, y=None):
    if budget.norm == "linf":
        return deepsloth_linf(net, X, budget, cfg, y=y)
    if budget.norm == "l2":
        return deepsloth_l2(net, X, budget, cfg, policy=policy, y=y)
    return deepsloth_l1(net, X, budget, cfg, y=y)


def select_scope_data(X, y, cfg: AttackConfig):
    """D' for universal attacks: a seeded random subset of the training data,
    restricted to ``cfg.target_class`` for the class-universal variant."""
    X = np.asarray(X)
    y = np.asarray(y)
    idx = np.arange(len(y))
    if cfg.scope == "class_universal":
        idx = idx[y == cfg.target_class]
    if len(idx) == 0:
        raise AttackError("empty scope data")
    rng = np.random.default_rng(cfg.seed)
    if len(idx) > cfg.n_scope_samples:
        idx = np.sort(rng.choice(idx, cfg.n_scope_samples, replace=False))
    return X[idx], y[idx]


# --------------------------------------------------------------------------
# misclassification baselines


def _linf_ascent(net, X, y, budget, cfg, exits, reduce):
    if budget.norm != "linf":
        raise AttackError("PGD baselines use an linf budget")
    X = _check_input(net, X)
    y = np.asarray(y)
    eps = budget.epsilon

    def grad(Xc, sl):
        return misclassification_loss(net, Xc, y[sl], exits, reduce)[1]

    if cfg.universal:
        v = np.zeros(net.input_shape)
        for t in range(cfg.iterations):
            G = _batched_grad(grad, apply_perturbation(X, v), cfg.batch_size)
            v = np.clip(v + cfg.step_at(t) * np.sign(_reduce_universal(G, X, v)), -eps, eps)
        return v
    v = np.zeros_like(X)
    for t in range(cfg.iterations):
        G = _batched_grad(grad, X + v, cfg.batch_size)
        v = fit_box(X, v + cfg.step_at(t) * np.sign(G), eps)
    return v


def pgd(net: MultiExitNetwork, X, y, budget: PerturbationBudget, cfg: AttackConfig):
    """Standard PGD: ascend the final exit's cross-entropy against the true label."""
    return _linf_ascent(net, X, y, budget, replace(cfg, scope="per_sample"), [net.K], "sum")


def pgd_avg(net: MultiExitNetwork, X, y, budget: PerturbationBudget, cfg: AttackConfig):
    """Ascend the mean cross-entropy over all exits."""
    return _linf_ascent(net, X, y, budget, replace(cfg, scope="per_sample"), list(range(1, net.K + 1)), "mean")


def pgd_max(net: MultiExitNetwork, X, y, budget: PerturbationBudget, cfg: AttackConfig):
    """One PGD run per exit; keep, per sample, the candidate with the highest mean exit loss."""
    X = _check_input(net, X)
    y = np.asarray(y)
    cfg = replace(cfg, scope="per_sample")
    best_v, best_loss = None, None
    all_exits = list(range(1, net.K + 1))
    for i in all_exits:
        v = _linf_ascent(net, X, y, budget, cfg, [i], "sum")
        loss, _ = misclassification_loss(net, X + v, y, all_exits, "mean")
        if best_v is None:
            best_v, best_loss = v, loss
        else:
            better = loss > best_loss
            best_v = np.where(better.reshape((-1,) + (1,) * (X.ndim - 1)), v, best_v)
            best_loss = np.where(better, loss, best_loss)
    return best_v


def uap(net: MultiExitNetwork, X, y, budget: PerturbationBudget, cfg: AttackConfig):
    """Universal misclassification perturbation (universal PGD on the final exit), tagged uap-pgd."""
    return _linf_ascent(net, X, y, budget, replace(cfg, scope="universal"), [net.K], "sum")


def uap_defaults(epsilon: float, **overrides) -> AttackConfig:
    return replace(AttackConfig(iterations=20, step_size=epsilon / 2, decay_every=10, decay_factor=0.1,
                                scope="universal"), **overrides)
