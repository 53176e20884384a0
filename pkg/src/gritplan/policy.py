"""Upper-level depot-assignment policy trained with clipped PPO.

The policy is a small tanh MLP with a categorical head over depots and a
scalar value head, written directly in numpy so every gradient is explicit.
Each required segment is one decision; all decisions of an episode share
the episode reward, and the advantage is ``reward - V(s)``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gritplan.assignment import Assignment, encode_features, nearest_depot_assignment
from gritplan.fleet import FleetSpec
from gritplan.network import PathCache, RoadNetwork
from gritplan.routing import Plan, UnroutableEdgeError, serviceable_mask, solve_assignment

log = logging.getLogger(__name__)

MASKED_LOGIT = -1e9
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "Wv", "bv")


@dataclass
class PPOConfig:
    hidden: int = 64
    lr: float = 3e-4
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatch: int = 64
    max_grad_norm: float = 0.5
    warm_lr: float = 1e-2
    warm_epochs: int = 200
    warm_target: float = 0.95
    warm_min_ok: float = 0.80


@dataclass
class TrainConfig:
    iterations: int = 10
    w1: float = 1.0
    w2: float = 1.0
    penalty_weight: float = 1.0
    normalize: bool = True
    selection: str = "nearest"
    depot_capacity: str = "soft"
    mask_unservable: bool = True
    ppo: PPOConfig = field(default_factory=PPOConfig)


# ---------------------------------------------------------------- model


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


class PolicyModel:
    """Shared 2-layer tanh trunk, depot logits head, value head, Adam state."""

    def __init__(self, n_features: int, n_depots: int, hidden: int = 64, seed: int | None = 0, params: dict | None = None):
        self.n_features = n_features
        self.n_depots = n_depots
        self.hidden = hidden
        if params is None:
            rng = np.random.default_rng(seed)

            def glorot(fan_in, fan_out, gain=1.0):
                lim = gain * math.sqrt(6.0 / (fan_in + fan_out))
                return rng.uniform(-lim, lim, size=(fan_in, fan_out))

            params = {
                "W1": glorot(n_features, hidden),
                "b1": np.zeros(hidden),
                "W2": glorot(hidden, hidden),
                "b2": np.zeros(hidden),
                "Wp": glorot(hidden, n_depots, 0.01),
                "bp": np.zeros(n_depots),
                "Wv": glorot(hidden, 1, 1.0),
                "bv": np.zeros(1),
            }
        self.params = {k: np.asarray(params[k], dtype=float).copy() for k in PARAM_NAMES}
        self.reset_optimizer()

    def reset_optimizer(self) -> None:
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_t = 0

    def copy(self) -> "PolicyModel":
        m = PolicyModel(self.n_features, self.n_depots, self.hidden, params=self.params)
        m.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        m.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        m.adam_t = self.adam_t
        return m

    def forward(self, X: np.ndarray, mask: np.ndarray | None = None, params: dict | None = None):
        """(cache, logits, log_probs, values) for a feature batch."""
        p = params or self.params
        h1 = np.tanh(X @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        logits = h2 @ p["Wp"] + p["bp"]
        if mask is not None:
            logits = np.where(mask, logits, MASKED_LOGIT)
        values = (h2 @ p["Wv"] + p["bv"])[:, 0]
        return (X, h1, h2), logits, _log_softmax(logits), values

    def probs(self, X: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return np.exp(self.forward(X, mask)[2])

    def backward(self, cache, dlogits: np.ndarray, dvalues: np.ndarray, params: dict | None = None) -> dict:
        p = params or self.params
        X, h1, h2 = cache
        dv = dvalues[:, None]
        g = {
            "Wp": h2.T @ dlogits,
            "bp": dlogits.sum(axis=0),
            "Wv": h2.T @ dv,
            "bv": dv.sum(axis=0),
        }
        dh2 = dlogits @ p["Wp"].T + dv @ p["Wv"].T
        dz2 = dh2 * (1.0 - h2**2)
        g["W2"] = h1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["W2"].T) * (1.0 - h1**2)
        g["W1"] = X.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        return g

    def adam_step(self, grads: dict, lr: float, max_grad_norm: float | None = None) -> None:
        if max_grad_norm:
            norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if norm > max_grad_norm:
                grads = {k: g * (max_grad_norm / norm) for k, g in grads.items()}
        self.adam_t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, g in grads.items():
            self.adam_m[k] = b1 * self.adam_m[k] + (1 - b1) * g
            self.adam_v[k] = b2 * self.adam_v[k] + (1 - b2) * g * g
            mh = self.adam_m[k] / (1 - b1**self.adam_t)
            vh = self.adam_v[k] / (1 - b2**self.adam_t)
            self.params[k] = self.params[k] - lr * mh / (np.sqrt(vh) + eps)

    # checkpoint: flat float array plus a shape manifest
    def to_json(self) -> dict:
        flat = np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])
        return {
            "n_features": self.n_features,
            "n_depots": self.n_depots,
            "hidden": self.hidden,
            "manifest": [[k, list(self.params[k].shape)] for k in PARAM_NAMES],
            "parameters": flat.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicyModel":
        flat = np.asarray(data["parameters"], dtype=float)
        params, pos = {}, 0
        for name, shape in data["manifest"]:
            size = int(np.prod(shape))
            params[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        if pos != flat.size:
            raise ValueError("checkpoint size does not match manifest")
        return cls(data["n_features"], data["n_depots"], data["hidden"], params=params)

    def save(self, path: str | Path) -> None:
        from gritplan.fileio import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- episodes


@dataclass
class EpisodeBatch:
    features: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    reward: float
    mask: np.ndarray | None = None
    iteration: int = 0

    def __len__(self) -> int:
        return len(self.actions)


def propose_assignment(
    model: PolicyModel,
    features: np.ndarray,
    edge_ids: Sequence[int],
    depot_ids: Sequence[int],
    mode: str = "sample",
    rng_seed: int | None = 0,
    mask: np.ndarray | None = None,
    iteration: int = 0,
) -> tuple[Assignment, EpisodeBatch]:
    """Pick a depot per segment by sampling or argmax; record log-probs and values."""
    if mode not in ("sample", "greedy"):
        raise ValueError("mode must be 'sample' or 'greedy'")
    _, _, logp, values = model.forward(features, mask)
    if mode == "greedy":
        actions = logp.argmax(axis=1)
    else:
        rng = np.random.default_rng(rng_seed)
        u = rng.random(len(features))
        cdf = np.cumsum(np.exp(logp), axis=1)
        cdf[:, -1] = np.inf
        actions = (u[:, None] >= cdf).sum(axis=1)
        # never land on a zero-probability (masked) depot through rounding
        if mask is not None:
            bad = ~mask[np.arange(len(actions)), actions]
            actions[bad] = logp[bad].argmax(axis=1)
    chosen = logp[np.arange(len(actions)), actions]
    assignment = Assignment({int(e): int(depot_ids[a]) for e, a in zip(edge_ids, actions)})
    batch = EpisodeBatch(features, actions, chosen, values, 0.0, mask, iteration)
    return assignment, batch


def compute_reward(
    plan: Plan,
    w1: float = 1.0,
    w2: float = 1.0,
    penalty_weight: float = 1.0,
    reference: tuple[float, float] | None = None,
) -> float:
    """``-(w1*Z1 + w2*Z2) - penalty``, with Z1/Z2 divided by ``reference`` when given.

    The penalty is the summed relative depot-capacity overrun of soft
    violations (2 routes over a 4-vehicle depot counts 0.5).
    """
    z1, z2 = plan.Z1_minutes, plan.Z2_kg
    if reference is not None:
        r1, r2 = reference
        z1 = z1 / r1 if r1 > 0 else z1
        z2 = z2 / r2 if r2 > 0 else z2
    return -(w1 * z1 + w2 * z2) - penalty_weight * overrun_magnitude(plan)


def overrun_magnitude(plan: Plan) -> float:
    return sum((v.quantity - v.limit) / v.limit for v in plan.violations if v.rule == "depot_capacity")


# ---------------------------------------------------------------- PPO loss


def clipped_ratio(ratio: np.ndarray, clip: float) -> np.ndarray:
    return np.clip(ratio, 1.0 - clip, 1.0 + clip)


def ppo_loss_and_grad(
    model: PolicyModel,
    X: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    mask: np.ndarray | None,
    clip: float,
    value_coef: float,
    entropy_coef: float,
    params: dict | None = None,
    need_grad: bool = True,
):
    """Total loss, per-term breakdown, and parameter gradients.

    loss = -mean(min(r*A, clip(r)*A)) + value_coef*mean((V-R)^2) - entropy_coef*mean(H)
    """
    n = len(actions)
    cache, logits, logp_all, values = model.forward(X, mask, params)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * advantages
    surr2 = clipped_ratio(ratio, clip) * advantages
    policy_loss = -np.minimum(surr1, surr2).mean()
    value_loss = ((values - returns) ** 2).mean()
    p = np.exp(logp_all)
    plogp = np.where(p > 0, p * logp_all, 0.0)
    ent = -plogp.sum(axis=1)
    entropy = ent.mean()
    total = policy_loss + value_coef * value_loss - entropy_coef * entropy
    terms = {"policy": float(policy_loss), "value": float(value_loss), "entropy": float(entropy), "total": float(total)}
    if not need_grad:
        return total, terms, None

    # d(-min)/dlogp is -A*r where the unclipped branch is active, 0 otherwise
    active = surr1 <= surr2
    dlogp = np.where(active, -advantages * ratio, 0.0) / n
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - p)
    dH = -(np.where(p > 0, p * (logp_all + ent[:, None]), 0.0))
    dlogits = dlogits - entropy_coef * dH / n
    if mask is not None:
        dlogits = np.where(mask, dlogits, 0.0)
    dvalues = value_coef * 2.0 * (values - returns) / n
    grads = model.backward(cache, dlogits, dvalues, params)
    return total, terms, grads


def ppo_update(
    model: PolicyModel,
    batches: Sequence[EpisodeBatch],
    config: PPOConfig | None = None,
    rng: np.random.Generator | int | None = 0,
) -> tuple[PolicyModel, dict]:
    """K epochs of minibatch Adam on the clipped surrogate.

    Returns the updated model and diagnostics.  A non-finite loss aborts
    and returns an untouched copy of the prior model.
    """
    if not batches:
        raise ValueError("ppo_update needs at least one batch")
    cfg = config or PPOConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = np.concatenate([b.features for b in batches])
    actions = np.concatenate([b.actions for b in batches])
    old_logp = np.concatenate([b.log_probs for b in batches])
    returns = np.concatenate([np.full(len(b), b.reward, dtype=float) for b in batches])
    adv = returns - np.concatenate([b.values for b in batches])
    masks = [b.mask for b in batches]
    mask = None if all(m is None for m in masks) else np.concatenate(
        [m if m is not None else np.ones((len(b), model.n_depots), dtype=bool) for m, b in zip(masks, batches)]
    )
    prior = model.copy()
    updated = model.copy()
    n = len(actions)
    mb = max(1, min(cfg.minibatch, n))
    diag = {"steps": 0, "aborted": False, "clip_fraction": 0.0, "loss": []}
    clipped = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            m = None if mask is None else mask[idx]
            total, terms, grads = ppo_loss_and_grad(
                updated, X[idx], actions[idx], old_logp[idx], adv[idx], returns[idx], m,
                cfg.clip, cfg.value_coef, cfg.entropy_coef,
            )
            if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                log.warning("non-finite PPO loss; update aborted")
                diag["aborted"] = True
                return prior, diag
            updated.adam_step(grads, cfg.lr, cfg.max_grad_norm)
            diag["steps"] += 1
            diag["loss"].append(terms["total"])
    _, _, logp_all, _ = updated.forward(X, mask)
    ratio = np.exp(logp_all[np.arange(n), actions] - old_logp)
    clipped = int(np.sum(np.abs(ratio - 1.0) > cfg.clip))
    diag["clip_fraction"] = clipped / n
    return updated, diag


def warm_start(
    model: PolicyModel,
    features: np.ndarray,
    labels: np.ndarray,
    config: PPOConfig | None = None,
    value_target: float | None = None,
    mask: np.ndarray | None = None,
) -> tuple[PolicyModel, float]:
    """Fit the policy head to depot labels by cross-entropy (in place).

    Stops once the argmax policy agrees with ``labels`` on ``warm_target``
    of segments or after ``warm_epochs`` full-batch steps.  When
    ``value_target`` is given the value head regresses to it as well.
    Returns the model and the final agreement.
    """
    cfg = config or PPOConfig()
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        return model, 1.0
    rows = np.arange(n)

    def agreement() -> float:
        _, _, logp, _ = model.forward(features, mask)
        return float((logp.argmax(axis=1) == labels).mean())

    acc = agreement()
    for _ in range(cfg.warm_epochs):
        if acc >= cfg.warm_target:
            break
        cache, _, logp, values = model.forward(features, mask)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[rows, labels] = 1.0
        dlogits = (p - onehot) / n
        if mask is not None:
            dlogits = np.where(mask, dlogits, 0.0)
        dvalues = np.zeros(n) if value_target is None else 2.0 * (values - value_target) / n
        model.adam_step(model.backward(cache, dlogits, dvalues), cfg.warm_lr)
        acc = agreement()
    if value_target is not None:
        # finish fitting the baseline so initial advantages are centred
        for _ in range(cfg.warm_epochs):
            cache, _, _, values = model.forward(features, mask)
            if np.max(np.abs(values - value_target)) < 1e-2:
                break
            g = model.backward(cache, np.zeros((n, model.n_depots)), 2.0 * (values - value_target) / n)
            g = {k: (v if k in ("Wv", "bv") else np.zeros_like(v)) for k, v in g.items()}
            model.adam_step(g, cfg.warm_lr)
    if acc < cfg.warm_min_ok:
        log.warning("warm start reached only %.1f%% agreement with the k-d tree labels", 100 * acc)
    model.reset_optimizer()
    return model, acc


# ---------------------------------------------------------------- training loop


@dataclass
class IterationRecord:
    iter: int
    Z1_min: float
    Z2_kg: float
    NoV: int
    reward: float
    best_so_far: float
    status: str = "ok"


@dataclass
class TrainResult:
    best_assignment: Assignment
    best_plan: Plan
    baseline_assignment: Assignment
    baseline_plan: Plan
    log: list[IterationRecord]
    model: PolicyModel | None
    warm_agreement: float | None
    best_iteration: int
    reference: tuple[float, float]


FAILED_REWARD = -1e3


def train_loop(
    network: RoadNetwork,
    fleet: FleetSpec,
    iterations: int = 10,
    seed: int = 0,
    config: TrainConfig | None = None,
    paths: PathCache | None = None,
    on_iteration: Callable[[int, Assignment, Plan | None], None] | None = None,
) -> TrainResult:
    """Iteration 0 is the k-d tree baseline; each later iteration samples an
    assignment from the policy, routes it, and applies one PPO update.
    The best plan by ``-reward`` is kept."""
    cfg = config or TrainConfig()
    paths = paths or PathCache(network)
    rng = np.random.default_rng(seed)
    depots = list(fleet.depots)
    depot_ids = [d.id for d in depots]

    base_assign = nearest_depot_assignment(network, depots) if network.required_edges else Assignment({})
    base_plan = solve_assignment(network, base_assign, fleet, cfg.selection, paths, cfg.depot_capacity)
    reference = (base_plan.Z1_minutes, base_plan.Z2_kg) if cfg.normalize else None
    ref_out = reference or (1.0, 1.0)

    def reward_of(plan: Plan) -> float:
        return compute_reward(plan, cfg.w1, cfg.w2, cfg.penalty_weight, reference)

    r0 = reward_of(base_plan)
    best = (-r0, 0, base_assign, base_plan)
    log_rows = [IterationRecord(0, base_plan.Z1_minutes, base_plan.Z2_kg, base_plan.NoV, r0, -r0)]
    if on_iteration:
        on_iteration(0, base_assign, base_plan)
    model = None
    agreement = None
    if iterations > 0 and base_assign.mapping:
        feats, edge_ids, _ = encode_features(network, depots)
        mask = serviceable_mask(network, fleet, edge_ids, paths) if cfg.mask_unservable else None
        labels = np.array([depot_ids.index(base_assign.mapping[e]) for e in edge_ids])
        model = PolicyModel(feats.shape[1], len(depots), cfg.ppo.hidden, seed=int(rng.integers(2**31)))
        model, agreement = warm_start(model, feats, labels, cfg.ppo, value_target=r0, mask=mask)
        for it in range(1, iterations + 1):
            sample_seed = int(rng.integers(2**31))
            update_seed = int(rng.integers(2**31))
            assign, batch = propose_assignment(model, feats, edge_ids, depot_ids, "sample", sample_seed, mask, it)
            try:
                plan = solve_assignment(network, assign, fleet, cfg.selection, paths, cfg.depot_capacity)
            except UnroutableEdgeError as exc:
                log.warning("iteration %d failed: %s", it, exc)
                log_rows.append(IterationRecord(it, math.nan, math.nan, 0, FAILED_REWARD, best[0], "failed"))
                if on_iteration:
                    on_iteration(it, assign, None)
                continue
            r = reward_of(plan)
            if -r < best[0]:
                best = (-r, it, assign, plan)
            log_rows.append(IterationRecord(it, plan.Z1_minutes, plan.Z2_kg, plan.NoV, r, best[0]))
            if on_iteration:
                on_iteration(it, assign, plan)
            batch.reward = r
            model, _ = ppo_update(model, [batch], cfg.ppo, update_seed)
    else:
        for it in range(1, iterations + 1):
            log_rows.append(IterationRecord(it, 0.0, 0.0, 0, r0, best[0]))
    return TrainResult(best[2], best[3], base_assign, base_plan, log_rows, model, agreement, best[1], ref_out)


def objective(plan: Plan, reference: tuple[float, float] | None, w1: float = 1.0, w2: float = 1.0, penalty_weight: float = 1.0) -> float:
    return -compute_reward(plan, w1, w2, penalty_weight, reference)


LOG_COLUMNS = ["iter", "Z1_min", "Z2_kg", "NoV", "reward", "best_so_far"]


def write_training_log(rows: Sequence[IterationRecord], path: str | Path) -> None:
    from gritplan.fileio import atomic_write_csv

    atomic_write_csv(path, LOG_COLUMNS, [[r.iter, repr(r.Z1_min), repr(r.Z2_kg), r.NoV, repr(r.reward), repr(r.best_so_far)] for r in rows])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
