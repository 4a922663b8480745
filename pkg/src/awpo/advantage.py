"""Group statistics, gating, hyper advantages, clip radius and the clipped surrogate.

The single-group functions (``group_stats``, ``gate``, ``advantages``) are
the readable reference path. ``compute_batch`` does the same for a whole
(G, K) reward table through the kernels and is what the trainer uses.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import kernels

ALGORITHMS = ("awpo", "grpo_outcome", "grpo_mixed")


class ConfigError(ValueError):
    """Invalid hyperparameter or trainer configuration; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class HyperParams:
    k: int = 8
    eps_std: float = 1e-6
    eps_mix: float = 0.5
    r_max_out: float = 1.95
    tau_low: float = 0.4
    tau_high: float = 1.6
    alpha_base: float = 1.0
    alpha_prio: float = 1.5
    eps_min: float = 0.1
    eps_max: float = 0.28
    eps_norm: float = 1e-6
    # fixed clip radius used by the GRPO baselines
    clip_eps: float = 0.2
    learning_rate: float = 25.0
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.k) < 2:
            raise ConfigError("k", "group size must be at least 2")
        if not self.alpha_prio > self.alpha_base > 0:
            raise ConfigError("alpha_prio", "need alpha_prio > alpha_base > 0")
        if not self.tau_low < self.tau_high:
            raise ConfigError("tau_low", "need tau_low < tau_high")
        if not 0 < self.eps_min <= self.eps_max:
            raise ConfigError("eps_min", "need 0 < eps_min <= eps_max")
        if not self.eps_mix >= 0:
            raise ConfigError("eps_mix", "must be >= 0")
        for name in ("eps_std", "eps_norm", "clip_eps", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if int(self.epochs) < 1:
            raise ConfigError("epochs", "must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown hyperparameter")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroupBatch:
    group_id: int
    actions: np.ndarray
    old_log_probs: np.ndarray
    r_out: np.ndarray
    r_mix: np.ndarray

    def __post_init__(self):
        for name in ("actions", "old_log_probs", "r_out", "r_mix"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        K = len(self.r_out)
        if K < 2:
            raise ConfigError("k", "a group needs at least 2 samples")
        if not (len(self.actions) == len(self.old_log_probs) == len(self.r_mix) == K):
            raise ValueError("group arrays must all have length K")
        if np.any(self.r_mix < self.r_out):
            raise ValueError("r_mix must be >= r_out for every sample")

    @property
    def k(self) -> int:
        return len(self.r_out)


@dataclass(frozen=True)
class GroupStats:
    mean_out: float
    mean_mix: float
    sigma_out: float
    sigma_mix: float


@dataclass(frozen=True)
class GateState:
    mean_out: float
    mean_mix: float
    sigma_out: float
    sigma_mix: float
    r_g: float
    w_mix: float
    d_g: float

    def to_dict(self) -> dict:
        return asdict(self)


def group_stats(batch: GroupBatch | None = None, *, r_out=None, r_mix=None) -> GroupStats:
    """Per-group means and population (1/K) standard deviations."""
    if batch is not None:
        r_out, r_mix = batch.r_out, batch.r_mix
    r_out = np.asarray(r_out, dtype=float)
    r_mix = np.asarray(r_mix, dtype=float)
    if len(r_out) < 2:
        raise ConfigError("k", "group statistics need K >= 2")
    return GroupStats(
        float(r_out.mean()),
        float(r_mix.mean()),
        float(np.sqrt(np.mean((r_out - r_out.mean()) ** 2))),
        float(np.sqrt(np.mean((r_mix - r_mix.mean()) ** 2))),
    )


def gate(stats: GroupStats, hp: HyperParams) -> GateState:
    r_g = stats.sigma_mix / (stats.sigma_out + stats.sigma_mix + hp.eps_std)
    w_mix = r_g if (stats.mean_out < hp.r_max_out and r_g < hp.eps_mix) else 0.0
    d_g = hp.alpha_prio if hp.tau_low < stats.mean_out < hp.tau_high else hp.alpha_base
    return GateState(stats.mean_out, stats.mean_mix, stats.sigma_out, stats.sigma_mix, r_g, w_mix, d_g)


@dataclass(frozen=True)
class GroupAdvantages:
    a_out: np.ndarray
    a_mix: np.ndarray
    a_hyper: np.ndarray


def advantages(batch: GroupBatch, gs: GateState, stats: GroupStats, hp: HyperParams) -> GroupAdvantages:
    a_out = (batch.r_out - stats.mean_out) / (stats.sigma_out + hp.eps_norm)
    a_mix = (batch.r_mix - stats.mean_mix) / (stats.sigma_mix + hp.eps_norm)
    a_hyper = gs.d_g * ((1.0 - gs.w_mix) * a_out + gs.w_mix * a_mix)
    return GroupAdvantages(a_out, a_mix, a_hyper)


def mean_w_mix(gates: Sequence[GateState] | np.ndarray) -> float:
    if len(gates) == 0:
        raise ValueError("clip radius needs at least one group")
    if isinstance(gates, np.ndarray):
        return float(gates.mean())
    return float(np.mean([g.w_mix for g in gates]))


def batch_clip_radius(gates: Sequence[GateState] | np.ndarray, hp: HyperParams) -> float:
    """eps_min + (1 - mean w_mix) (eps_max - eps_min), averaged over groups."""
    w_bar = mean_w_mix(gates)
    # convex-combination form is exact at both ends (w_bar = 0 gives eps_max bit-for-bit)
    return (1.0 - w_bar) * hp.eps_max + w_bar * hp.eps_min


@dataclass
class BatchAdvantages:
    """Everything the trainer logs about one batch of G groups."""

    mean_out: np.ndarray
    mean_mix: np.ndarray
    sigma_out: np.ndarray
    sigma_mix: np.ndarray
    r_g: np.ndarray
    w_mix: np.ndarray
    d_g: np.ndarray
    a_out: np.ndarray
    a_mix: np.ndarray
    a_hyper: np.ndarray
    clip_radius: float
    mean_w_mix: float
    extra: dict = field(default_factory=dict)

    def gates(self) -> list[GateState]:
        return [
            GateState(*(float(x) for x in row))
            for row in zip(self.mean_out, self.mean_mix, self.sigma_out, self.sigma_mix, self.r_g, self.w_mix, self.d_g)
        ]


def compute_batch(r_out, r_mix, hp: HyperParams, algorithm: str = "awpo", *,
                  force_w: float | None = None, force_d: float | None = None,
                  clip_radius: float | None = None) -> BatchAdvantages:
    """Gates, advantages and clip radius for a (G, K) reward table.

    ``grpo_outcome`` pins w_mix = 0 and d_g = 1, ``grpo_mixed`` pins
    w_mix = 1 and d_g = 1; both use the fixed ``hp.clip_eps``.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError("algorithm", f"unknown algorithm {algorithm!r}")
    r_out = np.ascontiguousarray(r_out, dtype=np.float64)
    r_mix = np.ascontiguousarray(r_mix, dtype=np.float64)
    if r_out.ndim != 2 or r_out.shape != r_mix.shape:
        raise ValueError("reward tables must both be (G, K)")
    if r_out.shape[0] == 0:
        raise ValueError("empty batch")
    if r_out.shape[1] < 2:
        raise ConfigError("k", "group statistics need K >= 2")
    if algorithm == "grpo_outcome":
        force_w, force_d = 0.0, 1.0
        clip_radius = hp.clip_eps if clip_radius is None else clip_radius
    elif algorithm == "grpo_mixed":
        force_w, force_d = 1.0, 1.0
        clip_radius = hp.clip_eps if clip_radius is None else clip_radius
    fw = math.nan if force_w is None else float(force_w)
    fd = math.nan if force_d is None else float(force_d)
    res = kernels.group_advantages(
        r_out, r_mix, hp.eps_std, hp.eps_mix, hp.r_max_out, hp.tau_low, hp.tau_high,
        hp.alpha_base, hp.alpha_prio, hp.eps_norm, fw, fd,
    )
    mean_out, mean_mix, sig_out, sig_mix, r_g, w, d, a_out, a_mix, a_hyper = res
    w_bar = float(w.mean())
    if clip_radius is None:
        clip_radius = batch_clip_radius(w, hp)
    return BatchAdvantages(mean_out, mean_mix, sig_out, sig_mix, r_g, w, d, a_out, a_mix, a_hyper,
                           float(clip_radius), w_bar)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("log-probabilities must be finite")


def surrogate_terms(a_hyper, new_log_probs, old_log_probs, eps: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    a = np.asarray(a_hyper, dtype=float)
    new = np.asarray(new_log_probs, dtype=float)
    old = np.asarray(old_log_probs, dtype=float)
    _check_finite(new, old)
    r = np.exp(new - old)
    return np.minimum(r * a, np.clip(r, 1.0 - eps, 1.0 + eps) * a)


def surrogate_objective(a_hyper, new_log_probs, old_log_probs, eps: float) -> float:
    return float(np.mean(surrogate_terms(a_hyper, new_log_probs, old_log_probs, eps)))


@dataclass(frozen=True)
class Samples:
    """Flat sample table: prompt index, action, behaviour log-prob, advantage."""

    prompt_idx: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prompt_idx", np.ascontiguousarray(self.prompt_idx, dtype=np.int64))
        object.__setattr__(self, "actions", np.ascontiguousarray(self.actions, dtype=np.int64))
        object.__setattr__(self, "old_log_probs", np.ascontiguousarray(self.old_log_probs, dtype=np.float64))
        object.__setattr__(self, "advantages", np.ascontiguousarray(self.advantages, dtype=np.float64))


def surrogate_value_and_gradient(samples: Samples, policy, eps: float) -> tuple[float, np.ndarray]:
    """Objective and its gradient w.r.t. the policy's flat logits.

    Samples whose clipped branch is active and strictly smaller contribute
    zero gradient.
    """
    _check_finite(samples.old_log_probs, policy.theta)
    obj, grad, _ = kernels.clipped_surrogate(
        np.ascontiguousarray(policy.theta), policy.offsets, samples.prompt_idx, samples.actions,
        samples.old_log_probs, samples.advantages, float(eps),
    )
    return float(obj), grad


def surrogate_gradient(samples: Samples, policy, eps: float) -> np.ndarray:
    return surrogate_value_and_gradient(samples, policy, eps)[1]


def policy_surrogate(samples: Samples, policy, eps: float) -> float:
    """The clipped surrogate evaluated at ``policy`` (plain numpy, no kernel)."""
    new = policy.flat_log_probs[policy.offsets[samples.prompt_idx] + samples.actions]
    return surrogate_objective(samples.advantages, new, samples.old_log_probs, eps)
