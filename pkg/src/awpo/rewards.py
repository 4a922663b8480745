"""Decomposed outcome reward, rubric scoring and the mixed reward."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .toolgraph import ToolCall, ToolGraph, name_set, values_equal

RUBRIC_WEIGHTS: dict[str, float] = {
    "reasoning_path": 0.35,
    "tool_selection": 0.30,
    "parameter_setting": 0.25,
    "execution_strategy": 0.10,
}
# Tier I is the best tier.
TIER_VALUES = (1.00, 0.80, 0.60, 0.40, 0.20, 0.00)


@dataclass(frozen=True)
class OutcomeReward:
    s_format: float
    r_name: float
    r_para: float
    r_value: float
    s_exec: float
    total: float
    denominator: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReasoningReward:
    score: float
    dimension_scores: Mapping[str, float] = field(default_factory=dict)
    tier: int = 6
    raw_score: float = 0.0

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "dimension_scores": dict(self.dimension_scores),
            "tier": self.tier,
            "raw_score": self.raw_score,
        }


def match_calls(truth: ToolGraph, pred: ToolGraph) -> list[tuple[ToolCall, ToolCall | None]]:
    """Pair each ground-truth call with a same-named predicted call.

    The k-th occurrence of a name in ``truth`` is paired with the k-th
    occurrence of that name in ``pred``; leftovers pair with None.
    """
    pools: dict[str, list[ToolCall]] = {}
    for c in pred.calls:
        pools.setdefault(c.name, []).append(c)
    used: dict[str, int] = {}
    pairs = []
    for t in truth.calls:
        k = used.get(t.name, 0)
        pool = pools.get(t.name, [])
        pairs.append((t, pool[k] if k < len(pool) else None))
        used[t.name] = k + 1
    return pairs


def _jaccard(a: frozenset | set, b: frozenset | set) -> Fraction:
    union = a | b
    if not union:
        return Fraction(1)
    return Fraction(len(a & b), len(union))


def outcome_reward(truth: ToolGraph, pred: ToolGraph, format_valid: bool) -> OutcomeReward:
    # exact rationals so each component is rounded to float exactly once
    r_name = _jaccard(name_set(truth), name_set(pred))
    r_para = Fraction(0)
    r_value = 0
    n_values = 0
    for t, p in match_calls(truth, pred):
        n_values += len(t.params)
        if p is None:
            continue
        r_para += _jaccard(t.param_names, p.param_names)
        for key, val in t.params.items():
            if key in p.params and values_equal(val, p.params[key]):
                r_value += 1
    denom = 1 + len(truth.calls) + n_values
    s_exec = (r_name + r_para + r_value) / denom
    s_format = 1 if format_valid else 0
    return OutcomeReward(float(s_format), float(r_name), float(r_para), float(r_value), float(s_exec),
                         s_format + float(s_exec), float(denom))


def mixed_reward(out: OutcomeReward | float, reasoning: ReasoningReward | float) -> float:
    total = out.total if isinstance(out, OutcomeReward) else float(out)
    score = reasoning.score if isinstance(reasoning, ReasoningReward) else float(reasoning)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"reasoning score {score} outside [0, 1]")
    return total + score


def rubric_score(dimension_scores: Mapping[str, float], weights: Mapping[str, float] = RUBRIC_WEIGHTS) -> float:
    return float(sum(weights[k] * float(dimension_scores.get(k, 0.0)) for k in weights))


def quantize_tier(score):
    """Snap to the nearest tier value, ties going up. Returns (value, tier).

    Works elementwise on arrays.
    """
    s = np.clip(np.asarray(score, dtype=float), 0.0, 1.0)
    # round half up on a 0.2 grid; the 1e-9 nudge absorbs 0.1 not being exact in binary
    k = np.floor(s / 0.2 + 0.5 + 1e-9)
    k = np.clip(k, 0, 5)
    value = np.round(k * 0.2, 2)
    tier = (6 - k).astype(int)
    if value.ndim == 0:
        return float(value), int(tier)
    return value, tier


def perturb_scores(raw, rng: np.random.Generator, noise_std: float = 0.0, flip_fraction: float = 0.0):
    """Judge noise model: additive gaussian, clamp, then adversarial flips s -> 1 - s."""
    s = np.asarray(raw, dtype=float).copy()
    if noise_std > 0:
        s = s + rng.normal(0.0, noise_std, size=s.shape)
    s = np.clip(s, 0.0, 1.0)
    if flip_fraction > 0:
        flip = rng.random(size=s.shape) < flip_fraction
        s = np.where(flip, 1.0 - s, s)
    return s
