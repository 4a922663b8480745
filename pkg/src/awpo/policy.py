"""Tabular softmax policies with exact enumeration."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .toolgraph import ToolGraph

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ActionTemplate:
    """One discrete response: the tool calls it emits and how good its reasoning is."""

    prediction: ToolGraph
    format_valid: bool
    latent_quality: float
    reasoning: str = ""


class TabularPolicy:
    """Per-prompt categorical logits stacked into one flat parameter vector.

    Instances are treated as immutable snapshots: updates return a new policy.
    """

    def __init__(self, logits: Sequence[Sequence[float]], prompt_ids: Sequence[str] | None = None, seed: int = 0):
        blocks = [np.asarray(b, dtype=np.float64).ravel() for b in logits]
        if not blocks or any(len(b) == 0 for b in blocks):
            raise ValueError("every prompt needs at least one action")
        sizes = np.array([len(b) for b in blocks], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.theta = np.concatenate(blocks)
        self.theta.setflags(write=False)
        self.prompt_ids = list(prompt_ids) if prompt_ids is not None else [str(i) for i in range(len(blocks))]
        if len(self.prompt_ids) != len(blocks):
            raise ValueError("prompt_ids length does not match number of logit blocks")
        self.seed = int(seed)
        self.block_of = np.repeat(np.arange(len(blocks)), sizes)
        self._logp = kernels.block_log_softmax(self.theta, self.offsets)
        self._probs = np.exp(self._logp)

    @classmethod
    def uniform(cls, sizes: Sequence[int], **kw) -> "TabularPolicy":
        return cls([np.zeros(m) for m in sizes], **kw)

    def with_theta(self, theta: np.ndarray) -> "TabularPolicy":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ValueError("parameter vector has the wrong shape")
        return TabularPolicy(self.split(theta), self.prompt_ids, self.seed)

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.offsets[g]:self.offsets[g + 1]] for g in range(self.num_prompts)]

    @property
    def num_prompts(self) -> int:
        return len(self.offsets) - 1

    @property
    def dim(self) -> int:
        return len(self.theta)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def flat_probs(self) -> np.ndarray:
        return self._probs

    @property
    def flat_log_probs(self) -> np.ndarray:
        return self._logp

    def logits(self, g: int) -> np.ndarray:
        return self.theta[self.offsets[g]:self.offsets[g + 1]]

    def probs(self, g: int) -> np.ndarray:
        return self._probs[self.offsets[g]:self.offsets[g + 1]]

    def _check(self, g: int, a: int):
        if not 0 <= g < self.num_prompts:
            raise IndexError(f"prompt index {g} out of range")
        if not 0 <= a < self.offsets[g + 1] - self.offsets[g]:
            raise IndexError(f"action index {a} out of range for prompt {g}")

    def log_prob(self, g: int, a: int) -> float:
        self._check(g, a)
        return float(self._logp[self.offsets[g] + a])

    def score(self, g: int, a: int) -> np.ndarray:
        """grad_theta log pi(a|g): e_a - pi(.|g) inside block g, zero elsewhere."""
        self._check(g, a)
        z = np.zeros(self.dim)
        lo, hi = self.offsets[g], self.offsets[g + 1]
        z[lo:hi] = -self._probs[lo:hi]
        z[lo + a] += 1.0
        return z

    def score_matrix(self) -> np.ndarray:
        """Row i is the score of flat outcome i (prompt block_of[i], its local action)."""
        Z = np.zeros((self.dim, self.dim))
        for i in range(self.dim):
            g = self.block_of[i]
            lo, hi = self.offsets[g], self.offsets[g + 1]
            Z[i, lo:hi] = -self._probs[lo:hi]
            Z[i, i] += 1.0
        return Z

    def outcome_weights(self) -> np.ndarray:
        """Probability of each flat (prompt, action) outcome with uniform prompts."""
        return self._probs / self.num_prompts

    def sample(self, g: int, rng: np.random.Generator, size: int | None = None):
        n = 1 if size is None else int(size)
        prompts = np.full(n, g, dtype=np.int64)
        out = kernels.sample_blocks(self._probs, self.offsets, prompts, rng.random(n))
        return int(out[0]) if size is None else out

    def sample_groups(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """``k`` actions for every prompt, shape (G, k)."""
        G = self.num_prompts
        prompts = np.repeat(np.arange(G, dtype=np.int64), k)
        u = rng.random(G * k)
        return kernels.sample_blocks(self._probs, self.offsets, prompts, u).reshape(G, k)

    def greedy(self) -> np.ndarray:
        return np.array([int(np.argmax(self.logits(g))) for g in range(self.num_prompts)])

    def exact_expectation(self, values) -> float:
        """sum_g (1/G) sum_a pi(a|g) f(g, a); ``values`` is flat or a list of per-prompt arrays."""
        flat = _flatten(values, self)
        return float(np.dot(self.outcome_weights(), flat))

    # checkpoint format: {"version", "seed", "prompt_ids", "logits"}
    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "prompt_ids": list(self.prompt_ids),
            "logits": [self.logits(g).tolist() for g in range(self.num_prompts)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "TabularPolicy":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        return cls(data["logits"], data["prompt_ids"], data.get("seed", 0))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "TabularPolicy":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _flatten(values, policy: TabularPolicy) -> np.ndarray:
    if isinstance(values, np.ndarray) and values.ndim == 1:
        flat = values.astype(np.float64)
    else:
        flat = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in values])
    if flat.shape != (policy.dim,):
        raise ValueError(f"expected {policy.dim} per-action values, got {flat.shape}")
    return flat
