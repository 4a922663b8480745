"""Reasoning-quality judges.

Three scorers share one interface (``score`` / ``score_many``):

* ``MockRubricJudge``: deterministic rubric judge built on measurable proxies.
* ``ConstantJudge``: returns a fixed score, handy for ablations.
* ``RemoteJudge``: JSON-over-HTTP client with retries, bounded concurrency
  and a content-addressed disk cache.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .rewards import (
    RUBRIC_WEIGHTS,
    ReasoningReward,
    outcome_reward,
    perturb_scores,
    quantize_tier,
    rubric_score,
)
from .toolgraph import ToolGraph

log = logging.getLogger(__name__)


class JudgeUnavailable(RuntimeError):
    """The remote judge could not be reached after all retries."""


@dataclass(frozen=True)
class JudgeRequest:
    prompt: str
    reasoning: str
    reference_reasoning: str
    truth: ToolGraph
    prediction: ToolGraph
    prediction_format_valid: bool = True
    id: str = ""

    def payload(self) -> dict:
        return {
            "id": self.id,
            "prompt": self.prompt,
            "reasoning": self.reasoning,
            "reference_reasoning": self.reference_reasoning,
            "truth": self.truth.to_json(),
            "prediction": self.prediction.to_json(),
        }

    def content_hash(self) -> str:
        body = self.payload()
        body.pop("id")
        raw = json.dumps(body, sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class JudgeScorer(Protocol):
    def score(self, req: JudgeRequest) -> ReasoningReward: ...

    def score_many(self, reqs: Sequence[JudgeRequest]) -> list[ReasoningReward]: ...


def judge_score(req: JudgeRequest, judge: JudgeScorer) -> ReasoningReward:
    return judge.score(req)


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def reasoning_similarity(reasoning: str, reference: str) -> float:
    a, b = _tokens(reasoning), _tokens(reference)
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return difflib.SequenceMatcher(None, a, b, autojunk=False).ratio()


@dataclass
class MockRubricJudge:
    """Rubric judge over proxies of the four weighted dimensions.

    An empty chain of thought is a hard failure and lands in the lowest tier.
    Noise, when enabled, is drawn from a generator keyed on ``seed``, the
    request id and the request content, so scoring stays a pure function.
    """

    noise_std: float = 0.0
    flip_fraction: float = 0.0
    seed: int = 0
    weights: Mapping[str, float] = field(default_factory=lambda: dict(RUBRIC_WEIGHTS))

    def dimensions(self, req: JudgeRequest) -> dict[str, float]:
        if not req.reasoning.strip():
            return {k: 0.0 for k in self.weights}
        out = outcome_reward(req.truth, req.prediction, req.prediction_format_valid)
        n_truth = len(req.truth.calls)
        param = out.r_para / n_truth if n_truth else out.r_name
        return {
            "reasoning_path": reasoning_similarity(req.reasoning, req.reference_reasoning),
            "tool_selection": out.r_name,
            "parameter_setting": param,
            "execution_strategy": out.s_exec,
        }

    def raw_score(self, req: JudgeRequest) -> tuple[float, dict[str, float]]:
        dims = self.dimensions(req)
        return rubric_score(dims, self.weights), dims

    def _rng(self, req: JudgeRequest) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}|{req.id}|{req.content_hash()}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def score(self, req: JudgeRequest) -> ReasoningReward:
        raw, dims = self.raw_score(req)
        s = raw
        if self.noise_std > 0 or self.flip_fraction > 0:
            s = float(perturb_scores(raw, self._rng(req), self.noise_std, self.flip_fraction))
        value, tier = quantize_tier(s)
        return ReasoningReward(score=value, dimension_scores=dims, tier=tier, raw_score=raw)

    def score_many(self, reqs: Sequence[JudgeRequest]) -> list[ReasoningReward]:
        return [self.score(r) for r in reqs]


@dataclass
class ConstantJudge:
    value: float = 0.0

    def score(self, req: JudgeRequest) -> ReasoningReward:
        v = min(max(float(self.value), 0.0), 1.0)
        _, tier = quantize_tier(v)
        return ReasoningReward(score=v, dimension_scores={}, tier=tier, raw_score=v)

    def score_many(self, reqs: Sequence[JudgeRequest]) -> list[ReasoningReward]:
        return [self.score(r) for r in reqs]


def parse_judge_response(data: Mapping, expected_id: str | None = None) -> ReasoningReward:
    """Decode a wire response; the score is clamped to [0, 1] whatever was sent."""
    if expected_id is not None and str(data.get("id")) != str(expected_id):
        raise ValueError(f"judge response id {data.get('id')!r} does not match request {expected_id!r}")
    score = float(data["score"])
    if not np.isfinite(score):
        score = 0.0
    score = min(max(score, 0.0), 1.0)
    dims = {str(k): min(max(float(v), 0.0), 1.0) for k, v in (data.get("dimension_scores") or {}).items()}
    tier = data.get("tier")
    tier = int(tier) if tier is not None else quantize_tier(score)[1]
    tier = min(max(tier, 1), 6)
    return ReasoningReward(score=score, dimension_scores=dims, tier=tier, raw_score=score)


class RemoteJudge:
    """HTTP judge client.

    ``on_failure="error"`` raises JudgeUnavailable once retries are
    exhausted; ``"zero"`` substitutes a zero score and logs a warning.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 3,
        concurrency: int = 4,
        cache_dir: str | os.PathLike | None = None,
        on_failure: str = "error",
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        if on_failure not in ("error", "zero"):
            raise ValueError("on_failure must be 'error' or 'zero'")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = max(int(retries), 0)
        self.concurrency = max(int(concurrency), 1)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.on_failure = on_failure
        self.backoff = backoff
        self.failures = 0
        self._client = client or httpx.Client(timeout=timeout)

    def close(self):
        self._client.close()

    def _cache_path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _cache_get(self, key: str) -> ReasoningReward | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        with open(path, encoding="utf-8") as f:
            return parse_judge_response(json.load(f))

    def _cache_put(self, key: str, data: dict):
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, sort_keys=True)
        os.replace(tmp, path)

    def score(self, req: JudgeRequest) -> ReasoningReward:
        key = req.content_hash()
        cached = self._cache_get(key)
        if cached is not None:
            return cached
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=req.payload(), timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
                reward = parse_judge_response(data, expected_id=req.id)
                self._cache_put(key, {**data, "id": req.id})
                return reward
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                last_exc = exc
                if attempt < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * 2**attempt)
        self.failures += 1
        if self.on_failure == "zero":
            log.warning("judge unavailable for request %s, substituting 0: %s", req.id, last_exc)
            return ReasoningReward(score=0.0, dimension_scores={}, tier=6, raw_score=0.0)
        raise JudgeUnavailable(f"judge at {self.endpoint} unavailable after {self.retries + 1} attempts: {last_exc}")

    def score_many(self, reqs: Sequence[JudgeRequest]) -> list[ReasoningReward]:
        if self.concurrency == 1 or len(reqs) <= 1:
            return [self.score(r) for r in reqs]
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self.score, reqs))
