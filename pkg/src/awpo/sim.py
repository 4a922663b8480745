"""Synthetic tool-calling environments and the group-relative training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .advantage import ALGORITHMS, ConfigError, HyperParams, Samples, compute_batch
from .judge import JudgeRequest, JudgeScorer, JudgeUnavailable, MockRubricJudge
from .policy import ActionTemplate, TabularPolicy
from .rewards import outcome_reward, perturb_scores, quantize_tier
from .toolgraph import ToolCall, ToolGraph

log = logging.getLogger(__name__)

_TOOLS = {
    "get_weather": {"city": ["Paris", "Tokyo", "Lima", "Oslo"], "unit": ["C", "F"], "days": [1, 3, 7]},
    "search_flights": {"origin": ["SFO", "JFK", "CDG"], "destination": ["NRT", "LHR", "GRU"], "nonstop": [True, False]},
    "convert_currency": {"amount": [10, 250.5, 1000], "source": ["USD", "EUR"], "target": ["JPY", "GBP"]},
    "create_event": {"title": ["standup", "review", "lunch"], "duration": [15, 30, 60], "private": [True, False]},
    "lookup_stock": {"ticker": ["ACME", "INIT", "ZETA"], "exchange": ["NYSE", "LSE"]},
    "send_email": {"to": ["ana@x.org", "li@y.com"], "subject": ["hello", "report"], "urgent": [True, False]},
    "translate_text": {"text": ["good morning", "thank you"], "target_lang": ["fr", "de", "ja"]},
    "book_table": {"restaurant": ["Nopa", "Zuni"], "party_size": [2, 4, 6], "time": ["19:00", "20:30"]},
}
_FILLER = ("maybe", "perhaps", "something", "unclear", "guess", "whatever", "random", "probably", "anyway", "hmm")

DIFFICULTY_BANDS = {
    # initial probability of the exact-match template
    "easy": (0.40, 0.60),
    "medium": (0.15, 0.30),
    "hard": (0.05, 0.10),
}


@dataclass(frozen=True)
class EnvSpec:
    num_prompts: int = 50
    num_templates: int = 6
    difficulty_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)  # easy, medium, hard
    # prompts where a wrong-outcome template carries the best reasoning
    distractor_fraction: float = 0.3
    judge_noise_std: float = 0.0
    judge_flip_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "difficulty_mix", tuple(float(x) for x in self.difficulty_mix))
        if self.num_prompts < 1:
            raise ConfigError("env.num_prompts", "need at least one prompt")
        if self.num_templates < 2:
            raise ConfigError("env.num_templates", "need at least two templates")
        if len(self.difficulty_mix) != 3 or min(self.difficulty_mix) < 0 or sum(self.difficulty_mix) <= 0:
            raise ConfigError("env.difficulty_mix", "three non-negative fractions (easy, medium, hard)")
        if not 0 <= self.distractor_fraction <= 1:
            raise ConfigError("env.distractor_fraction", "must lie in [0, 1]")
        if self.judge_noise_std < 0:
            raise ConfigError("env.judge_noise_std", "must be >= 0")
        if not 0 <= self.judge_flip_fraction <= 1:
            raise ConfigError("env.judge_flip_fraction", "must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticTask:
    prompt_id: str
    prompt: str
    truth: ToolGraph
    reference_reasoning: str
    templates: tuple[ActionTemplate, ...]
    optimum: int
    initial_logits: tuple[float, ...]
    difficulty: str
    distractor: bool = False

    def outcome_totals(self) -> np.ndarray:
        return np.array([outcome_reward(self.truth, t.prediction, t.format_valid).total for t in self.templates])

    def s_exec(self) -> np.ndarray:
        return np.array([outcome_reward(self.truth, t.prediction, t.format_valid).s_exec for t in self.templates])

    def judge_request(self, a: int, request_id: str = "") -> JudgeRequest:
        t = self.templates[a]
        return JudgeRequest(self.prompt, t.reasoning, self.reference_reasoning, self.truth, t.prediction,
                            t.format_valid, request_id)


# ------------------------------------------------------------ environments

def _random_truth(rng: np.random.Generator) -> ToolGraph:
    names = sorted(_TOOLS)
    n_calls = 1 if rng.random() < 0.7 else 2
    chosen = rng.choice(len(names), size=n_calls, replace=False)
    calls = []
    for i in chosen:
        name = names[int(i)]
        schema = _TOOLS[name]
        keys = sorted(schema)
        n_params = int(rng.integers(1, len(keys) + 1))
        picked = sorted(rng.choice(len(keys), size=n_params, replace=False).tolist())
        params = {}
        for j in picked:
            choices = schema[keys[j]]
            params[keys[j]] = choices[int(rng.integers(len(choices)))]
        calls.append(ToolCall(name, params))
    return ToolGraph(tuple(calls))


def _describe(truth: ToolGraph) -> str:
    parts = []
    for c in truth.calls:
        args = " and ".join(f"{k} set to {v}" for k, v in sorted(c.params.items()))
        parts.append(f"call {c.name} with {args}" if args else f"call {c.name}")
    return "the user request needs tools so i will " + " then ".join(parts) + " and check each argument against the request"


def _reference_reasoning(truth: ToolGraph) -> str:
    return ("first identify what the user is asking for. " + _describe(truth) +
            ". finally verify the call matches the requested values before answering.")


def _reasoning_at_quality(reference: str, quality: float, rng: np.random.Generator) -> str:
    toks = reference.split()
    keep = int(round(quality * len(toks)))
    if keep >= len(toks):
        return reference
    filler = [_FILLER[int(i)] for i in rng.integers(len(_FILLER), size=len(toks) - keep)]
    return " ".join(toks[:keep] + filler)


def _other_value(value, rng):
    if isinstance(value, bool):
        return not value
    if isinstance(value, (int, float)):
        return value + int(rng.integers(1, 9))
    return f"{value}_x"


def _corruptions(truth: ToolGraph, rng: np.random.Generator) -> list[tuple[str, ToolGraph, bool]]:
    """Imperfect candidate answers, each strictly below the optimum outcome."""
    calls = list(truth.calls)
    out = []
    # wrong value in one parameter
    i = int(rng.integers(len(calls)))
    c = calls[i]
    key = sorted(c.params)[int(rng.integers(len(c.params)))]
    params = dict(c.params)
    params[key] = _other_value(params[key], rng)
    out.append(("wrong_value", ToolGraph(tuple(calls[:i] + [ToolCall(c.name, params)] + calls[i + 1:])), True))
    # parameter dropped, or an extra bogus one when there is only one
    params = dict(c.params)
    if len(params) > 1:
        params.pop(key)
        kind = "missing_param"
    else:
        params["verbose"] = True
        kind = "extra_param"
    out.append((kind, ToolGraph(tuple(calls[:i] + [ToolCall(c.name, params)] + calls[i + 1:])), True))
    # wrong tool name
    others = sorted(set(_TOOLS) - {x.name for x in calls})
    wrong = others[int(rng.integers(len(others)))]
    out.append(("wrong_name", ToolGraph(tuple(calls[:i] + [ToolCall(wrong, c.params)] + calls[i + 1:])), True))
    out.append(("extra_call", ToolGraph(tuple(calls + [ToolCall(others[0], {})])), True))
    out.append(("bad_format", truth, False))
    out.append(("no_call", ToolGraph(), True))
    out.append(("empty_invalid", ToolGraph(), False))
    return out


def _initial_logits(M: int, optimum: int, p: float) -> np.ndarray:
    logits = np.zeros(M)
    logits[optimum] = np.log(p * (M - 1) / (1.0 - p))
    return logits


def generate_env(spec: EnvSpec, seed: int | None = None) -> list[SyntheticTask]:
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    M = spec.num_templates
    mix = np.asarray(spec.difficulty_mix) / sum(spec.difficulty_mix)
    counts = np.floor(mix * spec.num_prompts).astype(int)
    counts[0] += spec.num_prompts - counts.sum()
    bands = np.repeat(np.array(list(DIFFICULTY_BANDS)), counts)
    rng.shuffle(bands)
    n_distract = int(round(spec.distractor_fraction * spec.num_prompts))
    distract = np.zeros(spec.num_prompts, dtype=bool)
    distract[rng.choice(spec.num_prompts, size=n_distract, replace=False)] = True
    tasks = []
    for g in range(spec.num_prompts):
        truth = _random_truth(rng)
        ref = _reference_reasoning(truth)
        pool = _corruptions(truth, rng)
        # keep "wrong_value" first so distractor prompts always have it
        rest = [pool[int(i)] for i in rng.permutation(np.arange(1, len(pool)))]
        chosen = [pool[0]] + rest[: M - 2]
        while len(chosen) < M - 1:
            chosen.append(pool[len(chosen) % len(pool)])
        if distract[g]:
            perfect_q = float(rng.uniform(0.0, 0.2))
            qualities = [1.0] + [float(rng.uniform(0.0, 0.5)) for _ in chosen[1:]]
        else:
            perfect_q = float(rng.uniform(0.8, 1.0))
            qualities = [float(rng.uniform(0.0, 0.7)) for _ in chosen]
        templates = [ActionTemplate(truth, True, perfect_q, _reasoning_at_quality(ref, perfect_q, rng))]
        for (kind, pred, fmt), q in zip(chosen, qualities):
            templates.append(ActionTemplate(pred, fmt, q, _reasoning_at_quality(ref, q, rng)))
        order = rng.permutation(M)
        templates = [templates[int(i)] for i in order]
        optimum = int(np.argmin(order))  # position where template 0 landed
        lo, hi = DIFFICULTY_BANDS[str(bands[g])]
        p0 = float(rng.uniform(lo, hi))
        tasks.append(SyntheticTask(
            prompt_id=f"p{g:04d}",
            prompt=f"request {g}: " + _describe(truth).replace("i will ", "please "),
            truth=truth,
            reference_reasoning=ref,
            templates=tuple(templates),
            optimum=optimum,
            initial_logits=tuple(_initial_logits(M, optimum, p0).tolist()),
            difficulty=str(bands[g]),
            distractor=bool(distract[g]),
        ))
    return tasks


def bandit_env(num_prompts: int = 1, seed: int = 0, initial_p: float = 0.5) -> list[SyntheticTask]:
    """Two-armed tasks: a perfect answer (total 2) and an empty invalid one (total 0)."""
    rng = np.random.default_rng(seed)
    tasks = []
    for g in range(num_prompts):
        truth = _random_truth(rng)
        ref = _reference_reasoning(truth)
        templates = (ActionTemplate(truth, True, 1.0, ref), ActionTemplate(ToolGraph(), False, 0.0, ""))
        tasks.append(SyntheticTask(f"b{g:04d}", f"bandit {g}", truth, ref, templates, 0,
                                   tuple(_initial_logits(2, 0, initial_p).tolist()), "custom"))
    return tasks


def env_digest(tasks: list[SyntheticTask]) -> str:
    """Canonical JSON of an environment, for byte-level comparisons."""
    rows = []
    for t in tasks:
        rows.append({
            "prompt_id": t.prompt_id, "prompt": t.prompt, "truth": t.truth.to_json(),
            "reference_reasoning": t.reference_reasoning, "optimum": t.optimum,
            "initial_logits": list(t.initial_logits), "difficulty": t.difficulty, "distractor": t.distractor,
            "templates": [{"prediction": x.prediction.to_json(), "format_valid": x.format_valid,
                           "latent_quality": x.latent_quality, "reasoning": x.reasoning} for x in t.templates],
        })
    return json.dumps(rows, sort_keys=True)


def initial_policy(tasks: list[SyntheticTask], seed: int = 0) -> TabularPolicy:
    return TabularPolicy([t.initial_logits for t in tasks], [t.prompt_id for t in tasks], seed)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class JudgeSettings:
    mode: str = "mock"  # mock | constant | remote
    endpoint: str = ""
    timeout: float = 30.0
    retries: int = 3
    concurrency: int = 4
    cache_dir: str = ""
    on_failure: str = "error"
    constant_value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("mock", "constant", "remote"):
            raise ConfigError("judge.mode", "must be mock, constant or remote")
        if self.mode == "remote" and not self.endpoint:
            raise ConfigError("judge.endpoint", "remote judge needs an endpoint")
        if self.on_failure not in ("error", "zero"):
            raise ConfigError("judge.on_failure", "must be error or zero")
        if self.retries < 0 or self.concurrency < 1 or self.timeout <= 0:
            raise ConfigError("judge.retries", "retries >= 0, concurrency >= 1, timeout > 0")


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "awpo"
    hp: HyperParams = field(default_factory=HyperParams)
    env: EnvSpec = field(default_factory=EnvSpec)
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    iterations: int = 200
    checkpoint_every: int = 50
    early_stop: bool = False
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    iteration: int
    gates: list[dict]
    clip_radius: float
    objective: float
    mean_r_out: float
    mean_r_mix: float
    mean_w_mix: float
    eval_exact_match: float
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        # wall-clock goes to the timing sidecar so run logs stay reproducible
        d = asdict(self)
        d.pop("wall_clock")
        return d


class TrainingAborted(RuntimeError):
    def __init__(self, message, policy, records):
        super().__init__(message)
        self.policy = policy
        self.records = records


def evaluate(policy: TabularPolicy, tasks: list[SyntheticTask]) -> dict:
    """Greedy-decoding metrics plus exact expectations under the policy."""
    greedy = policy.greedy()
    totals = [t.outcome_totals() for t in tasks]
    execs = [t.s_exec() for t in tasks]
    hit = np.array([greedy[g] == t.optimum for g, t in enumerate(tasks)], dtype=float)
    opt_flat = [np.eye(len(t.templates))[t.optimum] for t in tasks]
    return {
        "exact_match": float(hit.mean()),
        "mean_total": float(np.mean([totals[g][a] for g, a in enumerate(greedy)])),
        "mean_s_exec": float(np.mean([execs[g][a] for g, a in enumerate(greedy)])),
        "expected_exact_match": policy.exact_expectation(opt_flat),
        "expected_total": policy.exact_expectation(totals),
    }


class _RewardChannel:
    """Outcome tables plus reasoning scores, from the mock judge or a live judge."""

    def __init__(self, tasks, env: EnvSpec, judge: JudgeScorer | None, seed: int):
        self.tasks = tasks
        self.env = env
        self.judge = judge
        M = max(len(t.templates) for t in tasks)
        self.out_table = np.zeros((len(tasks), M))
        self.raw_table = np.zeros((len(tasks), M))
        clean = MockRubricJudge()
        for g, t in enumerate(tasks):
            self.out_table[g, : len(t.templates)] = t.outcome_totals()
            if judge is None:
                for a in range(len(t.templates)):
                    self.raw_table[g, a] = clean.raw_score(t.judge_request(a))[0]
        self.rng = np.random.default_rng([seed, 0x7A11])

    def rewards(self, actions: np.ndarray, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        G = actions.shape[0]
        rows = np.arange(G)[:, None]
        r_out = self.out_table[rows, actions]
        if self.judge is None:
            noisy = perturb_scores(self.raw_table[rows, actions], self.rng,
                                   self.env.judge_noise_std, self.env.judge_flip_fraction)
            reasoning, _ = quantize_tier(noisy)
        else:
            reqs = [self.tasks[g].judge_request(int(a), f"{iteration}-{g}-{j}")
                    for g in range(G) for j, a in enumerate(actions[g])]
            scores = [r.score for r in self.judge.score_many(reqs)]
            reasoning = np.clip(np.array(scores).reshape(actions.shape), 0.0, 1.0)
        return r_out, r_out + reasoning


def train(cfg: TrainerConfig, tasks: list[SyntheticTask] | None = None, *, judge: JudgeScorer | None = None,
          run_dir: str | Path | None = None,
          on_record: Callable[[RunRecord], None] | None = None) -> tuple[TabularPolicy, list[RunRecord]]:
    """Run the sample / score / gate / clip / ascend loop for ``cfg.iterations`` steps.

    ``judge=None`` uses the mock rubric judge with the environment's noise
    model. With ``run_dir`` set, records are streamed to ``records.jsonl``
    as they are produced and checkpoints land in ``checkpoints/``.
    """
    hp = cfg.hp
    tasks = tasks if tasks is not None else generate_env(cfg.env)
    policy = initial_policy(tasks, hp.seed)
    channel = _RewardChannel(tasks, cfg.env, judge, hp.seed)
    rng = np.random.default_rng(hp.seed)
    G, K = len(tasks), hp.k
    prompt_idx = np.repeat(np.arange(G, dtype=np.int64), K)
    records: list[RunRecord] = []
    writer = _RunWriter(Path(run_dir)) if run_dir is not None else None
    streak = 0
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            actions = policy.sample_groups(K, rng)
            try:
                r_out, r_mix = channel.rewards(actions, it)
            except JudgeUnavailable as exc:
                raise TrainingAborted(str(exc), policy, records) from exc
            batch = compute_batch(r_out, r_mix, hp, cfg.algorithm)
            flat_actions = actions.ravel().astype(np.int64)
            old_logp = policy.flat_log_probs[policy.offsets[prompt_idx] + flat_actions]
            samples = Samples(prompt_idx, flat_actions, old_logp, batch.a_hyper.ravel())
            theta = np.array(policy.theta)
            objective = None
            for _ in range(hp.epochs):
                obj, grad, _ = kernels.clipped_surrogate(theta, policy.offsets, samples.prompt_idx, samples.actions,
                                                         samples.old_log_probs, samples.advantages, batch.clip_radius)
                if objective is None:
                    objective = obj
                theta = theta + hp.learning_rate * grad
            policy = policy.with_theta(theta)
            exact = evaluate_exact_match(policy, tasks)
            rec = RunRecord(
                iteration=it,
                gates=[g.to_dict() for g in batch.gates()],
                clip_radius=batch.clip_radius,
                objective=float(objective),
                mean_r_out=float(r_out.mean()),
                mean_r_mix=float(r_mix.mean()),
                mean_w_mix=batch.mean_w_mix,
                eval_exact_match=exact,
                wall_clock=time.perf_counter() - t0,
            )
            records.append(rec)
            if writer:
                writer.record(rec)
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    writer.checkpoint(policy, it + 1)
            if on_record:
                on_record(rec)
            streak = streak + 1 if exact == 1.0 else 0
            if cfg.early_stop and streak >= cfg.early_stop_patience:
                break
    finally:
        if writer:
            writer.close()
    return policy, records


def evaluate_exact_match(policy: TabularPolicy, tasks: list[SyntheticTask]) -> float:
    greedy = policy.greedy()
    return float(np.mean([greedy[g] == t.optimum for g, t in enumerate(tasks)]))


class _RunWriter:
    def __init__(self, run_dir: Path):
        self.dir = run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "checkpoints").mkdir(exist_ok=True)
        self._records = open(self.dir / "records.jsonl", "w", encoding="utf-8")
        self._timing = open(self.dir / "timing.jsonl", "w", encoding="utf-8")

    def record(self, rec: RunRecord):
        self._records.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        self._records.flush()
        self._timing.write(json.dumps({"iteration": rec.iteration, "wall_clock": rec.wall_clock}) + "\n")
        self._timing.flush()

    def checkpoint(self, policy: TabularPolicy, step: int):
        policy.save(self.dir / "checkpoints" / f"step_{step:06d}.json")

    def close(self):
        self._records.close()
        self._timing.close()


def summarize_run(cfg: TrainerConfig, policy: TabularPolicy, records: list[RunRecord], tasks) -> dict:
    """Deterministic run summary written as ``metrics.json``."""
    final = evaluate(policy, tasks)
    return {
        "algorithm": cfg.algorithm,
        "seed": cfg.hp.seed,
        "env_seed": cfg.env.seed,
        "iterations": len(records),
        "final": final,
        "mean_w_mix": float(np.mean([r.mean_w_mix for r in records])) if records else 0.0,
        "final_clip_radius": records[-1].clip_radius if records else None,
        "final_objective": records[-1].objective if records else None,
    }


def override(cfg: TrainerConfig, **changes) -> TrainerConfig:
    """Copy of ``cfg`` with top-level or ``hp__x`` / ``env__x`` fields replaced."""
    hp_changes = {k[4:]: v for k, v in changes.items() if k.startswith("hp__")}
    env_changes = {k[5:]: v for k, v in changes.items() if k.startswith("env__")}
    top = {k: v for k, v in changes.items() if "__" not in k}
    return replace(cfg, hp=replace(cfg.hp, **hp_changes), env=replace(cfg.env, **env_changes), **top)
