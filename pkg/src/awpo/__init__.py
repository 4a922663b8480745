"""Advantage-weighted policy optimization for tool-use agents, with a tabular testbed."""

__version__ = "0.1.0"

from .advantage import (  # noqa: E402
    BatchAdvantages,
    ConfigError,
    GateState,
    GroupBatch,
    HyperParams,
    Samples,
    advantages,
    batch_clip_radius,
    compute_batch,
    gate,
    group_stats,
    surrogate_gradient,
    surrogate_objective,
)
from .judge import ConstantJudge, JudgeRequest, JudgeUnavailable, MockRubricJudge, RemoteJudge, judge_score  # noqa: E402
from .policy import ActionTemplate, TabularPolicy  # noqa: E402
from .rewards import OutcomeReward, ReasoningReward, mixed_reward, outcome_reward  # noqa: E402
from .toolgraph import ToolCall, ToolGraph, name_set, parse_tool_graph  # noqa: E402
