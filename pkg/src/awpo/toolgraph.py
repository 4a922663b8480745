"""Tool-call data model and the transcript wire format.

A transcript is free-text reasoning followed by one fenced block::

    I should look up the weather first.
    ```tool_calls
    [{"name": "get_weather", "arguments": {"city": "Paris"}}]
    ```

The block body is a JSON array of ``{"name": str, "arguments": object}``.
An empty array is a valid "no call" answer.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Iterable, Iterator, Mapping

FENCE_OPEN = "```tool_calls"
FENCE_CLOSE = "```"

_BLOCK_RE = re.compile(r"```tool_calls[ \t]*\n(.*?)\n?```", re.DOTALL)


def canonical_value(value: Any) -> tuple:
    """Hashable, type-tagged canonical form used for exact value matching.

    Numbers compare by normalized decimal (``1`` == ``1.0``); booleans,
    strings and numbers never compare equal to each other.
    """
    if value is None:
        return ("null",)
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, (int, float, Decimal)):
        if isinstance(value, float) and not math.isfinite(value):
            return ("num", repr(value))
        try:
            dec = Decimal(repr(value)) if isinstance(value, float) else Decimal(value)
        except InvalidOperation:
            return ("num", repr(value))
        dec = dec.normalize()
        if dec == 0:
            dec = Decimal(0)
        return ("num", str(dec))
    if isinstance(value, str):
        return ("str", value)
    if isinstance(value, (list, tuple)):
        return ("list", tuple(canonical_value(v) for v in value))
    if isinstance(value, Mapping):
        return ("map", tuple(sorted((str(k), canonical_value(v)) for k, v in value.items())))
    raise TypeError(f"unsupported parameter value type: {type(value).__name__}")


def values_equal(a: Any, b: Any) -> bool:
    return canonical_value(a) == canonical_value(b)


@dataclass(frozen=True)
class ToolCall:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("tool call name must be a non-empty string")
        # freeze a private copy so callers can't mutate it behind our back
        object.__setattr__(self, "params", dict(self.params))

    def __eq__(self, other):
        if not isinstance(other, ToolCall):
            return NotImplemented
        return self.name == other.name and _canon_params(self.params) == _canon_params(other.params)

    def __hash__(self):
        return hash((self.name, _canon_params(self.params)))

    @property
    def param_names(self) -> frozenset[str]:
        return frozenset(self.params)

    def to_json(self) -> dict:
        return {"name": self.name, "arguments": dict(self.params)}


def _canon_params(params: Mapping[str, Any]) -> tuple:
    return tuple(sorted((k, canonical_value(v)) for k, v in params.items()))


@dataclass(frozen=True)
class ToolGraph:
    calls: tuple[ToolCall, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "calls", tuple(self.calls))

    def __len__(self) -> int:
        return len(self.calls)

    def __iter__(self) -> Iterator[ToolCall]:
        return iter(self.calls)

    @classmethod
    def of(cls, *calls: ToolCall) -> "ToolGraph":
        return cls(tuple(calls))

    def to_json(self) -> list[dict]:
        return [c.to_json() for c in self.calls]

    @classmethod
    def from_json(cls, data: Iterable[Mapping[str, Any]]) -> "ToolGraph":
        """Build from the array schema. Raises ValueError on malformed input."""
        calls = []
        for item in data:
            if not isinstance(item, Mapping) or set(item) != {"name", "arguments"}:
                raise ValueError(f"malformed tool call entry: {item!r}")
            if not isinstance(item["arguments"], Mapping):
                raise ValueError("tool call arguments must be an object")
            calls.append(ToolCall(item["name"], item["arguments"]))
        return cls(tuple(calls))


def name_set(g: ToolGraph) -> set[str]:
    return {c.name for c in g.calls}


def _reject_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"duplicate key {k!r}")
        out[k] = v
    return out


def split_transcript(text: str) -> tuple[str, str | None]:
    """Return (reasoning, block body or None if there is no closed block)."""
    start = text.find(FENCE_OPEN)
    if start < 0:
        return text.strip(), None
    m = _BLOCK_RE.match(text, start)
    if m is None:
        return text[:start].strip(), None
    return text[:start].strip(), m.group(1)


def parse_tool_graph(text: str | bytes) -> tuple[ToolGraph, bool]:
    """Parse a transcript into ``(graph, format_valid)``. Never raises.

    Valid means: exactly one closed ``tool_calls`` block, nothing but
    whitespace after it, and a body that is a JSON array of complete
    ``{"name", "arguments"}`` objects with no duplicate keys.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError:
            return ToolGraph(), False
    if not isinstance(text, str):
        return ToolGraph(), False
    start = text.find(FENCE_OPEN)
    if start < 0:
        return ToolGraph(), False
    m = _BLOCK_RE.match(text, start)
    if m is None or text[m.end():].strip():
        return ToolGraph(), False
    try:
        data = json.loads(m.group(1), object_pairs_hook=_reject_duplicate_keys)
    except ValueError:
        return ToolGraph(), False
    if not isinstance(data, list):
        return ToolGraph(), False
    try:
        return ToolGraph.from_json(data), True
    except (ValueError, TypeError):
        return ToolGraph(), False


def extract_reasoning(text: str) -> str:
    return split_transcript(text)[0]


def format_transcript(graph: ToolGraph, reasoning: str = "") -> str:
    body = json.dumps(graph.to_json(), ensure_ascii=False, sort_keys=True)
    head = f"{reasoning.strip()}\n" if reasoning.strip() else ""
    return f"{head}{FENCE_OPEN}\n{body}\n{FENCE_CLOSE}"


def read_truth_file(path) -> list[dict]:
    """Ground-truth JSONL: ``prompt_id``, ``truth`` and optional ``reference_reasoning``."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append({
                    "prompt_id": obj["prompt_id"],
                    "truth": ToolGraph.from_json(obj["truth"]),
                    "reference_reasoning": obj.get("reference_reasoning", ""),
                    "line": lineno,
                })
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def read_prediction_file(path) -> list[dict]:
    """Prediction JSONL: ``prompt_id`` and ``response`` (a raw transcript)."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append({"prompt_id": obj["prompt_id"], "response": str(obj["response"]), "line": lineno})
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows
