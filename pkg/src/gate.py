"""
LLM-enabled gate.

Builds the router system prompt from the expert cards, sends the operator query
to a backend, parses the single tool call it answers with into a selection and
weights, and composes the selected experts' allocations.
"""
from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from langchain_core.prompts import PromptTemplate
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import (
    GateError,
    MalformedToolCallError,
    MissingCredentialError,
    MisalignedAllocationsError,
    UnknownExpertError,
    WeightRangeError,
    WeightSumError,
)
from src.experts import ExpertRecord
from src.logger import log_decision
from src.netmodel import Allocation, NetworkState, SystemConfig, required_compute_power, state_summary

WEIGHT_SUM_TOLERANCE = 0.01
WEIGHT_MATCH_TOLERANCE = 0.1

SINGLE_TOOL = "infer_expert_with_params"
PAIR_TOOL = "infer_two_weighted_experts_with_params"
MULTI_TOOL = "infer_weighted_experts_with_params"

GENERAL_SETUP = (
    "You are a helpful assistant that receive requests in natural language and then, based on the "
    "provided context you must choose one or a combination of suitable expert tools which can resolve "
    "the query asked. You operate as an intelligent assistant embedded within a wireless network "
    "operator environment. You are functioning as a router/gate network that receives a query or a "
    "question from the network operator and your task is to route the question to an optimization expert."
)

ROUTER_PROMPT = PromptTemplate.from_template(
    "{general_setup}\n\n"
    "You have {count} experts that can be used to resolve queries either by their own or on combinations. "
    "This depends on the query if the requested information need to be a combination of the results from "
    "several experts or one expert can fully address the query. This can be solely determined by the "
    "description of each expert area of expertise. Here is a detailed description of the available experts "
    "and their area of specialization:\n\n"
    "{expert_cards}\n\n"
    "The available tools for the router are listed below:\n\n"
    "{tools}"
)

TOOL_DESCRIPTIONS = {
    SINGLE_TOOL: (
        "This function take a string as expert name and based on this input it infers the correct expert "
        "with given parameters and return a tuple of three parameters. The expert name is a string that can "
        "be chosen of a set of specific available expert names."
    ),
    PAIR_TOOL: (
        "This function take two strings as expert names and two numeric parameters alpha_1 and alpha_2 where "
        "alpha_1 + alpha_2 = 1. Based on these input parameters the function combine the inference results "
        "from the two given experts with the weighting parameters alpha_1 and alpha_2 and return a tuple of "
        "three parameters. The expert name is a string that can be chosen of a set of specific available "
        "expert names."
    ),
    MULTI_TOOL: (
        "Experimental. This function take a list of expert names and a list of weights alphas of the same "
        "length that sum to 1 and combines the inference results of all listed experts with these weights."
    ),
}


class ExpertCard(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    name: str
    description: str

    @classmethod
    def from_record(cls, record: ExpertRecord) -> "ExpertCard":
        return cls(index=record.index, name=record.name, description=record.description)


def library_cards(records: Iterable[ExpertRecord], indices: Optional[Iterable[int]] = None) -> List[ExpertCard]:
    """Cards for the active library in registry order."""
    wanted = set(indices) if indices is not None else None
    cards = [ExpertCard.from_record(r) for r in records if wanted is None or r.index in wanted]
    return sorted(cards, key=lambda c: c.index)


def build_system_prompt(library: Sequence[ExpertCard]) -> str:
    """General setup, numbered expert cards, then the two normative tools. Pure in the library."""
    if not library:
        raise ValueError("The gate needs at least one expert in its library")
    cards = "\n".join(f"{card.index}) {card.name}: {card.description}" for card in library)
    tools = "\n".join(f"{name}: {TOOL_DESCRIPTIONS[name]}" for name in (SINGLE_TOOL, PAIR_TOOL))
    return ROUTER_PROMPT.format(general_setup=GENERAL_SETUP, count=len(library), expert_cards=cards, tools=tools)


def tool_declarations(library: Sequence[ExpertCard], include_experimental: bool = False) -> List[Dict[str, Any]]:
    """Function-calling schemas for the tools, with expert names restricted to the active library."""
    names = [card.name for card in library]
    name_schema = {"type": "string", "enum": names}
    declarations = [
        {
            "type": "function",
            "function": {
                "name": SINGLE_TOOL,
                "description": TOOL_DESCRIPTIONS[SINGLE_TOOL],
                "parameters": {
                    "type": "object",
                    "properties": {"expert_name": name_schema},
                    "required": ["expert_name"],
                },
            },
        },
        {
            "type": "function",
            "function": {
                "name": PAIR_TOOL,
                "description": TOOL_DESCRIPTIONS[PAIR_TOOL],
                "parameters": {
                    "type": "object",
                    "properties": {
                        "expert_name_1": name_schema,
                        "expert_name_2": name_schema,
                        "alpha_1": {"type": "number", "minimum": 0, "maximum": 1},
                        "alpha_2": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                    "required": ["expert_name_1", "expert_name_2", "alpha_1", "alpha_2"],
                },
            },
        },
    ]
    if include_experimental:
        declarations.append(
            {
                "type": "function",
                "function": {
                    "name": MULTI_TOOL,
                    "description": TOOL_DESCRIPTIONS[MULTI_TOOL],
                    "parameters": {
                        "type": "object",
                        "properties": {
                            "expert_names": {"type": "array", "items": name_schema},
                            "alphas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                        },
                        "required": ["expert_names", "alphas"],
                    },
                },
            }
        )
    return declarations


class GateDecision(BaseModel):
    """Selection and simplex weights over the active library (in library order)."""

    library: List[str]
    selection: List[int]
    weights: List[float]
    interpretation: str = ""
    transcript: Dict[str, Any] = Field(default_factory=dict)
    latency_s: float = 0.0

    @model_validator(mode="after")
    def _check_simplex(self):
        if not (len(self.library) == len(self.selection) == len(self.weights)):
            raise ValueError("library, selection and weights must have the same length")
        if not any(self.selection):
            raise ValueError("at least one expert must be selected")
        for a, w in zip(self.selection, self.weights):
            if a not in (0, 1) or w < 0:
                raise ValueError("selection must be binary and weights non-negative")
            if (w > 0) != (a == 1):
                raise ValueError("an expert has positive weight exactly when it is selected")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to one, got {sum(self.weights)}")
        return self

    @property
    def selected_names(self) -> List[str]:
        return [n for n, a in zip(self.library, self.selection) if a]

    @property
    def selected_weights(self) -> List[float]:
        return [w for w, a in zip(self.weights, self.selection) if a]

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.selected_names, self.selected_weights))


# --- Parsing ---

def extract_payload(raw: str) -> Dict[str, Any]:
    """Finds the JSON object in a backend response, fenced or bare."""
    if not isinstance(raw, str) or not raw.strip():
        raise MalformedToolCallError("Empty backend response")
    match = re.search(r"```(?:json)?\s*({.*?})\s*```", raw, re.DOTALL)
    if not match:
        match = re.search(r"({.*})", raw, re.DOTALL)
    if not match:
        raise MalformedToolCallError("No JSON object in backend response")
    try:
        payload = json.loads(match.group(1))
    except json.JSONDecodeError as e:
        raise MalformedToolCallError(f"Backend response is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise MalformedToolCallError("Backend response must be a JSON object")
    return payload


def _weight(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise MalformedToolCallError(f"Weight {value!r} is not a number")
    try:
        w = float(value)
    except ValueError as e:
        raise MalformedToolCallError(f"Weight {value!r} is not a number") from e
    if not np.isfinite(w) or w < 0 or w > 1:
        raise WeightRangeError(f"Weight {w} outside [0, 1]")
    return w


def _call_arguments(call: Dict[str, Any]) -> Dict[str, Any]:
    args = call.get("arguments", call.get("args", {}))
    if isinstance(args, str):
        try:
            args = json.loads(args)
        except json.JSONDecodeError as e:
            raise MalformedToolCallError(f"Tool arguments are not valid JSON: {e}") from e
    if not isinstance(args, dict):
        raise MalformedToolCallError("Tool arguments must be an object")
    return args


def parse_tool_call(raw: str, library: Sequence[str]) -> GateDecision:
    """
    Turns a backend response into a GateDecision over `library` (expert names in library order).

    Weights within 0.01 of summing to one are renormalized; zero-weight entries
    are dropped from the selection.
    """
    payload = extract_payload(raw)
    calls = payload.get("tool_calls")
    if calls is None and "name" in payload:
        calls = [payload]
    if not isinstance(calls, list) or len(calls) != 1 or not isinstance(calls[0], dict):
        raise MalformedToolCallError(f"Expected exactly one tool call, got {calls!r:.200}")
    call = calls[0]
    tool = call.get("name")
    args = _call_arguments(call)

    try:
        if tool == SINGLE_TOOL:
            names, weights = [args["expert_name"]], [1.0]
        elif tool == PAIR_TOOL:
            names = [args["expert_name_1"], args["expert_name_2"]]
            weights = [_weight(args["alpha_1"]), _weight(args["alpha_2"])]
        elif tool == MULTI_TOOL:
            if not isinstance(args["expert_names"], list) or not isinstance(args["alphas"], list):
                raise MalformedToolCallError(f"Tool call {tool} needs lists of expert names and alphas")
            names, weights = list(args["expert_names"]), [_weight(a) for a in args["alphas"]]
        else:
            raise MalformedToolCallError(f"Unknown tool '{tool}'")
    except (KeyError, TypeError) as e:
        raise MalformedToolCallError(f"Tool call {tool} has missing or malformed arguments: {e}") from e

    if not names or len(names) != len(weights):
        raise MalformedToolCallError("Expert names and weights do not line up")
    for name in names:
        if not isinstance(name, str) or name not in library:
            raise UnknownExpertError(f"Expert '{name}' is not in the active library")
    if len(set(names)) != len(names):
        raise MalformedToolCallError(f"Expert named twice in one call: {names}")

    total = sum(weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise WeightSumError(f"Weights {weights} sum to {total}, not 1")
    by_name = {n: w / total for n, w in zip(names, weights) if w > 0}

    return GateDecision(
        library=list(library),
        selection=[1 if n in by_name else 0 for n in library],
        weights=[by_name.get(n, 0.0) for n in library],
        interpretation=str(payload.get("interpretation", "") or ""),
    )


def decide(
    backend,
    library: Sequence[ExpertCard],
    query: str,
    state: Optional[NetworkState] = None,
    append_state_summary: bool = False,
    log_file: Optional[Path] = None,
) -> GateDecision:
    """
    One gate decision: prompt, backend call, parse. The transcript and latency are
    attached; with a log file every outcome (also failures) is logged.
    """
    prompt = build_system_prompt(library)
    names = [card.name for card in library]
    if append_state_summary and state is not None:
        summary = ", ".join(f"{k}={v:.4g}" for k, v in state_summary(state).items())
        query = f"{query}\nCurrent network state: {summary}"

    start = time.perf_counter()
    raw = None
    try:
        raw = backend.decide(prompt, query)
        latency = time.perf_counter() - start
        decision = parse_tool_call(raw, names)
    except GateError as e:
        if log_file:
            log_decision(query, backend.identity, None, False, str(e), time.perf_counter() - start, raw, log_file)
        raise

    decision = decision.model_copy(
        update={
            "transcript": {"backend": backend.identity, "system_prompt": prompt, "query": query, "response": raw},
            "latency_s": latency,
        }
    )
    if log_file:
        log_decision(query, backend.identity, decision.as_dict(), True, None, latency, raw, log_file)
    return decision


# --- Combination ---

def combine_weighted(weights: Sequence[float], allocations: Sequence[Allocation], config: SystemConfig) -> Allocation:
    """
    Convex combination of p_tx and f_co; p_co follows from the combined
    frequencies. The kind is the union of the members' active fields.
    """
    if len(weights) != len(allocations) or not allocations:
        raise MisalignedAllocationsError(
            f"{len(allocations)} allocations for {len(weights)} weights"
        )
    p_tx = sum(w * a.p_tx for w, a in zip(weights, allocations))
    f_co = sum(w * a.f_co for w, a in zip(weights, allocations))

    kinds = {a.kind for a in allocations}
    kind = kinds.pop() if len(kinds) == 1 else "joint"
    p_co = required_compute_power(f_co, config) if kind != "comm" else np.zeros(np.shape(p_tx)[:-1])
    return Allocation(p_tx=p_tx, p_co=p_co, f_co=f_co, kind=kind)


def combine(decision: GateDecision, allocations: Sequence[Allocation], config: SystemConfig) -> Allocation:
    """`allocations` holds one allocation per selected expert, in library order."""
    if len(allocations) != len(decision.selected_names):
        raise MisalignedAllocationsError(
            f"Decision selects {len(decision.selected_names)} experts, got {len(allocations)} allocations"
        )
    return combine_weighted(decision.selected_weights, allocations, config)


# --- Accuracy ---

class GateFixture(BaseModel):
    query: str
    experts: List[str]
    weights: List[float]
    source: str = ""
    note: str = ""

    @model_validator(mode="after")
    def _aligned(self):
        if len(self.experts) != len(self.weights) or not self.experts:
            raise ValueError("fixture needs one weight per expert")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.experts, self.weights))


@dataclass
class FixtureVerdict:
    query: str
    expected: Dict[str, float]
    predicted: Optional[Dict[str, float]]
    verdict: str  # full-match | selection-exact | failure
    error: Optional[str] = None
    latency_s: float = 0.0

    @property
    def selection_exact(self) -> bool:
        return self.verdict in ("full-match", "selection-exact")


@dataclass
class AccuracyReport:
    verdicts: List[FixtureVerdict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.verdicts)

    @property
    def selection_exact_rate(self) -> float:
        return sum(v.selection_exact for v in self.verdicts) / self.total if self.total else 0.0

    @property
    def full_match_rate(self) -> float:
        return sum(v.verdict == "full-match" for v in self.verdicts) / self.total if self.total else 0.0

    @property
    def failures(self) -> int:
        return sum(v.verdict == "failure" for v in self.verdicts)

    @property
    def mean_latency_s(self) -> float:
        return float(np.mean([v.latency_s for v in self.verdicts])) if self.verdicts else 0.0

    def summary(self) -> Dict[str, Any]:
        return {
            "fixtures": self.total,
            "selection_exact_rate": self.selection_exact_rate,
            "full_match_rate": self.full_match_rate,
            "failures": self.failures,
            "verdicts": [
                {"query": v.query, "expected": v.expected, "predicted": v.predicted, "verdict": v.verdict, "error": v.error}
                for v in self.verdicts
            ],
        }


def load_fixtures(path: Path) -> List[GateFixture]:
    with open(path, "r", encoding="utf-8") as f:
        return [GateFixture.model_validate(entry) for entry in json.load(f)]


def judge(expected: Dict[str, float], predicted: Dict[str, float]) -> str:
    if set(expected) != set(predicted):
        return "failure"
    if all(abs(expected[n] - predicted[n]) <= WEIGHT_MATCH_TOLERANCE + 1e-12 for n in expected):
        return "full-match"
    return "selection-exact"


def evaluate_gate_accuracy(
    backend,
    fixtures: Sequence[GateFixture],
    library: Sequence[ExpertCard],
    log_file: Optional[Path] = None,
) -> AccuracyReport:
    """
    Scores the backend against reference decisions.

    A backend or parse error is a failure verdict; a missing credential stops the run.
    """
    if not fixtures:
        raise ValueError("Accuracy evaluation needs at least one fixture")
    report = AccuracyReport()
    for fixture in fixtures:
        expected = fixture.as_dict()
        try:
            decision = decide(backend, library, fixture.query, log_file=log_file)
        except MissingCredentialError:
            raise
        except GateError as e:
            report.verdicts.append(FixtureVerdict(fixture.query, expected, None, "failure", error=str(e)))
            continue
        predicted = decision.as_dict()
        report.verdicts.append(
            FixtureVerdict(fixture.query, expected, predicted, judge(expected, predicted), latency_s=decision.latency_s)
        )
    return report
