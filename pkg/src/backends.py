"""
Gate backends.

Every backend answers `decide(system_prompt, query)` with the same raw text: a
JSON object holding the interpretation and exactly one tool call.

    http   - a chat-completions endpoint through langchain-groq, tools bound
    rule   - deterministic keyword rules, no network
    replay - recorded responses looked up by request digest
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Set, Tuple

from langchain_core.messages import HumanMessage, SystemMessage
from langchain_groq import ChatGroq

from src.config import REPLAY_CASSETTE_PATH, GateSettings, enable_tracing
from src.errors import (
    ClarificationNeededError,
    ConfigError,
    ExportError,
    GateUnavailableError,
    MissingCredentialError,
)
from src.export import write_files
from src.gate import MULTI_TOOL, PAIR_TOOL, SINGLE_TOOL, ExpertCard, build_system_prompt, tool_declarations
from src.objectives import UtilitySpec


class GateBackend(Protocol):
    identity: str

    def decide(self, system_prompt: str, query: str) -> str: ...


def format_response(interpretation: str, tool: str, arguments: Dict) -> str:
    return json.dumps(
        {"interpretation": interpretation, "tool_calls": [{"name": tool, "arguments": arguments}]},
        sort_keys=True,
    )


def request_digest(system_prompt: str, query: str) -> str:
    return hashlib.sha256(f"{system_prompt}\x00{query}".encode("utf-8")).hexdigest()


# --- HTTP ---

class HttpBackend:
    identity = "http"

    def __init__(self, library: Sequence[ExpertCard], settings: Optional[GateSettings] = None):
        self.settings = settings or GateSettings()
        self.tools = tool_declarations(library)
        self._llm = None

    def get_llm(self):
        api_key = os.getenv(self.settings.api_key_env)
        if not api_key:
            raise MissingCredentialError(f"{self.settings.api_key_env} is not set")
        if self._llm is None:
            enable_tracing()
            llm = ChatGroq(
                temperature=0,
                model_name=self.settings.model,
                api_key=api_key,
                base_url=self.settings.base_url,
                timeout=self.settings.timeout_s,
                max_retries=self.settings.retries,
            )
            self._llm = llm.bind_tools(self.tools, tool_choice="required")
        return self._llm

    def decide(self, system_prompt: str, query: str) -> str:
        llm = self.get_llm()
        messages = [SystemMessage(content=system_prompt), HumanMessage(content=query)]
        try:
            response = llm.invoke(messages)
        except Exception as e:
            print(f"❌ Gate call failed after {self.settings.retries + 1} attempts: {e}")
            raise GateUnavailableError(
                f"LLM endpoint {self.settings.base_url} unavailable after {self.settings.retries + 1} attempts: {e}"
            ) from e

        calls = [{"name": c["name"], "arguments": c["args"]} for c in response.tool_calls]
        content = response.content if isinstance(response.content, str) else json.dumps(response.content)
        return json.dumps({"interpretation": content, "tool_calls": calls}, sort_keys=True)


# --- Replay ---

def _library_names(entry_library, all_cards: Sequence[ExpertCard]) -> List[ExpertCard]:
    if entry_library == "all":
        return list(all_cards)
    wanted = set(entry_library)
    return [c for c in all_cards if c.index in wanted or c.name in wanted]


class ReplayBackend:
    """
    Recorded responses keyed by sha256(system prompt, query).

    Cassette entries store the library (indices or "all"), the query and the
    response; digests are computed from the prompt the library produces.
    """

    identity = "replay"

    def __init__(self, all_cards: Sequence[ExpertCard], cassette_path: Optional[Path] = None):
        self.cassette_path = Path(cassette_path or REPLAY_CASSETTE_PATH)
        self._responses: Dict[str, str] = {}
        try:
            with open(self.cassette_path, "r", encoding="utf-8") as f:
                entries = json.load(f)
        except FileNotFoundError as e:
            raise GateUnavailableError(f"Replay cassette not found: {self.cassette_path}") from e
        except json.JSONDecodeError as e:
            raise GateUnavailableError(f"Replay cassette {self.cassette_path} is corrupt: {e}") from e

        for entry in entries:
            cards = sorted(_library_names(entry["library"], all_cards), key=lambda c: c.index)
            response = entry["response"]
            if not isinstance(response, str):
                response = json.dumps(response, sort_keys=True)
            self._responses[request_digest(build_system_prompt(cards), entry["query"])] = response

    def __len__(self) -> int:
        return len(self._responses)

    def decide(self, system_prompt: str, query: str) -> str:
        digest = request_digest(system_prompt, query)
        if digest not in self._responses:
            raise GateUnavailableError(f"No recorded response for query '{query[:60]}' with this library")
        return self._responses[digest]


class RecordingBackend:
    """Wraps a live backend and appends every exchange to a replay cassette."""

    def __init__(self, inner, library: Sequence[ExpertCard], cassette_path: Path):
        self.inner = inner
        self.identity = inner.identity
        self.library = [card.index for card in library]
        self.cassette_path = Path(cassette_path)

    def decide(self, system_prompt: str, query: str) -> str:
        raw = self.inner.decide(system_prompt, query)
        entries = []
        if self.cassette_path.exists():
            try:
                with open(self.cassette_path, "r", encoding="utf-8") as f:
                    entries = json.load(f)
            except json.JSONDecodeError as e:
                raise ExportError(f"Cassette {self.cassette_path} is corrupt, not appending: {e}") from e
        entries.append({"library": self.library, "query": query, "response": raw})
        write_files(self.cassette_path.parent, {self.cassette_path.name: json.dumps(entries, indent=2)})
        print(f"ℹ️  Recorded gate response to {self.cassette_path}")
        return raw


# --- Rules ---

_CLAUSE_SPLIT = re.compile(r"[.;!?]+|(?=\bbut\b)|(?=\bhowever\b)|(?=\bwhile\b)|(?=\bwhereas\b)")

_COMM = re.compile(
    r"\b(communication\w*|transmission\w*|transmit\w*|links?|channels?|wireless|radio|downlink|uplink|stream\w*)\b"
)
_COMP = re.compile(
    r"\b(computing|computation\w*|compute|render\w*|processing|process|cpu|workloads?|tasks?|offload\w*)\b"
)
_JOINT = re.compile(r"\b(joint|jointly|end-to-end)\b")

_UNCERTAIN = re.compile(
    r"\b(uncertain\w*|errors?|imperfect\w*|fluctuat\w*|unpredictab\w*|robust\w*|resilien\w*|noisy|"
    r"inaccura\w*|outdated|impaired|unreliable|volatile)\b"
)
_CERTAIN = re.compile(r"\b(perfect\w*|accurate\w*|regular|reliable|known|precise\w*|ideal|stable)\b")

_DELAY = re.compile(r"\b(latency|latencies|delays?|deadlines?|responsive\w*|finish\w*|lag)\b")
_THROUGHPUT = re.compile(r"\b(throughput|sum[- ]rates?|total rates?|aggregate rates?|capacity|data rates?)\b")
_FAIR = re.compile(r"\b(fair\w*|equal\w*|minimum rates?|min[- ]rates?|worst[- ]user)\b")
_BALANCED = re.compile(r"\b(balanc\w*|proportional\w*|log[- ]rates?)\b")
_WORST_DELAY = re.compile(r"\b(worst\w*|max\w*|extreme\w*|strict\w*|limit\w*|deadlines?|peak)\b")
_TOTAL_DELAY = re.compile(r"\b(total|sum|overall|average|aggregate|mean)\b")
_PER_USER_DELAY = re.compile(r"\b(fair\w*|equal\w*|any user|every user|each user|all users)\b")

_PRIMARY = re.compile(r"\b(main|mainly|primar\w*|priority|most important|above all|must)\b")
_SECONDARY = re.compile(r"\b(but also|decent|reasonabl\w*|not collapse|still|at least|acceptable|secondary)\b")

_FAMILY_WORDS = {
    "sumR": "sum-rate maximization",
    "minR": "minimum-rate (fairness) maximization",
    "logR": "log-rate (balanced) maximization",
    "maxT": "worst-case delay minimization",
    "sumT": "total delay minimization",
}


@dataclass
class _Goal:
    family: str
    domains: Set[str]
    priority: int
    clause: int


def _clause_domains(clause: str) -> Set[str]:
    domains = set()
    if _COMM.search(clause):
        domains.add("comm")
    if _COMP.search(clause):
        domains.add("comp")
    if _JOINT.search(clause):
        domains |= {"comm", "comp"}
    return domains


def _clause_goals(clause: str) -> List[str]:
    families = []
    has_delay = bool(_DELAY.search(clause))
    if _BALANCED.search(clause):
        families.append("logR")
    else:
        if _THROUGHPUT.search(clause):
            families.append("sumR")
        if _FAIR.search(clause) and not has_delay:
            families.append("minR")
    if has_delay:
        if _WORST_DELAY.search(clause):
            families.append("maxT")
        elif _TOTAL_DELAY.search(clause):
            families.append("sumT")
        elif _PER_USER_DELAY.search(clause):
            families.append("maxT")
        else:
            families.append("sumT")
    return families


def _robustness(clauses: List[str]) -> Dict[str, bool]:
    """Domain-specific statements win over statements about the network as a whole; default regular."""
    specific: Dict[str, bool] = {}
    general: Optional[bool] = None
    for clause in clauses:
        if _UNCERTAIN.search(clause):
            status = True
        elif _CERTAIN.search(clause):
            status = False
        else:
            continue
        domains = _clause_domains(clause)
        if domains:
            for d in domains:
                specific[d] = specific.get(d, False) or status
        else:
            general = status if general is None else (general or status)
    return {d: specific.get(d, general if general is not None else False) for d in ("comm", "comp")}


def _realize(goal: _Goal, robust: Dict[str, bool], available: Set[str]) -> List[str]:
    """Expert names for one goal, falling back between joint and per-domain experts by availability."""

    def name(domain: str) -> str:
        rob = robust["comm"] or robust["comp"] if domain == "joint" else robust[domain]
        return UtilitySpec(family=goal.family, domain=domain, robust=rob).name

    if goal.domains == {"comm", "comp"}:
        if name("joint") in available:
            return [name("joint")]
        return [n for n in (name("comm"), name("comp")) if n in available]
    (domain,) = goal.domains
    if name(domain) in available:
        return [name(domain)]
    return [name("joint")] if name("joint") in available else []


def rule_backend_decide(library: Sequence[str], query: str) -> str:
    """
    Keyword rules standing in for the LLM.

    The query is cut into clauses at sentence ends and at contrast words (but,
    however, while, whereas). Each clause may state goals (objective cues),
    the domains they concern and whether estimates are uncertain. Goals without
    a domain of their own take the domains no other goal claimed. Two goals get
    0.6/0.4 when their priorities (primary, plain, secondary) differ, else
    equal weights.
    """
    text = (query or "").strip().lower()
    if not text:
        raise ClarificationNeededError("Empty query: state an objective such as throughput, fairness or delay")

    clauses = [c.strip(" ,") for c in _CLAUSE_SPLIT.split(text) if c and c.strip(" ,")]
    goals: List[_Goal] = []
    for i, clause in enumerate(clauses):
        priority = 1 if _PRIMARY.search(clause) else (-1 if _SECONDARY.search(clause) else 0)
        for family in _clause_goals(clause):
            goals.append(_Goal(family=family, domains=_clause_domains(clause), priority=priority, clause=i))
    if not goals:
        raise ClarificationNeededError(
            f"No optimization objective recognized in '{query[:80]}': mention throughput, fairness, "
            "balance or delay"
        )

    mentioned = set().union(*(_clause_domains(c) for c in clauses))
    explicit = [set(g.domains) for g in goals]
    for i, goal in enumerate(goals):
        if goal.domains:
            continue
        claimed = set().union(*(d for j, d in enumerate(explicit) if j != i))
        goal.domains = (mentioned - claimed) or mentioned or {"comm", "comp"}

    robust = _robustness(clauses)
    available = set(library)

    picks: List[Tuple[str, int]] = []
    for goal in goals:
        for expert in _realize(goal, robust, available):
            if expert not in [p[0] for p in picks]:
                picks.append((expert, goal.priority))
    if not picks:
        raise ClarificationNeededError("No expert in the active library matches the requested objective")

    conditions = "impaired conditions" if robust["comm"] or robust["comp"] else "regular conditions"
    interpretation = (
        "To address your query, we need to focus on "
        + " and ".join(_FAMILY_WORDS[g.family] for g in goals)
        + f" under {conditions}, so the following experts are used: "
        + ", ".join(p[0] for p in picks)
        + "."
    )

    if len(picks) == 1:
        return format_response(interpretation, SINGLE_TOOL, {"expert_name": picks[0][0]})
    if len(picks) == 2:
        (first, p1), (second, p2) = picks
        if p1 != p2:
            if p2 > p1:
                (first, p1), (second, p2) = (second, p2), (first, p1)
            weights = (0.6, 0.4)
        else:
            weights = (0.5, 0.5)
        return format_response(
            interpretation,
            PAIR_TOOL,
            {"expert_name_1": first, "expert_name_2": second, "alpha_1": weights[0], "alpha_2": weights[1]},
        )
    share = 1.0 / len(picks)
    return format_response(
        interpretation, MULTI_TOOL, {"expert_names": [p[0] for p in picks], "alphas": [share] * len(picks)}
    )


class RuleBackend:
    identity = "rule"

    def __init__(self, library: Sequence[ExpertCard]):
        self.library = [card.name for card in library]

    def decide(self, system_prompt: str, query: str) -> str:
        return rule_backend_decide(self.library, query)


def make_backend(
    kind: str,
    library: Sequence[ExpertCard],
    all_cards: Sequence[ExpertCard],
    settings: Optional[GateSettings] = None,
    cassette_path: Optional[Path] = None,
    record: bool = False,
):
    if kind == "rule":
        return RuleBackend(library)
    if kind == "replay":
        return ReplayBackend(all_cards, cassette_path)
    if kind == "http":
        backend = HttpBackend(library, settings)
        if not record:
            return backend
        if cassette_path is None:
            raise ConfigError("Recording gate responses needs a cassette path")
        return RecordingBackend(backend, library, cassette_path)
    raise ValueError(f"Unknown gate backend '{kind}'")
