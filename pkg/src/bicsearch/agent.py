"""Search loop that picks a bug-inducing commit from the graph.

Candidates are ranked by a kind-derived fitness prior (purely ordinal:
blame above blame ancestors above fix ancestors).  A pluggable policy
inspects the graph through four tools and terminates with a decision;
the loop enforces a step budget and a diff-read budget and falls back
to the rank-1 candidate when the policy never decides.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .blame import BlameStats
from .gitrepo import render_unified_diff
from .graph import (
    EDGE_MODIFIES_FILE,
    EDGE_MODIFIES_FUNCTION,
    KIND_BFC,
    KIND_BFC_ANCESTOR,
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    TemporalKnowledgeGraph,
    TkgConfig,
    UnknownNode,
)

#: Ordinal prior per candidate kind; only the ordering matters.
FITNESS_BY_KIND = {
    KIND_BLAME: 1.0,
    KIND_BLAME_ANCESTOR: 0.6,
    KIND_BFC_ANCESTOR: 0.3,
}

TOOL_LIST_CANDIDATES = "list_candidates"
TOOL_TRAVERSE_GRAPH = "traverse_graph"
TOOL_QUERY_NODE = "query_node"
TOOL_READ_NODE_CONTENT = "read_node_content"
TOOL_DECIDE = "decide"

TOOL_SCHEMAS = [
    {
        "name": TOOL_LIST_CANDIDATES,
        "description": "List the ranked candidate commits with fitness "
        "scores and the blame statistics of the fix.",
        "parameters": {"type": "object", "properties": {}, "required": []},
    },
    {
        "name": TOOL_TRAVERSE_GRAPH,
        "description": "List candidate commits related to a commit through "
        "shared functions or shared files, closest matches first.",
        "parameters": {
            "type": "object",
            "properties": {"sha": {"type": "string", "description": "commit sha"}},
            "required": ["sha"],
        },
    },
    {
        "name": TOOL_QUERY_NODE,
        "description": "Show a commit's metadata: message, date, kind, "
        "modified files and functions, and overlap with the fix. "
        "Does not include the diff.",
        "parameters": {
            "type": "object",
            "properties": {"sha": {"type": "string", "description": "commit sha"}},
            "required": ["sha"],
        },
    },
    {
        "name": TOOL_READ_NODE_CONTENT,
        "description": "Read a commit's full diff. A limited number of "
        "reads is allowed per case; spend them carefully.",
        "parameters": {
            "type": "object",
            "properties": {"sha": {"type": "string", "description": "commit sha"}},
            "required": ["sha"],
        },
    },
    {
        "name": TOOL_DECIDE,
        "description": "Commit to a final answer: the candidate judged to "
        "have introduced the bug fixed by the fix commit.",
        "parameters": {
            "type": "object",
            "properties": {
                "sha": {"type": "string", "description": "the chosen commit sha"},
                "reason": {"type": "string", "description": "why this commit"},
            },
            "required": ["sha", "reason"],
        },
    },
]


class BudgetExhausted(Exception):
    """A per-case tool budget has been spent."""


class PolicyFailure(Exception):
    """The decision policy cannot produce another request."""


@dataclass
class AgentBudget:
    """Per-search limits and counters.  Use a fresh instance per run."""

    max_steps: int = 50
    max_diff_reads: int = 3
    steps_used: int = 0
    diff_reads_used: int = 0

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.max_diff_reads < 0:
            raise ValueError("max_diff_reads must be nonnegative")


@dataclass(frozen=True)
class Candidate:
    commit: str
    kind: str
    fitness: float
    rank: int


@dataclass(frozen=True)
class ToolRequest:
    name: str
    args: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolResponse:
    ok: bool
    payload: object = None
    error: Optional[str] = None


@dataclass(frozen=True)
class TranscriptEntry:
    step: int
    request: ToolRequest
    response: ToolResponse
    tokens_in: int = 0
    tokens_out: int = 0

    def to_record(self) -> dict:
        """Persistence shape: response bodies are digested, not stored."""
        return {
            "step": self.step,
            "request": {"name": self.request.name, "args": dict(self.request.args)},
            "response_digest": _digest(self.response),
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }


@dataclass
class Decision:
    predicted_bic: Optional[str]
    reason: str
    steps_used: int
    diff_reads_used: int
    transcript: list[TranscriptEntry]

    @property
    def tokens_in(self) -> int:
        return sum(e.tokens_in for e in self.transcript)

    @property
    def tokens_out(self) -> int:
        return sum(e.tokens_out for e in self.transcript)

    def to_records(self) -> list[dict]:
        """Transcript records plus a final decision record."""
        records = [entry.to_record() for entry in self.transcript]
        records.append(
            {
                "decision": {
                    "predicted_bic": self.predicted_bic,
                    "reason": self.reason,
                    "steps_used": self.steps_used,
                    "diff_reads_used": self.diff_reads_used,
                    "tokens_in": self.tokens_in,
                    "tokens_out": self.tokens_out,
                }
            }
        )
        return records


def _digest(response: ToolResponse) -> str:
    body = json.dumps(
        {"ok": response.ok, "payload": response.payload, "error": response.error},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass
class SearchState:
    """What a policy sees on each consultation."""

    graph: TemporalKnowledgeGraph
    candidates: list[Candidate]
    blame_stats: Optional[BlameStats]
    transcript: list[TranscriptEntry]
    budget: AgentBudget


class Policy(Protocol):
    def next_request(self, state: SearchState) -> ToolRequest: ...


# -- the four tools ---------------------------------------------------------


def list_candidates(
    graph: TemporalKnowledgeGraph,
    cfg: Optional[TkgConfig] = None,
    fitness: Mapping[str, float] = FITNESS_BY_KIND,
) -> tuple[list[Candidate], Optional[BlameStats]]:
    """Rank the non-fix commit nodes and truncate to the top K.

    Order is fitness descending, newer commit first within a tier, sha
    ascending as the final tie-break.  ``fitness`` may be any strictly
    monotone rescaling of the default scores; the reported score always
    comes from the supplied map.
    """
    cfg = cfg or graph.config
    nodes = sorted(
        graph.candidate_nodes(),
        key=lambda n: (-fitness[n.kind], -n.commit_time, n.sha),
    )
    ranked = [
        Candidate(commit=n.sha, kind=n.kind, fitness=fitness[n.kind], rank=i)
        for i, n in enumerate(nodes[: cfg.top_k], start=1)
    ]
    try:
        stats = graph.bfc.blame_stats
    except UnknownNode:
        stats = None
    return ranked, stats


def traverse_graph(graph: TemporalKnowledgeGraph, sha: str) -> list[dict]:
    """Related candidates of ``sha``: function sharers first, then
    file-only sharers, each tier ordered by kind then recency."""
    via_function = graph.neighbors(sha, edge_kinds=(EDGE_MODIFIES_FUNCTION,))
    function_shas = {n.sha for n in via_function}
    related = [
        {"sha": n.sha, "kind": n.kind, "commit_time": n.commit_time, "via": "function"}
        for n in via_function
    ]
    for n in graph.neighbors(sha, edge_kinds=(EDGE_MODIFIES_FILE,)):
        if n.sha not in function_shas:
            related.append(
                {"sha": n.sha, "kind": n.kind, "commit_time": n.commit_time, "via": "file"}
            )
    return related


def query_node(graph: TemporalKnowledgeGraph, sha: str) -> dict:
    """Commit metadata without the diff body."""
    node = graph.commit_node(sha)
    record = {
        "sha": node.sha,
        "kind": node.kind,
        "author_time": node.author_time,
        "commit_time": node.commit_time,
        "message": node.message,
        "files": graph.files_of(sha),
        "functions": [f"{path}::{name}" for path, name in graph.functions_of(sha)],
        "overlap_with_bfc": graph.overlap_with_bfc(sha),
    }
    if node.blame_stats is not None:
        record["blame_stats"] = {
            "total_blame_commits": node.blame_stats.total_blame_commits,
            "single_responsible": node.blame_stats.single_responsible,
            "dominant_commit": node.blame_stats.dominant_commit,
            "dominant_fraction": node.blame_stats.dominant_fraction,
        }
    if node.used_fallback is not None:
        record["used_fallback"] = node.used_fallback
    return record


def read_node_content(
    graph: TemporalKnowledgeGraph, sha: str, budget: AgentBudget
) -> str:
    """The stored diff of a commit, charged against the read budget."""
    node = graph.commit_node(sha)
    if budget.diff_reads_used >= budget.max_diff_reads:
        raise BudgetExhausted(
            f"diff read budget of {budget.max_diff_reads} is spent"
        )
    budget.diff_reads_used += 1
    return render_unified_diff(node.changes)


# -- the loop ---------------------------------------------------------------


def run_search(
    graph: TemporalKnowledgeGraph,
    policy: Policy,
    budget: Optional[AgentBudget] = None,
) -> Decision:
    """Drive a policy over the graph until it decides or budgets run out.

    The ranked candidate list is computed up front and recorded as step
    0 of the transcript; each policy request then costs one step.  A
    decide naming an unknown sha or the fix itself is rejected in-band
    and the loop continues.  On step exhaustion or policy failure the
    rank-1 candidate is returned with the fallback noted in the reason.
    """
    budget = budget or AgentBudget()
    candidates, stats = list_candidates(graph)
    state = SearchState(
        graph=graph,
        candidates=candidates,
        blame_stats=stats,
        transcript=[],
        budget=budget,
    )
    opening = ToolResponse(
        ok=True, payload=_candidates_payload(candidates, stats)
    )
    state.transcript.append(
        TranscriptEntry(step=0, request=ToolRequest(TOOL_LIST_CANDIDATES), response=opening)
    )

    decided: Optional[str] = None
    reason = ""
    failure: Optional[str] = None

    while budget.steps_used < budget.max_steps:
        try:
            request = policy.next_request(state)
        except PolicyFailure as exc:
            failure = str(exc)
            break
        budget.steps_used += 1
        tokens_in, tokens_out = _pop_usage(policy)
        if request.name == TOOL_DECIDE:
            sha = str(request.args.get("sha", ""))
            if graph.has_commit(sha) and graph.commit_node(sha).kind != KIND_BFC:
                decided = sha
                reason = str(request.args.get("reason", ""))
                response = ToolResponse(ok=True, payload={"accepted": sha})
                state.transcript.append(
                    TranscriptEntry(
                        budget.steps_used, request, response, tokens_in, tokens_out
                    )
                )
                break
            response = ToolResponse(
                ok=False,
                error=f"cannot decide on {sha!r}: not a candidate commit",
            )
        else:
            response = _execute(graph, request, budget, candidates, stats)
        state.transcript.append(
            TranscriptEntry(budget.steps_used, request, response, tokens_in, tokens_out)
        )

    if decided is None:
        fallback = candidates[0].commit if candidates else None
        if failure is not None:
            reason = f"fallback to rank-1 candidate: policy failed ({failure})"
        else:
            reason = (
                f"fallback to rank-1 candidate: no decision within "
                f"{budget.max_steps} steps"
            )
        if fallback is None:
            reason = "no candidates available; " + reason
        decided = fallback

    return Decision(
        predicted_bic=decided,
        reason=reason,
        steps_used=budget.steps_used,
        diff_reads_used=budget.diff_reads_used,
        transcript=state.transcript,
    )


def _execute(
    graph: TemporalKnowledgeGraph,
    request: ToolRequest,
    budget: AgentBudget,
    candidates: list[Candidate],
    stats: Optional[BlameStats],
) -> ToolResponse:
    """Run one tool request; every failure is an in-band error."""
    try:
        if request.name == TOOL_LIST_CANDIDATES:
            return ToolResponse(ok=True, payload=_candidates_payload(candidates, stats))
        sha = str(request.args.get("sha", ""))
        if request.name == TOOL_TRAVERSE_GRAPH:
            return ToolResponse(ok=True, payload={"related": traverse_graph(graph, sha)})
        if request.name == TOOL_QUERY_NODE:
            return ToolResponse(ok=True, payload=query_node(graph, sha))
        if request.name == TOOL_READ_NODE_CONTENT:
            return ToolResponse(ok=True, payload={"diff": read_node_content(graph, sha, budget)})
        return ToolResponse(ok=False, error=f"unknown tool {request.name!r}")
    except (UnknownNode, BudgetExhausted) as exc:
        return ToolResponse(ok=False, error=f"{type(exc).__name__}: {exc}")


def _candidates_payload(
    candidates: Sequence[Candidate], stats: Optional[BlameStats]
) -> dict:
    payload: dict = {
        "candidates": [
            {
                "rank": c.rank,
                "sha": c.commit,
                "kind": c.kind,
                "fitness": c.fitness,
            }
            for c in candidates
        ]
    }
    if stats is not None:
        payload["blame_stats"] = {
            "total_blame_commits": stats.total_blame_commits,
            "single_responsible": stats.single_responsible,
            "dominant_commit": stats.dominant_commit,
            "dominant_fraction": stats.dominant_fraction,
        }
    return payload


def _pop_usage(policy: object) -> tuple[int, int]:
    pop = getattr(policy, "pop_usage", None)
    if callable(pop):
        tokens_in, tokens_out = pop()
        return int(tokens_in), int(tokens_out)
    return 0, 0


# -- built-in policies ------------------------------------------------------


class DeterministicTopFitnessPolicy:
    """Immediately decide on the rank-1 candidate."""

    def next_request(self, state: SearchState) -> ToolRequest:
        if not state.candidates:
            raise PolicyFailure("graph has no candidates")
        top = state.candidates[0]
        return ToolRequest(
            TOOL_DECIDE,
            {"sha": top.commit, "reason": f"highest fitness candidate ({top.kind})"},
        )


class ScriptedPolicy:
    """Replay a fixed request list; repeats the last request when the
    script runs out (so a script without a decide spins until the step
    budget ends the loop)."""

    def __init__(self, requests: Sequence[ToolRequest]):
        if not requests:
            raise ValueError("script must contain at least one request")
        self._requests = list(requests)
        self._next = 0

    def next_request(self, state: SearchState) -> ToolRequest:
        if self._next < len(self._requests):
            request = self._requests[self._next]
            self._next += 1
            return request
        return self._requests[-1]


class CallbackPolicy:
    """Adapt a plain function to the policy protocol."""

    def __init__(self, fn: Callable[[SearchState], ToolRequest]):
        self._fn = fn

    def next_request(self, state: SearchState) -> ToolRequest:
        return self._fn(state)
