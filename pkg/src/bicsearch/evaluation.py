"""Benchmark harness: datasets, metrics, paired statistics, ablations.

A case pairs one fix commit with its ground-truth cause set.  Metrics
are micro-aggregated over cases (intersection counts summed before
dividing), and a prediction is credited when it hits any ground-truth
member.  Ablations wire the pipeline at five levels, from raw blame to
the full graph-plus-agent loop.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

from .agent import (
    AgentBudget,
    Decision,
    DeterministicTopFitnessPolicy,
    Policy,
    run_search,
)
from .blame import blame_for, fallback_context_blame, is_blameless
from .categorize import (
    KIND_BFC_ANCESTOR,
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    KIND_BLAMELESS,
    KIND_UNREACHABLE,
)
from .gitrepo import GitRepo
from .graph import (
    TkgConfig,
    build_graph,
    collect_candidates,
    sanitize_message,
)

log = logging.getLogger(__name__)

ABLATION_BLAME_ONLY = "BlameOnly"
ABLATION_BLAME_FALLBACK = "BlameFallback"
ABLATION_TKG_ONLY = "TkgOnly"
ABLATION_AGENT_ONLY = "AgentOnly"
ABLATION_FULL = "FullPipeline"

ABLATION_CONFIGS = (
    ABLATION_BLAME_ONLY,
    ABLATION_BLAME_FALLBACK,
    ABLATION_TKG_ONLY,
    ABLATION_AGENT_ONLY,
    ABLATION_FULL,
)

#: Category priority when one fix carries several ground-truth causes.
CATEGORY_PRIORITY = (
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    KIND_BFC_ANCESTOR,
    KIND_BLAMELESS,
    KIND_UNREACHABLE,
)

#: Discordant-pair count up to which the exact binomial form is used.
EXACT_MCNEMAR_LIMIT = 100


class KeyMismatch(Exception):
    """Prediction and truth maps cover different cases."""


class DatasetError(Exception):
    """The dataset file cannot be read at all."""


@dataclass(frozen=True)
class EvalCase:
    """One fix with its ground-truth cause set."""

    repo: str
    bfc: str
    bics: tuple[str, ...]
    dataset: str = "default"
    language: str = ""

    def __post_init__(self) -> None:
        if not self.bics:
            raise ValueError("ground truth must be nonempty")

    @property
    def case_id(self) -> str:
        return f"{self.dataset}:{self.repo}:{self.bfc}"


def load_dataset(path) -> tuple[list[EvalCase], list[dict]]:
    """Read a line-oriented dataset file.

    Each line is a JSON object with fields repo, bfc, bics (nonempty
    list); dataset and language are optional.  Malformed lines are
    returned as error records with their line numbers; good lines load
    regardless.
    """
    cases: list[EvalCase] = []
    errors: list[dict] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, raw in enumerate(raw_lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("record must be an object")
            bics = record["bics"]
            if not isinstance(bics, list) or not all(
                isinstance(b, str) for b in bics
            ):
                raise ValueError("bics must be a list of strings")
            cases.append(
                EvalCase(
                    repo=str(record["repo"]),
                    bfc=str(record["bfc"]),
                    bics=tuple(bics),
                    dataset=str(record.get("dataset", "default")),
                    language=str(record.get("language", "")),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append({"line": lineno, "error": f"{type(exc).__name__}: {exc}"})
    return cases, errors


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    total_cases: int
    true_positives: int
    predicted_count: int
    truth_count: int
    correctness: dict[str, bool]
    tp_by_category: dict[str, int] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "total_cases": self.total_cases,
            "true_positives": self.true_positives,
            "predicted_count": self.predicted_count,
            "truth_count": self.truth_count,
            "tp_by_category": dict(self.tp_by_category),
        }


def score(
    predictions: Mapping[str, set],
    truth: Mapping[str, set],
) -> MetricsReport:
    """Micro-aggregated precision/recall/F1 with the match-any rule.

    Precision sums |P∩G| over cases divided by summed |P|; recall
    divides by summed |G|.  An empty prediction contributes nothing to
    either numerator or the precision denominator.  F1 is the harmonic
    mean, 0 when both are 0.
    """
    if set(predictions) != set(truth):
        missing = set(truth) - set(predictions)
        extra = set(predictions) - set(truth)
        raise KeyMismatch(
            f"case keys differ (missing={sorted(missing)[:3]}, "
            f"extra={sorted(extra)[:3]})"
        )
    hits = 0
    predicted_count = 0
    truth_count = 0
    correctness: dict[str, bool] = {}
    for key in truth:
        p = set(predictions[key])
        g = set(truth[key])
        overlap = len(p & g)
        hits += overlap
        predicted_count += len(p)
        truth_count += len(g)
        correctness[key] = overlap > 0
    precision = hits / predicted_count if predicted_count else 0.0
    recall = hits / truth_count if truth_count else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        total_cases=len(truth),
        true_positives=hits,
        predicted_count=predicted_count,
        truth_count=truth_count,
        correctness=correctness,
    )


# -- paired statistics ---------------------------------------------------------


@dataclass(frozen=True)
class McNemarResult:
    p_value: float
    a_only: int
    b_only: int
    method: str
    no_discordant_pairs: bool = False


def _align(
    a: Mapping[str, bool], b: Mapping[str, bool]
) -> tuple[list[bool], list[bool]]:
    if set(a) != set(b):
        raise KeyMismatch("correctness maps cover different cases")
    keys = sorted(a)
    return [bool(a[k]) for k in keys], [bool(b[k]) for k in keys]


def _discordant(a: Sequence[bool], b: Sequence[bool]) -> tuple[int, int]:
    if len(a) != len(b):
        raise KeyMismatch("correctness vectors differ in length")
    a_only = sum(1 for x, y in zip(a, b) if x and not y)
    b_only = sum(1 for x, y in zip(a, b) if y and not x)
    return a_only, b_only


def mcnemar(a, b) -> McNemarResult:
    """Two-sided McNemar test on paired correctness outcomes.

    Exact binomial on the discordant pairs up to
    EXACT_MCNEMAR_LIMIT of them; continuity-corrected chi-square
    beyond.  With no discordant pairs the p-value is reported as 1.0
    with a flag.
    """
    if isinstance(a, Mapping):
        a, b = _align(a, b)
    a_only, b_only = _discordant(a, b)
    n = a_only + b_only
    if n == 0:
        return McNemarResult(1.0, 0, 0, method="exact", no_discordant_pairs=True)
    if n <= EXACT_MCNEMAR_LIMIT:
        k = min(a_only, b_only)
        tail = Fraction(sum(math.comb(n, i) for i in range(k + 1)), 2**n)
        p = min(1.0, float(2 * tail))
        return McNemarResult(p, a_only, b_only, method="exact")
    chi2 = (abs(a_only - b_only) - 1) ** 2 / n
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return McNemarResult(p, a_only, b_only, method="chi2")


def cohens_g(a, b) -> float:
    """Effect size: deviation of the discordant split from one half.

    0 when there are no discordant pairs.
    """
    if isinstance(a, Mapping):
        a, b = _align(a, b)
    a_only, b_only = _discordant(a, b)
    n = a_only + b_only
    if n == 0:
        return 0.0
    return abs(b_only / n - 0.5)


def effect_label(g: float) -> str:
    if g >= 0.25:
        return "large"
    if g >= 0.15:
        return "medium"
    if g >= 0.05:
        return "small"
    return "negligible"


# -- ablations -----------------------------------------------------------------


@dataclass
class PipelineResult:
    blame_origins: set[str]
    used_fallback: bool
    decision: Decision
    graph: object = None


def run_pipeline(
    repo: GitRepo,
    bfc: str,
    tkg: TkgConfig,
    policy: Policy,
    budget: Optional[AgentBudget] = None,
    sanitize: bool = True,
) -> PipelineResult:
    """Blame, collect, build, search: the full path for one fix."""
    blame_set = blame_for(repo, bfc)
    kinds = collect_candidates(repo, bfc, blame_set, tkg)
    graph = build_graph(repo, bfc, kinds, tkg, blame_set=blame_set, sanitize=sanitize)
    decision = run_search(graph, policy, budget or AgentBudget())
    return PipelineResult(
        blame_origins=blame_set.origins,
        used_fallback=blame_set.used_fallback,
        decision=decision,
        graph=graph,
    )


@dataclass
class AblationResult:
    config: str
    report: MetricsReport
    predictions: dict[str, set]
    case_records: list[dict]
    errors: list[dict]


def run_ablation(
    config: str,
    cases: Sequence[EvalCase],
    tkg: Optional[TkgConfig] = None,
    budget_factory: Callable[[], AgentBudget] = AgentBudget,
    policy_factory: Optional[Callable[[EvalCase], Policy]] = None,
    text_completer: Optional[Callable[[str], str]] = None,
    max_workers: int = 8,
) -> AblationResult:
    """Evaluate one pipeline wiring over a case list.

    BlameOnly predicts the most recent blame origin and nothing for
    blameless fixes; BlameFallback adds context blame for those;
    TkgOnly takes the rank-1 graph candidate; AgentOnly asks a plain
    text completion (``text_completer`` required) to pick among the
    blame or fallback origins without tools; FullPipeline runs the
    search loop with ``policy_factory`` (defaulting to the
    deterministic rank-1 policy).  Per-case failures become empty
    predictions and error records.
    """
    if config not in ABLATION_CONFIGS:
        raise ValueError(f"unknown ablation config {config!r}")
    if config == ABLATION_AGENT_ONLY and text_completer is None:
        raise ValueError("AgentOnly needs a text_completer")
    tkg = tkg or TkgConfig()
    if policy_factory is None:
        policy_factory = lambda case: DeterministicTopFitnessPolicy()

    def work(case: EvalCase) -> dict:
        record: dict = {
            "case_id": case.case_id,
            "bfc": case.bfc,
            "dataset": case.dataset,
            "predicted": set(),
            "error": None,
        }
        try:
            repo = GitRepo(case.repo)
            if config == ABLATION_BLAME_ONLY:
                record["predicted"] = _most_recent(repo, _plain_blame(repo, case.bfc))
            elif config == ABLATION_BLAME_FALLBACK:
                record["predicted"] = _most_recent(repo, blame_for(repo, case.bfc).origins)
            elif config == ABLATION_TKG_ONLY:
                result = run_pipeline(
                    repo, case.bfc, tkg, DeterministicTopFitnessPolicy(), budget_factory()
                )
                record["predicted"] = _as_set(result.decision.predicted_bic)
            elif config == ABLATION_AGENT_ONLY:
                record["predicted"] = _agent_only_pick(
                    repo, case.bfc, text_completer
                )
            else:
                result = run_pipeline(
                    repo, case.bfc, tkg, policy_factory(case), budget_factory()
                )
                record["predicted"] = _as_set(result.decision.predicted_bic)
                record["steps_used"] = result.decision.steps_used
                record["diff_reads_used"] = result.decision.diff_reads_used
                record["tokens_in"] = result.decision.tokens_in
                record["tokens_out"] = result.decision.tokens_out
                record["reason"] = result.decision.reason
        except Exception as exc:  # recorded as a miss, not fatal
            record["error"] = f"{type(exc).__name__}: {exc}"
            record["predicted"] = set()
        return record

    if cases:
        workers = max(1, min(max_workers, len(cases)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(work, cases))
    else:
        records = []

    predictions = {r["case_id"]: set(r["predicted"]) for r in records}
    truth = {case.case_id: set(case.bics) for case in cases}
    report = score(predictions, truth)
    for record in records:
        record["truth"] = sorted(truth[record["case_id"]])
        record["correct"] = report.correctness[record["case_id"]]
        record["predicted"] = sorted(record["predicted"])
    errors = [
        {"case_id": r["case_id"], "error": r["error"]}
        for r in records
        if r["error"] is not None
    ]
    return AblationResult(
        config=config,
        report=report,
        predictions=predictions,
        case_records=records,
        errors=errors,
    )


def _plain_blame(repo: GitRepo, bfc: str) -> set[str]:
    """Blame origins with no fallback: empty for blameless fixes."""
    sha = repo.read_commit(bfc).id
    if is_blameless(repo.compute_diff(sha)):
        return set()
    from .blame import blame_deleted_lines

    return blame_deleted_lines(repo, sha).origins


def _most_recent(repo: GitRepo, origins: set[str]) -> set[str]:
    if not origins:
        return set()
    best = sorted(origins, key=lambda s: (-repo.read_commit(s).commit_time, s))[0]
    return {best}


def _as_set(sha: Optional[str]) -> set[str]:
    return {sha} if sha else set()


_HEX_RE = re.compile(r"\b[0-9a-f]{7,40}\b")


def _agent_only_pick(
    repo: GitRepo, bfc: str, text_completer: Callable[[str], str]
) -> set[str]:
    """No-tools variant: a plain prompt listing the blame (or fallback)
    origins; the reply's first hex token naming a listed commit wins."""
    record = repo.read_commit(bfc)
    blame_set = blame_for(repo, record.id)
    origins = sorted(
        blame_set.origins, key=lambda s: (-repo.read_commit(s).commit_time, s)
    )
    if not origins:
        return set()
    lines = [
        f"Fix commit {record.id}",
        "Fix message:",
    ]
    for raw in sanitize_message(record.message_raw).rstrip("\n").split("\n"):
        lines.append(f"  {raw}")
    if blame_set.used_fallback:
        lines.append("(blame taken from lines surrounding the added code)")
    lines.append("Candidate commits:")
    for sha in origins:
        subject = repo.read_commit(sha).message_raw.split("\n", 1)[0]
        lines.append(f"  {sha}  {sanitize_message(subject)}")
    reply = text_completer("\n".join(lines))
    for token in _HEX_RE.findall(reply or ""):
        for sha in origins:
            if sha == token or sha.startswith(token):
                return {sha}
    return set()


def breakdown_by_category(
    correctness: Mapping[str, bool],
    case_categories: Mapping[str, Sequence[str]],
) -> dict[str, int]:
    """True positives per category, one category per case by priority.

    A case with several ground-truth causes takes the highest-priority
    category among them (Blame over the ancestors over Blameless).
    """
    counts = {kind: 0 for kind in CATEGORY_PRIORITY}
    for case_id, correct in correctness.items():
        if not correct:
            continue
        kinds = list(case_categories.get(case_id, ()))
        if not kinds:
            continue
        chosen = min(kinds, key=CATEGORY_PRIORITY.index)
        counts[chosen] += 1
    return counts
