"""Operator entry point.

Subcommands: identify (one fix), evaluate (dataset benchmark),
categorize (ground-truth category study), ablate (pipeline variants
with paired statistics), graph-export (serialized graph for one fix),
and fetch (explicit cloning of dataset repositories).

Every command is deterministic given its inputs, configuration, and
cassette; report files carry a digest of the effective configuration.
Endpoint credentials are read from environment variables only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import report as reporting
from .agent import (
    AgentBudget,
    DeterministicTopFitnessPolicy,
    ScriptedPolicy,
    ToolRequest,
    TOOL_QUERY_NODE,
    run_search,
)
from .blame import blame_for
from .categorize import category_report
from .evaluation import (
    ABLATION_AGENT_ONLY,
    ABLATION_CONFIGS,
    ABLATION_FULL,
    DatasetError,
    EvalCase,
    cohens_g,
    effect_label,
    load_dataset,
    mcnemar,
    run_ablation,
    run_pipeline,
    score,
)
from .gitrepo import GitError, GitRepo
from .graph import (
    CommitNode,
    KIND_BFC,
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    TemporalKnowledgeGraph,
    TkgConfig,
    build_graph,
    collect_candidates,
    sanitize_message,
)
from .llm import (
    Cassette,
    ENV_MODEL,
    HttpTransport,
    LlmClient,
    LlmConfig,
    LlmError,
    LlmPolicy,
    RecordingTransport,
    ReplayTransport,
    make_text_completer,
)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    tkg: TkgConfig
    max_steps: int
    max_diff_reads: int
    policy: str
    cassette: Optional[str]
    record: Optional[str]
    workers: int
    out: Path
    sanitize: bool

    def budget(self) -> AgentBudget:
        return AgentBudget(max_steps=self.max_steps, max_diff_reads=self.max_diff_reads)


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        tkg=TkgConfig(
            max_depth=args.max_depth,
            candidate_cap=args.candidate_cap,
            top_k=args.top_k,
        ),
        max_steps=args.max_steps,
        max_diff_reads=args.max_diff_reads,
        policy=getattr(args, "policy", "deterministic"),
        cassette=getattr(args, "cassette", None),
        record=getattr(args, "record", None),
        workers=args.workers,
        out=Path(args.out),
        sanitize=not args.no_sanitize,
    )


def config_digest(cfg: RunConfig, policy_identity: str) -> str:
    payload = {
        "max_depth": cfg.tkg.max_depth,
        "candidate_cap": cfg.tkg.candidate_cap,
        "top_k": cfg.tkg.top_k,
        "max_steps": cfg.max_steps,
        "max_diff_reads": cfg.max_diff_reads,
        "policy": policy_identity,
        "sanitize": cfg.sanitize,
    }
    body = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(body).hexdigest()[:16]


@dataclass
class PolicyKit:
    factory: Callable[[Optional[EvalCase]], object]
    text_completer: Optional[Callable[[str], str]]
    identity: str
    finalize: Callable[[], None]


def _build_policy(cfg: RunConfig) -> PolicyKit:
    """Wire the decision backend selected by --policy.

    The identity string feeds the config digest: it names the model for
    live runs and pins the cassette content for replay, so cached
    results are never reused across backends.
    """
    if cfg.policy == "deterministic":
        return PolicyKit(
            factory=lambda case=None: DeterministicTopFitnessPolicy(),
            text_completer=None,
            identity="deterministic",
            finalize=lambda: None,
        )
    if cfg.policy == "replay":
        if not cfg.cassette:
            raise UsageError("--policy replay needs --cassette")
        cassette = Cassette.load(cfg.cassette)
        model = cassette.model or os.environ.get(ENV_MODEL, "replay")
        client = LlmClient(
            LlmConfig(api_base="replay://local", model=model, api_key="unused"),
            transport=ReplayTransport(cassette),
        )
        policy = LlmPolicy(client)
        content_key = hashlib.sha256(cassette.dumps().encode("utf-8")).hexdigest()[:12]
        return PolicyKit(
            factory=lambda case=None: policy,
            text_completer=make_text_completer(client),
            identity=f"replay:{content_key}",
            finalize=lambda: None,
        )
    # live endpoint, credentials from the environment only
    llm_cfg = LlmConfig.from_env()
    transport = HttpTransport(llm_cfg)
    finalize: Callable[[], None] = lambda: None
    if cfg.record:
        cassette = Cassette(model=llm_cfg.model)
        recording = RecordingTransport(transport, cassette)
        transport = recording
        record_path = cfg.record

        def finalize() -> None:
            cassette.save(record_path)
            log.info("recorded %d exchange(s) to %s", len(cassette.entries), record_path)

    client = LlmClient(llm_cfg, transport)
    policy = LlmPolicy(client)
    return PolicyKit(
        factory=lambda case=None: policy,
        text_completer=make_text_completer(client),
        identity=f"llm:{llm_cfg.model}",
        finalize=finalize,
    )


class UsageError(Exception):
    pass


# -- subcommands --------------------------------------------------------------


def cmd_identify(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    kit = _build_policy(cfg)
    digest = config_digest(cfg, kit.identity)
    repo = GitRepo(args.repo)
    sha = repo.read_commit(args.bfc).id
    result = run_pipeline(
        repo, sha, cfg.tkg, kit.factory(None), cfg.budget(), sanitize=cfg.sanitize
    )
    decision = result.decision
    kind = ""
    if decision.predicted_bic and result.graph.has_commit(decision.predicted_bic):
        kind = result.graph.commit_node(decision.predicted_bic).kind

    cfg.out.mkdir(parents=True, exist_ok=True)
    transcript_path = cfg.out / f"transcript_{sha[:12]}.jsonl"
    records = [{"config_digest": digest, "bfc": sha}]
    records.extend(decision.to_records())
    reporting.write_jsonl(transcript_path, records)

    for label, value in (
        ("config", digest),
        ("bfc", sha),
        ("predicted_bic", decision.predicted_bic or "-"),
        ("kind", kind or "-"),
        ("used_fallback", str(result.used_fallback).lower()),
        ("steps_used", decision.steps_used),
        ("diff_reads_used", decision.diff_reads_used),
        ("reason", decision.reason),
        ("transcript", transcript_path),
    ):
        print(f"{label}\t{value}")
    kit.finalize()
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.self_check:
        return _self_check()
    if args.no_sanitize:
        print(
            "refusing --no-sanitize in benchmark mode: leakage prevention "
            "is mandatory under evaluate",
            file=sys.stderr,
        )
        return 2
    if not args.dataset:
        print("evaluate needs a dataset file (or --self-check)", file=sys.stderr)
        return 2
    cfg = _run_config(args)
    kit = _build_policy(cfg)
    digest = config_digest(cfg, kit.identity)
    cases, line_errors = load_dataset(args.dataset)
    for err in line_errors:
        print(f"dataset line {err['line']} rejected: {err['error']}", file=sys.stderr)

    cfg.out.mkdir(parents=True, exist_ok=True)
    cache_path = cfg.out / "cache.jsonl"
    cached: dict[str, dict] = {}
    if cache_path.exists():
        for record in reporting.read_jsonl(cache_path):
            if record.get("config") == digest:
                cached[record["case_id"]] = record

    pending = [case for case in cases if case.case_id not in cached]
    result = run_ablation(
        ABLATION_FULL,
        pending,
        tkg=cfg.tkg,
        budget_factory=cfg.budget,
        policy_factory=kit.factory,
        max_workers=cfg.workers,
    )
    fresh: dict[str, dict] = {}
    for record in result.case_records:
        record["config"] = digest
        fresh[record["case_id"]] = record
    if fresh:
        with open(cache_path, "a", encoding="utf-8") as fh:
            for case in pending:
                fh.write(json.dumps(fresh[case.case_id], sort_keys=True, default=str))
                fh.write("\n")

    merged = [
        cached.get(case.case_id) or fresh[case.case_id] for case in cases
    ]
    predictions = {r["case_id"]: set(r["predicted"]) for r in merged}
    truth = {case.case_id: set(case.bics) for case in cases}
    metrics = score(predictions, truth)

    reporting.write_jsonl(cfg.out / "cases.jsonl", merged)
    report_doc = {
        "config_digest": digest,
        "metrics": metrics.to_record(),
        "case_errors": [
            {"case_id": r["case_id"], "error": r["error"]}
            for r in merged
            if r.get("error")
        ],
        "dataset_errors": line_errors,
    }
    with open(cfg.out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    header, rows = reporting.metrics_rows({"FullPipeline": metrics.to_record()})
    reporting.write_tsv(
        cfg.out / "metrics.tsv", header, rows, comment=f"config {digest}"
    )
    reporting.render_metrics_figure(
        {"FullPipeline": metrics.to_record()}, cfg.out / "metrics.png", digest
    )
    print(
        f"cases\t{metrics.total_cases}\n"
        f"precision\t{metrics.precision:.6f}\n"
        f"recall\t{metrics.recall:.6f}\n"
        f"f1\t{metrics.f1:.6f}"
    )
    kit.finalize()
    return 0


def cmd_categorize(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    digest = config_digest(cfg, "categorize")
    cases, line_errors = load_dataset(args.dataset)
    for err in line_errors:
        print(f"dataset line {err['line']} rejected: {err['error']}", file=sys.stderr)
    result = category_report(
        cases, max_depth=cfg.tkg.max_depth, max_workers=cfg.workers
    )
    for err in result["errors"]:
        print(f"case {err['bfc'][:12]}/{err['bic'][:12]} failed: {err['error']}", file=sys.stderr)

    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = [
        [r["dataset"], r["bfc"], r["bic"], r["kind"], r["depth"], r["fallback_hit"]]
        for r in result["records"]
    ]
    reporting.write_tsv(
        cfg.out / "categories.tsv",
        ["dataset", "bfc", "bic", "category", "depth", "fallback_hit"],
        rows,
        comment=f"config {digest}",
    )
    with open(cfg.out / "category_report.json", "w", encoding="utf-8") as fh:
        json.dump({"config_digest": digest, **result}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    curve_rows = []
    for kind in sorted(result["coverage_by_depth"]):
        for depth, coverage in result["coverage_by_depth"][kind]:
            curve_rows.append([kind, int(depth), float(coverage)])
    reporting.write_tsv(
        cfg.out / "depth_coverage.tsv",
        ["category", "depth", "coverage"],
        curve_rows,
        comment=f"config {digest}",
    )
    reporting.render_depth_coverage_figure(
        result["coverage_by_depth"],
        cfg.out / "depth_coverage.png",
        max_depth=cfg.tkg.max_depth,
        config_digest=digest,
    )
    if result["datasets"]:
        reporting.render_category_figure(
            result["datasets"], cfg.out / "categories.png", digest
        )

    overall = result["overall"]
    print(f"pairs\t{result['total_pairs']}")
    for kind, count in overall["counts"].items():
        pct = overall["percentages"][kind]
        print(f"{kind}\t{count}\t{pct:.1f}%")
    fb = result["blameless_fallback"]
    print(f"blameless_fallback_hits\t{fb['hits']}/{fb['total']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.no_sanitize:
        print(
            "refusing --no-sanitize in benchmark mode: leakage prevention "
            "is mandatory under ablate",
            file=sys.stderr,
        )
        return 2
    cfg = _run_config(args)
    configs = [c.strip() for c in args.configs.split(",") if c.strip()]
    unknown = [c for c in configs if c not in ABLATION_CONFIGS]
    if unknown:
        print(
            f"unknown ablation config(s): {', '.join(unknown)} "
            f"(choose from {', '.join(ABLATION_CONFIGS)})",
            file=sys.stderr,
        )
        return 2
    kit = _build_policy(cfg)
    if ABLATION_AGENT_ONLY in configs and kit.text_completer is None:
        print(
            "AgentOnly needs a text completion backend; use --policy llm "
            "or --policy replay",
            file=sys.stderr,
        )
        return 2
    digest = config_digest(cfg, kit.identity)
    cases, line_errors = load_dataset(args.dataset)
    for err in line_errors:
        print(f"dataset line {err['line']} rejected: {err['error']}", file=sys.stderr)

    results = {}
    for config in configs:
        results[config] = run_ablation(
            config,
            cases,
            tkg=cfg.tkg,
            budget_factory=cfg.budget,
            policy_factory=kit.factory,
            text_completer=kit.text_completer,
            max_workers=cfg.workers,
        )

    pair_rows = []
    pair_records = []
    for i, name_a in enumerate(configs):
        for name_b in configs[i + 1 :]:
            a = results[name_a].report.correctness
            b = results[name_b].report.correctness
            test = mcnemar(a, b)
            g = cohens_g(a, b)
            pair_rows.append(
                [
                    name_a,
                    name_b,
                    test.a_only,
                    test.b_only,
                    test.p_value,
                    test.method,
                    g,
                    effect_label(g),
                    test.no_discordant_pairs,
                ]
            )
            pair_records.append(
                {
                    "a": name_a,
                    "b": name_b,
                    "a_only": test.a_only,
                    "b_only": test.b_only,
                    "p_value": test.p_value,
                    "method": test.method,
                    "cohens_g": g,
                    "effect": effect_label(g),
                    "no_discordant_pairs": test.no_discordant_pairs,
                }
            )

    cfg.out.mkdir(parents=True, exist_ok=True)
    metric_records = {name: results[name].report.to_record() for name in configs}
    header, rows = reporting.metrics_rows(metric_records)
    reporting.write_tsv(cfg.out / "ablation.tsv", header, rows, comment=f"config {digest}")
    reporting.write_tsv(
        cfg.out / "pairs.tsv",
        [
            "config_a",
            "config_b",
            "a_only",
            "b_only",
            "p_value",
            "method",
            "cohens_g",
            "effect",
            "no_discordant_pairs",
        ],
        pair_rows,
        comment=f"config {digest}",
    )
    doc = {
        "config_digest": digest,
        "metrics": metric_records,
        "pairs": pair_records,
        "errors": {name: results[name].errors for name in configs},
        "dataset_errors": line_errors,
    }
    with open(cfg.out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    reporting.render_metrics_figure(metric_records, cfg.out / "ablation.png", digest)

    for name in configs:
        r = results[name].report
        print(
            f"{name}\tprecision={r.precision:.6f}\trecall={r.recall:.6f}\t"
            f"f1={r.f1:.6f}"
        )
    for record in pair_records:
        print(
            f"{record['a']} vs {record['b']}\tp={record['p_value']:.6f}\t"
            f"g={record['cohens_g']:.6f} ({record['effect']})"
            + ("\tno discordant pairs" if record["no_discordant_pairs"] else "")
        )
    kit.finalize()
    return 0


def cmd_graph_export(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    repo = GitRepo(args.repo)
    sha = repo.read_commit(args.bfc).id
    blame_set = blame_for(repo, sha)
    kinds = collect_candidates(repo, sha, blame_set, cfg.tkg)
    graph = build_graph(
        repo, sha, kinds, cfg.tkg, blame_set=blame_set, sanitize=cfg.sanitize
    )
    if args.output:
        target = Path(args.output)
        if target.parent != Path("."):
            target.parent.mkdir(parents=True, exist_ok=True)
    else:
        cfg.out.mkdir(parents=True, exist_ok=True)
        target = cfg.out / f"graph_{sha[:12]}.json"
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(graph.dumps())
        fh.write("\n")
    print(f"graph\t{target}")
    print(f"commits\t{len(graph.commit_nodes())}")
    print(f"files\t{len(graph.file_nodes())}")
    print(f"functions\t{len(graph.function_nodes())}")
    return 0


def cmd_fetch(args: argparse.Namespace) -> int:
    cases, line_errors = load_dataset(args.dataset)
    for err in line_errors:
        print(f"dataset line {err['line']} rejected: {err['error']}", file=sys.stderr)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    refs: list[str] = []
    for case in cases:
        if case.repo not in refs:
            refs.append(case.repo)
    failures = 0
    for ref in refs:
        if "://" in ref or ref.startswith("git@"):
            name = ref.rstrip("/").rsplit("/", 1)[-1]
            if name.endswith(".git"):
                name = name[:-4]
            target = dest / name
            if target.exists():
                print(f"exists\t{target}")
                continue
            proc = subprocess.run(
                ["git", "clone", "--quiet", ref, str(target)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                failures += 1
                print(f"clone failed for {ref}: {proc.stderr.strip()}", file=sys.stderr)
            else:
                print(f"cloned\t{target}")
        elif Path(ref).is_dir():
            print(f"local\t{ref}")
        else:
            failures += 1
            print(f"missing local repository: {ref}", file=sys.stderr)
    return 1 if failures else 0


# -- self-check ----------------------------------------------------------------


def _synthetic_graph() -> TemporalKnowledgeGraph:
    graph = TemporalKnowledgeGraph(TkgConfig())
    graph.add_commit(
        CommitNode("a" * 40, KIND_BLAME, 100, 100, "blame commit", ())
    )
    graph.add_commit(
        CommitNode("b" * 40, KIND_BLAME_ANCESTOR, 50, 50, "older commit", ())
    )
    graph.add_commit(CommitNode("c" * 40, KIND_BFC, 200, 200, "the fix", ()))
    return graph


def _self_check() -> int:
    """Fast in-process invariant checks; nonzero exit on any failure."""
    from .agent import list_candidates

    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"{'ok' if ok else 'FAIL'} - {name}")
        if not ok:
            failures += 1

    check(
        "sanitize drops Fixes: trailer",
        sanitize_message('fix overflow\n\nFixes: abc1234 ("mm: old patch")')
        == "fix overflow\n",
    )
    check(
        "sanitize masks inline sha",
        sanitize_message("see commit deadbeefcafe for context")
        == "see commit <SHA> for context",
    )
    msg = "Reverts: deadbeef\nkeep this line"
    check("sanitize idempotent", sanitize_message(sanitize_message(msg)) == sanitize_message(msg))

    graph = _synthetic_graph()
    ranked, _ = list_candidates(graph)
    check(
        "fitness ordering blame first",
        [c.kind for c in ranked] == [KIND_BLAME, KIND_BLAME_ANCESTOR]
        and [c.fitness for c in ranked] == [1.0, 0.6]
        and [c.rank for c in ranked] == [1, 2],
    )

    metrics = score({"case": {"a" * 40}}, {"case": {"a" * 40, "b" * 40}})
    check(
        "metrics oracle point",
        metrics.precision == 1.0
        and metrics.recall == 0.5
        and abs(metrics.f1 - 2.0 / 3.0) < 1e-12,
    )
    test = mcnemar({"x": True, "y": False}, {"x": False, "y": True})
    check("mcnemar symmetric discordance", abs(test.p_value - 1.0) < 1e-12)

    policy = ScriptedPolicy([ToolRequest(TOOL_QUERY_NODE, {"sha": "a" * 40})])
    decision = run_search(graph, policy, AgentBudget(max_steps=5, max_diff_reads=3))
    check(
        "budget fallback",
        decision.steps_used == 5 and decision.predicted_bic == "a" * 40,
    )
    return 1 if failures else 0


# -- parser --------------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser, with_policy: bool = True) -> None:
    sp.add_argument("--max-depth", type=int, default=100, help="file-history depth bound")
    sp.add_argument("--candidate-cap", type=int, default=200, help="non-fix candidate cap")
    sp.add_argument("--top-k", type=int, default=20, help="ranked candidates shown to the policy")
    sp.add_argument("--max-steps", type=int, default=50, help="search step budget")
    sp.add_argument("--max-diff-reads", type=int, default=3, help="diff read budget")
    sp.add_argument("--workers", type=int, default=4, help="parallel cases")
    sp.add_argument("--out", default="bicsearch-out", help="output directory")
    sp.add_argument(
        "--no-sanitize",
        action="store_true",
        help="keep raw commit messages (refused by evaluate/ablate)",
    )
    if with_policy:
        sp.add_argument(
            "--policy",
            choices=["deterministic", "replay", "llm"],
            default="deterministic",
            help="decision backend",
        )
        sp.add_argument("--cassette", help="recorded exchanges for --policy replay")
        sp.add_argument("--record", help="write a cassette here (llm policy only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bicsearch",
        description="Identify bug-inducing commits by searching a temporal "
        "knowledge graph of candidate commits.",
    )
    parser.add_argument("--log-level", default="warning", help="logging level name")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("identify", help="find the inducing commit for one fix")
    sp.add_argument("repo", help="path to a local git repository")
    sp.add_argument("bfc", help="fix commit id")
    _add_common(sp)
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("evaluate", help="benchmark over a dataset file")
    sp.add_argument("dataset", nargs="?", help="dataset file (JSON records, one per line)")
    sp.add_argument(
        "--self-check",
        action="store_true",
        help="run built-in invariant checks instead of a dataset",
    )
    _add_common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("categorize", help="categorize ground-truth causes")
    sp.add_argument("dataset")
    _add_common(sp, with_policy=False)
    sp.set_defaults(func=cmd_categorize)

    sp = sub.add_parser("ablate", help="compare pipeline variants")
    sp.add_argument("dataset")
    sp.add_argument(
        "--configs",
        default="BlameOnly,BlameFallback,TkgOnly,FullPipeline",
        help="comma-separated variant names",
    )
    _add_common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("graph-export", help="serialize the graph for one fix")
    sp.add_argument("repo")
    sp.add_argument("bfc")
    sp.add_argument("--output", help="output file (default: <out>/graph_<sha>.json)")
    _add_common(sp, with_policy=False)
    sp.set_defaults(func=cmd_graph_export)

    sp = sub.add_parser("fetch", help="clone dataset repositories explicitly")
    sp.add_argument("dataset")
    sp.add_argument("--dest", required=True, help="directory for clones")
    sp.set_defaults(func=cmd_fetch)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (GitError, LlmError, DatasetError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
