"""Classify a known bug-inducing commit relative to its fix.

Given a (fix, cause) pair with ground truth, decide how the cause
relates to what blame reports for the fix: directly blamed, an ancestor
of a blamed commit, an ancestor of the fix this side of the blamed
commits, invisible because the fix deletes nothing, or unreachable by
backward file-history traversal within the configured depth.
"""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .blame import (
    blame_deleted_lines,
    fallback_context_blame,
    is_blameless,
)
from .gitrepo import CommitId, GitError, GitRepo
from .graph import file_ancestors

log = logging.getLogger(__name__)

KIND_BLAME = "Blame"
KIND_BLAME_ANCESTOR = "BlameAncestor"
KIND_BFC_ANCESTOR = "BfcAncestor"
KIND_BLAMELESS = "Blameless"
KIND_UNREACHABLE = "Unreachable"

CATEGORY_KINDS = (
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    KIND_BFC_ANCESTOR,
    KIND_BLAMELESS,
    KIND_UNREACHABLE,
)

DEFAULT_MAX_DEPTH = 100


class TemporalViolation(Exception):
    """The claimed cause is newer than the fix."""


@dataclass(frozen=True)
class BicCategory:
    """Category of one ground-truth cause, with traversal depth when
    the category is ancestor-shaped and the fallback-blame hit flag
    when the fix is blameless."""

    kind: str
    depth: Optional[int] = None
    fallback_hit: Optional[bool] = None


def categorize(
    repo: GitRepo,
    bfc: CommitId,
    bic: CommitId,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> BicCategory:
    """Classify ``bic`` against the blame picture of ``bfc``.

    Checking order: Blameless, Blame, BlameAncestor, BfcAncestor,
    Unreachable.  Depth counts backward file-history steps from the
    starting commit (which is excluded), minimized over all starting
    points and fix-changed files.  Fix-side walks stop before any blame
    commit.  Raises TemporalViolation when the cause postdates the fix.
    """
    bfc_rec = repo.read_commit(bfc)
    bic_rec = repo.read_commit(bic)
    if bic_rec.commit_time > bfc_rec.commit_time:
        raise TemporalViolation(
            f"{bic_rec.id[:12]} is dated after {bfc_rec.id[:12]}"
        )
    changes = repo.compute_diff(bfc_rec.id)

    if is_blameless(changes):
        fallback = fallback_context_blame(repo, bfc_rec.id)
        return BicCategory(
            KIND_BLAMELESS, fallback_hit=bic_rec.id in fallback.origins
        )

    blame_set = blame_deleted_lines(repo, bfc_rec.id)
    origins = blame_set.origins
    if bic_rec.id in origins:
        return BicCategory(KIND_BLAME)

    old_paths = _unique(c.old_path or c.new_path for c in changes if not c.binary)
    new_paths = _unique(c.new_path or c.old_path for c in changes if not c.binary)

    depth = _min_depth_from(
        repo, sorted(origins), old_paths, bic_rec.id, max_depth, stop_at=frozenset()
    )
    if depth is not None:
        return BicCategory(KIND_BLAME_ANCESTOR, depth=depth)

    depth = _min_depth_from(
        repo, [bfc_rec.id], new_paths, bic_rec.id, max_depth, stop_at=origins
    )
    if depth is not None:
        return BicCategory(KIND_BFC_ANCESTOR, depth=depth)

    return BicCategory(KIND_UNREACHABLE)


def _min_depth_from(
    repo: GitRepo,
    starts: Sequence[CommitId],
    paths: Sequence[str],
    target: CommitId,
    max_depth: int,
    stop_at: frozenset[CommitId] | set[CommitId],
) -> Optional[int]:
    best: Optional[int] = None
    for start in starts:
        for path in paths:
            try:
                walk = file_ancestors(repo, start, path, max_depth)
            except GitError as exc:
                log.warning("history walk failed for %s at %s: %s", path, start[:12], exc)
                continue
            for idx, sha in enumerate(walk, start=1):
                if sha in stop_at:
                    break
                if sha == target:
                    best = idx if best is None else min(best, idx)
                    break
    return best


def _unique(items: Iterable[Optional[str]]) -> list[str]:
    seen: dict[str, None] = {}
    for item in items:
        if item is not None and item not in seen:
            seen[item] = None
    return list(seen)


# -- aggregation ------------------------------------------------------------


def category_report(
    cases: Sequence,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_workers: int = 8,
) -> dict:
    """Categorize every (fix, cause) pair of a case list and aggregate.

    Each case needs ``repo`` (path), ``bfc``, ``bics``, and ``dataset``
    attributes.  Per-pair failures are recorded under ``errors`` rather
    than aborting the run.  The result carries one record per pair,
    count/percentage tables per dataset and overall, depth quantiles and
    cumulative coverage-by-depth curves for the ancestor categories, and
    the fallback-blame hit rate over blameless fixes.
    """
    pairs: list[tuple[str, str, CommitId, CommitId]] = []
    for case in cases:
        for bic in case.bics:
            pairs.append((case.dataset, case.repo, case.bfc, bic))

    def work(pair: tuple[str, str, CommitId, CommitId]):
        dataset, repo_path, bfc, bic = pair
        try:
            result = categorize(GitRepo(repo_path), bfc, bic, max_depth=max_depth)
            return (dataset, bfc, bic, result, None)
        except Exception as exc:  # recorded, not fatal
            return (dataset, bfc, bic, None, f"{type(exc).__name__}: {exc}")

    if pairs:
        workers = max(1, min(max_workers, len(pairs)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, pairs))
    else:
        outcomes = []

    records: list[dict] = []
    errors: list[dict] = []
    for dataset, bfc, bic, result, error in outcomes:
        if error is not None:
            errors.append({"dataset": dataset, "bfc": bfc, "bic": bic, "error": error})
            continue
        records.append(
            {
                "dataset": dataset,
                "bfc": bfc,
                "bic": bic,
                "kind": result.kind,
                "depth": result.depth,
                "fallback_hit": result.fallback_hit,
            }
        )

    report = {
        "max_depth": max_depth,
        "total_pairs": len(records),
        "records": records,
        "errors": errors,
        "overall": _distribution(records),
        "datasets": {
            ds: _distribution([r for r in records if r["dataset"] == ds])
            for ds in sorted({r["dataset"] for r in records})
        },
        "depth_quantiles": {},
        "coverage_by_depth": {},
    }

    for kind in (KIND_BLAME_ANCESTOR, KIND_BFC_ANCESTOR):
        depths = sorted(
            r["depth"] for r in records if r["kind"] == kind and r["depth"] is not None
        )
        if not depths:
            continue
        report["depth_quantiles"][kind] = {
            "count": len(depths),
            "min": depths[0],
            "median": statistics.median(depths),
            "p90": _nearest_rank(depths, 0.9),
            "max": depths[-1],
        }
        curve: list[list[float]] = []
        covered = 0
        i = 0
        for d in range(1, depths[-1] + 1):
            while i < len(depths) and depths[i] <= d:
                covered += 1
                i += 1
            curve.append([d, covered / len(depths)])
        report["coverage_by_depth"][kind] = curve

    blameless = [r for r in records if r["kind"] == KIND_BLAMELESS]
    hits = sum(1 for r in blameless if r["fallback_hit"])
    report["blameless_fallback"] = {
        "total": len(blameless),
        "hits": hits,
        "hit_rate": hits / len(blameless) if blameless else 0.0,
    }
    return report


def _distribution(records: Sequence[dict]) -> dict:
    counts = {kind: 0 for kind in CATEGORY_KINDS}
    for record in records:
        counts[record["kind"]] += 1
    total = len(records)
    percentages = {
        kind: (100.0 * count / total if total else 0.0)
        for kind, count in counts.items()
    }
    return {"total": total, "counts": counts, "percentages": percentages}


def _nearest_rank(sorted_values: Sequence[int], q: float) -> int:
    idx = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[idx]
