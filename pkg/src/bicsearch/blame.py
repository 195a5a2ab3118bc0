"""Initial candidate derivation from a bug-fixing commit.

The deleted/modified lines of a fix are blamed at the fix's first
parent.  Fixes that only add code ("blameless") instead blame up to two
parent-file lines on each side of every insertion point.  Origin counts
feed the blame statistics stored on the fix node of the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .gitrepo import (
    BlameEntry,
    CommitId,
    FileAbsentAtRevision,
    FileChange,
    GitRepo,
)

FALLBACK_CONTEXT_LINES = 2


class BlamelessInput(Exception):
    """Raised when deleted-line blame is requested for an addition-only fix."""


@dataclass
class BlameSet:
    """Blame results for one fix, aggregated across its changed files."""

    entries: list[BlameEntry] = field(default_factory=list)
    used_fallback: bool = False

    @property
    def per_origin_counts(self) -> dict[CommitId, int]:
        counts: dict[CommitId, int] = {}
        for entry in self.entries:
            counts[entry.origin] = counts.get(entry.origin, 0) + 1
        return counts

    @property
    def origins(self) -> set[CommitId]:
        return {entry.origin for entry in self.entries}


@dataclass(frozen=True)
class BlameStats:
    """Summary attached to the fix node: how concentrated the blame is."""

    total_blame_commits: int
    single_responsible: bool
    dominant_commit: Optional[CommitId]
    dominant_fraction: float


def is_blameless(changes: Sequence[FileChange]) -> bool:
    """True iff no hunk in any file change carries a deleted line."""
    return not any(hunk.deleted_lines for change in changes for hunk in change.hunks)


def blame_deleted_lines(repo: GitRepo, bfc: CommitId) -> BlameSet:
    """Blame every deleted/modified line of the fix at its first parent.

    Raises BlamelessInput when the fix has no deleted lines (use
    :func:`fallback_context_blame` instead).
    """
    record = repo.read_commit(bfc)
    changes = repo.compute_diff(record.id)
    if is_blameless(changes):
        raise BlamelessInput(f"{record.id[:12]} deletes no lines")
    if not record.parents:
        # A root commit deleted lines relative to the empty tree; there
        # is no revision to blame against.
        return BlameSet(entries=[], used_fallback=False)
    parent = record.parents[0]

    result = BlameSet(used_fallback=False)
    for change in changes:
        if change.binary or change.old_path is None:
            continue
        lines = sorted(
            {line_no for hunk in change.hunks for line_no, _ in hunk.deleted_lines}
        )
        if not lines:
            continue
        result.entries.extend(repo.blame_lines(parent, change.old_path, lines))
    return result


def fallback_context_blame(repo: GitRepo, bfc: CommitId) -> BlameSet:
    """Blame the parent lines around each addition of a blameless fix.

    For every added hunk, up to two lines immediately before and two
    immediately after the insertion point in the parent file are blamed,
    clamped to the file bounds.  Additions into new or empty files
    contribute nothing; overlapping windows are deduplicated per line.
    """
    record = repo.read_commit(bfc)
    changes = repo.compute_diff(record.id)
    result = BlameSet(used_fallback=True)
    if not record.parents:
        return result
    parent = record.parents[0]

    for change in changes:
        if change.binary or change.old_path is None:
            continue
        try:
            content = repo.file_at(parent, change.old_path)
        except FileAbsentAtRevision:
            continue
        file_len = len(content.splitlines())
        if file_len == 0:
            continue
        wanted: set[int] = set()
        for hunk in change.hunks:
            if not hunk.is_pure_addition:
                continue
            anchor = hunk.old_start  # old-file line the insertion follows
            for offset in range(1 - FALLBACK_CONTEXT_LINES, FALLBACK_CONTEXT_LINES + 1):
                line = anchor + offset
                if 1 <= line <= file_len:
                    wanted.add(line)
        if wanted:
            result.entries.extend(
                repo.blame_lines(parent, change.old_path, sorted(wanted))
            )
    return result


def blame_for(repo: GitRepo, bfc: CommitId) -> BlameSet:
    """Deleted-line blame, or the context fallback for blameless fixes."""
    changes = repo.compute_diff(bfc)
    if is_blameless(changes):
        return fallback_context_blame(repo, bfc)
    return blame_deleted_lines(repo, bfc)


def compute_blame_stats(blame_set: BlameSet) -> BlameStats:
    """Derive concentration statistics from a blame set.

    A dominant commit must account for a strict majority (> 50%) of the
    blamed lines.  Empty sets yield zeroed stats.
    """
    counts = blame_set.per_origin_counts
    total_lines = sum(counts.values())
    if not counts:
        return BlameStats(
            total_blame_commits=0,
            single_responsible=False,
            dominant_commit=None,
            dominant_fraction=0.0,
        )
    top_origin = max(counts, key=lambda origin: (counts[origin], origin))
    fraction = counts[top_origin] / total_lines
    dominant = top_origin if fraction > 0.5 else None
    return BlameStats(
        total_blame_commits=len(counts),
        single_responsible=len(counts) == 1,
        dominant_commit=dominant,
        dominant_fraction=fraction if dominant is not None else 0.0,
    )
