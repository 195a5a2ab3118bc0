"""Read-only access to local git repositories.

Everything here shells out to the ``git`` binary and parses its output:
commit metadata, unified diffs (with hunk-level line bookkeeping), line
blame, and bounded file-history walks that follow renames.  User and
system git configuration is ignored so that output parsing is stable
across machines.

A :class:`GitRepo` handle is cheap to construct (one ``rev-parse`` to
validate the path).  Handles are read-only; use one handle per worker
when parallelizing.
"""

from __future__ import annotations

import os
import re
import subprocess
from dataclasses import dataclass
from typing import Optional, Sequence

#: A commit id is a 40-character lowercase hex SHA-1 string.
CommitId = str

SHA_RE = re.compile(r"^[0-9a-f]{40}$")

_GIT_ENV_OVERRIDES = {
    # Keep parsing independent of user/system config (diff.noprefix,
    # core.quotePath, mailmap, ...).
    "GIT_CONFIG_GLOBAL": os.devnull,
    "GIT_CONFIG_SYSTEM": os.devnull,
    "GIT_PAGER": "cat",
    "LC_ALL": "C",
}


class GitError(Exception):
    """Base class for repository access failures."""


class RepoAccess(GitError):
    """The path is not a readable git repository."""


class UnknownCommit(GitError):
    """A commit id (or prefix) does not resolve in this repository."""


class FileAbsentAtRevision(GitError):
    """The requested path does not exist at the given revision."""


class LineOutOfRange(GitError):
    """A requested line number exceeds the file length at the revision."""


@dataclass(frozen=True)
class CommitRecord:
    """Metadata snapshot of one commit; ``message_raw`` is unsanitized."""

    id: CommitId
    author_time: int
    commit_time: int
    message_raw: str
    parents: tuple[CommitId, ...]

    @property
    def is_merge(self) -> bool:
        return len(self.parents) >= 2

    @property
    def is_root(self) -> bool:
        return not self.parents


@dataclass(frozen=True)
class DiffHunk:
    """One contiguous change block of a unified diff.

    Diffs are computed with zero context lines, so ``old_count`` equals
    ``len(deleted_lines)`` and ``new_count`` equals ``len(added_lines)``.
    ``old_start`` for a pure insertion is the old-file line *after* which
    the new lines appear (0 when inserting at the top of the file).
    """

    old_start: int
    old_count: int
    new_start: int
    new_count: int
    header_context: str
    deleted_lines: tuple[tuple[int, str], ...]
    added_lines: tuple[tuple[int, str], ...]

    @property
    def is_pure_addition(self) -> bool:
        return self.old_count == 0 and self.new_count > 0


@dataclass(frozen=True)
class FileChange:
    """All hunks of one changed file within a commit.

    ``old_path`` is absent for added files, ``new_path`` for deleted
    ones.  Binary files carry no hunks and are flagged instead.
    """

    old_path: Optional[str]
    new_path: Optional[str]
    hunks: tuple[DiffHunk, ...]
    binary: bool = False

    @property
    def path(self) -> str:
        """Post-image path when present, else the pre-image path."""
        p = self.new_path if self.new_path is not None else self.old_path
        assert p is not None
        return p

    @property
    def is_rename(self) -> bool:
        return (
            self.old_path is not None
            and self.new_path is not None
            and self.old_path != self.new_path
        )


@dataclass(frozen=True)
class BlameEntry:
    """Attribution of one line at a revision to its last-modifying commit."""

    file: str
    line: int
    origin: CommitId


class GitRepo:
    """Handle on a local repository rooted at ``path``."""

    def __init__(self, path: str):
        self.path = str(path)
        if not os.path.isdir(self.path):
            raise RepoAccess(f"not a directory: {self.path}")
        try:
            self._run("rev-parse", "--git-dir")
        except GitError as exc:
            raise RepoAccess(f"not a git repository: {self.path}") from exc
        self._commit_cache: dict[CommitId, CommitRecord] = {}
        self._diff_cache: dict[CommitId, tuple[FileChange, ...]] = {}

    def __repr__(self) -> str:
        return f"GitRepo({self.path!r})"

    # -- plumbing ---------------------------------------------------------

    def _run(self, *args: str, check: bool = True) -> str:
        env = dict(os.environ)
        env.update(_GIT_ENV_OVERRIDES)
        try:
            proc = subprocess.run(
                ["git", "-C", self.path, "-c", "core.quotePath=false", *args],
                capture_output=True,
                text=True,
                env=env,
            )
        except OSError as exc:
            raise RepoAccess(f"cannot run git: {exc}") from exc
        if check and proc.returncode != 0:
            raise GitError(
                f"git {' '.join(args[:2])} failed (rc={proc.returncode}): "
                f"{proc.stderr.strip()}"
            )
        return proc.stdout

    # -- operations -------------------------------------------------------

    def resolve(self, id_or_prefix: str) -> CommitId:
        """Resolve a full id or an abbreviated prefix to a CommitId.

        Raises UnknownCommit when the prefix is missing or ambiguous.
        """
        try:
            out = self._run("rev-parse", "--verify", "--quiet", f"{id_or_prefix}^{{commit}}")
        except GitError as exc:
            raise UnknownCommit(f"cannot resolve commit {id_or_prefix!r}") from exc
        sha = out.strip()
        if not SHA_RE.match(sha):
            raise UnknownCommit(f"cannot resolve commit {id_or_prefix!r}")
        return sha

    def read_commit(self, id: str) -> CommitRecord:
        """Return metadata for one commit; message is the raw body."""
        sha = self.resolve(id)
        cached = self._commit_cache.get(sha)
        if cached is not None:
            return cached
        out = self._run("show", "-s", "--format=%H%n%at%n%ct%n%P%n%B", sha)
        lines = out.split("\n")
        record = CommitRecord(
            id=lines[0],
            author_time=int(lines[1]),
            commit_time=int(lines[2]),
            message_raw="\n".join(lines[4:]).rstrip("\n"),
            parents=tuple(lines[3].split()) if lines[3] else (),
        )
        self._commit_cache[sha] = record
        return record

    def compute_diff(self, id: str) -> tuple[FileChange, ...]:
        """Parse the commit's diff against its first parent.

        Rename detection is on; merge commits are diffed against their
        first parent; root commits against the empty tree.  Binary files
        yield a flagged FileChange with no hunks.
        """
        sha = self.resolve(id)
        cached = self._diff_cache.get(sha)
        if cached is not None:
            return cached
        record = self.read_commit(sha)
        base = record.parents[0] if record.parents else self._empty_tree()
        out = self._run(
            "diff", "--no-color", "--no-ext-diff", "-M", "-U0", base, sha
        )
        changes = parse_unified_diff(out)
        self._diff_cache[sha] = changes
        return changes

    def file_at(self, revision: str, file: str) -> str:
        """Content of ``file`` at ``revision``; FileAbsentAtRevision if missing."""
        rev = self.resolve(revision)
        try:
            return self._run("show", f"{rev}:{file}")
        except GitError as exc:
            raise FileAbsentAtRevision(f"{file} not present at {rev[:12]}") from exc

    def blame_lines(
        self, revision: str, file: str, lines: Sequence[int]
    ) -> list[BlameEntry]:
        """Blame the given line numbers of ``file`` as of ``revision``.

        Returns one entry per requested line, in ascending line order.
        """
        rev = self.resolve(revision)
        wanted = sorted(set(int(n) for n in lines))
        if not wanted:
            return []
        if wanted[0] < 1:
            raise LineOutOfRange(f"line numbers start at 1, got {wanted[0]}")
        content = self.file_at(rev, file)
        n_lines = len(content.splitlines())
        if wanted[-1] > n_lines:
            raise LineOutOfRange(
                f"line {wanted[-1]} beyond end of {file} ({n_lines} lines) at {rev[:12]}"
            )
        out = self._run("blame", "--porcelain", rev, "--", file)
        origin_by_line = _parse_blame_porcelain(out)
        return [BlameEntry(file=file, line=n, origin=origin_by_line[n]) for n in wanted]

    def file_history(self, start: str, file: str, max_depth: int) -> list[CommitId]:
        """Commits that modified ``file`` at or before ``start``, newest first.

        Follows renames.  ``start`` itself appears only when it modified
        the file.  The list is truncated to ``max_depth`` entries.
        """
        if max_depth <= 0:
            return []
        sha = self.resolve(start)
        out = self._run(
            "log", "--follow", "--format=%H", "-n", str(max_depth), sha, "--", file
        )
        return [ln for ln in out.splitlines() if ln]

    # -- helpers ----------------------------------------------------------

    def _empty_tree(self) -> str:
        tree = getattr(self, "_empty_tree_id", None)
        if tree is None:
            env = dict(os.environ)
            env.update(_GIT_ENV_OVERRIDES)
            proc = subprocess.run(
                ["git", "-C", self.path, "hash-object", "-t", "tree", os.devnull],
                capture_output=True,
                text=True,
                env=env,
            )
            tree = proc.stdout.strip()
            self._empty_tree_id = tree
        return tree


# -- unified diff parsing and rendering -----------------------------------

_HUNK_RE = re.compile(
    r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@ ?(.*)$"
)


def _diff_path(token: str) -> Optional[str]:
    """Path from a ---/+++ token, stripping the a/ b/ prefix."""
    token = token.split("\t")[0]
    if token == "/dev/null":
        return None
    if token.startswith(("a/", "b/")):
        return token[2:]
    return token


def parse_unified_diff(text: str) -> tuple[FileChange, ...]:
    """Parse ``git diff -U0`` output into FileChange records.

    Handles added/deleted files, renames (pure and with edits), and
    binary files.  With zero context every +/- line inside a hunk is a
    real change, so line numbers are assigned by simple counting.
    """
    changes: list[FileChange] = []
    lines = text.split("\n")
    i = 0
    n = len(lines)
    while i < n:
        if not lines[i].startswith("diff --git "):
            i += 1
            continue
        header = lines[i]
        i += 1
        old_path: Optional[str] = None
        new_path: Optional[str] = None
        rename_from: Optional[str] = None
        rename_to: Optional[str] = None
        binary = False
        saw_marker = False
        hunks: list[DiffHunk] = []

        while i < n and not lines[i].startswith("diff --git "):
            line = lines[i]
            if line.startswith("rename from "):
                rename_from = line[len("rename from "):]
            elif line.startswith("rename to "):
                rename_to = line[len("rename to "):]
            elif line.startswith("--- "):
                old_path = _diff_path(line[4:])
                saw_marker = True
            elif line.startswith("+++ "):
                new_path = _diff_path(line[4:])
            elif line.startswith("Binary files "):
                binary = True
            elif line.startswith("@@"):
                m = _HUNK_RE.match(line)
                if not m:
                    raise ValueError(f"malformed hunk header: {line!r}")
                old_start = int(m.group(1))
                old_count = int(m.group(2)) if m.group(2) is not None else 1
                new_start = int(m.group(3))
                new_count = int(m.group(4)) if m.group(4) is not None else 1
                context = m.group(5)
                deleted: list[tuple[int, str]] = []
                added: list[tuple[int, str]] = []
                i += 1
                while i < n:
                    body = lines[i]
                    if body.startswith("-"):
                        deleted.append((old_start + len(deleted), body[1:]))
                    elif body.startswith("+"):
                        added.append((new_start + len(added), body[1:]))
                    elif body.startswith("\\"):
                        pass  # "\ No newline at end of file"
                    else:
                        break
                    i += 1
                hunks.append(
                    DiffHunk(
                        old_start=old_start,
                        old_count=old_count,
                        new_start=new_start,
                        new_count=new_count,
                        header_context=context,
                        deleted_lines=tuple(deleted),
                        added_lines=tuple(added),
                    )
                )
                continue
            i += 1

        if not saw_marker:
            # Pure rename, mode-only change, or binary: no ---/+++ lines.
            if rename_from is not None:
                old_path, new_path = rename_from, rename_to
            else:
                # Fall back to the "diff --git a/X b/Y" header paths.
                m = re.match(r"^diff --git a/(.*) b/(.*)$", header)
                if m:
                    old_path, new_path = m.group(1), m.group(2)
        elif rename_from is not None:
            # Rename with edits: ---/+++ already carry both paths.
            pass
        if old_path is None and new_path is None:
            continue
        changes.append(
            FileChange(
                old_path=old_path,
                new_path=new_path,
                hunks=tuple(hunks),
                binary=binary,
            )
        )
    return tuple(changes)


def render_unified_diff(changes: Sequence[FileChange]) -> str:
    """Render FileChanges back to unified-diff text.

    This is the canonical rendering stored on graph nodes and returned
    by the diff-reading tool; it mirrors git's -U0 output shape.
    """

    def fmt_range(start: int, count: int) -> str:
        return str(start) if count == 1 else f"{start},{count}"

    out: list[str] = []
    for change in changes:
        a = change.old_path if change.old_path is not None else change.new_path
        b = change.new_path if change.new_path is not None else change.old_path
        out.append(f"diff --git a/{a} b/{b}")
        if change.binary:
            out.append(f"Binary files a/{a} and b/{b} differ")
            continue
        if change.is_rename:
            out.append(f"rename from {change.old_path}")
            out.append(f"rename to {change.new_path}")
            if not change.hunks:
                continue
        out.append("--- " + (f"a/{change.old_path}" if change.old_path else "/dev/null"))
        out.append("+++ " + (f"b/{change.new_path}" if change.new_path else "/dev/null"))
        for h in change.hunks:
            trailer = f" {h.header_context}" if h.header_context else ""
            out.append(
                f"@@ -{fmt_range(h.old_start, h.old_count)} "
                f"+{fmt_range(h.new_start, h.new_count)} @@{trailer}"
            )
            for _, text in h.deleted_lines:
                out.append("-" + text)
            for _, text in h.added_lines:
                out.append("+" + text)
    return "\n".join(out) + ("\n" if out else "")


def apply_changes(parent_lines: Sequence[str], hunks: Sequence[DiffHunk]) -> list[str]:
    """Replay a file's hunks against its parent content.

    Used by tests to check the parse round-trip: applying the deleted
    and added line sets of a -U0 diff to the parent must reproduce the
    child file exactly.
    """
    result: list[str] = []
    idx = 0  # 0-based index into parent_lines
    for hunk in sorted(hunks, key=lambda h: (h.old_start, h.new_start)):
        if hunk.old_count > 0:
            copy_until = hunk.old_start - 1
        else:
            copy_until = hunk.old_start  # insertion point: after this old line
        while idx < copy_until:
            result.append(parent_lines[idx])
            idx += 1
        idx += hunk.old_count
        result.extend(text for _, text in hunk.added_lines)
    result.extend(parent_lines[idx:])
    return result


def _parse_blame_porcelain(out: str) -> dict[int, CommitId]:
    """Map final line numbers to origin commit ids from --porcelain output."""
    origin_by_line: dict[int, CommitId] = {}
    head_re = re.compile(r"^([0-9a-f]{40}) (\d+) (\d+)(?: (\d+))?$")
    for line in out.splitlines():
        m = head_re.match(line)
        if m:
            origin_by_line[int(m.group(3))] = m.group(1)
    return origin_by_line
