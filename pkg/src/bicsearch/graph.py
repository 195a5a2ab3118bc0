"""Temporal knowledge graph over the candidate commits of one fix.

The graph holds commit, file, and function nodes.  Commit nodes carry a
kind label (``bfc``, ``blame``, ``blame_ancestor``, ``bfc_ancestor``), a
sanitized message, and the parsed diff.  A single PRECEDES chain totally
orders the commit nodes by commit date; MODIFIES_FILE / MODIFIES_FUNCTION
/ DEFINED_IN edges encode code co-location.  The store is in-process and
serializes to a JSON document for export.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .blame import BlameSet, BlameStats, compute_blame_stats
from .gitrepo import CommitId, DiffHunk, FileChange, GitError, GitRepo

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

KIND_BFC = "bfc"
KIND_BLAME = "blame"
KIND_BLAME_ANCESTOR = "blame_ancestor"
KIND_BFC_ANCESTOR = "bfc_ancestor"

#: Lower value wins when a commit qualifies for several kinds.
KIND_PRIORITY = {
    KIND_BLAME: 0,
    KIND_BLAME_ANCESTOR: 1,
    KIND_BFC_ANCESTOR: 2,
}

EDGE_PRECEDES = "PRECEDES"
EDGE_MODIFIES_FILE = "MODIFIES_FILE"
EDGE_MODIFIES_FUNCTION = "MODIFIES_FUNCTION"
EDGE_DEFINED_IN = "DEFINED_IN"


class MalformedDocument(Exception):
    """An exported graph document cannot be parsed back."""


@dataclass(frozen=True)
class TkgConfig:
    """Traversal and candidate limits for graph construction."""

    max_depth: int = 100
    candidate_cap: int = 200
    top_k: int = 20

    def __post_init__(self) -> None:
        if self.max_depth < 1 or self.candidate_cap < 1 or self.top_k < 1:
            raise ValueError("limits must be positive")
        if self.top_k > self.candidate_cap:
            raise ValueError("top_k must not exceed candidate_cap")


@dataclass
class CommitNode:
    sha: CommitId
    kind: str
    author_time: int
    commit_time: int
    message: str
    changes: tuple[FileChange, ...]
    blame_stats: Optional[BlameStats] = None
    used_fallback: Optional[bool] = None

    @property
    def node_id(self) -> str:
        return f"commit:{self.sha}"


@dataclass(frozen=True)
class TkgEdge:
    kind: str
    src: str
    dst: str


# -- message sanitization ---------------------------------------------------

_DROP_LINE_RE = re.compile(r"^\s*(fixes:|reverts:|this reverts commit)", re.IGNORECASE)
_HEX_TOKEN_RE = re.compile(r"\b[0-9a-f]{7,40}\b")


def sanitize_message(text: str) -> str:
    """Strip ground-truth leakage from a commit message.

    Lines starting with "Fixes:", "Reverts:", or "This reverts commit"
    are removed; any surviving standalone 7-40 char hex token becomes
    the placeholder "<SHA>".  Idempotent; all other text is preserved.
    """
    kept = [line for line in text.split("\n") if not _DROP_LINE_RE.match(line)]
    return _HEX_TOKEN_RE.sub("<SHA>", "\n".join(kept))


# -- function extraction ----------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def extract_function_name(header_context: str) -> Optional[str]:
    """Best-effort function name from a hunk header trailer.

    Takes the text before any parameter list and keeps the last
    identifier token, e.g. "static int foo_bar(int x)" -> "foo_bar".
    """
    head = header_context.split("(", 1)[0]
    idents = _IDENT_RE.findall(head)
    return idents[-1] if idents else None


# -- traversal helpers ------------------------------------------------------


def file_ancestors(
    repo: GitRepo, start: CommitId, path: str, max_depth: int
) -> list[CommitId]:
    """Commits strictly older than ``start`` in ``path``'s history.

    Depth d of a returned commit is its 1-based position: one step
    backward from ``start`` is depth 1.  ``start`` itself is never
    included.
    """
    history = repo.file_history(start, path, max_depth + 1)
    if history and history[0] == start:
        history = history[1:]
    return history[:max_depth]


def collect_candidates(
    repo: GitRepo,
    bfc: CommitId,
    blame_set: BlameSet,
    cfg: TkgConfig,
) -> dict[CommitId, str]:
    """Label the candidate commits for one fix.

    Includes the fix itself (kind ``bfc``) and all blame origins (kind
    ``blame``), then walks the history of each fix-changed file backward
    from every blame commit (``blame_ancestor``) and from the fix
    (``bfc_ancestor``, stopping before any blame commit).  Ancestors are
    admitted in rounds of increasing depth, blame-side walks first,
    until ``cfg.candidate_cap`` non-fix candidates are reached.
    Candidates dated after the fix are dropped (a cause cannot postdate
    its fix).  Per-file traversal failures are logged, not fatal.
    """
    bfc_rec = repo.read_commit(bfc)
    bfc_sha = bfc_rec.id
    changes = repo.compute_diff(bfc_sha)

    kinds: dict[CommitId, str] = {bfc_sha: KIND_BFC}
    admitted = 0

    def admit(sha: CommitId, kind: str) -> bool:
        """Record a candidate; False when the cap stops the collection."""
        nonlocal admitted
        if sha == bfc_sha:
            return True
        existing = kinds.get(sha)
        if existing is not None:
            if KIND_PRIORITY[kind] < KIND_PRIORITY[existing]:
                kinds[sha] = kind
            return True
        if admitted >= cfg.candidate_cap:
            return False
        try:
            if repo.read_commit(sha).commit_time > bfc_rec.commit_time:
                log.warning("dropping %s: dated after the fix", sha[:12])
                return True
        except GitError as exc:
            log.warning("dropping %s: %s", sha[:12], exc)
            return True
        kinds[sha] = kind
        admitted += 1
        return True

    origins = blame_set.per_origin_counts
    ordered_origins = sorted(
        origins,
        key=lambda sha: (-origins[sha], -_commit_time(repo, sha), sha),
    )
    for origin in ordered_origins:
        if not admit(origin, KIND_BLAME):
            return kinds
    blame_origins = set(ordered_origins)

    old_paths = _unique([c.old_path or c.new_path for c in changes if not c.binary])
    new_paths = _unique([c.new_path or c.old_path for c in changes if not c.binary])

    blame_walks: list[list[CommitId]] = []
    for origin in ordered_origins:
        for path in old_paths:
            blame_walks.append(_safe_ancestors(repo, origin, path, cfg.max_depth))

    bfc_walks: list[list[CommitId]] = []
    for path in new_paths:
        walk = _safe_ancestors(repo, bfc_sha, path, cfg.max_depth)
        # BFC-side walks stop before the blame commits: candidates of this
        # kind lie strictly between the blamed code and the fix.
        stopped: list[CommitId] = []
        for sha in walk:
            if sha in blame_origins:
                break
            stopped.append(sha)
        bfc_walks.append(stopped)

    for depth_idx in range(cfg.max_depth):
        reached_any = False
        for walk in blame_walks:
            if depth_idx < len(walk):
                reached_any = True
                if not admit(walk[depth_idx], KIND_BLAME_ANCESTOR):
                    return kinds
        for walk in bfc_walks:
            if depth_idx < len(walk):
                reached_any = True
                if not admit(walk[depth_idx], KIND_BFC_ANCESTOR):
                    return kinds
        if not reached_any:
            break
    return kinds


def _commit_time(repo: GitRepo, sha: CommitId) -> int:
    try:
        return repo.read_commit(sha).commit_time
    except GitError:
        return 0


def _safe_ancestors(
    repo: GitRepo, start: CommitId, path: str, max_depth: int
) -> list[CommitId]:
    try:
        return file_ancestors(repo, start, path, max_depth)
    except GitError as exc:
        log.warning("history walk failed for %s at %s: %s", path, start[:12], exc)
        return []


def _unique(items: Iterable[Optional[str]]) -> list[str]:
    seen: dict[str, None] = {}
    for item in items:
        if item is not None and item not in seen:
            seen[item] = None
    return list(seen)


# -- the graph --------------------------------------------------------------


class UnknownNode(Exception):
    """The referenced node does not exist in the graph."""


class TemporalKnowledgeGraph:
    """One fix's candidate commits plus their file/function context."""

    def __init__(self, config: TkgConfig):
        self.config = config
        self._commits: dict[CommitId, CommitNode] = {}
        self._files: set[str] = set()
        self._functions: dict[tuple[str, str], None] = {}  # (path, name), ordered
        self._files_of: dict[CommitId, list[str]] = {}
        self._functions_of: dict[CommitId, list[tuple[str, str]]] = {}
        self._commits_by_file: dict[str, list[CommitId]] = {}
        self._commits_by_function: dict[tuple[str, str], list[CommitId]] = {}
        self._chain: list[CommitId] = []

    # -- construction --

    def add_commit(self, node: CommitNode) -> None:
        if node.sha in self._commits:
            raise ValueError(f"duplicate commit node {node.sha}")
        self._commits[node.sha] = node
        self._files_of[node.sha] = []
        self._functions_of[node.sha] = []
        for change in node.changes:
            path = change.path
            if path not in self._files_of[node.sha]:
                self._files_of[node.sha].append(path)
                self._files.add(path)
                self._commits_by_file.setdefault(path, []).append(node.sha)
            for hunk in change.hunks:
                name = extract_function_name(hunk.header_context)
                if name is None:
                    continue
                key = (path, name)
                self._functions.setdefault(key, None)
                if key not in self._functions_of[node.sha]:
                    self._functions_of[node.sha].append(key)
                    self._commits_by_function.setdefault(key, []).append(node.sha)
        self._rebuild_chain()

    def _rebuild_chain(self) -> None:
        self._chain = sorted(
            self._commits, key=lambda sha: (self._commits[sha].commit_time, sha)
        )

    # -- accessors --

    @property
    def bfc(self) -> CommitNode:
        for node in self._commits.values():
            if node.kind == KIND_BFC:
                return node
        raise UnknownNode("graph has no bfc node")

    def commit_node(self, sha: str) -> CommitNode:
        node = self._commits.get(sha)
        if node is None:
            raise UnknownNode(f"no commit node {sha!r}")
        return node

    def has_commit(self, sha: str) -> bool:
        return sha in self._commits

    def commit_nodes(self) -> list[CommitNode]:
        """All commit nodes in PRECEDES chain order (oldest first)."""
        return [self._commits[sha] for sha in self._chain]

    def candidate_nodes(self) -> list[CommitNode]:
        return [n for n in self.commit_nodes() if n.kind != KIND_BFC]

    def files_of(self, sha: str) -> list[str]:
        self.commit_node(sha)
        return list(self._files_of[sha])

    def functions_of(self, sha: str) -> list[tuple[str, str]]:
        self.commit_node(sha)
        return list(self._functions_of[sha])

    def file_nodes(self) -> list[str]:
        return sorted(self._files)

    def function_nodes(self) -> list[tuple[str, str]]:
        return sorted(self._functions)

    def edges(self) -> list[TkgEdge]:
        """Materialize every edge of the graph."""
        out: list[TkgEdge] = []
        for prev, cur in zip(self._chain, self._chain[1:]):
            out.append(TkgEdge(EDGE_PRECEDES, f"commit:{prev}", f"commit:{cur}"))
        for sha in self._chain:
            for path in self._files_of[sha]:
                out.append(TkgEdge(EDGE_MODIFIES_FILE, f"commit:{sha}", f"file:{path}"))
            for path, name in self._functions_of[sha]:
                out.append(
                    TkgEdge(
                        EDGE_MODIFIES_FUNCTION,
                        f"commit:{sha}",
                        f"function:{path}::{name}",
                    )
                )
        for path, name in self.function_nodes():
            out.append(TkgEdge(EDGE_DEFINED_IN, f"function:{path}::{name}", f"file:{path}"))
        return out

    def precedes_chain(self) -> list[CommitId]:
        return list(self._chain)

    # -- queries --

    def neighbors(
        self,
        sha: str,
        edge_kinds: Sequence[str] = (EDGE_MODIFIES_FUNCTION, EDGE_MODIFIES_FILE),
    ) -> list[CommitNode]:
        """Candidate commits sharing code entities with ``sha``.

        Function-sharing commits come before file-only matches; each
        group is ordered blame, blame_ancestor, bfc_ancestor, newest
        first within a kind.  The queried commit and the fix node are
        excluded.
        """
        self.commit_node(sha)
        func_sharing: set[CommitId] = set()
        file_sharing: set[CommitId] = set()
        if EDGE_MODIFIES_FUNCTION in edge_kinds:
            for key in self._functions_of[sha]:
                func_sharing.update(self._commits_by_function[key])
        if EDGE_MODIFIES_FILE in edge_kinds:
            for path in self._files_of[sha]:
                file_sharing.update(self._commits_by_file[path])
        file_sharing -= func_sharing

        def usable(other: CommitId) -> bool:
            return other != sha and self._commits[other].kind != KIND_BFC

        def ordering(other: CommitId) -> tuple:
            node = self._commits[other]
            return (KIND_PRIORITY[node.kind], -node.commit_time, node.sha)

        ranked = sorted(filter(usable, func_sharing), key=ordering)
        ranked += sorted(filter(usable, file_sharing), key=ordering)
        return [self._commits[other] for other in ranked]

    def overlap_with_bfc(self, sha: str) -> dict[str, list[str]]:
        """Files and functions shared between ``sha`` and the fix node."""
        bfc_sha = self.bfc.sha
        files = sorted(set(self.files_of(sha)) & set(self.files_of(bfc_sha)))
        funcs = sorted(
            set(self.functions_of(sha)) & set(self.functions_of(bfc_sha))
        )
        return {
            "shared_files": files,
            "shared_functions": [f"{path}::{name}" for path, name in funcs],
        }

    # -- serialization --

    def to_document(self) -> dict:
        nodes: list[dict] = []
        for node in self.commit_nodes():
            record: dict = {
                "id": node.node_id,
                "type": "commit",
                "sha": node.sha,
                "kind": node.kind,
                "author_time": node.author_time,
                "commit_time": node.commit_time,
                "message": node.message,
                "changes": [_change_to_doc(c) for c in node.changes],
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
            nodes.append(record)
        for path in self.file_nodes():
            nodes.append({"id": f"file:{path}", "type": "file", "path": path})
        for path, name in self.function_nodes():
            nodes.append(
                {
                    "id": f"function:{path}::{name}",
                    "type": "function",
                    "name": name,
                    "file": path,
                }
            )
        edges = [
            {"kind": e.kind, "from": e.src, "to": e.dst} for e in self.edges()
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "bfc": self.bfc.sha,
            "config": {
                "max_depth": self.config.max_depth,
                "candidate_cap": self.config.candidate_cap,
                "top_k": self.config.top_k,
            },
            "nodes": nodes,
            "edges": edges,
        }

    @classmethod
    def from_document(cls, document: dict) -> "TemporalKnowledgeGraph":
        try:
            version = document["schema_version"]
            if version != SCHEMA_VERSION:
                raise MalformedDocument(f"unsupported schema_version {version!r}")
            cfg_doc = document["config"]
            cfg = TkgConfig(
                max_depth=int(cfg_doc["max_depth"]),
                candidate_cap=int(cfg_doc["candidate_cap"]),
                top_k=int(cfg_doc["top_k"]),
            )
            graph = cls(cfg)
            for record in document["nodes"]:
                if record["type"] != "commit":
                    continue
                stats_doc = record.get("blame_stats")
                stats = None
                if stats_doc is not None:
                    stats = BlameStats(
                        total_blame_commits=int(stats_doc["total_blame_commits"]),
                        single_responsible=bool(stats_doc["single_responsible"]),
                        dominant_commit=stats_doc["dominant_commit"],
                        dominant_fraction=float(stats_doc["dominant_fraction"]),
                    )
                graph.add_commit(
                    CommitNode(
                        sha=record["sha"],
                        kind=record["kind"],
                        author_time=int(record["author_time"]),
                        commit_time=int(record["commit_time"]),
                        message=record["message"],
                        changes=tuple(
                            _change_from_doc(c) for c in record["changes"]
                        ),
                        blame_stats=stats,
                        used_fallback=record.get("used_fallback"),
                    )
                )
            graph.bfc  # must exist
        except MalformedDocument:
            raise
        except (KeyError, TypeError, ValueError, UnknownNode) as exc:
            raise MalformedDocument(f"bad graph document: {exc}") from exc
        return graph

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "TemporalKnowledgeGraph":
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"not valid JSON: {exc}") from exc
        if not isinstance(document, dict):
            raise MalformedDocument("top level must be an object")
        return cls.from_document(document)


def _change_to_doc(change: FileChange) -> dict:
    return {
        "old_path": change.old_path,
        "new_path": change.new_path,
        "binary": change.binary,
        "hunks": [
            {
                "old_start": h.old_start,
                "old_count": h.old_count,
                "new_start": h.new_start,
                "new_count": h.new_count,
                "header_context": h.header_context,
                "deleted": [[n, t] for n, t in h.deleted_lines],
                "added": [[n, t] for n, t in h.added_lines],
            }
            for h in change.hunks
        ],
    }


def _change_from_doc(doc: dict) -> FileChange:
    return FileChange(
        old_path=doc["old_path"],
        new_path=doc["new_path"],
        binary=bool(doc.get("binary", False)),
        hunks=tuple(
            DiffHunk(
                old_start=int(h["old_start"]),
                old_count=int(h["old_count"]),
                new_start=int(h["new_start"]),
                new_count=int(h["new_count"]),
                header_context=h["header_context"],
                deleted_lines=tuple((int(n), t) for n, t in h["deleted"]),
                added_lines=tuple((int(n), t) for n, t in h["added"]),
            )
            for h in doc["hunks"]
        ),
    )


def build_graph(
    repo: GitRepo,
    bfc: CommitId,
    candidates: Mapping[CommitId, str],
    cfg: TkgConfig,
    blame_set: Optional[BlameSet] = None,
    sanitize: bool = True,
) -> TemporalKnowledgeGraph:
    """Materialize the graph for a labeled candidate set.

    Messages are sanitized unless explicitly disabled; blame statistics
    (and the fallback flag) are attached to the fix node when a blame
    set is supplied.
    """
    graph = TemporalKnowledgeGraph(cfg)
    for sha, kind in candidates.items():
        record = repo.read_commit(sha)
        changes = repo.compute_diff(sha)
        message = sanitize_message(record.message_raw) if sanitize else record.message_raw
        stats = None
        used_fallback = None
        if kind == KIND_BFC and blame_set is not None:
            stats = compute_blame_stats(blame_set)
            used_fallback = blame_set.used_fallback
        graph.add_commit(
            CommitNode(
                sha=record.id,
                kind=kind,
                author_time=record.author_time,
                commit_time=record.commit_time,
                message=message,
                changes=changes,
                blame_stats=stats,
                used_fallback=used_fallback,
            )
        )
    return graph
