"""Shared fixtures: deterministic git repositories built per scenario.

All commits use pinned author/committer identity and timestamps, so
fixture shas are stable within a test session and the repositories can
be shared session-wide.
"""

from __future__ import annotations

import os
import subprocess
from pathlib import Path

import pytest

from bicsearch import CommitNode, DiffHunk, FileChange, GitRepo

GIT_ENV = {
    "GIT_CONFIG_GLOBAL": "/dev/null",
    "GIT_CONFIG_SYSTEM": "/dev/null",
    "GIT_AUTHOR_NAME": "Fixture Author",
    "GIT_AUTHOR_EMAIL": "author@example.invalid",
    "GIT_COMMITTER_NAME": "Fixture Committer",
    "GIT_COMMITTER_EMAIL": "committer@example.invalid",
}


def run_git(repo, *args, env_extra=None) -> str:
    env = dict(os.environ)
    env.update(GIT_ENV)
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(
        ["git", "-C", str(repo), *args], capture_output=True, text=True, env=env
    )
    if proc.returncode != 0:
        raise RuntimeError(f"git {' '.join(args)} failed: {proc.stderr}")
    return proc.stdout


class RepoBuilder:
    """Writes files and commits with a deterministic clock."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._clock = 1_700_000_000
        run_git(self.path, "init", "-q", "-b", "main")

    def git(self, *args) -> str:
        return run_git(self.path, *args)

    def write(self, relpath: str, content) -> None:
        target = self.path / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")

    def remove(self, relpath: str) -> None:
        (self.path / relpath).unlink()

    def move(self, old: str, new: str) -> None:
        self.git("mv", old, new)

    def commit(self, message: str, when: int | None = None) -> str:
        if when is None:
            when = self._clock
            self._clock += 100
        stamp = f"@{when} +0000"
        self.git("add", "-A")
        run_git(
            self.path,
            "commit",
            "-q",
            "--allow-empty",
            "-m",
            message,
            env_extra={"GIT_AUTHOR_DATE": stamp, "GIT_COMMITTER_DATE": stamp},
        )
        return self.head()

    def merge(self, ref: str, message: str, when: int | None = None) -> str:
        if when is None:
            when = self._clock
            self._clock += 100
        stamp = f"@{when} +0000"
        run_git(
            self.path,
            "merge",
            "-q",
            "--no-ff",
            "-m",
            message,
            ref,
            env_extra={"GIT_AUTHOR_DATE": stamp, "GIT_COMMITTER_DATE": stamp},
        )
        return self.head()

    def head(self) -> str:
        return self.git("rev-parse", "HEAD").strip()

    def repo(self) -> GitRepo:
        return GitRepo(self.path)


@pytest.fixture
def builder(tmp_path) -> RepoBuilder:
    return RepoBuilder(tmp_path / "repo")


def make_change(path, header="", deleted=(), added=((1, "x"),)) -> FileChange:
    """Single-hunk synthetic file change for graph-level tests."""
    hunk = DiffHunk(
        old_start=1,
        old_count=len(deleted),
        new_start=1,
        new_count=len(added),
        header_context=header,
        deleted_lines=tuple(deleted),
        added_lines=tuple(added),
    )
    return FileChange(old_path=path, new_path=path, hunks=(hunk,))


def make_node(sha_char, kind, t, changes) -> CommitNode:
    """Commit node with a 40-char sha built from one repeated character."""
    return CommitNode(
        sha=sha_char * 40,
        kind=kind,
        author_time=t,
        commit_time=t,
        message=f"msg {sha_char}",
        changes=tuple(changes),
    )


def build_chain_repo(path) -> tuple[RepoBuilder, dict]:
    """Three commits on one file: introduce, break, fix.

    c2 changes the buggy line, c3 restores it; blame of the fix points
    at c2 and c1 sits one history step behind it.
    """
    b = RepoBuilder(path)
    b.write("f.c", "int main() {\n  int x = 1;\n  return x;\n}\n")
    c1 = b.commit("add main")
    b.write("f.c", "int main() {\n  int x = 2;\n  return x;\n}\n")
    c2 = b.commit("tweak x")
    b.write("f.c", "int main() {\n  int x = 1;\n  return x;\n}\n")
    c3 = b.commit("fix: restore x\n\nFixes: " + c2[:12] + " (\"tweak x\")")
    return b, {"c1": c1, "c2": c2, "c3": c3}


@pytest.fixture
def chain(tmp_path):
    b, shas = build_chain_repo(tmp_path / "chain")
    return b.repo(), shas, b


# -- one repository per ground-truth category --------------------------------


def build_blame_scenario(path) -> dict:
    """bic's own line is deleted by the fix: blame hits it directly."""
    b = RepoBuilder(path)
    b.write("calc.c", "int scale(int v) {\n  return v * 2;\n}\n")
    base = b.commit("add scale")
    b.write("calc.c", "int scale(int v) {\n  return v * 3;\n}\n")
    bic = b.commit("raise factor")
    b.write("calc.c", "int scale(int v) {\n  return v * 2;\n}\n")
    bfc = b.commit("fix scale factor")
    return {
        "repo": str(b.path),
        "bfc": bfc,
        "bic": bic,
        "kind": "Blame",
        "depth": None,
        "extra": {"base": base},
    }


def build_blame_ancestor_scenario(path) -> dict:
    """A reformat sits between the bug and the fix: blame stops at the
    reformat, the bug is one file-history step behind it."""
    b = RepoBuilder(path)
    b.write("parse.c", "int parse(char *s) {\n  int n = atoi(s);\n  return n;\n}\n")
    base = b.commit("add parse")
    b.write("parse.c", "int parse(char *s) {\n  int n = atoi(s) + 1;\n  return n;\n}\n")
    bic = b.commit("offset result")
    b.write("parse.c", "int parse(char *s) {\n  int n = atoi(s)+1;\n  return n;\n}\n")
    reformat = b.commit("drop spaces")
    b.write("parse.c", "int parse(char *s) {\n  int n = atoi(s);\n  return n;\n}\n")
    bfc = b.commit("fix off by one")
    return {
        "repo": str(b.path),
        "bfc": bfc,
        "bic": bic,
        "kind": "BlameAncestor",
        "depth": 1,
        "extra": {"base": base, "reformat": reformat},
    }


def build_bfc_ancestor_scenario(path) -> dict:
    """The fix touches a line older than the bug, so blame skips the
    bug; it sits one step behind the fix in the same file's history."""
    b = RepoBuilder(path)
    b.write("io.c", "int open_it(void) {\n  int fd = do_open();\n  int mode = 1;\n  return fd;\n}\n")
    base = b.commit("add open_it")
    b.write("io.c", "int open_it(void) {\n  int fd = do_open();\n  int mode = 2;\n  return fd;\n}\n")
    bic = b.commit("switch mode")
    b.write("io.c", "int open_it(void) {\n  int fd = do_open_checked();\n  int mode = 2;\n  return fd;\n}\n")
    bfc = b.commit("use checked open")
    return {
        "repo": str(b.path),
        "bfc": bfc,
        "bic": bic,
        "kind": "BfcAncestor",
        "depth": 1,
        "extra": {"base": base},
    }


def build_blameless_scenario(path) -> dict:
    """The fix only inserts a missing check; the surrounding lines were
    last touched by the bug commit, so fallback blame reaches it."""
    b = RepoBuilder(path)
    b.write(
        "queue.c",
        "void push(queue *q, int v) {\n"
        "  lock(q);\n"
        "  q->items[q->n] = v;\n"
        "  q->n++;\n"
        "  unlock(q);\n"
        "}\n",
    )
    base = b.commit("add push")
    b.write(
        "queue.c",
        "void push(queue *q, int v) {\n"
        "  lock(q);\n"
        "  q->items[q->n++] = v;\n"
        "  q->len = q->n;\n"
        "  unlock(q);\n"
        "}\n",
    )
    bic = b.commit("track len inline")
    b.write(
        "queue.c",
        "void push(queue *q, int v) {\n"
        "  lock(q);\n"
        "  if (q->n >= q->cap) grow(q);\n"
        "  q->items[q->n++] = v;\n"
        "  q->len = q->n;\n"
        "  unlock(q);\n"
        "}\n",
    )
    bfc = b.commit("add capacity check")
    return {
        "repo": str(b.path),
        "bfc": bfc,
        "bic": bic,
        "kind": "Blameless",
        "depth": None,
        "extra": {"base": base, "fallback_hit": True},
    }


def build_unreachable_scenario(path) -> dict:
    """The bug lives in a file the fix never touches: no backward walk
    over the fix-changed files can reach it."""
    b = RepoBuilder(path)
    b.write("core.c", "int core(void) {\n  return run();\n}\n")
    b.write("util.c", "int util(void) {\n  return 0;\n}\n")
    base = b.commit("add core and util")
    b.write("util.c", "int util(void) {\n  return 1;\n}\n")
    bic = b.commit("change util result")
    b.write("core.c", "int core(void) {\n  return run_safely();\n}\n")
    bfc = b.commit("harden core entry")
    return {
        "repo": str(b.path),
        "bfc": bfc,
        "bic": bic,
        "kind": "Unreachable",
        "depth": None,
        "extra": {"base": base},
    }


@pytest.fixture(scope="session")
def category_suite(tmp_path_factory) -> dict:
    root = tmp_path_factory.mktemp("categories")
    return {
        "Blame": build_blame_scenario(root / "blame"),
        "BlameAncestor": build_blame_ancestor_scenario(root / "blame-ancestor"),
        "BfcAncestor": build_bfc_ancestor_scenario(root / "bfc-ancestor"),
        "Blameless": build_blameless_scenario(root / "blameless"),
        "Unreachable": build_unreachable_scenario(root / "unreachable"),
    }
