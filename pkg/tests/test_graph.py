"""Graph construction: sanitization, candidate collection, queries, export."""

import pytest

from bicsearch import (
    MalformedDocument,
    TemporalKnowledgeGraph,
    TkgConfig,
    UnknownNode,
    blame_for,
    build_graph,
    collect_candidates,
    sanitize_message,
)
from bicsearch.graph import (
    EDGE_DEFINED_IN,
    EDGE_MODIFIES_FILE,
    EDGE_MODIFIES_FUNCTION,
    EDGE_PRECEDES,
    KIND_BFC,
    KIND_BFC_ANCESTOR,
    KIND_BLAME,
    KIND_BLAME_ANCESTOR,
    extract_function_name,
    file_ancestors,
)

from conftest import RepoBuilder, make_change, make_node


class TestSanitizeMessage:
    def test_fixes_trailer_dropped(self):
        raw = 'fix overflow\n\nFixes: abc1234 ("mm: old patch")'
        assert sanitize_message(raw) == "fix overflow\n"

    def test_clean_message_untouched(self):
        assert sanitize_message("plain message") == "plain message"

    def test_inline_sha_replaced(self):
        assert (
            sanitize_message("see commit deadbeefcafe for context")
            == "see commit <SHA> for context"
        )

    def test_reverts_lines_dropped(self):
        raw = "undo change\n\nThis reverts commit " + "a" * 40 + ".\nReverts: abc1234\n"
        assert sanitize_message(raw) == "undo change\n\n"

    def test_leading_whitespace_and_case(self):
        assert sanitize_message("  fIxEs: 1234567\nbody") == "body"

    def test_short_and_long_hex_survive(self):
        assert sanitize_message("abc123") == "abc123"  # 6 chars: too short
        tail = "0" * 41
        assert sanitize_message(tail) == tail  # 41 chars: too long

    def test_uppercase_hex_untouched(self):
        assert sanitize_message("token DEADBEEFCAFE here") == "token DEADBEEFCAFE here"

    def test_idempotent(self):
        raw = "fix\n\nFixes: deadbeef\nsee " + "b" * 40 + " and cafe1234"
        once = sanitize_message(raw)
        assert sanitize_message(once) == once
        assert "<SHA>" in once

    def test_hex_inside_word_untouched(self):
        assert sanitize_message("xdeadbeef1") == "xdeadbeef1"


class TestExtractFunctionName:
    def test_c_style_signature(self):
        assert extract_function_name("static int foo_bar(int x)") == "foo_bar"

    def test_bare_name(self):
        assert extract_function_name("void f()") == "f"

    def test_empty(self):
        assert extract_function_name("") is None

    def test_no_identifier(self):
        assert extract_function_name("123 456") is None


class TestFileAncestors:
    def test_excludes_start_and_orders_newest_first(self, chain):
        repo, shas, _ = chain
        assert file_ancestors(repo, shas["c3"], "f.c", 10) == [shas["c2"], shas["c1"]]

    def test_depth_limit(self, chain):
        repo, shas, _ = chain
        assert file_ancestors(repo, shas["c3"], "f.c", 1) == [shas["c2"]]

    def test_start_not_touching_file(self, builder):
        builder.write("f.txt", "x\n")
        c1 = builder.commit("touch f")
        builder.write("g.txt", "y\n")
        c2 = builder.commit("touch g")
        assert file_ancestors(builder.repo(), c2, "f.txt", 10) == [c1]


class TestCollectCandidates:
    def test_single_blame_origin(self, builder):
        builder.write("f.txt", "keep\nold\n")
        a = builder.commit("base")
        builder.write("f.txt", "keep\nnew\n")
        bfc = builder.commit("fix")
        repo = builder.repo()
        kinds = collect_candidates(repo, bfc, blame_for(repo, bfc), TkgConfig())
        assert kinds == {bfc: KIND_BFC, a: KIND_BLAME}

    def test_chain_labels(self, chain):
        repo, shas, _ = chain
        blame = blame_for(repo, shas["c3"])
        kinds = collect_candidates(repo, shas["c3"], blame, TkgConfig())
        assert kinds == {
            shas["c3"]: KIND_BFC,
            shas["c2"]: KIND_BLAME,
            shas["c1"]: KIND_BLAME_ANCESTOR,
        }

    def test_bfc_side_walk_stops_before_blame(self, category_suite):
        scenario = category_suite["BfcAncestor"]
        from bicsearch import GitRepo

        repo = GitRepo(scenario["repo"])
        blame = blame_for(repo, scenario["bfc"])
        kinds = collect_candidates(repo, scenario["bfc"], blame, TkgConfig())
        assert kinds[scenario["bic"]] == KIND_BFC_ANCESTOR
        assert kinds[scenario["extra"]["base"]] == KIND_BLAME

    def test_blame_beats_blame_ancestor(self, builder):
        builder.write("f.txt", "a0\nb0\n")
        base = builder.commit("base")
        builder.write("f.txt", "a0\nb1\n")
        o2 = builder.commit("edit b")
        builder.write("f.txt", "a1\nb1\n")
        o1 = builder.commit("edit a")
        builder.write("f.txt", "a0\nb0\n")
        bfc = builder.commit("revert both")
        repo = builder.repo()
        kinds = collect_candidates(repo, bfc, blame_for(repo, bfc), TkgConfig())
        # o2 sits on o1's backward walk but keeps its higher-priority kind
        assert kinds == {
            bfc: KIND_BFC,
            o1: KIND_BLAME,
            o2: KIND_BLAME,
            base: KIND_BLAME_ANCESTOR,
        }

    def test_cap_truncation_favors_low_depth(self, tmp_path):
        b = RepoBuilder(tmp_path / "deep")
        versions = []
        for i in range(12):
            b.write("f.txt", f"line v{i}\nstable\n")
            versions.append(b.commit(f"edit {i}"))
        b.write("f.txt", "line v10\nstable\n")
        bfc = b.commit("fix: revert last edit")
        repo = b.repo()
        blame = blame_for(repo, bfc)
        assert blame.origins == {versions[11]}

        kinds = collect_candidates(repo, bfc, blame, TkgConfig(candidate_cap=5, top_k=5))
        non_bfc = {sha for sha, kind in kinds.items() if kind != KIND_BFC}
        assert len(non_bfc) == 5
        # the blame origin plus the four shallowest ancestors survive
        assert non_bfc == {versions[11], *versions[7:11]}

        full = collect_candidates(repo, bfc, blame, TkgConfig())
        assert len(full) == 13  # every commit present without the cap

    def test_candidates_after_the_fix_are_dropped(self, tmp_path):
        b = RepoBuilder(tmp_path / "skewed")
        b.write("f.txt", "one\ntwo\nthree\n")
        a = b.commit("base", when=100)
        b.write("f.txt", "one\nTWO\nthree\n")
        future = b.commit("edit two, dated late", when=600)
        b.write("f.txt", "ONE\nTWO\nthree\n")
        blame_commit = b.commit("edit one", when=300)
        b.write("f.txt", "one\nTWO\nthree\n")
        bfc = b.commit("revert one", when=500)
        repo = b.repo()
        kinds = collect_candidates(repo, bfc, blame_for(repo, bfc), TkgConfig())
        assert kinds == {
            bfc: KIND_BFC,
            blame_commit: KIND_BLAME,
            a: KIND_BLAME_ANCESTOR,
        }
        assert future not in kinds


class TestBuildGraph:
    @pytest.fixture()
    def chain_graph(self, chain):
        repo, shas, _ = chain
        blame = blame_for(repo, shas["c3"])
        kinds = collect_candidates(repo, shas["c3"], blame, TkgConfig())
        graph = build_graph(repo, shas["c3"], kinds, TkgConfig(), blame_set=blame)
        return graph, shas

    def test_chain_has_k_minus_1_precedes_edges(self, chain_graph):
        graph, shas = chain_graph
        precedes = [e for e in graph.edges() if e.kind == EDGE_PRECEDES]
        assert len(precedes) == 2
        assert graph.precedes_chain() == [shas["c1"], shas["c2"], shas["c3"]]

    def test_shared_function_nodes(self, chain_graph):
        graph, shas = chain_graph
        assert graph.function_nodes() == [("f.c", "main")]
        for sha in (shas["c2"], shas["c3"]):
            assert graph.functions_of(sha) == [("f.c", "main")]
        func_edges = [e for e in graph.edges() if e.kind == EDGE_MODIFIES_FUNCTION]
        assert {e.src for e in func_edges} == {
            f"commit:{shas['c2']}",
            f"commit:{shas['c3']}",
        }

    def test_defined_in_exactly_one_per_function(self, chain_graph):
        graph, _ = chain_graph
        defined = [e for e in graph.edges() if e.kind == EDGE_DEFINED_IN]
        assert len(defined) == len(graph.function_nodes()) == 1
        assert defined[0].dst == "file:f.c"

    def test_new_file_commit_has_no_function_node(self, chain_graph):
        graph, shas = chain_graph
        # c1 created f.c: its only hunk has no header context
        assert graph.functions_of(shas["c1"]) == []
        assert graph.files_of(shas["c1"]) == ["f.c"]

    def test_blame_stats_attached_to_fix_node(self, chain_graph):
        graph, shas = chain_graph
        node = graph.bfc
        assert node.sha == shas["c3"]
        assert node.blame_stats.single_responsible
        assert node.blame_stats.dominant_commit == shas["c2"]
        assert node.used_fallback is False
        assert graph.commit_node(shas["c2"]).blame_stats is None

    def test_messages_sanitized_by_default(self, chain, chain_graph):
        repo, shas, _ = chain
        graph, _ = chain_graph
        assert graph.bfc.message == "fix: restore x\n"
        raw_kinds = {shas["c3"]: KIND_BFC}
        raw = build_graph(repo, shas["c3"], raw_kinds, TkgConfig(), sanitize=False)
        assert "Fixes:" in raw.bfc.message

    def test_equal_times_break_ties_by_sha(self):
        graph = TemporalKnowledgeGraph(TkgConfig())
        graph.add_commit(make_node("f", KIND_BFC, 300, [make_change("f.c")]))
        graph.add_commit(make_node("b", KIND_BLAME, 100, [make_change("f.c")]))
        graph.add_commit(make_node("a", KIND_BLAME, 100, [make_change("f.c")]))
        assert graph.precedes_chain() == ["a" * 40, "b" * 40, "f" * 40]

    def test_duplicate_commit_rejected(self):
        graph = TemporalKnowledgeGraph(TkgConfig())
        graph.add_commit(make_node("a", KIND_BLAME, 1, [make_change("f.c")]))
        with pytest.raises(ValueError):
            graph.add_commit(make_node("a", KIND_BLAME, 2, [make_change("f.c")]))


class TestNeighbors:
    @pytest.fixture()
    def star(self):
        g = TemporalKnowledgeGraph(TkgConfig())
        func = lambda ch, kind, t: make_node(ch, kind, t, [make_change("f.c", "int g(void)")])
        g.add_commit(func("a", KIND_BLAME, 900))  # query center
        g.add_commit(func("b", KIND_BLAME, 800))
        g.add_commit(func("c", KIND_BLAME, 700))
        g.add_commit(func("3", KIND_BLAME, 700))  # same kind+time as c
        g.add_commit(func("d", KIND_BLAME_ANCESTOR, 950))
        g.add_commit(func("e", KIND_BFC_ANCESTOR, 960))
        g.add_commit(make_node("1", KIND_BLAME, 990, [make_change("f.c")]))  # file only
        g.add_commit(make_node("2", KIND_BLAME, 999, [make_change("g.c", "int h(void)")]))
        g.add_commit(func("f", KIND_BFC, 1000))
        return g

    def test_function_sharers_come_first_in_kind_then_time_order(self, star):
        got = [n.sha[0] for n in star.neighbors("a" * 40)]
        # function sharers: blame newest-first with sha tie-break, then
        # lower-priority kinds; the file-only toucher trails despite being
        # newer; the other-file commit and the fix never appear
        assert got == ["b", "3", "c", "d", "e", "1"]

    def test_file_only_edge_kind_filter(self, star):
        got = [n.sha[0] for n in star.neighbors("a" * 40, edge_kinds=(EDGE_MODIFIES_FILE,))]
        assert set(got) == {"b", "c", "3", "d", "e", "1"}

    def test_function_only_edge_kind_filter(self, star):
        got = [n.sha[0] for n in star.neighbors("a" * 40, edge_kinds=(EDGE_MODIFIES_FUNCTION,))]
        assert got == ["b", "3", "c", "d", "e"]

    def test_unknown_node_rejected(self, star):
        with pytest.raises(UnknownNode):
            star.neighbors("9" * 40)

    def test_overlap_with_bfc(self, star):
        overlap = star.overlap_with_bfc("a" * 40)
        assert overlap == {
            "shared_files": ["f.c"],
            "shared_functions": ["f.c::g"],
        }
        # the file-only toucher shares the file but not the function
        assert star.overlap_with_bfc("1" * 40) == {
            "shared_files": ["f.c"],
            "shared_functions": [],
        }


class TestExportImport:
    def test_round_trip_preserves_structure(self, chain):
        repo, shas, _ = chain
        blame = blame_for(repo, shas["c3"])
        kinds = collect_candidates(repo, shas["c3"], blame, TkgConfig())
        graph = build_graph(repo, shas["c3"], kinds, TkgConfig(), blame_set=blame)

        loaded = TemporalKnowledgeGraph.loads(graph.dumps())
        assert loaded.precedes_chain() == graph.precedes_chain()
        assert loaded.commit_nodes() == graph.commit_nodes()
        assert loaded.edges() == graph.edges()
        assert loaded.config == graph.config
        assert loaded.bfc.blame_stats == graph.bfc.blame_stats
        # a second round trip is byte-identical
        assert loaded.dumps() == graph.dumps()

    def test_truncated_document(self, chain):
        repo, shas, _ = chain
        kinds = {shas["c3"]: KIND_BFC}
        graph = build_graph(repo, shas["c3"], kinds, TkgConfig())
        text = graph.dumps()
        with pytest.raises(MalformedDocument):
            TemporalKnowledgeGraph.loads(text[: len(text) // 2])

    def test_wrong_schema_version(self):
        with pytest.raises(MalformedDocument):
            TemporalKnowledgeGraph.from_document({"schema_version": 99})

    def test_missing_sections(self):
        with pytest.raises(MalformedDocument):
            TemporalKnowledgeGraph.from_document({"schema_version": 1})

    def test_document_without_bfc_node(self):
        graph = TemporalKnowledgeGraph(TkgConfig())
        graph.add_commit(make_node("f", KIND_BFC, 10, [make_change("f.c")]))
        doc = graph.to_document()
        for node in doc["nodes"]:
            if node.get("kind") == KIND_BFC:
                node["kind"] = KIND_BLAME
        with pytest.raises(MalformedDocument):
            TemporalKnowledgeGraph.from_document(doc)

    def test_non_object_top_level(self):
        with pytest.raises(MalformedDocument):
            TemporalKnowledgeGraph.loads("[1, 2]")

    def test_unknown_fields_ignored(self):
        graph = TemporalKnowledgeGraph(TkgConfig())
        graph.add_commit(make_node("f", KIND_BFC, 10, [make_change("f.c")]))
        doc = graph.to_document()
        doc["future_extension"] = {"x": 1}
        doc["nodes"][0]["annotations"] = ["y"]
        loaded = TemporalKnowledgeGraph.from_document(doc)
        assert loaded.bfc.sha == "f" * 40


class TestTkgConfig:
    def test_defaults(self):
        cfg = TkgConfig()
        assert (cfg.max_depth, cfg.candidate_cap, cfg.top_k) == (100, 200, 20)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"max_depth": 0},
            {"candidate_cap": 0},
            {"top_k": 0},
            {"max_depth": -5},
            {"top_k": 30, "candidate_cap": 10},
        ],
    )
    def test_invalid_limits_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TkgConfig(**kwargs)

    def test_top_k_equal_to_cap_allowed(self):
        assert TkgConfig(candidate_cap=20, top_k=20).top_k == 20
