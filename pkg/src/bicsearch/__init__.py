"""Bug-inducing commit identification via temporal knowledge graph search.

Pipeline for one fix commit: blame the deleted lines (or the context
around pure additions), collect candidate commits by walking file
history in both directions, build a typed graph over them, and let a
decision policy search the graph under step and diff-read budgets.
Ships an evaluation harness (precision/recall/F1, paired statistics,
ablations) and a category study for ground-truth causes.
"""

from .agent import (
    AgentBudget,
    BudgetExhausted,
    Candidate,
    Decision,
    DeterministicTopFitnessPolicy,
    FITNESS_BY_KIND,
    PolicyFailure,
    ScriptedPolicy,
    SearchState,
    ToolRequest,
    ToolResponse,
    list_candidates,
    query_node,
    read_node_content,
    run_search,
    traverse_graph,
)
from .blame import (
    BlamelessInput,
    BlameSet,
    BlameStats,
    blame_deleted_lines,
    blame_for,
    compute_blame_stats,
    fallback_context_blame,
    is_blameless,
)
from .categorize import (
    BicCategory,
    TemporalViolation,
    categorize,
    category_report,
)
from .evaluation import (
    AblationResult,
    EvalCase,
    KeyMismatch,
    McNemarResult,
    MetricsReport,
    breakdown_by_category,
    cohens_g,
    effect_label,
    load_dataset,
    mcnemar,
    run_ablation,
    run_pipeline,
    score,
)
from .gitrepo import (
    BlameEntry,
    CommitRecord,
    DiffHunk,
    FileAbsentAtRevision,
    FileChange,
    GitError,
    GitRepo,
    LineOutOfRange,
    RepoAccess,
    UnknownCommit,
    parse_unified_diff,
    render_unified_diff,
)
from .graph import (
    CommitNode,
    MalformedDocument,
    TemporalKnowledgeGraph,
    TkgConfig,
    TkgEdge,
    UnknownNode,
    build_graph,
    collect_candidates,
    sanitize_message,
)
from .llm import (
    AuthFailure,
    Cassette,
    CassetteMiss,
    LlmClient,
    LlmConfig,
    LlmPolicy,
    MalformedResponse,
    RateLimited,
    RecordingTransport,
    ReplayTransport,
    make_text_completer,
)

__version__ = "0.1.0"
