"""Report writers: delimited records plus rendered figures.

Every writer is deterministic for fixed input: keys are sorted, floats
are formatted with fixed precision, and figures carry no timestamps.
"""

from __future__ import annotations

import json
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIGURE_DPI = 120

_KIND_COLORS = {
    "Blame": "#2a6f97",
    "BlameAncestor": "#61a5c2",
    "BfcAncestor": "#89c2d9",
    "Blameless": "#f4a261",
    "Unreachable": "#adb5bd",
}


def write_jsonl(path, records: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, default=str))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_tsv(
    path,
    header: Sequence[str],
    rows: Sequence[Sequence],
    comment: Optional[str] = None,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    return str(value)


def metrics_rows(reports: Mapping[str, Mapping]) -> tuple[list[str], list[list]]:
    """Tabulate metric records ({precision, recall, f1, ...}) by name."""
    header = [
        "config",
        "precision",
        "recall",
        "f1",
        "true_positives",
        "total_cases",
    ]
    rows = []
    for name in reports:
        r = reports[name]
        rows.append(
            [
                name,
                float(r["precision"]),
                float(r["recall"]),
                float(r["f1"]),
                int(r["true_positives"]),
                int(r["total_cases"]),
            ]
        )
    return header, rows


def render_metrics_figure(
    reports: Mapping[str, Mapping], path, config_digest: Optional[str] = None
) -> None:
    """Grouped bars of precision/recall/F1 per configuration."""
    names = list(reports)
    metrics = ("precision", "recall", "f1")
    fig, ax = plt.subplots(figsize=(max(4.0, 1.8 * len(names) + 1.5), 3.6))
    width = 0.26
    for offset, metric in enumerate(metrics):
        xs = [i + (offset - 1) * width for i in range(len(names))]
        ys = [float(reports[name][metric]) for name in names]
        ax.bar(xs, ys, width=width, label=metric)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend(loc="upper right", fontsize="small")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path, config_digest)


def render_depth_coverage_figure(
    curves: Mapping[str, Sequence[Sequence[float]]],
    path,
    max_depth: Optional[int] = None,
    config_digest: Optional[str] = None,
) -> None:
    """Cumulative fraction of ancestor cases reached per history depth."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for kind in sorted(curves):
        points = curves[kind]
        if not points:
            continue
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.step(
            xs,
            ys,
            where="post",
            label=kind,
            color=_KIND_COLORS.get(kind),
        )
    if max_depth is not None:
        ax.set_xlim(0, max_depth)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("file-history depth")
    ax.set_ylabel("cumulative coverage")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower right", fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path, config_digest)


def render_category_figure(
    distribution: Mapping[str, Mapping],
    path,
    config_digest: Optional[str] = None,
) -> None:
    """Per-dataset stacked bars of category percentages."""
    datasets = list(distribution)
    kinds = list(_KIND_COLORS)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(datasets) + 2.0), 3.6))
    bottoms = [0.0] * len(datasets)
    for kind in kinds:
        values = [
            float(distribution[ds]["percentages"].get(kind, 0.0)) for ds in datasets
        ]
        ax.bar(
            range(len(datasets)),
            values,
            bottom=bottoms,
            label=kind,
            color=_KIND_COLORS[kind],
        )
        bottoms = [b + v for b, v in zip(bottoms, values)]
    ax.set_xticks(range(len(datasets)))
    ax.set_xticklabels(datasets, rotation=20, ha="right")
    ax.set_ylabel("% of ground-truth causes")
    ax.set_ylim(0, 105)
    ax.legend(loc="upper right", fontsize="x-small")
    fig.tight_layout()
    _save(fig, path, config_digest)


def _save(fig, path, config_digest: Optional[str]) -> None:
    metadata = {"Software": "bicsearch"}
    if config_digest:
        metadata["Description"] = f"config {config_digest}"
    fig.savefig(path, dpi=FIGURE_DPI, metadata=metadata)
    plt.close(fig)
