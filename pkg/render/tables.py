"""
Plain-text report rendering.

Comparison tables list one row per run variant and one "mean±sd" column per
metric, values in percent. PR curves are written as whitespace-separated
(recall, precision) pairs for external plotting tools.
"""
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from core.evaluation import METRIC_NAMES, PRResult

COLUMN_TITLES = {"accuracy": "Accuracy", "precision": "Precision", "recall": "Recall", "f1": "F1-score"}


def format_mean_sd(mean: float, sd: float) -> str:
    """Fractions rendered in percent as 'xx.xx±y.yy'."""
    return f"{100.0 * mean:.2f}±{100.0 * sd:.2f}"


class ComparisonTable:
    """
    Algorithm x metric table for one scope (a center or GTA).

    Attributes:
        title: Caption printed above the table
        rows: (variant name, {metric: (mean, sd)}) in insertion order
    """

    def __init__(self, title: str):
        self.title = title
        self.rows: List[Tuple[str, Dict[str, Tuple[float, float]]]] = []

    def add_row(self, name: str, stats: Dict[str, Tuple[float, float]]):
        self.rows.append((name, stats))

    def render(self) -> str:
        header = ["Algorithm"] + [COLUMN_TITLES[m] for m in METRIC_NAMES]
        body = [[name] + [format_mean_sd(*stats[m]) for m in METRIC_NAMES] for name, stats in self.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

        def line(cells: Sequence[str]) -> str:
            return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

        rule = "-" * len(line(header))
        out = [self.title, rule, line(header), rule]
        out.extend(line(row) for row in body)
        out.append(rule)
        return "\n".join(out) + "\n"


def render_report(summaries: Sequence[Tuple[str, Dict[str, Dict[str, Tuple[float, float]]]]]) -> str:
    """
    One table per center (C1..Cn by center id order) followed by the GTA table.

    Args:
        summaries: (variant name, FoldReport.summary) pairs, rows in this order
    """
    if not summaries:
        return "no runs\n"
    scopes = sorted((s for s in summaries[0][1] if s != "gta"), key=int)
    tables = []
    for position, scope in enumerate(scopes, 1):
        table = ComparisonTable(f"CLASSIFICATION RESULTS ON C{position} (center {scope}), mean±SD %")
        for name, summary in summaries:
            table.add_row(name, summary[scope])
        tables.append(table.render())
    gta_table = ComparisonTable("GLOBAL TEST AVERAGE (GTA), mean±SD %")
    for name, summary in summaries:
        gta_table.add_row(name, summary["gta"])
    tables.append(gta_table.render())
    return "\n".join(tables)


def write_pr_points(directory: Union[str, Path], stem: str, pr: PRResult) -> List[Path]:
    """One file per class with a defined curve: '<stem>_class<k>.txt'."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for k, curve in enumerate(pr.per_class):
        if curve.ap is None:
            continue
        path = directory / f"{stem}_class{k}.txt"
        lines = [f"# recall precision (AP={curve.ap!r})"]
        lines.extend(f"{r!r} {p!r}" for r, p in curve.points)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written
