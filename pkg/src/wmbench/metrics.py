"""Grading of model replies and the accuracy / performance-drop-rate math.

Accuracy over a condition is correct / graded, with unanswered items
(transport failures) excluded from the denominator. The performance drop
rate of a watermark condition is the percentage decrease of its accuracy
relative to the clean run: 100 * (acc_clean - acc_marked) / acc_clean.
Negative values (the watermark helped) are kept at full precision; table
cells are rounded for display only.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import VqaItem
from .watermark import WatermarkSpec

OPTION_LETTERS = ("A", "B", "C", "D")
CLEAN_CONDITION = "clean"

POSITION_COLUMNS = ("center", "scattered", "top_left")
CONTENT_COLUMNS = ("text", "symbol", "mask")
CONTENT_DISPLAY = {"text": "MARK", "symbol": "###", "mask": "MASK"}
POSITION_DISPLAY = {
    "center": "Center",
    "scattered": "Scattered",
    "top_left": "Top-left",
}


class UndefinedMetricError(ValueError):
    """Accuracy or PDR has no defined value for these inputs."""


@dataclass(frozen=True)
class EvalRecord:
    """Grading outcome for one item under one condition."""

    item_id: str
    condition_id: str
    parsed_answer: frozenset[str]
    correct: bool
    unanswered: bool = False


_STANDALONE = re.compile(r"(?<![A-Za-z0-9])([A-Da-d])(?![A-Za-z0-9])")
_LINE_START = re.compile(r"^\s*([A-Da-d])[.)]", re.MULTILINE)


def parse_answer(
    raw_text: str,
    category: str,
    options: dict[str, str] | None = None,
) -> frozenset[str]:
    """Extract option letters from free-form reply text. Total function.

    Tried in priority order: standalone letters anywhere in the text, then
    a letter followed by '.' or ')' at a line start, then an exact
    full-text match against one option string (when options are given).
    Single-choice categories keep only the first letter found; ChartM
    keeps all distinct letters in A-D order. No match yields the empty
    set, which grades as wrong rather than unanswered.
    """
    letters: list[str] = [m.group(1).upper() for m in _STANDALONE.finditer(raw_text)]
    if not letters:
        letters = [m.group(1).upper() for m in _LINE_START.finditer(raw_text)]
    if not letters and options:
        normalized = raw_text.strip().lower()
        for letter in OPTION_LETTERS:
            text = options.get(letter, "")
            if text and normalized == text.strip().lower():
                letters = [letter]
                break
    if not letters:
        return frozenset()
    if category == "ChartM":
        return frozenset(letters)
    return frozenset(letters[:1])


def grade(item: VqaItem, raw_text: str, condition_id: str) -> EvalRecord:
    """Score one reply: correct iff the parsed set equals the answer set."""
    parsed = parse_answer(raw_text, item.category, item.options)
    return EvalRecord(
        item_id=item.id,
        condition_id=condition_id,
        parsed_answer=parsed,
        correct=parsed == item.answer,
    )


def unanswered_record(item: VqaItem, condition_id: str) -> EvalRecord:
    return EvalRecord(
        item_id=item.id,
        condition_id=condition_id,
        parsed_answer=frozenset(),
        correct=False,
        unanswered=True,
    )


def accuracy(records: list[EvalRecord]) -> float:
    """Fraction of graded records that are correct."""
    graded = [r for r in records if not r.unanswered]
    if not graded:
        raise UndefinedMetricError(
            "accuracy undefined: every record is unanswered"
        )
    return sum(r.correct for r in graded) / len(graded)


def pdr(acc_clean: float, acc_watermarked: float) -> float:
    """Percentage decrease in accuracy relative to the clean run."""
    if acc_clean == 0:
        raise UndefinedMetricError("PDR undefined: clean accuracy is zero")
    return 100.0 * (acc_clean - acc_watermarked) / acc_clean


@dataclass
class ConditionResult:
    """Aggregates for one condition of one dataset."""

    accuracy: float | None
    correct: int
    graded: int
    unanswered: int
    pdr: float | None

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "graded": self.graded,
            "unanswered": self.unanswered,
            "pdr": self.pdr,
        }


@dataclass
class RunReport:
    """Per-dataset, per-condition aggregates plus run provenance."""

    results: dict[str, dict[str, ConditionResult]]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metadata": self.metadata,
            "results": {
                ds: {cond: cell.to_json() for cond, cell in conds.items()}
                for ds, conds in self.results.items()
            },
        }


def _summarize(records: list[EvalRecord]) -> tuple[float | None, int, int, int]:
    graded = [r for r in records if not r.unanswered]
    unanswered = len(records) - len(graded)
    correct = sum(r.correct for r in graded)
    acc = correct / len(graded) if graded else None
    return acc, correct, len(graded), unanswered


def aggregate(
    records: dict[str, dict[str, list[EvalRecord]]],
    conditions: dict[str, WatermarkSpec],
    metadata: dict | None = None,
) -> RunReport:
    """Reduce graded records (dataset -> condition -> records) to a report.

    Every dataset must include a clean condition; PDR for each watermark
    condition is computed against that dataset's clean accuracy and left
    undefined (None) when the clean accuracy is zero.
    """
    results: dict[str, dict[str, ConditionResult]] = {}
    for dataset_name, by_condition in records.items():
        if CLEAN_CONDITION not in by_condition:
            raise UndefinedMetricError(
                f"dataset {dataset_name!r} has no clean baseline condition"
            )
        acc_clean, c, g, u = _summarize(by_condition[CLEAN_CONDITION])
        cells: dict[str, ConditionResult] = {
            CLEAN_CONDITION: ConditionResult(acc_clean, c, g, u, None)
        }
        for cond_id, recs in by_condition.items():
            if cond_id == CLEAN_CONDITION:
                continue
            acc, c, g, u = _summarize(recs)
            cell_pdr = None
            if acc is not None and acc_clean:
                cell_pdr = pdr(acc_clean, acc)
            cells[cond_id] = ConditionResult(acc, c, g, u, cell_pdr)
        results[dataset_name] = cells
    meta = dict(metadata or {})
    meta.setdefault(
        "conditions", {cid: spec.to_json() for cid, spec in conditions.items()}
    )
    return RunReport(results=results, metadata=meta)


@dataclass
class PdrTable:
    """A models x (dataset x column) PDR table with per-dataset maxima marked."""

    axis: str  # "position" or "content"
    columns: tuple[str, ...]
    datasets: tuple[str, ...]
    rows: list[tuple[str, dict[tuple[str, str], float | None]]]
    highlights: set[tuple[str, str, str]]  # (row, dataset, column)

    def cell(self, row_label: str, dataset: str, column: str) -> float | None:
        for label, cells in self.rows:
            if label == row_label:
                return cells.get((dataset, column))
        raise KeyError(row_label)


def _spec_axis_value(spec: WatermarkSpec, axis: str) -> str:
    return spec.position if axis == "position" else spec.content.kind


def _build_table(reports: list[RunReport], axis: str, columns) -> PdrTable:
    datasets: list[str] = []
    for report in reports:
        for name in report.results:
            if name not in datasets:
                datasets.append(name)

    rows: list[tuple[str, dict[tuple[str, str], float | None]]] = []
    for report in reports:
        model = report.metadata.get("model", "model")
        spec_by_id = {
            cid: WatermarkSpec.from_json(obj)
            for cid, obj in report.metadata.get("conditions", {}).items()
            if obj is not None and cid != CLEAN_CONDITION
        }
        cells: dict[tuple[str, str], float | None] = {}
        for dataset, conds in report.results.items():
            for column in columns:
                values = [
                    cell.pdr
                    for cond_id, cell in conds.items()
                    if cond_id != CLEAN_CONDITION
                    and cell.pdr is not None
                    and cond_id in spec_by_id
                    and _spec_axis_value(spec_by_id[cond_id], axis) == column
                ]
                cells[(dataset, column)] = (
                    sum(values) / len(values) if values else None
                )
        rows.append((model, cells))

    if rows:
        avg: dict[tuple[str, str], float | None] = {}
        for key in rows[0][1]:
            values = [cells[key] for _, cells in rows if cells.get(key) is not None]
            avg[key] = sum(values) / len(values) if values else None
        rows.append(("AVG", avg))

    highlights: set[tuple[str, str, str]] = set()
    for label, cells in rows:
        for dataset in datasets:
            present = [
                (col, cells[(dataset, col)])
                for col in columns
                if cells.get((dataset, col)) is not None
            ]
            if present:
                best = max(present, key=lambda kv: kv[1])
                highlights.add((label, dataset, best[0]))

    return PdrTable(
        axis=axis,
        columns=tuple(columns),
        datasets=tuple(datasets),
        rows=rows,
        highlights=highlights,
    )


def position_table(reports: list[RunReport]) -> PdrTable:
    """PDR by watermark position (Center | Scattered | Top-left per dataset)."""
    return _build_table(reports, "position", POSITION_COLUMNS)


def content_table(reports: list[RunReport]) -> PdrTable:
    """PDR by watermark content (MARK | ### | MASK per dataset)."""
    return _build_table(reports, "content", CONTENT_COLUMNS)


def _column_display(axis: str, column: str) -> str:
    return (
        POSITION_DISPLAY[column] if axis == "position" else CONTENT_DISPLAY[column]
    )


def write_table_csv(table: PdrTable, path: str | Path) -> None:
    """One header row of dataset:column pairs, then one row per model."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["Model"] + [
            f"{ds}:{_column_display(table.axis, col)}"
            for ds in table.datasets
            for col in table.columns
        ]
        writer.writerow(header)
        for label, cells in table.rows:
            row: list[str] = [label]
            for ds in table.datasets:
                for col in table.columns:
                    value = cells.get((ds, col))
                    row.append("n/a" if value is None else f"{value:.4f}")
            writer.writerow(row)


def format_table(table: PdrTable) -> str:
    """Monospace rendering with per-dataset maxima flagged by '*'."""
    headers = [
        f"{ds}:{_column_display(table.axis, col)}"
        for ds in table.datasets
        for col in table.columns
    ]
    label_width = max([len(label) for label, _ in table.rows] + [5]) + 2
    widths = [max(len(h), 6) + 2 for h in headers]
    lines = [
        "".ljust(label_width)
        + "".join(h.rjust(w) for h, w in zip(headers, widths))
    ]
    for label, cells in table.rows:
        line = label.ljust(label_width)
        i = 0
        for ds in table.datasets:
            for col in table.columns:
                value = cells.get((ds, col))
                if value is None:
                    text = "n/a"
                else:
                    text = f"{value:.0f}"
                    if (label, ds, col) in table.highlights:
                        text += "*"
                line += text.rjust(widths[i])
                i += 1
        lines.append(line)
    return "\n".join(lines)
