"""Confusion matrices, per-class metrics, coverage curves and reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import MissingGroundTruth
from .labels import LABEL_ORDER, Label, LabeledPair, requirement_labels
from .retrieval import RetrievalResult, coverage

HEADLINE = Label.NON_COMPLIANT
STRATEGY_ORDER = ("io", "cot", "tot")
STRATEGY_NAMES = {"io": "IO", "cot": "CoT", "tot": "ToT"}


@dataclass(frozen=True)
class Prediction:
    req_id: str
    label: Label
    reference_id: str | None = None


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed ``[true][predicted]`` in LABEL_ORDER."""

    counts: tuple[tuple[int, int, int], ...]

    @classmethod
    def zeros(cls) -> ConfusionMatrix:
        return cls(((0, 0, 0),) * 3)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Label, Label]]) -> ConfusionMatrix:
        grid = [[0] * 3 for _ in range(3)]
        for true, pred in pairs:
            grid[LABEL_ORDER.index(true)][LABEL_ORDER.index(pred)] += 1
        return cls(tuple(tuple(row) for row in grid))

    def __post_init__(self):
        if len(self.counts) != 3 or any(len(r) != 3 for r in self.counts):
            raise ValueError("confusion matrix must be 3x3")
        if any(c < 0 for r in self.counts for c in r):
            raise ValueError("counts must be non-negative")

    def cell(self, true: Label, pred: Label) -> int:
        return self.counts[LABEL_ORDER.index(true)][LABEL_ORDER.index(pred)]

    def row_sum(self, true: Label) -> int:
        return sum(self.counts[LABEL_ORDER.index(true)])

    def col_sum(self, pred: Label) -> int:
        j = LABEL_ORDER.index(pred)
        return sum(r[j] for r in self.counts)

    @property
    def total(self) -> int:
        return sum(sum(r) for r in self.counts)

    def to_json(self) -> dict[str, Any]:
        return {
            "labels": [lbl.value for lbl in LABEL_ORDER],
            "counts": [list(r) for r in self.counts],
            "total": self.total,
        }


def confusion(
    predictions: Iterable[Prediction],
    ground_truth: Iterable[LabeledPair] | Mapping[str, Label],
) -> ConfusionMatrix:
    """Requirement-level matrix; pair-level when a prediction names its reference."""
    if isinstance(ground_truth, Mapping):
        by_req, by_pair = dict(ground_truth), {}
    else:
        pairs = list(ground_truth)
        by_req = requirement_labels(pairs)
        by_pair = {(p.req_id, p.reference_id): p.true_label for p in pairs}
    cells = []
    for p in predictions:
        if p.reference_id is not None:
            true = by_pair.get((p.req_id, p.reference_id))
        else:
            true = by_req.get(p.req_id)
        if true is None:
            raise MissingGroundTruth(p.req_id)
        cells.append((true, p.label))
    return ConfusionMatrix.from_pairs(cells)


@dataclass(frozen=True)
class ClassMetrics:
    """Percentages in [0, 100]."""

    precision: float
    recall: float
    f1: float


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(100 * num, den) if den else Fraction(0)


def f1_score(precision: Fraction | float, recall: Fraction | float) -> Fraction | float:
    total = precision + recall
    return 2 * precision * recall / total if total else 0 * total


def exact_metrics(matrix: ConfusionMatrix, cls: Label) -> tuple[Fraction, Fraction, Fraction]:
    diag = matrix.cell(cls, cls)
    p = _ratio(diag, matrix.col_sum(cls))
    r = _ratio(diag, matrix.row_sum(cls))
    return p, r, Fraction(f1_score(p, r))


def metrics_for(matrix: ConfusionMatrix, cls: Label) -> ClassMetrics:
    """One-vs-rest precision, recall and F1 for ``cls``; empty denominators give 0."""
    p, r, f = exact_metrics(matrix, cls)
    return ClassMetrics(float(p), float(r), float(f))


def metrics_from_pr(precision: float, recall: float) -> ClassMetrics:
    return ClassMetrics(precision, recall, float(f1_score(precision, recall)))


def macro(matrix: ConfusionMatrix) -> ClassMetrics:
    triples = [exact_metrics(matrix, c) for c in LABEL_ORDER]
    return ClassMetrics(*(float(sum(t[i] for t in triples) / 3) for i in range(3)))


# ---------------------------------------------------------------------------
# Coverage curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoveragePoint:
    threshold: float
    values: Mapping[str, float]


def coverage_curve(
    run_outputs: Mapping[str, Mapping[str, RetrievalResult]],
    ground_truth: Sequence[LabeledPair],
    passages: Mapping[str, str],
    thresholds: Sequence[float],
) -> list[CoveragePoint]:
    """Coverage per configuration at each threshold.

    ``run_outputs`` maps a configuration name to its per-requirement results,
    retrieved once at (or below) the smallest threshold.
    """
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    points = []
    for t in thresholds:
        values = {name: coverage(results, ground_truth, passages, t).value for name, results in sorted(run_outputs.items())}
        points.append(CoveragePoint(t, values))
    return points


def curve_csv(points: Sequence[CoveragePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = sorted(points[0].values) if points else []
    writer.writerow(["threshold"] + names)
    for pt in points:
        writer.writerow([f"{pt.threshold:.2f}"] + [f"{pt.values[n]:.4f}" for n in names])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    """One evaluated (retrieval mode, model, strategy) combination."""

    mode: str
    model: str
    strategy: str
    matrix: ConfusionMatrix

    @property
    def configuration(self) -> str:
        return f"{self.mode}/{self.model}"


def _r2(x: float) -> float:
    return round(x + 0.0, 2)


def _report_data(
    cells: Sequence[CellResult], curves: Sequence[CoveragePoint] | None, manifest: Mapping[str, Any] | None
) -> dict[str, Any]:
    strategies = [s for s in STRATEGY_ORDER if any(c.strategy == s for c in cells)]
    configs = sorted({c.configuration for c in cells})
    rows = []
    for name in configs:
        row: dict[str, Any] = {"configuration": name, "strategies": {}}
        for s in strategies:
            cell = next((c for c in cells if c.configuration == name and c.strategy == s), None)
            if cell is None:
                continue
            m = metrics_for(cell.matrix, HEADLINE)
            mac = macro(cell.matrix)
            row["strategies"][s] = {
                "headline": {"precision": _r2(m.precision), "recall": _r2(m.recall), "f1": _r2(m.f1)},
                "per_class": {
                    lbl.value: {k: _r2(v) for k, v in vars(metrics_for(cell.matrix, lbl)).items()} for lbl in LABEL_ORDER
                },
                "macro": {k: _r2(v) for k, v in vars(mac).items()},
                "confusion": cell.matrix.to_json(),
            }
        rows.append(row)
    data: dict[str, Any] = {"headline_class": HEADLINE.value, "strategies": strategies, "rows": rows}
    if curves:
        data["coverage"] = [
            {"threshold": _r2(p.threshold), "values": {k: round(v, 4) for k, v in sorted(p.values.items())}} for p in curves
        ]
    if manifest is not None:
        data["manifest"] = dict(manifest)
    return data


def _markdown(data: dict[str, Any]) -> str:
    strategies = data["strategies"]
    out = ["# Compliance evaluation", "", f"Headline class: {data['headline_class']} (one-vs-rest, percent).", ""]
    header = ["Configuration"] + [f"{STRATEGY_NAMES[s]} {m}" for s in strategies for m in ("P", "R", "F1")]
    out.append("| " + " | ".join(header) + " |")
    out.append("|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|")
    for row in data["rows"]:
        cells = [row["configuration"]]
        for s in strategies:
            h = row["strategies"].get(s, {}).get("headline")
            cells += [f"{h[k]:.2f}" for k in ("precision", "recall", "f1")] if h else ["-"] * 3
        out.append("| " + " | ".join(cells) + " |")
    out += ["", "## Confusion matrices", "", "Rows are true labels, columns predicted (C, NC, IR).", ""]
    for row in data["rows"]:
        for s in strategies:
            st = row["strategies"].get(s)
            if not st:
                continue
            counts = st["confusion"]["counts"]
            out.append(f"### {row['configuration']} {STRATEGY_NAMES[s]}")
            out.append("")
            out.append("| true \\ pred | C | NC | IR |")
            out.append("|---|---:|---:|---:|")
            for lbl, r in zip(("C", "NC", "IR"), counts):
                out.append(f"| {lbl} | " + " | ".join(str(x) for x in r) + " |")
            m = st["macro"]
            out.append("")
            out.append(f"Macro P/R/F1: {m['precision']:.2f} / {m['recall']:.2f} / {m['f1']:.2f}")
            out.append("")
    if "coverage" in data:
        names = sorted(data["coverage"][0]["values"])
        out += ["## Coverage", "", "| Threshold | " + " | ".join(names) + " |", "|---:|" + "---:|" * len(names)]
        for p in data["coverage"]:
            out.append(f"| {p['threshold']:.2f} | " + " | ".join(f"{p['values'][n]:.4f}" for n in names) + " |")
        out.append("")
    if "manifest" in data:
        out += ["## Run", ""]
        for k in sorted(data["manifest"]):
            out.append(f"- {k}: {json.dumps(data['manifest'][k], sort_keys=True)}")
        out.append("")
    return "\n".join(out).rstrip("\n") + "\n"


def render_report(
    cells: Sequence[CellResult],
    curves: Sequence[CoveragePoint] | None = None,
    fmt: str = "markdown",
    manifest: Mapping[str, Any] | None = None,
) -> str:
    data = _report_data(cells, curves, manifest)
    if fmt == "json":
        return json.dumps(data, sort_keys=True, indent=2) + "\n"
    if fmt == "markdown":
        return _markdown(data)
    raise ValueError("format must be 'json' or 'markdown'")


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
