"""Dataset-level labels and the ground-truth pairs file."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class Label(str, enum.Enum):
    COMPLIANT = "Compliant"
    NON_COMPLIANT = "NonCompliant"
    IRRELEVANT = "Irrelevant"

    @property
    def short(self) -> str:
        return {"Compliant": "C", "NonCompliant": "NC", "Irrelevant": "IR"}[self.value]

    @classmethod
    def parse(cls, text: str) -> Label:
        key = "".join(ch for ch in str(text).lower() if ch.isalnum())
        table = {
            "compliant": cls.COMPLIANT,
            "c": cls.COMPLIANT,
            "noncompliant": cls.NON_COMPLIANT,
            "nc": cls.NON_COMPLIANT,
            "irrelevant": cls.IRRELEVANT,
            "ir": cls.IRRELEVANT,
        }
        if key not in table:
            raise ValueError(f"unknown label {text!r}")
        return table[key]


LABEL_ORDER = (Label.COMPLIANT, Label.NON_COMPLIANT, Label.IRRELEVANT)

# When one requirement has several ground-truth rows, its requirement-level
# label is the first of these present.
LABEL_PRIORITY = (Label.NON_COMPLIANT, Label.COMPLIANT, Label.IRRELEVANT)

GROUND_TRUTH_COLUMNS = ("req_id", "reference_passage_id", "label")
CSV_LABELS = {Label.COMPLIANT: "compliant", Label.NON_COMPLIANT: "non_compliant", Label.IRRELEVANT: "irrelevant"}


@dataclass(frozen=True)
class LabeledPair:
    req_id: str
    reference_id: str
    true_label: Label


def load_ground_truth(path: str | Path) -> list[LabeledPair]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(GROUND_TRUTH_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        pairs = [
            LabeledPair(row["req_id"].strip(), (row["reference_passage_id"] or "").strip(), Label.parse(row["label"]))
            for row in reader
        ]
    check_unique(pairs)
    return pairs


def check_unique(pairs: Iterable[LabeledPair]) -> None:
    seen = set()
    for p in pairs:
        key = (p.req_id, p.reference_id)
        if key in seen:
            raise ValueError(f"duplicate ground-truth pair {key}")
        seen.add(key)


def write_ground_truth(pairs: Iterable[LabeledPair], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GROUND_TRUTH_COLUMNS)
        for p in pairs:
            writer.writerow([p.req_id, p.reference_id, CSV_LABELS[p.true_label]])


def requirement_labels(pairs: Iterable[LabeledPair]) -> dict[str, Label]:
    """Collapse pair rows into one label per requirement."""
    found: dict[str, set[Label]] = {}
    for p in pairs:
        found.setdefault(p.req_id, set()).add(p.true_label)
    return {rid: next(lbl for lbl in LABEL_PRIORITY if lbl in labels) for rid, labels in found.items()}
