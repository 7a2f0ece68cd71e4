"""Attack evaluation: balanced accuracy, precision, recall and advantage.

IN is the positive class.  Accuracy is always the balanced form
``(recall + true-negative rate) / 2``, independent of how many members and
non-members are evaluated.  Precision is ``None`` when the adversary never
answers IN.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import Adversary, BlackBox, decide_all
from .data import LabeledDataset
from .errors import RejectedInputError

METRICS = ("accuracy", "precision", "recall", "advantage")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def n_in(self) -> int:
        return self.tp + self.fn

    @property
    def n_out(self) -> int:
        return self.fp + self.tn

    @classmethod
    def from_decisions(cls, decided_in: np.ndarray, is_member: np.ndarray) -> "ConfusionCounts":
        d = np.asarray(decided_in, dtype=bool)
        m = np.asarray(is_member, dtype=bool)
        return cls(tp=int(np.sum(d & m)), fp=int(np.sum(d & ~m)),
                   tn=int(np.sum(~d & ~m)), fn=int(np.sum(~d & m)))

    def rates(self) -> dict[str, float | None]:
        recall = self.tp / self.n_in if self.n_in else None
        tnr = self.tn / self.n_out if self.n_out else None
        acc = (recall + tnr) / 2 if recall is not None and tnr is not None else None
        flagged = self.tp + self.fp
        return {
            "accuracy": acc,
            "precision": self.tp / flagged if flagged else None,
            "recall": recall,
            "advantage": 2 * acc - 1 if acc is not None else None,
        }


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float | None]]
    overall: dict[str, float | None]
    counts: ConfusionCounts
    class_counts: dict[int, ConfusionCounts]
    repeats: int = 1
    dispersion: dict[str, float] = field(default_factory=lambda: {m: 0.0 for m in METRICS})
    undefined_count: dict[str, int] = field(default_factory=lambda: {m: 0 for m in METRICS})

    def to_rows(self) -> list[dict]:
        rows = []
        for y in sorted(self.per_class):
            c = self.class_counts[y]
            rows.append({"class": y, **self.per_class[y], "n_in": c.n_in, "n_out": c.n_out})
        rows.append({"class": "overall", **self.overall,
                     "n_in": self.counts.n_in, "n_out": self.counts.n_out})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["class", *METRICS, "n_in", "n_out"]
        w.writerow(header)
        for row in self.to_rows():
            w.writerow(["" if row[k] is None else _fmt(row[k]) for k in header])
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_class": {str(y): v for y, v in sorted(self.per_class.items())},
            "counts": vars(self.counts),
            "class_counts": {str(y): vars(c) for y, c in sorted(self.class_counts.items())},
            "repeats": self.repeats,
            "dispersion": self.dispersion,
            "undefined_count": self.undefined_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _predictor(source) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(source, BlackBox):
        return source.query
    return source


def evaluate(adv: Adversary, source_forward, members: LabeledDataset,
             nonmembers: LabeledDataset) -> MetricsReport:
    """Query the victim on both populations and score the adversary."""
    if len(members) == 0 or len(nonmembers) == 0:
        raise RejectedInputError("members and non-members must both be nonempty")
    if members.id_set() & nonmembers.id_set():
        raise RejectedInputError("members and non-members share record ids")
    query = _predictor(source_forward)
    labels = np.concatenate([members.y, nonmembers.y])
    V = np.concatenate([query(members.X), query(nonmembers.X)])
    is_member = np.concatenate([np.ones(len(members), bool), np.zeros(len(nonmembers), bool)])
    decided = decide_all(adv, labels, V)
    return report_from_decisions(decided, is_member, labels)


def report_from_decisions(decided_in, is_member, labels) -> MetricsReport:
    decided_in = np.asarray(decided_in, dtype=bool)
    is_member = np.asarray(is_member, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    class_counts = {
        int(y): ConfusionCounts.from_decisions(decided_in[labels == y], is_member[labels == y])
        for y in np.unique(labels)}
    counts = ConfusionCounts.from_decisions(decided_in, is_member)
    overall = counts.rates()
    undefined = {m: int(overall[m] is None) for m in METRICS}
    return MetricsReport({y: c.rates() for y, c in class_counts.items()}, overall, counts,
                         class_counts, undefined_count=undefined)


def _mean_std(values: Sequence[float | None]) -> tuple[float | None, float, int]:
    defined = [v for v in values if v is not None]
    missing = len(values) - len(defined)
    if not defined:
        return None, 0.0, missing
    mean = math.fsum(defined) / len(defined)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in defined) / len(defined))
    return mean, std, missing


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and population standard deviation across repeated attacks.

    Undefined values are left out of the mean and counted in
    ``undefined_count``.  Sums are exactly rounded, so the result does not
    depend on report order.
    """
    if not reports:
        raise RejectedInputError("nothing to aggregate")
    universe = set(reports[0].per_class)
    if any(set(r.per_class) != universe for r in reports):
        raise RejectedInputError("reports cover different class sets")
    overall, dispersion, undefined = {}, {}, {}
    for m in METRICS:
        overall[m], dispersion[m], undefined[m] = _mean_std([r.overall[m] for r in reports])
    per_class = {y: {m: _mean_std([r.per_class[y][m] for r in reports])[0] for m in METRICS}
                 for y in sorted(universe)}
    counts = ConfusionCounts()
    class_counts = {y: ConfusionCounts() for y in universe}
    for r in reports:
        counts = counts + r.counts
        for y in universe:
            class_counts[y] = class_counts[y] + r.class_counts[y]
    return MetricsReport(per_class, overall, counts, class_counts,
                         repeats=sum(r.repeats for r in reports),
                         dispersion=dispersion, undefined_count=undefined)
