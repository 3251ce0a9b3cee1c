"""Analysis reports: canonical JSON, per-class CSV summary, binned attributions."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import SpurscanError
from .scoring import (
    ClassTable,
    DatasetScore,
    RegionScores,
    aggregate,
    check_ratio_row,
    per_class_table,
)

SUMMARY_COLUMNS = ["model", "data", "DOS", "Slack", ".text", "Overlay", "Aggregate Score"]


class ReportInvalid(SpurscanError):
    pass


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _canon(obj: Any) -> str:
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialise non-finite float {x}")
        s = format(x, ".17g")
        # keep floats recognisable as floats after a parse
        if not any(c in s for c in ".en"):
            s += ".0"
        return s
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, Mapping):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{_canon(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_json(obj: Any) -> bytes:
    """Compact JSON with insertion-ordered keys and 17-significant-digit floats."""
    return (_canon(obj) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# report model
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    id: str
    path: str
    label: str
    file_len: int
    scores: RegionScores
    completeness_residual: float
    prediction: float
    code_section: Optional[int] = None
    family: Optional[str] = None

    def to_dict(self) -> dict:
        s = self.scores
        return {
            "id": self.id,
            "path": self.path,
            "label": self.label,
            "family": self.family,
            "file_len": self.file_len,
            "prediction": self.prediction,
            "completeness_residual": self.completeness_residual,
            "code_section": self.code_section,
            "scores": {
                "r_dos": s.r_dos, "r_slack": s.r_slack, "r_overlay": s.r_overlay,
                "r_text": s.r_text, "total_sq_norm": s.total_sq_norm, "skipped": s.skipped,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleRecord":
        sc = dict(d["scores"])
        sc["sample_id"] = d["id"]
        return cls(d["id"], d["path"], d["label"], d["file_len"], RegionScores.from_dict(sc),
                   d["completeness_residual"], d["prediction"], d.get("code_section"), d.get("family"))


@dataclass
class AnalysisReport:
    model: dict  # {"arch", "config_digest", "weights_sha256", "config"}
    ig: dict
    samples: list[SampleRecord]
    dataset: DatasetScore
    per_class: ClassTable
    corpus: dict
    rejected: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": "spurscan-report/1",
            "model": self.model,
            "ig": self.ig,
            "dataset": self.dataset.to_dict(),
            "per_class": self.per_class.to_dict(),
            "corpus": self.corpus,
            "rejected": self.rejected,
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnalysisReport":
        return cls(d["model"], d["ig"], [SampleRecord.from_dict(s) for s in d["samples"]],
                   DatasetScore.from_dict(d["dataset"]), ClassTable.from_dict(d["per_class"]),
                   d["corpus"], list(d.get("rejected", [])))


def build_report(model: dict, ig: dict, samples: Sequence[SampleRecord], corpus: dict,
                 rejected: Sequence[dict] = ()) -> AnalysisReport:
    """Assemble a report; raises AllSkipped when no sample is scorable."""
    samples = sorted(samples, key=lambda s: s.id)
    scores = [s.scores for s in samples]
    dataset = aggregate(scores)
    table = per_class_table([(s.label, s.scores) for s in samples])
    return AnalysisReport(model, ig, list(samples), dataset, table, corpus, list(rejected))


def emit_json(report: AnalysisReport) -> bytes:
    return canonical_json(report.to_dict())


def parse_json(data: bytes) -> AnalysisReport:
    return AnalysisReport.from_dict(json.loads(data))


def recompute(report: AnalysisReport) -> tuple[DatasetScore, ClassTable]:
    scores = [s.scores for s in report.samples]
    return aggregate(scores), per_class_table([(s.label, s.scores) for s in report.samples])


def validate(report: AnalysisReport) -> None:
    """Check a report's invariants; raise ReportInvalid listing every violation."""
    problems = []
    for s in report.samples:
        for p in check_ratio_row(s.scores.to_dict()):
            problems.append(f"{s.id}: {p}")
    ds, table = recompute(report)
    if ds != report.dataset:
        problems.append("dataset score is not reproducible from per-sample records")
    if table.to_dict() != report.per_class.to_dict():
        problems.append("per-class table is not reproducible from per-sample records")
    d = report.dataset
    if d.aggregate != d.r_text - (d.r_dos + d.r_slack + d.r_overlay):
        problems.append("aggregate != r_text - (r_dos + r_slack + r_overlay)")
    problems += [f"dataset: {p}" for p in check_ratio_row(d.to_dict())]
    if problems:
        raise ReportInvalid("; ".join(problems))


def validate_table_rows(rows: Sequence[Mapping[str, float]]) -> list[str]:
    """Invariant check for externally reported summary rows (r_* keys, optional aggregate)."""
    out = []
    for i, row in enumerate(rows):
        out += [f"row {i}: {p}" for p in check_ratio_row(row)]
    return out


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def summary_csv(report: AnalysisReport, model_name: Optional[str] = None) -> bytes:
    """One row per (model, class); the pooled aggregate is repeated on every row."""
    name = model_name or report.model.get("arch", "model")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    agg = report.dataset.aggregate
    for label, row in report.per_class.rows.items():
        w.writerow([name, label, _fmt(row.r_dos), _fmt(row.r_slack), _fmt(row.r_text),
                    _fmt(row.r_overlay), _fmt(agg)])
    return buf.getvalue().encode()


def format_table(report: AnalysisReport) -> str:
    lines = [f"{'data':<10} {'DOS':>8} {'Slack':>8} {'.text':>8} {'Overlay':>8} {'n':>6}"]
    rows = dict(report.per_class.rows)
    rows["all"] = report.dataset
    for label, r in rows.items():
        lines.append(f"{label:<10} {r.r_dos:8.4f} {r.r_slack:8.4f} {r.r_text:8.4f} {r.r_overlay:8.4f} {r.n_samples:6d}")
    verdict = "code-dominated" if report.dataset.aggregate > 0 else "SPURIOUS-DOMINATED"
    lines.append(f"aggregate score {report.dataset.aggregate:+.4f} ({verdict}; "
                 f"{report.dataset.n_skipped} skipped)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# binned attributions
# ---------------------------------------------------------------------------

@dataclass
class BinnedAttribution:
    n_bins: int
    width: int
    window: int
    sums: np.ndarray  # signed sum per bin
    counts: np.ndarray  # contributing positions per bin

    @property
    def means(self) -> np.ndarray:
        out = np.zeros(self.n_bins)
        nz = self.counts > 0
        out[nz] = self.sums[nz] / self.counts[nz]
        return out

    def edges(self) -> list[tuple[int, int]]:
        return [(i * self.width, min((i + 1) * self.width, self.window)) for i in range(self.n_bins)]

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start", "bin_end", "mean_attr"])
        for (a, b), m in zip(self.edges(), self.means):
            w.writerow([a, b, _fmt(m)])
        return buf.getvalue().encode()


class BinAccumulator:
    """Streaming version of :func:`bin_attributions` (no need to hold every vector)."""

    def __init__(self, n_bins: int, window: int):
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        self.n_bins = n_bins
        self.window = window
        self.width = max(1, -(-window // n_bins))
        self.sums = np.zeros(n_bins)
        self.counts = np.zeros(n_bins, dtype=np.int64)

    def partial(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        values = np.asarray(values, dtype=np.float64)[:self.window]
        idx = np.arange(values.size) // self.width
        return (np.bincount(idx, weights=values, minlength=self.n_bins),
                np.bincount(idx, minlength=self.n_bins))

    def add_partial(self, sums: np.ndarray, counts: np.ndarray) -> None:
        self.sums += sums
        self.counts += counts

    def add(self, values: np.ndarray) -> None:
        self.add_partial(*self.partial(values))

    def result(self) -> BinnedAttribution:
        return BinnedAttribution(self.n_bins, self.width, self.window, self.sums.copy(), self.counts.copy())


def bin_attributions(attrs: Sequence[np.ndarray], n_bins: int, window: Optional[int] = None) -> BinnedAttribution:
    """Mean signed attribution per equal-width byte-offset bin over ``[0, window)``.

    ``window`` defaults to the longest vector. Positions beyond a vector's end
    contribute nothing to its bins.
    """
    if window is None:
        window = max((len(a) for a in attrs), default=1)
    acc = BinAccumulator(n_bins, window)
    for a in attrs:
        acc.add(a)
    return acc.result()
