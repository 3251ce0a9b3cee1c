"""Region relevance ratios and the aggregate spurious-correlation score.

For each sample the squared l2 mass of its attribution vector is split over
PE regions and normalised by the total. Dataset means of the DOS, slack and
overlay ratios are then subtracted from the mean code ratio.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import AllSkipped
from .pe_map import RegionKind, RegionMap, select

RATIO_FIELDS = ("r_dos", "r_slack", "r_overlay", "r_text")
LABELS = ("goodware", "malware")


@dataclass(frozen=True)
class RegionScores:
    r_dos: float
    r_slack: float
    r_overlay: float
    r_text: float
    total_sq_norm: float
    skipped: bool = False
    sample_id: str = ""

    @property
    def aggregate(self) -> float:
        return self.r_text - (self.r_dos + self.r_slack + self.r_overlay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegionScores":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class DatasetScore:
    r_dos: float
    r_slack: float
    r_overlay: float
    r_text: float
    aggregate: float
    n_samples: int
    n_skipped: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetScore":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    @property
    def spurious_dominated(self) -> bool:
        return not self.aggregate > 0


def sq_norm(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(v, v))


def sample_scores(values: np.ndarray, rmap: RegionMap, window: int,
                  sample_id: str = "") -> RegionScores:
    """Normalised squared-norm share of each scored region for one sample.

    A zero attribution vector has no defined share; it is marked skipped.
    """
    values = np.asarray(values, dtype=np.float64)
    total = sq_norm(values)
    if total == 0.0:
        return RegionScores(0.0, 0.0, 0.0, 0.0, 0.0, True, sample_id)

    def ratio(kind):
        return sq_norm(select(values, rmap, kind, window)) / total

    return RegionScores(
        r_dos=ratio(RegionKind.DOS),
        r_slack=ratio(RegionKind.SLACK),
        r_overlay=ratio(RegionKind.OVERLAY),
        r_text=ratio(RegionKind.CODE),
        total_sq_norm=total,
        skipped=False,
        sample_id=sample_id,
    )


def aggregate(scores: Iterable[RegionScores]) -> DatasetScore:
    """Mean ratios over non-skipped samples and the aggregate score.

    Sums use math.fsum (correctly rounded), so the result does not depend on
    sample order; samples are still reduced in sample_id order.
    """
    scores = sorted(scores, key=lambda s: s.sample_id)
    kept = [s for s in scores if not s.skipped]
    if not kept:
        raise AllSkipped(f"no scorable samples ({len(scores)} given, all skipped or none)")
    n = len(kept)
    means = {f: math.fsum(getattr(s, f) for s in kept) / n for f in RATIO_FIELDS}
    agg = means["r_text"] - (means["r_dos"] + means["r_slack"] + means["r_overlay"])
    return DatasetScore(**means, aggregate=agg, n_samples=n, n_skipped=len(scores) - n)


@dataclass(frozen=True)
class ClassTable:
    """Per-class mean ratios plus the aggregate pooled over all samples."""

    rows: Mapping[str, DatasetScore]
    combined: DatasetScore

    def to_dict(self) -> dict:
        return {"rows": {k: v.to_dict() for k, v in self.rows.items()},
                "combined": self.combined.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassTable":
        return cls({k: DatasetScore.from_dict(v) for k, v in d["rows"].items()},
                   DatasetScore.from_dict(d["combined"]))


def per_class_table(labelled: Sequence[tuple[str, RegionScores]]) -> ClassTable:
    for label, _ in labelled:
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
    rows = {}
    for label in LABELS:
        members = [s for lab, s in labelled if lab == label]
        if any(not s.skipped for s in members):
            rows[label] = aggregate(members)
    return ClassTable(rows, aggregate([s for _, s in labelled]))


def check_ratio_row(row: Mapping[str, float], tol: float = 1e-9) -> list[str]:
    """Invariant violations of one row of ratios (empty list when valid)."""
    problems = []
    for f in RATIO_FIELDS:
        v = row[f]
        if not (-tol <= v <= 1 + tol):
            problems.append(f"{f}={v} outside [0, 1]")
    total = sum(row[f] for f in RATIO_FIELDS)
    if total > 1 + tol:
        problems.append(f"ratios sum to {total} > 1")
    agg = row.get("aggregate")
    if agg is not None and not (-1 - tol <= agg <= 1 + tol):
        problems.append(f"aggregate={agg} outside [-1, 1]")
    return problems


def class_mean_aggregate(rows: Mapping[str, Mapping[str, float]],
                         weights: Optional[Mapping[str, float]] = None) -> float:
    """Aggregate computed from per-class mean ratios (equal class weights by default)."""
    weights = weights or {k: 1.0 for k in rows}
    z = sum(weights.values())
    mean = {f: sum(weights[k] * rows[k][f] for k in rows) / z for f in RATIO_FIELDS}
    return mean["r_text"] - (mean["r_dos"] + mean["r_slack"] + mean["r_overlay"])
