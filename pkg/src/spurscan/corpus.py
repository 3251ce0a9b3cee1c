"""Labelled PE corpora: CSV manifests, directory discovery, window-coverage stats."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import BadHeader, BadLabel, DuplicatePath, SpurscanError
from .pe_map import PeLayout, RegionMap, parse_pe, region_map

LABELS = ("goodware", "malware")
MANIFEST_HEADER = ["path", "label", "family"]


@dataclass(frozen=True)
class CorpusEntry:
    path: str
    label: str
    family: Optional[str] = None


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[CorpusEntry, ...]
    root: Optional[Path] = None  # relative paths resolve against this

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: CorpusEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in self.entries:
            w.writerow([e.path, e.label, e.family or ""])
        return buf.getvalue()


def _validated(entries: Iterable[CorpusEntry], root: Optional[Path]) -> CorpusManifest:
    seen = set()
    out = []
    for e in entries:
        if e.label not in LABELS:
            raise BadLabel(f"{e.path}: label {e.label!r} is not one of {LABELS}")
        if e.path in seen:
            raise DuplicatePath(e.path)
        seen.add(e.path)
        out.append(e)
    return CorpusManifest(tuple(out), root)


def load_manifest(data: bytes | str, root: Optional[Path] = None) -> CorpusManifest:
    """Parse a ``path,label,family`` CSV manifest."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise BadHeader(f"manifest must start with header {','.join(MANIFEST_HEADER)}")
    entries = []
    for row in rows[1:]:
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) != 3:
            raise BadHeader(f"expected 3 columns, got {len(row)}: {row}")
        path, label, family = (c.strip() for c in row)
        entries.append(CorpusEntry(path, label, family or None))
    return _validated(entries, root)


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    return load_manifest(path.read_bytes(), path.parent)


def manifest_from_dir(root) -> CorpusManifest:
    """Build a manifest from ``<root>/{goodware,malware}/[<family>/]<file>``."""
    root = Path(root)
    entries = []
    for label in LABELS:
        base = root / label
        if not base.is_dir():
            continue
        for p in sorted(base.rglob("*")):
            if not p.is_file():
                continue
            rel = p.relative_to(root)
            family = rel.parts[1] if len(rel.parts) > 2 else None
            entries.append(CorpusEntry(rel.as_posix(), label, family))
    return _validated(entries, root)


@dataclass
class ScanResult:
    entry: CorpusEntry
    file_len: int = 0
    layout: Optional[PeLayout] = None
    rmap: Optional[RegionMap] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class CorpusStats:
    n_total: int = 0
    n_parsed: int = 0
    n_rejected: int = 0
    n_over_window: dict[int, int] = field(default_factory=dict)
    # file count per power-of-two size bucket: key k counts sizes in (2**(k-1), 2**k]
    size_histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_parsed": self.n_parsed,
            "n_rejected": self.n_rejected,
            "n_over_window": {str(k): v for k, v in sorted(self.n_over_window.items())},
            "size_histogram": {str(k): v for k, v in sorted(self.size_histogram.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "CorpusStats":
        return cls(d["n_total"], d["n_parsed"], d["n_rejected"],
                   {int(k): v for k, v in d["n_over_window"].items()},
                   {int(k): v for k, v in d["size_histogram"].items()})


def size_bucket(n: int) -> int:
    return 0 if n <= 1 else math.ceil(math.log2(n))


def scan_one(manifest: CorpusManifest, entry: CorpusEntry) -> ScanResult:
    res = ScanResult(entry)
    try:
        data = manifest.resolve(entry).read_bytes()
    except OSError as exc:
        res.error = f"io: {exc}"
        return res
    res.file_len = len(data)
    try:
        res.layout = parse_pe(data)
        res.rmap = region_map(res.layout)
    except SpurscanError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def compute_stats(results: Sequence[ScanResult], windows: Iterable[int]) -> CorpusStats:
    stats = CorpusStats(n_total=len(results))
    stats.n_over_window = {w: 0 for w in windows}
    for r in results:
        if not r.ok:
            stats.n_rejected += 1
            continue
        stats.n_parsed += 1
        for w in stats.n_over_window:
            stats.n_over_window[w] += r.file_len > w
        b = size_bucket(r.file_len)
        stats.size_histogram[b] = stats.size_histogram.get(b, 0) + 1
    return stats


def scan(manifest: CorpusManifest, windows: Iterable[int] = (102_400, 1_048_576),
         threads: int = 1) -> tuple[list[ScanResult], CorpusStats]:
    """Parse every file of the manifest; failures are recorded, never raised.

    Window counts cover parsed files only (rejected files never reach scoring).
    Results come back in manifest order whatever the thread count.
    """
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda e: scan_one(manifest, e), manifest.entries))
    else:
        results = [scan_one(manifest, e) for e in manifest.entries]
    return results, compute_stats(results, windows)
