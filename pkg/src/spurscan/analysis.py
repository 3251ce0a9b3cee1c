"""End-to-end pipeline: corpus -> IG per file -> region scores -> report."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import CorpusManifest, ScanResult, scan
from .ig import IgConfig, integrated_gradients
from .nn import WeightStore
from .report import AnalysisReport, BinAccumulator, BinnedAttribution, SampleRecord, build_report
from .scoring import sample_scores

log = logging.getLogger(__name__)

STAT_WINDOWS = (102_400, 1_048_576)


@dataclass
class _Done:
    record: SampleRecord
    bin_sums: np.ndarray
    bin_counts: np.ndarray


def _analyze_one(weights: WeightStore, igc: IgConfig, manifest: CorpusManifest,
                 res: ScanResult, bins: BinAccumulator) -> _Done:
    cfg = weights.cfg
    data = manifest.resolve(res.entry).read_bytes()
    attr = integrated_gradients(cfg, weights, igc, data)
    scores = sample_scores(attr.values, res.rmap, cfg.window, res.entry.path)
    rec = SampleRecord(
        id=res.entry.path,
        path=res.entry.path,
        label=res.entry.label,
        family=res.entry.family,
        file_len=len(data),
        scores=scores,
        completeness_residual=attr.completeness_residual,
        prediction=attr.prediction,
        code_section=res.rmap.code_section_index,
    )
    return _Done(rec, *bins.partial(attr.values))


def analyze(weights: WeightStore, manifest: CorpusManifest, igc: IgConfig = IgConfig(),
            threads: int = 1, n_bins: int = 200,
            weights_digest: Optional[str] = None) -> tuple[AnalysisReport, BinnedAttribution]:
    """Score every parseable file of ``manifest`` against one detector.

    Unparseable files are logged and listed under ``rejected``. Output does
    not depend on ``threads``: per-file work is independent and every
    reduction runs in sample-id order.
    """
    cfg = weights.cfg
    results, stats = scan(manifest, sorted(set(STAT_WINDOWS) | {cfg.window}), threads)
    rejected = [{"path": r.entry.path, "error": r.error} for r in results if not r.ok]
    for r in rejected:
        log.warning("rejected %s: %s", r["path"], r["error"])
    todo = [r for r in results if r.ok]
    bins = BinAccumulator(n_bins, cfg.window)

    def work(r):
        log.info("analyzing %s", r.entry.path)
        return _analyze_one(weights, igc, manifest, r, bins)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = list(pool.map(work, todo))
    else:
        done = [work(r) for r in todo]

    done.sort(key=lambda d: d.record.id)
    for d in done:
        bins.add_partial(d.bin_sums, d.bin_counts)
        if d.record.scores.skipped:
            log.warning("skipped %s: zero attribution norm", d.record.id)

    model = {
        "arch": cfg.arch,
        "config_digest": cfg.digest(),
        "weights_sha256": weights_digest,
        "config": cfg.to_dict(),
    }
    report = build_report(model, igc.to_dict(), [d.record for d in done], stats.to_dict(), rejected)
    return report, bins.result()


def file_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
