"""spurscan command line.

Exit codes: 0 success, 1 usage/config/input error, 2 spurious-dominated
result (aggregate score <= 0) from ``analyze`` and ``score``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import SpurscanError

log = logging.getLogger("spurscan")

EXIT_OK, EXIT_ERROR, EXIT_SPURIOUS = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, which would read as "spurious-dominated"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def resolve_threads(flag) -> int:
    env = os.environ.get("SPURSCAN_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise SpurscanError(f"SPURSCAN_THREADS={env!r} is not an integer")
    else:
        n = flag if flag is not None else (os.cpu_count() or 1)
    if n < 1:
        raise SpurscanError("thread count must be >= 1")
    return n


def _verdict_code(aggregate: float) -> int:
    return EXIT_OK if aggregate > 0 else EXIT_SPURIOUS


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_map(args) -> int:
    from .pe_map import map_bytes
    rmap = map_bytes(Path(args.file).read_bytes())
    doc = rmap.to_json()
    if args.json:
        print(json.dumps(doc))
        return EXIT_OK
    print(f"file_len {doc['file_len']}  malformed {doc['malformed']}  code_section {doc['code_section']}")
    for r in doc["regions"]:
        print(f"  {r['kind']:<11} 0x{r['start']:08x}-0x{r['end']:08x}  ({r['end'] - r['start']} bytes)")
    return EXIT_OK


def _load_manifest(args):
    from .corpus import manifest_from_dir, read_manifest
    if args.manifest:
        return read_manifest(args.manifest)
    root = Path(args.input)
    if (root / "manifest.csv").is_file():
        return read_manifest(root / "manifest.csv")
    return manifest_from_dir(root)


def cmd_analyze(args) -> int:
    from .analysis import analyze, file_digest
    from .ig import IgConfig
    from .report import emit_json, format_table, summary_csv
    from .weights import load_weights

    raw = Path(args.weights).read_bytes()
    weights = load_weights(raw, expect_arch=args.arch)
    igc = IgConfig(steps=args.steps, target=args.target)
    manifest = _load_manifest(args)
    threads = resolve_threads(args.threads)
    log.info("%d files, %s window %d, %d IG steps, %d threads",
             len(manifest), weights.cfg.arch, weights.cfg.window, igc.steps, threads)
    report, bins = analyze(weights, manifest, igc, threads, args.bins, file_digest(raw))

    out = Path(args.out)
    out.write_bytes(emit_json(report))
    if args.summary:
        Path(args.summary).write_bytes(summary_csv(report))
    bins_out = Path(args.bins_out) if args.bins_out else out.with_name("bins.csv")
    bins_out.write_bytes(bins.to_csv())
    print(format_table(report))
    return _verdict_code(report.dataset.aggregate)


def cmd_score(args) -> int:
    from .report import format_table, parse_json, recompute, validate
    report = parse_json(Path(args.report).read_bytes())
    dataset, table = recompute(report)
    report.dataset, report.per_class = dataset, table
    validate(report)
    print(format_table(report))
    return _verdict_code(dataset.aggregate)


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck, small_config
    archs = ["malconv", "bbdnn"] if args.arch == "both" else [args.arch]
    worst = 0.0
    for arch in archs:
        rep = gradcheck(small_config(arch), args.seed, n_cells=args.cells, n_params=args.params)
        worst = max(worst, rep.max_rel_err)
        print(f"{arch}: max rel err input {rep.max_rel_err_input:.3e} ({rep.n_input_cells} cells), "
              f"params {rep.max_rel_err_params:.3e} ({rep.n_param_cells} params), "
              f"{rep.n_kink_skips} kink skips")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} max rel err {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_synth(args) -> int:
    from .corpus import CorpusEntry, CorpusManifest
    from .synth import PlantSpec, gen_dataset, toy_template
    out = Path(args.out)
    samples = gen_dataset(args.n, toy_template(), PlantSpec(args.plant, args.p), args.seed)
    entries = []
    for s in samples:
        rel = Path(s.label) / f"{s.name}.exe"
        (out / s.label).mkdir(parents=True, exist_ok=True)
        (out / rel).write_bytes(s.data)
        entries.append(CorpusEntry(rel.as_posix(), s.label, f"plant-{args.plant}"))
    (out / "manifest.csv").write_text(CorpusManifest(tuple(entries)).to_csv())
    print(f"wrote {len(samples)} files to {out} (marker in {args.plant}, p={args.p})")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .nn import ModelConfig
    from .synth import Sample, train_toy
    from .weights import write_weights
    cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
    args.manifest = None
    args.input = args.corpus
    manifest = _load_manifest(args)
    samples = [Sample(e.path, e.label, manifest.resolve(e).read_bytes()) for e in manifest.entries]
    res = train_toy(cfg, samples, epochs=args.epochs, lr=args.lr, seed=args.seed)
    write_weights(res.weights, args.out)
    print(f"trained {cfg.arch} on {len(samples)} files: final loss {res.losses[-1] if res.losses else float('nan'):.4f}, "
          f"training accuracy {res.accuracy:.3f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spurscan", description="Measure reliance of raw-byte malware detectors on spurious PE regions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("map", help="print the region map of a PE file")
    s.add_argument("file")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("analyze", help="IG + region scores over a corpus")
    s.add_argument("--weights", required=True)
    s.add_argument("--arch", choices=["malconv", "bbdnn"], help="fail unless the weight file matches")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="CSV with header path,label,family")
    src.add_argument("--input", help="directory laid out as {goodware,malware}/[family/]file")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--target", choices=["score", "logit"], default="score")
    s.add_argument("--out", default="report.json")
    s.add_argument("--summary", help="per-class summary CSV (one row per class)")
    s.add_argument("--bins", type=int, default=200)
    s.add_argument("--bins-out", help="default: bins.csv next to --out")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("score", help="recompute and print the table of a report")
    s.add_argument("report")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    s.add_argument("--arch", choices=["malconv", "bbdnn", "both"], default="both")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cells", type=int, default=200)
    s.add_argument("--params", type=int, default=200)
    s.add_argument("--tol", type=float, default=5e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a planted synthetic corpus")
    s.add_argument("--plant", choices=["dos", "slack", "overlay", "code"], required=True)
    s.add_argument("--p", type=float, default=1.0)
    s.add_argument("--n", type=int, default=100, help="files per class")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-toy", help="train a small detector on a synthetic corpus")
    s.add_argument("--config", required=True, help="ModelConfig JSON")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpurscanError, OSError, ValueError) as exc:
        print(f"spurscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
