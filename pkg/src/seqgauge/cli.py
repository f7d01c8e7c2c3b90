"""``seqgauge`` command line: extract, gen, run, curves.

Exit status is 0 on success, 2 for invalid input or usage, 1 for any other
failure. ``SEQGAUGE_LOG`` overrides ``--log-level``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluation as ev
from .corpus import (
    CorpusError,
    Kind,
    RawTrace,
    extract,
    generate_corpus,
    generator_specs_from_dict,
    write_corpus,
    write_trace,
)
from .experiment import ExperimentError, Regime, load_config, run_experiment
from .hmm import BENIGN, Channel, HmmError

log = logging.getLogger("seqgauge")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
VALIDATION_ERRORS = (CorpusError, ev.EvalError, ExperimentError, HmmError, json.JSONDecodeError, OSError)


class UsageError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="master seed override")
    p.add_argument("--jobs", type=int, default=d(1), help="parallel experiment cells")
    p.add_argument("--log-level", default=d("WARNING"), help="DEBUG, INFO, WARNING, ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqgauge", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="disassembly / API log -> trace file(s)")
    p.add_argument("--kind", choices=[k.value for k in Kind], required=True)
    p.add_argument("--channel", choices=[c.value for c in Channel], required=True)
    p.add_argument("--in", dest="inp", required=True, help="input file or directory")
    p.add_argument("--out", required=True, help="trace file, or directory for batch input")
    p.add_argument("--sample", help="sample id (default: input file stem)")
    p.add_argument("--label", default=BENIGN, help="family name or 'benign'")
    _global_flags(p, suppress=True)

    p = sub.add_parser("gen", help="write a synthetic paired-channel corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    _global_flags(p, suppress=True)

    p = sub.add_parser("run", help="cross-validated regime matrix and reports")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regimes", help="comma list, e.g. dynamic/dynamic,static/static")
    p.add_argument("--families", help="comma list of families (default: config or all)")
    p.add_argument("--imbalance", help="comma list of benign expansion factors")
    p.add_argument("--save-models", action="store_true", help="write fold models as JSON")
    _global_flags(p, suppress=True)

    p = sub.add_parser("curves", help="ROC or PR curve data from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--kind", choices=["roc", "pr"], required=True)
    p.add_argument("--expand", type=int, default=1, help="benign expansion factor")
    p.add_argument("--out", help="output file (default: stdout)")
    _global_flags(p, suppress=True)
    return parser


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("empty list")
    return items


def cmd_extract(args) -> int:
    src = Path(args.inp)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.is_file())
        out_dir = Path(args.out)
        written = failed = 0
        for f in files:
            ok = _extract_one(f, out_dir / f"{f.stem}.{args.channel}.trace", args, f.stem)
            written += ok
            failed += not ok
        print(f"extracted {written} traces, {failed} failed", file=sys.stderr)
        return EXIT_OK if written else EXIT_USAGE
    return EXIT_OK if _extract_one(src, Path(args.out), args, args.sample or src.stem) else EXIT_USAGE


def _extract_one(path: Path, out: Path, args, sample_id: str) -> bool:
    result = extract(path.read_text(encoding="utf-8", errors="replace"), args.kind)
    for lineno, line in result.skipped:
        log.info("%s:%d: skipped %r", path, lineno, line)
    if result.n_skipped:
        print(f"{path}: {result.n_skipped} lines skipped", file=sys.stderr)
    if not result.tokens:
        print(f"{path}: no tokens extracted", file=sys.stderr)
        return False
    write_trace(out, RawTrace(sample_id, args.channel, args.kind, result.tokens, args.label))
    return True


def cmd_gen(args) -> int:
    doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    if args.seed is not None:
        doc["seed"] = args.seed
    families, benign = generator_specs_from_dict(doc)
    manifest = write_corpus(generate_corpus(families, benign), args.out)
    print(manifest)
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.regimes:
        config.regimes = [Regime.parse(r) for r in _csv_list(args.regimes)]
    if args.families:
        config.families = _csv_list(args.families)
    if args.imbalance:
        try:
            config.imbalance_factors = [int(n) for n in _csv_list(args.imbalance)]
        except ValueError:
            raise UsageError(f"bad --imbalance {args.imbalance!r}") from None
        if any(n < 1 for n in config.imbalance_factors):
            raise UsageError("imbalance factors must be >= 1")
    result = run_experiment(config, args.out, jobs=args.jobs, keep_models=args.save_models)
    failed = [r for r in result.reports if not r.ok]
    for r in failed:
        print(f"cell {r.family} {r.regime} failed: {r.error}", file=sys.stderr)
    print(Path(args.out) / "report.json")
    return EXIT_RUNTIME if failed and len(failed) == len(result.reports) else EXIT_OK


def cmd_curves(args) -> int:
    if args.expand < 1:
        raise UsageError("--expand must be >= 1")
    with open(args.scores, encoding="utf-8") as fh:
        scores = ev.read_scores_csv(fh)
    c = ev.curve(ev.expand_benign(scores, args.expand), args.kind)
    text = ev.format_curve_csv(c, args.expand)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"extract": cmd_extract, "gen": cmd_gen, "run": cmd_run, "curves": cmd_curves}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (os.environ.get("SEQGAUGE_LOG") or args.log_level).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"seqgauge: error: unknown log level {level!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"seqgauge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"seqgauge {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
