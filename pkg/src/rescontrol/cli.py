"""Command line: ``rescontrol run|compare|solve-pow``.

Exit codes: 0 success, 2 invalid scenario, 3 unreadable or unparsable
scenario file, 4 output could not be written, 64 bad command line.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .harness import report as reporting
from .harness.scenario import ScenarioError, load_scenario
from .policies import MAX_DIFFICULTY, hashcash_solve, pow_valid

OUT_DIR_ENV = "RESCONTROL_OUT_DIR"
EXIT_USAGE = 64

log = logging.getLogger("rescontrol")


def _out_path(args, default_name: str) -> Path | None:
    if args.out == "-":
        return None
    if args.out:
        return Path(args.out)
    out_dir = os.environ.get(OUT_DIR_ENV)
    if out_dir:
        return Path(out_dir) / default_name
    return None


def _write(obj, args, default_name: str) -> None:
    path = _out_path(args, default_name)
    if path is None:
        sys.stdout.write(reporting.render(obj, args.format))
    else:
        reporting.emit_report(obj, path, args.format)
        log.info("wrote %s", path)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    report, trace = reporting.run_with_trace(scenario)
    ext = "json" if args.format == "json" else "txt"
    _write(report, args, f"{Path(args.scenario).stem}-{scenario.seed}.{ext}")
    if args.trace:
        try:
            Path(args.trace).write_text("".join(line + "\n" for line in trace),
                                        encoding="utf-8")
        except OSError as exc:
            raise reporting.ReportIOError(f"cannot write {args.trace}: {exc}") from exc
    return 0


def cmd_compare(args) -> int:
    template = load_scenario(args.template)
    if args.seed is not None:
        template = template.with_seed(args.seed)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise argparse.ArgumentTypeError("--policies is empty")
    for kind in policies:
        template.with_policy(kind).validate()
    matrix = reporting.compare_policies(template, policies, workers=args.workers)
    ext = "json" if args.format == "json" else "txt"
    _write(matrix, args, f"{Path(args.template).stem}-compare.{ext}")
    return 0


def cmd_solve_pow(args) -> int:
    try:
        payload = bytes.fromhex(args.payload_hex)
    except ValueError:
        raise argparse.ArgumentTypeError("payload must be hex") from None
    n = hashcash_solve(payload, args.difficulty)
    assert pow_valid(payload, args.difficulty, n)
    print(f"difficulty={args.difficulty} nonce={n} hashes={n + 1}")
    return 0


def _difficulty(text: str) -> int:
    d = int(text)
    if not 1 <= d <= MAX_DIFFICULTY:
        raise argparse.ArgumentTypeError(f"difficulty must be in [1, {MAX_DIFFICULTY}]")
    return d


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rescontrol",
                                     description="Resource-control policy simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and print its report")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"report file, '-' for stdout (default ${OUT_DIR_ENV})")
    run.add_argument("--format", choices=reporting.FORMATS, default="json")
    run.add_argument("--trace", help="also write the JSON-lines event trace here")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run a template under several policies")
    cmp_.add_argument("template")
    cmp_.add_argument("--policies", required=True, help="comma-separated policy kinds")
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--out")
    cmp_.add_argument("--format", choices=reporting.FORMATS, default="text")
    cmp_.add_argument("--workers", type=int, default=1)
    cmp_.set_defaults(func=cmd_compare)

    pow_ = sub.add_parser("solve-pow", help="find a hashcash nonce")
    pow_.add_argument("payload_hex")
    pow_.add_argument("--difficulty", type=_difficulty, required=True)
    pow_.set_defaults(func=cmd_solve_pow)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except reporting.ReportIOError as exc:
        print(f"error[IoError]: {exc}", file=sys.stderr)
        return exc.exit_code
    except argparse.ArgumentTypeError as exc:
        print(f"error[Usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
