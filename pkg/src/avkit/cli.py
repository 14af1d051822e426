"""Command-line entry point: ``avkit run|study|report``.

Exit status is 0 on success, 2 on a configuration error and 1 when a
trial fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .harness import ConfigError, StudyReport, TradeStudyConfig, TrialError, run_case, run_study
from .report import render_figures, render_report

log = logging.getLogger("avkit")


def load_study(ref: str, seed: int | None = None) -> TradeStudyConfig:
    """Load a study from a path, or by name from the bundled ``studies``."""
    path = Path(ref)
    if path.exists():
        study = TradeStudyConfig.load(path)
    else:
        bundled = resources.files("avkit") / "studies" / f"{ref}.json"
        if not bundled.is_file():
            raise ConfigError(f"config: no such file or bundled study {ref!r}")
        with resources.as_file(bundled) as p:
            study = TradeStudyConfig.load(p)
    if seed is not None:
        study = replace(study, master_seed=seed)
    return study


def _emit(report: StudyReport, fmt: str, out: str | None):
    text = render_report(report, fmt)
    sys.stdout.write(text)
    if out is not None:
        root = Path(out, report.name)
        root.mkdir(parents=True, exist_ok=True)
        ext = {"md": "md", "csv": "csv", "json": "json"}[fmt]
        if fmt != "json":
            (root / f"report.{ext}").write_text(text)
        (root / "report.json").write_text(render_report(report, "json"))
        for p in render_figures(report, root / "figures"):
            log.info("wrote %s", p)


def _cmd_run(args) -> int:
    study = load_study(args.config, args.seed)
    case = study.case(args.case)
    if not 0 <= args.trial < study.trials:
        raise ConfigError(f"trial: must lie in [0, {study.trials - 1}]")
    log_dir = None if args.out is None else Path(args.out, study.name, case.id, str(args.trial))
    result = run_case(study, case, args.trial, log_dir)
    _emit(StudyReport(study.name, [case.id], [result]), args.format, args.out)
    return 0


def _cmd_study(args) -> int:
    study = load_study(args.config, args.seed)
    report = run_study(study, jobs=args.jobs, out=args.out, cases=args.case or None)
    _emit(report, args.format, args.out)
    return 0


def _cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "report.json"
    try:
        data = json.loads(path.read_text())
        report = StudyReport.from_dict(data)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"{path}: not a study report ({e})") from None
    _emit(report, args.format, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avkit", description="Trade studies for a simulated V2I perception stack.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="study JSON path or bundled study name (c1, c2, c1_range)")
            p.add_argument("--seed", type=int, default=None, help="override the study's master seed")
        p.add_argument("--out", default=None, help="directory for logs, reports and figures")
        p.add_argument("--format", choices=("md", "csv", "json"), default="md")

    p = sub.add_parser("run", help="run one case on one trial")
    common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--trial", type=int, default=0)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("study", help="run every case over every trial")
    common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--case", action="append", help="restrict to this case id (repeatable)")
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("report", help="re-render a saved study report")
    p.add_argument("path", help="report.json or the study output directory")
    common(p, with_config=False)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrialError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
