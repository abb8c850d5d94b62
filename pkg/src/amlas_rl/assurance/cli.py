"""Command-line entry point: ``amlas-rl <command> [options]``.

Exit status: 0 success, 1 a safety requirement verdict failed,
2 usage, integrity or dependency error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from amlas_rl.abstraction import DtmcFormatError, DtmcValidationError, MalformedTraceError
from amlas_rl.agent import IntegrityError as ModelIntegrityError
from amlas_rl.assurance import pipeline
from amlas_rl.assurance.ledger import LedgerError, verify_chain
from amlas_rl.env import ConfigError
from amlas_rl.pctl import PctlError, PctlFileError, PctlUsageError
from amlas_rl.plans import IncompleteEvidenceError, UsageError

EXIT_OK, EXIT_VERDICT, EXIT_ERROR = 0, 1, 2

_HARD_ERRORS = (
    LedgerError,
    ModelIntegrityError,
    ConfigError,
    pipeline.SettingsError,
    UsageError,
    IncompleteEvidenceError,
    PctlError,
    PctlFileError,
    PctlUsageError,
    DtmcFormatError,
    DtmcValidationError,
    MalformedTraceError,
    FileNotFoundError,
)


_GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": Path("run"), "verbose": False, "model": None, "props": None}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand from overwriting a value given earlier
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="INI settings file ([world], [ddpg], [plans], [abstraction])")
    common.add_argument("--seed", type=int, help=f"run seed (default ${pipeline.SEED_ENV} or 0)")
    common.add_argument("--out", type=Path, help="run directory (default ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="amlas-rl", description="Assurance pipeline for an RL navigation controller.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in (
        ("scope", "stage 1: commit scoping fixtures A-E"),
        ("plan", "stages 2-3: requirements H, data requirements and plans L-P"),
        ("train", "stage 4: train the agent (U, V)"),
        ("test", "stage 4: internal test (X)"),
        ("verify", "stage 5: general and targeted verification trials"),
        ("traces", "stage 5: collect traces for model estimation"),
        ("abstract", "stage 5: estimate the DTMC from traces"),
        ("deploy", "stage 6: operational scenarios, erroneous-behaviour log, integration results"),
        ("report", "write stage-4/5 reports and print verdicts"),
        ("run-all", "every stage in order"),
    ):
        sub.add_parser(name, help=help_text, parents=[common])
    check = sub.add_parser("check", help="stage 5: model-check the DTMC (Z, AA), or a standalone file pair", parents=[common])
    check.add_argument("--model", type=Path, default=None, help="standalone: DTMC file to check")
    check.add_argument("--props", type=Path, default=None, help="standalone: property file")
    ledger = sub.add_parser("ledger", help="ledger tools", parents=[common])
    ledger_sub = ledger.add_subparsers(dest="ledger_command", required=True, metavar="action")
    ledger_sub.add_parser("verify", help="re-hash payloads and check the chain", parents=[common])
    ledger_sub.add_parser("manifest", help="print the evidence manifest as JSON", parents=[common])
    return parser


def _print_verdicts(verdicts: list[dict], out) -> None:
    for v in verdicts:
        status = "PASS" if v["passed"] else "FAIL"
        print(f"{v['id']} [{v['regime']}] {status}: measured {v['measured']:.4g} {v['direction']} {v['threshold']:g}", file=out)


def _standalone_check(args) -> int:
    if args.model is None or args.props is None:
        raise UsageError("standalone check needs both --model and --props")
    results = pipeline.check_properties(args.model, args.props.read_text(encoding="utf-8"))
    for r in results:
        verdict = {True: "satisfied", False: "VIOLATED", None: "value"}[r["verdict"]]
        print(f"{r['name']}: {r['formula']} -> {r['value']:.6g} ({verdict}; {r['method']}, sweeps {r['sweeps']})")
    return EXIT_VERDICT if any(r["verdict"] is False for r in results) else EXIT_OK


def _verdict_payload(run: pipeline.Run, artefact_id: str) -> list[dict]:
    return json.loads(run.ledger.read_payload(artefact_id))["verdicts"]


def dispatch(args) -> int:
    if args.command == "check" and (args.model is not None or args.props is not None):
        return _standalone_check(args)
    if args.command == "ledger":
        if args.ledger_command == "verify":
            report = verify_chain(args.out)
            print(report.summary())
            for issue in report.issues[1:]:
                print(f"  also: {issue}")
            return EXIT_OK if report.passed else EXIT_ERROR
        run = pipeline.Run(args.out, pipeline.Settings(), 0)
        print(json.dumps(run.ledger.manifest(), indent=1))
        return EXIT_OK

    settings = pipeline.load_settings(args.config)
    seed = args.seed if args.seed is not None else pipeline.default_seed()
    run = pipeline.Run(args.out, settings, seed)
    cmd = args.command
    ok = True
    if cmd == "scope":
        pipeline.stage_scope(run)
    elif cmd == "plan":
        if not pipeline.stage_plan(run):
            print("warning: scenario balance audit flagged cells (see artefact L)", file=sys.stderr)
    elif cmd == "train":
        pipeline.stage_train(run)
    elif cmd == "test":
        ok = pipeline.stage_test(run)
        _print_verdicts(_verdict_payload(run, "X"), sys.stdout)
    elif cmd == "verify":
        pipeline.stage_verify(run)
    elif cmd == "traces":
        pipeline.stage_traces(run)
    elif cmd == "abstract":
        pipeline.stage_abstract(run)
    elif cmd == "check":
        ok = pipeline.stage_check(run)
        _print_verdicts(_verdict_payload(run, "Z"), sys.stdout)
    elif cmd == "deploy":
        ok = pipeline.stage_deploy(run)
        _print_verdicts(_verdict_payload(run, "FF"), sys.stdout)
    elif cmd in ("report", "run-all"):
        failing = pipeline.run_all(run) if cmd == "run-all" else pipeline.stage_report(run)
        for aid in ("X", "Z"):
            _print_verdicts(_verdict_payload(run, aid), sys.stdout)
        print(f"reports written to {run.root / 'reports'}")
        ok = not failing
    return EXIT_OK if ok else EXIT_VERDICT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_ERROR if exc.code else EXIT_OK
    for name, value in _GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except _HARD_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
