"""Command-line entry point: ``interpguard <command> --config run.yaml``.

Every command reads a run configuration, works inside its output directory
and prints a JSON summary. Failures print a JSON error record to stderr and
exit nonzero (2 for configuration problems, 1 otherwise).
"""

import argparse
import json
import sys

from ._validation import ConfigError, InterpGuardError
from .config import RunConfig
from .workflow import Workspace

COMMANDS = {
    "train-classifier": "train the target classifier on the train split",
    "gen-attacks": "attack the detector and forest training splits and store the results",
    "build-detector": "train the five sub-detectors and the random forest",
    "train-rectifier": "fine-tune the classifier on rectified adversarial duplicates",
    "evaluate": "run the grey-box and black-box evaluations and write report.csv",
    "toy-erasure": "measure attack success after erasing the top vanilla-gradient pixels",
    "whitebox": "attack the composite classifier and evaluate the defence",
    "transfer": "craft examples against single sub-detectors and test the ensemble",
    "run-all": "run every stage in order",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="interpguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="run configuration (JSON or YAML)")
        p.add_argument("--output-dir", help="override the configured output directory")
    sub.add_parser("print-desk-config", help="print the built-in desk configuration as JSON")
    return parser


def _run(ws, command):
    if command == "train-classifier":
        ws.train_classifier()
        return {"artifact": str(ws.path("classifier"))}
    if command == "gen-attacks":
        return ws.gen_attacks()
    if command == "build-detector":
        det = ws.build_detector()
        return {"artifact": str(ws.path("detector")), "oob_error": det.forest_.oob_error_}
    if command == "train-rectifier":
        return ws.train_rectifier()[1]
    if command == "evaluate":
        ws.evaluate()
        return {"artifact": str(ws.path("report"))}
    if command == "toy-erasure":
        return ws.toy_erasure()
    if command == "whitebox":
        ws.whitebox()
        return {"artifact": str(ws.path("whitebox"))}
    if command == "transfer":
        return ws.transfer()
    ws.run_all()
    return {"artifact": str(ws.path("report"))}


def _error(kind, message, path=None, code=1):
    record = {"error": kind, "message": message}
    if path is not None:
        record["path"] = path
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "print-desk-config":
        print(RunConfig.desk().to_json())
        return 0
    try:
        config = RunConfig.from_file(args.config)
        if args.output_dir:
            config = config.with_output_dir(args.output_dir)
        result = _run(Workspace(config), args.command)
    except ConfigError as exc:
        return _error("ConfigError", str(exc), exc.path, code=2)
    except (InterpGuardError, FileNotFoundError, ValueError) as exc:
        return _error(type(exc).__name__, str(exc))
    print(json.dumps({"command": args.command, "config_hash": config.hash, "result": result},
                     sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
