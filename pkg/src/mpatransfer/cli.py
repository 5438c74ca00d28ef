"""Command-line surface: score, transfer, bounds, correlate.

Every run resolves its configuration up front, writes its outputs plus a
manifest (resolved options, input hashes, output hashes) into the output
directory, and is a pure function of its input files and flags, so
re-running from a manifest reproduces the outputs bit for bit.

Exit codes: 0 ok, 2 malformed CSV, 3 shape or config mismatch,
4 training divergence, 5 margin outside the feasible range,
6 degenerate suite.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import labelstats
from .bounds import MarginRangeError, assemble_bound_report
from .experiment import (
    DegenerateDataError,
    SyntheticTaskSuite,
    TransferInstance,
    run_correlation_experiment,
    verify_lemma1,
    verify_lemma2,
)
from .labelstats import CsvFormatError
from .tinynet import load_network
from .transfer import (
    DEFAULT_GAMMA_GRID,
    TrainConfig,
    TrainingDivergedError,
    load_outcome,
    save_outcome,
)

EXIT_OK = 0
EXIT_CSV = 2
EXIT_SHAPE = 3
EXIT_DIVERGED = 4
EXIT_GAMMA = 5
EXIT_DEGENERATE = 6


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_json(path: Path, doc: dict):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir: Path, command: str, options: dict,
                    inputs: list[str | Path]):
    outputs = {
        p.name: _sha256(p)
        for p in sorted(out_dir.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    _write_json(out_dir / "manifest.json", {
        "command": command,
        "options": options,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": outputs,
    })


def argv_from_manifest(manifest: dict, out_dir: str) -> list[str]:
    """Reconstruct the command line of a recorded run, retargeting the output."""
    options = dict(manifest["options"])
    options["out_dir"] = out_dir
    argv = [manifest["command"]]
    positional = options.pop("positional", [])
    argv.extend(positional)
    for key, value in sorted(options.items()):
        if value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, (list, tuple)):
            argv.extend([flag, ",".join(str(v) for v in value)])
        else:
            argv.extend([flag, str(value)])
    return argv


def _load_single_column_csv(path) -> np.ndarray:
    labels = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != 1:
                raise CsvFormatError(f"expected 1 column, got {len(row)}", lineno)
            try:
                labels.append(int(row[0]))
            except ValueError:
                if lineno == 1:
                    continue
                raise CsvFormatError(f"non-integer label {row[0]!r}", lineno) from None
    if not labels:
        raise CsvFormatError("no data rows", 1)
    return np.asarray(labels, dtype=np.int64)


def _load_vectors_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(c.strip() == "" for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise CsvFormatError(f"non-numeric value in {row!r}", lineno) from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise CsvFormatError(
                    f"expected {width} columns, got {len(values)}", lineno)
            rows.append(values)
    if not rows:
        raise CsvFormatError("no data rows", 1)
    return np.asarray(rows, dtype=np.float64)


def _parse_gamma_grid(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def cmd_score(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [args.labels_csv]
    if args.dummy:
        if not args.model or not args.inputs:
            print("score: --dummy requires --model and --inputs", file=sys.stderr)
            return EXIT_SHAPE
        model, _ = load_network(args.model)
        vectors = _load_vectors_csv(args.inputs)
        targets = _load_single_column_csv(args.labels_csv)
        data = labelstats.make_dummy_source(
            model, vectors, targets, num_target_classes=args.target_classes
        )
        inputs.extend([args.model, args.inputs])
    else:
        data = labelstats.load_pairs_csv(
            args.labels_csv,
            num_source_classes=args.source_classes,
            num_target_classes=args.target_classes,
        )
    joint = labelstats.empirical_joint(data)
    predictor = labelstats.fit_majority_predictor(joint)
    _write_json(out_dir / "mpa.json", {
        "mpa": labelstats.compute_mpa(data),
        "n": data.n,
        "m_S": data.num_source_classes,
        "m_T": data.num_target_classes,
        "mapping": predictor.mapping.tolist(),
    })
    _write_manifest(out_dir, "score", {
        "positional": [str(args.labels_csv)],
        "dummy": args.dummy,
        "model": args.model,
        "inputs": args.inputs,
        "source_classes": args.source_classes,
        "target_classes": args.target_classes,
    }, inputs)
    return EXIT_OK


def cmd_transfer(args) -> int:
    with open(args.config) as fh:
        config = json.load(fh)
    train_doc = dict(config.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    cfg = TrainConfig(**train_doc)
    gamma_grid = tuple(config.get("gamma_grid", DEFAULT_GAMMA_GRID))
    if args.gamma_grid is not None:
        gamma_grid = _parse_gamma_grid(args.gamma_grid)
    data = dict(config.get("data", {}))
    setting = data.pop("setting", "shared_inputs")
    arch_doc = dict(config.get("architecture", {}))
    instance = TransferInstance(
        train=cfg,
        gamma_grid=gamma_grid,
        hidden_widths=tuple(arch_doc.get("hidden_widths", (32, 16))),
        split_index=arch_doc.get("split_index", 2),
        **data,
    )
    verdict = verify_lemma2(instance) if setting == "different_inputs" \
        else verify_lemma1(instance)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_outcome(verdict.outcome, out_dir)
    _write_json(out_dir / "lemma.json", verdict.to_dict())
    _write_manifest(out_dir, "transfer", {
        "positional": [str(args.config)],
        "seed": args.seed,
        "epochs": args.epochs,
        "gamma_grid": args.gamma_grid,
    }, [args.config])
    return EXIT_OK


def cmd_bounds(args) -> int:
    outcome = load_outcome(args.outcome_dir)
    report = assemble_bound_report(
        outcome, delta=args.delta, gamma=args.gamma, zero_reference=args.ref_zero
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "bound_report.json", report.to_dict())
    outcome_files = sorted(
        str(p) for p in Path(args.outcome_dir).iterdir()
        if p.is_file() and p.name != "manifest.json"
    )
    _write_manifest(out_dir, "bounds", {
        "positional": [str(args.outcome_dir)],
        "gamma": args.gamma,
        "delta": args.delta,
        "ref_zero": args.ref_zero,
    }, outcome_files)
    return EXIT_OK


def cmd_correlate(args) -> int:
    with open(args.suite) as fh:
        doc = json.load(fh)
    suite = SyntheticTaskSuite.from_dict(doc.get("suite", {}))
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    cfg = TrainConfig(**train_doc)
    result = run_correlation_experiment(suite, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "correlation.json", result.to_dict())
    with open(out_dir / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "alpha", "mpa", "accuracy"])
        for task in result.tasks:
            writer.writerow([task.index, repr(task.alpha),
                             repr(task.mpa), repr(task.accuracy)])
    _write_manifest(out_dir, "correlate", {
        "positional": [str(args.suite)],
        "seed": args.seed,
        "epochs": args.epochs,
    }, [args.suite])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpa",
        description="Majority predictor accuracy scores, transfer runs, "
                    "capacity reports, and correlation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="compute the MPA of paired labels")
    p_score.add_argument("labels_csv")
    p_score.add_argument("--dummy", action="store_true",
                         help="pair model predictions with target labels")
    p_score.add_argument("--model", help="model JSON (with --dummy)")
    p_score.add_argument("--inputs", help="input vectors CSV (with --dummy)")
    p_score.add_argument("--source-classes", type=int, default=None)
    p_score.add_argument("--target-classes", type=int, default=None)
    p_score.add_argument("--out-dir", default=".")
    p_score.set_defaults(func=cmd_score)

    p_transfer = sub.add_parser("transfer", help="run the transfer procedure")
    p_transfer.add_argument("config")
    p_transfer.add_argument("--seed", type=int, default=None)
    p_transfer.add_argument("--epochs", type=int, default=None)
    p_transfer.add_argument("--gamma-grid", default=None,
                            help="comma-separated positive margins")
    p_transfer.add_argument("--out-dir", default=".")
    p_transfer.set_defaults(func=cmd_transfer)

    p_bounds = sub.add_parser("bounds", help="assemble a bound report")
    p_bounds.add_argument("outcome_dir")
    p_bounds.add_argument("--gamma", type=float, required=True)
    p_bounds.add_argument("--delta", type=float, default=0.05)
    p_bounds.add_argument("--ref-zero", action="store_true",
                          help="use zero reference matrices")
    p_bounds.add_argument("--out-dir", default=".")
    p_bounds.set_defaults(func=cmd_bounds)

    p_corr = sub.add_parser("correlate", help="run a correlation experiment")
    p_corr.add_argument("suite")
    p_corr.add_argument("--seed", type=int, default=None)
    p_corr.add_argument("--epochs", type=int, default=None)
    p_corr.add_argument("--out-dir", default=".")
    p_corr.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CsvFormatError as exc:
        print(f"error: malformed CSV, {exc}", file=sys.stderr)
        return EXIT_CSV
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MarginRangeError as exc:
        print(f"error: {exc} (largest feasible margin {exc.gamma_bar})",
              file=sys.stderr)
        return EXIT_GAMMA
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
