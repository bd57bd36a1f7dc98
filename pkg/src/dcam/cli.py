"""``dcam`` command line: data generation, single runs and the comparison suites.

Failures exit nonzero after printing one JSON line ``{"error": code, "message": ...}``
to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, harness, models
from .features import read_jsonl
from .harness import ComparisonTable, ExperimentSpec
from .metrics import EvalReport
from .training import TrainingDiverged, evaluate_model

PRESETS = {
    "default": lambda seed: datagen.GenConfig(seed=seed),
    "acceptance": datagen.acceptance_config,
    "noise": datagen.noise_context_config,
    "recency": datagen.recency_config,
}

EXIT_CODES = {"usage": 2, "invalid_config": 3, "missing_file": 4, "diverged": 5, "internal": 1}


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


def _ks(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CLIError("missing_file", f"{path} does not exist") from None
    except json.JSONDecodeError as err:
        raise CLIError("invalid_config", f"{path}: {err}") from None


def _load_spec(args) -> ExperimentSpec:
    if not args.config:
        raise CLIError("usage", "--config is required")
    try:
        spec = ExperimentSpec.from_dict(_read_json(args.config))
    except (TypeError, ValueError) as err:
        raise CLIError("invalid_config", str(err)) from None
    if args.seed is not None:
        spec.train = replace(spec.train, seed=args.seed)
    problems = spec.problems()
    if problems:
        code = "missing_file" if all("does not exist" in p for p in problems) else "invalid_config"
        raise CLIError(code, "; ".join(problems))
    return spec


def _emit_table(table: ComparisonTable, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.jsonl"
    path.write_text(table.to_jsonl(), encoding="utf-8")
    print(table.to_text())
    print(f"table: {path}")


def cmd_gen(args) -> None:
    seed = 0 if args.seed is None else args.seed
    if args.config:
        try:
            cfg = datagen.GenConfig.from_dict({**_read_json(args.config), "seed": seed})
        except (TypeError, ValueError) as err:
            raise CLIError("invalid_config", str(err)) from None
    else:
        cfg = PRESETS[args.preset](seed)
    manifest = datagen.write_dataset(cfg, args.out, n_mc=args.n_mc)
    b = manifest["bayes_auc"]
    print(f"wrote {manifest['files']['n_train']} train / {manifest['files']['n_eval']} eval rows "
          f"to {args.out}; ctr {manifest['empirical_ctr']:.4f}; "
          f"bayes auc {b['value']:.4f} +- {b['se']:.4f}")


def cmd_train(args) -> None:
    result = harness.run_experiment(_load_spec(args), args.out, force=args.force)
    status = "reused" if result.skipped else f"trained in {result.seconds:.1f}s"
    print(result.report.to_text())
    print(f"run: {result.run_dir} ({status})")


def cmd_eval(args) -> None:
    for path in (args.checkpoint, args.data):
        if not Path(path).is_file():
            raise CLIError("missing_file", f"{path} does not exist")
    cfg, params, _ = models.load_checkpoint(args.checkpoint)
    data = models.encode(read_jsonl(args.data, cfg.l_max), cfg)
    report = evaluate_model(params, cfg, data)
    print(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")


def cmd_ablate(args) -> None:
    toggles = [t for group in args.toggle for t in group.split()]
    table = harness.ablation_suite(_load_spec(args), toggles, args.out, args.force, args.parallel)
    _emit_table(table, Path(args.out), "ablation")


def cmd_seq_suite(args) -> None:
    table = harness.sequence_suite(_load_spec(args), args.out, args.force, args.parallel)
    _emit_table(table, Path(args.out), "seq-suite")


def cmd_k_sweep(args) -> None:
    spec = _load_spec(args)
    try:
        table = harness.k_sweep(spec, args.ks, args.out, args.force, args.parallel)
    except ValueError as err:
        raise CLIError("invalid_config", str(err)) from None
    _emit_table(table, Path(args.out), "k-sweep")


def cmd_report(args) -> None:
    """Re-render stored tables (``*.jsonl``) and run reports (run directories)."""
    for target in args.paths:
        path = Path(target)
        if path.is_dir():
            report_path = path / "report.json"
            if not report_path.is_file():
                raise CLIError("missing_file", f"{report_path} does not exist")
            report = EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))
            print(f"{path}\n{report.to_text()}")
        elif path.is_file():
            try:
                table = ComparisonTable.from_jsonl(path.read_text(encoding="utf-8"))
            except (KeyError, ValueError) as err:
                raise CLIError("invalid_config", f"{path}: {err}") from None
            print(table.to_text())
        else:
            raise CLIError("missing_file", f"{path} does not exist")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcam", description="Data generation, single runs and comparison suites.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, spec=True, suite=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if spec:
            p.add_argument("--config", help="experiment spec (JSON)")
            p.add_argument("--seed", type=_seed, help="override the training seed")
            p.add_argument("--out", default="runs", help="runs directory (default: runs)")
            p.add_argument("--force", action="store_true", help="rerun arms that already have results")
        if suite:
            p.add_argument("--parallel", type=int, default=1, metavar="N",
                           help="run up to N arms in parallel worker processes")
        return p

    gen = command("gen", cmd_gen, "generate a synthetic dataset", spec=False)
    gen.add_argument("--config", help="GenConfig JSON (overrides --preset)")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="acceptance")
    gen.add_argument("--seed", type=_seed)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n-mc", type=int, default=200_000, help="Monte-Carlo draws for Bayes AUC")

    command("train", cmd_train, "train and evaluate one spec")

    ev = command("eval", cmd_eval, "evaluate a checkpoint on a JSONL file", spec=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", help="also write the report as JSON here")

    ab = command("ablate", cmd_ablate, "feature ablation suite", suite=True)
    ab.add_argument("--toggle", action="append", default=[],
                    help="feature or comma-joined group to remove; repeatable")
    command("seq-suite", cmd_seq_suite, "compare the six sequence encoders", suite=True)
    ks = command("k-sweep", cmd_k_sweep, "DCAM runs over top-k values", suite=True)
    ks.add_argument("--ks", type=_ks, default=[1, 2, 3, 4, 5, 6], help="comma-separated k values")

    rep = command("report", cmd_report, "print stored tables or run reports", spec=False)
    rep.add_argument("paths", nargs="+", help="table .jsonl files or run directories")
    return parser


def _fail(code: str, message: str) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return EXIT_CODES[code]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "could not parse arguments (see usage above)")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as err:
        return _fail(err.code, str(err))
    except TrainingDiverged as err:
        return _fail("diverged", str(err))
    except FileNotFoundError as err:
        return _fail("missing_file", str(err))
    except ValueError as err:
        return _fail("invalid_config", str(err))
    except Exception as err:  # noqa: BLE001 - last-resort report for the caller
        return _fail("internal", f"{type(err).__name__}: {err}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
