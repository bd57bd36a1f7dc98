"""Experiment runner: single runs, feature ablations, encoder comparison and the k sweep.

Each run lives in ``<runs_dir>/<hash>`` where the hash covers the experiment
spec together with the bytes of its data files, so identical requests are
detected and reused. The run directory keeps ``spec.json`` next to the
checkpoint, history and report.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

from . import models
from .features import CONTEXT_FEATURES, read_jsonl
from .metrics import EvalReport
from .models import ENCODERS, FIELDS, MODEL_KINDS, ModelConfig
from .training import TrainConfig, evaluate_model, train, write_outputs

log = logging.getLogger(__name__)

DELTA_METRICS = ("auc", "gauc")


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one trained-and-evaluated model.

    ``kind``, ``encoder``, ``feature_fields``, ``use_bias_net`` and ``k``
    override the matching fields of ``train.model``; the remaining model
    fields (widths, vocabularies) come from ``train.model`` unchanged.
    """
    train_path: str
    eval_path: str
    kind: str = "dcam"
    encoder: str = "mhta"
    feature_fields: dict[str, list[str]] = field(
        default_factory=lambda: {name: ["Ct"] for name in CONTEXT_FEATURES})
    use_bias_net: bool = True
    k: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    label: str = ""

    def model_config(self) -> ModelConfig:
        return replace(self.train.model, kind=self.kind, encoder=self.encoder,
                       feature_fields={n: list(v) for n, v in self.feature_fields.items()},
                       use_bias_net=self.use_bias_net, k=self.k)

    def train_config(self) -> TrainConfig:
        return replace(self.train, model=self.model_config())

    def problems(self, check_files: bool = True) -> list[str]:
        out = []
        if self.kind not in MODEL_KINDS:
            out.append(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.encoder not in ENCODERS:
            out.append(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        for name, dests in self.feature_fields.items():
            if name not in CONTEXT_FEATURES:
                out.append(f"unknown context feature {name!r}")
            for d in dests:
                if d not in FIELDS:
                    out.append(f"feature {name!r}: unknown destination field {d!r}")
        if not isinstance(self.k, int) or not 1 <= self.k <= 6:
            out.append(f"k must lie in 1..6, got {self.k!r}")
        if check_files:
            for name in ("train_path", "eval_path"):
                if not Path(getattr(self, name)).is_file():
                    out.append(f"{name} {getattr(self, name)!r} does not exist")
        if not out:
            out.extend(self.train_config().problems())
        return out

    def validate(self, check_files: bool = True) -> None:
        problems = self.problems(check_files)
        if problems:
            raise ValueError("invalid ExperimentSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ExperimentSpec fields: {sorted(unknown)}")
        train_cfg = d.pop("train", {})
        spec = cls(**d)
        spec.train = train_cfg if isinstance(train_cfg, TrainConfig) else TrainConfig.from_dict(train_cfg)
        spec.feature_fields = {n: list(v) for n, v in spec.feature_fields.items()}
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def content_hash(self) -> str:
        """Hash of the experiment settings plus the contents of both data files.

        Labels and file locations are left out, so moving the data keeps the hash.
        """
        body = self.to_dict()
        for name in ("label", "train_path", "eval_path"):
            body.pop(name)
        h = hashlib.sha256(json.dumps(body, sort_keys=True).encode())
        for name in ("train_path", "eval_path"):
            h.update(_file_digest(*_file_key(getattr(self, name))).encode())
        return h.hexdigest()[:16]


def _file_key(path) -> tuple[str, int, int]:
    st = os.stat(path)
    return str(Path(path).resolve()), st.st_size, st.st_mtime_ns


@lru_cache(maxsize=32)
def _file_digest(path: str, size: int, mtime_ns: int) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@lru_cache(maxsize=8)
def _load(path: str, size: int, mtime_ns: int, l_max: int):
    return read_jsonl(path, l_max)


def load_data(path, l_max: int):
    """Parsed dataset, cached per file version so suites parse each file once."""
    return _load(*_file_key(path), l_max)


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    spec: ExperimentSpec
    report: EvalReport
    run_dir: Path
    seconds: float
    skipped: bool = False


def run_experiment(spec: ExperimentSpec, runs_dir, force: bool = False) -> RunResult:
    """Train and evaluate ``spec`` unless its run directory already holds a report."""
    spec.validate()
    run_dir = Path(runs_dir) / spec.content_hash()
    report_path = run_dir / "report.json"
    if report_path.exists() and not force:
        report = EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))
        timing = json.loads((run_dir / "timing.json").read_text(encoding="utf-8"))
        log.info("reusing %s", run_dir)
        return RunResult(spec, report, run_dir, timing["train_seconds"], skipped=True)
    tc = spec.train_config()
    cfg = tc.model
    train_data = models.encode(load_data(spec.train_path, cfg.l_max), cfg)
    eval_data = models.encode(load_data(spec.eval_path, cfg.l_max), cfg)
    start = time.perf_counter()
    result = train(tc, train_data)
    seconds = time.perf_counter() - start
    report = evaluate_model(result.params, cfg, eval_data)
    result.report = report
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    write_outputs(result, tc, run_dir)
    (run_dir / "timing.json").write_text(json.dumps({"train_seconds": seconds}) + "\n",
                                         encoding="utf-8")
    return RunResult(spec, report, run_dir, seconds)


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

@dataclass
class Row:
    label: str
    report: EvalReport
    spec_hash: str = ""
    seconds: float = 0.0


@dataclass
class ComparisonTable:
    title: str
    rows: list[Row]
    anchor: str

    def anchor_row(self) -> Row:
        for row in self.rows:
            if row.label == self.anchor:
                return row
        raise KeyError(f"anchor row {self.anchor!r} not in table")

    def row(self, label: str) -> Row:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def delta(self, row: Row, metric: str) -> float:
        """Relative improvement ``(metric - anchor) / anchor``."""
        base = getattr(self.anchor_row().report, metric)
        return (getattr(row.report, metric) - base) / base

    def sort_by(self, metric: str = "auc") -> "ComparisonTable":
        self.rows.sort(key=lambda r: getattr(r.report, metric), reverse=True)
        return self

    def to_jsonl(self) -> str:
        lines = []
        for row in self.rows:
            rec = {"table": self.title, "label": row.label, "anchor": row.label == self.anchor,
                   "spec_hash": row.spec_hash, "train_seconds": row.seconds,
                   "report": row.report.to_dict()}
            for m in DELTA_METRICS:
                rec[f"delta_{m}"] = self.delta(row, m)
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "ComparisonTable":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs:
            raise ValueError("empty table")
        rows = [Row(r["label"], EvalReport.from_dict(r["report"]), r["spec_hash"], r["train_seconds"])
                for r in recs]
        anchors = [r["label"] for r in recs if r["anchor"]]
        if len(anchors) != 1:
            raise ValueError(f"expected one anchor row, found {len(anchors)}")
        return cls(recs[0]["table"], rows, anchors[0])

    def to_text(self) -> str:
        k = self.rows[0].report.k if self.rows else 10
        header = ["", "AUC", "dAUC", "GAUC", "dGAUC", "Logloss", f"NDCG@{k}", "train s", "hash"]
        body = []
        for row in self.rows:
            r = row.report
            mark = " *" if row.label == self.anchor else ""
            body.append([row.label + mark, f"{r.auc:.4f}", f"{self.delta(row, 'auc'):+.2%}",
                         f"{r.gauc:.4f}", f"{self.delta(row, 'gauc'):+.2%}", f"{r.logloss:.4f}",
                         f"{r.ndcg:.4f}", f"{row.seconds:.1f}", row.spec_hash])
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

        def fmt(line):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                             for i, (c, w) in enumerate(zip(line, widths))).rstrip()

        rule = "-" * len(fmt(header))
        return "\n".join([self.title, fmt(header), rule] + [fmt(b) for b in body]
                         + [f"* anchor: {self.anchor}"])


def _run_arm(args):
    spec, runs_dir, force = args
    return run_experiment(spec, runs_dir, force)


def run_arms(specs: list[ExperimentSpec], runs_dir, force: bool = False,
             parallel: int = 1) -> list[RunResult]:
    """Run independent arms, optionally in worker processes; results keep input order."""
    for spec in specs:
        spec.validate()
    jobs = [(spec, runs_dir, force) for spec in specs]
    if parallel > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_arm, jobs))
    return [_run_arm(job) for job in jobs]


def _table(title: str, results: list[RunResult], anchor: str) -> ComparisonTable:
    rows = [Row(r.spec.label, r.report, r.run_dir.name, r.seconds) for r in results]
    return ComparisonTable(title, rows, anchor)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

NO_CONTEXT = "no context"
ALL_CONTEXT = "all context"


def _parse_toggle(toggle) -> tuple[str, ...]:
    names = tuple(toggle.split(",")) if isinstance(toggle, str) else tuple(toggle)
    bad = [n for n in names if n not in CONTEXT_FEATURES]
    if bad or not names:
        raise ValueError(f"toggle {toggle!r}: unknown context features {bad}")
    return names


def ablation_specs(base: ExperimentSpec, toggles) -> list[ExperimentSpec]:
    """Arms of a feature ablation: the base, each toggle removed, and no context at all.

    A toggle is a feature name or a group of names removed together. With no
    toggles the suite is the base run alone.
    """
    specs = [replace(base, label=ALL_CONTEXT)]
    groups = [_parse_toggle(t) for t in toggles]
    if not groups:
        return specs
    for names in groups:
        fields_ = {n: ([] if n in names else list(v)) for n, v in base.feature_fields.items()}
        specs.append(replace(base, feature_fields=fields_, label="-" + ",".join(names)))
    specs.append(replace(base, feature_fields={n: [] for n in CONTEXT_FEATURES}, label=NO_CONTEXT))
    return specs


def ablation_suite(base: ExperimentSpec, toggles, runs_dir, force: bool = False,
                   parallel: int = 1) -> ComparisonTable:
    specs = ablation_specs(base, toggles)
    anchor = NO_CONTEXT if len(specs) > 1 else ALL_CONTEXT
    table = _table("feature ablation", run_arms(specs, runs_dir, force, parallel), anchor)
    return table.sort_by("auc")


def sequence_suite(base: ExperimentSpec, runs_dir, force: bool = False,
                   parallel: int = 1, encoders=ENCODERS) -> ComparisonTable:
    """One arm per sequence encoder; the anchor is plain ``mhta``."""
    specs = [replace(base, encoder=e, label=e) for e in encoders]
    anchor = "mhta" if "mhta" in encoders else encoders[0]
    return _table("sequence encoders", run_arms(specs, runs_dir, force, parallel), anchor)


def k_sweep(base: ExperimentSpec, ks, runs_dir, force: bool = False,
            parallel: int = 1) -> ComparisonTable:
    """One DCAM arm per ``k``; the anchor is the first ``k`` listed."""
    ks = list(ks)
    bad = [k for k in ks if not isinstance(k, int) or not 1 <= k <= 6]
    if bad or not ks:
        raise ValueError(f"ks must be a non-empty subset of 1..6, got {ks}")
    specs = [replace(base, kind="dcam", k=k, label=f"k={k}") for k in ks]
    return _table("k sweep", run_arms(specs, runs_dir, force, parallel), f"k={ks[0]}")


def model_comparison(base: ExperimentSpec, runs_dir, force: bool = False,
                     parallel: int = 1) -> ComparisonTable:
    """Baseline against DCAM with everything else fixed; the anchor is the Baseline."""
    specs = [replace(base, kind="baseline", label="baseline"), replace(base, kind="dcam", label="dcam")]
    return _table("models", run_arms(specs, runs_dir, force, parallel), "baseline")
