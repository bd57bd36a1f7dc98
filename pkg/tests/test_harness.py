import json
import math
import shutil
from dataclasses import replace

import pytest

from dcam import datagen, harness
from dcam.features import CONTEXT_FEATURES
from dcam.harness import ComparisonTable, ExperimentSpec
from dcam.training import TrainConfig
from support import tiny_config


def _write(out, cfg):
    datagen.write_dataset(cfg, out, n_mc=100_000)
    return str(out / "train.jsonl"), str(out / "eval.jsonl")


@pytest.fixture(scope="module")
def null_data(tmp_path_factory):
    """Labels independent of every feature, with a CTR near one half."""
    cfg = datagen.GenConfig(n_users=50, n_items=32, n_impressions=25_000, seed=4)
    return _write(tmp_path_factory.mktemp("null"), cfg)


@pytest.fixture(scope="module")
def week_data(tmp_path_factory):
    cfg = datagen.GenConfig.planted({"week": 1.5}, seed=1, n_users=50, n_items=32, n_impressions=6000)
    return _write(tmp_path_factory.mktemp("week"), cfg)


def make_spec(paths, steps=40, batch_size=32, model=None, **kw):
    model = model or tiny_config(l_max=5)
    tc = TrainConfig(batch_size=batch_size, total_steps=steps, warmup_steps=min(60, steps // 4),
                     model=model)
    return ExperimentSpec(paths[0], paths[1], train=tc, **kw)


def test_spec_lists_every_problem():
    spec = ExperimentSpec("nope.jsonl", "nada.jsonl", kind="wide", encoder="lstm",
                          feature_fields={"weather": ["Ct"], "hour": ["Zz"]}, k=9)
    problems = spec.problems()
    assert len(problems) == 7
    with pytest.raises(ValueError):
        spec.validate()


def test_spec_round_trip(week_data):
    spec = make_spec(week_data, encoder="gru", label="x")
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    assert again.train_config().model.encoder == "gru"
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({**spec.to_dict(), "colour": 1})


def test_hash_tracks_content_not_location(week_data, tmp_path):
    spec = make_spec(week_data)
    assert replace(spec, label="other").content_hash() == spec.content_hash()
    assert replace(spec, k=3).content_hash() != spec.content_hash()
    moved = [shutil.copy(p, tmp_path / f"{i}.jsonl") for i, p in enumerate(week_data)]
    assert make_spec(moved).content_hash() == spec.content_hash()
    with open(moved[0], "a") as fh:
        fh.write("\n")
    assert make_spec(moved).content_hash() != spec.content_hash()


def test_untrained_model_is_at_chance(null_data, tmp_path):
    result = harness.run_experiment(make_spec(null_data, steps=0), tmp_path)
    assert abs(result.report.auc - 0.5) <= 0.02
    assert (result.run_dir / "model.ckpt").exists()
    assert json.loads((result.run_dir / "spec.json").read_text())["train"]["total_steps"] == 0


def test_reruns_are_identical_and_skipped(week_data, tmp_path):
    spec = make_spec(week_data)
    first = harness.run_experiment(spec, tmp_path)
    again = harness.run_experiment(spec, tmp_path)
    assert again.skipped and again.report == first.report
    forced = harness.run_experiment(spec, tmp_path, force=True)
    assert not forced.skipped and forced.report == first.report
    fresh = harness.run_experiment(spec, tmp_path / "elsewhere")
    assert fresh.report == first.report
    stored = ExperimentSpec.load(first.run_dir / "spec.json")
    assert stored.content_hash() == first.run_dir.name


def test_empty_ablation_is_a_single_row(week_data, tmp_path):
    table = harness.ablation_suite(make_spec(week_data), [], tmp_path)
    assert len(table.rows) == 1
    assert table.delta(table.rows[0], "auc") == 0.0


def test_ablation_rows_and_planted_null(week_data, tmp_path):
    wider = tiny_config(l_max=5, d_c=4, d_u=4, d_i=4, main_hidden=[16])
    base = make_spec(week_data, steps=300, batch_size=64, model=wider)
    table = harness.ablation_suite(base, ["city", "week", "hour,time_period"], tmp_path)
    labels = [r.label for r in table.rows]
    assert sorted(labels) == sorted(["all context", "-city", "-week", "-hour,time_period",
                                     "no context"])
    assert table.anchor == "no context"
    aucs = [r.report.auc for r in table.rows]
    assert aucs == sorted(aucs, reverse=True)
    full = table.row("all context").report.auc
    assert abs(table.row("-city").report.auc - full) < 0.01
    assert table.row("-week").report.auc < full - 0.02
    with pytest.raises(ValueError):
        harness.ablation_specs(base, ["weather"])


def test_ablation_arms_differ_only_in_the_mask(week_data):
    base = make_spec(week_data)
    for spec in harness.ablation_specs(base, ["aoi", "geohash,city"]):
        assert replace(spec, feature_fields=base.feature_fields, label="") == base


def test_deltas_recompute_from_stored_table(week_data, tmp_path):
    table = harness.k_sweep(make_spec(week_data), [2, 4], tmp_path)
    recs = [json.loads(line) for line in table.to_jsonl().splitlines()]
    anchor = next(r for r in recs if r["anchor"])
    for rec in recs:
        for m in ("auc", "gauc"):
            assert rec[f"delta_{m}"] == (rec["report"][m] - anchor["report"][m]) / anchor["report"][m]
    loaded = ComparisonTable.from_jsonl(table.to_jsonl())
    assert loaded == table
    assert loaded.to_text() == table.to_text()
    assert "k=2 *" in table.to_text()


def test_table_rows_reproduce_from_their_hash(week_data, tmp_path):
    table = harness.k_sweep(make_spec(week_data), [3], tmp_path)
    row = table.rows[0]
    spec = ExperimentSpec.load(tmp_path / row.spec_hash / "spec.json")
    rerun = harness.run_experiment(spec, tmp_path / "again")
    assert rerun.report == row.report


def test_sequence_suite_structure(week_data, tmp_path):
    table = harness.sequence_suite(make_spec(week_data, steps=10), tmp_path)
    assert [r.label for r in table.rows] == list(harness.ENCODERS)
    assert table.anchor == "mhta"
    for row in table.rows:
        r = row.report
        assert all(math.isfinite(v) for v in (r.auc, r.gauc, r.logloss, r.ndcg))
        assert row.seconds > 0


def test_k_sweep(week_data, tmp_path):
    base = make_spec(week_data, kind="baseline", k=2)
    table = harness.k_sweep(base, range(1, 7), tmp_path)
    assert [r.label for r in table.rows] == [f"k={k}" for k in range(1, 7)]
    direct = harness.run_experiment(replace(base, kind="dcam", k=6), tmp_path)
    assert direct.skipped and direct.report == table.row("k=6").report
    for bad in ([], [0], [7], [2.5]):
        with pytest.raises(ValueError):
            harness.k_sweep(base, bad, tmp_path)


def test_parallel_arms_match_sequential(week_data, tmp_path):
    base = make_spec(week_data, steps=20)
    serial = harness.sequence_suite(base, tmp_path / "a", encoders=("mean_pool", "gru"))
    parallel = harness.sequence_suite(base, tmp_path / "b", encoders=("mean_pool", "gru"), parallel=2)
    assert [r.report for r in serial.rows] == [r.report for r in parallel.rows]


def test_model_comparison_anchor(week_data, tmp_path):
    table = harness.model_comparison(make_spec(week_data, steps=20), tmp_path)
    assert [r.label for r in table.rows] == ["baseline", "dcam"]
    assert table.delta(table.row("baseline"), "auc") == 0.0


def test_feature_fields_cover_known_features():
    spec = ExperimentSpec("a", "b")
    assert set(spec.feature_fields) == set(CONTEXT_FEATURES)
