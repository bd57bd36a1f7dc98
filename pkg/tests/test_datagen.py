import json
import math

import numpy as np
import pytest

from dcam import datagen as G
from dcam.features import read_jsonl
from dcam.metrics import auc


def small(**kw):
    base = dict(n_users=50, n_items=64, n_impressions=3000)
    base.update(kw)
    return G.GenConfig(**base)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_zero_weights_give_balanced_clicks():
    ds, manifest = G.generate(small(n_impressions=40_000))
    se = math.sqrt(0.25 / len(ds))
    assert abs(ds.label.mean() - 0.5) < 3 * se
    assert manifest["empirical_ctr"] == ds.label.mean()


def test_same_seed_gives_identical_files(tmp_path):
    cfg = small(seed=5, affinity_scale=1.0, seq_weight=1.0)
    G.write_dataset(cfg, tmp_path / "a", n_mc=100_000)
    G.write_dataset(cfg, tmp_path / "b", n_mc=100_000)
    for name in ("train.jsonl", "eval.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = small(seed=6, affinity_scale=1.0, seq_weight=1.0)
    G.write_dataset(other, tmp_path / "c", n_mc=100_000)
    assert (tmp_path / "c" / "train.jsonl").read_bytes() != (tmp_path / "a" / "train.jsonl").read_bytes()


def test_written_files_load_back(tmp_path):
    cfg = small(seq_len_min=1)
    manifest = G.write_dataset(cfg, tmp_path, n_mc=100_000)
    train = read_jsonl(tmp_path / "train.jsonl")
    evaluation = read_jsonl(tmp_path / "eval.jsonl")
    assert len(train) + len(evaluation) == cfg.n_impressions
    assert len(evaluation) == manifest["files"]["n_eval"] == 600
    recorded = json.loads((tmp_path / "manifest.json").read_text())
    assert recorded["bayes_auc"]["value"] == manifest["bayes_auc"]["value"]
    assert recorded["config"]["w_week"] == cfg.w_week


def test_week_dominant_ordering_is_recovered():
    cfg = G.GenConfig.planted({"week": 2.0, "hour": 0.3, "geo": 0.3, "city": 0.3, "aoi": 0.3},
                              seed=3, n_impressions=100_000)
    ds, _ = G.generate(cfg)
    ctr = [ds.label[ds.week == w].mean() for w in range(7)]
    assert list(np.argsort(ctr)) == list(np.argsort(cfg.w_week))


def test_planted_context_spread_grows_with_weight():
    spreads = []
    for scale in (0.25, 0.75, 1.5):
        cfg = G.GenConfig.planted({"hour": scale}, seed=1, n_impressions=60_000)
        ds, _ = G.generate(cfg)
        spreads.append(np.std([ds.label[ds.hour == h].mean() for h in range(24)]))
    assert spreads[0] <= spreads[1] <= spreads[2]


def test_sequences_are_well_formed():
    cfg = small(seq_len_min=2, seq_len_max=6)
    ds, _ = G.generate(cfg)
    assert ds.l_max == 6
    assert ds.seq_len.min() >= 2 and ds.seq_len.max() <= 6
    mask = ds.seq_mask.astype(bool)
    assert np.all(ds.seq_ts[mask] <= np.repeat(ds.decision_ts, ds.seq_len))
    assert np.all(ds.seq_item[~mask] == 0)
    assert ds.item_id.min() >= 16 and np.all(ds.seq_item[mask] >= 16)


def test_recency_effect_favours_recent_matches():
    cfg = G.recency_config(0)
    ds, _ = G.generate(cfg)
    last = ds.seq_item[np.arange(len(ds)), ds.seq_len - 1]
    newest_match = (last % 16) == (ds.item_id % 16)
    first_only = ((ds.seq_item[:, 0] % 16) == (ds.item_id % 16)) & ~newest_match & (ds.seq_len > 3)
    assert ds.label[newest_match].mean() > ds.label[first_only].mean() + 0.05


def test_bayes_auc_of_uninformative_world():
    result = G.bayes_auc(small(), n_mc=100_000)
    assert abs(result.value - 0.5) < 0.005


def test_bayes_auc_matches_two_point_mixture():
    # city 1 adds +4 to the logit, city 0 adds nothing; each holds half the traffic
    cfg = small(n_cities=2, w_city=[0.0, 4.0])
    p_hi, p_lo = sigmoid(4.0), 0.5
    pos_hi, pos_lo = 0.5 * p_hi, 0.5 * p_lo
    neg_hi, neg_lo = 0.5 * (1 - p_hi), 0.5 * (1 - p_lo)
    n_pos, n_neg = pos_hi + pos_lo, neg_hi + neg_lo
    closed_form = (pos_hi * neg_lo + 0.5 * (pos_hi * neg_hi + pos_lo * neg_lo)) / (n_pos * n_neg)
    assert G.bayes_auc(cfg, n_mc=200_000).value == pytest.approx(closed_form, abs=0.01)


def test_bayes_auc_standard_error_scales():
    cfg = G.acceptance_config(0)
    small_se = G.bayes_auc(cfg, n_mc=100_000).se
    large_se = G.bayes_auc(cfg, n_mc=400_000).se
    ratio = small_se / large_se
    assert 1.0 <= ratio <= 4.0  # ideal 2


def test_bayes_auc_rejects_small_budget():
    with pytest.raises(ValueError):
        G.bayes_auc(small(), n_mc=1000)


def test_true_logits_reproduce_generation():
    cfg = G.acceptance_config(0, n_impressions=2000)
    logits = G.true_logits(cfg)
    ds, manifest = G.generate(cfg)
    assert manifest["true_logit_mean"] == logits.mean()
    # the planted logit ranks the observed clicks well above chance
    assert auc(logits, ds.label) > 0.65


def test_preset_worlds():
    acc = G.acceptance_config(0)
    assert np.std(acc.w_week) > np.std(acc.w_hour)
    assert abs(G.bayes_auc(acc).value - 0.72) <= 0.01
    noise = G.noise_context_config(0)
    assert not any(noise.w_city) and not any(noise.w_aoi)
    assert np.std(noise.w_hour) > 0 and np.std(noise.w_geo) > 0


def test_config_validation_lists_every_problem():
    with pytest.raises(ValueError) as err:
        G.GenConfig(n_users=0, n_items=10, w_week=[0.0] * 6)
    message = str(err.value)
    assert "n_users" in message and "multiple of 16" in message and "w_week" in message
    with pytest.raises(ValueError):
        G.GenConfig(w_hour=[float("nan")] * 24)
    with pytest.raises(ValueError):
        G.GenConfig.from_dict({"n_users": 3, "colour": "red"})


def test_config_round_trip():
    cfg = G.recency_config(2)
    assert G.GenConfig.from_dict(cfg.to_dict()) == cfg


def test_split_is_disjoint_and_deterministic():
    ds, _ = G.generate(small())
    a_train, a_eval = G.split(ds, 0.25, 4)
    b_train, b_eval = G.split(ds, 0.25, 4)
    assert len(a_eval) == 750 and len(a_train) == 2250
    np.testing.assert_array_equal(a_eval.decision_ts, b_eval.decision_ts)
    ds.user_id = np.arange(len(ds), dtype=np.uint64)  # tag rows to track them
    train, evaluation = G.split(ds, 0.25, 4)
    tags = np.concatenate([train.user_id, evaluation.user_id])
    np.testing.assert_array_equal(np.sort(tags), ds.user_id)


def test_user_preferences_shape_the_sequence():
    cfg = small(n_users=20, n_impressions=20_000, user_concentration=0.05)
    ds, _ = G.generate(cfg)
    mask = ds.seq_mask.astype(bool)
    cats = (ds.seq_item.astype(np.int64) % 16)
    users = np.repeat(ds.user_id, ds.seq_len)
    top_share = []
    for u in np.unique(users):
        c = np.bincount(cats[mask][users == u], minlength=16)
        top_share.append(c.max() / c.sum())
    # concentrated preferences put far more than 1/16 of events in the favourite category
    assert np.mean(top_share) > 0.4
