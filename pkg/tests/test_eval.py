from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grec.catalog import Action
from grec.dataset import collate, mask_trigger
from grec.eval import (
    CSV_COLUMNS,
    MissingCheckpointError,
    Recipe,
    ResultTable,
    aggregate_metrics,
    evaluate_model,
    hit_rate_at_k,
    new_model,
    read_results_csv,
    recall_at_k,
    run_recipe,
)


def _random_case(rng, V=4, L=2):
    gen = [tuple(int(c) for c in rng.integers(0, V, size=L)) for _ in range(int(rng.integers(0, 25)))]
    truth = tuple(int(c) for c in rng.integers(0, V, size=L))
    return gen, truth


def test_hit_rate_matches_membership_scan():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gen, truth = _random_case(rng)
        K = int(rng.integers(1, 30))
        # brute force: walk the list, skipping repeats, until K distinct SIDs are seen
        seen, hit = [], 0
        for g in gen:
            if g in seen:
                continue
            seen.append(g)
            if len(seen) > K:
                break
            if g == truth:
                hit = 1
        assert hit_rate_at_k(gen, truth, K) == hit


def test_recall_matches_set_oracle():
    rng = np.random.default_rng(1)
    sid_map = {i: tuple(int(c) for c in rng.integers(0, 4, size=2)) for i in range(40)}
    for _ in range(200):
        gen, _ = _random_case(rng)
        pos = set(int(i) for i in rng.choice(40, size=int(rng.integers(1, 8)), replace=False))
        K = int(rng.integers(1, 30))
        top = []
        for g in gen:
            if g not in top:
                top.append(g)
        top = set(top[:K])
        expect = len({p for p in pos if sid_map[p] in top}) / len(pos)
        assert recall_at_k(gen, pos, K, sid_map) == pytest.approx(expect)


def test_metric_examples():
    assert hit_rate_at_k([(1, 2), (3, 4)], (1, 2), 1) == 1
    assert hit_rate_at_k([(1, 2), (3, 4)], (5, 5), 10) == 0
    assert hit_rate_at_k([], (1, 2), 5) == 0
    # duplicates count once: the truth is the second distinct SID
    assert hit_rate_at_k([(0, 0), (0, 0), (1, 1)], (1, 1), 2) == 1
    sid_map = {0: (1, 1), 1: (1, 1), 2: (2, 2)}
    assert recall_at_k([(1, 1)], {0, 1}, 1, sid_map) == 1.0
    assert recall_at_k([(3, 3), (4, 4)], {2}, 2, sid_map) == 0.0
    for f, args in ((hit_rate_at_k, ([(0,)], (0,), 0)), (recall_at_k, ([(0,)], {0}, 0, {0: (0,)}))):
        with pytest.raises(ValueError):
            f(*args)
    with pytest.raises(ValueError):
        recall_at_k([(0,)], set(), 3, {0: (0,)})


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    gen, truth = _random_case(rng, V=3)
    sid_map = {i: (i % 3, (i // 3) % 3) for i in range(9)}
    pos = {int(i) for i in rng.choice(9, size=3, replace=False)}
    hr = [hit_rate_at_k(gen, truth, k) for k in range(1, 12)]
    rc = [recall_at_k(gen, pos, k, sid_map) for k in range(1, 12)]
    assert hr == sorted(hr) and rc == sorted(rc)


def test_aggregate_metrics(tiny_prep):
    samples = [s for s in tiny_prep.eval if s.positives][:3]
    gen = [[s.target_codes] for s in samples]
    m = aggregate_metrics(gen, samples, tiny_prep.sid_map())
    assert m["hr1"] == 1.0 and m["hr10"] == 1.0 and m["n"] == 3 and m["n_recall"] == 3
    assert 0 < m["recall10"] <= 1.0


# -- samples ------------------------------------------------------------------------------

def test_samples_use_only_prior_events(tiny_prep):
    by_user = {}
    for e in tiny_prep.world.events:
        by_user.setdefault(e.user_id, []).append(e)
    for s in tiny_prep.train[:40] + tiny_prep.eval[:40]:
        prior = {e.item_id for e in by_user[s.user_id] if e.timestamp < s.timestamp}
        used = {int(i) for i in np.concatenate([s.short_items, s.long_items]) if i >= 0}
        assert used <= prior


def test_eval_positives_are_same_day_conversions(tiny_prep):
    day = tiny_prep.world.config.n_days - 1
    conversions = [e for e in tiny_prep.world.events if e.day == day and e.action in (Action.CART, Action.PURCHASE)]
    for s in tiny_prep.eval:
        conv = {e.item_id for e in conversions if e.user_id == s.user_id and e.timestamp >= s.timestamp}
        assert s.positives == conv


def test_collate_validation(tiny_prep):
    cfg = tiny_prep.config.model
    with pytest.raises(ValueError):
        collate([], cfg)
    with pytest.raises(ValueError):
        collate(tiny_prep.train[:2], replace(cfg, short_len=cfg.short_len + 1))
    b = mask_trigger(collate(tiny_prep.train[:4], cfg))
    assert torch.all(b.trigger == -1)


# -- recipes ------------------------------------------------------------------------------

def test_integration_grid_single_point(tiny_prep):
    table = run_recipe(Recipe.INTEGRATION_GRID, tiny_prep, seeds=[0], grid=["insert_right_of_bos"])
    assert len(table.rows) == 1 and table.grid_points() == ["insert_right_of_bos"]
    assert set(CSV_COLUMNS) <= set(table.rows[0])


def test_trigger_masking_triggerless_scenario_identical(tiny_prep):
    model = new_model(tiny_prep, seed=0)
    name = next(s.name for s in tiny_prep.world.catalog.scenarios if not s.trigger_bearing)
    table = run_recipe(Recipe.TRIGGER_MASKING, tiny_prep, seeds=[0], scenarios=[name],
                       checkpoints=lambda gp, seed: model)
    a, b = table.rows
    assert {k: a[k] for k in CSV_COLUMNS[3:]} == {k: b[k] for k in CSV_COLUMNS[3:]}


def test_masked_batch_on_triggerless_samples_is_noop(tiny_prep, tiny_model):
    idx = [i for i, s in enumerate(tiny_prep.eval) if s.trigger < 0][:10]
    assert evaluate_model(tiny_model, tiny_prep, idx) == evaluate_model(tiny_model, tiny_prep, idx, masked=True)


def test_missing_checkpoint_names_grid_point(tiny_prep):
    with pytest.raises(MissingCheckpointError, match="add_to_bos"):
        run_recipe(Recipe.INTEGRATION_GRID, tiny_prep, grid=["add_to_bos"], checkpoints=lambda gp, s: None,
                   allow_training=False)


def test_bad_grids(tiny_prep):
    with pytest.raises(ValueError):
        run_recipe(Recipe.INTEGRATION_GRID, tiny_prep, grid=[])
    with pytest.raises(ValueError):
        Recipe("NoSuchRecipe")


def test_recipe_deterministic(tiny_prep):
    a = run_recipe(Recipe.IGR_ABLATION, tiny_prep, seeds=[1], grid=["igr"])
    b = run_recipe(Recipe.IGR_ABLATION, tiny_prep, seeds=[1], grid=["igr"])
    assert a.rows == b.rows


def test_result_table_round_trip(tmp_path):
    t = ResultTable("Demo", metadata={"note": "x"})
    t.add("a", 0, {"hr1": 0.1, "hr10": 0.5, "recall10": 0.25, "recall30": 0.75})
    t.add("a", 1, {"hr1": 0.3, "hr10": 0.7, "recall10": float("nan"), "recall30": 1.0})
    t.add("b", 0, {"hr1": 0.0, "hr10": 0.2, "recall10": 0.0, "recall30": 0.1})
    csv_path, txt_path = t.write(tmp_path)
    assert csv_path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    rows = read_results_csv(csv_path)
    assert [r["grid_point"] for r in rows] == ["a", "a", "b"]
    assert rows[0]["hr10"] == 0.5 and np.isnan(rows[1]["recall10"])
    text = txt_path.read_text()
    assert "recipe: Demo" in text and "# note: x" in text
    assert np.allclose(t.values("a"), [0.5, 0.7])
