import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grec.catalog import (
    Action,
    ConfigError,
    InteractionEvent,
    SECONDS_PER_DAY,
    SyntheticWorldConfig,
    build_world,
    catalog_from_parts,
    catalog_to_json,
    generate_world,
    matrix_from_bytes,
    matrix_to_bytes,
    read_events,
    read_matrix,
    split_train_eval,
    write_events,
    write_matrix,
)


def small_cfg(**kw):
    base = dict(n_items=120, n_users=12, n_days=4, events_per_user=15, branching=(4, 3, 2))
    base.update(kw)
    return SyntheticWorldConfig(**base)


def test_same_seed_is_byte_identical(tmp_path):
    paths = []
    for run in range(2):
        w = build_world(small_cfg(seed=7))
        p = tmp_path / f"events{run}.jsonl"
        write_events(p, w.events)
        m = tmp_path / f"emb{run}.bin"
        write_matrix(m, w.catalog.embeddings)
        paths.append((p.read_bytes(), m.read_bytes()))
    assert paths[0] == paths[1]


def test_different_seed_differs():
    a = build_world(small_cfg(seed=1))
    b = build_world(small_cfg(seed=2))
    assert not np.allclose(a.catalog.embeddings, b.catalog.embeddings)


def test_single_scenario_uniform_affinity():
    cfg = small_cfg(n_scenarios=1, affinity=[[0.25, 0.25, 0.25, 0.25]])
    w = build_world(cfg)
    assert {e.scenario_id for e in w.events} == {w.scenarios[0].name}


def test_category_recovery_by_nearest_centroid():
    w = build_world(SyntheticWorldConfig(n_items=1000, n_users=4))
    X = w.catalog.embeddings
    y = w.catalog.categories[:, 0]
    C = np.stack([X[y == k].mean(0) for k in range(10)])
    per_dim_std = np.sqrt(np.mean([X[y == k].var(0).mean() for k in range(10)]))
    sep = min(np.linalg.norm(C[i] - C[j]) for i in range(10) for j in range(i))
    assert sep >= 4 * per_dim_std
    pred = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
    assert (pred == y).mean() >= 0.99


def test_embeddings_unit_norm_and_ids_ordered():
    w = build_world(small_cfg())
    assert np.allclose(np.linalg.norm(w.catalog.embeddings, axis=1), 1.0)
    assert [it.item_id for it in w.catalog.items] == list(range(120))


def test_events_reference_known_items_and_sorted():
    w = build_world(small_cfg())
    ts = [e.timestamp for e in w.events]
    assert ts == sorted(ts)
    for e in w.events:
        assert e.item_id in w.catalog
        sc = w.catalog.scenario(e.scenario_id)
        if not sc.trigger_bearing:
            assert e.trigger_item_id is None
        if not sc.has_query:
            assert e.query_text is None
        assert 0 <= e.day < 4


def test_events_land_in_scenario_pool():
    w = build_world(small_cfg())
    for e in w.events[:200]:
        assert e.scenario_id in w.catalog[e.item_id].pool_tags


def test_user_history_split():
    w = build_world(small_cfg(short_history_len=5))
    for u in w.users:
        assert len(u.short_history) <= 5
        both = u.long_history + u.short_history
        assert [e.timestamp for e in both] == sorted(e.timestamp for e in both)


def test_generate_world_matches_build_world():
    cat, users, events = generate_world(small_cfg(seed=3))
    w = build_world(small_cfg(seed=3))
    assert events == w.events
    assert np.array_equal(cat.embeddings, w.catalog.embeddings)


@pytest.mark.parametrize("kw,field", [
    (dict(n_items=0), "n_items"),
    (dict(action_probs=(0.5, 0.5, 0.5)), "action_probs"),
    (dict(affinity=[[1.0, 0, 0, 0]]), "affinity"),
    (dict(trigger_follow=1.5), "trigger_follow"),
    (dict(branching=(3, 0, 2)), "branching"),
])
def test_invalid_config_names_field(kw, field):
    with pytest.raises(ConfigError) as err:
        build_world(small_cfg(**kw))
    assert err.value.field == field


def _ev(day, sec=0, uid=0):
    return InteractionEvent(uid, 0, "homepage", Action.CLICK, day * SECONDS_PER_DAY + sec)


def test_split_all_on_eval_day():
    evs = [_ev(3, s) for s in range(5)]
    train, ev = split_train_eval(evs, 3)
    assert train == [] and ev == evs


def test_split_eval_day_after_everything_warns():
    res = split_train_eval([_ev(1), _ev(2)], 9)
    assert res.eval == [] and len(res.train) == 2
    assert res.warning is not None


def test_split_counts_match_filter():
    rng = np.random.default_rng(0)
    evs = [_ev(int(rng.integers(0, 11)), int(rng.integers(0, SECONDS_PER_DAY))) for _ in range(500)]
    train, ev = split_train_eval(evs, 10)
    assert len(train) == sum(1 for e in evs if e.timestamp < 10 * SECONDS_PER_DAY)
    assert len(ev) == sum(1 for e in evs if 10 * SECONDS_PER_DAY <= e.timestamp < 11 * SECONDS_PER_DAY)


def test_split_rejects_empty():
    with pytest.raises(ValueError):
        split_train_eval([], 0)


def test_event_json_round_trip(tmp_path):
    w = build_world(small_cfg())
    p = tmp_path / "e.jsonl"
    write_events(p, w.events)
    back = read_events(p)
    assert back == w.events
    q = tmp_path / "e2.jsonl"
    write_events(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_matrix_header_layout():
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = matrix_to_bytes(m)
    assert buf[:4] == b"GREC"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:12], "little") == 3
    assert int.from_bytes(buf[12:16], "little") == 0
    assert len(buf) == 16 + 6 * 4
    back, end = matrix_from_bytes(buf)
    assert end == len(buf) and np.array_equal(back, m)


def test_matrix_rejects_bad_magic_and_truncation():
    buf = matrix_to_bytes(np.ones((2, 2)))
    with pytest.raises(ValueError):
        matrix_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        matrix_from_bytes(buf[:-1])


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 6), seed=st.integers(0, 2 ** 31 - 1))
def test_matrix_write_read_write_identical(rows, cols, seed, tmp_path_factory):
    m = np.random.default_rng(seed).normal(size=(rows, cols)).astype(np.float32)
    d = tmp_path_factory.mktemp("m")
    write_matrix(d / "a.bin", m)
    write_matrix(d / "b.bin", read_matrix(d / "a.bin"))
    assert (d / "a.bin").read_bytes() == (d / "b.bin").read_bytes()


def test_catalog_json_round_trip():
    cfg = small_cfg()
    w = build_world(cfg)
    records = catalog_to_json(w.catalog)
    back = catalog_from_parts(json.loads(json.dumps(records)), w.catalog.embeddings.astype(np.float32),
                              cfg.scenarios, cfg.branching)
    assert catalog_to_json(back) == records
    assert np.array_equal(back.categories, w.catalog.categories)
    assert np.allclose(back.embeddings, w.catalog.embeddings, atol=1e-6)
