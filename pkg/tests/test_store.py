import json

import numpy as np
import pytest

from hmglab.store import ResultStore, canonical, dedupe, merge_stores, record_identity


def test_canonical_is_sorted_compact_and_numpy_free():
    rec = {"b": np.float64(1.5), "a": (np.int64(2), np.array([1.0, 2.0])), "c": np.bool_(True)}
    assert canonical(rec) == '{"a":[2,[1.0,2.0]],"b":1.5,"c":true}'
    assert canonical({"x": float("inf")}) == '{"x":"inf"}'
    assert canonical({"x": float("nan")}) == '{"x":"nan"}'


def test_record_identity_ignores_payload():
    a = {"type": "nu", "config_hash": "h", "key": [1, 0.5], "value": 1.0}
    b = dict(a, value=2.0)
    assert record_identity(a) == record_identity(b)
    assert record_identity(a) != record_identity(dict(a, key=[2, 0.5]))


def test_dedupe_keeps_first_in_order():
    recs = [{"type": "t", "key": k, "v": i} for i, k in enumerate([1, 2, 1, 3, 2])]
    assert [r["v"] for r in dedupe(recs)] == [0, 1, 3]


def test_append_only_and_readback(tmp_path):
    store = ResultStore(tmp_path / "s")
    assert store.is_empty()
    assert list(store.records()) == []
    store.append({"type": "a", "key": 1})
    first = store.records_path.read_bytes()
    store.append({"type": "a", "key": 2, "x": np.float64(0.25)})
    data = store.records_path.read_bytes()
    assert data.startswith(first)
    assert [r["key"] for r in store.records()] == [1, 2]
    assert not store.is_empty()
    for line in data.decode().splitlines():
        assert canonical(json.loads(line)) == line


def test_manifest_runs(tmp_path):
    store = ResultStore(tmp_path)
    assert store.manifest()["runs"] == []
    store.begin_run("k1", "cascade", "abc")
    assert not store.completed("k1")
    store.end_run("k1", "ok", 4)
    store.begin_run("k2", "cascade", "abc")
    store.end_run("k2", "failed", 1)
    runs = store.manifest()["runs"]
    assert [(r["run_key"], r["status"], r["records"]) for r in runs] == [("k1", "ok", 4), ("k2", "failed", 1)]
    assert store.completed("k1") and not store.completed("k2")
    assert all(r["finished"] is not None for r in runs)
    # bookkeeping stays out of the record log
    assert not store.records_path.exists()


def test_merge_stores_drops_duplicates(tmp_path):
    s1, s2 = ResultStore(tmp_path / "1"), ResultStore(tmp_path / "2")
    for k in (1, 2):
        s1.append({"type": "t", "config_hash": "h", "key": k})
    for k in (2, 3):
        s2.append({"type": "t", "config_hash": "h", "key": k})
    assert [r["key"] for r in merge_stores([s1, s2])] == [1, 2, 3]


def test_canonical_rejects_unserializable():
    with pytest.raises(TypeError):
        canonical({"x": object()})
