import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsdebias.dataset import GroupKey
from rsdebias.dynamics import (
    DynamicsConfig,
    ErrorRecord,
    apply_error_record,
    read_error_stream,
    restore,
    run_update_stream,
    snapshot,
)
from rsdebias.errors import CompatibilityError, DataError, OrderingError

from conftest import make_table

G = GroupKey(0, 1, 1)


def table():
    return make_table([[0.1 * k for k in range(9)], [0.5] * 9])


def test_single_update_examples():
    t = table()
    t.groups[G].rs = 0.5
    assert apply_error_record(t, ErrorRecord(G, 1.0, 0), DynamicsConfig(0.99)) == pytest.approx(0.505)
    t.groups[G].rs = 0.5
    assert apply_error_record(t, ErrorRecord(G, 7.0, 0), DynamicsConfig(1.0)) == 0.5
    assert apply_error_record(t, ErrorRecord(G, 7.0, 0), DynamicsConfig(0.0)) == 7.0


def test_class_mean_tracks_update():
    t = table()
    apply_error_record(t, ErrorRecord(G, 3.0, 0), DynamicsConfig(0.9))
    expected = sum(t.groups[GroupKey(0, s, u)].rs for s in range(3) for u in range(3)) / 9
    assert t.class_mean_rs[0] == pytest.approx(expected, abs=1e-15)
    assert t.class_mean_rs[1] == pytest.approx(0.5)


def closed_form(rs0, loss, mu, k):
    return mu ** k * rs0 + (1 - mu ** k) * loss


@pytest.mark.parametrize("k", [1, 2, 10, 137, 1000])
@pytest.mark.parametrize("mu", [0.0, 0.5, 0.9, 0.99, 1.0])
def test_constant_loss_closed_form(k, mu):
    t = table()
    rs0 = t.groups[G].rs
    report = run_update_stream(t, [ErrorRecord(G, 0.8, i) for i in range(k)], DynamicsConfig(mu))
    assert report.table.groups[G].rs == pytest.approx(closed_form(rs0, 0.8, mu, k), abs=1e-12)
    assert report.records_applied == k


def test_empty_stream_is_noop():
    t = table()
    report = run_update_stream(t, [], DynamicsConfig())
    assert report.table.to_json() == t.to_json()
    d = report.to_dict()
    assert d["records_applied"] == 0 and d["rejected"] == 0 and d["groups_touched"] == 0
    assert d["rs_before"] == {"min": 0.0, "max": 0.0} and d["rs_after"] == {"min": 0.0, "max": 0.0}


def test_locality_and_input_not_mutated():
    t = table()
    before = t.to_json()
    report = run_update_stream(t, [ErrorRecord(G, 2.0, i) for i in range(5)])
    assert t.to_json() == before
    for k, g in report.table.groups.items():
        if k != G:
            assert g.rs == t.groups[k].rs
    assert report.table.class_mean_rs[1] == t.class_mean_rs[1]


def test_rejected_records_counted():
    recs = [ErrorRecord(G, -1.0, 0), ErrorRecord(G, math.nan, 1), ErrorRecord(G, math.inf, 2),
            ErrorRecord(G, 1.0, 3)]
    report = run_update_stream(table(), recs)
    assert report.rejected == 3 and report.records_applied == 1


def test_out_of_order_steps():
    with pytest.raises(OrderingError):
        run_update_stream(table(), [ErrorRecord(G, 1.0, 5), ErrorRecord(G, 1.0, 4)])
    # equal steps are allowed (one batch, many instances)
    run_update_stream(table(), [ErrorRecord(G, 1.0, 5), ErrorRecord(G, 1.0, 5)])


def test_unknown_group():
    with pytest.raises(DataError):
        run_update_stream(table(), [ErrorRecord(GroupKey(9, 0, 0), 1.0, 0)])


def test_mu_one_is_byte_identical():
    t = table()
    recs = [ErrorRecord(GroupKey(c, s, u), float(c + s + u), i)
            for i, (c, s, u) in enumerate([(0, 0, 0), (1, 2, 2), (0, 1, 2)] * 10)]
    assert run_update_stream(t, recs, DynamicsConfig(1.0)).table.to_json() == t.to_json()


def test_report_min_max():
    t = table()
    recs = [ErrorRecord(GroupKey(0, 0, 1), 1.0, 0), ErrorRecord(GroupKey(0, 2, 2), 0.0, 1)]
    d = run_update_stream(t, recs, DynamicsConfig(0.5)).to_dict()
    assert d["rs_before"] == {"min": pytest.approx(0.1), "max": pytest.approx(0.8)}
    assert d["rs_after"] == {"min": pytest.approx(0.4), "max": pytest.approx(0.55)}
    assert d["groups_touched"] == 2


@given(rs=st.floats(0, 10), mu=st.floats(0, 1))
def test_fixed_point(rs, mu):
    t = table()
    t.groups[G].rs = rs
    new = apply_error_record(t, ErrorRecord(G, rs, 0), DynamicsConfig(mu))
    assert new == pytest.approx(rs, rel=1e-12, abs=1e-300)


@given(a=st.floats(0, 5), b=st.floats(0, 5), loss=st.floats(0, 5), mu=st.floats(0, 1))
def test_contraction(a, b, loss, mu):
    t1, t2 = table(), table()
    t1.groups[G].rs, t2.groups[G].rs = a, b
    cfg = DynamicsConfig(mu)
    r1 = apply_error_record(t1, ErrorRecord(G, loss, 0), cfg)
    r2 = apply_error_record(t2, ErrorRecord(G, loss, 0), cfg)
    assert abs(r1 - r2) == pytest.approx(mu * abs(a - b), abs=1e-12)


@given(losses=st.lists(st.floats(0, 3), max_size=50), mu=st.floats(0, 1))
def test_boundedness(losses, mu):
    t = table()
    rs0 = t.groups[G].rs
    upper = max(rs0, 3.0)
    report = run_update_stream(t, [ErrorRecord(G, x, i) for i, x in enumerate(losses)],
                               DynamicsConfig(mu))
    assert 0 <= report.table.groups[G].rs <= upper + 1e-12


def test_loss_divisor():
    t = table()
    t.groups[G].rs = 0.0
    r = apply_error_record(t, ErrorRecord(G, 10.0, 0), DynamicsConfig(0.5, loss_divisor=4.0))
    assert r == pytest.approx(1.25)


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig(mu=1.5)
    with pytest.raises(ValueError):
        DynamicsConfig(loss_divisor=0)


def test_snapshot_roundtrip(tmp_path):
    t = table()
    written = snapshot(t, tmp_path / "s.json", DynamicsConfig(0.9), records_applied=4)
    back = restore(tmp_path / "s.json")
    assert back.to_json() == (tmp_path / "s.json").read_text()
    assert back.to_json() == written.to_json()
    assert back.meta == {"mu": 0.9, "loss_divisor": 1.0, "records_applied": 4}
    assert back.class_mean_rs == t.class_mean_rs


def test_restore_digest_guard(tmp_path):
    snapshot(table(), tmp_path / "s.json")
    restore(tmp_path / "s.json", dataset_digest="x" * 64)
    with pytest.raises(CompatibilityError):
        restore(tmp_path / "s.json", dataset_digest="y" * 64)


def test_snapshot_diff_only_touched_groups(tmp_path):
    t = table()
    snapshot(t, tmp_path / "before.json")
    touched = {GroupKey(0, 0, 2), GroupKey(1, 1, 0)}
    recs = [ErrorRecord(k, 2.0, i) for i, k in enumerate(sorted(touched, key=GroupKey.as_tuple) * 3)]
    report = run_update_stream(t, recs)
    snapshot(report.table, tmp_path / "after.json")
    before = json.loads((tmp_path / "before.json").read_text())
    after = json.loads((tmp_path / "after.json").read_text())
    diff = {(g["class_id"], g["size_bin"], g["pos_bin"])
            for g, h in zip(before["groups"], after["groups"]) if g != h}
    assert diff == {k.as_tuple() for k in touched}
    changed_keys = {k for k in before if before[k] != after[k]}
    assert changed_keys == {"groups", "class_mean_rs"}


def test_read_error_stream(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"class_id": 0, "size_bin": 1, "pos_bin": 1, "loss": 0.5, "step": 3}\n\n')
    assert list(read_error_stream(p)) == [ErrorRecord(G, 0.5, 3)]
    p.write_text('{"class_id": 0}\n')
    with pytest.raises(DataError):
        list(read_error_stream(p))
