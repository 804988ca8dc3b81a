# -*- coding: utf-8 -*-
import pytest

from database import MEMORY_DB, RelayDatabase
from relay.telemetry import SeriesPoint


def _ledger_row(node_id, scope, key_id, action, index=0):
    return {"node_id": node_id, "scope": scope, "key_id": key_id, "action": action,
            "batch_id": 1, "index": index, "t": 1.5}


@pytest.fixture
def db():
    database = RelayDatabase(MEMORY_DB)
    yield database
    database.close()


def test_clean_ledger_has_no_reuse(db):
    db.insert_ledger_rows([
        _ledger_row("NM", "link1", 0, "encrypt"),
        _ledger_row("TN1", "link1", 0, "decrypt"),
        _ledger_row("TN1", "link2", 0, "encrypt"),
        _ledger_row("EN", "link2", 0, "decrypt"),
        _ledger_row("NM", "nk", 0, "generate"),
    ])
    assert db.find_node_reuse() == []
    assert db.find_link_reuse() == []
    frame = db.get_ledger_frame("TN1")
    assert list(frame.columns) == ["node_id", "scope", "key_id", "action", "batch_id", "index", "t"]
    assert len(frame) == 2
    assert len(db.get_ledger_frame()) == 5


def test_reuse_detected_per_node_and_per_link(db):
    db.insert_ledger_rows([
        _ledger_row("TN1", "link1", 4, "decrypt"),
        _ledger_row("TN1", "link1", 4, "decrypt", index=1),
        _ledger_row("NM", "link1", 7, "encrypt"),
        _ledger_row("TN2", "link1", 7, "encrypt"),
    ])
    node_reuse = db.find_node_reuse()
    assert len(node_reuse) == 1
    assert (node_reuse[0]["node_id"], node_reuse[0]["key_id"], node_reuse[0]["uses"]) == ("TN1", 4, 2)

    link_reuse = {(row["key_id"], row["action"]) for row in db.find_link_reuse()}
    assert link_reuse == {(4, "decrypt"), (7, "encrypt")}


def test_network_keys_excluded_from_link_reuse(db):
    db.insert_ledger_rows([
        _ledger_row("NM", "nk", 3, "encrypt"),
        _ledger_row("TN1", "nk", 3, "encrypt"),
    ])
    assert db.find_link_reuse() == []


def test_wire_and_telemetry_rows(db):
    row = {"node_id": "NM", "t": 2.0, "channel": "pair:NM-TN1", "direction": "out", "msg_type": "KEY_HOP",
           "sequence": 1, "status": "ok", "frame": "abcd"}
    db.insert_wire_rows([row])
    frame = db.get_wire_frame("NM")
    assert frame.loc[0, "frame"] == "abcd"
    assert db.get_wire_frame("EN").empty

    point = SeriesPoint("node_stats", {"node": "TN1", "link": "1"}, {"available_qk": 40}, 5_000_000_000)
    db.insert_telemetry_points([point])
    rows = db.get_telemetry_rows()
    assert rows == [{"measurement": "node_stats", "tags": {"link": "1", "node": "TN1"},
                     "fields": {"available_qk": 40}, "timestamp_ns": 5_000_000_000}]


def test_upsert_batches_replaces(db):
    row = {"batch_id": 1, "h": 40, "min_count": 60, "started_t": 120.0, "completed_t": None,
           "received": 0, "shortfall": 0, "status": "in_flight"}
    db.upsert_batches([row])
    db.upsert_batches([dict(row, completed_t=121.0, received=40, status="complete")])
    frame = db.get_batches_frame()
    assert len(frame) == 1
    assert frame.loc[0, "status"] == "complete"
    assert int(frame.loc[0, "received"]) == 40


def test_config_run_logs_and_stats(db):
    assert db.get_system_config("node_id") is None
    db.set_system_config("node_id", "TN1")
    db.set_system_config("node_id", "TN2")
    assert db.get_system_config("node_id") == "TN2"

    db.log_run("epb_table1", "sim", "complete")
    db.log_run("epb_table1", "audit", "clean", "0 violations")
    logs = db.get_run_logs()
    assert [entry["verb"] for entry in logs] == ["audit", "sim"]

    db.insert_ledger_rows([_ledger_row("NM", "link1", 0, "encrypt")])
    stats = db.get_database_stats()
    assert stats["key_usage_count"] == 1
    assert stats["run_logs_count"] == 2
    assert stats["db_size_mb"] == 0


def test_file_database_persists(tmp_path):
    path = str(tmp_path / "node.db")
    first = RelayDatabase(path)
    first.insert_ledger_rows([_ledger_row("EN", "link3", 2, "decrypt")])
    first.close()

    second = RelayDatabase(path)
    assert len(second.get_ledger_frame("EN")) == 1
    assert second.get_database_stats()["db_size_mb"] > 0
    second.close()
