# -*- coding: utf-8 -*-
import hashlib
import os

import pytest

from database import MEMORY_DB, RelayDatabase
from relay.keycore import KeyStatus, TableScope, table_digest
from relay.scenario import Outage, load_scenario_file
from relay.simharness import PeriodicActivity, SimEventKind, SimNetwork, run_sim, to_ns
from utils.error_handler import InvariantViolation

BASELINE_TRIGGERS = [120.0, 200.0, 280.0, 360.0, 440.0, 520.0, 600.0]


@pytest.fixture(scope="module")
def baseline():
    return run_sim(load_scenario_file("epb_table1"))


@pytest.fixture(scope="module")
def outages():
    return run_sim(load_scenario_file("epb_day1_outages"))


def test_periodic_activity_times():
    activity = PeriodicActivity(10.0, 4, 0, lambda now: None, offset=0.5, k=0)
    assert activity.time() == 0.5
    activity.k = 3
    assert activity.time() == 30.5
    assert to_ns(1.25) == 1_250_000_000


def test_baseline_network_key_rate(baseline):
    batches = baseline.summary["batches"]
    assert batches["triggered"] == 7
    assert batches["completed"] == 7
    assert batches["h_values"] == [40] * 7
    assert batches["trigger_times"] == pytest.approx(BASELINE_TRIGGERS)
    assert batches["shortfall"] == 0
    assert baseline.nk_delivered == 280
    assert baseline.network_key_rate == pytest.approx(280 / 600)
    assert baseline.summary["network_key_rate_bps"] == pytest.approx(280 / 600 * 256)
    assert [batch.batch_id for batch in baseline.batches] == list(range(1, 8))


def test_baseline_network_keys_identical_everywhere(baseline):
    digests = {info["tables"]["nk"]["digest"] for info in baseline.summary["nodes"].values()}
    records = {info["tables"]["nk"]["records"] for info in baseline.summary["nodes"].values()}
    assert records == {280}
    nm_nk = baseline.nodes["NM"].nk_table
    assert nm_nk.count(KeyStatus.USED) == 280
    assert len(digests) == 2  # NM 的记录为 Used，其余节点为 Fresh


def test_sawtooth_stays_between_reserve_and_threshold(baseline):
    points = baseline.telemetry.select("link_stats", node="NM", link="1")
    after_first = [p.fields["available_qk"] for p in points if p.timestamp_ns >= 120 * 10 ** 9]
    assert after_first
    assert min(after_first) >= 20
    assert max(after_first) <= 60


def test_link_statistics_close_to_profiles(baseline):
    links = baseline.summary["links"]
    assert links["1"]["skr_mean"] == pytest.approx(128.0)
    assert links["1"]["skr_std"] == pytest.approx(0.0)
    assert links["2"]["skr_mean"] == pytest.approx(1310.0, rel=0.05)
    assert links["3"]["qber_mean"] == pytest.approx(1.4, abs=0.1)
    assert links["1"]["cycles"] == 300
    assert links["3"]["cycles"] == 60
    assert links["2"]["compromised_cycles"] == 0


def test_baseline_link_ends_agree(baseline):
    for link, (left, right) in baseline.network.link_endpoints().items():
        assert len(left.table.records) == len(right.table.records)
        assert left.table.ingested_bits_total == baseline.network.emulators[link].bits_delivered


def test_checkpoints_ran(baseline):
    assert baseline.checkpoints >= 60
    assert baseline.summary["events"]["Checkpoint"] == 60


def test_same_seed_same_digest(scenario):
    first = run_sim(scenario(duration=130.0))
    second = run_sim(scenario(duration=130.0))
    assert first.digest() == second.digest()
    assert first.nk_delivered == 40
    other = run_sim(scenario(duration=130.0, seed=8))
    assert other.digest() != first.digest()


def test_zero_duration_run(scenario):
    report = run_sim(scenario(duration=0.0))
    assert report.nk_delivered == 0
    assert report.network_key_rate == 0.0
    assert report.batches == []


def test_pair_outage_defers_trigger(outages, baseline):
    batches = outages.summary["batches"]
    times = batches["trigger_times"]
    assert not any(190.0 <= t < 230.0 for t in times)
    assert any(t == pytest.approx(230.0) for t in times)
    deferred = times.index(next(t for t in times if t == pytest.approx(230.0)))
    assert batches["h_values"][deferred] > 40
    assert batches["completed"] == batches["triggered"]
    assert baseline.nk_delivered - 40 <= outages.nk_delivered <= baseline.nk_delivered


def test_reporting_outage_buffers_and_flushes(outages):
    counters = outages.summary["nodes"]["TN1"]["counters"]
    assert counters["reports_buffered"] >= 60
    assert counters["reports_flushed"] == counters["reports_buffered"]
    assert outages.summary["events"]["OutageStart"] == 2
    assert outages.telemetry.rejected == 0


def test_disturbance_marks_compromised_keys():
    report = run_sim(load_scenario_file("epb_day2_wind"))
    links = report.summary["links"]
    assert links["1"]["compromised_cycles"] > 0
    nm_link1 = report.nodes["NM"].endpoints["right"].table
    assert nm_link1.count(KeyStatus.COMPROMISED) > 0
    consumed = {e.key_id for e in report.nodes["NM"].ledger.entries
                if e.scope == "link1" and e.action == "encrypt"}
    compromised = {r.key_id for r in nm_link1.records if r.status is KeyStatus.COMPROMISED}
    assert not consumed & compromised
    assert report.nk_delivered <= 280


def test_tampered_hop_loses_one_key():
    report = run_sim(load_scenario_file("tamper_hop"))
    first = report.batches[0]
    assert first.status == "complete"
    assert first.received == first.h - 1
    edge_nk = report.nodes["EN"].nk_table
    assert report.nk_delivered == len(edge_nk.records)
    assert report.summary["batches"]["shortfall"] == 1


def test_trace_records_events(scenario):
    report = run_sim(scenario(duration=20.0), trace=True)
    kinds = {event.kind for event in report.network.events}
    assert {SimEventKind.LINK_CYCLE, SimEventKind.POLL_TICK, SimEventKind.REPORT_TICK,
            SimEventKind.DELIVER, SimEventKind.CHECKPOINT} <= kinds
    times = [event.time_s for event in report.network.events]
    assert times == sorted(times)


def test_double_use_raises_invariant_violation(scenario):
    network = SimNetwork(scenario(duration=10.0))
    ledger = network.nodes["TN1"].ledger
    ledger.record(TableScope.quantum_link(1), 0, "decrypt")
    with pytest.raises(InvariantViolation) as excinfo:
        ledger.record(TableScope.quantum_link(1), 0, "decrypt")
    assert excinfo.value.invariant == "single_use"


def test_zero_length_outage_ignored(scenario):
    network = SimNetwork(scenario(duration=10.0))
    network.inject_outage(Outage("pair", 5.0, 5.0, nodes=("NM", "TN1")))
    assert network.outages == []


# ---- 多种子与可重复性 ---- #
MULTI_SEED_DURATION = 860.0


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(1, 21))
def test_many_seeds_keep_network_keys_consistent(scenario, seed):
    report = run_sim(scenario(duration=MULTI_SEED_DURATION, seed=seed))
    batches = report.summary["batches"]
    assert batches["triggered"] >= 10
    assert batches["completed"] == batches["triggered"]
    assert batches["shortfall"] == 0
    assert all(h > 0 for h in batches["h_values"])
    assert report.nk_delivered == sum(batches["h_values"])

    nm_nk = report.nodes["NM"].nk_table
    for node_id in ("TN1", "TN2", "EN"):
        nk = report.nodes[node_id].nk_table
        assert table_digest(nk) == table_digest(nm_nk)
        assert [r.bits for r in nk.records] == [r.bits for r in nm_nk.records]

    db = RelayDatabase(MEMORY_DB)
    assert db.insert_ledger_rows([row for node in report.nodes.values() for row in node.ledger.rows()])
    assert db.find_node_reuse() == []
    assert db.find_link_reuse() == []
    db.close()


def _bundle_digests(path):
    digests = {}
    for root, _, files in os.walk(path):
        for name in files:
            full = os.path.join(root, name)
            with open(full, "rb") as fh:
                digests[os.path.relpath(full, path)] = hashlib.sha256(fh.read()).hexdigest()
    return digests


def test_repeated_runs_write_identical_bundles(scenario, tmp_path):
    bundles = []
    for attempt in range(3):
        out_dir = str(tmp_path / f"run{attempt}")
        run_sim(scenario(duration=260.0)).write(out_dir)
        bundles.append(_bundle_digests(out_dir))
    assert bundles[0]
    assert bundles[0] == bundles[1] == bundles[2]
