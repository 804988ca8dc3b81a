# -*- coding: utf-8 -*-
import copy
import json

import pytest

from relay.qkdlink import DeliveryMode, ProtocolTag
from relay.scenario import (
    bundled_scenarios,
    default_scenario,
    load_scenario,
    load_scenario_file,
    parse_scenario,
    resolve_scenario_path,
    scenario_to_dict,
)
from utils.error_handler import ScenarioError

BASE = {
    "duration_s": 60,
    "seed": 1,
    "nodes": [
        {"node_id": "NM", "role": "NM"},
        {"node_id": "TN1", "role": "TN"},
        {"node_id": "EN", "role": "EN"},
    ],
    "links": [
        {"link_index": 1, "profile": "default"},
        {"link_index": 2, "profile": "default"},
    ],
}


def _with(**changes):
    data = copy.deepcopy(BASE)
    data.update(changes)
    return data


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert {"epb_table1", "epb_day1_outages", "epb_day2_wind", "tamper_hop"} <= set(names)
    for name in names:
        scenario = load_scenario_file(name)
        assert len(scenario.links) == len(scenario.nodes) - 1


def test_table1_uses_measured_profiles():
    scenario = load_scenario_file("epb_table1")
    assert scenario.node_ids() == ["NM", "TN1", "TN2", "EN"]
    assert [p.protocol_tag for p in scenario.links] == [ProtocolTag.BBM92, ProtocolTag.BB84, ProtocolTag.SARG04]
    assert [p.delivery for p in scenario.links] == [
        DeliveryMode.PACKET_STREAM, DeliveryMode.APPEND_FILE, DeliveryMode.REWRITE_FILE]
    assert (scenario.policy.T, scenario.policy.R) == (60, 20)
    assert scenario.link_ends(2) == ("TN1", "TN2")
    assert scenario.link_reporters() == {2: "TN1", 3: "TN2"}


def test_link_override_on_top_of_profile():
    data = _with(links=[{"link_index": 1, "profile": "default", "skr_mean_bps": 256.0},
                        {"link_index": 2, "profile": "default"}])
    scenario = parse_scenario(data)
    assert scenario.link(1).skr_mean_bps == 256.0
    assert scenario.link(1).delivery is DeliveryMode.PACKET_STREAM


def test_outages_parsed_and_ordered():
    scenario = load_scenario_file("epb_day1_outages")
    pair, reporting = scenario.outages
    assert pair.nodes == ("NM", "TN1")
    assert (pair.start_s, pair.end_s) == (190.0, 230.0)
    assert reporting.node == "*"

    reversed_pair = parse_scenario(_with(outages=[{"kind": "pair", "nodes": ["TN1", "NM"],
                                                   "start_s": 1, "end_s": 2}]))
    assert reversed_pair.outages[0].nodes == ("NM", "TN1")


def test_all_errors_reported_together():
    data = _with(seed=-1, policy={"T": 10, "R": 20},
                 disturbances=[{"link": 5, "start_s": 10, "end_s": 5}],
                 bogus=True)
    with pytest.raises(ScenarioError) as excinfo:
        parse_scenario(data, "bad.json")
    errors = excinfo.value.errors
    assert len(errors) >= 4
    assert any("seed" in item for item in errors)
    assert any("bogus" in item for item in errors)
    assert any("policy" in item for item in errors)
    assert any("disturbances[0]" in item for item in errors)
    assert excinfo.value.source == "bad.json"


@pytest.mark.parametrize("outage", [
    {"kind": "pair", "nodes": ["NM", "EN"], "start_s": 1, "end_s": 2},
    {"kind": "reporting", "node": "NM", "start_s": 1, "end_s": 2},
    {"kind": "pair", "nodes": ["NM", "TN1"], "start_s": 5, "end_s": 2},
    {"kind": "pair", "nodes": ["NM", "TN1"], "start_s": 5, "end_s": 90},
    {"kind": "storm", "start_s": 1, "end_s": 2},
])
def test_invalid_outages(outage):
    with pytest.raises(ScenarioError):
        parse_scenario(_with(outages=[outage]))


def test_topology_mismatch():
    with pytest.raises(ScenarioError) as excinfo:
        parse_scenario(_with(links=[{"link_index": 1, "profile": "default"}]))
    assert any("拓扑" in item for item in excinfo.value.errors)


def test_roles_must_follow_positions():
    nodes = [{"node_id": "A", "role": "TN"}, {"node_id": "B", "role": "TN"}, {"node_id": "C", "role": "EN"}]
    with pytest.raises(ScenarioError):
        parse_scenario(_with(nodes=nodes))


def test_faults_validated():
    fault = {"kind": "tamper_ciphertext", "link": 2, "batch": 1, "index": 3}
    assert parse_scenario(_with(faults=[fault])).faults == [fault]
    with pytest.raises(ScenarioError):
        parse_scenario(_with(faults=[dict(fault, link=9)]))
    with pytest.raises(ScenarioError):
        parse_scenario(_with(faults=[dict(fault, kind="explode")]))


def test_empty_and_invalid_json():
    with pytest.raises(ScenarioError) as excinfo:
        load_scenario("   ")
    assert "duration_s" in excinfo.value.errors[0]
    with pytest.raises(ScenarioError):
        load_scenario("{not json")
    with pytest.raises(ScenarioError):
        load_scenario("[]")


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        resolve_scenario_path("no_such_scenario")


def test_default_scenario_reloads_identically():
    scenario = default_scenario(seed=3, duration_s=120.0)
    data = scenario_to_dict(scenario)
    reloaded = load_scenario(json.dumps(data), "init.json")
    assert scenario_to_dict(reloaded) == data
    assert reloaded.psk("pair:NM-TN1") == scenario.psk("pair:NM-TN1")
    assert reloaded.psk("pair:NM-TN1") != reloaded.psk("report:TN1")
