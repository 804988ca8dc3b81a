# -*- coding: utf-8 -*-
import shutil

import pandas as pd
import pytest

from database import RelayDatabase
from relay.audit import audit_bundle
from relay.report_export import load_bundle
from relay.scenario import load_scenario_file
from relay.simharness import run_sim
from utils.error_handler import EXIT_INVARIANT_ERROR, EXIT_OK, AuditError


@pytest.fixture
def bundle_copy(tmp_path, sim_bundle):
    path = tmp_path / "report"
    shutil.copytree(sim_bundle, path)
    return path


def test_clean_run_passes(sim_bundle):
    result = audit_bundle(sim_bundle)
    assert result.clean
    assert result.exit_code == EXIT_OK
    assert result.ledger_rows > 0
    assert result.frames_scanned > 0
    assert result.notes == []


def test_duplicate_ledger_use_detected(bundle_copy):
    path = bundle_copy / "ledger" / "TN1.csv"
    ledger = pd.read_csv(path)
    decrypt = ledger[ledger["action"] == "decrypt"].iloc[[0]]
    pd.concat([ledger, decrypt], ignore_index=True).to_csv(path, index=False)

    result = audit_bundle(str(bundle_copy))
    assert result.exit_code == EXIT_INVARIANT_ERROR
    checks = {violation.check for violation in result.violations}
    assert checks == {"single_use", "link_single_use"}


def test_cleartext_key_on_wire_detected(bundle_copy):
    secret = load_bundle(str(bundle_copy)).tables["NM"]["nk"].records[0]
    path = bundle_copy / "wire" / "TN1.csv"
    wire = pd.read_csv(path, dtype={"frame": str})
    leak = wire.iloc[[0]].copy()
    leak["frame"] = "00ff" + secret.bits.hex() + "00"
    pd.concat([wire, leak], ignore_index=True).to_csv(path, index=False)

    result = audit_bundle(str(bundle_copy))
    assert [violation.check for violation in result.violations] == ["no_cleartext"]
    assert str(secret.key_id) in result.violations[0].detail


def test_non_hex_frame_is_malformed(bundle_copy):
    path = bundle_copy / "wire" / "NM.csv"
    wire = pd.read_csv(path, dtype={"frame": str})
    wire.loc[0, "frame"] = "zz-not-hex"
    wire.to_csv(path, index=False)
    with pytest.raises(AuditError):
        audit_bundle(str(bundle_copy))


def test_missing_bundle_raises(tmp_path):
    with pytest.raises(AuditError):
        audit_bundle(str(tmp_path / "absent"))


def test_tampered_hop_shortfall_is_noted(tmp_path):
    report = run_sim(load_scenario_file("tamper_hop"))
    report.write(str(tmp_path / "tamper"))
    result = audit_bundle(str(tmp_path / "tamper"))
    assert result.clean
    assert any("EN" in note for note in result.notes)


def _append_reuse(bundle_copy, **overrides):
    path = bundle_copy / "ledger" / "EN.csv"
    ledger = pd.read_csv(path)
    reuse = ledger[ledger["action"] == "decrypt"].iloc[[0]].copy()
    blank = reuse.copy()
    for column, value in overrides.items():
        blank[column] = value
    pd.concat([ledger, reuse, blank], ignore_index=True).to_csv(path, index=False)


@pytest.mark.parametrize("column", ["node_id", "scope", "action", "key_id", "batch_id", "index"])
def test_blank_ledger_cell_is_malformed(bundle_copy, column):
    _append_reuse(bundle_copy, **{column: None})
    with pytest.raises(AuditError):
        audit_bundle(str(bundle_copy))


def test_ledger_insert_failure_is_not_a_pass(bundle_copy, monkeypatch):
    _append_reuse(bundle_copy)
    monkeypatch.setattr(RelayDatabase, "insert_ledger_rows", lambda self, rows: False)
    with pytest.raises(AuditError):
        audit_bundle(str(bundle_copy))
