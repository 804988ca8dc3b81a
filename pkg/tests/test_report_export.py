# -*- coding: utf-8 -*-
import json
import os
import shutil

import pandas as pd
import pytest

from database import BATCH_COLUMNS, LEDGER_COLUMNS
from relay.keycore import table_digest
from relay.report_export import (
    export_report,
    format_summary_table,
    link_statistics,
    load_bundle,
    node_with_role,
)
from utils.error_handler import AuditError


def test_bundle_layout(sim_bundle):
    for name in ("summary.json", "telemetry.lp", "batches.csv"):
        assert os.path.isfile(os.path.join(sim_bundle, name))
    assert sorted(os.listdir(os.path.join(sim_bundle, "ledger"))) == ["EN.csv", "NM.csv", "TN1.csv", "TN2.csv"]
    tables = set(os.listdir(os.path.join(sim_bundle, "tables")))
    assert {"NM_link1.qkt", "NM_nk.qkt", "TN1_link2.qkt", "EN_link3.qkt", "EN_nk.qkt"} <= tables
    assert os.listdir(os.path.join(sim_bundle, "csv"))


def test_load_bundle_reads_everything_back(sim_bundle):
    bundle = load_bundle(sim_bundle)
    assert sorted(bundle.node_ids) == ["EN", "NM", "TN1", "TN2"]
    assert list(bundle.ledger.columns) == LEDGER_COLUMNS
    assert list(bundle.batches.columns) == BATCH_COLUMNS
    assert len(bundle.batches) == 1
    assert bundle.batches.loc[0, "status"] == "complete"
    assert bundle.summary["nk_delivered"] == 40

    nm_nk = bundle.tables["NM"]["nk"]
    en_nk = bundle.tables["EN"]["nk"]
    assert len(en_nk.records) == 40
    assert [r.bits for r in en_nk.records] == [r.bits for r in nm_nk.records]
    assert table_digest(bundle.tables["TN1"]["nk"]) == table_digest(en_nk)
    assert len(bundle.telemetry()) == len(bundle.points)


def test_node_with_role(sim_bundle):
    with open(os.path.join(sim_bundle, "summary.json"), "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    assert node_with_role(summary, "NM") == "NM"
    assert node_with_role(summary, "EN") == "EN"
    assert node_with_role(summary, "XX") is None
    assert node_with_role({}, "NM") is None


def test_missing_or_malformed_bundle(tmp_path, sim_bundle):
    with pytest.raises(AuditError):
        load_bundle(str(tmp_path / "nowhere"))

    broken = tmp_path / "broken"
    shutil.copytree(sim_bundle, broken)
    (broken / "summary.json").write_text("{truncated", encoding="utf-8")
    with pytest.raises(AuditError):
        load_bundle(str(broken))

    no_ledger = tmp_path / "no_ledger"
    shutil.copytree(sim_bundle, no_ledger)
    shutil.rmtree(no_ledger / "ledger")
    with pytest.raises(AuditError):
        load_bundle(str(no_ledger))


def test_ledger_missing_column_rejected(tmp_path, sim_bundle):
    copy = tmp_path / "copy"
    shutil.copytree(sim_bundle, copy)
    path = copy / "ledger" / "TN1.csv"
    pd.read_csv(path).drop(columns=["action"]).to_csv(path, index=False)
    with pytest.raises(AuditError):
        load_bundle(str(copy))


def test_export_report_writes_figures_and_excel(tmp_path, sim_bundle):
    out_dir = tmp_path / "export"
    paths = export_report(sim_bundle, str(out_dir))
    figures = sorted(os.listdir(out_dir / "figures"))
    assert figures == ["available_keys.png", "link1_sawtooth.png", "link1_skr_qber.png",
                       "link2_skr_qber.png", "link3_skr_qber.png", "nk_growth.png"]
    assert (out_dir / "summary.xlsx").is_file()
    assert (out_dir / "telemetry.lp").is_file()
    assert all(os.path.exists(path) for path in paths)

    sheets = pd.read_excel(out_dir / "summary.xlsx", sheet_name=None, engine="openpyxl")
    assert len(sheets) == 3


def test_export_without_figures(tmp_path, sim_bundle):
    out_dir = tmp_path / "plain"
    export_report(sim_bundle, str(out_dir), figures=False, excel=False)
    assert not (out_dir / "figures").exists()
    assert not (out_dir / "summary.xlsx").exists()
    assert (out_dir / "csv").is_dir()


def test_summary_table(sim_bundle):
    with open(os.path.join(sim_bundle, "summary.json"), "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    frame = link_statistics(summary)
    assert list(frame["link"]) == [1, 2, 3]
    text = format_summary_table(summary)
    assert len(text.splitlines()) == 4
    assert format_summary_table({"links": {}}) is None
