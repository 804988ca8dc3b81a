# -*- coding: utf-8 -*-
"""测试公共夹具"""

import os
import sys

import numpy as np
import pytest

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT_DIR)

from relay.keycore import KEY_BITS, KeyLedger, KeyTable, TableScope, ingest_bits  # noqa: E402
from relay.scenario import load_scenario_file  # noqa: E402
from relay.simharness import run_sim  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_table(rng):
    """生成含 n 条 Fresh 密钥的链路表"""

    def _make(n: int = 4, link: int = 1, ledger: KeyLedger = None) -> KeyTable:
        table = KeyTable(TableScope.quantum_link(link), ledger=ledger)
        ingest_bits(table, rng.integers(0, 2, n * KEY_BITS))
        return table

    return _make


@pytest.fixture
def scenario():
    """按名称加载内置场景，可覆盖时长"""

    def _load(name: str = "epb_table1", duration: float = None, seed: int = None):
        loaded = load_scenario_file(name)
        if duration is not None:
            loaded.duration_s = duration
        if seed is not None:
            loaded.seed = seed
        return loaded

    return _load


@pytest.fixture(scope="session")
def sim_bundle(tmp_path_factory):
    """130 s 基线仿真的结果包目录（一个批次）"""
    loaded = load_scenario_file("epb_table1")
    loaded.duration_s = 130.0
    out_dir = tmp_path_factory.mktemp("bundle") / "report"
    run_sim(loaded).write(str(out_dir))
    return str(out_dir)
