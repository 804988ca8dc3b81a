# -*- coding: utf-8 -*-
"""
结果包审计模块
离线检查一次运行的台账与报文日志:
  - 任一节点的任一密钥最多被加密/解密使用一次
  - 同一链路密钥在全网最多一次加密、一次解密
  - 经典信道上从未出现网络密钥明文
  - 下游节点保存的网络密钥都来自 NM，且与 NM 逐位相同
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Set

from database import MEMORY_DB, RelayDatabase
from relay.keycore import KEY_BYTES, TableScope
from relay.report_export import LoadedBundle, load_bundle, node_with_role
from utils.error_handler import EXIT_INVARIANT_ERROR, EXIT_OK, AuditError

logger = logging.getLogger(__name__)

NK_LABEL = TableScope.network_keys().label


@dataclass
class AuditViolation:
    check: str
    detail: str


@dataclass
class AuditResult:
    path: str
    violations: List[AuditViolation] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    frames_scanned: int = 0
    ledger_rows: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.clean else EXIT_INVARIANT_ERROR

    def add(self, check: str, detail: str) -> None:
        self.violations.append(AuditViolation(check, detail))


class BundleAuditor:
    """把结果包载入内存 SQLite 后逐项检查"""

    def __init__(self, bundle: LoadedBundle):
        self.bundle = bundle
        self.result = AuditResult(bundle.path)
        self.db = RelayDatabase(MEMORY_DB)
        self.logger = logging.getLogger(__name__)

    def _load(self) -> None:
        ledger = self.bundle.ledger
        if len(ledger) and not self.db.insert_ledger_rows(ledger.to_dict("records")):
            self.db.close()
            raise AuditError(f"台账无法载入审计库: {self.bundle.path}")
        self.result.ledger_rows = len(ledger)

    def _nm_id(self) -> str:
        nm_id = node_with_role(self.bundle.summary, "NM")
        if nm_id is not None:
            return nm_id
        raise AuditError("summary.json 中没有 NM 节点")

    # ---- 检查项 ---- #
    def check_single_use(self) -> None:
        for row in self.db.find_node_reuse():
            self.result.add("single_use", f"{row['node_id']} 的 {row['scope']} 密钥 {row['key_id']} "
                                          f"被使用 {row['uses']} 次")
        for row in self.db.find_link_reuse():
            self.result.add("link_single_use", f"{row['scope']} 密钥 {row['key_id']} 在全网 "
                                               f"{row['action']} {row['uses']} 次")

    def _frames(self) -> List[bytes]:
        frames = []
        for text in self.bundle.wire["frame"].dropna().astype(str):
            try:
                frames.append(bytes.fromhex(text))
            except ValueError as e:
                raise AuditError(f"报文日志含非十六进制帧: {text[:32]}...") from e
        return frames

    def check_no_cleartext(self) -> None:
        nm_tables = self.bundle.tables.get(self._nm_id(), {})
        nk_table = nm_tables.get(NK_LABEL)
        if nk_table is None or not nk_table.records:
            self.result.notes.append("NM 没有网络密钥，跳过明文扫描")
            return
        secrets: Dict[bytes, int] = {record.bits: record.key_id for record in nk_table.records}
        frames = self._frames()
        self.result.frames_scanned = len(frames)
        leaked: Set[int] = set()
        for frame in frames:
            for offset in range(len(frame) - KEY_BYTES + 1):
                key_id = secrets.get(frame[offset:offset + KEY_BYTES])
                if key_id is not None:
                    leaked.add(key_id)
        for key_id in sorted(leaked):
            self.result.add("no_cleartext", f"网络密钥 {key_id} 以明文出现在经典信道报文中")

    def check_nk_consistency(self) -> None:
        nm_id = self._nm_id()
        nm_table = self.bundle.tables.get(nm_id, {}).get(NK_LABEL)
        nm_keys = {record.key_id: record.bits for record in nm_table.records} if nm_table else {}
        shortfall = int(self.bundle.summary.get("batches", {}).get("shortfall", 0))
        edge_id = node_with_role(self.bundle.summary, "EN")

        for node_id, tables in sorted(self.bundle.tables.items()):
            if node_id == nm_id or NK_LABEL not in tables:
                continue
            for record in tables[NK_LABEL].records:
                expected = nm_keys.get(record.key_id)
                if expected is None:
                    self.result.add("nk_subset", f"{node_id} 的网络密钥 {record.key_id} 不是 NM 分发的")
                elif expected != record.bits:
                    self.result.add("nk_equality", f"{node_id} 的网络密钥 {record.key_id} 与 NM 不一致")
            if node_id == edge_id:
                missing = len(set(nm_keys) - {record.key_id for record in tables[NK_LABEL].records})
                if missing > shortfall:
                    self.result.add("nk_delivery", f"EN 缺少 {missing} 个网络密钥，超过批次短缺 {shortfall}")
                elif missing:
                    self.result.notes.append(f"EN 缺少 {missing} 个网络密钥（批次短缺 {shortfall}）")

    def run(self) -> AuditResult:
        self._load()
        self.check_single_use()
        self.check_no_cleartext()
        self.check_nk_consistency()
        self.db.close()
        if self.result.clean:
            self.logger.info(f"审计通过: {self.result.ledger_rows} 条台账, {self.result.frames_scanned} 帧")
        else:
            for violation in self.result.violations:
                self.logger.error(f"审计发现问题 [{violation.check}]: {violation.detail}")
        return self.result


def audit_bundle(path: str) -> AuditResult:
    """
    审计一个结果包目录

    Raises:
        AuditError: 结果包缺失或格式错误
    """
    return BundleAuditor(load_bundle(path)).run()
