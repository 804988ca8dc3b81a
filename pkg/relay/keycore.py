# -*- coding: utf-8 -*-
"""
密钥核心模块
负责密钥材料的全生命周期：比特分块、SHA-256 完整性摘要、一次性使用记账、
XOR 一次一密加解密，以及网络密钥（QRNG 仿真）来源。

密钥表持久化格式（小端）:
    8 字节魔数 "QKTABLE1" | 1 字节范围标签 | 8 字节记录数
    每条记录: 8 字节 id | 32 字节密钥 | 32 字节摘要 | 1 字节状态
    残余比特: 2 字节比特长度 | ceil(len/8) 字节
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
from construct import Array, Bytes, Const, Int8ul, Int16ul, Int64ul, Struct, this

from utils.error_handler import (
    DuplicateKeyId,
    KeyAlreadyUsed,
    KeyExhausted,
    MalformedBlock,
    TableFormatError,
    UnknownKeyId,
)

logger = logging.getLogger(__name__)

KEY_BITS = 256
KEY_BYTES = KEY_BITS // 8
TABLE_MAGIC = b"QKTABLE1"
NETWORK_SCOPE_TAG = 0


class KeyStatus(IntEnum):
    """密钥状态，只允许 Fresh→Used、Fresh→Compromised"""

    FRESH = 0
    USED = 1
    COMPROMISED = 2


class ScopeKind(Enum):
    QUANTUM_LINK = "link"
    NETWORK_KEYS = "nk"


@dataclass(frozen=True)
class TableScope:
    """密钥表范围：某条量子链路，或网络密钥池"""

    kind: ScopeKind
    link_index: Optional[int] = None

    @classmethod
    def quantum_link(cls, link_index: int) -> "TableScope":
        if not 1 <= link_index <= 255:
            raise ValueError(f"链路编号超出范围: {link_index}")
        return cls(ScopeKind.QUANTUM_LINK, link_index)

    @classmethod
    def network_keys(cls) -> "TableScope":
        return cls(ScopeKind.NETWORK_KEYS)

    @property
    def tag(self) -> int:
        return self.link_index if self.kind is ScopeKind.QUANTUM_LINK else NETWORK_SCOPE_TAG

    @property
    def label(self) -> str:
        return f"link{self.link_index}" if self.kind is ScopeKind.QUANTUM_LINK else "nk"

    @classmethod
    def from_tag(cls, tag: int) -> "TableScope":
        return cls.network_keys() if tag == NETWORK_SCOPE_TAG else cls.quantum_link(tag)


@dataclass
class KeyRecord:
    """一条 256 比特密钥；创建后只有 status 可变"""

    key_id: int
    bits: bytes
    digest: bytes
    status: KeyStatus = KeyStatus.FRESH

    @property
    def is_fresh(self) -> bool:
        return self.status is KeyStatus.FRESH

    def verify(self) -> bool:
        return hashlib.sha256(self.bits).digest() == self.digest


@dataclass
class LedgerEntry:
    node_id: str
    scope: str
    key_id: int
    action: str
    batch_id: int = -1
    index: int = -1
    t: float = 0.0


class KeyLedger:
    """
    密钥使用台账（只追加）

    action 取值: encrypt, decrypt, compromised, burned, distribute, store, draw
    """

    CONSUMING_ACTIONS = ("encrypt", "decrypt")

    def __init__(self, node_id: str, clock=None):
        self.node_id = node_id
        self.clock = clock or (lambda: 0.0)
        self.entries: List[LedgerEntry] = []
        self.listeners = []

    def record(self, scope: TableScope, key_id: int, action: str,
               batch_id: int = -1, index: int = -1) -> LedgerEntry:
        entry = LedgerEntry(self.node_id, scope.label, int(key_id), action,
                            int(batch_id), int(index), float(self.clock()))
        self.entries.append(entry)
        for listener in self.listeners:
            listener(entry)
        return entry

    def rows(self) -> List[Dict]:
        return [entry.__dict__.copy() for entry in self.entries]


@dataclass
class KeyTable:
    """
    链路（或网络密钥）密钥表

    records 按 id 递增保存；_fresh 是按插入顺序排列的 Fresh id 索引，
    第一个元素即最小的可用 id。
    """

    scope: TableScope
    records: List[KeyRecord] = field(default_factory=list)
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    ledger: Optional[KeyLedger] = None
    next_id: int = 0
    ingested_bits_total: int = 0
    burned_total: int = 0

    def __post_init__(self):
        self._index: Dict[int, KeyRecord] = {}
        self._fresh: Dict[int, None] = {}
        for record in self.records:
            self._index_record(record)

    def _index_record(self, record: KeyRecord) -> None:
        if record.key_id in self._index:
            raise DuplicateKeyId(f"{self.scope.label} 中 id {record.key_id} 重复")
        self._index[record.key_id] = record
        if record.is_fresh:
            self._fresh[record.key_id] = None
        self.next_id = max(self.next_id, record.key_id + 1)

    def _append(self, record: KeyRecord) -> None:
        if self.records and record.key_id <= self.records[-1].key_id:
            raise DuplicateKeyId(
                f"{self.scope.label} 中 id {record.key_id} 不大于最后 id {self.records[-1].key_id}")
        self._index_record(record)
        self.records.append(record)
        self.ingested_bits_total += KEY_BITS

    def get(self, key_id: int) -> KeyRecord:
        record = self._index.get(key_id)
        if record is None:
            raise UnknownKeyId(f"{self.scope.label} 中不存在 id {key_id}", key_id=key_id)
        return record

    def _set_status(self, record: KeyRecord, status: KeyStatus) -> None:
        if not record.is_fresh:
            raise KeyAlreadyUsed(
                f"{self.scope.label} id {record.key_id} 状态为 {record.status.name}", key_id=record.key_id)
        record.status = status
        self._fresh.pop(record.key_id, None)

    def _log(self, key_id: int, action: str, batch_id: int = -1, index: int = -1) -> None:
        if self.ledger is not None:
            self.ledger.record(self.scope, key_id, action, batch_id, index)

    @property
    def last_id(self) -> int:
        return self.records[-1].key_id if self.records else -1

    def count(self, status: KeyStatus) -> int:
        if status is KeyStatus.FRESH:
            return len(self._fresh)
        return sum(1 for record in self.records if record.status is status)

    def lowest_fresh_id(self) -> Optional[int]:
        return next(iter(self._fresh), None)


def make_record(key_id: int, bits: bytes, status: KeyStatus = KeyStatus.FRESH) -> KeyRecord:
    if len(bits) != KEY_BYTES:
        raise MalformedBlock(f"密钥长度应为 {KEY_BYTES} 字节，实际 {len(bits)}")
    return KeyRecord(key_id, bytes(bits), hashlib.sha256(bits).digest(), status)


def bits_from_bytes(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def ingest_bits(table: KeyTable, bits, status: KeyStatus = KeyStatus.FRESH) -> List[KeyRecord]:
    """
    将比特串分块写入密钥表

    residual‖bits 切成 ⌊len/256⌋ 条新记录，余下不足 256 比特留作新的 residual。

    Args:
        table: 目标密钥表
        bits: 0/1 序列（numpy 数组或可迭代对象），长度任意
        status: 新记录状态（QIX 帧标记为 compromised 时为 COMPROMISED）

    Returns:
        List[KeyRecord]: 按顺序新建的记录
    """
    incoming = np.asarray(bits, dtype=np.uint8).ravel()
    if incoming.size == 0:
        return []
    if incoming.max(initial=0) > 1:
        raise MalformedBlock("比特串只能包含 0 和 1")

    stream = np.concatenate([table.residual, incoming])
    chunk_count = stream.size // KEY_BITS
    new_records = []
    for chunk in stream[:chunk_count * KEY_BITS].reshape(chunk_count, KEY_BITS):
        record = make_record(table.next_id, np.packbits(chunk).tobytes(), status)
        table._append(record)
        if status is KeyStatus.COMPROMISED:
            table._log(record.key_id, "compromised")
        new_records.append(record)

    table.residual = stream[chunk_count * KEY_BITS:].copy()
    table.ingested_bits_total += table.residual.size - (stream.size - incoming.size)
    return new_records


def insert_record(table: KeyTable, key_id: int, bits: bytes,
                  status: KeyStatus = KeyStatus.FRESH) -> KeyRecord:
    """以指定 id 存入一条密钥（中继收到的网络密钥沿用 NM 的 id）"""
    record = make_record(key_id, bits, status)
    table._append(record)
    return record


def xor_bytes(a: bytes, b: bytes) -> bytes:
    """逐字节异或两个 32 字节块"""
    if len(a) != KEY_BYTES or len(b) != KEY_BYTES:
        raise MalformedBlock(f"异或输入必须为 {KEY_BYTES} 字节: {len(a)} / {len(b)}")
    return np.bitwise_xor(np.frombuffer(a, dtype=np.uint8),
                          np.frombuffer(b, dtype=np.uint8)).tobytes()


def otp_encrypt(table: KeyTable, message: bytes,
                batch_id: int = -1, index: int = -1) -> Tuple[bytes, int]:
    """
    一次一密加密：消耗最小 id 的 Fresh 密钥

    选中与标记 Used 在同一步完成，之后即使传输失败也不回滚。

    Raises:
        KeyExhausted: 没有 Fresh 密钥（调用方不得退回到复用密钥）
    """
    if len(message) != KEY_BYTES:
        raise MalformedBlock(f"消息长度应为 {KEY_BYTES} 字节，实际 {len(message)}")
    key_id = table.lowest_fresh_id()
    if key_id is None:
        raise KeyExhausted(f"{table.scope.label} 没有可用密钥")
    record = table.get(key_id)
    table._set_status(record, KeyStatus.USED)
    table._log(key_id, "encrypt", batch_id, index)
    return xor_bytes(message, record.bits), key_id


def otp_decrypt(table: KeyTable, ciphertext: bytes, key_id: int,
                batch_id: int = -1, index: int = -1) -> bytes:
    """
    一次一密解密并把对应密钥标记为 Used

    Raises:
        UnknownKeyId: 两端 id 不同步
        KeyAlreadyUsed: 重放或协议错误，必须中止而不能解密
    """
    if len(ciphertext) != KEY_BYTES:
        raise MalformedBlock(f"密文长度应为 {KEY_BYTES} 字节，实际 {len(ciphertext)}")
    record = table.get(key_id)
    table._set_status(record, KeyStatus.USED)
    table._log(key_id, "decrypt", batch_id, index)
    return xor_bytes(ciphertext, record.bits)


def available(table: KeyTable) -> int:
    return table.count(KeyStatus.FRESH)


def mark_compromised(table: KeyTable, key_id: int) -> None:
    record = table.get(key_id)
    table._set_status(record, KeyStatus.COMPROMISED)
    table._log(key_id, "compromised")


def take_fresh(table: KeyTable, batch_id: int = -1, index: int = -1) -> KeyRecord:
    """取出最小 id 的 Fresh 记录并标记 Used（NM 分发网络密钥）"""
    key_id = table.lowest_fresh_id()
    if key_id is None:
        raise KeyExhausted(f"{table.scope.label} 没有可用密钥")
    record = table.get(key_id)
    table._set_status(record, KeyStatus.USED)
    table._log(key_id, "distribute", batch_id, index)
    return record


def burn_below(table: KeyTable, key_id: int, batch_id: int = -1, index: int = -1) -> List[int]:
    """
    把 id 小于 key_id 的 Fresh 记录标记为 Used（烧毁）

    发送端总是消耗最小的 Fresh 密钥，接收端出现更小的 Fresh id
    说明对应的跳消息没有到达。
    """
    burned = []
    for fresh_id in list(table._fresh):
        if fresh_id >= key_id:
            break
        table._set_status(table.get(fresh_id), KeyStatus.USED)
        table._log(fresh_id, "burned", batch_id, index)
        burned.append(fresh_id)
    table.burned_total += len(burned)
    if burned:
        logger.warning(f"{table.scope.label} 烧毁 {len(burned)} 条未送达的密钥: {burned[:5]}")
    return burned


def table_digest(table: KeyTable, with_status: bool = False) -> bytes:
    """密钥表规范摘要，用于两端一致性比较"""
    hasher = hashlib.sha256()
    hasher.update(bytes([table.scope.tag]))
    for record in table.records:
        hasher.update(record.key_id.to_bytes(8, "big"))
        hasher.update(record.bits)
        if with_status:
            hasher.update(bytes([int(record.status)]))
    hasher.update(len(table.residual).to_bytes(2, "big"))
    hasher.update(np.packbits(table.residual).tobytes())
    return hasher.digest()


@dataclass
class NetworkKeySource:
    """
    网络密钥来源（QRNG 的确定性仿真）

    第 c 个密钥 = SHA-256(seed ‖ c 的 8 字节大端表示)。
    """

    seed: bytes
    counter: int = 0

    def __post_init__(self):
        if len(self.seed) != KEY_BYTES:
            raise MalformedBlock(f"网络密钥种子必须为 {KEY_BYTES} 字节")

    @classmethod
    def from_seed_text(cls, text: str) -> "NetworkKeySource":
        return cls(hashlib.sha256(f"network-keys:{text}".encode("utf-8")).digest())

    def expand(self, counter: int) -> bytes:
        return hashlib.sha256(self.seed + counter.to_bytes(8, "big")).digest()


def draw_network_keys(src: NetworkKeySource, h: int,
                      table: Optional[KeyTable] = None) -> List[KeyRecord]:
    """
    从网络密钥来源抽取 h 个密钥，id 即计数器值

    给定 table 时新记录以 Fresh 状态写入 NM 的网络密钥表。
    """
    if h < 0:
        raise ValueError(f"抽取数量不能为负: {h}")
    records = [make_record(src.counter + offset, src.expand(src.counter + offset))
               for offset in range(h)]
    src.counter += h
    if table is not None:
        for record in records:
            table._append(record)
            table._log(record.key_id, "draw")
    return records


# ------------------------------------------------------------------ #
# 持久化
# ------------------------------------------------------------------ #
TableRecordFormat = Struct(
    "key_id" / Int64ul,
    "bits" / Bytes(KEY_BYTES),
    "digest" / Bytes(32),
    "status" / Int8ul,
)

TableFileFormat = Struct(
    "magic" / Const(TABLE_MAGIC),
    "scope_tag" / Int8ul,
    "count" / Int64ul,
    "records" / Array(this.count, TableRecordFormat),
    "residual_bits" / Int16ul,
    "residual" / Bytes((this.residual_bits + 7) // 8),
)


def encode_table(table: KeyTable) -> bytes:
    residual = np.packbits(table.residual).tobytes() if table.residual.size else b""
    return TableFileFormat.build(dict(
        scope_tag=table.scope.tag,
        count=len(table.records),
        records=[dict(key_id=r.key_id, bits=r.bits, digest=r.digest, status=int(r.status))
                 for r in table.records],
        residual_bits=int(table.residual.size),
        residual=residual,
    ))


def decode_table(data: bytes, ledger: Optional[KeyLedger] = None) -> KeyTable:
    try:
        parsed = TableFileFormat.parse(data)
    except Exception as e:
        raise TableFormatError(f"密钥表文件无法解析: {e}") from e

    records = []
    for item in parsed.records:
        try:
            status = KeyStatus(item.status)
        except ValueError as e:
            raise TableFormatError(f"密钥 {item.key_id} 状态值非法: {item.status}") from e
        record = KeyRecord(item.key_id, bytes(item.bits), bytes(item.digest), status)
        if not record.verify():
            raise TableFormatError(f"密钥 {record.key_id} 摘要校验失败")
        # id 必须严格递增，取新钥依赖此顺序
        if records and record.key_id <= records[-1].key_id:
            raise TableFormatError(f"密钥 id {record.key_id} 不大于前一条 {records[-1].key_id}")
        records.append(record)

    residual = np.unpackbits(np.frombuffer(parsed.residual, dtype=np.uint8))[:parsed.residual_bits]
    table = KeyTable(TableScope.from_tag(parsed.scope_tag), records, residual.astype(np.uint8), ledger)
    table.ingested_bits_total = KEY_BITS * len(records) + int(residual.size)
    return table


def save_table(table: KeyTable, path: str) -> None:
    """原子写入密钥表文件"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(encode_table(table))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp_path, path)


def load_table(path: str, ledger: Optional[KeyLedger] = None) -> KeyTable:
    with open(path, "rb") as fh:
        return decode_table(fh.read(), ledger)
