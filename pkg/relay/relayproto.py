# -*- coding: utf-8 -*-
"""
中继协议模块
节点角色（NM / TN / EN）、T/R 触发规则，以及网络密钥逐跳中继的状态机。

节点是无 I/O 的反应器：poll / report / receive / tick 只修改本节点状态并返回
待发送的 Outbound 列表，由仿真器或真实模式的网络层负责投递。
信道名约定: 'left'、'right'、'nm'（普通节点到 NM 的上报信道）、
'report:<node_id>'（NM 端的上报信道）。
"""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Set

from relay.keycore import (
    KeyLedger,
    KeyStatus,
    KeyTable,
    NetworkKeySource,
    TableScope,
    available,
    burn_below,
    draw_network_keys,
    insert_record,
    otp_decrypt,
    otp_encrypt,
    take_fresh,
)
from relay.qkdlink import LinkEndpoint
from relay.telemetry import SeriesPoint, TelemetryStore
from relay.wire import HEADER_SIZE, MsgType, PeerChannel, WireMessage
from utils.error_handler import (
    DigestMismatch,
    DuplicateKeyId,
    KeyAlreadyUsed,
    KeyExhausted,
    UnknownKeyId,
    WireError,
)

DEFAULT_THRESHOLD = 60
DEFAULT_RESERVE = 20
DEFAULT_BATCH_TIMEOUT_S = 30.0
DEFAULT_NM_TIMEOUT_FACTOR = 4
FAULT_KINDS = ("tamper_ciphertext", "corrupt_frame")


class RoleKind(Enum):
    NETWORK_MANAGER = "NM"
    TRUSTED_NODE = "TN"
    EDGE_NODE = "EN"


@dataclass(frozen=True)
class NodeRole:
    kind: RoleKind
    left_link: Optional[int] = None
    right_link: Optional[int] = None

    def validate(self) -> List[str]:
        errors = []
        if self.kind is RoleKind.NETWORK_MANAGER and (self.left_link is not None or self.right_link is None):
            errors.append("NM 必须只有右侧链路")
        if self.kind is RoleKind.EDGE_NODE and (self.right_link is not None or self.left_link is None):
            errors.append("EN 必须只有左侧链路")
        if self.kind is RoleKind.TRUSTED_NODE and (self.left_link is None or self.right_link is None):
            errors.append("TN 必须同时有左右两侧链路")
        return errors


@dataclass(frozen=True)
class TransferPolicy:
    T: int = DEFAULT_THRESHOLD
    R: int = DEFAULT_RESERVE

    def __post_init__(self):
        if not self.T > self.R >= 0:
            raise ValueError(f"传输策略要求 T > R ≥ 0，实际 T={self.T}, R={self.R}")


def nm_trigger(counts: Dict[int, int], policy: TransferPolicy) -> Optional[int]:
    """所有链路可用量的最小值达到 T 时返回 h = min − R，否则返回 None"""
    if not counts:
        raise ValueError("链路计数不能为空")
    lowest = min(counts.values())
    return lowest - policy.R if lowest >= policy.T else None


@dataclass
class Outbound:
    channel: str
    frame: bytes
    message: WireMessage


@dataclass
class Fault:
    """故障注入点：在 link 的发送端对 (batch, index) 的 KeyHop 生效一次"""

    kind: str
    link: int
    batch: int
    index: int
    applied: bool = False


@dataclass
class BatchRecord:
    """NM 侧的批次记录"""

    batch_id: int
    h: int
    counts: Dict[int, int]
    started_t: float
    completed_t: Optional[float] = None
    received: Optional[int] = None
    failed_indices: Set[int] = field(default_factory=set)
    status: str = "in_flight"

    @property
    def shortfall(self) -> int:
        return self.h - (self.received or 0)

    def to_row(self) -> Dict:
        return {
            "batch_id": self.batch_id,
            "h": self.h,
            "min_count": min(self.counts.values()) if self.counts else -1,
            "started_t": self.started_t,
            "completed_t": self.completed_t if self.completed_t is not None else -1.0,
            "received": self.received if self.received is not None else -1,
            "shortfall": self.shortfall if self.received is not None else -1,
            "status": self.status,
        }


@dataclass
class BatchProgress:
    """TN / EN 侧的批次进度，resolved[index] 为 True 表示成功"""

    batch_id: int
    h: Optional[int]
    started_t: float
    resolved: Dict[int, bool] = field(default_factory=dict)
    done: bool = False

    @property
    def succeeded(self) -> int:
        return sum(1 for ok in self.resolved.values() if ok)

    @property
    def failed(self) -> int:
        return len(self.resolved) - self.succeeded

    @property
    def complete(self) -> bool:
        return self.h is not None and len(self.resolved) >= self.h


@dataclass
class HeldHop:
    message: WireMessage
    held_since: float


class RelayNode:
    """节点公共部分：信道、密钥表、上报、报文日志"""

    def __init__(self, node_id: str, role: NodeRole, policy: TransferPolicy,
                 channels: Dict[str, PeerChannel], endpoints: Dict[str, LinkEndpoint],
                 ledger: Optional[KeyLedger] = None, telemetry: Optional[TelemetryStore] = None,
                 epoch_ns: int = 0, batch_timeout_s: float = DEFAULT_BATCH_TIMEOUT_S):
        self.node_id = node_id
        self.role = role
        self.policy = policy
        self.channels = channels
        self.endpoints = endpoints
        self.now = 0.0
        self.ledger = ledger or KeyLedger(node_id, clock=lambda: self.now)
        for endpoint in endpoints.values():
            endpoint.table.ledger = self.ledger
        self.nk_table = KeyTable(TableScope.network_keys(), ledger=self.ledger)
        self.telemetry = telemetry
        self.epoch_ns = epoch_ns
        self.batch_timeout_s = batch_timeout_s
        self.channel_up = {name: True for name in channels}
        self.report_buffer: Deque[Dict] = deque()
        self.wire_log: List[Dict] = []
        self.wire_listeners = []
        self.faults: List[Fault] = []
        self.counters = {"transfers_completed": 0, "keys_failed": 0, "reports_buffered": 0,
                         "reports_flushed": 0, "ignored_messages": 0}
        self.logger = logging.getLogger(__name__)

    # ------------------------------------------------------------------ #
    # 发送 / 接收
    # ------------------------------------------------------------------ #
    def _log_frame(self, channel: str, direction: str, frame: bytes, msg_type: int, sequence: int,
                   status: str = "ok") -> None:
        row = {
            "node_id": self.node_id,
            "t": float(self.now),
            "channel": channel,
            "direction": direction,
            "msg_type": int(msg_type),
            "sequence": int(sequence),
            "status": status,
            "frame": frame.hex(),
        }
        self.wire_log.append(row)
        for listener in self.wire_listeners:
            listener(row)

    def _send(self, channel: str, msg_type: MsgType, payload: Dict) -> Outbound:
        peer = self.channels[channel]
        frame = peer.encode(msg_type, payload)
        message = WireMessage(msg_type, peer.send_sequence, payload)
        if msg_type is MsgType.KEY_HOP:
            fault = self._take_fault("corrupt_frame", payload)
            if fault is not None:
                corrupted = bytearray(frame)
                corrupted[HEADER_SIZE + 10] ^= 0x01
                frame = bytes(corrupted)
                self.logger.info(f"{self.node_id} 注入帧损坏: batch={fault.batch} index={fault.index}")
        self._log_frame(channel, "out", frame, msg_type, peer.send_sequence)
        return Outbound(channel, frame, message)

    def _take_fault(self, kind: str, payload: Dict) -> Optional[Fault]:
        link = self.role.right_link
        for fault in self.faults:
            if (not fault.applied and fault.kind == kind and fault.link == link
                    and fault.batch == payload["batch_id"] and fault.index == payload["index"]):
                fault.applied = True
                return fault
        return None

    def receive(self, channel: str, frame: bytes, now: float) -> List[Outbound]:
        """校验并处理一帧；认证失败等错误只计数，不会处理载荷"""
        self.now = now
        peer = self.channels.get(channel)
        if peer is None:
            self.logger.warning(f"{self.node_id} 收到未知信道 {channel} 的报文")
            return []
        try:
            msg = peer.decode(frame)
        except WireError as e:
            self._log_frame(channel, "in", frame, frame[5] if len(frame) > 5 else 0,
                            int.from_bytes(frame[6:14], "big") if len(frame) >= 14 else 0, e.code)
            return []
        self._log_frame(channel, "in", frame, msg.msg_type, msg.sequence)
        return self.dispatch(channel, msg)

    def dispatch(self, channel: str, msg: WireMessage) -> List[Outbound]:
        handler = {
            MsgType.HELLO: self.on_hello,
            MsgType.STATS_REPORT: self.on_stats_report,
            MsgType.TRANSFER_INIT: self.on_transfer_init,
            MsgType.KEY_HOP: self.on_key_hop,
            MsgType.TRANSFER_ACK: self.on_transfer_ack,
            MsgType.TRANSFER_COMPLETE: self.on_transfer_complete,
            MsgType.ERROR: self.on_error,
        }[msg.msg_type]
        return handler(channel, msg)

    def _ignore(self, channel: str, msg: WireMessage) -> List[Outbound]:
        self.counters["ignored_messages"] += 1
        self.logger.warning(f"{self.node_id} 忽略信道 {channel} 上的 {msg.msg_type.name}")
        return []

    def hello(self, channel: str, now: float) -> Outbound:
        """真实模式连接建立后的第一帧"""
        self.now = now
        return self._send(channel, MsgType.HELLO, {"node_id": self.node_id, "channel": self.channels[channel].name})

    def attach_tables(self, tables: Dict[str, KeyTable]) -> None:
        """用持久化的密钥表替换当前各表（按 scope 标签匹配）"""
        for endpoint in self.endpoints.values():
            table = tables.get(endpoint.table.scope.label)
            if table is not None:
                table.ledger = self.ledger
                endpoint.table = table
        nk = tables.get(self.nk_table.scope.label)
        if nk is not None:
            nk.ledger = self.ledger
            self.nk_table = nk

    def on_hello(self, channel: str, msg: WireMessage) -> List[Outbound]:
        self.logger.info(f"{self.node_id} 信道 {channel} 对端为 {msg['node_id']}")
        return []

    on_stats_report = _ignore
    on_transfer_init = _ignore
    on_key_hop = _ignore
    on_transfer_complete = _ignore
    on_error = _ignore

    def on_transfer_ack(self, channel: str, msg: WireMessage) -> List[Outbound]:
        self.logger.debug(f"{self.node_id} 批次 {msg['batch_id']} 下游确认: "
                          f"转发 {msg['forwarded']} 失败 {msg['failed']}")
        return []

    # ------------------------------------------------------------------ #
    # 周期任务
    # ------------------------------------------------------------------ #
    def poll_links(self) -> int:
        return sum(len(endpoint.poll()) for endpoint in self.endpoints.values())

    def poll(self, now: float) -> List[Outbound]:
        self.now = now
        self.poll_links()
        return []

    def tick(self, now: float) -> List[Outbound]:
        self.now = now
        return []

    def timestamp_ns(self, now: float) -> int:
        return self.epoch_ns + int(round(now * 1e9))

    def build_report(self, now: float) -> Dict:
        """report_stats: 本节点的密钥计数与相邻链路统计"""
        links = []
        for side in ("left", "right"):
            endpoint = self.endpoints.get(side)
            if endpoint is None:
                continue
            table = endpoint.table
            links.append({
                "link_index": endpoint.link_index,
                "available_qk": available(table),
                "used_qk": table.count(KeyStatus.USED),
                "compromised_qk": table.count(KeyStatus.COMPROMISED),
                "burned_qk": table.burned_total,
                "skr": float(endpoint.last_stats.get("skr_bps", 0.0)),
                "qber": float(endpoint.last_stats.get("qber_pct", 0.0)),
            })
        return {
            "node_id": self.node_id,
            "timestamp_ns": self.timestamp_ns(now),
            "available_nk": available(self.nk_table),
            "used_nk": self.nk_table.count(KeyStatus.USED),
            "transfers_completed": self.counters["transfers_completed"],
            "keys_failed": self.counters["keys_failed"],
            "links": links,
        }

    def report(self, now: float) -> List[Outbound]:
        """上报统计；NM 上报信道断开时本地缓存，恢复后按时间顺序补发"""
        self.now = now
        payload = self.build_report(now)
        if not self.channel_up.get("nm", False):
            self.report_buffer.append(payload)
            self.counters["reports_buffered"] += 1
            return []
        return self._flush_reports() + [self._send("nm", MsgType.STATS_REPORT, payload)]

    def _flush_reports(self) -> List[Outbound]:
        out = []
        while self.report_buffer:
            out.append(self._send("nm", MsgType.STATS_REPORT, self.report_buffer.popleft()))
            self.counters["reports_flushed"] += 1
        if out:
            self.logger.info(f"{self.node_id} 补发缓存的统计上报 {len(out)} 条")
        return out

    def peer_down(self, channel: str, now: float) -> List[Outbound]:
        self.now = now
        if self.channel_up.get(channel, False):
            self.logger.warning(f"{self.node_id} 信道 {channel} 中断")
        self.channel_up[channel] = False
        return []

    def peer_up(self, channel: str, now: float) -> List[Outbound]:
        self.now = now
        was_down = not self.channel_up.get(channel, True)
        self.channel_up[channel] = True
        if was_down:
            self.logger.info(f"{self.node_id} 信道 {channel} 恢复")
        if channel == "nm":
            return self._flush_reports()
        return []

    # ------------------------------------------------------------------ #
    # 持久化
    # ------------------------------------------------------------------ #
    def tables(self) -> Dict[str, KeyTable]:
        tables = {endpoint.table.scope.label: endpoint.table for endpoint in self.endpoints.values()}
        tables[self.nk_table.scope.label] = self.nk_table
        return tables

    def snapshot(self) -> Dict:
        return {
            "node_id": self.node_id,
            "channels": {name: peer.snapshot() for name, peer in self.channels.items()},
            "endpoints": {side: endpoint.snapshot() for side, endpoint in self.endpoints.items()},
            "counters": dict(self.counters),
            "report_buffer": list(self.report_buffer),
            "burned": {side: endpoint.table.burned_total for side, endpoint in self.endpoints.items()},
        }

    def restore(self, snapshot: Dict) -> None:
        for name, saved in snapshot.get("channels", {}).items():
            if name in self.channels:
                self.channels[name].send_sequence = saved["send_sequence"]
                self.channels[name].last_received = saved["last_received"]
        for side, saved in snapshot.get("endpoints", {}).items():
            if side in self.endpoints:
                self.endpoints[side].restore(saved)
                self.endpoints[side].table.burned_total = snapshot.get("burned", {}).get(side, 0)
        self.counters.update(snapshot.get("counters", {}))
        self.report_buffer = deque(snapshot.get("report_buffer", []))


class NetworkManagerNode(RelayNode):
    """
    网络管理节点

    汇总各节点统计（写入遥测），按 T/R 规则触发传输，
    从网络密钥源抽取 h 个密钥并用链路 1 的量子密钥加密后发往下一跳。
    link_reporters: 链路编号 → 该链路左端节点（其上报的可用量用于触发）。
    """

    def __init__(self, *args, nk_source: NetworkKeySource, link_reporters: Dict[int, str], **kwargs):
        super().__init__(*args, **kwargs)
        self.nk_source = nk_source
        self.link_reporters = dict(link_reporters)
        self.latest_reports: Dict[str, Dict] = {}
        self.batches: List[BatchRecord] = []
        self.in_flight: Optional[BatchRecord] = None
        self.next_batch_id = 1
        self.last_completed_ns = -1
        self.trigger_listeners = []
        self.completion_listeners = []

    @property
    def link1(self) -> KeyTable:
        return self.endpoints["right"].table

    def link_counts(self) -> Optional[Dict[int, int]]:
        """
        触发用的各链路可用量

        缺少任一链路的上报，或上报早于上一批次结束（计数已过时）时返回 None。
        """
        counts = {self.role.right_link: available(self.link1)}
        for link, node_id in sorted(self.link_reporters.items()):
            report = self.latest_reports.get(node_id)
            if report is None or report["timestamp_ns"] <= self.last_completed_ns:
                return None
            matches = [entry for entry in report["links"] if entry["link_index"] == link]
            if not matches:
                return None
            counts[link] = matches[0]["available_qk"]
        return counts

    def poll(self, now: float) -> List[Outbound]:
        self.now = now
        self.poll_links()
        return self._maybe_trigger(now)

    def report(self, now: float) -> List[Outbound]:
        self.now = now
        self._record_report(self.build_report(now))
        return []

    def on_stats_report(self, channel: str, msg: WireMessage) -> List[Outbound]:
        if not channel.startswith("report:"):
            return self._ignore(channel, msg)
        self._record_report(msg.payload)
        return self._maybe_trigger(self.now)

    def _record_report(self, payload: Dict) -> None:
        node_id = payload["node_id"]
        previous = self.latest_reports.get(node_id)
        if previous is None or payload["timestamp_ns"] >= previous["timestamp_ns"]:
            self.latest_reports[node_id] = payload
        if self.telemetry is None:
            return
        ts = payload["timestamp_ns"]
        self.telemetry.record(SeriesPoint("node_stats", {"node": node_id}, {
            "available_nk": payload["available_nk"],
            "used_nk": payload["used_nk"],
            "transfers_completed": payload["transfers_completed"],
            "keys_failed": payload["keys_failed"],
        }, ts))
        for entry in payload["links"]:
            self.telemetry.record(SeriesPoint("link_stats", {"node": node_id, "link": str(entry["link_index"])}, {
                "available_qk": entry["available_qk"],
                "used_qk": entry["used_qk"],
                "compromised_qk": entry["compromised_qk"],
                "burned_qk": entry["burned_qk"],
                "skr_bps": float(entry["skr"]),
                "qber_pct": float(entry["qber"]),
            }, ts))

    def _maybe_trigger(self, now: float) -> List[Outbound]:
        if self.in_flight is not None or not self.channel_up.get("right", False):
            return []
        counts = self.link_counts()
        if counts is None:
            return []
        h = nm_trigger(counts, self.policy)
        if h is None:
            return []
        try:
            return self.start_transfer(h, now, counts)
        except KeyExhausted as e:
            self.logger.warning(f"批次未启动: {e}")
            return []

    def start_transfer(self, h: int, now: float, counts: Optional[Dict[int, int]] = None) -> List[Outbound]:
        """
        nm_start_transfer: 抽取网络密钥并生成第一跳报文

        Raises:
            KeyExhausted: 链路 1 可用量不足 h，任何报文发出之前中止
        """
        self.now = now
        if available(self.link1) < h:
            raise KeyExhausted(f"链路 {self.role.right_link} 可用 {available(self.link1)} 少于 h={h}")
        shortage = h - available(self.nk_table)
        if shortage > 0:
            draw_network_keys(self.nk_source, shortage, self.nk_table)

        batch = BatchRecord(self.next_batch_id, h, dict(counts or {}), now)
        self.next_batch_id += 1
        self.batches.append(batch)
        self.in_flight = batch
        self.logger.info(f"启动批次 {batch.batch_id}: h={h}, 链路可用量 {batch.counts}")
        for listener in self.trigger_listeners:
            listener(self, batch)

        out = [self._send("right", MsgType.TRANSFER_INIT, {"batch_id": batch.batch_id, "h": h})]
        for index in range(h):
            nk = take_fresh(self.nk_table, batch.batch_id, index)
            ciphertext, qk_id = otp_encrypt(self.link1, nk.bits, batch.batch_id, index)
            out.append(self._send_hop(batch.batch_id, index, nk.key_id, nk.digest, ciphertext, qk_id))
        return out

    def _send_hop(self, batch_id: int, index: int, nk_id: int, digest: bytes,
                  ciphertext: bytes, qk_id: int) -> Outbound:
        payload = {"batch_id": batch_id, "index": index, "nk_id": nk_id,
                   "nk_digest": digest, "ciphertext": ciphertext, "qk_id": qk_id}
        if self._take_fault("tamper_ciphertext", payload) is not None:
            payload["ciphertext"] = bytes([ciphertext[0] ^ 0x01]) + ciphertext[1:]
        return self._send("right", MsgType.KEY_HOP, payload)

    def on_error(self, channel: str, msg: WireMessage) -> List[Outbound]:
        batch = self._batch(msg["batch_id"])
        if batch is not None and msg["index"] >= 0 and msg["index"] not in batch.failed_indices:
            batch.failed_indices.add(msg["index"])
            self.counters["keys_failed"] += 1
        self.logger.warning(f"批次 {msg['batch_id']} 第 {msg['index']} 个密钥失败: {msg['code']} {msg['detail']}")
        return []

    def on_transfer_complete(self, channel: str, msg: WireMessage) -> List[Outbound]:
        batch = self._batch(msg["batch_id"])
        if batch is None or batch.status != "in_flight":
            return self._ignore(channel, msg)
        self._finish(batch, "complete", msg["received"])
        return []

    def _batch(self, batch_id: int) -> Optional[BatchRecord]:
        for batch in reversed(self.batches):
            if batch.batch_id == batch_id:
                return batch
        return None

    def _finish(self, batch: BatchRecord, status: str, received: int) -> None:
        batch.status = status
        batch.received = received
        batch.completed_t = self.now
        self.last_completed_ns = self.timestamp_ns(self.now)
        if self.in_flight is batch:
            self.in_flight = None
        if status == "complete":
            self.counters["transfers_completed"] += 1
        self.logger.info(f"批次 {batch.batch_id} {status}: 送达 {received}/{batch.h}")
        if self.telemetry is not None:
            self.telemetry.record(SeriesPoint("transfer", {"node": self.node_id}, {
                "batch_id": batch.batch_id,
                "h": batch.h,
                "received": received,
                "failed": batch.h - received,
                "transfers_completed": self.counters["transfers_completed"],
            }, self.timestamp_ns(self.now)))
        for listener in self.completion_listeners:
            listener(self, batch)

    def tick(self, now: float) -> List[Outbound]:
        self.now = now
        batch = self.in_flight
        if batch is not None and now - batch.started_t >= self.batch_timeout_s * DEFAULT_NM_TIMEOUT_FACTOR:
            self.logger.error(f"批次 {batch.batch_id} 超时未收到完成通知")
            self._finish(batch, "timeout", 0)
        return []

    def snapshot(self) -> Dict:
        snapshot = super().snapshot()
        snapshot.update({
            "nk_counter": self.nk_source.counter,
            "next_batch_id": self.next_batch_id,
            "last_completed_ns": self.last_completed_ns,
            "batches": [batch.to_row() for batch in self.batches],
            "latest_reports": self.latest_reports,
        })
        return snapshot

    def restore(self, snapshot: Dict) -> None:
        super().restore(snapshot)
        self.nk_source.counter = snapshot.get("nk_counter", self.nk_source.counter)
        self.next_batch_id = snapshot.get("next_batch_id", self.next_batch_id)
        self.last_completed_ns = snapshot.get("last_completed_ns", self.last_completed_ns)
        self.latest_reports = snapshot.get("latest_reports", {})
        for row in snapshot.get("batches", []):
            batch = BatchRecord(row["batch_id"], row["h"], {}, row["started_t"],
                                None if row["completed_t"] < 0 else row["completed_t"],
                                None if row["received"] < 0 else row["received"], status=row["status"])
            if batch.status == "in_flight":
                # 重启前未完成的批次不再等待
                batch.status = "abandoned"
            self.batches.append(batch)


class DownstreamNode(RelayNode):
    """TN 与 EN 共用的逐跳接收逻辑"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.progress: Dict[int, BatchProgress] = {}
        self.held: Deque[HeldHop] = deque()

    @property
    def left(self) -> KeyTable:
        return self.endpoints["left"].table

    def _progress(self, batch_id: int, h: Optional[int] = None) -> BatchProgress:
        progress = self.progress.get(batch_id)
        if progress is None:
            progress = BatchProgress(batch_id, h, self.now)
            self.progress[batch_id] = progress
        elif h is not None and progress.h is None:
            progress.h = h
        return progress

    def on_transfer_init(self, channel: str, msg: WireMessage) -> List[Outbound]:
        if channel != "left":
            return self._ignore(channel, msg)
        self._progress(msg["batch_id"], msg["h"])
        return self._forward_init(msg)

    def _forward_init(self, msg: WireMessage) -> List[Outbound]:
        return []

    def on_key_hop(self, channel: str, msg: WireMessage) -> List[Outbound]:
        if channel != "left":
            return self._ignore(channel, msg)
        progress = self._progress(msg["batch_id"])
        index = msg["index"]
        if index in progress.resolved or any(
                held.message["batch_id"] == msg["batch_id"] and held.message["index"] == index
                for held in self.held):
            self.logger.info(f"{self.node_id} 忽略重复的跳报文 batch={msg['batch_id']} index={index}")
            return []
        if progress.h is not None and index >= progress.h:
            return self._ignore(channel, msg)
        if self.held:
            self.held.append(HeldHop(msg, self.now))
            return []
        out = self._try_hop(msg)
        if out is None:
            self.held.append(HeldHop(msg, self.now))
            return []
        return out

    def _ready_for(self, msg: WireMessage) -> bool:
        qk_id = msg["qk_id"]
        if qk_id > self.left.last_id:
            self.endpoints["left"].poll()
        return qk_id <= self.left.last_id

    def _try_hop(self, msg: WireMessage) -> Optional[List[Outbound]]:
        """处理一个跳报文；需要等待密钥时返回 None"""
        if not self._ready_for(msg):
            return None
        batch_id, index, qk_id = msg["batch_id"], msg["index"], msg["qk_id"]
        burned = burn_below(self.left, qk_id, batch_id, index)
        if burned:
            self.logger.warning(f"{self.node_id} 批次 {batch_id} 烧毁左侧链路密钥 {len(burned)} 个")
        try:
            nk = otp_decrypt(self.left, msg["ciphertext"], qk_id, batch_id, index)
        except (KeyAlreadyUsed, UnknownKeyId) as e:
            return self._fail(batch_id, index, e.code, str(e.message))
        if hashlib.sha256(nk).digest() != msg["nk_digest"]:
            error = DigestMismatch(f"批次 {batch_id} 第 {index} 个网络密钥摘要不符")
            return self._fail(batch_id, index, error.code, error.message)
        try:
            insert_record(self.nk_table, msg["nk_id"], nk)
        except DuplicateKeyId as e:
            return self._fail(batch_id, index, e.code, str(e.message))
        self.ledger.record(self.nk_table.scope, msg["nk_id"], "store", batch_id, index)
        return self._deliver(msg, nk)

    def _deliver(self, msg: WireMessage, nk: bytes) -> List[Outbound]:
        raise NotImplementedError

    def _fail(self, batch_id: int, index: int, code: str, detail: str) -> List[Outbound]:
        progress = self._progress(batch_id)
        progress.resolved[index] = False
        self.counters["keys_failed"] += 1
        self.logger.warning(f"{self.node_id} 批次 {batch_id} 第 {index} 个密钥失败: {code}")
        payload = {"batch_id": batch_id, "index": index, "code": code, "detail": detail}
        out = [self._send("left", MsgType.ERROR, payload)]
        if "right" in self.channels:
            out.append(self._send("right", MsgType.ERROR, dict(payload)))
        return out + self._check_batch(progress)

    def on_error(self, channel: str, msg: WireMessage) -> List[Outbound]:
        if channel == "right":
            return [self._send("left", MsgType.ERROR, msg.payload)]
        if channel != "left":
            return self._ignore(channel, msg)
        progress = self._progress(msg["batch_id"])
        out = []
        if msg["index"] >= 0 and msg["index"] not in progress.resolved:
            progress.resolved[msg["index"]] = False
            if "right" in self.channels:
                out.append(self._send("right", MsgType.ERROR, msg.payload))
        return out + self._check_batch(progress)

    def _check_batch(self, progress: BatchProgress) -> List[Outbound]:
        if progress.done or not progress.complete:
            return []
        return self._resolve_batch(progress)

    def _resolve_batch(self, progress: BatchProgress) -> List[Outbound]:
        progress.done = True
        return [self._send("left", MsgType.TRANSFER_ACK, {
            "batch_id": progress.batch_id, "forwarded": progress.succeeded, "failed": progress.failed})]

    def poll(self, now: float) -> List[Outbound]:
        self.now = now
        self.poll_links()
        return self._process_held()

    def _process_held(self) -> List[Outbound]:
        out = []
        while self.held:
            result = self._try_hop(self.held[0].message)
            if result is None:
                break
            self.held.popleft()
            out.extend(result)
        return out

    def tick(self, now: float) -> List[Outbound]:
        """等待超时的跳报文记为失败；超时批次按已解决的部分结束"""
        self.now = now
        out = []
        while self.held and now - self.held[0].held_since >= self.batch_timeout_s:
            held = self.held.popleft()
            out.extend(self._fail(held.message["batch_id"], held.message["index"],
                                  "HOLD_TIMEOUT", "等待链路密钥超时"))
        out.extend(self._process_held())
        for progress in list(self.progress.values()):
            if progress.done or now - progress.started_t < self.batch_timeout_s:
                continue
            if any(held.message["batch_id"] == progress.batch_id for held in self.held):
                continue
            if progress.h is not None:
                for index in range(progress.h):
                    progress.resolved.setdefault(index, False)
            self.logger.warning(f"{self.node_id} 批次 {progress.batch_id} 超时，"
                                f"成功 {progress.succeeded} 失败 {progress.failed}")
            out.extend(self._resolve_batch(progress))
        return out


class TrustedNode(DownstreamNode):
    """可信中继：左侧解密、校验、保存，右侧重新加密后转发"""

    @property
    def right(self) -> KeyTable:
        return self.endpoints["right"].table

    def _forward_init(self, msg: WireMessage) -> List[Outbound]:
        return [self._send("right", MsgType.TRANSFER_INIT, msg.payload)]

    def _ready_for(self, msg: WireMessage) -> bool:
        if not super()._ready_for(msg):
            return False
        if available(self.right) < 1:
            self.endpoints["right"].poll()
        return available(self.right) >= 1

    def _deliver(self, msg: WireMessage, nk: bytes) -> List[Outbound]:
        """tn_relay_hop: 用右侧链路密钥重新加密并转发"""
        batch_id, index = msg["batch_id"], msg["index"]
        ciphertext, qk_id = otp_encrypt(self.right, nk, batch_id, index)
        payload = {"batch_id": batch_id, "index": index, "nk_id": msg["nk_id"],
                   "nk_digest": msg["nk_digest"], "ciphertext": ciphertext, "qk_id": qk_id}
        if self._take_fault("tamper_ciphertext", payload) is not None:
            payload["ciphertext"] = bytes([ciphertext[0] ^ 0x01]) + ciphertext[1:]
        progress = self._progress(batch_id)
        progress.resolved[index] = True
        return [self._send("right", MsgType.KEY_HOP, payload)] + self._check_batch(progress)

    def on_transfer_complete(self, channel: str, msg: WireMessage) -> List[Outbound]:
        if channel != "right":
            return self._ignore(channel, msg)
        return [self._send("left", MsgType.TRANSFER_COMPLETE, msg.payload)]

    def _resolve_batch(self, progress: BatchProgress) -> List[Outbound]:
        self.counters["transfers_completed"] += 1
        return super()._resolve_batch(progress)


class EdgeNode(DownstreamNode):
    """终端节点：保存网络密钥，批次全部解决后通知 NM"""

    def _deliver(self, msg: WireMessage, nk: bytes) -> List[Outbound]:
        """en_finalize"""
        progress = self._progress(msg["batch_id"])
        progress.resolved[msg["index"]] = True
        return self._check_batch(progress)

    def _resolve_batch(self, progress: BatchProgress) -> List[Outbound]:
        out = super()._resolve_batch(progress)
        self.counters["transfers_completed"] += 1
        self.logger.info(f"{self.node_id} 批次 {progress.batch_id} 完成: 收到 {progress.succeeded}/{progress.h}")
        out.append(self._send("left", MsgType.TRANSFER_COMPLETE, {
            "batch_id": progress.batch_id, "h": progress.h or len(progress.resolved),
            "received": progress.succeeded}))
        return out


def create_node(node_id: str, role: NodeRole, *args, **kwargs) -> RelayNode:
    """按角色创建节点"""
    if role.kind is RoleKind.NETWORK_MANAGER:
        return NetworkManagerNode(node_id, role, *args, **kwargs)
    if role.kind is RoleKind.TRUSTED_NODE:
        return TrustedNode(node_id, role, *args, **kwargs)
    return EdgeNode(node_id, role, *args, **kwargs)
