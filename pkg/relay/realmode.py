# -*- coding: utf-8 -*-
"""
真实模式模块
每个节点一个操作系统进程：asyncio 事件循环上跑与仿真相同的节点反应器，
经典信道走本机 TCP，链路交付端是磁盘文件，密钥表与协议状态写前持久化，
进程被杀后按同一配置重启即可继续。

NetworkLauncher 负责生成节点配置、拉起进程、按计划重启，并把各节点的结果包合并。
"""

import asyncio
import heapq
import json
import logging
import os
import shutil
import sys
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import psutil

from database import RelayDatabase
from relay.keycore import KeyTable, TableScope, load_table, save_table
from relay.qkdlink import DeliveryMode, FileSink, LinkEmulator, LinkEndpoint
from relay.relayproto import (NetworkManagerNode, Outbound, RelayNode, RoleKind, TransferPolicy,
                              create_node)
from relay.report_export import load_bundle, write_bundle
from relay.scenario import DEFAULT_BASE_PORT, DEFAULT_HOST, ROLE_NAMES, Scenario, parse_scenario, scenario_to_dict
from relay.simharness import (RANK_LINK, RANK_POLL, RANK_REPORT, PeriodicActivity, assemble_summary,
                              batch_info, link_cycle_point, link_info, node_info, to_ns)
from relay.telemetry import SeriesPoint, TelemetryStore
from relay.wire import BadLength, PeerChannel, StreamDecoder
from utils.error_handler import EXIT_INVARIANT_ERROR, EXIT_OK, ScenarioError, describe_counters

logger = logging.getLogger(__name__)

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ENTRY_SCRIPT = os.path.join(ROOT_DIR, "qkd_relay.py")

DEFAULT_BACKOFF_INITIAL_S = 0.1
DEFAULT_BACKOFF_MAX_S = 5.0
DEFAULT_DRAIN_S = 3.0
DEFAULT_START_DELAY_S = 2.0
DEFAULT_EXIT_GRACE_S = 30.0
READ_CHUNK = 65536

STATE_FILE = "state.json"
NODE_DB_FILE = "node.db"
NODE_LOG_FILE = "node.log"
BUNDLE_DIR = "bundle"
CONFIG_DIR = "configs"
NODES_DIR = "nodes"
FEEDS_DIR = "feeds"

NODE_CONFIG_FIELDS = ("node_id", "role", "listen_addr", "left_peer", "right_peer", "nm_addr", "channels",
                      "policy", "links", "feeds_dir", "start_wall", "scenario")


def feed_path(feeds_dir: str, link_index: int, end: str, delivery: DeliveryMode) -> str:
    """链路交付文件路径；end 为 'A'（左端）或 'B'（右端）"""
    suffix = "qix" if delivery is DeliveryMode.PACKET_STREAM else "keys"
    return os.path.join(feeds_dir, f"link{link_index}_{end}.{suffix}")


# ------------------------------------------------------------------ #
# 节点配置
# ------------------------------------------------------------------ #
@dataclass
class NodeConfig:
    """
    单个节点进程的配置

    channels: 本地信道名 → {"name": 信道名, "psk_hex": 认证密钥}
    links: {"left": 链路编号, "right": 链路编号}，缺省表示该侧没有链路
    """

    node_id: str
    role: str
    listen_addr: Tuple[str, int]
    channels: Dict[str, Dict[str, str]]
    policy: Dict[str, int]
    links: Dict[str, int]
    feeds_dir: str
    start_wall: float
    scenario: Dict[str, Any]
    left_peer: Optional[Tuple[str, int]] = None
    right_peer: Optional[Tuple[str, int]] = None
    nm_addr: Optional[Tuple[str, int]] = None
    source: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "role": self.role,
            "listen_addr": list(self.listen_addr),
            "left_peer": list(self.left_peer) if self.left_peer else None,
            "right_peer": list(self.right_peer) if self.right_peer else None,
            "nm_addr": list(self.nm_addr) if self.nm_addr else None,
            "channels": self.channels,
            "policy": self.policy,
            "links": self.links,
            "feeds_dir": self.feeds_dir,
            "start_wall": self.start_wall,
            "scenario": self.scenario,
        }


def _address(value: Any, key: str, errors: List[str], required: bool = False) -> Optional[Tuple[str, int]]:
    if value is None:
        if required:
            errors.append(f"缺少地址: {key}")
        return None
    if (not isinstance(value, (list, tuple)) or len(value) != 2 or not isinstance(value[0], str)
            or not isinstance(value[1], int) or not 0 < value[1] < 65536):
        errors.append(f"{key} 必须是 [host, port]: {value!r}")
        return None
    return value[0], value[1]


def parse_node_config(data: Any, source: str = "") -> NodeConfig:
    """
    校验节点配置

    Raises:
        ScenarioError: 包含全部校验错误
    """
    if not isinstance(data, dict):
        raise ScenarioError(["节点配置必须是 JSON 对象"], source)
    errors: List[str] = []
    missing = [key for key in ("node_id", "role", "listen_addr", "channels", "feeds_dir", "start_wall", "scenario")
               if key not in data]
    if missing:
        raise ScenarioError([f"缺少必要字段: {', '.join(missing)}"], source)
    unknown = [key for key in data if key not in NODE_CONFIG_FIELDS]
    if unknown:
        errors.append(f"未知字段: {', '.join(sorted(unknown))}")
    if data["role"] not in ROLE_NAMES:
        errors.append(f"role 必须是 {'/'.join(ROLE_NAMES)}: {data['role']!r}")
    listen = _address(data["listen_addr"], "listen_addr", errors, required=True)
    left = _address(data.get("left_peer"), "left_peer", errors)
    right = _address(data.get("right_peer"), "right_peer", errors)
    nm_addr = _address(data.get("nm_addr"), "nm_addr", errors, required=data["role"] != "NM")

    channels = data["channels"]
    if not isinstance(channels, dict):
        errors.append("channels 必须是对象")
        channels = {}
    for name, entry in channels.items():
        if not isinstance(entry, dict) or "name" not in entry or "psk_hex" not in entry:
            errors.append(f"信道 {name} 需要 name 与 psk_hex")
            continue
        try:
            if len(bytes.fromhex(entry["psk_hex"])) != 32:
                errors.append(f"信道 {name} 的 psk_hex 必须是 32 字节")
        except (TypeError, ValueError):
            errors.append(f"信道 {name} 的 psk_hex 不是十六进制")
    if right is not None and "right" not in channels:
        errors.append("有 right_peer 时必须配置 right 信道")
    if not isinstance(data.get("start_wall"), (int, float)):
        errors.append(f"start_wall 必须是数值: {data.get('start_wall')!r}")
    if errors:
        raise ScenarioError(errors, source)

    return NodeConfig(
        node_id=str(data["node_id"]),
        role=data["role"],
        listen_addr=listen,
        channels=dict(channels),
        policy=dict(data.get("policy") or {}),
        links={side: int(index) for side, index in (data.get("links") or {}).items()},
        feeds_dir=str(data["feeds_dir"]),
        start_wall=float(data["start_wall"]),
        scenario=data["scenario"],
        left_peer=left,
        right_peer=right,
        nm_addr=nm_addr,
        source=source,
    )


def load_node_config(path: str) -> NodeConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ScenarioError([f"JSON 解析失败（第 {e.lineno} 行）: {e.msg}"], path) from e
    return parse_node_config(data, path)


def build_node_configs(scenario: Scenario, feeds_dir: str, start_wall: float,
                       host: Optional[str] = None, base_port: Optional[int] = None) -> Dict[str, NodeConfig]:
    """场景 → 每个节点一份配置；端口按拓扑顺序从 base_port 起连续分配"""
    host = host or scenario.network.get("host", DEFAULT_HOST)
    base_port = int(base_port or scenario.network.get("base_port", DEFAULT_BASE_PORT))
    ids = scenario.node_ids()
    addresses = {node_id: (host, base_port + position) for position, node_id in enumerate(ids)}
    role_names = {kind: name for name, kind in ROLE_NAMES.items()}
    scenario_dict = scenario_to_dict(scenario)
    scenario_dict["epoch_ns"] = scenario.epoch_ns

    configs = {}
    for position, spec in enumerate(scenario.nodes):
        node_id, role = spec.node_id, spec.role
        channels: Dict[str, Dict[str, str]] = {}
        links: Dict[str, int] = {}
        left_peer = right_peer = None
        if role.left_link is not None:
            name = scenario.pair_channel(ids[position - 1], node_id)
            channels["left"] = {"name": name, "psk_hex": scenario.psk(name).hex()}
            links["left"] = role.left_link
            left_peer = addresses[ids[position - 1]]
        if role.right_link is not None:
            name = scenario.pair_channel(node_id, ids[position + 1])
            channels["right"] = {"name": name, "psk_hex": scenario.psk(name).hex()}
            links["right"] = role.right_link
            right_peer = addresses[ids[position + 1]]
        if role.kind is RoleKind.NETWORK_MANAGER:
            for other in ids[1:]:
                name = scenario.report_channel(other)
                channels[name] = {"name": name, "psk_hex": scenario.psk(name).hex()}
        else:
            name = scenario.report_channel(node_id)
            channels["nm"] = {"name": name, "psk_hex": scenario.psk(name).hex()}
        configs[node_id] = NodeConfig(
            node_id=node_id,
            role=role_names[role.kind],
            listen_addr=addresses[node_id],
            channels=channels,
            policy={"T": scenario.policy.T, "R": scenario.policy.R},
            links=links,
            feeds_dir=feeds_dir,
            start_wall=start_wall,
            scenario=scenario_dict,
            left_peer=left_peer,
            right_peer=right_peer,
            nm_addr=None if role.kind is RoleKind.NETWORK_MANAGER else addresses[ids[0]],
        )
    return configs


# ------------------------------------------------------------------ #
# 节点进程
# ------------------------------------------------------------------ #
class NodeRuntime:
    """
    单个节点进程

    所有协议处理都在同一个 asyncio 事件循环里串行执行；
    对外发送前先把密钥表与协议状态写盘，重启后从状态文件恢复。
    """

    def __init__(self, config: NodeConfig, out_dir: str):
        self.config = config
        self.out_dir = out_dir
        self.state_dir = os.path.join(out_dir, "state")
        os.makedirs(self.state_dir, exist_ok=True)
        self.scenario = parse_scenario(config.scenario, config.source)
        self.logger = logging.getLogger(__name__)

        self.db = RelayDatabase(os.path.join(out_dir, NODE_DB_FILE))
        self.pending_ledger: List[Dict] = []
        self.pending_wire: List[Dict] = []
        self.pending_points: List[SeriesPoint] = []
        self.telemetry = TelemetryStore(sink=self.pending_points.append)
        self.event_counts: Counter = Counter()

        self.writers: Dict[str, asyncio.StreamWriter] = {}
        self.outbox: Dict[str, List[bytes]] = defaultdict(list)
        self.stopping = False

        self.node = self._build_node()
        self.emulator = self._build_emulator()
        self.restored = self.load_state()
        for name in self.node.channels:
            self.node.channel_up[name] = False

    # ---- 构建 ---- #
    def _endpoint(self, side: str, link_index: int) -> LinkEndpoint:
        profile = self.scenario.link(link_index)
        end = "B" if side == "left" else "A"
        sink = FileSink(feed_path(self.config.feeds_dir, link_index, end, profile.delivery))
        return LinkEndpoint(link_index, self.config.node_id, sink,
                            KeyTable(TableScope.quantum_link(link_index)), profile.delivery)

    def _build_node(self) -> RelayNode:
        config = self.config
        spec = self.scenario.node(config.node_id)
        channels = {local: PeerChannel(entry["name"], bytes.fromhex(entry["psk_hex"]))
                    for local, entry in config.channels.items()}
        endpoints = {side: self._endpoint(side, index) for side, index in config.links.items()}
        policy = TransferPolicy(**config.policy) if config.policy else self.scenario.policy
        kwargs = dict(telemetry=self.telemetry, epoch_ns=self.scenario.epoch_ns,
                      batch_timeout_s=self.scenario.batch_timeout_s)
        if spec.role.kind is RoleKind.NETWORK_MANAGER:
            kwargs.update(nk_source=self.scenario.nk_source(), link_reporters=self.scenario.link_reporters())
        node = create_node(config.node_id, spec.role, policy, channels, endpoints, **kwargs)
        node.faults = self.scenario.make_faults()
        node.ledger.listeners.append(lambda entry: self.pending_ledger.append(entry.__dict__.copy()))
        node.wire_listeners.append(self.pending_wire.append)
        return node

    def _build_emulator(self) -> Optional[LinkEmulator]:
        link = self.config.links.get("right")
        if link is None:
            return None
        profile = self.scenario.link(link)
        sinks = [FileSink(feed_path(self.config.feeds_dir, link, end, profile.delivery)) for end in ("A", "B")]
        return LinkEmulator(profile, sinks, self.scenario.seed, self.scenario.disturbances)

    # ---- 虚拟时钟 ---- #
    def virtual_now(self) -> float:
        return max(0.0, (time.time() - self.config.start_wall) * self.scenario.time_compression)

    def wall_at(self, virtual_t: float) -> float:
        return self.config.start_wall + virtual_t / self.scenario.time_compression

    # ------------------------------------------------------------------ #
    # 持久化
    # ------------------------------------------------------------------ #
    def _table_path(self, label: str) -> str:
        return os.path.join(self.state_dir, f"{label}.qkt")

    def save_state(self, *_args) -> None:
        """写前持久化：密钥表与协议状态先落盘，再发出报文"""
        for label, table in self.node.tables().items():
            save_table(table, self._table_path(label))
        state = {
            "node": self.node.snapshot(),
            "emulator": self.emulator.snapshot() if self.emulator else None,
            "virtual_t": self.node.now,
        }
        tmp_path = os.path.join(self.state_dir, f"{STATE_FILE}.tmp")
        with open(tmp_path, "w", encoding="utf-8") as fh:
            json.dump(state, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, os.path.join(self.state_dir, STATE_FILE))

    def load_state(self) -> bool:
        state_path = os.path.join(self.state_dir, STATE_FILE)
        if not os.path.exists(state_path):
            return False
        with open(state_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        tables = {}
        for label in self.node.tables():
            path = self._table_path(label)
            if os.path.exists(path):
                tables[label] = load_table(path)
        self.node.attach_tables(tables)
        self.node.restore(state["node"])
        if self.emulator is not None and state.get("emulator"):
            self.emulator.restore(state["emulator"])
        self.node.now = float(state.get("virtual_t", 0.0))
        self.logger.info(f"{self.config.node_id} 从持久化状态恢复: t={self.node.now:.3f}, "
                         f"密钥表 {', '.join(sorted(tables))}")
        return True

    def flush_logs(self) -> None:
        if self.pending_ledger:
            self.db.insert_ledger_rows(self.pending_ledger)
            self.pending_ledger.clear()
        if self.pending_wire:
            self.db.insert_wire_rows(self.pending_wire)
            self.pending_wire.clear()
        if self.pending_points:
            self.db.insert_telemetry_points(self.pending_points)
            self.pending_points.clear()
        if isinstance(self.node, NetworkManagerNode) and self.node.batches:
            self.db.upsert_batches(batch.to_row() for batch in self.node.batches)

    # ------------------------------------------------------------------ #
    # 发送 / 接收
    # ------------------------------------------------------------------ #
    def dispatch(self, outbound: List[Outbound]) -> None:
        if outbound:
            self.save_state()
        self.flush_logs()
        for out in outbound:
            self.event_counts["messages_sent"] += 1
            writer = self.writers.get(out.channel)
            if writer is None or writer.is_closing():
                self.outbox[out.channel].append(out.frame)
                self.event_counts["messages_queued"] += 1
            else:
                writer.write(out.frame)

    def _receive(self, channel: str, frame: bytes) -> None:
        self.event_counts["Deliver"] += 1
        self.dispatch(self.node.receive(channel, frame, self.virtual_now()))

    def _identify(self, frame: bytes) -> Optional[str]:
        """接入连接的第一帧能用哪个信道的 PSK 认证，就属于哪个信道"""
        for name, peer in self.node.channels.items():
            if name in ("right", "nm"):
                continue
            if peer.authenticates(frame):
                return name
        return None

    async def _attach(self, channel: str, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                      opening: bool, decoder: Optional[StreamDecoder] = None,
                      first_frames: Sequence[bytes] = ()) -> None:
        self.writers[channel] = writer
        now = self.virtual_now()
        pending = self.outbox.pop(channel, [])
        if opening and not pending:
            self.dispatch([self.node.hello(channel, now)])
        for frame in pending:
            writer.write(frame)
        self.dispatch(self.node.peer_up(channel, now))
        decoder = decoder or StreamDecoder()
        for frame in first_frames:
            self._receive(channel, frame)
        try:
            while True:
                data = await reader.read(READ_CHUNK)
                if not data:
                    break
                for frame in decoder.feed(data):
                    self._receive(channel, frame)
        except (ConnectionError, BadLength) as e:
            self.logger.warning(f"{self.config.node_id} 信道 {channel} 连接异常: {e}")
        finally:
            if self.writers.get(channel) is writer:
                del self.writers[channel]
            writer.close()
            if not self.stopping:
                self.dispatch(self.node.peer_down(channel, self.virtual_now()))

    async def _on_accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        decoder = StreamDecoder()
        frames: List[bytes] = []
        try:
            while not frames:
                data = await reader.read(READ_CHUNK)
                if not data:
                    writer.close()
                    return
                frames = decoder.feed(data)
        except (ConnectionError, BadLength) as e:
            self.logger.warning(f"{self.config.node_id} 接入连接首帧无效: {e}")
            writer.close()
            return
        channel = self._identify(frames[0])
        if channel is None:
            self.logger.warning(f"{self.config.node_id} 接入连接认证失败，已断开")
            writer.close()
            return
        self.logger.info(f"{self.config.node_id} 接入信道 {channel}")
        await self._attach(channel, reader, writer, opening=False, decoder=decoder, first_frames=frames)

    async def _dial(self, channel: str, address: Tuple[str, int]) -> None:
        """主动连接；失败按 0.1 s 起指数退避，上限 5 s"""
        backoff = DEFAULT_BACKOFF_INITIAL_S
        while not self.stopping:
            try:
                reader, writer = await asyncio.open_connection(*address)
            except OSError as e:
                self.logger.debug(f"{self.config.node_id} 连接 {channel} {address} 失败: {e}，{backoff:.1f}s 后重试")
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, DEFAULT_BACKOFF_MAX_S)
                continue
            backoff = DEFAULT_BACKOFF_INITIAL_S
            self.logger.info(f"{self.config.node_id} 已连接 {channel} {address}")
            await self._attach(channel, reader, writer, opening=True)
            if not self.stopping:
                await asyncio.sleep(backoff)

    def dial_targets(self) -> List[Tuple[str, Tuple[str, int]]]:
        targets = []
        if self.config.right_peer is not None:
            targets.append(("right", self.config.right_peer))
        if self.config.nm_addr is not None:
            targets.append(("nm", self.config.nm_addr))
        return targets

    # ------------------------------------------------------------------ #
    # 周期调度
    # ------------------------------------------------------------------ #
    def _link_cycle(self, now: float) -> None:
        emulator = self.emulator
        keys_before = emulator.states[0].keys_emitted
        cycle = emulator.step(now, before_emit=self.save_state)
        self.telemetry.record(link_cycle_point(emulator, cycle, emulator.states[0].keys_emitted - keys_before,
                                               self.scenario.epoch_ns + to_ns(now)))
        self.event_counts["LinkCycle"] += 1
        self.save_state()

    def _poll(self, now: float) -> None:
        self.event_counts["PollTick"] += 1
        self.dispatch(self.node.poll(now) + self.node.tick(now))

    def _report(self, now: float) -> None:
        self.event_counts["ReportTick"] += 1
        self.dispatch(self.node.report(now))

    def periodic_activities(self) -> List[PeriodicActivity]:
        activities = []
        if self.emulator is not None:
            activities.append(PeriodicActivity(self.emulator.profile.cycle_period_s, RANK_LINK, 0, self._link_cycle))
        activities.append(PeriodicActivity(self.scenario.poll_period_s, RANK_POLL, 0, self._poll))
        activities.append(PeriodicActivity(self.scenario.report_period_s, RANK_REPORT, 0, self._report))
        return activities

    async def _schedule(self) -> None:
        """按虚拟时刻推进周期活动；重启后跳过已经过去的时刻"""
        limit = to_ns(self.scenario.duration_s)
        resume_at = max(self.virtual_now(), self.node.now if self.restored else 0.0)
        heap = []
        for position, activity in enumerate(self.periodic_activities()):
            while to_ns(activity.time()) <= to_ns(resume_at) and self.restored:
                activity.k += 1
            heapq.heappush(heap, (to_ns(activity.time()), activity.rank, activity.order, position, activity))
        while heap:
            t_ns, _, _, position, activity = heapq.heappop(heap)
            if t_ns > limit:
                continue
            delay = self.wall_at(t_ns / 1e9) - time.time()
            if delay > 0:
                await asyncio.sleep(delay)
            activity.action(t_ns / 1e9)
            activity.k += 1
            heapq.heappush(heap, (to_ns(activity.time()), activity.rank, activity.order, position, activity))

    async def run(self) -> int:
        host, port = self.config.listen_addr
        server = await asyncio.start_server(self._on_accept, host, port)
        self.db.set_system_config("node_id", self.config.node_id)
        self.db.set_system_config("start_wall", repr(self.config.start_wall), "float")
        self.db.set_system_config("restored", str(self.restored), "bool")
        self.logger.info(f"{self.config.node_id} 监听 {host}:{port}，虚拟时长 {self.scenario.duration_s}s，"
                         f"时间压缩 ×{self.scenario.time_compression}")
        dialers = [asyncio.create_task(self._dial(channel, address)) for channel, address in self.dial_targets()]
        try:
            await self._schedule()
            await self._drain()
        finally:
            self.stopping = True
            for task in dialers:
                task.cancel()
            await asyncio.gather(*dialers, return_exceptions=True)
            server.close()
            await server.wait_closed()
            for writer in list(self.writers.values()):
                writer.close()
        self.finish()
        return EXIT_OK

    async def _drain(self) -> None:
        """运行结束后继续处理在途报文；NM 没有进行中的批次即可提前结束"""
        deadline = time.time() + DEFAULT_DRAIN_S
        while time.time() < deadline:
            if isinstance(self.node, NetworkManagerNode) and self.node.in_flight is None:
                break
            await asyncio.sleep(0.05)
        if not isinstance(self.node, NetworkManagerNode):
            await asyncio.sleep(max(0.0, deadline - time.time()))

    # ------------------------------------------------------------------ #
    # 结束与导出
    # ------------------------------------------------------------------ #
    def node_summary(self, telemetry: TelemetryStore) -> Dict:
        """本节点视角的部分汇总，由 merge_bundles 合并成网络汇总"""
        node = self.node
        links: Dict[str, Dict] = {}
        if self.emulator is not None:
            link = self.emulator.profile.link_index
            links[str(link)] = link_info(self.scenario, link, telemetry, self.emulator)
        for endpoint in node.endpoints.values():
            links.setdefault(str(endpoint.link_index), {"feeds": {}})
            links[str(endpoint.link_index)]["feeds"][node.node_id] = endpoint.counters.as_dict()
        batches = list(node.batches) if isinstance(node, NetworkManagerNode) else []
        return {
            "nodes": {node.node_id: node_info(node)},
            "links": links,
            "batches": batch_info(batches) if isinstance(node, NetworkManagerNode) else {},
            "events": dict(sorted(self.event_counts.items())),
        }

    def export(self, bundle_dir: str) -> List[str]:
        telemetry = TelemetryStore()
        for row in self.db.get_telemetry_rows():
            telemetry.record(SeriesPoint(row["measurement"], row["tags"], row["fields"], row["timestamp_ns"]))
        node_id = self.config.node_id
        ledger = self.db.get_ledger_frame(node_id).to_dict("records")
        wire = self.db.get_wire_frame(node_id).to_dict("records")
        batches = self.db.get_batches_frame().to_dict("records")
        return write_bundle(bundle_dir, self.node_summary(telemetry), telemetry, {node_id: ledger}, {node_id: wire},
                            {node_id: self.node.tables()}, batches)

    def finish(self) -> None:
        self.node.now = self.scenario.duration_s
        self.node.poll_links()
        self.save_state()
        self.flush_logs()
        self.db.set_system_config("final_virtual_t", repr(self.node.now), "float")
        self.db.log_run(self.scenario.name, "node", "complete", self.config.node_id)
        self.export(os.path.join(self.out_dir, BUNDLE_DIR))
        self.db.close()
        self.logger.info(f"{self.config.node_id} 结束，计数: {describe_counters(self.node.counters)}，"
                         f"结果包: {os.path.join(self.out_dir, BUNDLE_DIR)}")


def run_node(config_path: str, out_dir: str) -> int:
    """node 子命令入口"""
    config = load_node_config(config_path)
    runtime = NodeRuntime(config, out_dir)
    return asyncio.run(runtime.run())


# ------------------------------------------------------------------ #
# 合并
# ------------------------------------------------------------------ #
def _deep_merge(target: Dict, source: Dict) -> Dict:
    for key, value in source.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _deep_merge(target[key], value)
        else:
            target[key] = value
    return target


def _clean_cell(value: Any) -> Any:
    """CSV 读回的 NaN 还原为 None，整数值的浮点还原为 int"""
    if isinstance(value, float):
        if pd.isna(value):
            return None
        if value.is_integer():
            return int(value)
    return value


def merge_bundles(scenario: Scenario, node_dirs: Dict[str, str], out_dir: str) -> Dict:
    """把各节点的结果包合并成一个网络结果包，返回合并后的汇总"""
    parts: Dict[str, Any] = {"nodes": {}, "links": {}}
    batches: Dict = {}
    events: Counter = Counter()
    telemetry = TelemetryStore()
    points: List[SeriesPoint] = []
    ledgers: Dict[str, List[Dict]] = {}
    wires: Dict[str, List[Dict]] = {}
    tables: Dict[str, Dict[str, KeyTable]] = {}
    batch_rows: List[Dict] = []

    for node_id, node_dir in node_dirs.items():
        bundle = load_bundle(os.path.join(node_dir, BUNDLE_DIR))
        summary = bundle.summary
        _deep_merge(parts, {"nodes": summary.get("nodes", {}), "links": summary.get("links", {})})
        if summary.get("batches"):
            batches = summary["batches"]
            batch_rows = bundle.batches.to_dict("records")
        events.update(summary.get("events", {}))
        points.extend(bundle.points)
        ledgers[node_id] = bundle.ledger[bundle.ledger["node_id"] == node_id].to_dict("records")
        wires[node_id] = bundle.wire[bundle.wire["node_id"] == node_id].to_dict("records")
        tables[node_id] = bundle.tables.get(node_id, {})

    for point in sorted(points, key=lambda p: p.timestamp_ns):
        telemetry.record(point)
    links = {key: parts["links"][key] for key in sorted(parts["links"], key=int)}
    summary = assemble_summary(scenario, parts["nodes"], links, batches, events, telemetry)
    summary["mode"] = "real"
    batch_rows = [{key: _clean_cell(value) for key, value in row.items()} for row in batch_rows]
    write_bundle(out_dir, summary, telemetry, ledgers, wires, tables, batch_rows)
    return summary


# ------------------------------------------------------------------ #
# 启动器
# ------------------------------------------------------------------ #
def parse_restart(text: str) -> Tuple[str, float]:
    """'TN1@30' → ('TN1', 30.0)，秒数为启动后的墙钟时间"""
    node_id, _, seconds = text.partition("@")
    if not node_id or not seconds:
        raise ValueError(f"重启计划格式应为 NODE@SECONDS: {text!r}")
    return node_id, float(seconds)


@dataclass
class NetworkLauncher:
    """按场景拉起全部节点进程，执行计划中的杀进程/重启，最后合并结果"""

    scenario: Scenario
    out_dir: str
    restarts: List[Tuple[str, float]] = field(default_factory=list)
    python: str = sys.executable
    script: str = ENTRY_SCRIPT
    log_level: str = "INFO"

    def __post_init__(self):
        self.logger = logging.getLogger(__name__)
        self.processes: Dict[str, psutil.Popen] = {}
        self.config_paths: Dict[str, str] = {}
        self.node_dirs: Dict[str, str] = {}
        unknown = [node_id for node_id, _ in self.restarts if node_id not in self.scenario.node_ids()]
        if unknown:
            raise ScenarioError([f"重启计划中的节点不存在: {', '.join(unknown)}"], self.scenario.source)

    def prepare(self, start_wall: float) -> Dict[str, NodeConfig]:
        feeds_dir = os.path.join(self.out_dir, FEEDS_DIR)
        for sub_dir in (FEEDS_DIR, NODES_DIR):
            shutil.rmtree(os.path.join(self.out_dir, sub_dir), ignore_errors=True)
        os.makedirs(os.path.join(self.out_dir, CONFIG_DIR), exist_ok=True)
        configs = build_node_configs(self.scenario, feeds_dir, start_wall)
        for node_id, config in configs.items():
            path = os.path.join(self.out_dir, CONFIG_DIR, f"{node_id}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(config.to_dict(), fh, indent=2, ensure_ascii=False)
            self.config_paths[node_id] = path
            self.node_dirs[node_id] = os.path.join(self.out_dir, NODES_DIR, node_id)
            os.makedirs(self.node_dirs[node_id], exist_ok=True)
        return configs

    def _spawn(self, node_id: str) -> psutil.Popen:
        command = [self.python, self.script, "--log-level", self.log_level,
                   "--log-file", os.path.join(self.node_dirs[node_id], NODE_LOG_FILE),
                   "node", "--config", self.config_paths[node_id], "--out", self.node_dirs[node_id]]
        process = psutil.Popen(command, cwd=ROOT_DIR)
        self.logger.info(f"启动节点 {node_id}: pid={process.pid}")
        return process

    def _restart(self, node_id: str) -> None:
        process = self.processes[node_id]
        if process.is_running():
            process.kill()
            process.wait(timeout=10)
            self.logger.warning(f"节点 {node_id} 已被终止（pid={process.pid}），重新启动")
        self.processes[node_id] = self._spawn(node_id)

    def run(self) -> int:
        start_wall = time.time() + DEFAULT_START_DELAY_S
        self.prepare(start_wall)
        for node_id in self.scenario.node_ids():
            self.processes[node_id] = self._spawn(node_id)

        for node_id, seconds in sorted(self.restarts, key=lambda item: item[1]):
            delay = start_wall + seconds - time.time()
            if delay > 0:
                time.sleep(delay)
            self._restart(node_id)

        wall_duration = self.scenario.duration_s / self.scenario.time_compression
        deadline = start_wall + wall_duration + DEFAULT_DRAIN_S + DEFAULT_EXIT_GRACE_S
        exit_codes = {}
        for node_id, process in self.processes.items():
            try:
                exit_codes[node_id] = process.wait(timeout=max(1.0, deadline - time.time()))
            except psutil.TimeoutExpired:
                self.logger.error(f"节点 {node_id} 超时未退出，强制结束")
                process.kill()
                exit_codes[node_id] = process.wait(timeout=10)

        failed = {node_id: code for node_id, code in exit_codes.items() if code != EXIT_OK}
        if failed:
            self.logger.error(f"节点进程异常退出: {failed}")
            return EXIT_INVARIANT_ERROR
        summary = merge_bundles(self.scenario, self.node_dirs, self.out_dir)
        self.logger.info(f"真实模式结束: EN 网络密钥 {summary['nk_delivered']}，"
                         f"速率 {summary['network_key_rate_keys_per_s']:.3f} 个/s")
        return EXIT_OK


def launch_network(scenario: Scenario, out_dir: str, restarts: Sequence[str] = (), log_level: str = "INFO") -> int:
    launcher = NetworkLauncher(scenario, out_dir, [parse_restart(text) for text in restarts], log_level=log_level)
    return launcher.run()
