# -*- coding: utf-8 -*-
"""
离散事件仿真模块
在单进程虚拟时钟下运行整个线性网络：链路成码、节点轮询/上报、报文投递、
经典信道中断，并在检查点断言各模块不变量。

同一时刻的周期事件顺序固定: 链路成码 → 中断/扰动边界 → 节点轮询 → 统计上报 → 检查点；
报文投递由 simpy 按调度顺序处理，因此运行结果只取决于场景与种子。
"""

import hashlib
import heapq
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import simpy

from relay.keycore import KEY_BITS, KeyLedger, KeyStatus, KeyTable, TableScope, available, table_digest
from relay.qkdlink import LinkEmulator, LinkEndpoint, MemorySink
from relay.relayproto import BatchRecord, NetworkManagerNode, Outbound, RelayNode, RoleKind, create_node
from relay.report_export import write_bundle
from relay.scenario import Outage, Scenario
from relay.telemetry import SeriesPoint, TelemetryStore, summarize
from relay.wire import PeerChannel
from utils.error_handler import EmptySeries, InvariantViolation

logger = logging.getLogger(__name__)

CHECKPOINT_OFFSET_S = 0.5
CONSUMING_ACTIONS = KeyLedger.CONSUMING_ACTIONS

# 同一时刻的周期事件排序
RANK_LINK = 0
RANK_BOUNDARY = 1
RANK_POLL = 2
RANK_REPORT = 3
RANK_CHECKPOINT = 4


class SimEventKind(Enum):
    LINK_CYCLE = "LinkCycle"
    POLL_TICK = "PollTick"
    REPORT_TICK = "ReportTick"
    DELIVER = "Deliver"
    OUTAGE_START = "OutageStart"
    OUTAGE_END = "OutageEnd"
    DISTURB_START = "DisturbStart"
    DISTURB_END = "DisturbEnd"
    CHECKPOINT = "Checkpoint"


@dataclass
class SimEvent:
    time_s: float
    kind: SimEventKind
    payload: Dict = field(default_factory=dict)


def to_ns(seconds: float) -> int:
    return int(round(seconds * 1e9))


@dataclass
class PeriodicActivity:
    """周期活动: 下一次发生在 offset + k × period"""

    period: float
    rank: int
    order: int
    action: Callable[[float], None]
    offset: float = 0.0
    k: int = 1

    def time(self) -> float:
        return self.offset + self.k * self.period


def link_cycle_point(emulator: LinkEmulator, cycle, keys: int, timestamp_ns: int) -> SeriesPoint:
    """一个成码周期的遥测点"""
    return SeriesPoint("link_cycle", {"link": str(emulator.profile.link_index)}, {
        "skr_bps": float(cycle.skr_bps),
        "qber_pct": float(cycle.qber_pct),
        "bits": int(cycle.key_bits.size),
        "keys": int(keys),
        "compromised": int(cycle.qber_pct > emulator.profile.compromise_threshold_pct),
    }, timestamp_ns)


# ------------------------------------------------------------------ #
# 不变量检查
# ------------------------------------------------------------------ #
class InvariantChecker:
    """
    运行期不变量检查

    记录完整性与两端一致性按已检查位置增量进行；台账重复使用在写入时立即检查。
    """

    def __init__(self, network: "SimNetwork"):
        self.network = network
        self.verified: Dict[Tuple[str, str], int] = defaultdict(int)
        self.compared: Dict[int, int] = defaultdict(int)
        self.consumed: Dict[str, set] = defaultdict(set)
        self.checkpoints = 0
        self.logger = logging.getLogger(__name__)

    def fail(self, invariant: str, detail: str) -> None:
        self.logger.error(f"不变量违反 [{invariant}] t={self.network.env.now:.3f}: {detail}")
        raise InvariantViolation(invariant, detail)

    # ---- 即时检查 ---- #
    def on_ledger(self, entry) -> None:
        if entry.action not in CONSUMING_ACTIONS:
            return
        key = (entry.scope, entry.key_id)
        if key in self.consumed[entry.node_id]:
            self.fail("single_use", f"{entry.node_id} 重复使用 {entry.scope} 密钥 {entry.key_id}")
        self.consumed[entry.node_id].add(key)

    def on_trigger(self, nm: NetworkManagerNode, batch: BatchRecord) -> None:
        policy = nm.policy
        lowest = min(batch.counts.values())
        if lowest < policy.T or batch.h != lowest - policy.R:
            self.fail("h_formula", f"批次 {batch.batch_id}: h={batch.h}, 最小可用量 {lowest}, "
                                   f"T={policy.T}, R={policy.R}")

    def on_completion(self, nm: NetworkManagerNode, batch: BatchRecord) -> None:
        if batch.status != "complete":
            return
        for link, table in self.network.sender_tables().items():
            if available(table) < nm.policy.R:
                self.fail("reserve_floor", f"批次 {batch.batch_id} 完成后链路 {link} 可用 {available(table)} "
                                           f"低于 R={nm.policy.R}")

    def on_cycle(self, link: int, qber: float, skr: float) -> None:
        if not 0.0 <= qber < 50.0:
            self.fail("qber_range", f"链路 {link} QBER={qber}")
        if skr < 0.0:
            self.fail("skr_range", f"链路 {link} SKR={skr}")

    # ---- 检查点 ---- #
    def _check_table(self, owner: str, table: KeyTable) -> None:
        key = (owner, table.scope.label)
        for record in table.records[self.verified[key]:]:
            if not record.verify():
                self.fail("integrity", f"{owner} {table.scope.label} 密钥 {record.key_id} 摘要不符")
        self.verified[key] = len(table.records)
        if table.ingested_bits_total != KEY_BITS * len(table.records) + int(table.residual.size):
            self.fail("conservation", f"{owner} {table.scope.label} 入表比特 {table.ingested_bits_total} "
                                      f"≠ {KEY_BITS}×{len(table.records)} + {table.residual.size}")

    def _compare_ends(self, link: int, left: KeyTable, right: KeyTable) -> None:
        common = min(len(left.records), len(right.records))
        for position in range(self.compared[link], common):
            a, b = left.records[position], right.records[position]
            if a.key_id != b.key_id or a.bits != b.bits:
                self.fail("both_ends", f"链路 {link} 第 {position} 条记录两端不一致 "
                                       f"(id {a.key_id} / {b.key_id})")
        self.compared[link] = common

    def checkpoint(self, now: float, final: bool = False) -> None:
        self.checkpoints += 1
        network = self.network
        for node in network.nodes.values():
            for table in node.tables().values():
                self._check_table(node.node_id, table)
        for link, (left_end, right_end) in network.link_endpoints().items():
            self._compare_ends(link, left_end.table, right_end.table)
            delivered = network.emulators[link].bits_delivered
            for endpoint in (left_end, right_end):
                accounted = endpoint.table.ingested_bits_total + endpoint.counters.skipped_bits
                if accounted > delivered or (final and accounted != delivered):
                    self.fail("link_conservation", f"链路 {link} {endpoint.side} 端入表+跳过 {accounted} "
                                                   f"与交付 {delivered} 不符")
            if final and table_digest(left_end.table) != table_digest(right_end.table):
                self.fail("both_ends", f"链路 {link} 静止后两端密钥表摘要不同")
        if final and not network.scenario.faults:
            self._check_nk_equality()

    def _check_nk_equality(self) -> None:
        reference = table_digest(self.network.nm.nk_table)
        for node in self.network.nodes.values():
            if table_digest(node.nk_table) != reference:
                self.fail("nk_equality", f"{node.node_id} 网络密钥表与 NM 不一致 "
                                         f"({len(node.nk_table.records)} / {len(self.network.nm.nk_table.records)})")


# ------------------------------------------------------------------ #
# 仿真网络
# ------------------------------------------------------------------ #
class SimNetwork:
    """
    场景 → 节点、链路仿真器与信道路由

    每条链路只有一个内存交付端，两端各自以独立的 FeedState 监视它；
    路由表把 (节点, 信道) 映射到 (对端节点, 对端信道)。
    """

    def __init__(self, scenario: Scenario, checks: bool = True, trace: bool = False):
        self.scenario = scenario
        self.env = simpy.Environment()
        self.telemetry = TelemetryStore()
        self.checks = checks
        self.trace = trace
        self.events: List[SimEvent] = []
        self.event_counts: Counter = Counter()
        self.logger = logging.getLogger(__name__)

        self.sinks = {profile.link_index: MemorySink(f"link{profile.link_index}") for profile in scenario.links}
        self.emulators = {
            profile.link_index: LinkEmulator(profile, [self.sinks[profile.link_index]], scenario.seed,
                                             scenario.disturbances)
            for profile in scenario.links
        }
        self.nodes: Dict[str, RelayNode] = {}
        self.routes: Dict[Tuple[str, str], Tuple[str, str]] = {}
        self.outages: List[Outage] = []
        self.pair_down: Dict[Tuple[str, str], int] = defaultdict(int)
        self.report_down: Dict[str, int] = defaultdict(int)
        self.queued: Dict[Tuple[str, str], List[Tuple[str, str, bytes]]] = defaultdict(list)
        self.checker = InvariantChecker(self)
        self._build_nodes()
        for outage in scenario.outages:
            self.inject_outage(outage)

    # ---- 构建 ---- #
    def _endpoint(self, node_id: str, link_index: int) -> LinkEndpoint:
        profile = self.scenario.link(link_index)
        return LinkEndpoint(link_index, node_id, self.sinks[link_index],
                            KeyTable(TableScope.quantum_link(link_index)), profile.delivery)

    def _build_nodes(self) -> None:
        scenario = self.scenario
        ids = scenario.node_ids()
        faults = scenario.make_faults()
        for position, spec in enumerate(scenario.nodes):
            node_id, role = spec.node_id, spec.role
            channels: Dict[str, PeerChannel] = {}
            endpoints: Dict[str, LinkEndpoint] = {}
            if role.left_link is not None:
                neighbour = ids[position - 1]
                name = scenario.pair_channel(neighbour, node_id)
                channels["left"] = PeerChannel(name, scenario.psk(name))
                endpoints["left"] = self._endpoint(node_id, role.left_link)
                self.routes[(node_id, "left")] = (neighbour, "right")
            if role.right_link is not None:
                neighbour = ids[position + 1]
                name = scenario.pair_channel(node_id, neighbour)
                channels["right"] = PeerChannel(name, scenario.psk(name))
                endpoints["right"] = self._endpoint(node_id, role.right_link)
                self.routes[(node_id, "right")] = (neighbour, "left")
            if role.kind is RoleKind.NETWORK_MANAGER:
                for other in ids[1:]:
                    name = scenario.report_channel(other)
                    channels[name] = PeerChannel(name, scenario.psk(name))
            else:
                name = scenario.report_channel(node_id)
                channels["nm"] = PeerChannel(name, scenario.psk(name))
                self.routes[(node_id, "nm")] = (ids[0], name)

            kwargs = dict(telemetry=self.telemetry, epoch_ns=scenario.epoch_ns,
                          batch_timeout_s=scenario.batch_timeout_s)
            if role.kind is RoleKind.NETWORK_MANAGER:
                kwargs.update(nk_source=scenario.nk_source(), link_reporters=scenario.link_reporters())
            node = create_node(node_id, role, scenario.policy, channels, endpoints, **kwargs)
            node.faults = faults
            if self.checks:
                node.ledger.listeners.append(self.checker.on_ledger)
            self.nodes[node_id] = node

        if self.checks:
            self.nm.trigger_listeners.append(self.checker.on_trigger)
            self.nm.completion_listeners.append(self.checker.on_completion)

    @property
    def nm(self) -> NetworkManagerNode:
        return self.nodes[self.scenario.node_ids()[0]]

    @property
    def edge(self) -> RelayNode:
        return self.nodes[self.scenario.node_ids()[-1]]

    def link_endpoints(self) -> Dict[int, Tuple[LinkEndpoint, LinkEndpoint]]:
        """链路编号 → (左端节点的 right 端点, 右端节点的 left 端点)"""
        ends = {}
        for profile in self.scenario.links:
            left_id, right_id = self.scenario.link_ends(profile.link_index)
            ends[profile.link_index] = (self.nodes[left_id].endpoints["right"],
                                        self.nodes[right_id].endpoints["left"])
        return ends

    def sender_tables(self) -> Dict[int, KeyTable]:
        return {link: ends[0].table for link, ends in self.link_endpoints().items()}

    def inject_outage(self, outage: Outage) -> None:
        """登记经典信道中断；零时长中断不产生任何事件"""
        if outage.end_s <= outage.start_s:
            self.logger.info(f"忽略零时长中断: {outage}")
            return
        self.outages.append(outage)

    # ---- 事件记录 ---- #
    def _note(self, kind: SimEventKind, now: float, /, **payload) -> None:
        self.event_counts[kind.value] += 1
        if self.trace:
            self.events.append(SimEvent(now, kind, payload))

    # ---- 报文投递 ---- #
    def _pair_key(self, a: str, b: str) -> Tuple[str, str]:
        ids = self.scenario.node_ids()
        return tuple(sorted((a, b), key=ids.index))

    def route(self, node_id: str, outbound: List[Outbound]) -> None:
        for out in outbound:
            dest, dest_channel = self.routes[(node_id, out.channel)]
            self.event_counts["messages_sent"] += 1
            self.env.process(self._deliver_later(node_id, out.channel, dest, dest_channel, out.frame))

    def _deliver_later(self, source: str, source_channel: str, dest: str, dest_channel: str, frame: bytes):
        yield self.env.timeout(self.scenario.hop_delay_s)
        self._deliver(source, source_channel, dest, dest_channel, frame)

    def _deliver(self, source: str, source_channel: str, dest: str, dest_channel: str, frame: bytes) -> None:
        if source_channel in ("left", "right"):
            key = self._pair_key(source, dest)
            if self.pair_down[key] > 0:
                self.queued[key].append((source, source_channel, dest, dest_channel, frame))
                self.event_counts["messages_queued"] += 1
                return
        self._note(SimEventKind.DELIVER, self.env.now, source=source, dest=dest, channel=dest_channel)
        out = self.nodes[dest].receive(dest_channel, frame, self.env.now)
        self.route(dest, out)

    # ---- 周期动作 ---- #
    def _link_cycle(self, link: int, now: float) -> None:
        emulator = self.emulators[link]
        keys_before = emulator.states[0].keys_emitted
        cycle = emulator.step(now)
        keys = emulator.states[0].keys_emitted - keys_before
        if self.checks:
            self.checker.on_cycle(link, cycle.qber_pct, cycle.skr_bps)
        self.telemetry.record(link_cycle_point(emulator, cycle, keys, self.scenario.epoch_ns + to_ns(now)))
        self._note(SimEventKind.LINK_CYCLE, now, link=link)

    def _poll(self, node_id: str, now: float) -> None:
        node = self.nodes[node_id]
        self.route(node_id, node.poll(now))
        self.route(node_id, node.tick(now))
        self._note(SimEventKind.POLL_TICK, now, node=node_id)

    def _report(self, node_id: str, now: float) -> None:
        self.route(node_id, self.nodes[node_id].report(now))
        self._note(SimEventKind.REPORT_TICK, now, node=node_id)

    def _checkpoint(self, now: float) -> None:
        self.checker.checkpoint(now)
        self._note(SimEventKind.CHECKPOINT, now)

    def _reporting_targets(self, outage: Outage) -> List[str]:
        ids = self.scenario.node_ids()
        return ids[1:] if outage.node == "*" else [outage.node]

    def _outage_start(self, outage: Outage, now: float) -> None:
        self.logger.info(f"t={now:.2f} 经典信道中断开始: {outage.kind} {outage.nodes or outage.node}")
        if outage.kind == "pair":
            left, right = outage.nodes
            self.pair_down[(left, right)] += 1
            self.route(left, self.nodes[left].peer_down("right", now))
            self.route(right, self.nodes[right].peer_down("left", now))
        else:
            for node_id in self._reporting_targets(outage):
                self.report_down[node_id] += 1
                self.route(node_id, self.nodes[node_id].peer_down("nm", now))
        self._note(SimEventKind.OUTAGE_START, now, kind=outage.kind)

    def _outage_end(self, outage: Outage, now: float) -> None:
        self.logger.info(f"t={now:.2f} 经典信道中断结束: {outage.kind} {outage.nodes or outage.node}")
        if outage.kind == "pair":
            key = tuple(outage.nodes)
            self.pair_down[key] -= 1
            if self.pair_down[key] == 0:
                left, right = key
                self.route(left, self.nodes[left].peer_up("right", now))
                self.route(right, self.nodes[right].peer_up("left", now))
                released, self.queued[key] = self.queued[key], []
                for item in released:
                    self._deliver(*item)
        else:
            for node_id in self._reporting_targets(outage):
                self.report_down[node_id] -= 1
                if self.report_down[node_id] == 0:
                    self.route(node_id, self.nodes[node_id].peer_up("nm", now))
        self._note(SimEventKind.OUTAGE_END, now, kind=outage.kind)

    # ---- 调度 ---- #
    def _periodic_activities(self) -> List[PeriodicActivity]:
        scenario = self.scenario
        activities = []
        for order, profile in enumerate(scenario.links):
            link = profile.link_index
            activities.append(PeriodicActivity(profile.cycle_period_s, RANK_LINK, order,
                                        lambda now, link=link: self._link_cycle(link, now)))
        for order, node_id in enumerate(scenario.node_ids()):
            activities.append(PeriodicActivity(scenario.poll_period_s, RANK_POLL, order,
                                        lambda now, node_id=node_id: self._poll(node_id, now)))
            activities.append(PeriodicActivity(scenario.report_period_s, RANK_REPORT, order,
                                        lambda now, node_id=node_id: self._report(node_id, now)))
        if self.checks:
            activities.append(PeriodicActivity(scenario.checkpoint_period_s, RANK_CHECKPOINT, 0, self._checkpoint,
                                        offset=CHECKPOINT_OFFSET_S, k=0))
        return activities

    def _boundaries(self) -> List[Tuple[int, int, int, Callable[[float], None]]]:
        entries = []
        for order, outage in enumerate(self.outages):
            entries.append((to_ns(outage.start_s), RANK_BOUNDARY, 2 * order,
                            lambda now, o=outage: self._outage_start(o, now)))
            entries.append((to_ns(outage.end_s), RANK_BOUNDARY, 2 * order + 1,
                            lambda now, o=outage: self._outage_end(o, now)))
        base = 2 * len(self.outages)
        for order, window in enumerate(self.scenario.disturbances):
            entries.append((to_ns(window.start_s), RANK_BOUNDARY, base + 2 * order,
                            lambda now, w=window: self._note(SimEventKind.DISTURB_START, now, link=w.link_index)))
            entries.append((to_ns(window.end_s), RANK_BOUNDARY, base + 2 * order + 1,
                            lambda now, w=window: self._note(SimEventKind.DISTURB_END, now, link=w.link_index)))
        return entries

    def _driver(self):
        """按 (时间, 类别, 顺序) 依次触发周期事件与边界事件"""
        limit_ns = to_ns(self.scenario.duration_s)
        heap = []
        activities = self._periodic_activities()
        for position, activity in enumerate(activities):
            if to_ns(activity.time()) <= limit_ns:
                heap.append((to_ns(activity.time()), activity.rank, activity.order, position, activity.action))
        for t_ns, rank, order, action in self._boundaries():
            heap.append((t_ns, rank, order, -1, action))
        heapq.heapify(heap)

        while heap:
            t_ns, rank, order, position, action = heapq.heappop(heap)
            now = t_ns / 1e9
            if now > self.env.now:
                yield self.env.timeout(now - self.env.now)
            action(now)
            if position >= 0:
                activity = activities[position]
                activity.k += 1
                next_ns = to_ns(activity.time())
                if next_ns <= limit_ns:
                    heapq.heappush(heap, (next_ns, rank, order, position, action))

    def run(self) -> "SimReport":
        """运行到场景时长，随后排空经典信道使网络静止"""
        self.logger.info(f"开始仿真 {self.scenario.name}: 时长 {self.scenario.duration_s}s, 种子 {self.scenario.seed}")
        self.env.process(self._driver())
        self.env.run()
        for node in self.nodes.values():
            node.poll_links()
        if self.checks:
            self.checker.checkpoint(self.env.now, final=True)
        report = SimReport(self)
        self.logger.info(f"仿真结束: 批次 {len(self.nm.batches)}, EN 网络密钥 {report.nk_delivered}, "
                         f"事件 {dict(self.event_counts)}")
        return report


# ------------------------------------------------------------------ #
# 运行结果
# ------------------------------------------------------------------ #
def _table_stats(table: KeyTable) -> Dict:
    return {
        "records": len(table.records),
        "available": available(table),
        "used": table.count(KeyStatus.USED),
        "compromised": table.count(KeyStatus.COMPROMISED),
        "burned": table.burned_total,
        "residual_bits": int(table.residual.size),
        "digest": table_digest(table, with_status=True).hex(),
    }


def _series_stats(points: List[SeriesPoint], field_name: str) -> Tuple[Optional[float], Optional[float]]:
    try:
        stats = summarize(points, field_name)
    except EmptySeries:
        return None, None
    return stats.mean, stats.std


def scenario_info(scenario: Scenario) -> Dict:
    return {
        "name": scenario.name,
        "seed": scenario.seed,
        "duration_s": scenario.duration_s,
        "policy": {"T": scenario.policy.T, "R": scenario.policy.R},
        "hop_delay_s": scenario.hop_delay_s,
        "time_compression": scenario.time_compression,
        "outages": len(scenario.outages),
        "disturbances": len(scenario.disturbances),
        "faults": len(scenario.faults),
    }


def node_info(node: RelayNode) -> Dict:
    """单个节点的密钥表统计、计数器与组合摘要"""
    tables = {label: _table_stats(table) for label, table in sorted(node.tables().items())}
    combined = hashlib.sha256("".join(stats["digest"] for stats in tables.values()).encode("ascii"))
    return {
        "role": node.role.kind.value,
        "tables": tables,
        "counters": dict(sorted(node.counters.items())),
        "digest": combined.hexdigest(),
    }


def link_info(scenario: Scenario, link: int, telemetry: TelemetryStore,
              emulator: Optional[LinkEmulator] = None) -> Dict:
    """单条链路的统计；两端的馈送计数由调用方填入 feeds"""
    profile = scenario.link(link)
    cycles = telemetry.select("link_cycle", link=str(link))
    skr_mean, skr_std = _series_stats(cycles, "skr_bps")
    qber_mean, qber_std = _series_stats(cycles, "qber_pct")
    entry = {
        "protocol": profile.protocol_tag.value,
        "delivery": profile.delivery.value,
        "length_km": profile.length_km,
        "loss_db": profile.loss_db,
        "ends": list(scenario.link_ends(link)),
        "skr_mean": skr_mean,
        "skr_std": skr_std,
        "qber_mean": qber_mean,
        "qber_std": qber_std,
        "compromised_cycles": sum(int(p.fields.get("compromised", 0)) for p in cycles),
        "feeds": {},
    }
    if emulator is not None:
        entry.update(emulator.counters())
    else:
        entry["cycles"] = len(cycles)
    return entry


def batch_info(batches: List[BatchRecord]) -> Dict:
    return {
        "triggered": len(batches),
        "completed": sum(1 for batch in batches if batch.status == "complete"),
        "h_values": [batch.h for batch in batches],
        "trigger_times": [batch.started_t for batch in batches],
        "shortfall": sum(max(batch.shortfall, 0) for batch in batches if batch.received is not None),
    }


def assemble_summary(scenario: Scenario, nodes: Dict[str, Dict], links: Dict[str, Dict],
                     batches: Dict, event_counts: Dict[str, int], telemetry: TelemetryStore) -> Dict:
    """由各部分拼出运行汇总；网络密钥速率 = EN 收到的网络密钥数 / 运行时长"""
    edge_id = scenario.node_ids()[-1]
    nk_delivered = nodes[edge_id]["tables"].get(TableScope.network_keys().label, {}).get("records", 0)
    rate = nk_delivered / scenario.duration_s if scenario.duration_s > 0 else 0.0
    return {
        "scenario": scenario_info(scenario),
        "nodes": {node_id: nodes[node_id] for node_id in scenario.node_ids() if node_id in nodes},
        "links": links,
        "batches": batches,
        "nk_delivered": nk_delivered,
        "network_key_rate_keys_per_s": rate,
        "network_key_rate_bps": rate * KEY_BITS,
        "events": dict(sorted(event_counts.items())),
        "telemetry": {"points": len(telemetry), "rejected": telemetry.rejected},
    }


def build_summary(scenario: Scenario, nodes: Dict[str, RelayNode], emulators: Dict[int, LinkEmulator],
                  telemetry: TelemetryStore, event_counts: Dict[str, int]) -> Dict:
    """
    运行汇总（仿真与真实模式共用同一结构）

    只包含虚拟时间与计数，同一场景与种子得到逐字节相同的结果。
    """
    links = {}
    for profile in scenario.links:
        link = profile.link_index
        left_id, right_id = scenario.link_ends(link)
        entry = link_info(scenario, link, telemetry, emulators.get(link))
        entry["feeds"] = {
            left_id: nodes[left_id].endpoints["right"].counters.as_dict(),
            right_id: nodes[right_id].endpoints["left"].counters.as_dict(),
        }
        links[str(link)] = entry
    nm = nodes[scenario.node_ids()[0]]
    return assemble_summary(
        scenario,
        {node_id: node_info(node) for node_id, node in nodes.items()},
        links,
        batch_info(list(getattr(nm, "batches", []))),
        event_counts,
        telemetry,
    )


class SimReport:
    """一次仿真的结果：汇总、遥测、台账、报文日志与密钥表"""

    def __init__(self, network: SimNetwork):
        self.network = network
        self.scenario = network.scenario
        self.nodes = network.nodes
        self.telemetry = network.telemetry
        self.checkpoints = network.checker.checkpoints
        self.summary = build_summary(self.scenario, self.nodes, network.emulators,
                                     self.telemetry, network.event_counts)

    @property
    def nk_delivered(self) -> int:
        return self.summary["nk_delivered"]

    @property
    def network_key_rate(self) -> float:
        return self.summary["network_key_rate_keys_per_s"]

    @property
    def batches(self) -> List[BatchRecord]:
        return list(self.network.nm.batches)

    def digest(self) -> str:
        """汇总的规范摘要，用于确定性比较"""
        text = json.dumps(self.summary, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def write(self, out_dir: str) -> List[str]:
        return write_bundle(
            out_dir,
            self.summary,
            self.telemetry,
            {node_id: node.ledger.rows() for node_id, node in self.nodes.items()},
            {node_id: node.wire_log for node_id, node in self.nodes.items()},
            {node_id: node.tables() for node_id, node in self.nodes.items()},
            [batch.to_row() for batch in self.batches],
        )


def run_sim(scenario: Scenario, checks: bool = True, trace: bool = False) -> SimReport:
    """
    运行一次确定性仿真

    Raises:
        InvariantViolation: 任一不变量被违反时中止
    """
    return SimNetwork(scenario, checks=checks, trace=trace).run()
