# -*- coding: utf-8 -*-
"""
场景配置模块
加载并校验 JSON 场景文件：拓扑、链路参数、扰动窗口、经典信道中断与故障注入。
校验会收集全部错误后一次性报告。
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from relay.keycore import NetworkKeySource
from relay.qkdlink import DeliveryMode, DisturbanceWindow, LinkProfile, ProtocolTag, default_profiles
from relay.relayproto import (
    DEFAULT_BATCH_TIMEOUT_S,
    DEFAULT_RESERVE,
    DEFAULT_THRESHOLD,
    FAULT_KINDS,
    Fault,
    NodeRole,
    RoleKind,
    TransferPolicy,
)
from utils.error_handler import ScenarioError

logger = logging.getLogger(__name__)

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIO_DIR = os.path.join(ROOT_DIR, "scenarios")

DEFAULT_HOP_DELAY_S = 0.05
DEFAULT_POLL_PERIOD_S = 1.0
DEFAULT_REPORT_PERIOD_S = 1.0
DEFAULT_CHECKPOINT_PERIOD_S = 10.0
DEFAULT_BASE_PORT = 47100
DEFAULT_HOST = "127.0.0.1"

REQUIRED_FIELDS = ("duration_s", "seed", "nodes", "links")
OPTIONAL_FIELDS = ("name", "description", "time_compression", "policy", "hop_delay_s", "poll_period_s",
                   "report_period_s", "checkpoint_period_s", "batch_timeout_s", "epoch_ns",
                   "disturbances", "outages", "faults", "network")
LINK_FIELDS = ("link_index", "profile", "protocol", "length_km", "loss_db", "skr_mean_bps", "skr_std_bps",
               "qber_mean_pct", "qber_std_pct", "delivery", "cycle_period_s", "compromise_threshold_pct")
DISTURBANCE_FIELDS = ("link", "start_s", "end_s", "qber_add_pct", "skr_scale")
OUTAGE_FIELDS = ("kind", "nodes", "node", "start_s", "end_s")
FAULT_FIELDS = ("kind", "link", "batch", "index")
ROLE_NAMES = {"NM": RoleKind.NETWORK_MANAGER, "TN": RoleKind.TRUSTED_NODE, "EN": RoleKind.EDGE_NODE}


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    role: NodeRole


@dataclass(frozen=True)
class Outage:
    """经典信道中断: kind='pair' 为相邻节点之间，kind='reporting' 为节点到 NM 的上报信道（node='*' 表示全部）"""

    kind: str
    start_s: float
    end_s: float
    nodes: Tuple[str, ...] = ()
    node: str = ""


@dataclass
class Scenario:
    name: str
    duration_s: float
    seed: int
    nodes: List[NodeSpec]
    links: List[LinkProfile]
    policy: TransferPolicy = field(default_factory=TransferPolicy)
    disturbances: List[DisturbanceWindow] = field(default_factory=list)
    outages: List[Outage] = field(default_factory=list)
    faults: List[Dict[str, int]] = field(default_factory=list)
    time_compression: float = 1.0
    hop_delay_s: float = DEFAULT_HOP_DELAY_S
    poll_period_s: float = DEFAULT_POLL_PERIOD_S
    report_period_s: float = DEFAULT_REPORT_PERIOD_S
    checkpoint_period_s: float = DEFAULT_CHECKPOINT_PERIOD_S
    batch_timeout_s: float = DEFAULT_BATCH_TIMEOUT_S
    epoch_ns: int = 0
    description: str = ""
    network: Dict[str, Any] = field(default_factory=dict)
    source: str = ""

    def node_ids(self) -> List[str]:
        return [node.node_id for node in self.nodes]

    def node(self, node_id: str) -> NodeSpec:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise KeyError(node_id)

    def link(self, link_index: int) -> LinkProfile:
        for profile in self.links:
            if profile.link_index == link_index:
                return profile
        raise KeyError(link_index)

    def link_ends(self, link_index: int) -> Tuple[str, str]:
        """链路两端节点 (左端, 右端)"""
        return self.nodes[link_index - 1].node_id, self.nodes[link_index].node_id

    def link_reporters(self) -> Dict[int, str]:
        """链路编号 ≥ 2 → 左端节点（NM 用其上报的可用量触发传输）"""
        return {profile.link_index: self.link_ends(profile.link_index)[0]
                for profile in self.links if profile.link_index >= 2}

    def make_faults(self) -> List[Fault]:
        return [Fault(item["kind"], item["link"], item["batch"], item["index"]) for item in self.faults]

    # ---- 派生密钥材料 ---- #
    def psk(self, channel: str) -> bytes:
        """信道预共享认证密钥，由场景种子派生"""
        return hashlib.sha256(f"psk:{self.seed}:{channel}".encode("utf-8")).digest()

    def nk_source(self) -> NetworkKeySource:
        return NetworkKeySource.from_seed_text(str(self.seed))

    @staticmethod
    def pair_channel(a: str, b: str) -> str:
        return f"pair:{a}-{b}"

    @staticmethod
    def report_channel(node_id: str) -> str:
        return f"report:{node_id}"


# ------------------------------------------------------------------ #
# 校验
# ------------------------------------------------------------------ #
def _number(entry: Dict, key: str, where: str, errors: List[str], default=None, minimum=None):
    value = entry.get(key, default)
    if value is None:
        errors.append(f"{where}.{key} 缺失")
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{where}.{key} 必须是数值: {value!r}")
        return None
    if minimum is not None and value < minimum:
        errors.append(f"{where}.{key} 必须 ≥ {minimum}: {value}")
        return None
    return value


def _unknown_keys(entry: Dict, allowed: Tuple[str, ...], where: str, errors: List[str]) -> None:
    for key in sorted(set(entry) - set(allowed)):
        errors.append(f"{where} 存在未知字段: {key}")


def _parse_link(entry: Any, position: int, errors: List[str]) -> Optional[LinkProfile]:
    where = f"links[{position}]"
    if not isinstance(entry, dict):
        errors.append(f"{where} 必须是对象")
        return None
    _unknown_keys(entry, LINK_FIELDS, where, errors)
    link_index = entry.get("link_index", position + 1)
    if not isinstance(link_index, int) or isinstance(link_index, bool):
        errors.append(f"{where}.link_index 必须是整数")
        return None

    base: Dict[str, Any] = {}
    reference = entry.get("profile")
    if reference is not None:
        defaults = default_profiles()
        if reference != "default" or link_index not in defaults:
            errors.append(f"{where}.profile 引用无效: {reference!r}")
        else:
            base = defaults[link_index].to_dict()
    merged = dict(base)
    merged.update({k: v for k, v in entry.items() if k != "profile"})

    local_errors: List[str] = []
    try:
        protocol = ProtocolTag(merged.get("protocol", "BB84"))
    except ValueError:
        local_errors.append(f"{where}.protocol 未知: {merged.get('protocol')!r}")
        protocol = ProtocolTag.BB84
    try:
        delivery = DeliveryMode(merged.get("delivery", DeliveryMode.APPEND_FILE.value))
    except ValueError:
        local_errors.append(f"{where}.delivery 未知: {merged.get('delivery')!r}")
        delivery = DeliveryMode.APPEND_FILE

    numbers = {key: _number(merged, key, where, local_errors)
               for key in ("length_km", "loss_db", "skr_mean_bps", "skr_std_bps",
                           "qber_mean_pct", "qber_std_pct", "cycle_period_s")}
    threshold = _number(merged, "compromise_threshold_pct", where, local_errors, default=13.0)
    errors.extend(local_errors)
    if local_errors:
        return None

    profile = LinkProfile(link_index, protocol, float(numbers["length_km"]), float(numbers["loss_db"]),
                          float(numbers["skr_mean_bps"]), float(numbers["skr_std_bps"]),
                          float(numbers["qber_mean_pct"]), float(numbers["qber_std_pct"]),
                          delivery, float(numbers["cycle_period_s"]), float(threshold))
    profile_errors = profile.validate()
    errors.extend(profile_errors)
    return None if profile_errors else profile


def _parse_nodes(raw: Any, errors: List[str]) -> List[NodeSpec]:
    if not isinstance(raw, list) or len(raw) < 2:
        errors.append("nodes 必须是至少包含 2 个节点的列表")
        return []
    count = len(raw)
    nodes, seen = [], set()
    for position, entry in enumerate(raw):
        where = f"nodes[{position}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} 必须是对象")
            continue
        _unknown_keys(entry, ("node_id", "role"), where, errors)
        node_id = entry.get("node_id")
        if not isinstance(node_id, str) or not node_id:
            errors.append(f"{where}.node_id 缺失")
            continue
        if node_id in seen:
            errors.append(f"{where}.node_id 重复: {node_id}")
        seen.add(node_id)

        expected = "NM" if position == 0 else "EN" if position == count - 1 else "TN"
        role_name = entry.get("role")
        if role_name != expected:
            errors.append(f"{where}.role 应为 {expected}（线性拓扑），实际 {role_name!r}")
            continue
        role = NodeRole(ROLE_NAMES[role_name],
                        None if position == 0 else position,
                        None if position == count - 1 else position + 1)
        role_errors = role.validate()
        errors.extend(f"{where}: {item}" for item in role_errors)
        nodes.append(NodeSpec(node_id, role))
    return nodes


def _parse_windows(raw: Any, duration: float, link_count: int, errors: List[str]) -> List[DisturbanceWindow]:
    windows = []
    for position, entry in enumerate(raw or []):
        where = f"disturbances[{position}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} 必须是对象")
            continue
        _unknown_keys(entry, DISTURBANCE_FIELDS, where, errors)
        local: List[str] = []
        link = _number(entry, "link", where, local)
        start = _number(entry, "start_s", where, local)
        end = _number(entry, "end_s", where, local)
        qber_add = _number(entry, "qber_add_pct", where, local, default=0.0)
        scale = _number(entry, "skr_scale", where, local, default=1.0)
        errors.extend(local)
        if local:
            continue
        if not 1 <= link <= link_count:
            errors.append(f"{where}.link 不存在: {link}")
        if not start < end:
            errors.append(f"{where} 时间范围错误: start_s={start} 必须小于 end_s={end}")
        elif start < 0 or end > duration:
            errors.append(f"{where} 超出运行时长 [0, {duration}]")
        if not 0.0 <= scale <= 1.0:
            errors.append(f"{where}.skr_scale 必须在 [0, 1] 内: {scale}")
        windows.append(DisturbanceWindow(int(link), float(start), float(end), float(qber_add), float(scale)))
    return windows


def _parse_outages(raw: Any, duration: float, nodes: List[NodeSpec], errors: List[str]) -> List[Outage]:
    node_ids = [node.node_id for node in nodes]
    outages = []
    for position, entry in enumerate(raw or []):
        where = f"outages[{position}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} 必须是对象")
            continue
        _unknown_keys(entry, OUTAGE_FIELDS, where, errors)
        local: List[str] = []
        start = _number(entry, "start_s", where, local, minimum=0)
        end = _number(entry, "end_s", where, local)
        errors.extend(local)
        if local:
            continue
        if end < start:
            errors.append(f"{where} 时间范围错误: end_s={end} 小于 start_s={start}")
        elif end > duration:
            errors.append(f"{where} 超出运行时长 [0, {duration}]")

        kind = entry.get("kind")
        if kind == "pair":
            pair = entry.get("nodes")
            if (not isinstance(pair, list) or len(pair) != 2 or any(n not in node_ids for n in pair)
                    or abs(node_ids.index(pair[0]) - node_ids.index(pair[1])) != 1):
                errors.append(f"{where}.nodes 必须是两个相邻节点: {pair!r}")
                continue
            left, right = sorted(pair, key=node_ids.index)
            outages.append(Outage("pair", float(start), float(end), nodes=(left, right)))
        elif kind == "reporting":
            node = entry.get("node")
            if node != "*" and (node not in node_ids or node == node_ids[0]):
                errors.append(f"{where}.node 必须是非 NM 节点或 '*': {node!r}")
                continue
            outages.append(Outage("reporting", float(start), float(end), node=node))
        else:
            errors.append(f"{where}.kind 必须是 'pair' 或 'reporting': {kind!r}")
    return outages


def _parse_faults(raw: Any, link_count: int, errors: List[str]) -> List[Dict[str, int]]:
    faults = []
    for position, entry in enumerate(raw or []):
        where = f"faults[{position}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} 必须是对象")
            continue
        _unknown_keys(entry, FAULT_FIELDS, where, errors)
        if entry.get("kind") not in FAULT_KINDS:
            errors.append(f"{where}.kind 必须是 {FAULT_KINDS} 之一: {entry.get('kind')!r}")
            continue
        local: List[str] = []
        values = {key: _number(entry, key, where, local, minimum=0) for key in ("link", "batch", "index")}
        errors.extend(local)
        if local:
            continue
        if not 1 <= values["link"] <= link_count:
            errors.append(f"{where}.link 不存在: {values['link']}")
            continue
        faults.append({"kind": entry["kind"], **{k: int(v) for k, v in values.items()}})
    return faults


def parse_scenario(data: Any, source: str = "") -> Scenario:
    """
    校验场景字典

    Raises:
        ScenarioError: 包含全部校验错误
    """
    if not isinstance(data, dict):
        raise ScenarioError([f"场景必须是 JSON 对象，缺少必要字段: {', '.join(REQUIRED_FIELDS)}"], source)

    errors: List[str] = []
    missing_fields = [key for key in REQUIRED_FIELDS if key not in data]
    if missing_fields:
        errors.append(f"缺少必要字段: {', '.join(missing_fields)}")
    _unknown_keys(data, REQUIRED_FIELDS + OPTIONAL_FIELDS, "scenario", errors)

    duration = _number(data, "duration_s", "scenario", [], minimum=0) if "duration_s" in data else None
    if "duration_s" in data and duration is None:
        errors.append(f"scenario.duration_s 必须是非负数值: {data['duration_s']!r}")
    seed = data.get("seed")
    if "seed" in data and (not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64):
        errors.append(f"scenario.seed 必须是 64 位无符号整数: {seed!r}")

    nodes = _parse_nodes(data["nodes"], errors) if "nodes" in data else []
    links: List[LinkProfile] = []
    if "links" in data:
        if not isinstance(data["links"], list):
            errors.append("links 必须是列表")
        else:
            links = [p for p in (_parse_link(e, i, errors) for i, e in enumerate(data["links"])) if p]
            indices = sorted(p.link_index for p in links)
            if nodes and len(data["links"]) != len(nodes) - 1:
                errors.append(f"拓扑不一致: {len(nodes)} 个节点需要 {len(nodes) - 1} 条链路，"
                              f"实际 {len(data['links'])} 条")
            elif indices and indices != list(range(1, len(indices) + 1)):
                errors.append(f"链路编号必须为 1..N 连续: {indices}")

    policy = TransferPolicy()
    raw_policy = data.get("policy", {})
    if not isinstance(raw_policy, dict):
        errors.append("policy 必须是对象")
    else:
        _unknown_keys(raw_policy, ("T", "R"), "policy", errors)
        try:
            policy = TransferPolicy(int(raw_policy.get("T", DEFAULT_THRESHOLD)),
                                    int(raw_policy.get("R", DEFAULT_RESERVE)))
        except (TypeError, ValueError) as e:
            errors.append(f"policy 无效: {e}")

    timing = {}
    for key, default in (("hop_delay_s", DEFAULT_HOP_DELAY_S), ("poll_period_s", DEFAULT_POLL_PERIOD_S),
                         ("report_period_s", DEFAULT_REPORT_PERIOD_S),
                         ("checkpoint_period_s", DEFAULT_CHECKPOINT_PERIOD_S),
                         ("batch_timeout_s", DEFAULT_BATCH_TIMEOUT_S)):
        value = _number(data, key, "scenario", errors, default=default, minimum=0)
        timing[key] = float(value if value is not None else default)
    for key in ("poll_period_s", "report_period_s", "checkpoint_period_s"):
        if timing[key] <= 0:
            errors.append(f"scenario.{key} 必须 > 0")
    compression = _number(data, "time_compression", "scenario", errors, default=1.0, minimum=1.0)

    duration_value = float(duration) if duration is not None else 0.0
    windows = _parse_windows(data.get("disturbances"), duration_value, len(links), errors)
    outages = _parse_outages(data.get("outages"), duration_value, nodes, errors)
    faults = _parse_faults(data.get("faults"), len(links), errors)
    network = data.get("network", {})
    if not isinstance(network, dict):
        errors.append("network 必须是对象")
        network = {}

    if errors:
        raise ScenarioError(errors, source)
    return Scenario(
        name=str(data.get("name", os.path.splitext(os.path.basename(source))[0] or "scenario")),
        duration_s=duration_value,
        seed=int(seed),
        nodes=nodes,
        links=sorted(links, key=lambda p: p.link_index),
        policy=policy,
        disturbances=windows,
        outages=outages,
        faults=faults,
        time_compression=float(compression if compression is not None else 1.0),
        epoch_ns=int(data.get("epoch_ns", 0)),
        description=str(data.get("description", "")),
        network=dict(network),
        source=source,
        **timing,
    )


def load_scenario(text: str, source: str = "") -> Scenario:
    """从 JSON 文本加载场景；空文本报告全部必要字段缺失"""
    if not text.strip():
        raise ScenarioError([f"场景文件为空，缺少必要字段: {', '.join(REQUIRED_FIELDS)}"], source)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError([f"JSON 解析失败（第 {e.lineno} 行）: {e.msg}"], source) from e
    return parse_scenario(data, source)


def resolve_scenario_path(name_or_path: str) -> str:
    """内置场景名或文件路径 → 文件路径"""
    if os.path.exists(name_or_path):
        return name_or_path
    bundled = os.path.join(SCENARIO_DIR, f"{name_or_path}.json")
    if os.path.exists(bundled):
        return bundled
    raise FileNotFoundError(2, "场景文件不存在", name_or_path)


def load_scenario_file(name_or_path: str) -> Scenario:
    path = resolve_scenario_path(name_or_path)
    logger.debug(f"加载场景文件: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read(), path)


def bundled_scenarios() -> List[str]:
    if not os.path.isdir(SCENARIO_DIR):
        return []
    return sorted(os.path.splitext(name)[0] for name in os.listdir(SCENARIO_DIR) if name.endswith(".json"))


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    """序列化为场景 JSON 结构（scenario-init 使用）"""
    role_names = {kind: name for name, kind in ROLE_NAMES.items()}
    data = {
        "name": scenario.name,
        "description": scenario.description,
        "duration_s": scenario.duration_s,
        "seed": scenario.seed,
        "time_compression": scenario.time_compression,
        "policy": {"T": scenario.policy.T, "R": scenario.policy.R},
        "hop_delay_s": scenario.hop_delay_s,
        "poll_period_s": scenario.poll_period_s,
        "report_period_s": scenario.report_period_s,
        "checkpoint_period_s": scenario.checkpoint_period_s,
        "batch_timeout_s": scenario.batch_timeout_s,
        "nodes": [{"node_id": node.node_id, "role": role_names[node.role.kind]} for node in scenario.nodes],
        "links": [profile.to_dict() for profile in scenario.links],
        "disturbances": [{"link": w.link_index, "start_s": w.start_s, "end_s": w.end_s,
                          "qber_add_pct": w.qber_add_pct, "skr_scale": w.skr_scale}
                         for w in scenario.disturbances],
        "outages": [{**({"kind": "pair", "nodes": list(o.nodes)} if o.kind == "pair"
                        else {"kind": "reporting", "node": o.node}),
                     "start_s": o.start_s, "end_s": o.end_s}
                    for o in scenario.outages],
        "faults": copy.deepcopy(scenario.faults),
    }
    if scenario.network:
        data["network"] = dict(scenario.network)
    return data


def default_scenario(name: str = "epb_table1", seed: int = 7, duration_s: float = 600.0) -> Scenario:
    """三链路四节点的实测参数场景"""
    profiles = default_profiles()
    return Scenario(
        name=name,
        duration_s=duration_s,
        seed=seed,
        nodes=[NodeSpec("NM", NodeRole(RoleKind.NETWORK_MANAGER, None, 1)),
               NodeSpec("TN1", NodeRole(RoleKind.TRUSTED_NODE, 1, 2)),
               NodeSpec("TN2", NodeRole(RoleKind.TRUSTED_NODE, 2, 3)),
               NodeSpec("EN", NodeRole(RoleKind.EDGE_NODE, 3, None))],
        links=[profiles[index] for index in sorted(profiles)],
        description="三条 QKD 链路的线性可信中继网络，T=60，R=20",
        network={"host": DEFAULT_HOST, "base_port": DEFAULT_BASE_PORT},
    )
