# -*- coding: utf-8 -*-
"""
QKD 链路仿真模块
按统计模型生成三套 QKD 系统的成码输出，并复现各自的交付方式：
串口数据包流（QIX 帧）、追加写密钥文件、整体重写密钥文件；
同时提供两端的文件/数据流监视与入表逻辑。
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import crcmod.predefined
import numpy as np
from construct import Bytes, Const, Int8ub, Int32ub, Struct

from relay.keycore import KEY_BITS, KEY_BYTES, KeyRecord, KeyStatus, KeyTable, bits_from_bytes, ingest_bits
from utils.error_handler import BadCrc, BadMagic, FrameError, SinkWriteError

logger = logging.getLogger(__name__)

DEFAULT_COMPROMISE_THRESHOLD_PCT = 13.0
QBER_CEILING_PCT = float(np.nextafter(50.0, 0.0))
TRUNCATION_ATTEMPTS = 64

QIX_MAGIC = b"QIX"
QIX_VERSION = 0x01
QIX_FRAME_SIZE = 45


class ProtocolTag(Enum):
    BBM92 = "BBM92"
    BB84 = "BB84"
    SARG04 = "SARG04"


class DeliveryMode(Enum):
    PACKET_STREAM = "PacketStream"
    APPEND_FILE = "AppendFile"
    REWRITE_FILE = "RewriteFile"


class QixStatus(IntEnum):
    SECURE = 0x00
    COMPROMISED = 0x01


@dataclass
class LinkProfile:
    """单条 QKD 链路的统计描述"""

    link_index: int
    protocol_tag: ProtocolTag
    length_km: float
    loss_db: float
    skr_mean_bps: float
    skr_std_bps: float
    qber_mean_pct: float
    qber_std_pct: float
    delivery: DeliveryMode
    cycle_period_s: float
    compromise_threshold_pct: float = DEFAULT_COMPROMISE_THRESHOLD_PCT

    def validate(self) -> List[str]:
        """返回全部校验错误（空列表表示合法）"""
        errors = []
        prefix = f"links[{self.link_index}]"
        if self.link_index < 1:
            errors.append(f"{prefix}.link_index 必须 ≥ 1")
        if not self.skr_mean_bps > 0:
            errors.append(f"{prefix}.skr_mean_bps 必须 > 0")
        if self.skr_std_bps < 0 or self.qber_std_pct < 0:
            errors.append(f"{prefix} 标准差不能为负")
        if not 0 <= self.qber_mean_pct < 50:
            errors.append(f"{prefix}.qber_mean_pct 必须在 [0, 50) 内")
        if self.loss_db < 0:
            errors.append(f"{prefix}.loss_db 不能为负")
        if self.length_km < 0:
            errors.append(f"{prefix}.length_km 不能为负")
        if not self.cycle_period_s > 0:
            errors.append(f"{prefix}.cycle_period_s 必须 > 0")
        return errors

    def to_dict(self) -> Dict:
        return {
            "link_index": self.link_index,
            "protocol": self.protocol_tag.value,
            "length_km": self.length_km,
            "loss_db": self.loss_db,
            "skr_mean_bps": self.skr_mean_bps,
            "skr_std_bps": self.skr_std_bps,
            "qber_mean_pct": self.qber_mean_pct,
            "qber_std_pct": self.qber_std_pct,
            "delivery": self.delivery.value,
            "cycle_period_s": self.cycle_period_s,
            "compromise_threshold_pct": self.compromise_threshold_pct,
        }


def default_profiles() -> Dict[int, LinkProfile]:
    """
    实测链路参数：链路 1 为固定速率（每 2 秒一个 256 比特密钥）

    链路 1 的 QIX 包只给安全/泄露状态，没有 QBER 实测值，取 2.5±0.5 % 作默认值。
    """
    return {
        1: LinkProfile(1, ProtocolTag.BBM92, 3.4, 1.3, 128.0, 0.0, 2.5, 0.5,
                       DeliveryMode.PACKET_STREAM, 2.0),
        2: LinkProfile(2, ProtocolTag.BB84, 10.2, 3.1, 1310.0, 150.0, 3.9, 1.3,
                       DeliveryMode.APPEND_FILE, 1.0),
        3: LinkProfile(3, ProtocolTag.SARG04, 8.3, 2.9, 1892.0, 126.0, 1.4, 0.1,
                       DeliveryMode.REWRITE_FILE, 10.0),
    }


@dataclass(frozen=True)
class DisturbanceWindow:
    link_index: int
    start_s: float
    end_s: float
    qber_add_pct: float = 0.0
    skr_scale: float = 1.0

    def is_active(self, now_s: float) -> bool:
        return self.start_s <= now_s < self.end_s


@dataclass
class CycleOutput:
    key_bits: np.ndarray
    qber_pct: float
    skr_bps: float
    t: float = 0.0


def link_rng(seed: int, link_index: int) -> np.random.Generator:
    """每条链路独立的随机数流，由 (场景种子, 链路编号) 派生"""
    return np.random.default_rng([int(seed), int(link_index)])


def _truncated_gaussian(rng: np.random.Generator, mean: float, std: float) -> float:
    if std <= 0:
        return min(max(mean, 0.0), QBER_CEILING_PCT)
    for _ in range(TRUNCATION_ATTEMPTS):
        value = rng.normal(mean, std)
        if 0.0 <= value < 50.0:
            return float(value)
    return min(max(float(value), 0.0), QBER_CEILING_PCT)


def sample_cycle(profile: LinkProfile, windows: Sequence[DisturbanceWindow],
                 now_s: float, rng: np.random.Generator) -> CycleOutput:
    """
    采样一个成码周期

    qber 为截断高斯（叠加生效扰动窗口的增量）并限制在 [0, 50)，
    skr = max(0, 高斯) × 生效窗口缩放系数之积，
    密钥比特数 = round(skr × 周期)。
    """
    active = [w for w in windows if w.link_index == profile.link_index and w.is_active(now_s)]
    qber_mean = profile.qber_mean_pct + sum(w.qber_add_pct for w in active)
    scale = math.prod(w.skr_scale for w in active)

    if profile.skr_std_bps > 0:
        skr = max(0.0, float(rng.normal(profile.skr_mean_bps, profile.skr_std_bps)))
    else:
        skr = float(profile.skr_mean_bps)
    skr *= scale
    qber = _truncated_gaussian(rng, qber_mean, profile.qber_std_pct)

    bit_count = int(math.floor(skr * profile.cycle_period_s + 0.5))
    key_bits = rng.integers(0, 2, size=bit_count, dtype=np.uint8)
    return CycleOutput(key_bits, qber, skr, now_s)


# ------------------------------------------------------------------ #
# QIX 帧
# ------------------------------------------------------------------ #
_crc32 = crcmod.predefined.mkCrcFun("crc-32")

QixFrameFormat = Struct(
    "magic" / Const(QIX_MAGIC),
    "version" / Int8ub,
    "key_id" / Int32ub,
    "key" / Bytes(KEY_BYTES),
    "status" / Int8ub,
    "crc" / Int32ub,
)


@dataclass
class QixFrame:
    key_id: int
    key_bits: bytes
    status: QixStatus
    consumed: int = QIX_FRAME_SIZE


def encode_qix_frame(key_id: int, key: bytes, status: QixStatus = QixStatus.SECURE) -> bytes:
    body = bytes([QIX_VERSION]) + (key_id & 0xFFFFFFFF).to_bytes(4, "big") + bytes(key) + bytes([int(status)])
    return QIX_MAGIC + body + _crc32(body).to_bytes(4, "big")


def parse_qix_frame(data: bytes) -> QixFrame:
    """
    解析从帧边界开始的一个 QIX 帧

    Raises:
        BadMagic: 帧头不是 "QIX"
        BadCrc: CRC32 校验失败
        FrameError: 长度不足、版本或状态字节非法
    """
    if not bytes(data[:3]) == QIX_MAGIC:
        raise BadMagic(f"帧头错误: {bytes(data[:3]).hex()}")
    if len(data) < QIX_FRAME_SIZE:
        raise FrameError(f"帧长度不足: {len(data)}")
    parsed = QixFrameFormat.parse(bytes(data[:QIX_FRAME_SIZE]))
    if _crc32(bytes(data[3:41])) != parsed.crc:
        raise BadCrc(f"CRC 校验失败 key_id={parsed.key_id}", key_id=parsed.key_id)
    if parsed.version != QIX_VERSION:
        raise FrameError(f"不支持的帧版本: {parsed.version}")
    if parsed.status not in (QixStatus.SECURE, QixStatus.COMPROMISED):
        raise FrameError(f"未知状态字节: {parsed.status}")
    return QixFrame(parsed.key_id, bytes(parsed.key), QixStatus(parsed.status))


def scan_qix_stream(buffer: bytes) -> Tuple[List[QixFrame], int, List[FrameError]]:
    """
    从字节流中扫描全部完整帧

    损坏的帧被跳过，从下一个帧头处重新同步；末尾不完整的帧保留到下次。

    Returns:
        (frames, consumed, errors)
    """
    frames, errors = [], []
    position = 0
    size = len(buffer)
    while position < size:
        start = buffer.find(QIX_MAGIC, position)
        if start < 0:
            tail = max(position, size - (len(QIX_MAGIC) - 1))
            if tail > position:
                errors.append(BadMagic(f"跳过 {tail - position} 字节无效数据"))
            return frames, tail, errors
        if start > position:
            errors.append(BadMagic(f"跳过 {start - position} 字节无效数据"))
        if size - start < QIX_FRAME_SIZE:
            return frames, start, errors
        try:
            frames.append(parse_qix_frame(buffer[start:start + QIX_FRAME_SIZE]))
            position = start + QIX_FRAME_SIZE
        except FrameError as e:
            errors.append(e)
            position = start + 1
    return frames, position, errors


# ------------------------------------------------------------------ #
# 交付端（sink）
# ------------------------------------------------------------------ #
@dataclass
class Observation:
    """某一时刻的密钥文件/数据流观测: (长度, 身份标识, 内容)"""

    length: int
    identity: int
    content: bytes


class MemorySink:
    """仿真模式的内存交付端，generation 在整体替换时递增"""

    def __init__(self, name: str = ""):
        self.name = name
        self.content = bytearray()
        self.generation = 0
        self.stats: Dict[str, float] = {}
        self.fail_next_writes = 0

    def _check_failure(self) -> None:
        if self.fail_next_writes > 0:
            self.fail_next_writes -= 1
            raise SinkWriteError(f"{self.name} 写入失败（注入）")

    def append(self, data: bytes) -> None:
        self._check_failure()
        self.content.extend(data)

    def replace(self, data: bytes) -> None:
        self._check_failure()
        self.content = bytearray(data)
        self.generation += 1

    def publish_stats(self, skr_bps: float, qber_pct: float) -> None:
        self.stats = {"skr_bps": skr_bps, "qber_pct": qber_pct}

    def read_stats(self) -> Dict[str, float]:
        return dict(self.stats)

    def observe(self) -> Observation:
        return Observation(len(self.content), self.generation, bytes(self.content))


class FileSink:
    """
    真实模式的文件交付端

    追加模式直接写入并 flush；重写模式先写临时文件再 os.replace 原子替换；
    数据包流以只追加的抓包文件保存。SKR/QBER 写在旁路 .stats.json 文件中。
    """

    def __init__(self, path: str):
        self.path = path
        self.stats_path = f"{path}.stats.json"
        self.logger = logging.getLogger(__name__)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    def append(self, data: bytes) -> None:
        try:
            with open(self.path, "ab") as fh:
                fh.write(data)
                fh.flush()
        except OSError as e:
            raise SinkWriteError(f"追加写入失败: {self.path} - {e}") from e

    def replace(self, data: bytes) -> None:
        tmp_path = f"{self.path}.tmp"
        try:
            with open(tmp_path, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_path, self.path)
        except OSError as e:
            raise SinkWriteError(f"重写失败: {self.path} - {e}") from e

    def publish_stats(self, skr_bps: float, qber_pct: float) -> None:
        tmp_path = f"{self.stats_path}.tmp"
        try:
            with open(tmp_path, "w", encoding="utf-8") as fh:
                json.dump({"skr_bps": skr_bps, "qber_pct": qber_pct}, fh)
            os.replace(tmp_path, self.stats_path)
        except OSError as e:
            self.logger.warning(f"链路统计写入失败: {e}")

    def read_stats(self) -> Dict[str, float]:
        try:
            with open(self.stats_path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except (OSError, ValueError):
            return {}

    def observe(self) -> Observation:
        try:
            with open(self.path, "rb") as fh:
                identity = os.fstat(fh.fileno()).st_ino
                content = fh.read()
        except FileNotFoundError:
            return Observation(0, 0, b"")
        return Observation(len(content), identity, content)


# ------------------------------------------------------------------ #
# 发送端
# ------------------------------------------------------------------ #
@dataclass
class EmitterState:
    """单个交付端的发送状态：未凑满的比特、密钥编号、重写用的全量行、待重试数据"""

    pending: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    next_key_id: int = 0
    lines: List[bytes] = field(default_factory=list)
    backlog: List[bytes] = field(default_factory=list)
    backlog_bits: int = 0
    rewrite_dirty: bool = False
    bits_delivered: int = 0
    keys_emitted: int = 0
    write_failures: int = 0


def _chunk_keys(state: EmitterState, bits: np.ndarray) -> List[bytes]:
    stream = np.concatenate([state.pending, np.asarray(bits, dtype=np.uint8)])
    count = stream.size // KEY_BITS
    keys = [np.packbits(chunk).tobytes() for chunk in stream[:count * KEY_BITS].reshape(count, KEY_BITS)]
    state.pending = stream[count * KEY_BITS:].copy()
    return keys


def emit_delivery(profile: LinkProfile, cycle: CycleOutput, sink, state: EmitterState) -> int:
    """
    按链路交付方式把一个周期的成码写入交付端

    写入失败时数据保留到下个周期重试，不会丢弃。

    Returns:
        int: 本次成功交付的密钥数
    """
    keys = _chunk_keys(state, cycle.key_bits)
    compromised = cycle.qber_pct > profile.compromise_threshold_pct

    if profile.delivery is DeliveryMode.PACKET_STREAM:
        status = QixStatus.COMPROMISED if compromised else QixStatus.SECURE
        payload = b"".join(encode_qix_frame(state.next_key_id + i, key, status) for i, key in enumerate(keys))
    else:
        payload = b"".join(key.hex().encode("ascii") + b"\n" for key in keys)
    state.next_key_id += len(keys)
    state.keys_emitted += len(keys)

    try:
        sink.publish_stats(cycle.skr_bps, cycle.qber_pct)
    except SinkWriteError:
        pass

    if profile.delivery is DeliveryMode.REWRITE_FILE:
        state.lines.extend(key.hex().encode("ascii") + b"\n" for key in keys)
        state.backlog_bits += len(keys) * KEY_BITS
        if not keys and not state.rewrite_dirty:
            return 0
        try:
            sink.replace(b"".join(state.lines))
        except SinkWriteError as e:
            state.rewrite_dirty = True
            state.write_failures += 1
            logger.warning(f"链路 {profile.link_index} 重写失败，下个周期重试: {e}")
            return 0
        state.rewrite_dirty = False
    else:
        if not payload and not state.backlog:
            return 0
        state.backlog.append(payload)
        state.backlog_bits += len(keys) * KEY_BITS
        try:
            sink.append(b"".join(state.backlog))
        except SinkWriteError as e:
            state.write_failures += 1
            logger.warning(f"链路 {profile.link_index} 写入失败，下个周期重试: {e}")
            return 0
        state.backlog = []

    delivered = state.backlog_bits // KEY_BITS
    state.bits_delivered += state.backlog_bits
    state.backlog_bits = 0
    return delivered


class LinkEmulator:
    """
    一条 QKD 链路的发送端仿真

    每个周期采样一次成码，相同内容交付到链路两端的交付端。
    """

    def __init__(self, profile: LinkProfile, sinks: Sequence, seed: int,
                 windows: Optional[Sequence[DisturbanceWindow]] = None):
        self.profile = profile
        self.sinks = list(sinks)
        self.windows = [w for w in (windows or []) if w.link_index == profile.link_index]
        self.rng = link_rng(seed, profile.link_index)
        self.states = [EmitterState() for _ in self.sinks]
        self.bits_generated = 0
        self.cycles = 0
        self.last_cycle: Optional[CycleOutput] = None
        self.forced_qber_pct: Optional[float] = None
        self.logger = logging.getLogger(__name__)

    def step(self, now_s: float, before_emit=None) -> CycleOutput:
        cycle = sample_cycle(self.profile, self.windows, now_s, self.rng)
        if self.forced_qber_pct is not None:
            cycle.qber_pct = self.forced_qber_pct
        self.bits_generated += int(cycle.key_bits.size)
        self.cycles += 1
        self.last_cycle = cycle
        if before_emit is not None:
            before_emit(self)
        for sink, state in zip(self.sinks, self.states):
            emit_delivery(self.profile, cycle, sink, state)
        return cycle

    @property
    def pending_bits(self) -> int:
        return int(self.states[0].pending.size) if self.states else 0

    @property
    def bits_delivered(self) -> int:
        return self.states[0].bits_delivered if self.states else 0

    def counters(self) -> Dict[str, int]:
        return {
            "cycles": self.cycles,
            "bits_generated": self.bits_generated,
            "bits_delivered": self.bits_delivered,
            "pending_bits": self.pending_bits,
            "write_failures": sum(state.write_failures for state in self.states),
        }

    def snapshot(self) -> Dict:
        """随机数状态与发送进度，真实模式重启后继续而不重复生成同一批比特"""
        return {
            "rng": self.rng.bit_generator.state,
            "bits_generated": self.bits_generated,
            "cycles": self.cycles,
            "states": [{
                "pending": np.packbits(state.pending).tobytes().hex(),
                "pending_bits": int(state.pending.size),
                "next_key_id": state.next_key_id,
                "bits_delivered": state.bits_delivered,
                "keys_emitted": state.keys_emitted,
            } for state in self.states],
        }

    def restore(self, snapshot: Dict) -> None:
        self.rng.bit_generator.state = snapshot["rng"]
        self.bits_generated = snapshot["bits_generated"]
        self.cycles = snapshot["cycles"]
        for state, saved, sink in zip(self.states, snapshot["states"], self.sinks):
            packed = np.frombuffer(bytes.fromhex(saved["pending"]), dtype=np.uint8)
            state.pending = np.unpackbits(packed)[:saved["pending_bits"]].astype(np.uint8)
            state.next_key_id = saved["next_key_id"]
            state.bits_delivered = saved["bits_delivered"]
            state.keys_emitted = saved["keys_emitted"]
            if self.profile.delivery is DeliveryMode.REWRITE_FILE:
                state.lines = sink.observe().content.splitlines(keepends=True)


# ------------------------------------------------------------------ #
# 接收端
# ------------------------------------------------------------------ #
class UpdateKind(Enum):
    NO_CHANGE = "NoChange"
    APPENDED = "Appended"
    REWRITTEN = "Rewritten"
    PACKETS = "Packets"


@dataclass
class FeedState:
    mode: DeliveryMode
    length: int = 0
    content_hash: bytes = hashlib.sha256(b"").digest()
    identity: int = 0
    offset: int = 0


@dataclass
class FeedUpdate:
    kind: UpdateKind
    state: FeedState
    data: bytes = b""
    frames: List[QixFrame] = field(default_factory=list)
    errors: List[FrameError] = field(default_factory=list)


def detect_update(prev: FeedState, observation: Observation) -> FeedUpdate:
    """
    判断交付端自上次观测以来的变化

    文件: 身份变化、前缀哈希变化或长度缩短 → Rewritten；
    长度增长且前缀不变 → Appended；否则 NoChange。
    数据包流: 解析上次偏移之后的全部帧。
    """
    content = observation.content

    if prev.mode is DeliveryMode.PACKET_STREAM:
        offset = prev.offset
        if observation.identity != prev.identity or observation.length < offset:
            offset = 0
        frames, consumed, errors = scan_qix_stream(content[offset:])
        state = FeedState(prev.mode, observation.length, prev.content_hash, observation.identity, offset + consumed)
        kind = UpdateKind.PACKETS if frames or errors else UpdateKind.NO_CHANGE
        return FeedUpdate(kind, state, frames=frames, errors=errors)

    full_hash = hashlib.sha256(content).digest()
    state = FeedState(prev.mode, observation.length, full_hash, observation.identity)
    if observation.identity != prev.identity or observation.length < prev.length:
        return FeedUpdate(UpdateKind.REWRITTEN, state, data=content)
    prefix_hash = full_hash if observation.length == prev.length else hashlib.sha256(content[:prev.length]).digest()
    if prefix_hash != prev.content_hash:
        return FeedUpdate(UpdateKind.REWRITTEN, state, data=content)
    if observation.length > prev.length:
        return FeedUpdate(UpdateKind.APPENDED, state, data=content[prev.length:])
    return FeedUpdate(UpdateKind.NO_CHANGE, state)


@dataclass
class FeedCounters:
    polls: int = 0
    frames_ok: int = 0
    bad_magic: int = 0
    bad_crc: int = 0
    frame_errors: int = 0
    corrupt_lines: int = 0
    skipped_bits: int = 0
    rewrites: int = 0
    records_ingested: int = 0
    compromised_ingested: int = 0

    def as_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


class LinkEndpoint:
    """
    链路一端：监视交付端并把新密钥写入本端密钥表

    文件模式下 lines_seen 是已入表的行数（重写文件按该水位只取增量）。
    """

    def __init__(self, link_index: int, side: str, sink, table: KeyTable, mode: DeliveryMode):
        self.link_index = link_index
        self.side = side
        self.sink = sink
        self.table = table
        self.state = FeedState(mode)
        self.counters = FeedCounters()
        self.lines_seen = 0
        self.partial_line = b""
        self.last_stats: Dict[str, float] = {}
        self.logger = logging.getLogger(__name__)

    @property
    def mode(self) -> DeliveryMode:
        return self.state.mode

    def poll(self) -> List[KeyRecord]:
        """poll_feed: 检测变化并入表，解析错误只计数"""
        self.counters.polls += 1
        update = detect_update(self.state, self.sink.observe())
        self.state = update.state
        self.last_stats = self.sink.read_stats() or self.last_stats

        if update.kind is UpdateKind.NO_CHANGE:
            return []
        if update.kind is UpdateKind.PACKETS:
            return self._ingest_frames(update)
        if update.kind is UpdateKind.REWRITTEN:
            self.counters.rewrites += 1
            lines, self.partial_line = self._split_lines(update.data)
            return self._ingest_lines(lines[self.lines_seen:], len(lines))
        lines, self.partial_line = self._split_lines(self.partial_line + update.data)
        return self._ingest_lines(lines, self.lines_seen + len(lines))

    @staticmethod
    def _split_lines(data: bytes) -> Tuple[List[bytes], bytes]:
        cut = data.rfind(b"\n") + 1
        return data[:cut].splitlines(), data[cut:]

    def _ingest_lines(self, lines: List[bytes], lines_total: int) -> List[KeyRecord]:
        records = []
        for line in lines:
            try:
                key = bytes.fromhex(line.decode("ascii"))
            except (UnicodeDecodeError, ValueError):
                key = b""
            if len(key) != KEY_BYTES:
                self.counters.corrupt_lines += 1
                self.counters.skipped_bits += KEY_BITS
                continue
            records.extend(ingest_bits(self.table, bits_from_bytes(key)))
        self.lines_seen = max(self.lines_seen, lines_total)
        self.counters.records_ingested += len(records)
        return records

    def _ingest_frames(self, update: FeedUpdate) -> List[KeyRecord]:
        for error in update.errors:
            if isinstance(error, BadCrc):
                self.counters.bad_crc += 1
                self.counters.skipped_bits += KEY_BITS
            elif isinstance(error, BadMagic):
                self.counters.bad_magic += 1
            else:
                self.counters.frame_errors += 1
            self.logger.warning(f"链路 {self.link_index} {self.side} 端帧错误已跳过: {error}")

        records = []
        for frame in update.frames:
            status = KeyStatus.COMPROMISED if frame.status is QixStatus.COMPROMISED else KeyStatus.FRESH
            new_records = ingest_bits(self.table, bits_from_bytes(frame.key_bits), status)
            if status is KeyStatus.COMPROMISED:
                self.counters.compromised_ingested += len(new_records)
            records.extend(new_records)
        self.counters.frames_ok += len(update.frames)
        self.counters.records_ingested += len(records)
        return records

    def snapshot(self) -> Dict:
        """可持久化的接收状态（真实模式重启用）"""
        return {
            "mode": self.state.mode.value,
            "length": self.state.length,
            "content_hash": self.state.content_hash.hex(),
            "identity": self.state.identity,
            "offset": self.state.offset,
            "lines_seen": self.lines_seen,
            "partial_line": self.partial_line.hex(),
            "counters": self.counters.as_dict(),
        }

    def restore(self, snapshot: Dict) -> None:
        self.state = FeedState(DeliveryMode(snapshot["mode"]), snapshot["length"],
                               bytes.fromhex(snapshot["content_hash"]), snapshot["identity"], snapshot["offset"])
        self.lines_seen = snapshot["lines_seen"]
        self.partial_line = bytes.fromhex(snapshot.get("partial_line", ""))
        self.counters = FeedCounters(**snapshot.get("counters", {}))
