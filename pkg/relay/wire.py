# -*- coding: utf-8 -*-
"""
经典信道报文编解码

帧格式（大端）:
    4 字节总长度（含长度字段）| 1 字节版本 0x01 | 1 字节报文类型 | 8 字节序号
    | 载荷 | 32 字节认证标签 SHA-256(psk ‖ 帧头 ‖ 载荷)
"""

import hashlib
import hmac
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, List, Optional

from construct import (
    Float64b,
    GreedyBytes,
    Int8ub,
    Int16ub,
    Int32sb,
    Int32ub,
    Int64ub,
    PascalString,
    Prefixed,
    PrefixedArray,
    Struct,
)

from utils.error_handler import BadAuthTag, BadLength, BadPayload, StaleSequence, UnknownMessageType, WireError

logger = logging.getLogger(__name__)

WIRE_VERSION = 0x01
HEADER_SIZE = 14
TAG_SIZE = 32
MIN_FRAME_SIZE = HEADER_SIZE + TAG_SIZE
MAX_FRAME_SIZE = 1 << 20
PSK_SIZE = 32

HeaderFormat = Struct(
    "length" / Int32ub,
    "version" / Int8ub,
    "msg_type" / Int8ub,
    "sequence" / Int64ub,
)


class MsgType(IntEnum):
    HELLO = 1
    STATS_REPORT = 2
    TRANSFER_INIT = 3
    KEY_HOP = 4
    TRANSFER_ACK = 5
    TRANSFER_COMPLETE = 6
    ERROR = 7


Text = PascalString(Int16ub, "utf8")
Blob = Prefixed(Int16ub, GreedyBytes)

LinkStatsFormat = Struct(
    "link_index" / Int8ub,
    "available_qk" / Int64ub,
    "used_qk" / Int64ub,
    "compromised_qk" / Int64ub,
    "burned_qk" / Int64ub,
    "skr" / Float64b,
    "qber" / Float64b,
)

PAYLOAD_FORMATS = {
    MsgType.HELLO: Struct("node_id" / Text, "channel" / Text),
    MsgType.STATS_REPORT: Struct(
        "node_id" / Text,
        "timestamp_ns" / Int64ub,
        "available_nk" / Int64ub,
        "used_nk" / Int64ub,
        "transfers_completed" / Int64ub,
        "keys_failed" / Int64ub,
        "links" / PrefixedArray(Int16ub, LinkStatsFormat),
    ),
    MsgType.TRANSFER_INIT: Struct("batch_id" / Int64ub, "h" / Int32ub),
    MsgType.KEY_HOP: Struct(
        "batch_id" / Int64ub,
        "index" / Int32ub,
        "nk_id" / Int64ub,
        "nk_digest" / Blob,
        "ciphertext" / Blob,
        "qk_id" / Int64ub,
    ),
    MsgType.TRANSFER_ACK: Struct("batch_id" / Int64ub, "forwarded" / Int32ub, "failed" / Int32ub),
    MsgType.TRANSFER_COMPLETE: Struct("batch_id" / Int64ub, "h" / Int32ub, "received" / Int32ub),
    MsgType.ERROR: Struct("batch_id" / Int64ub, "index" / Int32sb, "code" / Text, "detail" / Text),
}

FIXED_BLOBS = {MsgType.KEY_HOP: ("nk_digest", "ciphertext")}


@dataclass
class WireMessage:
    msg_type: MsgType
    sequence: int
    payload: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.payload[key]


def _plain(value: Any) -> Any:
    """construct 的 Container/ListContainer 转成普通 dict/list"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if not k.startswith("_")}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def auth_tag(psk: bytes, header: bytes, payload: bytes) -> bytes:
    return hashlib.sha256(psk + header + payload).digest()


def encode_wire(msg: WireMessage, psk: bytes) -> bytes:
    """编码并认证一条报文"""
    if len(psk) != PSK_SIZE:
        raise ValueError(f"预共享密钥必须为 {PSK_SIZE} 字节")
    try:
        payload = PAYLOAD_FORMATS[MsgType(msg.msg_type)].build(msg.payload)
    except KeyError as e:
        raise UnknownMessageType(f"未知报文类型: {msg.msg_type}") from e
    except Exception as e:
        raise BadPayload(f"{MsgType(msg.msg_type).name} 载荷无法编码: {e}") from e
    header = HeaderFormat.build(dict(length=HEADER_SIZE + len(payload) + TAG_SIZE, version=WIRE_VERSION,
                                     msg_type=int(msg.msg_type), sequence=msg.sequence))
    return header + payload + auth_tag(psk, header, payload)


def decode_wire(data: bytes, psk: bytes, last_sequence: Optional[int] = None) -> WireMessage:
    """
    校验并解码一条报文

    先校验长度与认证标签，之后才解析类型、序号与载荷。

    Raises:
        BadLength, BadAuthTag, UnknownMessageType, StaleSequence, BadPayload
    """
    data = bytes(data)
    if len(data) < MIN_FRAME_SIZE:
        raise BadLength(f"帧长度 {len(data)} 小于最小长度 {MIN_FRAME_SIZE}")
    header_fields = HeaderFormat.parse(data[:HEADER_SIZE])
    if header_fields.length != len(data):
        raise BadLength(f"声明长度 {header_fields.length} 与实际长度 {len(data)} 不符")

    header, payload, tag = data[:HEADER_SIZE], data[HEADER_SIZE:-TAG_SIZE], data[-TAG_SIZE:]
    if not hmac.compare_digest(tag, auth_tag(psk, header, payload)):
        raise BadAuthTag(f"认证失败 seq={header_fields.sequence}")

    if header_fields.version != WIRE_VERSION:
        raise BadPayload(f"不支持的协议版本: {header_fields.version}")
    try:
        msg_type = MsgType(header_fields.msg_type)
    except ValueError as e:
        raise UnknownMessageType(f"未知报文类型: {header_fields.msg_type}") from e
    if last_sequence is not None and header_fields.sequence <= last_sequence:
        raise StaleSequence(f"序号 {header_fields.sequence} 不大于已接收的 {last_sequence}",
                            sequence=header_fields.sequence)

    try:
        fields = _plain(PAYLOAD_FORMATS[msg_type].parse(payload))
    except Exception as e:
        raise BadPayload(f"{msg_type.name} 载荷解析失败: {e}") from e
    if len(PAYLOAD_FORMATS[msg_type].build(fields)) != len(payload):
        raise BadPayload(f"{msg_type.name} 载荷存在多余字节")
    for name in FIXED_BLOBS.get(msg_type, ()):
        if len(fields[name]) != 32:
            raise BadPayload(f"{msg_type.name}.{name} 长度应为 32 字节")
    return WireMessage(msg_type, header_fields.sequence, fields)


@dataclass
class WireCounters:
    sent: int = 0
    received: int = 0
    bad_auth: int = 0
    bad_length: int = 0
    stale: int = 0
    bad_payload: int = 0
    unknown_type: int = 0

    def count(self, error: WireError) -> None:
        if isinstance(error, BadAuthTag):
            self.bad_auth += 1
        elif isinstance(error, BadLength):
            self.bad_length += 1
        elif isinstance(error, StaleSequence):
            self.stale += 1
        elif isinstance(error, UnknownMessageType):
            self.unknown_type += 1
        else:
            self.bad_payload += 1

    def as_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


class PeerChannel:
    """
    一对节点之间的认证信道

    send_sequence 与 last_received 分别维护本端发送序号和对端已接收的最大序号。
    """

    def __init__(self, name: str, psk: bytes, send_sequence: int = 0, last_received: int = 0):
        if len(psk) != PSK_SIZE:
            raise ValueError(f"信道 {name} 预共享密钥必须为 {PSK_SIZE} 字节")
        self.name = name
        self.psk = psk
        self.send_sequence = send_sequence
        self.last_received = last_received
        self.counters = WireCounters()
        self.logger = logging.getLogger(__name__)

    def encode(self, msg_type: MsgType, payload: Dict[str, Any]) -> bytes:
        self.send_sequence += 1
        frame = encode_wire(WireMessage(msg_type, self.send_sequence, payload), self.psk)
        self.counters.sent += 1
        return frame

    def decode(self, frame: bytes) -> WireMessage:
        """解码；失败时计数后抛出，调用方丢弃该帧"""
        try:
            msg = decode_wire(frame, self.psk, self.last_received)
        except WireError as e:
            self.counters.count(e)
            self.logger.warning(f"信道 {self.name} 丢弃报文: {e}")
            raise
        self.last_received = msg.sequence
        self.counters.received += 1
        return msg

    def authenticates(self, frame: bytes) -> bool:
        """仅校验认证标签（真实模式用来识别 Hello 所属信道）"""
        try:
            decode_wire(frame, self.psk)
            return True
        except WireError:
            return False

    def snapshot(self) -> Dict[str, int]:
        return {"send_sequence": self.send_sequence, "last_received": self.last_received}


class StreamDecoder:
    """按长度前缀从字节流中切分完整帧"""

    def __init__(self):
        self.buffer = bytearray()

    def feed(self, data: bytes) -> List[bytes]:
        """
        Raises:
            BadLength: 声明长度非法，调用方应关闭连接重新同步
        """
        self.buffer.extend(data)
        frames = []
        while len(self.buffer) >= 4:
            length = int.from_bytes(self.buffer[:4], "big")
            if not MIN_FRAME_SIZE <= length <= MAX_FRAME_SIZE:
                self.buffer.clear()
                raise BadLength(f"流中声明长度非法: {length}")
            if len(self.buffer) < length:
                break
            frames.append(bytes(self.buffer[:length]))
            del self.buffer[:length]
        return frames
