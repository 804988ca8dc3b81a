# -*- coding: utf-8 -*-
"""
遥测模块
采集密钥数量、SKR、QBER 与传输事件的时间序列，提供汇总统计，
并导出为行协议文本（兼容时序数据库）和 CSV。
"""

import logging
import os
import re
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.error_handler import EmptySeries, OutOfOrder, TelemetryError

DEFAULT_RING_CAPACITY = 200_000

Number = Union[int, float]
SeriesKey = Tuple[str, Tuple[Tuple[str, str], ...]]


@dataclass
class SeriesPoint:
    measurement: str
    tags: Dict[str, str]
    fields: Dict[str, Number]
    timestamp_ns: int

    @property
    def series_key(self) -> SeriesKey:
        return self.measurement, tuple(sorted((str(k), str(v)) for k, v in self.tags.items()))


@dataclass
class SeriesSummary:
    mean: float
    std: float
    n: int


class TelemetryStore:
    """
    按序列分组的内存环形缓冲

    同一 (measurement, tags) 序列的时间戳必须不减，乱序点被拒绝并计数。
    sink 为可选的追加写回调（真实模式写入 SQLite）。
    """

    def __init__(self, capacity: int = DEFAULT_RING_CAPACITY,
                 sink: Optional[Callable[[SeriesPoint], None]] = None):
        self.capacity = capacity
        self.sink = sink
        self.series: Dict[SeriesKey, Deque[SeriesPoint]] = {}
        self.last_timestamp: Dict[SeriesKey, int] = {}
        self.rejected = 0
        self.logger = logging.getLogger(__name__)

    def record(self, point: SeriesPoint, strict: bool = False) -> bool:
        key = point.series_key
        last = self.last_timestamp.get(key)
        if last is not None and point.timestamp_ns < last:
            self.rejected += 1
            self.logger.warning(f"乱序遥测点被拒绝: {key} {point.timestamp_ns} < {last}")
            if strict:
                raise OutOfOrder(f"{point.measurement} 时间戳 {point.timestamp_ns} 早于 {last}")
            return False
        self.series.setdefault(key, deque(maxlen=self.capacity)).append(point)
        self.last_timestamp[key] = point.timestamp_ns
        if self.sink is not None:
            self.sink(point)
        return True

    def select(self, measurement: str, **tags: str) -> List[SeriesPoint]:
        """取出与 measurement 和给定标签匹配的全部点（按序列、时间排列）"""
        selected = []
        for (name, tag_items), points in sorted(self.series.items()):
            if name != measurement:
                continue
            tag_map = dict(tag_items)
            if all(tag_map.get(k) == str(v) for k, v in tags.items()):
                selected.extend(points)
        return selected

    def points(self, start_ns: Optional[int] = None, end_ns: Optional[int] = None) -> List[SeriesPoint]:
        """按 (时间, 序列) 稳定排序后的点"""
        selected = [
            point
            for _, series in sorted(self.series.items())
            for point in series
            if (start_ns is None or point.timestamp_ns >= start_ns)
            and (end_ns is None or point.timestamp_ns <= end_ns)
        ]
        return sorted(selected, key=lambda p: (p.timestamp_ns, p.series_key))

    def export_lines(self, start_ns: Optional[int] = None, end_ns: Optional[int] = None) -> str:
        return export_lines(self.points(start_ns, end_ns))

    def __len__(self) -> int:
        return sum(len(series) for series in self.series.values())


def summarize(series: Iterable[Union[SeriesPoint, Number]], field_name: Optional[str] = None) -> SeriesSummary:
    """
    均值与样本标准差（n ≥ 2 时分母为 n−1，n = 1 时为 0）

    series 可以是 SeriesPoint 序列（需给出 field_name）或数值序列。
    """
    if field_name is None:
        values = [float(v) for v in series]
    else:
        values = [float(p.fields[field_name]) for p in series if field_name in p.fields]
    if not values:
        raise EmptySeries(f"序列为空，无法汇总 {field_name or ''}".strip())
    data = np.asarray(values, dtype=float)
    std = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    return SeriesSummary(float(np.mean(data)), std, int(data.size))


# ------------------------------------------------------------------ #
# 行协议
# ------------------------------------------------------------------ #
def _escape(text: str, specials: str) -> str:
    return re.sub(f"([{re.escape(specials)}\\\\])", r"\\\1", str(text))


def _format_value(value: Number) -> str:
    if isinstance(value, (bool, np.bool_)):
        raise TelemetryError(f"不支持布尔字段值: {value}")
    if isinstance(value, (int, np.integer)):
        return f"{int(value)}i"
    return repr(float(value))


def format_line(point: SeriesPoint) -> str:
    head = _escape(point.measurement, ", ")
    for key, value in sorted(point.tags.items()):
        head += f",{_escape(key, ',= ')}={_escape(value, ',= ')}"
    body = ",".join(f"{_escape(key, ',= ')}={_format_value(value)}"
                    for key, value in sorted(point.fields.items()))
    return f"{head} {body} {int(point.timestamp_ns)}"


def export_lines(points: Iterable[SeriesPoint]) -> str:
    """每个点一行；标签与字段按字典序排列，整数字段带 i 后缀"""
    lines = [format_line(point) for point in points]
    return "\n".join(lines) + "\n" if lines else ""


def _unescape(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text)


def _split_raw(text: str, separator: str) -> List[str]:
    """按未转义的分隔符切分，保留转义字符供下一级解析"""
    parts, start, index = [], 0, 0
    while index < len(text):
        if text[index] == "\\":
            index += 2
            continue
        if text[index] == separator:
            parts.append(text[start:index])
            start = index + 1
        index += 1
    parts.append(text[start:])
    return parts


def _split_pair(item: str) -> Tuple[str, str]:
    parts = _split_raw(item, "=")
    return parts[0], "=".join(parts[1:])


def _parse_value(text: str) -> Number:
    if text.endswith("i"):
        return int(text[:-1])
    return float(text)


def parse_lines(text: str) -> List[SeriesPoint]:
    """解析 export_lines 生成的行协议文本"""
    points = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        sections = _split_raw(line, " ")
        if len(sections) != 3:
            raise TelemetryError(f"第 {number} 行格式错误: {line}")
        head, body, timestamp = sections
        head_parts = _split_raw(head, ",")
        measurement = _unescape(head_parts[0])
        tags = {}
        for item in head_parts[1:]:
            key, value = _split_pair(item)
            tags[_unescape(key)] = _unescape(value)
        fields = {}
        for item in _split_raw(body, ","):
            key, value = _split_pair(item)
            try:
                fields[_unescape(key)] = _parse_value(value)
            except ValueError as e:
                raise TelemetryError(f"第 {number} 行字段值错误: {item}") from e
        points.append(SeriesPoint(measurement, tags, fields, int(timestamp)))
    return points


# ------------------------------------------------------------------ #
# 表格与 CSV
# ------------------------------------------------------------------ #
def to_frame(points: Iterable[SeriesPoint]) -> pd.DataFrame:
    """点序列转 DataFrame，列为 timestamp_ns、t_s、各标签、各字段"""
    rows = []
    for point in points:
        row = {"timestamp_ns": int(point.timestamp_ns), "t_s": point.timestamp_ns / 1e9}
        row.update(point.tags)
        row.update(point.fields)
        rows.append(row)
    return pd.DataFrame(rows)


def series_file_name(key: SeriesKey) -> str:
    measurement, tag_items = key
    suffix = "_".join(f"{k}-{v}" for k, v in tag_items)
    name = f"{measurement}__{suffix}" if suffix else measurement
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".csv"


def export_csv(store: TelemetryStore, directory: str) -> List[str]:
    """每个序列写一个带表头的 CSV 文件"""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for key, series in sorted(store.series.items()):
        path = os.path.join(directory, series_file_name(key))
        to_frame(series).to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
    return paths
