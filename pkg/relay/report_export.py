# -*- coding: utf-8 -*-
"""
运行结果输出模块
把一次运行（仿真或真实模式）写成目录形式的结果包，并能读回；
另外负责从结果包生成图表和 Excel 汇总。

结果包布局:
    summary.json            运行汇总（不含墙钟时间，保证可复现）
    telemetry.lp            行协议遥测
    csv/                    每个遥测序列一个 CSV
    ledger/<node>.csv       密钥使用台账
    wire/<node>.csv         报文日志（帧十六进制）
    tables/<node>_<scope>.qkt  密钥表二进制文件
    batches.csv             NM 批次记录
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import matplotlib
matplotlib.use('Agg')  # 使用非交互式后端
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from database import BATCH_COLUMNS, LEDGER_COLUMNS, WIRE_COLUMNS  # noqa: E402
from relay.keycore import KeyTable, load_table, save_table  # noqa: E402
from relay.telemetry import SeriesPoint, TelemetryStore, export_csv, parse_lines, to_frame  # noqa: E402
from utils.error_handler import AuditError, KeyStoreError, TelemetryError  # noqa: E402
from utils.field_mapper import FieldMapper  # noqa: E402

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
TELEMETRY_FILE = "telemetry.lp"
BATCHES_FILE = "batches.csv"
CSV_DIR = "csv"
LEDGER_DIR = "ledger"
WIRE_DIR = "wire"
TABLES_DIR = "tables"
FIGURES_DIR = "figures"
EXCEL_FILE = "summary.xlsx"
FIGURE_DPI = 120


def _write_frame(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_bundle(out_dir: str, summary: Dict, telemetry: TelemetryStore,
                 ledgers: Dict[str, List[Dict]], wire_logs: Dict[str, List[Dict]],
                 tables: Dict[str, Dict[str, KeyTable]], batch_rows: List[Dict]) -> List[str]:
    """
    写出结果包

    Args:
        out_dir: 输出目录（不存在时创建）
        summary: 运行汇总，按键排序写出
        telemetry: 遥测存储
        ledgers: 节点 → 台账行
        wire_logs: 节点 → 报文日志行
        tables: 节点 → {表标签: KeyTable}
        batch_rows: BatchRecord.to_row() 序列

    Returns:
        List[str]: 写出的文件路径
    """
    for sub_dir in (CSV_DIR, LEDGER_DIR, WIRE_DIR, TABLES_DIR):
        os.makedirs(os.path.join(out_dir, sub_dir), exist_ok=True)
    paths = []

    summary_path = os.path.join(out_dir, SUMMARY_FILE)
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    paths.append(summary_path)

    telemetry_path = os.path.join(out_dir, TELEMETRY_FILE)
    with open(telemetry_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(telemetry.export_lines())
    paths.append(telemetry_path)
    paths.extend(export_csv(telemetry, os.path.join(out_dir, CSV_DIR)))

    for node_id, rows in sorted(ledgers.items()):
        paths.append(_write_frame(pd.DataFrame(rows, columns=LEDGER_COLUMNS),
                                  os.path.join(out_dir, LEDGER_DIR, f"{node_id}.csv")))
    for node_id, rows in sorted(wire_logs.items()):
        paths.append(_write_frame(pd.DataFrame(rows, columns=WIRE_COLUMNS),
                                  os.path.join(out_dir, WIRE_DIR, f"{node_id}.csv")))
    for node_id, node_tables in sorted(tables.items()):
        for label, table in sorted(node_tables.items()):
            path = os.path.join(out_dir, TABLES_DIR, f"{node_id}_{label}.qkt")
            save_table(table, path)
            paths.append(path)
    paths.append(_write_frame(pd.DataFrame(batch_rows, columns=BATCH_COLUMNS),
                              os.path.join(out_dir, BATCHES_FILE)))

    logger.info(f"结果包已写出: {out_dir}（{len(paths)} 个文件）")
    return paths


def node_with_role(summary: Dict, role: str) -> Optional[str]:
    """汇总中第一个指定角色的节点（summary.json 的 nodes 按键排序，不是拓扑顺序）"""
    for node_id, info in summary.get("nodes", {}).items():
        if info.get("role") == role:
            return node_id
    return None


# ------------------------------------------------------------------ #
# 读取
# ------------------------------------------------------------------ #
@dataclass
class LoadedBundle:
    path: str
    summary: Dict
    points: List[SeriesPoint]
    ledger: pd.DataFrame
    wire: pd.DataFrame
    batches: pd.DataFrame
    tables: Dict[str, Dict[str, KeyTable]] = field(default_factory=dict)

    @property
    def node_ids(self) -> List[str]:
        return list(self.summary.get("nodes", {}).keys())

    def telemetry(self) -> TelemetryStore:
        store = TelemetryStore()
        for point in self.points:
            store.record(point)
        return store


def _read_csv_dir(directory: str, columns: List[str]) -> pd.DataFrame:
    if not os.path.isdir(directory):
        raise AuditError(f"结果包缺少目录: {directory}")
    frames = []
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".csv"):
            continue
        path = os.path.join(directory, name)
        try:
            frame = pd.read_csv(path, dtype={"frame": str, "scope": str, "node_id": str})
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise AuditError(f"无法解析 {path}: {e}") from e
        except pd.errors.EmptyDataError:
            frame = pd.DataFrame(columns=columns)
        missing = [column for column in columns if column not in frame.columns]
        if missing:
            raise AuditError(f"{path} 缺少列: {', '.join(missing)}")
        frames.append(frame[columns])
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)


def load_bundle(path: str) -> LoadedBundle:
    """
    读回结果包

    Raises:
        AuditError: 目录或文件缺失、格式错误
    """
    if not os.path.isdir(path):
        raise AuditError(f"结果目录不存在: {path}")
    try:
        with open(os.path.join(path, SUMMARY_FILE), "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    except (OSError, ValueError) as e:
        raise AuditError(f"无法读取 {SUMMARY_FILE}: {e}") from e

    try:
        with open(os.path.join(path, TELEMETRY_FILE), "r", encoding="utf-8") as fh:
            points = parse_lines(fh.read())
    except OSError as e:
        raise AuditError(f"无法读取 {TELEMETRY_FILE}: {e}") from e
    except TelemetryError as e:
        raise AuditError(f"{TELEMETRY_FILE} 格式错误: {e}") from e

    ledger = _read_csv_dir(os.path.join(path, LEDGER_DIR), LEDGER_COLUMNS)
    wire = _read_csv_dir(os.path.join(path, WIRE_DIR), WIRE_COLUMNS)
    for column in LEDGER_COLUMNS:
        blanks = int(ledger[column].isna().sum())
        if blanks:
            raise AuditError(f"台账列 {column} 有 {blanks} 个空值")
    for column in ("key_id", "batch_id", "index"):
        if not pd.api.types.is_numeric_dtype(ledger[column]) and len(ledger):
            raise AuditError(f"台账列 {column} 含非数值内容")

    try:
        batches = pd.read_csv(os.path.join(path, BATCHES_FILE))
    except pd.errors.EmptyDataError:
        batches = pd.DataFrame(columns=BATCH_COLUMNS)
    except (OSError, pd.errors.ParserError) as e:
        raise AuditError(f"无法读取 {BATCHES_FILE}: {e}") from e

    tables: Dict[str, Dict[str, KeyTable]] = {}
    tables_dir = os.path.join(path, TABLES_DIR)
    for name in sorted(os.listdir(tables_dir)) if os.path.isdir(tables_dir) else []:
        if not name.endswith(".qkt"):
            continue
        node_id, label = name[:-len(".qkt")].rsplit("_", 1)
        try:
            tables.setdefault(node_id, {})[label] = load_table(os.path.join(tables_dir, name))
        except KeyStoreError as e:
            raise AuditError(f"密钥表 {name} 损坏: {e}") from e
    return LoadedBundle(path, summary, points, ledger, wire, batches, tables)


# ------------------------------------------------------------------ #
# 汇总表
# ------------------------------------------------------------------ #
def link_statistics(summary: Dict) -> pd.DataFrame:
    """各链路 SKR/QBER 均值与标准差"""
    rows = []
    for link, stats in sorted(summary.get("links", {}).items(), key=lambda item: int(item[0])):
        rows.append({
            "link": int(link),
            "protocol": stats.get("protocol"),
            "length_km": stats.get("length_km"),
            "loss_db": stats.get("loss_db"),
            "skr_mean": stats.get("skr_mean"),
            "skr_std": stats.get("skr_std"),
            "qber_mean": stats.get("qber_mean"),
            "qber_std": stats.get("qber_std"),
            "cycles": stats.get("cycles"),
        })
    return pd.DataFrame(rows)


def node_table_frame(summary: Dict) -> pd.DataFrame:
    rows = []
    for node_id, info in summary.get("nodes", {}).items():
        for label, stats in sorted(info.get("tables", {}).items()):
            rows.append({"node": node_id, "table": label, **{k: v for k, v in stats.items() if k != "digest"}})
    return pd.DataFrame(rows)


# ------------------------------------------------------------------ #
# 图表
# ------------------------------------------------------------------ #
def _setup_fonts() -> None:
    plt.rcParams['font.sans-serif'] = ['SimHei', 'Arial Unicode MS', 'DejaVu Sans']
    plt.rcParams['axes.unicode_minus'] = False


def _series(points: Iterable[SeriesPoint], measurement: str, **tags: str) -> pd.DataFrame:
    selected = [p for p in points if p.measurement == measurement
                and all(p.tags.get(k) == str(v) for k, v in tags.items())]
    return to_frame(selected)


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def plot_available_keys(points: List[SeriesPoint], summary: Dict, path: str) -> str:
    """各链路可用量子密钥（对数轴）与终端网络密钥数"""
    _setup_fonts()
    fig, ax = plt.subplots(figsize=(10, 5))
    for link, stats in sorted(summary.get("links", {}).items(), key=lambda item: int(item[0])):
        frame = _series(points, "link_stats", node=stats["ends"][0], link=link)
        if not frame.empty:
            ax.plot(frame["t_s"], frame["available_qk"], label=f"QK 链路{link}")
    edge_id = node_with_role(summary, "EN")
    if edge_id:
        frame = _series(points, "node_stats", node=edge_id)
        if not frame.empty:
            ax.plot(frame["t_s"], frame["available_nk"], color="black", label=f"NK {edge_id}")
    ax.set_yscale("symlog", linthresh=1)
    ax.set_xlabel("时间 (s)")
    ax.set_ylabel(FieldMapper.get_label("available_qk"))
    ax.set_title("可用密钥数量")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left")
    return _save(fig, path)


def plot_sawtooth(points: List[SeriesPoint], summary: Dict, path: str) -> str:
    """链路 1 可用量的锯齿曲线，标出阈值 T 与保留量 R"""
    _setup_fonts()
    policy = summary.get("scenario", {}).get("policy", {})
    ends = summary.get("links", {}).get("1", {}).get("ends", ["NM"])
    frame = _series(points, "link_stats", node=ends[0], link="1")
    fig, ax = plt.subplots(figsize=(10, 4))
    if not frame.empty:
        ax.step(frame["t_s"], frame["available_qk"], where="post", label="QK 链路1")
    if "T" in policy:
        ax.axhline(policy["T"], color="red", linestyle="--", label=f"T={policy['T']}")
    if "R" in policy:
        ax.axhline(policy["R"], color="green", linestyle="--", label=f"R={policy['R']}")
    ax.set_xlabel("时间 (s)")
    ax.set_ylabel(FieldMapper.get_label("available_qk"))
    ax.set_title("链路 1 密钥池")
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_link_stats(points: List[SeriesPoint], link: str, path: str) -> str:
    """单条链路每周期的 SKR 与 QBER（双纵轴）"""
    _setup_fonts()
    frame = _series(points, "link_cycle", link=link)
    fig, ax = plt.subplots(figsize=(10, 4))
    twin = ax.twinx()
    if not frame.empty:
        ax.plot(frame["t_s"], frame["skr_bps"], color="tab:blue", linewidth=0.8)
        twin.plot(frame["t_s"], frame["qber_pct"], color="tab:red", linewidth=0.8)
    ax.set_xlabel("时间 (s)")
    ax.set_ylabel(FieldMapper.get_label("skr_bps"), color="tab:blue")
    twin.set_ylabel(FieldMapper.get_label("qber_pct"), color="tab:red")
    ax.set_title(f"链路 {link} 成码率与误码率")
    return _save(fig, path)


def plot_nk_growth(points: List[SeriesPoint], summary: Dict, path: str) -> str:
    """各节点网络密钥累计数"""
    _setup_fonts()
    fig, ax = plt.subplots(figsize=(10, 4))
    for node_id in summary.get("nodes", {}):
        frame = _series(points, "node_stats", node=node_id)
        if not frame.empty:
            ax.plot(frame["t_s"], frame["available_nk"] + frame["used_nk"], label=node_id)
    ax.set_xlabel("时间 (s)")
    ax.set_ylabel("网络密钥累计 (个)")
    ax.set_title("网络密钥增长")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left")
    return _save(fig, path)


def write_excel_summary(bundle: LoadedBundle, path: str) -> str:
    """链路统计、批次与节点密钥表三张工作表"""
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        FieldMapper.rename_columns(link_statistics(bundle.summary)).to_excel(
            writer, sheet_name='链路统计', index=False)
        FieldMapper.rename_columns(bundle.batches).to_excel(writer, sheet_name='批次', index=False)
        FieldMapper.rename_columns(node_table_frame(bundle.summary)).to_excel(
            writer, sheet_name='节点密钥表', index=False)
    return path


def export_report(report_dir: str, out_dir: str, figures: bool = True,
                  excel: bool = True) -> List[str]:
    """
    从结果包生成 CSV、行协议、PNG 图表与 Excel 汇总

    Raises:
        AuditError: 结果包无法读取
    """
    bundle = load_bundle(report_dir)
    os.makedirs(out_dir, exist_ok=True)
    store = bundle.telemetry()
    paths = export_csv(store, os.path.join(out_dir, CSV_DIR))
    lines_path = os.path.join(out_dir, TELEMETRY_FILE)
    with open(lines_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(store.export_lines())
    paths.append(lines_path)

    if figures:
        figure_dir = os.path.join(out_dir, FIGURES_DIR)
        os.makedirs(figure_dir, exist_ok=True)
        paths.append(plot_available_keys(bundle.points, bundle.summary,
                                         os.path.join(figure_dir, "available_keys.png")))
        paths.append(plot_sawtooth(bundle.points, bundle.summary, os.path.join(figure_dir, "link1_sawtooth.png")))
        for link in sorted(bundle.summary.get("links", {}), key=int):
            paths.append(plot_link_stats(bundle.points, link, os.path.join(figure_dir, f"link{link}_skr_qber.png")))
        paths.append(plot_nk_growth(bundle.points, bundle.summary, os.path.join(figure_dir, "nk_growth.png")))
    if excel:
        paths.append(write_excel_summary(bundle, os.path.join(out_dir, EXCEL_FILE)))
    logger.info(f"导出完成: {len(paths)} 个文件 -> {out_dir}")
    return paths


def format_summary_table(summary: Dict) -> Optional[str]:
    """命令行打印用的链路统计表"""
    frame = link_statistics(summary)
    if frame.empty:
        return None
    frame = frame.round({"skr_mean": 1, "skr_std": 1, "qber_mean": 2, "qber_std": 2})
    return FieldMapper.rename_columns(frame).to_string(index=False)
