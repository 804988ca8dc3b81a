#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
qkd_relay.py
============

可信中继 QKD 网络的统一入口脚本。

功能概览
--------
- sim：按场景运行确定性离散事件仿真，写出结果包并打印汇总
- node：以真实模式运行单个节点进程（由 launch 调用，也可手动启动）
- launch：按场景在本机拉起全部节点进程，可计划杀进程并重启
- scenario-init：生成内置的实测参数场景文件
- export：把结果包导出为 CSV、行协议、PNG 图表与 Excel 汇总
- audit：离线审计结果包中的密钥台账与报文日志

退出码: 0 成功，1 输入错误，2 不变量/审计失败
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

# 确保可以导入项目内模块
ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, ROOT_DIR)

from relay.audit import audit_bundle  # noqa: E402
from relay.realmode import launch_network, run_node  # noqa: E402
from relay.report_export import export_report, format_summary_table  # noqa: E402
from relay.scenario import default_scenario, load_scenario_file, scenario_to_dict  # noqa: E402
from relay.simharness import run_sim  # noqa: E402
from utils.error_handler import (EXIT_INPUT_ERROR, EXIT_OK, ErrorHandler, InvariantViolation,  # noqa: E402
                                 RelayError, ScenarioError)

DEFAULT_OUT_DIR = "qkd_relay_out"
DEFAULT_SCENARIO = "epb_table1"


# ------------------------------------------------------------------ #
# 主控制器类
# ------------------------------------------------------------------ #
class QkdRelayController:
    """统一入口控制器"""

    def __init__(self, error_handler: Optional[ErrorHandler] = None):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.errors = error_handler or ErrorHandler(self.logger)

    @staticmethod
    def setup_logging(level: int = logging.INFO, log_file: Optional[str] = None) -> None:
        """设置日志；仿真只输出到控制台，节点进程另写日志文件"""
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if log_file:
            directory = os.path.dirname(log_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
        logging.basicConfig(
            level=level,
            format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
            handlers=handlers,
            force=True,
        )

    def _load(self, scenario: str, seed: Optional[int], duration: Optional[float],
              compress: Optional[float] = None):
        loaded = load_scenario_file(scenario)
        if seed is not None:
            if not 0 <= seed < 2 ** 64:
                raise ScenarioError([f"--seed 必须是 64 位无符号整数: {seed}"], loaded.source)
            loaded.seed = seed
        if duration is not None:
            if duration < 0:
                raise ScenarioError([f"--duration 必须是非负数值: {duration}"], loaded.source)
            loaded.duration_s = duration
        if compress is not None:
            if compress < 1:
                raise ScenarioError([f"--compress 必须 ≥ 1: {compress}"], loaded.source)
            loaded.time_compression = compress
        return loaded

    # ------------------------------------------------------------------ #
    # 各子命令
    # ------------------------------------------------------------------ #
    def run_sim(self, scenario: str, seed: Optional[int], duration: Optional[float], out_dir: str,
                compress: Optional[float] = None) -> int:
        """cmd_sim: 运行仿真、写出结果包并打印汇总"""
        try:
            loaded = self._load(scenario, seed, duration, compress)
            report = run_sim(loaded)
            report.write(out_dir)
        except FileNotFoundError as e:
            return self.errors.handle_file_error(e, e.filename or scenario, "读取场景")
        except ScenarioError as e:
            return self.errors.handle_scenario_error(e)
        except InvariantViolation as e:
            return self.errors.handle_invariant_violation(e)
        except OSError as e:
            return self.errors.handle_file_error(e, out_dir, "写出结果包")

        self.print_summary(report.summary)
        print(f"✅ 结果包已写出: {out_dir}")
        return EXIT_OK

    @staticmethod
    def print_summary(summary: dict) -> None:
        scenario = summary.get("scenario", {})
        batches = summary.get("batches", {})
        print(f"\n📊 场景 {scenario.get('name')}（种子 {scenario.get('seed')}，"
              f"时长 {scenario.get('duration_s')} s）")
        table = format_summary_table(summary)
        if table:
            print(table)
        print(f"   批次: 触发 {batches.get('triggered', 0)}，完成 {batches.get('completed', 0)}，"
              f"短缺 {batches.get('shortfall', 0)}")
        print(f"   EN 网络密钥: {summary.get('nk_delivered', 0)} 个")
        print(f"   网络密钥速率: {summary.get('network_key_rate_keys_per_s', 0.0):.3f} 个/s "
              f"（{summary.get('network_key_rate_bps', 0.0):.1f} bps）")

    def run_node(self, config: str, out_dir: str) -> int:
        try:
            return run_node(config, out_dir)
        except FileNotFoundError as e:
            return self.errors.handle_file_error(e, e.filename or config, "读取节点配置")
        except ScenarioError as e:
            return self.errors.handle_scenario_error(e)
        except (RelayError, OSError) as e:
            return self.errors.log_and_show_error(e, "节点运行")

    def run_launch(self, scenario: str, seed: Optional[int], duration: Optional[float],
                   compress: Optional[float], out_dir: str, restarts: List[str], log_level: str) -> int:
        try:
            loaded = self._load(scenario, seed, duration, compress)
            code = launch_network(loaded, out_dir, restarts, log_level)
        except FileNotFoundError as e:
            return self.errors.handle_file_error(e, e.filename or scenario, "读取场景")
        except ScenarioError as e:
            return self.errors.handle_scenario_error(e)
        except (RelayError, OSError, ValueError) as e:
            return self.errors.log_and_show_error(e, "启动网络")
        if code == EXIT_OK:
            with open(os.path.join(out_dir, "summary.json"), "r", encoding="utf-8") as fh:
                self.print_summary(json.load(fh))
            print(f"✅ 真实模式结果包已写出: {out_dir}")
        else:
            print("❌ 有节点进程异常退出，请查看各节点日志")
        return code

    def scenario_init(self, name: str, seed: int, duration: float, out_path: Optional[str]) -> int:
        """生成实测参数场景文件"""
        scenario = default_scenario(name=name, seed=seed, duration_s=duration)
        path = out_path or f"{name}.json"
        if os.path.isdir(path):
            path = os.path.join(path, f"{name}.json")
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(scenario_to_dict(scenario), fh, indent=2, ensure_ascii=False)
                fh.write("\n")
        except OSError as e:
            return self.errors.handle_file_error(e, path, "写入场景")
        print(f"✅ 场景已生成: {path}")
        return EXIT_OK

    def export(self, report_dir: str, out_dir: str) -> int:
        try:
            paths = export_report(report_dir, out_dir)
        except RelayError as e:
            return self.errors.log_and_show_error(e, "导出")
        print(f"✅ 已导出 {len(paths)} 个文件到 {out_dir}")
        return EXIT_OK

    def audit(self, report_dir: str) -> int:
        """cmd_audit: 0 无问题，1 结果包格式错误，2 发现违规"""
        try:
            result = audit_bundle(report_dir)
        except RelayError as e:
            return self.errors.log_and_show_error(e, "审计")
        for note in result.notes:
            print(f"   ℹ️ {note}")
        if result.clean:
            print(f"✅ 审计通过: 台账 {result.ledger_rows} 条，报文 {result.frames_scanned} 帧")
        else:
            print(f"❌ 审计发现 {len(result.violations)} 个问题:")
            for violation in result.violations:
                print(f"   - [{violation.check}] {violation.detail}")
        return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkd_relay.py",
        description="可信中继 QKD 网络 - 仿真、真实模式运行与审计",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-file", help="日志文件路径")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # sim
    parser_sim = subparsers.add_parser("sim", help="运行确定性仿真")
    parser_sim.add_argument("scenario", nargs="?", default=DEFAULT_SCENARIO, help="内置场景名或场景文件路径")
    parser_sim.add_argument("--seed", type=int, help="覆盖场景种子")
    parser_sim.add_argument("--duration", type=float, help="覆盖虚拟时长 (s)")
    parser_sim.add_argument("--compress", type=float, help="时间压缩倍数，仅记入结果包")
    parser_sim.add_argument("--out", default=DEFAULT_OUT_DIR, help="结果包目录")

    # node
    parser_node = subparsers.add_parser("node", help="运行单个真实模式节点")
    parser_node.add_argument("--config", required=True, help="节点配置文件")
    parser_node.add_argument("--out", required=True, help="节点状态与结果目录")

    # launch
    parser_launch = subparsers.add_parser("launch", help="在本机拉起全部节点进程")
    parser_launch.add_argument("scenario", nargs="?", default=DEFAULT_SCENARIO, help="内置场景名或场景文件路径")
    parser_launch.add_argument("--seed", type=int)
    parser_launch.add_argument("--duration", type=float)
    parser_launch.add_argument("--compress", type=float, help="时间压缩倍数（虚拟秒/墙钟秒）")
    parser_launch.add_argument("--out", default=DEFAULT_OUT_DIR)
    parser_launch.add_argument("--restart", action="append", default=[], metavar="NODE@SECONDS",
                               help="启动后若干墙钟秒杀掉并重启节点，可重复")

    # scenario-init
    parser_init = subparsers.add_parser("scenario-init", help="生成实测参数场景文件")
    parser_init.add_argument("--name", default=DEFAULT_SCENARIO)
    parser_init.add_argument("--seed", type=int, default=7)
    parser_init.add_argument("--duration", type=float, default=600.0)
    parser_init.add_argument("--out", help="输出文件或目录")

    # export / audit
    parser_export = subparsers.add_parser("export", help="导出 CSV、图表与 Excel 汇总")
    parser_export.add_argument("report", help="结果包目录")
    parser_export.add_argument("--out", required=True, help="导出目录")

    parser_audit = subparsers.add_parser("audit", help="审计密钥台账与报文日志")
    parser_audit.add_argument("report", help="结果包目录")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    controller = QkdRelayController()
    controller.setup_logging(getattr(logging, args.log_level), args.log_file)

    if args.command == "sim":
        return controller.run_sim(args.scenario, args.seed, args.duration, args.out, args.compress)

    if args.command == "node":
        return controller.run_node(args.config, args.out)

    if args.command == "launch":
        return controller.run_launch(args.scenario, args.seed, args.duration, args.compress, args.out,
                                     args.restart, args.log_level)

    if args.command == "scenario-init":
        return controller.scenario_init(args.name, args.seed, args.duration, args.out)

    if args.command == "export":
        return controller.export(args.report, args.out)

    if args.command == "audit":
        return controller.audit(args.report)

    parser.print_help()
    return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
