# -*- coding: utf-8 -*-
"""
可信中继 QKD 网络
密钥表、链路仿真、中继协议、遥测、仿真与真实模式运行
"""

from .audit import AuditResult, audit_bundle
from .realmode import NetworkLauncher, NodeRuntime, launch_network, run_node
from .report_export import export_report, format_summary_table, load_bundle
from .scenario import Scenario, default_scenario, load_scenario_file
from .simharness import SimReport, run_sim

__all__ = [
    'AuditResult', 'audit_bundle',
    'NetworkLauncher', 'NodeRuntime', 'launch_network', 'run_node',
    'export_report', 'format_summary_table', 'load_bundle',
    'Scenario', 'default_scenario', 'load_scenario_file',
    'SimReport', 'run_sim',
]
