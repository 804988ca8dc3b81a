#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
字段映射工具类
遥测字段名与显示名称、单位之间的映射，供图表与 Excel 导出使用
"""

from typing import Dict, List, Optional

import pandas as pd


class FieldMapper:
    """遥测字段映射工具类"""

    # 字段名 -> (中文显示名, 单位)
    FIELD_LABELS = {
        'available_qk': ('可用量子密钥', '个'),
        'used_qk': ('已用量子密钥', '个'),
        'compromised_qk': ('受损量子密钥', '个'),
        'burned_qk': ('烧毁量子密钥', '个'),
        'available_nk': ('可用网络密钥', '个'),
        'used_nk': ('已用网络密钥', '个'),
        'skr_bps': ('成码率', 'bps'),
        'qber_pct': ('量子误码率', '%'),
        'bits': ('成码比特', 'bit'),
        'keys': ('成码密钥', '个'),
        'compromised': ('受损标记', ''),
        'transfers_completed': ('完成批次', '次'),
        'keys_failed': ('失败密钥', '个'),
        'batch_id': ('批次号', ''),
        'h': ('批次大小', '个'),
        'received': ('送达数量', '个'),
        'failed': ('失败数量', '个'),
    }

    # 汇总表列名 -> 中文列名
    SUMMARY_COLUMNS = {
        'link': '链路',
        'protocol': '协议',
        'length_km': '长度(km)',
        'loss_db': '损耗(dB)',
        'skr_mean': 'SKR均值(bps)',
        'skr_std': 'SKR标准差(bps)',
        'qber_mean': 'QBER均值(%)',
        'qber_std': 'QBER标准差(%)',
        'cycles': '周期数',
        'nk_delivered': '送达网络密钥',
        'rate_keys_per_s': '网络密钥速率(个/s)',
    }

    @classmethod
    def get_label(cls, field_name: str) -> str:
        """
        获取带单位的显示名称

        Args:
            field_name: 遥测字段名

        Returns:
            str: 如 "成码率 (bps)"；未知字段返回字段名本身
        """
        label = cls.FIELD_LABELS.get(field_name)
        if label is None:
            return field_name
        name, unit = label
        return f"{name} ({unit})" if unit else name

    @classmethod
    def get_unit(cls, field_name: str) -> Optional[str]:
        label = cls.FIELD_LABELS.get(field_name)
        return label[1] if label else None

    @classmethod
    def is_known_field(cls, field_name: str) -> bool:
        return field_name in cls.FIELD_LABELS

    @classmethod
    def rename_columns(cls, df: pd.DataFrame) -> pd.DataFrame:
        """把 DataFrame 的字段列与汇总列换成中文显示名"""
        mapping: Dict[str, str] = {}
        for column in df.columns:
            if column in cls.SUMMARY_COLUMNS:
                mapping[column] = cls.SUMMARY_COLUMNS[column]
            elif column in cls.FIELD_LABELS:
                mapping[column] = cls.get_label(column)
        return df.rename(columns=mapping)

    @classmethod
    def known_fields(cls, columns: List[str]) -> List[str]:
        return [column for column in columns if column in cls.FIELD_LABELS]
