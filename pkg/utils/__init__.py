# -*- coding: utf-8 -*-
"""
工具模块
提供错误处理与字段映射等辅助功能
"""

from .error_handler import ErrorHandler
from .field_mapper import FieldMapper

__all__ = ['ErrorHandler', 'FieldMapper']
