# -*- coding: utf-8 -*-
"""
QKD 中继网络 - 统一数据库管理模块
保存密钥使用台账、经典信道报文日志、遥测点、批次记录、节点配置与运行日志

真实模式每个节点一个数据库文件；审计时把报告目录中的 CSV 载入内存库再用 SQL 检查。
"""

import json
import logging
import os
import sqlite3
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd

# 常量定义
DEFAULT_DB_NAME = 'qkd_relay.db'
MEMORY_DB = ':memory:'
DEFAULT_RUN_LOG_LIMIT = 100
DEFAULT_CHUNK_SIZE = 2000

# 台账与报文日志的导出列（CSV 与数据库列的对应关系）
LEDGER_COLUMNS = ['node_id', 'scope', 'key_id', 'action', 'batch_id', 'index', 't']
WIRE_COLUMNS = ['node_id', 't', 'channel', 'direction', 'msg_type', 'sequence', 'status', 'frame']
BATCH_COLUMNS = ['batch_id', 'h', 'min_count', 'started_t', 'completed_t', 'received', 'shortfall', 'status']

STATS_TABLES = ['key_usage', 'wire_log', 'telemetry_points', 'batches', 'system_config', 'run_logs']


class RelayDatabase:
    """中继网络数据库管理器"""

    def __init__(self, db_path: str = None):
        """
        初始化数据库管理器

        Args:
            db_path: 数据库文件路径；':memory:' 使用进程内共享连接
        """
        if db_path is None:
            currentDir = os.path.dirname(os.path.abspath(__file__))
            self.db_path = os.path.join(currentDir, DEFAULT_DB_NAME)
        else:
            self.db_path = db_path

        self.logger = logging.getLogger(__name__)
        self._shared_conn: Optional[sqlite3.Connection] = None

        if self.db_path != MEMORY_DB:
            dbDir = os.path.dirname(self.db_path)
            if dbDir:
                os.makedirs(dbDir, exist_ok=True)

        self._init_database()

    def _init_database(self):
        """
        初始化数据库表结构和索引

        Raises:
            sqlite3.Error: 初始化失败
        """
        conn = self.get_connection()
        try:
            self._create_tables(conn)
            self._create_indexes(conn)
            conn.commit()
            self.logger.info(f"数据库初始化完成: {self.db_path}")
        except sqlite3.Error as e:
            self.logger.error(f"数据库初始化失败: {e}")
            raise
        finally:
            self._release(conn)

    def get_connection(self) -> sqlite3.Connection:
        """
        获取数据库连接

        Returns:
            sqlite3.Connection: 使用 Row 工厂的连接
        """
        if self.db_path == MEMORY_DB:
            if self._shared_conn is None:
                self._shared_conn = sqlite3.connect(MEMORY_DB, check_same_thread=False)
                self._shared_conn.row_factory = sqlite3.Row
            return self._shared_conn
        conn = sqlite3.connect(self.db_path, timeout=30)
        conn.row_factory = sqlite3.Row
        conn.execute('PRAGMA foreign_keys = ON')
        conn.execute('PRAGMA journal_mode = WAL')
        return conn

    def _release(self, conn: sqlite3.Connection):
        if conn is not self._shared_conn:
            conn.close()

    def close(self):
        if self._shared_conn is not None:
            self._shared_conn.close()
            self._shared_conn = None

    def _configure_bulk_pragmas(self, conn: sqlite3.Connection) -> Dict[str, Optional[str]]:
        """为批量写入配置高性能PRAGMA，返回原始配置以便恢复"""
        pragmas = {
            'synchronous': 'OFF',
            'temp_store': 'MEMORY'
        }
        previous = {}
        try:
            for key, value in pragmas.items():
                try:
                    prev_row = conn.execute(f"PRAGMA {key}").fetchone()
                    previous[key] = prev_row[0] if prev_row else None
                except sqlite3.Error:
                    previous[key] = None
                conn.execute(f"PRAGMA {key} = {value}")
        except sqlite3.Error as e:
            self.logger.warning(f"配置批量PRAGMA失败: {e}")
        return previous

    def _restore_pragmas(self, conn: sqlite3.Connection, previous: Dict[str, Optional[str]]):
        """恢复批量写入前的PRAGMA设置"""
        for key, value in (previous or {}).items():
            if value in (None, ''):
                continue
            try:
                conn.execute(f"PRAGMA {key} = {value}")
            except sqlite3.Error as e:
                self.logger.warning(f"恢复PRAGMA {key} 失败: {e}")

    def _create_tables(self, conn: sqlite3.Connection):
        """创建全部业务表和系统表"""
        cursor = conn.cursor()

        # 密钥使用台账（只追加）
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS key_usage (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            node_id TEXT NOT NULL,
            scope TEXT NOT NULL,
            key_id INTEGER NOT NULL,
            action TEXT NOT NULL,
            batch_id INTEGER DEFAULT -1,
            hop_index INTEGER DEFAULT -1,
            t REAL DEFAULT 0
        )
        ''')

        # 经典信道报文日志（帧内容以十六进制保存，供明文扫描）
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS wire_log (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            node_id TEXT NOT NULL,
            t REAL DEFAULT 0,
            channel TEXT NOT NULL,
            direction TEXT NOT NULL,
            msg_type INTEGER,
            sequence INTEGER,
            status TEXT,
            frame TEXT
        )
        ''')

        # 遥测点
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS telemetry_points (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            measurement TEXT NOT NULL,
            tags_json TEXT,
            fields_json TEXT,
            timestamp_ns INTEGER NOT NULL
        )
        ''')

        # 批次记录
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS batches (
            batch_id INTEGER PRIMARY KEY,
            h INTEGER,
            min_count INTEGER,
            started_t REAL,
            completed_t REAL,
            received INTEGER,
            shortfall INTEGER,
            status TEXT
        )
        ''')

        # 系统配置表
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS system_config (
            config_key TEXT PRIMARY KEY,
            config_value TEXT,
            config_type TEXT DEFAULT 'string',
            description TEXT,
            updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
        ''')

        # 运行日志表
        cursor.execute('''
        CREATE TABLE IF NOT EXISTS run_logs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_name TEXT,
            verb TEXT,
            status TEXT,
            detail TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
        ''')

    def _create_indexes(self, conn: sqlite3.Connection):
        """创建审计查询用的索引"""
        cursor = conn.cursor()
        indexes = [
            "CREATE INDEX IF NOT EXISTS idx_key_usage_key ON key_usage(scope, key_id, action)",
            "CREATE INDEX IF NOT EXISTS idx_key_usage_node ON key_usage(node_id)",
            "CREATE INDEX IF NOT EXISTS idx_wire_log_node ON wire_log(node_id, channel)",
            "CREATE INDEX IF NOT EXISTS idx_telemetry_series ON telemetry_points(measurement, timestamp_ns)",
        ]
        for sql in indexes:
            try:
                cursor.execute(sql)
            except sqlite3.Error as e:
                self.logger.warning(f"创建索引失败: {e}")

    # ------------------------------------------------------------------ #
    # 通用操作
    # ------------------------------------------------------------------ #
    def execute_query(self, sql: str, params: tuple = None) -> List[Dict[str, Any]]:
        """
        执行查询并返回结果

        Returns:
            List[Dict[str, Any]]: 每行为字典
        """
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute(sql, params or ())
            return [dict(row) for row in cursor.fetchall()]
        except sqlite3.Error as e:
            self.logger.error(f"查询执行失败: {e}")
            raise
        finally:
            self._release(conn)

    def execute_update(self, sql: str, params: tuple = None) -> bool:
        """执行单条 INSERT/UPDATE/DELETE，失败返回 False"""
        conn = self.get_connection()
        try:
            conn.execute(sql, params or ())
            conn.commit()
            return True
        except sqlite3.Error as e:
            self.logger.error(f"更新执行失败: {e}")
            return False
        finally:
            self._release(conn)

    def execute_many(self, sql: str, params_list: List[tuple], chunk_size: int = DEFAULT_CHUNK_SIZE,
                     optimize: bool = True) -> bool:
        """批量执行操作，支持分块与PRAGMA优化"""
        if not params_list:
            return True
        conn = self.get_connection()
        previous_pragmas: Dict[str, Optional[str]] = {}
        try:
            if optimize:
                previous_pragmas = self._configure_bulk_pragmas(conn)
            cursor = conn.cursor()
            for i in range(0, len(params_list), chunk_size or len(params_list)):
                cursor.executemany(sql, params_list[i:i + chunk_size] if chunk_size else params_list)
            conn.commit()
            return True
        except sqlite3.Error as e:
            self.logger.error(f"批量执行失败: {e}")
            conn.rollback()
            return False
        finally:
            if optimize and previous_pragmas:
                self._restore_pragmas(conn, previous_pragmas)
            self._release(conn)

    def get_dataframe(self, sql: str, params: tuple = None) -> pd.DataFrame:
        """执行查询并返回DataFrame"""
        conn = self.get_connection()
        try:
            return pd.read_sql_query(sql, conn, params=params or ())
        except Exception as e:
            self.logger.error(f"DataFrame查询失败: {e}")
            raise
        finally:
            self._release(conn)

    # ------------------------------------------------------------------ #
    # 台账 / 报文 / 遥测 / 批次
    # ------------------------------------------------------------------ #
    def insert_ledger_rows(self, rows: Iterable[Dict[str, Any]]) -> bool:
        sql = '''
        INSERT INTO key_usage (node_id, scope, key_id, action, batch_id, hop_index, t)
        VALUES (?, ?, ?, ?, ?, ?, ?)
        '''
        return self.execute_many(sql, [
            (row['node_id'], row['scope'], int(row['key_id']), row['action'],
             int(row.get('batch_id', -1)), int(row.get('index', -1)), float(row.get('t', 0.0)))
            for row in rows
        ])

    def insert_wire_rows(self, rows: Iterable[Dict[str, Any]]) -> bool:
        sql = '''
        INSERT INTO wire_log (node_id, t, channel, direction, msg_type, sequence, status, frame)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        '''
        return self.execute_many(sql, [tuple(row[column] for column in WIRE_COLUMNS) for row in rows])

    def insert_telemetry_points(self, points: Iterable) -> bool:
        """points 为 SeriesPoint 序列"""
        sql = '''
        INSERT INTO telemetry_points (measurement, tags_json, fields_json, timestamp_ns)
        VALUES (?, ?, ?, ?)
        '''
        return self.execute_many(sql, [
            (p.measurement, json.dumps(p.tags, sort_keys=True), json.dumps(p.fields, sort_keys=True),
             int(p.timestamp_ns))
            for p in points
        ], optimize=False)

    def upsert_batches(self, rows: Iterable[Dict[str, Any]]) -> bool:
        sql = f'''
        INSERT OR REPLACE INTO batches ({', '.join(BATCH_COLUMNS)})
        VALUES ({', '.join('?' for _ in BATCH_COLUMNS)})
        '''
        return self.execute_many(sql, [tuple(row[column] for column in BATCH_COLUMNS) for row in rows])

    def get_ledger_frame(self, node_id: str = None) -> pd.DataFrame:
        sql = '''
        SELECT node_id, scope, key_id, action, batch_id, hop_index AS "index", t
        FROM key_usage {where} ORDER BY id
        '''
        if node_id:
            return self.get_dataframe(sql.format(where="WHERE node_id = ?"), (node_id,))
        return self.get_dataframe(sql.format(where=""))

    def get_wire_frame(self, node_id: str = None) -> pd.DataFrame:
        sql = f"SELECT {', '.join(WIRE_COLUMNS)} FROM wire_log {{where}} ORDER BY id"
        if node_id:
            return self.get_dataframe(sql.format(where="WHERE node_id = ?"), (node_id,))
        return self.get_dataframe(sql.format(where=""))

    def get_batches_frame(self) -> pd.DataFrame:
        return self.get_dataframe(f"SELECT {', '.join(BATCH_COLUMNS)} FROM batches ORDER BY batch_id")

    def get_telemetry_rows(self) -> List[Dict[str, Any]]:
        rows = self.execute_query(
            "SELECT measurement, tags_json, fields_json, timestamp_ns FROM telemetry_points ORDER BY id")
        return [{
            'measurement': row['measurement'],
            'tags': json.loads(row['tags_json'] or '{}'),
            'fields': json.loads(row['fields_json'] or '{}'),
            'timestamp_ns': row['timestamp_ns'],
        } for row in rows]

    # ------------------------------------------------------------------ #
    # 审计查询
    # ------------------------------------------------------------------ #
    def find_node_reuse(self) -> List[Dict[str, Any]]:
        """同一节点同一密钥被加密/解密使用超过一次"""
        sql = '''
        SELECT node_id, scope, key_id, COUNT(*) AS uses
        FROM key_usage
        WHERE action IN ('encrypt', 'decrypt')
        GROUP BY node_id, scope, key_id
        HAVING COUNT(*) > 1
        ORDER BY scope, key_id, node_id
        '''
        return self.execute_query(sql)

    def find_link_reuse(self) -> List[Dict[str, Any]]:
        """同一链路密钥在全网出现多于一次加密或多于一次解密"""
        sql = '''
        SELECT scope, key_id, action, COUNT(*) AS uses
        FROM key_usage
        WHERE action IN ('encrypt', 'decrypt') AND scope != 'nk'
        GROUP BY scope, key_id, action
        HAVING COUNT(*) > 1
        ORDER BY scope, key_id, action
        '''
        return self.execute_query(sql)

    # ------------------------------------------------------------------ #
    # 系统配置与运行日志
    # ------------------------------------------------------------------ #
    def get_system_config(self, config_key: str) -> Optional[str]:
        """获取系统配置"""
        result = self.execute_query("SELECT config_value FROM system_config WHERE config_key = ?", (config_key,))
        return result[0]['config_value'] if result else None

    def set_system_config(self, config_key: str, config_value: str,
                          config_type: str = 'string', description: str = None) -> bool:
        """设置系统配置"""
        sql = '''
        INSERT OR REPLACE INTO system_config (config_key, config_value, config_type, description, updated_at)
        VALUES (?, ?, ?, ?, CURRENT_TIMESTAMP)
        '''
        return self.execute_update(sql, (config_key, config_value, config_type, description))

    def log_run(self, run_name: str, verb: str, status: str, detail: str = None) -> bool:
        """记录运行日志"""
        sql = "INSERT INTO run_logs (run_name, verb, status, detail) VALUES (?, ?, ?, ?)"
        return self.execute_update(sql, (run_name, verb, status, detail))

    def get_run_logs(self, limit: int = DEFAULT_RUN_LOG_LIMIT) -> List[Dict[str, Any]]:
        return self.execute_query("SELECT * FROM run_logs ORDER BY id DESC LIMIT ?", (limit,))

    def get_database_stats(self) -> Dict[str, Any]:
        """
        获取数据库统计信息

        Returns:
            Dict[str, Any]: 各表记录数和数据库大小
        """
        stats = {}
        for table in STATS_TABLES:
            result = self.execute_query(f"SELECT COUNT(*) as count FROM {table}")
            stats[f"{table}_count"] = result[0]['count'] if result else 0

        try:
            fileSizeBytes = os.path.getsize(self.db_path) if self.db_path != MEMORY_DB else 0
            stats['db_size_mb'] = fileSizeBytes / (1024 * 1024)
        except OSError:
            stats['db_size_mb'] = 0
        return stats
