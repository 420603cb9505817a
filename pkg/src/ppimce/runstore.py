from __future__ import annotations
import json
import time
from typing import Any, Dict, Iterable, List, Optional

import aiosqlite

from .config import RUNS_DB_PATH
from .dispatcher import ScheduleRecord
from .errors import DomainError

# ------------------ connection helpers ------------------

async def optimize_connection(conn):
    """Apply WAL journaling and relaxed sync to a connection."""
    await conn.execute("PRAGMA journal_mode=WAL")
    await conn.execute("PRAGMA synchronous=NORMAL")
    await conn.execute("PRAGMA temp_store=MEMORY")
    await conn.execute("PRAGMA foreign_keys=ON")


RUNS_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
  id INTEGER PRIMARY KEY AUTOINCREMENT,
  name TEXT NOT NULL,
  kind TEXT NOT NULL,
  created_at INTEGER NOT NULL,
  config_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS schedule_rows (
  run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
  seq INTEGER NOT NULL,
  kind TEXT NOT NULL,
  rd INTEGER NOT NULL,
  rs1 INTEGER NOT NULL,
  rs2 INTEGER NOT NULL,
  unit INTEGER,
  submit INTEGER,
  issue INTEGER,
  complete INTEGER,
  banked INTEGER NOT NULL DEFAULT 0,
  PRIMARY KEY (run_id, seq)
);
CREATE TABLE IF NOT EXISTS ledger_rows (
  run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
  phase TEXT NOT NULL,
  bytes INTEGER NOT NULL,
  messages INTEGER NOT NULL,
  PRIMARY KEY (run_id, phase)
);
CREATE TABLE IF NOT EXISTS reports (
  run_id INTEGER PRIMARY KEY REFERENCES runs(id) ON DELETE CASCADE,
  report_json TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_runs_name ON runs(name);
"""


async def init_runs_db(db_path: str = RUNS_DB_PATH):
    async with aiosqlite.connect(db_path) as db:
        await optimize_connection(db)
        for stmt in RUNS_SCHEMA.split(";\n"):
            if stmt.strip():
                await db.execute(stmt)
        await db.commit()


async def create_run(name: str, kind: str, config: Dict[str, Any], db_path: str = RUNS_DB_PATH) -> int:
    async with aiosqlite.connect(db_path) as db:
        await optimize_connection(db)
        cursor = await db.execute(
            "INSERT INTO runs (name, kind, created_at, config_json) VALUES (?, ?, ?, ?)",
            (name, kind, int(time.time()), json.dumps(config, sort_keys=True, default=str)))
        await db.commit()
        return cursor.lastrowid


async def write_schedule(run_id: int, records: Iterable[ScheduleRecord], db_path: str = RUNS_DB_PATH) -> int:
    rows = [(run_id, r.seq, r.inst.kind.value, r.inst.rd, r.inst.rs1, r.inst.rs2, r.unit, r.submit, r.issue,
             r.complete, int(r.banked)) for r in records]
    async with aiosqlite.connect(db_path) as db:
        await optimize_connection(db)
        await db.executemany(
            "INSERT OR REPLACE INTO schedule_rows "
            "(run_id, seq, kind, rd, rs1, rs2, unit, submit, issue, complete, banked) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)", rows)
        await db.commit()
    return len(rows)


async def write_ledger(run_id: int, counters: Dict[str, int], messages: Dict[str, int],
                       db_path: str = RUNS_DB_PATH):
    async with aiosqlite.connect(db_path) as db:
        await optimize_connection(db)
        await db.executemany(
            "INSERT OR REPLACE INTO ledger_rows (run_id, phase, bytes, messages) VALUES (?, ?, ?, ?)",
            [(run_id, phase, n, messages.get(phase, 0)) for phase, n in counters.items()])
        await db.commit()


async def write_report(run_id: int, report_json: str, db_path: str = RUNS_DB_PATH):
    async with aiosqlite.connect(db_path) as db:
        await optimize_connection(db)
        await db.execute("INSERT OR REPLACE INTO reports (run_id, report_json) VALUES (?, ?)",
                         (run_id, report_json))
        await db.commit()


async def resolve_run(ref: str, db_path: str = RUNS_DB_PATH) -> int:
    """A run id, or the newest run with that name."""
    async with aiosqlite.connect(db_path) as db:
        if ref.isdigit():
            cursor = await db.execute("SELECT id FROM runs WHERE id = ?", (int(ref),))
        else:
            cursor = await db.execute("SELECT id FROM runs WHERE name = ? ORDER BY id DESC LIMIT 1", (ref,))
        row = await cursor.fetchone()
    if row is None:
        raise DomainError(f"no stored run {ref!r}")
    return row[0]


async def read_report(run_id: int, db_path: str = RUNS_DB_PATH) -> Optional[str]:
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("SELECT report_json FROM reports WHERE run_id = ?", (run_id,))
        row = await cursor.fetchone()
        return row[0] if row else None


async def read_ledger(run_id: int, db_path: str = RUNS_DB_PATH) -> Dict[str, int]:
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("SELECT phase, bytes FROM ledger_rows WHERE run_id = ? ORDER BY phase", (run_id,))
        return {phase: n for phase, n in await cursor.fetchall()}


async def read_schedule(run_id: int, db_path: str = RUNS_DB_PATH) -> List[Dict[str, Any]]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute("SELECT * FROM schedule_rows WHERE run_id = ? ORDER BY seq", (run_id,))
        return [dict(row) for row in await cursor.fetchall()]


async def list_runs(db_path: str = RUNS_DB_PATH) -> List[Dict[str, Any]]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute("SELECT id, name, kind, created_at FROM runs ORDER BY id")
        return [dict(row) for row in await cursor.fetchall()]
