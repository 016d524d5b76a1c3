"""
Probe-run store.
SQLite table of ProbeRun records so `report` can aggregate across invocations.
"""

import aiosqlite
import os
from typing import List, Optional, Sequence

from ..config import config
from ..models import ProbeRun
from .storage import write_jsonl


class RunStore:
    """Database operations on probe runs."""

    def __init__(self, db_path: Optional[str] = None):
        self.db_path = db_path or config.RUNS_DB
        os.makedirs(os.path.dirname(os.path.abspath(self.db_path)), exist_ok=True)

    async def init(self) -> None:
        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("""
                CREATE TABLE IF NOT EXISTS probe_runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    task TEXT NOT NULL,
                    model TEXT NOT NULL,
                    mode TEXT NOT NULL,
                    fold INTEGER NOT NULL CHECK(fold >= 0),
                    seed_index INTEGER NOT NULL CHECK(seed_index >= 0),
                    metric TEXT NOT NULL,
                    value REAL NOT NULL,
                    timestamp TEXT NOT NULL,
                    UNIQUE(task, model, mode, fold, seed_index, metric)
                )
            """)
            await db.execute("""
                CREATE INDEX IF NOT EXISTS idx_task_model
                ON probe_runs(task, model, mode)
            """)
            await db.commit()

    # ==================== CRUD ====================

    async def insert_runs(self, runs: Sequence[ProbeRun]) -> int:
        """Insert runs; a rerun of the same (task, model, mode, fold, seed, metric) replaces the old row."""
        async with aiosqlite.connect(self.db_path) as db:
            await db.executemany(
                """
                INSERT OR REPLACE INTO probe_runs
                (task, model, mode, fold, seed_index, metric, value, timestamp)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                """,
                [(r.task, r.model, r.mode, r.fold, r.seed_index, r.metric, r.value, r.timestamp.isoformat())
                 for r in runs]
            )
            await db.commit()
        return len(runs)

    async def find(
        self,
        task: Optional[str] = None,
        model: Optional[str] = None,
        mode: Optional[str] = None,
    ) -> List[ProbeRun]:
        conditions, params = [], []
        if task:
            conditions.append("task = ?")
            params.append(task)
        if model:
            conditions.append("model = ?")
            params.append(model)
        if mode:
            conditions.append("mode = ?")
            params.append(mode)
        where = f"WHERE {' AND '.join(conditions)} " if conditions else ""

        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            cursor = await db.execute(
                f"SELECT * FROM probe_runs {where}"
                f"ORDER BY task, model, mode, fold, seed_index, metric",
                params
            )
            rows = await cursor.fetchall()
            return [ProbeRun.from_row(dict(row)) for row in rows]

    # ==================== Reports ====================

    async def summary(self) -> List[dict]:
        """Per (task, model, mode, metric): run count, mean, min, max."""
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            cursor = await db.execute(
                "SELECT task, model, mode, metric, COUNT(*) as count, AVG(value) as mean, "
                "MIN(value) as min, MAX(value) as max FROM probe_runs "
                "GROUP BY task, model, mode, metric ORDER BY task, model, mode"
            )
            return [dict(row) for row in await cursor.fetchall()]

    async def export_jsonl(self, path: str, task: Optional[str] = None) -> int:
        runs = await self.find(task=task)
        write_jsonl(path, (r.to_dict() for r in runs))
        return len(runs)
