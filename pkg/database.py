import json
import logging
import aiosqlite
from datetime import datetime

import config
from services import SweepResult, SweepRow, CSV_COLUMNS

logger = logging.getLogger(__name__)


class ResultStore:
    def __init__(self, db_path=None):
        self.db_path = db_path or config.DATABASE_PATH
        self._connection = None

    async def connect(self, init_tables=True):
        self._connection = await aiosqlite.connect(self.db_path)
        await self._connection.execute('PRAGMA foreign_keys = ON')
        logger.info(f"💾 Using local SQLite result store: {self.db_path}")
        if init_tables:
            await self._create_tables()

    async def close(self):
        if self._connection:
            await self._connection.close()
            self._connection = None

    async def __aenter__(self):
        await self.connect()
        return self

    async def __aexit__(self, *exc):
        await self.close()

    async def execute(self, query, params=None):
        return await self._connection.execute(query, params or ())

    async def commit(self):
        await self._connection.commit()

    async def _create_tables(self):
        await self.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                created_at TEXT NOT NULL,
                command TEXT NOT NULL,
                seed TEXT,
                config_json TEXT,
                complete INTEGER NOT NULL
            )
        ''')
        await self.execute('''
            CREATE TABLE IF NOT EXISTS rows (
                run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
                position INTEGER NOT NULL,
                steps INTEGER NOT NULL,
                method TEXT NOT NULL,
                mean REAL,
                std_error REAL,
                exact_value REAL,
                bias REAL,
                var_per_shot REAL,
                K INTEGER,
                bias_bound REAL,
                PRIMARY KEY (run_id, position)
            )
        ''')
        await self.commit()

    async def store_sweep(self, result: SweepResult, command: str, seed=None, config_data=None) -> int:
        """Persist a sweep and its rows; returns the run id."""
        cursor = await self.execute(
            'INSERT INTO runs (created_at, command, seed, config_json, complete) VALUES (?, ?, ?, ?, ?)',
            (datetime.now().isoformat(timespec='seconds'), command, None if seed is None else str(seed),
             json.dumps(config_data) if config_data is not None else None, int(result.complete))
        )
        run_id = cursor.lastrowid
        for position, row in enumerate(result.rows):
            await self.execute(
                f'INSERT INTO rows (run_id, position, {", ".join(CSV_COLUMNS)}) '
                f'VALUES (?, ?, {", ".join("?" for _ in CSV_COLUMNS)})',
                (run_id, position, *(getattr(row, name) for name in CSV_COLUMNS))
            )
        await self.commit()
        logger.info(f"💾 Stored run {run_id} ({len(result.rows)} rows, command={command})")
        return run_id

    async def list_runs(self, limit=20):
        cursor = await self.execute(
            'SELECT id, created_at, command, seed, complete, '
            '(SELECT COUNT(*) FROM rows WHERE rows.run_id = runs.id) '
            'FROM runs ORDER BY id DESC LIMIT ?',
            (limit,)
        )
        return [
            {'id': r[0], 'created_at': r[1], 'command': r[2], 'seed': r[3],
             'complete': bool(r[4]), 'rows': r[5]}
            for r in await cursor.fetchall()
        ]

    async def get_rows(self, run_id) -> SweepResult:
        cursor = await self.execute('SELECT complete FROM runs WHERE id = ?', (run_id,))
        run = await cursor.fetchone()
        if run is None:
            raise KeyError(f"No stored run with id {run_id}")
        cursor = await self.execute(
            f'SELECT {", ".join(CSV_COLUMNS)} FROM rows WHERE run_id = ? ORDER BY position',
            (run_id,)
        )
        rows = [SweepRow(**dict(zip(CSV_COLUMNS, r))) for r in await cursor.fetchall()]
        return SweepResult(tuple(rows), bool(run[0]))
