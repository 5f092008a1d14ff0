"""
Run ledger for mscan_lab.

Keeps a small SQLite table of every command run: which command, the config
hash and run directory, how it ended, and its headline metric.
"""

import json
import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)


class RunRegistry:
    """Manages the run ledger database."""

    def __init__(self, db_path: Union[str, Path] = "runs.db"):
        """Initialize database connection."""
        self.db_path = Path(db_path)
        self.conn = None
        self.init_db()

    def init_db(self):
        """Create the runs table if it doesn't exist."""
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(str(self.db_path))
        self.conn.row_factory = sqlite3.Row
        cursor = self.conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                run_dir TEXT NOT NULL,
                seeds TEXT,
                status TEXT NOT NULL DEFAULT 'running',
                exit_code INTEGER,
                headline REAL,
                error TEXT,
                started_at TEXT NOT NULL,
                finished_at TEXT
            )
        """)
        cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_hash ON runs (config_hash)")
        self.conn.commit()

    def start_run(self, command: str, config_hash: str, run_dir: Union[str, Path],
                  seeds: Optional[List[int]] = None) -> int:
        """Record a run that has just started; returns its id."""
        cursor = self.conn.cursor()
        cursor.execute("""
            INSERT INTO runs (command, config_hash, run_dir, seeds, started_at)
            VALUES (?, ?, ?, ?, ?)
        """, (command, config_hash, str(run_dir), json.dumps(seeds or []),
              datetime.now().isoformat(timespec='seconds')))
        self.conn.commit()
        return cursor.lastrowid

    def finish_run(self, run_id: int, exit_code: int, headline: Optional[float] = None,
                   error: Optional[str] = None):
        """Mark a run finished with its exit code and headline metric."""
        status = 'ok' if exit_code == 0 else 'failed'
        cursor = self.conn.cursor()
        cursor.execute("""
            UPDATE runs
            SET status = ?, exit_code = ?, headline = ?, error = ?, finished_at = ?
            WHERE id = ?
        """, (status, exit_code, headline, error, datetime.now().isoformat(timespec='seconds'), run_id))
        self.conn.commit()

    def get_runs(self, command: Optional[str] = None, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        """Runs newest first, optionally for one command."""
        query = "SELECT * FROM runs"
        params: List[Any] = []
        if command:
            query += " WHERE command = ?"
            params.append(command)
        query += " ORDER BY id DESC"
        if limit:
            query += " LIMIT ?"
            params.append(limit)
        cursor = self.conn.cursor()
        cursor.execute(query, params)
        runs = []
        for row in cursor.fetchall():
            run = dict(row)
            run['seeds'] = json.loads(run['seeds']) if run['seeds'] else []
            runs.append(run)
        return runs

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        cursor = self.conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = cursor.fetchone()
        if row:
            run = dict(row)
            run['seeds'] = json.loads(run['seeds']) if run['seeds'] else []
            return run
        return None

    def get_stats(self) -> Dict[str, Any]:
        """Run counts overall and per status."""
        cursor = self.conn.cursor()
        cursor.execute("SELECT COUNT(*) FROM runs")
        total = cursor.fetchone()[0]
        cursor.execute("SELECT status, COUNT(*) FROM runs GROUP BY status")
        by_status = {row[0]: row[1] for row in cursor.fetchall()}
        return {'total_runs': total, 'by_status': by_status}

    def close(self):
        """Close database connection."""
        if self.conn:
            self.conn.close()
            self.conn = None
