"""sqlite run ledger: which plan stages finished, under which config hash."""
import contextlib
import logging
import os
import runpy
import sqlite3
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

DB_NAME = 'state.db'

STATUS_RUNNING = 'running'
STATUS_DONE = 'done'
STATUS_FAILED = 'failed'


def db_path(run_dir: str) -> str:
    return os.path.join(run_dir, DB_NAME)


def get_connection(run_dir: str) -> sqlite3.Connection:
    conn = sqlite3.connect(db_path(run_dir))
    conn.row_factory = sqlite3.Row
    return conn


@contextlib.contextmanager
def _ledger(run_dir: str):
    with contextlib.closing(get_connection(run_dir)) as conn:
        with conn:
            yield conn


def create_schema(run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with _ledger(run_dir) as conn:
        c = conn.cursor()

        # RUNS
        c.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                config_hash TEXT NOT NULL,
                status TEXT NOT NULL
            )
        ''')

        # STAGES
        c.execute('''
            CREATE TABLE IF NOT EXISTS stages (
                name TEXT PRIMARY KEY,
                config_hash TEXT NOT NULL,
                status TEXT NOT NULL,
                artifact TEXT
            )
        ''')


def apply_migrations(run_dir: str, scripts_folder: Optional[str] = None) -> None:
    if scripts_folder is None:
        scripts_folder = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'db')

    if not os.path.isdir(scripts_folder):
        return

    script_path = os.path.join(scripts_folder, 'migrate_columns.py')
    if os.path.isfile(script_path):
        logger.debug('[ledger migration] running migrate_columns.py on %s', db_path(run_dir))
        namespace = runpy.run_path(script_path)
        namespace['migrate_add_columns'](db_path(run_dir))


def open_ledger(run_dir: str) -> None:
    create_schema(run_dir)
    apply_migrations(run_dir)


def start_run(run_dir: str, config_hash: str) -> int:
    with _ledger(run_dir) as conn:
        cur = conn.execute('INSERT INTO runs (config_hash, status) VALUES (?, ?)',
                           (config_hash, STATUS_RUNNING))
        return int(cur.lastrowid)


def finish_run(run_dir: str, run_id: int, status: str = STATUS_DONE) -> None:
    with _ledger(run_dir) as conn:
        conn.execute('UPDATE runs SET status = ? WHERE id = ?', (status, run_id))


def stage_done(run_dir: str, name: str, config_hash: str) -> bool:
    with _ledger(run_dir) as conn:
        row = conn.execute('SELECT config_hash, status FROM stages WHERE name = ?', (name,)).fetchone()
    return row is not None and row['status'] == STATUS_DONE and row['config_hash'] == config_hash


def begin_stage(run_dir: str, name: str, config_hash: str, artifact: str) -> None:
    with _ledger(run_dir) as conn:
        conn.execute('''
            INSERT INTO stages (name, config_hash, status, artifact, attempts)
            VALUES (?, ?, ?, ?, 1)
            ON CONFLICT(name) DO UPDATE SET
                config_hash = excluded.config_hash,
                status = excluded.status,
                artifact = excluded.artifact,
                attempts = stages.attempts + 1
        ''', (name, config_hash, STATUS_RUNNING, artifact))


def finish_stage(run_dir: str, name: str, status: str = STATUS_DONE) -> None:
    with _ledger(run_dir) as conn:
        conn.execute('UPDATE stages SET status = ? WHERE name = ?', (status, name))


def stage_rows(run_dir: str) -> List[Dict[str, object]]:
    with _ledger(run_dir) as conn:
        rows = conn.execute('SELECT name, config_hash, status, artifact, attempts '
                            'FROM stages ORDER BY name').fetchall()
    return [dict(r) for r in rows]


if __name__ == '__main__':
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else '.'
    open_ledger(target)
    print(f'[ledger] schema ready in {db_path(target)}')
