import sqlite3

import database


def columns(path, table):
    with sqlite3.connect(path) as conn:
        return [row[1] for row in conn.execute(f'PRAGMA table_info({table})')]


def test_open_ledger_creates_and_migrates(tmp_path):
    run_dir = str(tmp_path / 'run')
    database.open_ledger(run_dir)
    path = database.db_path(run_dir)
    assert set(columns(path, 'runs')) >= {'id', 'config_hash', 'status', 'updated_at'}
    assert set(columns(path, 'stages')) >= {'name', 'config_hash', 'status', 'artifact', 'attempts', 'updated_at'}
    database.open_ledger(run_dir)
    assert columns(path, 'stages').count('attempts') == 1


def test_stage_lifecycle(tmp_path):
    run_dir = str(tmp_path)
    database.open_ledger(run_dir)
    assert not database.stage_done(run_dir, 'corpus', 'h1')

    database.begin_stage(run_dir, 'corpus', 'h1', 'corpus')
    assert not database.stage_done(run_dir, 'corpus', 'h1')
    database.finish_stage(run_dir, 'corpus')
    assert database.stage_done(run_dir, 'corpus', 'h1')
    assert not database.stage_done(run_dir, 'corpus', 'h2')

    database.begin_stage(run_dir, 'corpus', 'h2', 'corpus')
    database.finish_stage(run_dir, 'corpus', database.STATUS_FAILED)
    (row,) = database.stage_rows(run_dir)
    assert row['attempts'] == 2
    assert row['status'] == database.STATUS_FAILED
    assert row['config_hash'] == 'h2'


def test_runs_are_recorded(tmp_path):
    run_dir = str(tmp_path)
    database.open_ledger(run_dir)
    first = database.start_run(run_dir, 'abc')
    second = database.start_run(run_dir, 'abc')
    database.finish_run(run_dir, first)
    with database.get_connection(run_dir) as conn:
        rows = {r['id']: r['status'] for r in conn.execute('SELECT id, status FROM runs')}
        stamped = conn.execute('SELECT updated_at FROM runs WHERE id = ?', (first,)).fetchone()[0]
    assert rows == {first: database.STATUS_DONE, second: database.STATUS_RUNNING}
    assert stamped is not None


def test_missing_migration_folder_is_skipped(tmp_path):
    run_dir = str(tmp_path)
    database.create_schema(run_dir)
    database.apply_migrations(run_dir, scripts_folder=str(tmp_path / 'nowhere'))
    assert 'attempts' not in columns(database.db_path(run_dir), 'stages')
