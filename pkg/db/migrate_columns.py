import sqlite3
import sys

DB_NAME = 'state.db'

TABLES = ('runs', 'stages')


def get_connection(path=DB_NAME):
    return sqlite3.connect(path)


def migrate_add_columns(path=DB_NAME):
    conn = get_connection(path)
    try:
        c = conn.cursor()

        c.execute("PRAGMA table_info(stages)")
        existing = [row[1] for row in c.fetchall()]
        if existing and 'attempts' not in existing:
            c.execute("""
                ALTER TABLE stages
                ADD COLUMN attempts INTEGER NOT NULL
                DEFAULT 0
            """)

        for table in TABLES:
            c.execute(f"PRAGMA table_info({table})")
            existing = [row[1] for row in c.fetchall()]
            if not existing:
                continue

            # sqlite rejects non-constant defaults on ALTER TABLE; triggers fill it in.
            if 'updated_at' not in existing:
                c.execute(f"""
                    ALTER TABLE {table}
                    ADD COLUMN updated_at TEXT
                """)

            for event in ('INSERT', 'UPDATE'):
                trig = f"{table}_updated_at_{event.lower()}"
                c.execute(f"DROP TRIGGER IF EXISTS {trig}")
                c.execute(f"""
                    CREATE TRIGGER {trig}
                    AFTER {event} ON {table}
                    FOR EACH ROW
                    BEGIN
                        UPDATE {table}
                        SET updated_at = CURRENT_TIMESTAMP
                        WHERE rowid = NEW.rowid;
                    END;
                """)

        conn.commit()
    finally:
        conn.close()


if __name__ == '__main__':
    migrate_add_columns(sys.argv[1] if len(sys.argv) > 1 else DB_NAME)
