import json
import sqlite3
from pathlib import Path
from typing import List, Optional

from domain.events import CheckpointSaved, EpochCompleted, EvaluationCompleted, Event


class Database:
    """Semplice database SQLite per le metriche di addestramento."""

    def __init__(self, path: str = "./runs/metrics.db"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(self.path)
        self._create_tables()

    def _create_tables(self) -> None:
        cur = self.conn.cursor()
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS epochs (
                run_hash TEXT,
                epoch INTEGER,
                iteration INTEGER,
                timestamp TEXT,
                losses TEXT,
                learning_rates TEXT,
                PRIMARY KEY (run_hash, epoch)
            )
            """
        )
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS evaluations (
                run_hash TEXT,
                epoch INTEGER,
                timestamp TEXT,
                ap REAL,
                ap50 REAL,
                ap75 REAL,
                per_class TEXT,
                PRIMARY KEY (run_hash, epoch)
            )
            """
        )
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS checkpoints (
                run_hash TEXT,
                epoch INTEGER,
                timestamp TEXT,
                path TEXT,
                PRIMARY KEY (run_hash, epoch)
            )
            """
        )
        self.conn.commit()

    def save_epoch(self, event: EpochCompleted) -> None:
        self.conn.execute(
            """
            INSERT INTO epochs (run_hash, epoch, iteration, timestamp, losses, learning_rates)
            VALUES (?, ?, ?, ?, ?, ?)
            ON CONFLICT(run_hash, epoch) DO UPDATE SET
                iteration=excluded.iteration,
                timestamp=excluded.timestamp,
                losses=excluded.losses,
                learning_rates=excluded.learning_rates
            """,
            (
                event.run_hash,
                event.epoch,
                event.iteration,
                event.timestamp.isoformat(),
                json.dumps(event.losses),
                json.dumps(event.learning_rates),
            ),
        )
        self.conn.commit()

    def save_evaluation(self, event: EvaluationCompleted) -> None:
        self.conn.execute(
            """
            INSERT INTO evaluations (run_hash, epoch, timestamp, ap, ap50, ap75, per_class)
            VALUES (?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(run_hash, epoch) DO UPDATE SET
                timestamp=excluded.timestamp,
                ap=excluded.ap,
                ap50=excluded.ap50,
                ap75=excluded.ap75,
                per_class=excluded.per_class
            """,
            (
                event.run_hash,
                event.epoch,
                event.timestamp.isoformat(),
                event.metrics.get("ap", 0.0),
                event.metrics.get("ap50", 0.0),
                event.metrics.get("ap75", 0.0),
                json.dumps(event.per_class),
            ),
        )
        self.conn.commit()

    def save_checkpoint(self, event: CheckpointSaved) -> None:
        self.conn.execute(
            """
            INSERT INTO checkpoints (run_hash, epoch, timestamp, path)
            VALUES (?, ?, ?, ?)
            ON CONFLICT(run_hash, epoch) DO UPDATE SET
                timestamp=excluded.timestamp,
                path=excluded.path
            """,
            (event.run_hash, event.epoch, event.timestamp.isoformat(), event.path),
        )
        self.conn.commit()

    def record(self, event: Event) -> None:
        """Salva un evento nella tabella corrispondente (gli altri tipi vengono ignorati)"""
        if isinstance(event, EpochCompleted):
            self.save_epoch(event)
        elif isinstance(event, EvaluationCompleted):
            self.save_evaluation(event)
        elif isinstance(event, CheckpointSaved):
            self.save_checkpoint(event)

    def load_runs(self) -> List[str]:
        rows = self.conn.execute("SELECT DISTINCT run_hash FROM epochs ORDER BY run_hash").fetchall()
        return [r[0] for r in rows]

    def load_epochs(self, run_hash: Optional[str] = None) -> List[dict]:
        query = "SELECT run_hash, epoch, iteration, timestamp, losses, learning_rates FROM epochs"
        params: tuple = ()
        if run_hash is not None:
            query += " WHERE run_hash = ?"
            params = (run_hash,)
        rows = self.conn.execute(query + " ORDER BY run_hash, epoch", params).fetchall()
        return [
            {
                "run_hash": r[0],
                "epoch": r[1],
                "iteration": r[2],
                "timestamp": r[3],
                "losses": json.loads(r[4]),
                "learning_rates": json.loads(r[5]),
            }
            for r in rows
        ]

    def load_evaluations(self, run_hash: Optional[str] = None) -> List[dict]:
        query = "SELECT run_hash, epoch, timestamp, ap, ap50, ap75, per_class FROM evaluations"
        params: tuple = ()
        if run_hash is not None:
            query += " WHERE run_hash = ?"
            params = (run_hash,)
        rows = self.conn.execute(query + " ORDER BY run_hash, epoch", params).fetchall()
        return [
            {
                "run_hash": r[0],
                "epoch": r[1],
                "timestamp": r[2],
                "ap": r[3],
                "ap50": r[4],
                "ap75": r[5],
                "per_class": json.loads(r[6]),
            }
            for r in rows
        ]

    def load_checkpoints(self, run_hash: Optional[str] = None) -> List[dict]:
        query = "SELECT run_hash, epoch, timestamp, path FROM checkpoints"
        params: tuple = ()
        if run_hash is not None:
            query += " WHERE run_hash = ?"
            params = (run_hash,)
        rows = self.conn.execute(query + " ORDER BY run_hash, epoch", params).fetchall()
        return [{"run_hash": r[0], "epoch": r[1], "timestamp": r[2], "path": r[3]} for r in rows]

    def close(self) -> None:
        self.conn.close()
