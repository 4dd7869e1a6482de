"""Pluggable persistence: an in-memory store and a JSON-lines file store.

Both expose the same small contract used by the other modules:

* namespaced records with snapshot reads and an atomic
  :meth:`MemoryBackend.compare_and_set`,
* append-only logs whose reads are always a consistent prefix.

Values must be JSON-compatible.  The file backend journals every mutation
to ``journal.jsonl`` and periodically folds the journal into
``snapshot.json``; reopening the directory replays both.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class MemoryBackend:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._records: dict[str, dict[str, Any]] = {}
        self._logs: dict[str, list[Any]] = {}

    # -- records ------------------------------------------------------------

    def get(self, ns: str, key: str) -> Any | None:
        with self._lock:
            value = self._records.get(ns, {}).get(key)
            return copy.deepcopy(value)

    def put(self, ns: str, key: str, value: Any) -> None:
        with self._lock:
            self._apply({"op": "put", "ns": ns, "key": key, "value": value})

    def delete(self, ns: str, key: str) -> bool:
        with self._lock:
            if key not in self._records.get(ns, {}):
                return False
            self._apply({"op": "delete", "ns": ns, "key": key})
            return True

    def compare_and_set(self, ns: str, key: str, expected: Any, new: Any) -> bool:
        """Replace ``key`` with ``new`` only if it currently equals ``expected``.

        ``expected=None`` means the key must be absent.
        """
        with self._lock:
            current = self._records.get(ns, {}).get(key)
            if current != expected:
                return False
            self._apply({"op": "put", "ns": ns, "key": key, "value": new})
            return True

    def items(self, ns: str) -> dict[str, Any]:
        with self._lock:
            return copy.deepcopy(self._records.get(ns, {}))

    # -- logs ---------------------------------------------------------------

    def append(self, log: str, record: Any) -> int:
        with self._lock:
            self._apply({"op": "append", "log": log, "value": record})
            return len(self._logs[log])

    def read_log(self, log: str) -> list[Any]:
        with self._lock:
            return copy.deepcopy(self._logs.get(log, []))

    def close(self) -> None:
        pass

    def _apply(self, entry: dict) -> None:
        self._mutate(entry)

    def _mutate(self, entry: dict) -> None:
        op = entry["op"]
        if op == "put":
            self._records.setdefault(entry["ns"], {})[entry["key"]] = copy.deepcopy(entry["value"])
        elif op == "delete":
            self._records.get(entry["ns"], {}).pop(entry["key"], None)
        elif op == "append":
            self._logs.setdefault(entry["log"], []).append(copy.deepcopy(entry["value"]))
        else:
            raise ValueError(f"unknown journal op {op!r}")


class FileBackend(MemoryBackend):
    """Durable backend rooted at ``data_dir``.

    Every mutation is appended to the journal (and fsynced when ``fsync``
    is set) before it becomes visible.  A snapshot is written every
    ``snapshot_every`` journal entries and on :meth:`close`.
    """

    SNAPSHOT = "snapshot.json"
    JOURNAL = "journal.jsonl"

    def __init__(self, data_dir: str | os.PathLike, *, fsync: bool = True, snapshot_every: int = 1000) -> None:
        super().__init__()
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._fsync = fsync
        self._snapshot_every = snapshot_every
        self._pending = 0
        self._generation = 0
        self._load()
        journal = self.data_dir / self.JOURNAL
        fresh = not journal.exists() or journal.stat().st_size == 0
        self._journal = open(journal, "a", encoding="utf-8")
        if fresh:
            self._write_header()

    def _load(self) -> None:
        snap = self.data_dir / self.SNAPSHOT
        if snap.exists():
            state = json.loads(snap.read_text(encoding="utf-8"))
            self._records = state.get("records", {})
            self._logs = state.get("logs", {})
            self._generation = state.get("generation", 0)
        journal = self.data_dir / self.JOURNAL
        if not journal.exists():
            return
        with open(journal, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    # torn tail write from a crash; everything before it is intact
                    logger.warning("ignoring truncated journal line %d", lineno)
                    break
                if entry.get("op") == "generation":
                    if entry["value"] != self._generation:
                        # journal already folded into the snapshot
                        logger.warning("skipping stale journal generation %s", entry["value"])
                        return
                    continue
                self._mutate(entry)
                self._pending += 1

    def _write_header(self) -> None:
        self._journal.write(json.dumps({"op": "generation", "value": self._generation}) + "\n")
        self._journal.flush()

    def _apply(self, entry: dict) -> None:
        self._journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
        self._journal.flush()
        if self._fsync:
            os.fsync(self._journal.fileno())
        self._mutate(entry)
        self._pending += 1
        if self._pending >= self._snapshot_every:
            self.snapshot()

    def snapshot(self) -> None:
        with self._lock:
            tmp = self.data_dir / (self.SNAPSHOT + ".tmp")
            self._generation += 1
            state = {"generation": self._generation, "records": self._records, "logs": self._logs}
            tmp.write_text(json.dumps(state), encoding="utf-8")
            if self._fsync:
                with open(tmp, "rb") as fh:
                    os.fsync(fh.fileno())
            os.replace(tmp, self.data_dir / self.SNAPSHOT)
            self._journal.close()
            self._journal = open(self.data_dir / self.JOURNAL, "w", encoding="utf-8")
            self._write_header()
            self._pending = 0

    def close(self) -> None:
        with self._lock:
            if self._journal.closed:
                return
            self.snapshot()
            self._journal.close()
