"""Durable, atomic persistence for the chain and contract state.

One sqlite file per node holds the block table, the contract key-value
state, deployed contract sources and bookkeeping metadata. Every mutation
runs inside a single transaction guarded by one lock, so a crash at any
point leaves the previous committed state.
"""

from __future__ import annotations

import sqlite3
import threading
from contextlib import contextmanager
from pathlib import Path

from powdb.chain import Block, MalformedBlockError, check_linkage

_SCHEMA = """
CREATE TABLE IF NOT EXISTS blocks (
    idx        INTEGER PRIMARY KEY,
    timestamp  INTEGER NOT NULL,
    data       TEXT    NOT NULL,
    prev_hash  TEXT    NOT NULL,
    hash       TEXT    NOT NULL,
    difficulty INTEGER NOT NULL,
    nonce      INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS state (
    contract_id TEXT NOT NULL,
    key         TEXT NOT NULL,
    value       INTEGER NOT NULL,
    version     INTEGER NOT NULL,
    PRIMARY KEY (contract_id, key)
);
CREATE TABLE IF NOT EXISTS contracts (
    contract_id TEXT PRIMARY KEY,
    source      TEXT NOT NULL,
    deployed_at INTEGER NOT NULL
);
"""


class StoreError(Exception):
    """Persistence failure; the store is unchanged."""


class NotFoundError(StoreError):
    """The requested block or key does not exist."""


class BlockStore:
    """Single-file embedded store owned by one node process.

    All mutations are serialized behind one reentrant lock; readers see only
    committed state. Sub-steps of an append run inside one transaction, with
    an optional crash hook between them for fault-injection tests.
    """

    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        try:
            self._conn = sqlite3.connect(self.path, check_same_thread=False,
                                         isolation_level=None)
            self._conn.execute("PRAGMA synchronous=FULL")
            self._conn.executescript(_SCHEMA)
        except sqlite3.Error as exc:
            raise StoreError(f"cannot open store at {self.path}: {exc}") from exc
        self._lock = threading.RLock()
        self._txn_depth = 0
        self._crash_hook = None  # test-only: callable(step_label)

    def close(self) -> None:
        self._conn.close()

    @contextmanager
    def transaction(self):
        """Reentrant exclusive transaction; rolls back on any exception."""
        with self._lock:
            if self._txn_depth > 0:
                self._txn_depth += 1
                try:
                    yield
                finally:
                    self._txn_depth -= 1
                return
            self._conn.execute("BEGIN IMMEDIATE")
            self._txn_depth = 1
            try:
                yield
            except BaseException:
                self._txn_depth = 0
                self._conn.execute("ROLLBACK")
                raise
            else:
                self._txn_depth = 0
                self._conn.execute("COMMIT")

    def _hook(self, step: str) -> None:
        if self._crash_hook is not None:
            self._crash_hook(step)

    # -- block chain ------------------------------------------------------

    def add_block(self, block: Block) -> None:
        """Append one block; index must equal the current count."""
        with self._lock:
            count = self.get_block_count()
            if block.index != count:
                raise StoreError(f"append at index {block.index} but store holds {count} blocks")
            try:
                with self.transaction():
                    self._conn.execute(
                        "INSERT INTO blocks VALUES (?,?,?,?,?,?,?)",
                        (block.index, block.timestamp, block.data, block.prev_hash,
                         block.hash, block.difficulty, block.nonce))
                    self._hook("block_inserted")
                    self._set_meta("count", str(count + 1))
                    self._hook("count_updated")
                    self._set_meta("tip_hash", block.hash)
                    self._hook("tip_updated")
            except sqlite3.Error as exc:
                raise StoreError(f"append failed: {exc}") from exc

    def get_block_count(self) -> int:
        value = self._get_meta("count")
        return int(value) if value is not None else 0

    def chain_info(self) -> tuple[int, str | None]:
        """Count and tip hash read under one lock acquisition."""
        with self._lock:
            return self.get_block_count(), self._get_meta("tip_hash")

    def get_latest_block_hash(self) -> str:
        tip = self._get_meta("tip_hash")
        if tip is None:
            raise NotFoundError("store holds no blocks")
        return tip

    def get_block(self, index: int) -> Block:
        with self._lock:
            row = self._conn.execute(
                "SELECT idx, timestamp, data, prev_hash, hash, difficulty, nonce"
                " FROM blocks WHERE idx = ?", (index,)).fetchone()
        if row is None:
            raise NotFoundError(f"no block at index {index}")
        return _row_to_block(row)

    def get_all_blocks(self) -> list[Block]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT idx, timestamp, data, prev_hash, hash, difficulty, nonce"
                " FROM blocks ORDER BY idx").fetchall()
        return [_row_to_block(r) for r in rows]

    def tip(self) -> Block:
        with self._lock:
            count = self.get_block_count()
            if count == 0:
                raise NotFoundError("store holds no blocks")
            return self.get_block(count - 1)

    def replace_chain(self, new_chain: list[Block], rebuild_state=None) -> None:
        """Atomically swap the whole chain, wiping contract state and sources.

        `rebuild_state(store)` runs inside the same transaction so the caller
        can re-execute contract payloads; a failure rolls everything back.
        The new chain must be structurally linked and keep the stored genesis.
        """
        if not new_chain:
            raise StoreError("replacement chain may not be empty")
        try:
            check_linkage(new_chain)
        except MalformedBlockError as exc:
            raise StoreError(f"replacement chain rejected: {exc}") from exc
        if new_chain[0].index != 0:
            raise StoreError("replacement chain must start at the genesis index")
        with self._lock:
            if self.get_block_count() > 0 and self.get_block(0) != new_chain[0]:
                raise StoreError("replacement chain has a different genesis")
            try:
                with self.transaction():
                    self._conn.execute("DELETE FROM blocks")
                    self._conn.execute("DELETE FROM state")
                    self._conn.execute("DELETE FROM contracts")
                    self._conn.executemany(
                        "INSERT INTO blocks VALUES (?,?,?,?,?,?,?)",
                        [(b.index, b.timestamp, b.data, b.prev_hash, b.hash,
                          b.difficulty, b.nonce) for b in new_chain])
                    self._set_meta("count", str(len(new_chain)))
                    self._set_meta("tip_hash", new_chain[-1].hash)
                    self._set_meta("state_applied", "0")
                    if rebuild_state is not None:
                        rebuild_state(self)
            except sqlite3.Error as exc:
                raise StoreError(f"replace failed: {exc}") from exc

    # -- contract state ---------------------------------------------------

    def get_state(self, contract_id: str, key: str) -> int | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT value FROM state WHERE contract_id = ? AND key = ?",
                (contract_id, key)).fetchone()
        return row[0] if row is not None else None

    def put_state(self, contract_id: str, key: str, value: int, version: int) -> None:
        """Write one state cell; `version` is the block index of this write."""
        with self._lock:
            with self.transaction():
                self._conn.execute(
                    "INSERT INTO state VALUES (?,?,?,?)"
                    " ON CONFLICT (contract_id, key) DO UPDATE"
                    " SET value = excluded.value, version = excluded.version",
                    (contract_id, key, value, version))

    def get_state_version(self, contract_id: str, key: str) -> int | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT version FROM state WHERE contract_id = ? AND key = ?",
                (contract_id, key)).fetchone()
        return row[0] if row is not None else None

    def all_state(self) -> dict[tuple[str, str], int]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT contract_id, key, value FROM state").fetchall()
        return {(cid, key): value for cid, key, value in rows}

    # -- contract sources -------------------------------------------------

    def get_contract(self, contract_id: str) -> str | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT source FROM contracts WHERE contract_id = ?",
                (contract_id,)).fetchone()
        return row[0] if row is not None else None

    def put_contract(self, contract_id: str, source_json: str, deployed_at: int) -> None:
        with self._lock:
            with self.transaction():
                self._conn.execute(
                    "INSERT OR IGNORE INTO contracts VALUES (?,?,?)",
                    (contract_id, source_json, deployed_at))

    # -- bookkeeping ------------------------------------------------------

    def get_applied_index(self) -> int:
        """Highest block index whose contract payload has been executed."""
        value = self._get_meta("state_applied")
        return int(value) if value is not None else 0

    def set_applied_index(self, index: int) -> None:
        with self._lock:
            with self.transaction():
                self._set_meta("state_applied", str(index))

    def _get_meta(self, key: str) -> str | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return row[0] if row is not None else None

    def _set_meta(self, key: str, value: str) -> None:
        self._conn.execute(
            "INSERT INTO meta VALUES (?,?)"
            " ON CONFLICT (key) DO UPDATE SET value = excluded.value",
            (key, value))


def _row_to_block(row) -> Block:
    idx, timestamp, data, prev_hash, hash_hex, difficulty, nonce = row
    return Block(index=idx, timestamp=timestamp, data=data, prev_hash=prev_hash,
                 hash=hash_hex, difficulty=difficulty, nonce=nonce)
