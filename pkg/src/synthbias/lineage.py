"""Append-only, hash-chained record of pipeline actions.

File layout (UTF-8, one JSON document per line):

    {"lineage_log": 1, "hash": "sha256", "genesis": "00...00"}
    {"seq": 1, "ts": "...", "action": "ingest", "payload": {...},
     "payload_digest": "<hex>", "prev": "<hex>", "chain": "<hex>"}
    ...

``payload_digest`` is SHA-256 of the payload's canonical JSON (sorted keys,
no whitespace).  ``chain`` is SHA-256 over
``prev (32 bytes) | seq (8 bytes, big-endian) | ts | 0x00 | action | 0x00 | payload_digest (32 bytes)``.
The first event's ``prev`` is the all-zero genesis value.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

HASH_NAME = "sha256"
GENESIS = "00" * 32
ACTIONS = ("ingest", "skew", "train", "synthesize", "evaluate", "report")


class LineageError(RuntimeError):
    pass


def canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def payload_digest(payload) -> str:
    return hashlib.sha256(canonical(payload)).hexdigest()


def chain_hash(prev: str, seq: int, ts: str, action: str, digest: str) -> str:
    h = hashlib.sha256()
    h.update(bytes.fromhex(prev))
    h.update(seq.to_bytes(8, "big"))
    h.update(ts.encode("utf-8") + b"\x00")
    h.update(action.encode("utf-8") + b"\x00")
    h.update(bytes.fromhex(digest))
    return h.hexdigest()


@dataclass(frozen=True)
class LineageEvent:
    seq: int
    ts: str
    action: str
    payload: dict
    payload_digest: str
    prev: str
    chain: str

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, separators=(",", ":"), ensure_ascii=False)


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class LineageLog:
    """Single-writer append handle on a lineage file."""

    def __init__(self, path: os.PathLike | str, clock: Callable[[], str] = _utc_now):
        self.path = Path(path)
        self.clock = clock
        if not self.path.exists() or self.path.stat().st_size == 0:
            header = {"lineage_log": 1, "hash": HASH_NAME, "genesis": GENESIS}
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(header) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._seq, self._last = 0, GENESIS
        else:
            events = read_events(self.path)
            self._seq = events[-1].seq if events else 0
            self._last = events[-1].chain if events else GENESIS

    def append(self, action: str, payload: Optional[dict] = None) -> LineageEvent:
        if action not in ACTIONS:
            raise LineageError(f"unknown action {action!r}")
        payload = payload or {}
        digest = payload_digest(payload)
        seq = self._seq + 1
        ts = self.clock()
        ev = LineageEvent(seq, ts, action, payload, digest, self._last,
                          chain_hash(self._last, seq, ts, action, digest))
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(ev.to_line() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise LineageError(f"cannot append to {self.path}: {exc}") from exc
        self._seq, self._last = seq, ev.chain
        return ev


def _read_lines(path: Path) -> list[str]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LineageError(f"cannot read {path}: {exc}") from exc
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
    except ValueError:
        raise LineageError(f"{path}: malformed header line") from None
    if header.get("hash") != HASH_NAME or header.get("genesis") != GENESIS:
        raise LineageError(f"{path}: unsupported header {header}")
    return [ln.decode("utf-8", errors="replace") for ln in lines[1:]]


def read_events(path: os.PathLike | str) -> list[LineageEvent]:
    out = []
    for line in _read_lines(Path(path)):
        doc = json.loads(line)
        out.append(LineageEvent(**doc))
    return out


def _event_ok(line: str, seq: int, prev: str) -> Optional[str]:
    """Chain hash of a well-formed event at position ``seq``, else None."""
    try:
        doc = json.loads(line)
        if set(doc) != {"seq", "ts", "action", "payload", "payload_digest", "prev", "chain"}:
            return None
        if type(doc["seq"]) is not int or doc["seq"] != seq or doc["prev"] != prev:
            return None
        if doc["action"] not in ACTIONS or not isinstance(doc["ts"], str):
            return None
        if payload_digest(doc["payload"]) != doc["payload_digest"]:
            return None
        expect = chain_hash(prev, seq, doc["ts"], doc["action"], doc["payload_digest"])
        if doc["chain"] != expect:
            return None
        # the stored line must be exactly what append would have written
        if LineageEvent(**doc).to_line() != line:
            return None
        return expect
    except (ValueError, TypeError, KeyError):
        return None


def verify(path: os.PathLike | str) -> Optional[int]:
    """Return None when the chain is intact, else the first broken sequence number."""
    prev = GENESIS
    for seq, line in enumerate(_read_lines(Path(path)), start=1):
        chain = _event_ok(line, seq, prev)
        if chain is None:
            return seq
        prev = chain
    return None
