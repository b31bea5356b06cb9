"""Stable on-disk outputs: raw plaintext stream files and an NDJSON report.

Layout of an output directory::

    <session_id>.client.bin   client -> server plaintext (only if non-empty)
    <session_id>.server.bin   server -> client plaintext (only if non-empty)
    sessions.ndjson           session lines, then alert lines

Session line keys, in order: type, id, src, dst, version, cipher, sni,
status, c2s_bytes, s2c_bytes, first_ts, last_ts, alert_count.
Alert line keys, in order: type, rule, session, direction, offset, excerpt, ts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional

NDJSON_NAME = "sessions.ndjson"
LIVE_NDJSON_NAME = "live.ndjson"

SESSION_KEYS = ("id", "src", "dst", "version", "cipher", "sni", "status",
                "c2s_bytes", "s2c_bytes", "first_ts", "last_ts", "alert_count")
ALERT_KEYS = ("rule", "session", "direction", "offset", "excerpt", "ts")

_SUFFIX = {"c2s": "client", "s2c": "server"}


@dataclass
class SessionRecord:
    id: str
    src: str
    dst: str
    version: Optional[str]
    cipher: Optional[str]
    sni: Optional[str]
    status: str
    c2s_bytes: int = 0
    s2c_bytes: int = 0
    first_ts: float = 0.0
    last_ts: float = 0.0
    alert_count: int = 0

    def to_json(self, kind: str = "session") -> str:
        obj = {"type": kind}
        obj.update((k, getattr(self, k)) for k in SESSION_KEYS)
        return json.dumps(obj, ensure_ascii=False)


def alert_to_json(alert) -> str:
    obj = {
        "type": "alert",
        "rule": alert.rule_id,
        "session": alert.session_id,
        "direction": alert.direction,
        "offset": alert.offset,
        "excerpt": alert.excerpt.decode("utf-8", "backslashreplace"),
        "ts": alert.ts,
    }
    return json.dumps(obj, ensure_ascii=False)


def stream_path(outdir, session_id: str, direction: str) -> str:
    return os.path.join(outdir, f"{session_id}.{_SUFFIX[direction]}.bin")


class StreamWriter:
    """Append plaintext to per-session stream files as it is decrypted.

    A file is created (truncating any leftover from an earlier run) on its
    first non-empty write, so empty directions never produce files.
    """

    def __init__(self, outdir):
        self.outdir = os.fspath(outdir)
        os.makedirs(self.outdir, exist_ok=True)
        self.sizes: dict[tuple[str, str], int] = {}

    def write(self, session_id: str, direction: str, data: bytes) -> None:
        if not data:
            return
        key = (session_id, direction)
        mode = "ab" if key in self.sizes else "wb"
        with open(stream_path(self.outdir, session_id, direction), mode) as fh:
            fh.write(data)
        self.sizes[key] = self.sizes.get(key, 0) + len(data)


def write_streams(session_id: str, events: Iterable, outdir) -> list[str]:
    """Write the plaintext of one session's events; return the paths written."""
    chunks: dict[str, list[bytes]] = {"c2s": [], "s2c": []}
    for ev in events:
        chunks[getattr(ev.direction, "value", ev.direction)].append(ev.payload)
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for direction, parts in chunks.items():
        data = b"".join(parts)
        if data:
            path = stream_path(outdir, session_id, direction)
            with open(path, "wb") as fh:
                fh.write(data)
            paths.append(path)
    return paths


def ordered_report(records: Iterable[SessionRecord], alerts: Iterable) -> list[str]:
    recs = sorted(records, key=lambda r: (r.first_ts, r.id))
    rank = {r.id: i for i, r in enumerate(recs)}
    missing = {a.session_id for a in alerts} - set(rank)
    if missing:
        raise ValueError(f"alerts reference unknown sessions: {sorted(missing)}")
    als = sorted(alerts, key=lambda a: (rank[a.session_id], a.direction, a.offset, a.rule_id))
    return [r.to_json() for r in recs] + [alert_to_json(a) for a in als]


def write_ndjson(records: Iterable[SessionRecord], alerts: Iterable, path) -> str:
    """Write the report atomically (temp file + rename) so readers never see a torn line."""
    records, alerts = list(records), list(alerts)
    lines = ordered_report(records, alerts)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    os.replace(tmp, path)
    return path


class NdjsonAppender:
    """Line-at-a-time NDJSON log for follow mode; each line is one write + flush."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")

    def write_line(self, line: str) -> None:
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
