"""NSS key log files: parsing, storage, live following, and JVM debug conversion."""

from __future__ import annotations

import enum
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import TlsDecryptError

logger = logging.getLogger(__name__)


class Label(str, enum.Enum):
    CLIENT_RANDOM = "CLIENT_RANDOM"
    CLIENT_HANDSHAKE_TRAFFIC_SECRET = "CLIENT_HANDSHAKE_TRAFFIC_SECRET"
    SERVER_HANDSHAKE_TRAFFIC_SECRET = "SERVER_HANDSHAKE_TRAFFIC_SECRET"
    CLIENT_TRAFFIC_SECRET_0 = "CLIENT_TRAFFIC_SECRET_0"
    SERVER_TRAFFIC_SECRET_0 = "SERVER_TRAFFIC_SECRET_0"


_LABELS = {lab.value: lab for lab in Label}
_HEX = re.compile(r"[0-9a-fA-F]*\Z")


class KeyLogError(TlsDecryptError):
    pass


class FormatError(KeyLogError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class FileRemoved(KeyLogError):
    pass


class NoSessionsFound(KeyLogError):
    pass


@dataclass(frozen=True)
class KeyLogEntry:
    label: Label
    client_random: bytes
    secret: bytes

    def to_line(self) -> str:
        return f"{self.label.value} {self.client_random.hex()} {self.secret.hex()}"


@dataclass(frozen=True)
class Skip:
    reason: str  # "comment" | "blank" | "unknown_label" | "rsa"


def parse_keylog_line(line: str) -> Union[KeyLogEntry, Skip]:
    """Classify one key log line. Raises :class:`FormatError` on malformed input."""
    line = line.rstrip("\r\n")
    if not line.strip():
        return Skip("blank")
    if line.startswith("#"):
        return Skip("comment")
    if line != line.strip() or "  " in line or "\t" in line:
        raise FormatError("extra whitespace")
    fields = line.split(" ")
    if len(fields) != 3:
        raise FormatError(f"expected 3 fields, got {len(fields)}")
    label, random_hex, secret_hex = fields
    if label == "RSA":
        return Skip("rsa")
    if label not in _LABELS:
        return Skip("unknown_label")
    lab = _LABELS[label]
    if len(random_hex) != 64 or not _HEX.match(random_hex):
        raise FormatError("client_random must be 64 hex chars")
    if lab is Label.CLIENT_RANDOM:
        if len(secret_hex) != 96 or not _HEX.match(secret_hex):
            raise FormatError("secret must be 96 hex chars")
    elif len(secret_hex) not in (64, 96) or not _HEX.match(secret_hex):
        raise FormatError("secret must be 64 or 96 hex chars")
    return KeyLogEntry(lab, bytes.fromhex(random_hex), bytes.fromhex(secret_hex))


@dataclass
class LoadStats:
    accepted: int = 0
    skipped: int = 0
    errors: int = 0
    conflicts: int = 0
    unknown_labels: int = 0
    rsa_skipped: int = 0
    error_lines: list = field(default_factory=list)  # (line number, reason)


class KeyStore:
    """Thread-safe map (client_random, label) -> secret; first entry wins."""

    def __init__(self):
        self._lock = threading.Lock()
        self._secrets: dict[tuple[bytes, Label], bytes] = {}
        self.journal: list[KeyLogEntry] = []
        self.conflicts: list[KeyLogEntry] = []

    def add(self, entry: KeyLogEntry) -> bool:
        """Store ``entry``; return True only when it is new."""
        key = (entry.client_random, entry.label)
        with self._lock:
            existing = self._secrets.get(key)
            if existing is None:
                self._secrets[key] = entry.secret
                self.journal.append(entry)
                return True
            if existing != entry.secret:
                self.conflicts.append(entry)
                logger.warning("conflicting %s for client random %s; keeping the first",
                               entry.label.value, entry.client_random.hex()[:16])
            return False

    def get(self, client_random: bytes, label: Label) -> Optional[bytes]:
        with self._lock:
            return self._secrets.get((client_random, label))

    def __len__(self) -> int:
        with self._lock:
            return len(self._secrets)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._secrets

    def entries(self) -> list[KeyLogEntry]:
        with self._lock:
            return list(self.journal)

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.entries())

    def as_dict(self) -> dict:
        with self._lock:
            return dict(self._secrets)


def _classify(line: str, lineno: int, store: KeyStore, stats: LoadStats) -> Optional[KeyLogEntry]:
    try:
        result = parse_keylog_line(line)
    except FormatError as exc:
        stats.errors += 1
        stats.error_lines.append((lineno, exc.reason))
        logger.warning("key log line %d: %s", lineno, exc.reason)
        return None
    if isinstance(result, Skip):
        stats.skipped += 1
        if result.reason == "unknown_label":
            stats.unknown_labels += 1
        elif result.reason == "rsa":
            stats.rsa_skipped += 1
        return None
    stats.accepted += 1
    before = len(store.conflicts)
    is_new = store.add(result)
    stats.conflicts += len(store.conflicts) - before
    return result if is_new else None


def load_keylog_text(text: str, store: Optional[KeyStore] = None) -> tuple[KeyStore, LoadStats]:
    store = store if store is not None else KeyStore()
    stats = LoadStats()
    for lineno, line in enumerate(text.splitlines(), 1):
        _classify(line, lineno, store, stats)
    return store, stats


def load_keylog(path, store: Optional[KeyStore] = None) -> tuple[KeyStore, LoadStats]:
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8", "replace")
    return load_keylog_text(text, store)


class KeyLogTail:
    """Incrementally read a key log that another process keeps appending to.

    Only newline-terminated lines are parsed, except that an unterminated last
    line is accepted once it has stayed unchanged for ``settle_polls`` polls
    and parses cleanly (producers that never write a final newline).
    """

    def __init__(self, path, store: Optional[KeyStore] = None, settle_polls: int = 2):
        self.path = os.fspath(path)
        self.store = store if store is not None else KeyStore()
        self.stats = LoadStats()
        self.offset = 0
        self.lineno = 0
        self.settle_polls = settle_polls
        self._stale_tail: Optional[bytes] = None
        self._stale_count = 0

    def poll(self, final: bool = False) -> list[KeyLogEntry]:
        if not os.path.exists(self.path):
            raise FileRemoved(self.path)
        size = os.path.getsize(self.path)
        if size < self.offset:
            logger.warning("%s shrank from %d to %d bytes; rereading from the start",
                           self.path, self.offset, size)
            self.offset = 0
            self.lineno = 0
            self._stale_tail = None
        with open(self.path, "rb") as fh:
            fh.seek(self.offset)
            chunk = fh.read()
        new: list[KeyLogEntry] = []
        cut = chunk.rfind(b"\n") + 1
        for raw in chunk[:cut].split(b"\n")[:-1] if cut else []:
            self.lineno += 1
            entry = _classify(raw.decode("utf-8", "replace"), self.lineno, self.store, self.stats)
            if entry is not None:
                new.append(entry)
        self.offset += cut
        tail = chunk[cut:]
        if tail:
            if tail == self._stale_tail:
                self._stale_count += 1
            else:
                self._stale_tail, self._stale_count = tail, 0
            if final or self._stale_count >= self.settle_polls:
                text = tail.decode("utf-8", "replace")
                try:
                    parse_keylog_line(text)
                except FormatError:
                    if final:
                        self.lineno += 1
                        _classify(text, self.lineno, self.store, self.stats)
                        self.offset += len(tail)
                else:
                    self.lineno += 1
                    entry = _classify(text, self.lineno, self.store, self.stats)
                    if entry is not None:
                        new.append(entry)
                    self.offset += len(tail)
                    self._stale_tail = None
        else:
            self._stale_tail = None
        return new


def follow_keylog(path, poll_interval: float = 200, stop=None,
                  store: Optional[KeyStore] = None) -> Iterator[KeyLogEntry]:
    """Yield new entries as lines are appended; ``poll_interval`` in ms."""
    tail = KeyLogTail(path, store)
    while True:
        yield from tail.poll()
        if stop is not None and stop.is_set():
            yield from tail.poll(final=True)
            return
        time.sleep(poll_interval / 1000.0)


# --- JVM javax.net.debug conversion ------------------------------------------

_NONCE_MARK = re.compile(r"Client Nonce:|ClientRandom")
_MASTER_MARK = re.compile(r"Master Secret:")
_ROW = re.compile(r"^\s*[0-9A-Fa-f]{4}:\s(.*)$")
_BYTE_GROUP = re.compile(r"^(?:[0-9A-Fa-f]{2} )*[0-9A-Fa-f]{2}$")


def _row_bytes(rest: str) -> Optional[bytes]:
    """Bytes of one dump row; an ASCII gutter after two+ spaces is ignored."""
    groups = re.split(r"\s{2,}", rest.strip())
    out = b""
    for i, group in enumerate(groups[:2]):
        if not _BYTE_GROUP.match(group):
            if i == 0:
                return None
            break
        if i == 1 and len(out) != 8:
            break
        out += bytes.fromhex(group.replace(" ", ""))
        if len(out) > 16:
            return None
    return out


def _read_dump(lines: list[str], start: int) -> tuple[bytes, int]:
    data = b""
    i = start
    while i < len(lines):
        m = _ROW.match(lines[i])
        if not m:
            break
        row = _row_bytes(m.group(1))
        if row is None:
            break
        data += row
        i += 1
    return data, i


@dataclass
class JvmConversion:
    lines: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # human-readable reasons

    @property
    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def convert_jvm_debug(text: str) -> JvmConversion:
    """Turn a ``javax.net.debug`` transcript into NSS ``CLIENT_RANDOM`` lines.

    Accepted grammar: a line containing ``Client Nonce:`` or ``ClientRandom``
    followed by hex-dump rows (``NNNN: HH HH ...``), later a line containing
    ``Master Secret:`` followed by hex-dump rows. Each nonce/secret pair emits
    one line; pairs with wrong byte counts are dropped and reported.
    """
    lines = text.splitlines()
    result = JvmConversion()
    nonce: Optional[bytes] = None
    nonce_line = 0
    blocks = 0
    i = 0
    while i < len(lines):
        line = lines[i]
        if _NONCE_MARK.search(line):
            blocks += 1
            if nonce is not None:
                result.dropped.append(f"line {nonce_line}: client nonce without master secret")
            nonce_line = i + 1
            nonce, i = _read_dump(lines, i + 1)
            continue
        if _MASTER_MARK.search(line):
            secret, nxt = _read_dump(lines, i + 1)
            if nonce is None:
                blocks += 1
                result.dropped.append(f"line {i + 1}: master secret without client nonce")
            elif len(nonce) != 32:
                result.dropped.append(f"line {nonce_line}: client nonce is {len(nonce)} bytes, expected 32")
            elif len(secret) != 48:
                result.dropped.append(f"line {i + 1}: master secret is {len(secret)} bytes, expected 48")
            else:
                result.lines.append(f"CLIENT_RANDOM {nonce.hex()} {secret.hex()}")
            nonce = None
            i = nxt
            continue
        i += 1
    if nonce is not None:
        result.dropped.append(f"line {nonce_line}: client nonce without master secret")
    if blocks == 0:
        raise NoSessionsFound("no 'Client Nonce'/'Master Secret' blocks in transcript")
    return result
