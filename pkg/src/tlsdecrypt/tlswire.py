"""TLS record layer and handshake parsing, plus the per-connection state machine.

The state machine only tracks what key derivation needs: both randoms, the
negotiated version and suite, and when each direction starts ciphering.
TLS 1.3 epoch changes (handshake -> application keys, KeyUpdate) happen on
decrypted content and are driven by the pipeline.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .capture import Direction, FlowKey
from .errors import TlsDecryptError

logger = logging.getLogger(__name__)

CT_CHANGE_CIPHER_SPEC = 20
CT_ALERT = 21
CT_HANDSHAKE = 22
CT_APPLICATION_DATA = 23
CONTENT_TYPES = (CT_CHANGE_CIPHER_SPEC, CT_ALERT, CT_HANDSHAKE, CT_APPLICATION_DATA)

HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2
HS_NEW_SESSION_TICKET = 4
HS_CERTIFICATE = 11
HS_SERVER_HELLO_DONE = 14
HS_CLIENT_KEY_EXCHANGE = 16
HS_FINISHED = 20
HS_KEY_UPDATE = 24

EXT_SERVER_NAME = 0
EXT_SUPPORTED_VERSIONS = 43

MAX_RECORD_LEN = 2 ** 14 + 2048
RECORD_HEADER_LEN = 5

# ServerHello.random of a HelloRetryRequest
HRR_RANDOM = hashlib.sha256(b"HelloRetryRequest").digest()

VERSION_NAMES = {
    0x0300: "SSL3.0",
    0x0301: "TLS1.0",
    0x0302: "TLS1.1",
    0x0303: "TLS1.2",
    0x0304: "TLS1.3",
}


class WireError(TlsDecryptError):
    pass


class NotTls(WireError):
    pass


class OversizeRecord(WireError):
    pass


class Malformed(WireError):
    pass


class StateViolation(WireError):
    pass


@dataclass(frozen=True)
class TlsRecord:
    content_type: int
    legacy_version: int
    fragment: bytes

    def serialize(self) -> bytes:
        return struct.pack(">BHH", self.content_type, self.legacy_version,
                           len(self.fragment)) + self.fragment


def plausible_header(buf: bytes) -> bool:
    if len(buf) < 3:
        return False
    return buf[0] in CONTENT_TYPES and buf[1] == 3 and buf[2] <= 4


def parse_records(buffered: bytes, first: bool = False) -> tuple[list[TlsRecord], bytes]:
    """Split ``buffered`` into whole records and the unconsumed tail.

    With ``first`` set, an implausible leading byte raises :class:`NotTls`
    instead of the generic error.
    """
    records = []
    pos = 0
    n = len(buffered)
    while n - pos >= RECORD_HEADER_LEN:
        ctype, version, length = struct.unpack_from(">BHH", buffered, pos)
        if ctype not in CONTENT_TYPES or version >> 8 != 3:
            if first and not records:
                raise NotTls(f"first byte 0x{ctype:02x} is not a TLS content type")
            raise Malformed(f"bad record header {buffered[pos:pos + 5].hex()}")
        if length > MAX_RECORD_LEN:
            raise OversizeRecord(f"record length {length} exceeds {MAX_RECORD_LEN}")
        end = pos + RECORD_HEADER_LEN + length
        if end > n:
            break
        records.append(TlsRecord(ctype, version, bytes(buffered[pos + RECORD_HEADER_LEN:end])))
        pos = end
    if first and not records and n - pos >= 1 and buffered[pos] not in CONTENT_TYPES:
        raise NotTls(f"first byte 0x{buffered[pos]:02x} is not a TLS content type")
    return records, bytes(buffered[pos:])


class RecordParser:
    """Stateful wrapper around :func:`parse_records` for one stream direction."""

    def __init__(self):
        self.tail = b""
        self.seen_record = False
        self.resync = False  # next bytes follow a TCP gap

    def feed(self, data: bytes) -> list[TlsRecord]:
        records, self.tail = parse_records(self.tail + data, first=not self.seen_record)
        if records:
            self.seen_record = True
        return records


@dataclass(frozen=True)
class HandshakeMessage:
    msg_type: int
    body: bytes

    def serialize(self) -> bytes:
        return struct.pack(">I", (self.msg_type << 24) | len(self.body)) + self.body


class HandshakeBuffer:
    """Reassemble handshake messages that straddle record boundaries."""

    def __init__(self):
        self.buf = b""

    def feed(self, fragment: bytes) -> list[HandshakeMessage]:
        self.buf += fragment
        out = []
        while len(self.buf) >= 4:
            header = struct.unpack_from(">I", self.buf, 0)[0]
            length = header & 0xFFFFFF
            if len(self.buf) < 4 + length:
                break
            out.append(HandshakeMessage(header >> 24, self.buf[4:4 + length]))
            self.buf = self.buf[4 + length:]
        return out


# --- hello parsing ----------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise Malformed(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def vec8(self) -> bytes:
        return self.take(self.u8())

    def vec16(self) -> bytes:
        return self.take(self.u16())

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _parse_extensions(r: _Reader) -> dict[int, bytes]:
    exts: dict[int, bytes] = {}
    if r.remaining == 0:
        return exts
    block = _Reader(r.vec16())
    if r.remaining:
        raise Malformed("trailing bytes after extensions")
    while block.remaining:
        etype = block.u16()
        exts[etype] = block.vec16()
    return exts


def _parse_sni(data: bytes) -> Optional[str]:
    r = _Reader(data)
    names = _Reader(r.vec16())
    while names.remaining:
        kind = names.u8()
        name = names.vec16()
        if kind == 0:
            return name.decode("ascii", "replace")
    return None


@dataclass
class ClientHello:
    legacy_version: int
    client_random: bytes
    session_id: bytes
    cipher_suites: list[int]
    compression_methods: bytes
    sni: Optional[str] = None
    supported_versions: list[int] = field(default_factory=list)


@dataclass
class ServerHello:
    legacy_version: int
    server_random: bytes
    session_id: bytes
    cipher_suite: int
    compression_method: int
    version: int  # negotiated

    @property
    def is_hello_retry(self) -> bool:
        return self.server_random == HRR_RANDOM


def parse_client_hello(body: bytes) -> ClientHello:
    r = _Reader(body)
    legacy = r.u16()
    client_random = r.take(32)
    session_id = r.vec8()
    suites_raw = r.vec16()
    if len(suites_raw) % 2:
        raise Malformed("odd cipher suite vector length")
    suites = list(struct.unpack(f">{len(suites_raw) // 2}H", suites_raw))
    compression = r.vec8()
    exts = _parse_extensions(r)
    hello = ClientHello(legacy, client_random, session_id, suites, compression)
    if EXT_SERVER_NAME in exts:
        hello.sni = _parse_sni(exts[EXT_SERVER_NAME])
    if EXT_SUPPORTED_VERSIONS in exts:
        sv = _Reader(exts[EXT_SUPPORTED_VERSIONS]).vec8()
        if len(sv) % 2:
            raise Malformed("odd supported_versions length")
        hello.supported_versions = list(struct.unpack(f">{len(sv) // 2}H", sv))
    return hello


def parse_server_hello(body: bytes) -> ServerHello:
    r = _Reader(body)
    legacy = r.u16()
    server_random = r.take(32)
    session_id = r.vec8()
    suite = r.u16()
    compression = r.u8()
    exts = _parse_extensions(r)
    version = legacy
    if EXT_SUPPORTED_VERSIONS in exts:
        sv = exts[EXT_SUPPORTED_VERSIONS]
        if len(sv) != 2:
            raise Malformed("server supported_versions must be 2 bytes")
        version = struct.unpack(">H", sv)[0]
    return ServerHello(legacy, server_random, session_id, suite, compression, version)


# --- session state machine --------------------------------------------------


class Status(str, enum.Enum):
    DECRYPTED = "decrypted"
    NO_KEY = "no_key"
    UNSUPPORTED_SUITE = "unsupported_suite"
    PARTIAL = "partial"
    BROKEN = "broken"
    NOT_TLS = "not_tls"


STATUS_ORDER = [s.value for s in Status]


@dataclass
class EncryptedRecord:
    session_id: str
    direction: Direction
    seq: int
    content_type: int
    legacy_version: int
    ciphertext: bytes
    ts: float = 0.0
    after_gap: bool = False


@dataclass
class PlaintextHandshake:
    direction: Direction
    message: HandshakeMessage


SessionEvent = Union[EncryptedRecord, PlaintextHandshake]


def session_id_for(client_random: bytes) -> str:
    return client_random[:8].hex()


def flow_hash(flow: FlowKey) -> str:
    return hashlib.sha1(str(flow).encode()).hexdigest()[:8]


@dataclass
class TlsSession:
    flow: FlowKey
    id: str = ""
    version: Optional[int] = None
    client_random: Optional[bytes] = None
    server_random: Optional[bytes] = None
    cipher_suite: Optional[int] = None
    sni: Optional[str] = None
    offered_versions: list = field(default_factory=list)
    state: str = "awaiting_hello"  # awaiting_hello | hello_seen | established | broken
    ciphering: dict = field(default_factory=lambda: {Direction.C2S: False, Direction.S2C: False})
    seq: dict = field(default_factory=lambda: {Direction.C2S: 0, Direction.S2C: 0})
    stopped: dict = field(default_factory=lambda: {Direction.C2S: False, Direction.S2C: False})
    encrypted_handshakes: dict = field(default_factory=lambda: {Direction.C2S: 0, Direction.S2C: 0})
    renegotiated: bool = False
    dropped_records: int = 0
    violations: int = 0
    problem: Optional[str] = None
    _hs: dict = field(default_factory=lambda: {Direction.C2S: HandshakeBuffer(),
                                               Direction.S2C: HandshakeBuffer()})
    _gap: dict = field(default_factory=lambda: {Direction.C2S: False, Direction.S2C: False})

    @property
    def is_tls13(self) -> bool:
        return self.version == 0x0304

    @property
    def version_name(self) -> Optional[str]:
        if self.version is None:
            return None
        return VERSION_NAMES.get(self.version, f"0x{self.version:04x}")

    @property
    def handshake_complete(self) -> bool:
        return self.server_random is not None and self.state in ("hello_seen", "established")

    def mark_broken(self, reason: str) -> None:
        if self.state != "broken":
            logger.info("session %s broken: %s", self.id or self.flow, reason)
        self.state = "broken"
        self.problem = reason

    def note_gap(self, direction: Direction, at_boundary: bool) -> None:
        """Record a TCP gap; records after it get trial sequence numbers."""
        if at_boundary:
            self._gap[direction] = True
        else:
            self.stopped[direction] = True
        self._hs[direction] = HandshakeBuffer()

    def advance(self, record: TlsRecord, direction: Direction, ts: float = 0.0) -> list[SessionEvent]:
        if self.state == "broken" or self.stopped[direction]:
            return []
        ct = record.content_type

        if self.ciphering[direction]:
            if self.is_tls13 and ct == CT_CHANGE_CIPHER_SPEC:
                return []
            if not self.is_tls13:
                if ct == CT_CHANGE_CIPHER_SPEC or (
                        ct == CT_HANDSHAKE and self.encrypted_handshakes[direction] >= 1):
                    # renegotiation: no keys for the inner handshake
                    self.renegotiated = True
                    self.stopped[direction] = True
                    return []
                if ct == CT_HANDSHAKE:
                    self.encrypted_handshakes[direction] += 1
            if self.is_tls13 and ct != CT_APPLICATION_DATA:
                if ct == CT_ALERT:
                    return []
                raise self._violation(f"plaintext content type {ct} after ServerHello")
            rec = EncryptedRecord(self.id, direction, self.seq[direction], ct,
                                  record.legacy_version, record.fragment, ts,
                                  after_gap=self._gap[direction])
            self._gap[direction] = False
            self.seq[direction] += 1
            return [rec]

        if ct == CT_HANDSHAKE:
            events = []
            for msg in self._hs[direction].feed(record.fragment):
                self._handle_handshake(msg, direction)
                events.append(PlaintextHandshake(direction, msg))
                if self.state == "broken":
                    break
            return events
        if ct == CT_CHANGE_CIPHER_SPEC:
            if self.server_random is None:
                if direction is Direction.C2S and 0x0304 in self.offered_versions:
                    return []  # 1.3 middlebox-compat CCS around a HelloRetryRequest
                raise self._violation("ChangeCipherSpec before ServerHello")
            if self.is_tls13:
                return []
            self.ciphering[direction] = True
            self.seq[direction] = 0
            if all(self.ciphering.values()):
                self.state = "established"
            return []
        if ct == CT_ALERT:
            return []
        if ct == CT_APPLICATION_DATA:
            if self.server_random is None and direction is Direction.C2S:
                # TLS 1.3 early data; no key for it is ever joined
                self.dropped_records += 1
                return []
            raise self._violation("application data before ChangeCipherSpec")
        raise self._violation(f"unexpected content type {ct}")

    def _violation(self, reason: str) -> StateViolation:
        self.violations += 1
        self.mark_broken(reason)
        return StateViolation(reason)

    def _handle_handshake(self, msg: HandshakeMessage, direction: Direction) -> None:
        if msg.msg_type == HS_CLIENT_HELLO and direction is Direction.C2S:
            if self.server_random is not None:
                raise self._violation("ClientHello after ServerHello")
            try:
                hello = parse_client_hello(msg.body)
            except Malformed as exc:
                self.mark_broken(f"malformed ClientHello: {exc}")
                return
            if self.client_random is not None and hello.client_random != self.client_random:
                self.mark_broken("second ClientHello with a new random")
                return
            self.client_random = hello.client_random
            self.id = self.id or session_id_for(hello.client_random)
            self.sni = hello.sni
            self.offered_versions = hello.supported_versions
            if self.state == "awaiting_hello":
                self.state = "hello_seen"
        elif msg.msg_type == HS_SERVER_HELLO and direction is Direction.S2C:
            if self.client_random is None:
                raise self._violation("ServerHello before ClientHello")
            try:
                hello = parse_server_hello(msg.body)
            except Malformed as exc:
                self.mark_broken(f"malformed ServerHello: {exc}")
                return
            if hello.is_hello_retry:
                return
            self.server_random = hello.server_random
            self.cipher_suite = hello.cipher_suite
            self.version = hello.version
            if hello.compression_method != 0:
                self.mark_broken("non-null compression")
                return
            if self.is_tls13:
                self.ciphering[Direction.C2S] = True
                self.ciphering[Direction.S2C] = True
                self.state = "established"
        elif msg.msg_type in (HS_CLIENT_HELLO, HS_SERVER_HELLO):
            raise self._violation("hello message in the wrong direction")


def session_advance(session: TlsSession, record: TlsRecord, direction: Direction,
                    ts: float = 0.0) -> tuple[TlsSession, list[SessionEvent]]:
    try:
        events = session.advance(record, direction, ts)
    except StateViolation:
        events = []
    return session, events
