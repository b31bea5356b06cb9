"""Capture -> reassembly -> TLS parsing -> key lookup -> decryption.

Encrypted records whose keys are not known yet wait in a per-session FIFO.
When a key log entry shows up later (follow mode), the FIFO drains in order,
so the plaintext produced never depends on whether keys or packets came
first.
"""

from __future__ import annotations

import collections
import copy
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

from . import keyschedule as ks
from .capture import (DecodeError, Direction, Endpoint, FlowKey, NonTcp, PcapPacket,
                      TcpSegment, decode_frame)
from .detect import Alert, RuleSet, StreamScanner
from .errors import TlsDecryptError
from .export import SessionRecord
from .keylog import KeyLogEntry, KeyStore, Label
from .reassembly import (DEFAULT_IDLE_TIMEOUT, DEFAULT_MAX_PENDING, Close, Data, Gap,
                         Reassembler)
from .recordcrypt import RecordCryptError, decrypt_record, verify_finished_alignment
from .tlswire import (CT_APPLICATION_DATA, CT_HANDSHAKE, HS_FINISHED, HS_KEY_UPDATE,
                      EncryptedRecord, HandshakeBuffer, RecordParser, Status, TlsSession,
                      WireError, NotTls, flow_hash, plausible_header)

logger = logging.getLogger(__name__)

MAX_GAP_SKIP = 64  # records tried after a TCP gap to re-find the sequence number

_TLS13_LABELS = {
    (Direction.C2S, "handshake"): Label.CLIENT_HANDSHAKE_TRAFFIC_SECRET,
    (Direction.S2C, "handshake"): Label.SERVER_HANDSHAKE_TRAFFIC_SECRET,
    (Direction.C2S, "application"): Label.CLIENT_TRAFFIC_SECRET_0,
    (Direction.S2C, "application"): Label.SERVER_TRAFFIC_SECRET_0,
}


class OffsetGap(TlsDecryptError):
    pass


@dataclass(frozen=True)
class DecryptedEvent:
    session_id: str
    direction: Direction
    stream_offset: int
    payload: bytes
    content_type: int = CT_APPLICATION_DATA
    ts: float = 0.0


@dataclass(frozen=True)
class SessionUpdate:
    record: SessionRecord


Event = Union[DecryptedEvent, SessionRecord, SessionUpdate, Alert]


@dataclass
class PipelineConfig:
    ports: Optional[frozenset] = None
    max_pending_session: int = 1024 * 1024
    max_pending_total: int = 64 * 1024 * 1024
    reassembly_max_pending: int = DEFAULT_MAX_PENDING
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    rules: Optional[RuleSet] = None


@dataclass
class RunStats:
    packets: int = 0
    non_tcp: int = 0
    filtered: int = 0
    decode_errors: collections.Counter = field(default_factory=collections.Counter)
    state_violations: int = 0
    auth_failures: int = 0
    statuses: collections.Counter = field(default_factory=collections.Counter)


class _DirCrypto:
    def __init__(self):
        self.keys: Optional[ks.DirectionKeys] = None
        self.epoch = "handshake"  # TLS 1.3 only
        self.pending: collections.deque = collections.deque()
        self.hs = HandshakeBuffer()
        self.offset = 0
        self.decrypted = 0
        self.failures = 0
        self.first_checked = False
        self.dead = False  # could not re-find the sequence after a gap


class _SessionCtx:
    def __init__(self, session: TlsSession, client: Endpoint, server: Endpoint, ts: float):
        self.session = session
        self.client = client
        self.server = server
        self.dirs = {Direction.C2S: _DirCrypto(), Direction.S2C: _DirCrypto()}
        self.first_ts = ts
        self.last_ts = ts
        self.pending_bytes = 0
        self.evicted = False
        self.keyed = False
        self.key_warning = False
        self.gaps = False
        self.wire_error = False
        self.alert_count = 0
        self.scanners: dict[Direction, StreamScanner] = {}
        self.last_status: Optional[str] = None

    @property
    def id(self) -> str:
        return self.session.id


class _FlowCtx:
    def __init__(self, key: FlowKey, client: Endpoint, server: Endpoint, ts: float):
        self.key = key
        self.parsers = {Direction.C2S: RecordParser(), Direction.S2C: RecordParser()}
        self.session = TlsSession(key)
        self.ctx = _SessionCtx(self.session, client, server, ts)
        self.not_tls = False
        self.registered = False


class Demux:
    """Per (session, direction) contiguous plaintext streams.

    Optionally forwards each append to ``sink(session_id, direction, data)``
    and/or keeps the bytes in memory.
    """

    def __init__(self, sink=None, keep: bool = True):
        self.sink = sink
        self.keep = keep
        self.lengths: dict[tuple[str, str], int] = {}
        self.streams: dict[tuple[str, str], bytearray] = {}

    def append(self, ev: DecryptedEvent) -> None:
        key = (ev.session_id, ev.direction.value)
        expected = self.lengths.get(key, 0)
        if ev.stream_offset != expected:
            raise OffsetGap(f"{key}: expected offset {expected}, got {ev.stream_offset}")
        self.lengths[key] = expected + len(ev.payload)
        if self.keep:
            self.streams.setdefault(key, bytearray()).extend(ev.payload)
        if self.sink is not None:
            self.sink(ev.session_id, ev.direction.value, ev.payload)

    def stream(self, session_id: str, direction) -> bytes:
        d = getattr(direction, "value", direction)
        return bytes(self.streams.get((session_id, d), b""))


def demux(streams: Demux, event: DecryptedEvent) -> Demux:
    streams.append(event)
    return streams


class Pipeline:
    def __init__(self, keystore: Optional[KeyStore] = None, config: Optional[PipelineConfig] = None):
        self.keystore = keystore if keystore is not None else KeyStore()
        self.config = config or PipelineConfig()
        self.reassembler = Reassembler(self.config.reassembly_max_pending, self.config.idle_timeout)
        self.flows: dict[FlowKey, _FlowCtx] = {}
        self.sessions: dict[str, _SessionCtx] = {}
        self.by_random: dict[bytes, list[_SessionCtx]] = collections.defaultdict(list)
        self.unregistered: list[_SessionCtx] = []
        self.not_tls_flows = 0
        self.total_pending = 0
        self.stats = RunStats()
        self._last_sweep: Optional[float] = None
        self._finished = False

    # --- input -------------------------------------------------------------

    def feed(self, packet: PcapPacket) -> list[Event]:
        self.stats.packets += 1
        try:
            seg = decode_frame(packet.link_type, packet.data, packet.ts)
        except DecodeError as exc:
            self.stats.decode_errors[exc.reason] += 1
            return []
        if isinstance(seg, NonTcp):
            self.stats.non_tcp += 1
            return []
        return self.feed_segment(seg)

    def feed_segment(self, seg: TcpSegment) -> list[Event]:
        ports = self.config.ports
        if ports and seg.src.port not in ports and seg.dst.port not in ports:
            self.stats.filtered += 1
            return []
        out: list[Event] = []
        if self._last_sweep is None:
            self._last_sweep = seg.ts
        elif seg.ts - self._last_sweep >= 1.0:
            self._last_sweep = seg.ts
            for key in self.reassembler.idle_flows(seg.ts):
                out.extend(self._close_flow(key))

        fc = self.flows.get(seg.flow)
        if fc is None:
            client = seg.src if seg.direction is Direction.C2S else seg.dst
            server = seg.dst if client == seg.src else seg.src
            fc = _FlowCtx(seg.flow, client, server, seg.ts)
            self.flows[seg.flow] = fc
        fc.ctx.last_ts = max(fc.ctx.last_ts, seg.ts)
        if fc.not_tls:
            return out
        for ev in self.reassembler.track(seg):
            out.extend(self._stream_event(fc, ev))
        return out

    def on_key(self, entry: KeyLogEntry) -> list[Event]:
        """React to a key log entry that arrived after the capture started."""
        out: list[Event] = []
        for ctx in list(self.by_random.get(entry.client_random, ())):
            out.extend(self._try_keys(ctx))
        return out

    def finish(self) -> list[Event]:
        out: list[Event] = []
        for key in list(self.flows):
            out.extend(self._close_flow(key))
        self._finished = True
        for ctx in self._all_sessions():
            out.append(self.session_record(ctx))
        return out

    # --- stream handling ---------------------------------------------------

    def _close_flow(self, key: FlowKey) -> list[Event]:
        fc = self.flows.pop(key, None)
        out: list[Event] = []
        if key in self.reassembler.flows:
            events = self.reassembler.flush_flow(key)
            if fc is not None and not fc.not_tls:
                for ev in events:
                    out.extend(self._stream_event(fc, ev))
        if fc is not None and not fc.not_tls and not fc.registered and fc.ctx not in self.unregistered:
            # TLS-looking flow that never showed a ClientHello
            if any(p.seen_record for p in fc.parsers.values()):
                fc.session.id = f"flow-{flow_hash(key)}"
                if fc.session.state != "broken":
                    fc.session.mark_broken("no ClientHello in capture")
                self.unregistered.append(fc.ctx)
                self.sessions[fc.session.id] = fc.ctx
        return out

    def _stream_event(self, fc: _FlowCtx, ev) -> list[Event]:
        if fc.not_tls:
            return []
        session = fc.session
        d = ev.direction
        if isinstance(ev, Gap):
            fc.ctx.gaps = True
            parser = fc.parsers[d]
            session.note_gap(d, at_boundary=not parser.tail)
            parser.tail = b""
            parser.resync = True
            return []
        if isinstance(ev, Close):
            return []
        assert isinstance(ev, Data)
        parser = fc.parsers[d]
        if parser.resync:
            parser.resync = False
            if not plausible_header(ev.data):
                session.stopped[d] = True
        if session.stopped[d] or session.state == "broken":
            return []
        try:
            records = parser.feed(ev.data)
        except NotTls:
            fc.not_tls = True
            self.not_tls_flows += 1
            self.reassembler.ignore(fc.key)
            return []
        except WireError as exc:
            logger.info("%s %s: %s", fc.key, d.value, exc)
            fc.ctx.wire_error = True
            if session.handshake_complete:
                session.stopped[d] = True
            else:
                session.mark_broken(str(exc))
            return []
        out: list[Event] = []
        for rec in records:
            try:
                sevents = session.advance(rec, d, ev.ts)
            except WireError:
                self.stats.state_violations += 1
                break
            if not fc.registered and session.client_random is not None:
                self._register(fc)
            for sev in sevents:
                if isinstance(sev, EncryptedRecord):
                    out.extend(self._queue(fc.ctx, sev))
            if (session.server_random is not None and not fc.ctx.keyed
                    and fc.registered and not fc.ctx.evicted):
                out.extend(self._try_keys(fc.ctx))
            if session.state == "broken":
                break
        return out

    def _register(self, fc: _FlowCtx) -> None:
        s = fc.session
        if s.id in self.sessions:
            s.id = f"{s.id}-{flow_hash(fc.key)}"
        fc.registered = True
        self.sessions[s.id] = fc.ctx
        self.by_random[s.client_random].append(fc.ctx)

    # --- keys and decryption -----------------------------------------------

    def _try_keys(self, ctx: _SessionCtx) -> list[Event]:
        s = ctx.session
        if s.server_random is None or ctx.evicted or s.state == "broken":
            return []
        if not ks.suite_supported(s.cipher_suite, s.version):
            return []
        assert s.client_random and s.server_random and s.cipher_suite is not None and s.version
        out: list[Event] = []
        for d in (Direction.C2S, Direction.S2C):
            self._ensure_keys(ctx, d)
            out.extend(self._drain(ctx, d))
        return out

    def _ensure_keys(self, ctx: _SessionCtx, d: Direction) -> bool:
        dc = ctx.dirs[d]
        if dc.keys is not None:
            return True
        s = ctx.session
        suite = ks.SUITES[s.cipher_suite]
        if s.version == ks.TLS12:
            master = self.keystore.get(s.client_random, Label.CLIENT_RANDOM)
            if master is None:
                return False
            client, server = ks.derive_keys_tls12(master, s.client_random, s.server_random, suite)
            ctx.dirs[Direction.C2S].keys = client
            ctx.dirs[Direction.S2C].keys = server
        else:
            secret = self.keystore.get(s.client_random, _TLS13_LABELS[(d, dc.epoch)])
            if secret is None:
                return False
            try:
                dc.keys = ks.derive_keys_tls13(secret, suite)
            except ks.SecretLengthError as exc:
                logger.warning("session %s: %s", ctx.id, exc)
                return False
        ctx.keyed = True
        return True

    def _queue(self, ctx: _SessionCtx, rec: EncryptedRecord) -> list[Event]:
        s = ctx.session
        if ctx.evicted or not ks.suite_supported(s.cipher_suite, s.version):
            return []
        size = len(rec.ciphertext)
        if ctx.pending_bytes + size > self.config.max_pending_session:
            self._evict(ctx)
            return []
        ctx.dirs[rec.direction].pending.append(rec)
        ctx.pending_bytes += size
        self.total_pending += size
        while self.total_pending > self.config.max_pending_total:
            victim = max(self._all_sessions(), key=lambda c: c.pending_bytes)
            self._evict(victim)
        if ctx.evicted:
            return []
        return self._drain(ctx, rec.direction)

    def _evict(self, ctx: _SessionCtx) -> None:
        logger.warning("session %s: pending budget exceeded, dropping %d buffered bytes",
                       ctx.id, ctx.pending_bytes)
        for dc in ctx.dirs.values():
            dc.pending.clear()
        self.total_pending -= ctx.pending_bytes
        ctx.pending_bytes = 0
        ctx.evicted = True

    def _drain(self, ctx: _SessionCtx, d: Direction) -> list[Event]:
        dc = ctx.dirs[d]
        s = ctx.session
        out: list[Event] = []
        if s.server_random is None or not ks.suite_supported(s.cipher_suite, s.version):
            return out
        while dc.pending and not dc.dead:
            if not self._ensure_keys(ctx, d):
                break
            rec = dc.pending.popleft()
            ctx.pending_bytes -= len(rec.ciphertext)
            self.total_pending -= len(rec.ciphertext)
            out.extend(self._decrypt_one(ctx, d, rec))
        return out

    def _decrypt_one(self, ctx: _SessionCtx, d: Direction, rec: EncryptedRecord) -> list[Event]:
        dc = ctx.dirs[d]
        s = ctx.session
        suite = ks.SUITES[s.cipher_suite]
        keys = dc.keys
        if rec.after_gap:
            for skip in range(MAX_GAP_SKIP):
                trial = copy.copy(keys)
                trial.seq = keys.seq + skip
                try:
                    pt = decrypt_record(trial, rec, suite, s.version)
                except RecordCryptError:
                    continue
                keys.seq = trial.seq
                break
            else:
                logger.info("session %s %s: lost sequence after gap", ctx.id, d.value)
                dc.dead = True
                dc.pending.clear()
                return []
        else:
            if s.version == ks.TLS12 and rec.seq != keys.seq:
                logger.debug("session %s %s: record seq %d vs key seq %d",
                             ctx.id, d.value, rec.seq, keys.seq)
            try:
                pt = decrypt_record(keys, rec, suite, s.version)
            except RecordCryptError as exc:
                dc.failures += 1
                self.stats.auth_failures += 1
                logger.info("session %s: %s", ctx.id, exc)
                return []
        dc.decrypted += 1
        out: list[Event] = []
        if s.version == ks.TLS12 and not dc.first_checked:
            dc.first_checked = True
            if verify_finished_alignment(s.version, pt) == "warning":
                ctx.key_warning = True
                logger.warning("session %s %s: first decrypted record is not Finished; "
                               "key log entry may belong to another session", ctx.id, d.value)
        if pt.content_type == CT_APPLICATION_DATA and pt.payload:
            ev = DecryptedEvent(ctx.id, d, dc.offset, pt.payload, pt.content_type, rec.ts)
            dc.offset += len(pt.payload)
            out.append(ev)
            out.extend(self._scan(ctx, ev))
        elif pt.content_type == CT_HANDSHAKE and s.version == ks.TLS13:
            for msg in dc.hs.feed(pt.payload):
                if msg.msg_type == HS_FINISHED and dc.epoch == "handshake":
                    dc.epoch = "application"
                    dc.keys = None
                elif msg.msg_type == HS_KEY_UPDATE and dc.epoch == "application" and dc.keys:
                    secret = ks.next_secret_tls13(dc.keys.secret, suite)
                    dc.keys = ks.derive_keys_tls13(secret, suite)
        return out

    def _scan(self, ctx: _SessionCtx, ev: DecryptedEvent) -> list[Event]:
        rules = self.config.rules
        if rules is None or not len(rules):
            return []
        sc = ctx.scanners.get(ev.direction)
        if sc is None:
            sc = ctx.scanners[ev.direction] = StreamScanner(rules, ctx.id, ev.direction.value)
        alerts = sc.feed(ev.payload, ev.stream_offset, ev.ts)
        ctx.alert_count += len(alerts)
        return alerts

    # --- reporting ---------------------------------------------------------

    def _all_sessions(self) -> list[_SessionCtx]:
        return list(self.sessions.values())

    def status_of(self, ctx: _SessionCtx) -> Status:
        s = ctx.session
        if s.state == "broken" or s.client_random is None or s.server_random is None:
            return Status.BROKEN
        if not ks.suite_supported(s.cipher_suite, s.version):
            return Status.UNSUPPORTED_SUITE
        decrypted = sum(dc.decrypted for dc in ctx.dirs.values())
        if ctx.evicted and decrypted == 0:
            return Status.NO_KEY
        if not ctx.keyed and decrypted == 0:
            return Status.NO_KEY
        leftovers = any(dc.pending or dc.failures or dc.dead for dc in ctx.dirs.values())
        if (leftovers or ctx.evicted or ctx.gaps or ctx.key_warning or ctx.wire_error
                or s.renegotiated or s.dropped_records or any(s.stopped.values())):
            return Status.PARTIAL
        return Status.DECRYPTED

    def session_record(self, ctx: _SessionCtx) -> SessionRecord:
        s = ctx.session
        return SessionRecord(
            id=ctx.id,
            src=str(ctx.client),
            dst=str(ctx.server),
            version=s.version_name,
            cipher=f"0x{s.cipher_suite:04x}" if s.cipher_suite is not None else None,
            sni=s.sni,
            status=self.status_of(ctx).value,
            c2s_bytes=ctx.dirs[Direction.C2S].offset,
            s2c_bytes=ctx.dirs[Direction.S2C].offset,
            first_ts=ctx.first_ts,
            last_ts=ctx.last_ts,
            alert_count=ctx.alert_count,
        )

    def session_records(self) -> list[SessionRecord]:
        return sorted((self.session_record(c) for c in self._all_sessions()),
                      key=lambda r: (r.first_ts, r.id))

    def summary(self) -> collections.Counter:
        counts = collections.Counter(r.status for r in self.session_records())
        if self.not_tls_flows:
            counts[Status.NOT_TLS.value] = self.not_tls_flows
        return counts

    def updates(self) -> list[SessionUpdate]:
        """Snapshots of sessions whose status changed since the last call."""
        out = []
        for ctx in self._all_sessions():
            rec = self.session_record(ctx)
            if rec.status != ctx.last_status:
                ctx.last_status = rec.status
                out.append(SessionUpdate(rec))
        return out


def process(packets: Iterable[PcapPacket], keystore: Optional[KeyStore] = None,
            config: Optional[PipelineConfig] = None) -> Iterator[Event]:
    """File mode: run every packet through a fresh pipeline, then finalize."""
    pipe = Pipeline(keystore, config)
    for packet in packets:
        yield from pipe.feed(packet)
    yield from pipe.finish()
