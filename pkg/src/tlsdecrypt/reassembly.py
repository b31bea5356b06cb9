"""Per-direction TCP byte stream reconstruction.

Sequence numbers are unwrapped into 64-bit stream offsets (offset 0 is the
first byte after the ISN) so wraparound never leaks into the buffer logic.
On overlapping data the bytes that arrived first are kept.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

from .capture import Direction, Endpoint, FlowKey, TcpFlags, TcpSegment
from .errors import TlsDecryptError

logger = logging.getLogger(__name__)

SEQ_MOD = 1 << 32
DEFAULT_MAX_PENDING = 4 * 1024 * 1024
DEFAULT_IDLE_TIMEOUT = 300.0


class UnknownFlow(TlsDecryptError):
    pass


class BufferOverflow(TlsDecryptError):
    pass


@dataclass(frozen=True)
class Data:
    flow: FlowKey
    direction: Direction
    data: bytes
    ts: float = 0.0


@dataclass(frozen=True)
class Close:
    flow: FlowKey
    direction: Direction
    ts: float = 0.0


@dataclass(frozen=True)
class Gap:
    flow: FlowKey
    direction: Direction
    missing: int
    ts: float = 0.0


StreamEvent = Union[Data, Close, Gap]


@dataclass
class StreamBuffer:
    isn: Optional[int] = None
    base_seq: Optional[int] = None  # seq of stream offset 0
    next_off: int = 0
    starts: list = field(default_factory=list)  # sorted pending offsets
    chunks: dict = field(default_factory=dict)  # offset -> bytes
    pending_bytes: int = 0
    delivered: int = 0
    fin_off: Optional[int] = None
    state: str = "open"  # open | half_closed | closed | broken

    @property
    def next_expected(self) -> Optional[int]:
        if self.base_seq is None:
            return None
        return (self.base_seq + self.next_off) % SEQ_MOD

    def offset_of(self, seq: int) -> int:
        diff = (seq - self.next_expected + (1 << 31)) % SEQ_MOD - (1 << 31)
        return self.next_off + diff

    def insert(self, off: int, data: bytes) -> None:
        """Add bytes at ``off`` keeping only the parts nobody delivered yet."""
        end = off + len(data)
        if end <= self.next_off:
            return
        if off < self.next_off:
            data = data[self.next_off - off:]
            off = self.next_off
        # walk existing chunks and fill only the uncovered holes
        i = bisect.bisect_right(self.starts, off) - 1
        if i >= 0:
            s = self.starts[i]
            if s + len(self.chunks[s]) <= off:
                i += 1
        else:
            i = 0
        cursor = off
        new_pieces = []
        while cursor < end:
            if i < len(self.starts) and self.starts[i] <= cursor:
                s = self.starts[i]
                cursor = max(cursor, s + len(self.chunks[s]))
                i += 1
                continue
            hole_end = end if i >= len(self.starts) else min(end, self.starts[i])
            new_pieces.append((cursor, data[cursor - off:hole_end - off]))
            cursor = hole_end
        for s, piece in new_pieces:
            bisect.insort(self.starts, s)
            self.chunks[s] = piece
            self.pending_bytes += len(piece)

    def pop_contiguous(self) -> bytes:
        out = []
        while self.starts and self.starts[0] == self.next_off:
            s = self.starts.pop(0)
            piece = self.chunks.pop(s)
            self.pending_bytes -= len(piece)
            out.append(piece)
            self.next_off += len(piece)
        data = b"".join(out)
        self.delivered += len(data)
        return data

    def skip_to_next_chunk(self) -> int:
        """Jump over the first hole; return how many bytes were missing."""
        missing = self.starts[0] - self.next_off
        self.next_off = self.starts[0]
        return missing


@dataclass
class FlowState:
    key: FlowKey
    client: Endpoint
    dirs: dict
    last_ts: float = 0.0
    ignored: bool = False

    def direction_of(self, seg: TcpSegment) -> Direction:
        return Direction.C2S if seg.src == self.client else Direction.S2C


class Reassembler:
    """Reassemble every flow seen by :meth:`track`.

    ``max_pending`` caps out-of-order bytes held per direction.
    """

    def __init__(self, max_pending: int = DEFAULT_MAX_PENDING,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        self.max_pending = max_pending
        self.idle_timeout = idle_timeout
        self.flows: dict[FlowKey, FlowState] = {}

    def _flow_for(self, seg: TcpSegment) -> FlowState:
        st = self.flows.get(seg.flow)
        if st is None:
            client = seg.src if seg.direction is Direction.C2S else seg.dst
            st = FlowState(seg.flow, client, {Direction.C2S: StreamBuffer(),
                                              Direction.S2C: StreamBuffer()})
            self.flows[seg.flow] = st
        return st

    def direction_of(self, seg: TcpSegment) -> Direction:
        st = self.flows.get(seg.flow)
        return st.direction_of(seg) if st else seg.direction

    def client_of(self, flow: FlowKey) -> Endpoint:
        return self.flows[flow].client

    def ignore(self, flow: FlowKey) -> None:
        """Stop buffering a flow (e.g. it is not TLS); keep tracking its existence."""
        st = self.flows.get(flow)
        if st is not None:
            st.ignored = True
            for buf in st.dirs.values():
                buf.starts.clear()
                buf.chunks.clear()
                buf.pending_bytes = 0

    def track(self, seg: TcpSegment) -> list[StreamEvent]:
        st = self._flow_for(seg)
        st.last_ts = max(st.last_ts, seg.ts)
        d = st.direction_of(seg)
        buf = st.dirs[d]
        if buf.state in ("closed",) or st.ignored:
            return []
        events: list[StreamEvent] = []

        seq = seg.seq
        if seg.flags & TcpFlags.SYN:
            if buf.base_seq is None:
                buf.isn = seq
                buf.base_seq = (seq + 1) % SEQ_MOD
            seq = (seq + 1) % SEQ_MOD
        elif buf.base_seq is None:
            if not seg.payload and not seg.flags & (TcpFlags.FIN | TcpFlags.RST):
                return events
            # capture began mid-connection: first observed byte is offset 0
            buf.base_seq = seq

        off = buf.offset_of(seq)
        if seg.payload:
            buf.insert(off, seg.payload)
            data = buf.pop_contiguous()
            if data:
                events.append(Data(seg.flow, d, data, seg.ts))
            while buf.pending_bytes > self.max_pending:
                buf.state = "broken"
                missing = buf.skip_to_next_chunk()
                logger.warning("%s %s: out-of-order buffer over %d bytes, skipping %d",
                               seg.flow, d.value, self.max_pending, missing)
                events.append(Gap(seg.flow, d, missing, seg.ts))
                data = buf.pop_contiguous()
                if data:
                    events.append(Data(seg.flow, d, data, seg.ts))

        if seg.flags & TcpFlags.RST:
            buf.state = "closed"
            events.append(Close(seg.flow, d, seg.ts))
            return events
        if seg.flags & TcpFlags.FIN and buf.fin_off is None:
            buf.fin_off = off + len(seg.payload)
        if buf.fin_off is not None and buf.next_off >= buf.fin_off and buf.state != "closed":
            buf.state = "closed"
            events.append(Close(seg.flow, d, seg.ts))
            peer = st.dirs[d.peer]
            if peer.state == "open":
                peer.state = "half_closed"
        return events

    def flush_flow(self, flow: FlowKey) -> list[StreamEvent]:
        st = self.flows.pop(flow, None)
        if st is None:
            raise UnknownFlow(str(flow))
        events: list[StreamEvent] = []
        if st.ignored:
            return events
        for d in (Direction.C2S, Direction.S2C):
            buf = st.dirs[d]
            while buf.starts:
                events.append(Gap(flow, d, buf.skip_to_next_chunk(), st.last_ts))
                data = buf.pop_contiguous()
                if data:
                    events.append(Data(flow, d, data, st.last_ts))
            if buf.state != "closed":
                buf.state = "closed"
                events.append(Close(flow, d, st.last_ts))
        return events

    def idle_flows(self, now: float) -> list[FlowKey]:
        return [k for k, st in self.flows.items() if now - st.last_ts > self.idle_timeout]

    def evict_idle(self, now: float) -> list[StreamEvent]:
        events: list[StreamEvent] = []
        for key in self.idle_flows(now):
            events.extend(self.flush_flow(key))
        return events
