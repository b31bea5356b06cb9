"""Classic pcap reading and Ethernet/IP/TCP decoding.

Only the libpcap file format is handled (both byte orders, micro- and
nanosecond timestamps). Frames are decoded down to TCP; everything else is
reported as :class:`NonTcp` so callers can count and skip it.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import struct
import time
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from .errors import TlsDecryptError

logger = logging.getLogger(__name__)

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
# some platforms write DLT_RAW as 12/14 instead of the LINKTYPE value
_RAW_ALIASES = {LINKTYPE_RAW, 12, 14}

_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", "micro"),
    b"\xa1\xb2\xc3\xd4": (">", "micro"),
    b"\x4d\x3c\xb2\xa1": ("<", "nano"),
    b"\xa1\xb2\x3c\x4d": (">", "nano"),
}

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = 0x8100
IPPROTO_TCP = 6
IPPROTO_HOPOPTS = 0
IPPROTO_FRAGMENT = 44


class CaptureError(TlsDecryptError):
    pass


class BadMagic(CaptureError):
    pass


class TruncatedHeader(CaptureError):
    pass


class FileRemoved(CaptureError):
    pass


class DecodeError(CaptureError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class PcapHeader:
    magic: bytes
    endianness: str  # "little" | "big"
    ts_resolution: str  # "micro" | "nano"
    version: tuple[int, int]
    thiszone: int
    sigfigs: int
    snaplen: int
    link_type: int

    @property
    def _prefix(self) -> str:
        return "<" if self.endianness == "little" else ">"


@dataclass(frozen=True)
class PcapPacket:
    ts: float
    link_type: int
    data: bytes
    orig_len: int = 0


def parse_global_header(raw: bytes) -> PcapHeader:
    if len(raw) < 4 or raw[:4] not in _MAGICS:
        raise BadMagic(f"not a classic pcap file (magic {raw[:4].hex() or 'missing'})")
    if len(raw) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader(f"pcap global header needs 24 bytes, got {len(raw)}")
    prefix, resolution = _MAGICS[raw[:4]]
    vmaj, vmin, zone, sigfigs, snaplen, network = struct.unpack(prefix + "HHiIII", raw[4:24])
    if snaplen == 0:
        raise BadMagic("pcap snaplen is zero")
    return PcapHeader(
        magic=raw[:4],
        endianness="little" if prefix == "<" else "big",
        ts_resolution=resolution,
        version=(vmaj, vmin),
        thiszone=zone,
        sigfigs=sigfigs,
        snaplen=snaplen,
        link_type=network,
    )


def _parse_records(header: PcapHeader, buf: bytes, start: int) -> tuple[list[PcapPacket], int]:
    """Decode every complete record in buf[start:]; return them and the end offset."""
    out = []
    prefix = header._prefix
    divisor = 1e9 if header.ts_resolution == "nano" else 1e6
    pos = start
    n = len(buf)
    while pos + RECORD_HEADER_LEN <= n:
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack_from(prefix + "IIII", buf, pos)
        end = pos + RECORD_HEADER_LEN + incl_len
        if end > n:
            break
        out.append(PcapPacket(ts_sec + ts_frac / divisor, header.link_type,
                              bytes(buf[pos + RECORD_HEADER_LEN:end]), orig_len))
        pos = end
    return out, pos


class PcapReader:
    """Iterate over the records of a finished pcap file.

    ``truncated`` is set once iteration hits a partial trailing record.
    """

    def __init__(self, path: Union[str, os.PathLike]):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            self._raw = fh.read()
        self.header = parse_global_header(self._raw[:GLOBAL_HEADER_LEN])
        self.truncated = False

    def __iter__(self) -> Iterator[PcapPacket]:
        packets, end = _parse_records(self.header, self._raw, GLOBAL_HEADER_LEN)
        yield from packets
        if end != len(self._raw):
            self.truncated = True
            logger.warning("%s: truncated trailing record (%d stray bytes)",
                           self.path, len(self._raw) - end)


def open_pcap(path) -> PcapReader:
    return PcapReader(path)


class PcapTail:
    """Incremental reader for a pcap that may still be growing.

    Each :meth:`poll` returns records completed since the previous call. A
    half-written record stays unread until its last byte lands.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        self.header: Optional[PcapHeader] = None
        self.offset = 0
        self._pending = b""

    def poll(self) -> list[PcapPacket]:
        if not os.path.exists(self.path):
            raise FileRemoved(self.path)
        with open(self.path, "rb") as fh:
            fh.seek(self.offset + len(self._pending))
            chunk = fh.read()
        buf = self._pending + chunk
        if self.header is None:
            if len(buf) < GLOBAL_HEADER_LEN:
                if len(buf) >= 4 and buf[:4] not in _MAGICS:
                    raise BadMagic(f"not a classic pcap file (magic {buf[:4].hex()})")
                self._pending = buf
                return []
            self.header = parse_global_header(buf[:GLOBAL_HEADER_LEN])
            self.offset += GLOBAL_HEADER_LEN
            buf = buf[GLOBAL_HEADER_LEN:]
        packets, end = _parse_records(self.header, buf, 0)
        self.offset += end
        self._pending = buf[end:]
        return packets


def follow_pcap(path, poll_interval: float = 200, stop=None) -> Iterator[PcapPacket]:
    """Yield records as they are appended to ``path``.

    ``poll_interval`` is in milliseconds. Runs until ``stop`` (a
    ``threading.Event`` or anything with ``is_set``) is set.
    """
    tail = PcapTail(path)
    while True:
        yield from tail.poll()
        if stop is not None and stop.is_set():
            return
        time.sleep(poll_interval / 1000.0)


# --- frame decoding -------------------------------------------------------


class Direction(str, enum.Enum):
    C2S = "c2s"
    S2C = "s2c"

    @property
    def peer(self) -> "Direction":
        return Direction.S2C if self is Direction.C2S else Direction.C2S


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]


@dataclass(frozen=True)
class Endpoint:
    ip: IPAddress
    port: int

    def _sortkey(self):
        return (self.ip.version, int(self.ip), self.port)

    def __str__(self) -> str:
        if self.ip.version == 6:
            return f"[{self.ip}]:{self.port}"
        return f"{self.ip}:{self.port}"


@dataclass(frozen=True)
class FlowKey:
    """Canonical bidirectional TCP connection key; a < b always."""

    a: Endpoint
    b: Endpoint

    @classmethod
    def of(cls, src: Endpoint, dst: Endpoint) -> "FlowKey":
        if src._sortkey() <= dst._sortkey():
            return cls(src, dst)
        return cls(dst, src)

    @property
    def ip_a(self):
        return self.a.ip

    @property
    def ip_b(self):
        return self.b.ip

    @property
    def port_a(self):
        return self.a.port

    @property
    def port_b(self):
        return self.b.port

    def __str__(self) -> str:
        return f"{self.a}<->{self.b}"


@dataclass(frozen=True)
class TcpSegment:
    flow: FlowKey
    src: Endpoint
    dst: Endpoint
    direction: Direction
    seq: int
    flags: TcpFlags
    payload: bytes
    ts: float = 0.0

    @property
    def syn(self) -> bool:
        return bool(self.flags & TcpFlags.SYN)


@dataclass(frozen=True)
class NonTcp:
    what: str


def guess_direction(src: Endpoint, dst: Endpoint, flags: TcpFlags) -> Direction:
    """Stateless orientation guess; the reassembler pins it per flow."""
    if flags & TcpFlags.SYN:
        return Direction.S2C if flags & TcpFlags.ACK else Direction.C2S
    if dst.port == 443 and src.port != 443:
        return Direction.C2S
    if src.port == 443 and dst.port != 443:
        return Direction.S2C
    return Direction.C2S if dst.port < src.port else Direction.S2C


def _ip_payload(link_type: int, frame: bytes) -> tuple[int, bytes]:
    """Strip the link layer; return (ethertype, network-layer bytes)."""
    if link_type == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise DecodeError("ethernet header truncated")
        ethertype = struct.unpack_from(">H", frame, 12)[0]
        off = 14
        if ethertype == ETH_VLAN:
            if len(frame) < 18:
                raise DecodeError("vlan tag truncated")
            ethertype = struct.unpack_from(">H", frame, 16)[0]
            off = 18
        return ethertype, frame[off:]
    if link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            raise DecodeError("sll header truncated")
        return struct.unpack_from(">H", frame, 14)[0], frame[16:]
    if link_type in _RAW_ALIASES:
        if not frame:
            raise DecodeError("empty frame")
        version = frame[0] >> 4
        return (ETH_IPV4 if version == 4 else ETH_IPV6 if version == 6 else 0), frame
    if link_type == LINKTYPE_NULL:
        if len(frame) < 4:
            raise DecodeError("loopback header truncated")
        family = struct.unpack_from("<I", frame, 0)[0]
        if family > 0xFFFF:
            family = struct.unpack_from(">I", frame, 0)[0]
        if family == 2:
            return ETH_IPV4, frame[4:]
        if family in (10, 24, 28, 30):
            return ETH_IPV6, frame[4:]
        return 0, frame[4:]
    raise DecodeError(f"unsupported link type {link_type}")


def decode_frame(link_type: int, frame: bytes, ts: float = 0.0) -> Union[TcpSegment, NonTcp]:
    """Decode one captured frame down to a :class:`TcpSegment`.

    Raises :class:`DecodeError` when a declared header length runs past the
    captured bytes, or for IP fragments (not reassembled).
    """
    ethertype, ip = _ip_payload(link_type, frame)
    if ethertype == ETH_IPV4:
        if len(ip) < 20:
            raise DecodeError("ipv4 header truncated")
        ihl = (ip[0] & 0x0F) * 4
        if ihl < 20 or len(ip) < ihl:
            raise DecodeError("ipv4 header truncated")
        total_len, frag = struct.unpack_from(">H2xH", ip, 2)
        if frag & 0x3FFF:
            raise DecodeError("ip fragment")
        proto = ip[9]
        src_ip = ipaddress.IPv4Address(ip[12:16])
        dst_ip = ipaddress.IPv4Address(ip[16:20])
        if total_len < ihl:
            raise DecodeError("ipv4 total length too small")
        if total_len > len(ip):
            raise DecodeError("ip payload truncated")
        l4 = ip[ihl:total_len]  # drops ethernet trailer padding
    elif ethertype == ETH_IPV6:
        if len(ip) < 40:
            raise DecodeError("ipv6 header truncated")
        plen = struct.unpack_from(">H", ip, 4)[0]
        proto = ip[6]
        src_ip = ipaddress.IPv6Address(ip[8:24])
        dst_ip = ipaddress.IPv6Address(ip[24:40])
        if 40 + plen > len(ip):
            raise DecodeError("ip payload truncated")
        l4 = ip[40:40 + plen]
        if proto == IPPROTO_HOPOPTS:
            if len(l4) < 8 or len(l4) < (l4[1] + 1) * 8:
                raise DecodeError("ipv6 hop-by-hop header truncated")
            proto = l4[0]
            l4 = l4[(l4[1] + 1) * 8:]
        if proto == IPPROTO_FRAGMENT:
            raise DecodeError("ip fragment")
    else:
        return NonTcp(f"ethertype 0x{ethertype:04x}")

    if proto != IPPROTO_TCP:
        return NonTcp(f"ip proto {proto}")
    if len(l4) < 20:
        raise DecodeError("tcp header truncated")
    sport, dport, seq, _ack, off_flags = struct.unpack_from(">HHIIH", l4, 0)
    data_off = (off_flags >> 12) * 4
    if data_off < 20 or data_off > len(l4):
        raise DecodeError("tcp header truncated")
    flags = TcpFlags(off_flags & 0x1F)
    src = Endpoint(src_ip, sport)
    dst = Endpoint(dst_ip, dport)
    return TcpSegment(
        flow=FlowKey.of(src, dst),
        src=src,
        dst=dst,
        direction=guess_direction(src, dst, flags),
        seq=seq,
        flags=flags,
        payload=bytes(l4[data_off:]),
        ts=ts,
    )
