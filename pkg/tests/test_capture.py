import ipaddress
import struct

import pytest
from hypothesis import given, settings, strategies as st

import tlsfixture as F
from tlsdecrypt.capture import (BadMagic, DecodeError, Direction, Endpoint, FileRemoved, FlowKey,
                                NonTcp, PcapTail, TcpFlags, TcpSegment, decode_frame,
                                follow_pcap, open_pcap)


def _frames(n=3):
    return [(1000.0 + i, F.tcp_frame("10.0.0.1", "10.0.0.2", 40000, 443, 100 + i, 0, F.ACK,
                                     bytes([i]) * (i + 1)))
            for i in range(n)]


def test_header_only_pcap_is_empty(tmp_path):
    path = F.write_pcap(tmp_path / "empty.pcap", [])
    reader = open_pcap(path)
    assert list(reader) == []
    assert not reader.truncated


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.pcap"
    p.write_bytes(bytes.fromhex("0a0b0c0d") + bytes(20))
    with pytest.raises(BadMagic):
        open_pcap(p)


def test_short_file_is_truncated_header(tmp_path):
    from tlsdecrypt.capture import TruncatedHeader
    p = tmp_path / "short.pcap"
    p.write_bytes(F.pcap_bytes([])[:10])
    with pytest.raises(TruncatedHeader):
        open_pcap(p)


@pytest.mark.parametrize("nano", [False, True])
@pytest.mark.parametrize("big_endian", [False, True])
def test_three_frames_byte_exact(tmp_path, nano, big_endian):
    frames = _frames()
    path = F.write_pcap(tmp_path / "three.pcap", frames, nano=nano, big_endian=big_endian)
    packets = list(open_pcap(path))
    assert [p.data for p in packets] == [f for _, f in frames]
    assert [p.ts for p in packets] == pytest.approx([t for t, _ in frames])
    assert all(p.link_type == 1 for p in packets)


def test_truncated_trailing_record_reported(tmp_path):
    raw = F.pcap_bytes(_frames())
    p = tmp_path / "cut.pcap"
    p.write_bytes(raw[:-7])
    reader = open_pcap(p)
    assert len(list(reader)) == 2
    assert reader.truncated


def test_decode_hello_payload():
    seg = decode_frame(1, F.tcp_frame("192.168.1.2", "93.184.216.34", 51000, 443, 7, 0,
                                      F.ACK | F.PSH, b"hello"))
    assert isinstance(seg, TcpSegment)
    assert seg.payload == b"hello"
    assert seg.seq == 7
    assert seg.flags == TcpFlags.ACK | TcpFlags.PSH
    assert seg.direction is Direction.C2S
    assert str(seg.src) == "192.168.1.2:51000"


def test_decode_arp_is_non_tcp():
    frame = b"\xff" * 6 + b"\x02" * 6 + b"\x08\x06" + bytes(28)
    assert isinstance(decode_frame(1, frame), NonTcp)


def test_decode_udp_is_non_tcp():
    frame = bytearray(F.tcp_frame("10.0.0.1", "10.0.0.2", 1, 2, 0, 0, 0))
    frame[14 + 9] = 17
    assert isinstance(decode_frame(1, bytes(frame)), NonTcp)


def test_decode_truncated_tcp_header():
    frame = F.tcp_frame("10.0.0.1", "10.0.0.2", 1000, 443, 1, 0, F.ACK)
    ip_start = 14
    cut = bytearray(frame[:ip_start + 20 + 10])
    struct.pack_into(">H", cut, ip_start + 2, 30)  # total length consistent with the cut
    with pytest.raises(DecodeError) as err:
        decode_frame(1, bytes(cut))
    assert err.value.reason == "tcp header truncated"


def test_ip_fragment_rejected():
    frame = bytearray(F.tcp_frame("10.0.0.1", "10.0.0.2", 1000, 443, 1, 0, F.ACK, b"x"))
    struct.pack_into(">H", frame, 14 + 6, 0x2000)  # more-fragments
    with pytest.raises(DecodeError, match="fragment"):
        decode_frame(1, bytes(frame))


def test_vlan_and_ipv6():
    seg = decode_frame(1, F.tcp_frame("2001:db8::1", "2001:db8::2", 5555, 443, 9, 0, F.ACK, b"v6",
                                      vlan=42))
    assert seg.payload == b"v6"
    assert str(seg.src) == "[2001:db8::1]:5555"


def test_ethernet_trailer_padding_dropped():
    frame = F.tcp_frame("10.0.0.1", "10.0.0.2", 1000, 443, 1, 0, F.ACK) + b"\x00" * 6
    assert decode_frame(1, frame).payload == b""


def test_raw_and_sll_link_types():
    eth = F.tcp_frame("10.0.0.1", "10.0.0.2", 1000, 443, 1, 0, F.ACK, b"raw")
    assert decode_frame(101, eth[14:]).payload == b"raw"
    sll = b"\x00\x00\x03\x04\x00\x06" + bytes(8) + b"\x08\x00" + eth[14:]
    assert decode_frame(113, sll).payload == b"raw"


def test_direction_from_syn_flags():
    a, b = Endpoint(ipaddress.ip_address("10.0.0.9"), 8443), Endpoint(ipaddress.ip_address("10.0.0.1"), 50000)
    syn = decode_frame(1, F.tcp_frame("10.0.0.1", "10.0.0.9", 50000, 8443, 1, 0, F.SYN))
    synack = decode_frame(1, F.tcp_frame("10.0.0.9", "10.0.0.1", 8443, 50000, 1, 0, F.SYN | F.ACK))
    assert syn.direction is Direction.C2S
    assert synack.direction is Direction.S2C
    assert syn.flow == synack.flow == FlowKey.of(a, b)


def test_mid_connection_uses_lower_port_as_server():
    seg = decode_frame(1, F.tcp_frame("10.0.0.1", "10.0.0.2", 50000, 8443, 1, 0, F.ACK, b"x"))
    assert seg.direction is Direction.C2S
    seg = decode_frame(1, F.tcp_frame("10.0.0.2", "10.0.0.1", 8443, 50000, 1, 0, F.ACK, b"x"))
    assert seg.direction is Direction.S2C


_ipv4 = st.ip_addresses(v=4).map(str)
_port = st.integers(1, 65535)


@settings(max_examples=200, deadline=None)
@given(_ipv4, _ipv4, _port, _port, st.integers(0, 2**32 - 1),
       st.sampled_from([F.ACK, F.ACK | F.PSH, F.FIN | F.ACK, F.RST, F.SYN]), st.binary(max_size=300))
def test_round_trip_and_canonical_flow(src, dst, sport, dport, seq, flags, payload):
    fwd = decode_frame(1, F.tcp_frame(src, dst, sport, dport, seq, 0, flags, payload))
    rev = decode_frame(1, F.tcp_frame(dst, src, dport, sport, seq, 0, flags, payload))
    assert fwd.payload == payload
    assert fwd.seq == seq
    assert int(fwd.flags) == flags
    assert fwd.flow == rev.flow
    key = fwd.flow
    assert (key.a._sortkey()) <= (key.b._sortkey())


def test_follow_static_equals_open(tmp_path):
    path = F.write_pcap(tmp_path / "s.pcap", _frames(5))
    tail = PcapTail(path)
    assert [p.data for p in tail.poll()] == [p.data for p in open_pcap(path)]
    assert tail.poll() == []


def test_follow_append_and_split_write(tmp_path):
    raw = F.pcap_bytes(_frames(4))
    p = tmp_path / "grow.pcap"
    p.write_bytes(raw[:24 + 16 + len(_frames(1)[0][1])])
    tail = PcapTail(p)
    assert len(tail.poll()) == 1
    rest = raw[len(p.read_bytes()):]
    half = len(rest) // 3
    with open(p, "ab") as fh:
        fh.write(rest[:half])
    first = tail.poll()
    with open(p, "ab") as fh:
        fh.write(rest[half:])
    second = tail.poll()
    got = first + second
    assert [x.data for x in got] == [f for _, f in _frames(4)[1:]]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 400), min_size=1, max_size=12))
def test_follow_chunked_appends_equal_open(tmp_path_factory, cuts):
    d = tmp_path_factory.mktemp("chunks")
    frames = _frames(6)
    raw = F.pcap_bytes(frames)
    p = d / "c.pcap"
    p.write_bytes(b"")
    tail = PcapTail(p)
    got = []
    pos = 0
    for c in cuts:
        with open(p, "ab") as fh:
            fh.write(raw[pos:pos + c])
        pos += c
        got += tail.poll()
    with open(p, "ab") as fh:
        fh.write(raw[pos:])
    got += tail.poll()
    assert [x.data for x in got] == [x.data for x in open_pcap(p)]


def test_follow_pcap_generator_and_removal(tmp_path):
    import threading
    path = F.write_pcap(tmp_path / "f.pcap", _frames(2))
    stop = threading.Event()
    stop.set()
    assert len(list(follow_pcap(path, 10, stop))) == 2
    tail = PcapTail(path)
    tail.poll()
    (tmp_path / "f.pcap").unlink()
    with pytest.raises(FileRemoved):
        tail.poll()


def test_follow_bad_magic(tmp_path):
    p = tmp_path / "x.pcap"
    p.write_bytes(b"\x0a\x0b\x0c\x0d")
    with pytest.raises(BadMagic):
        PcapTail(p).poll()
