"""Synthetic TLS sessions, TCP packets and pcap files for tests.

Everything here is written independently of the package under test: the key
expansion oracle chains HMAC by hand, TLS 1.3 labels go through
cryptography's HKDFExpand, and records are sealed by an encrypt-side oracle.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

# id -> (kind, key_len, fixed_iv_len, mac_len, mac_hash, prf_hash)
ORACLE_SUITES = {
    0x002F: ("cbc", 16, 0, 20, "sha1", "sha256"),
    0x003C: ("cbc", 16, 0, 32, "sha256", "sha256"),
    0xC02F: ("gcm", 16, 4, 0, None, "sha256"),
    0xC030: ("gcm", 32, 4, 0, None, "sha384"),
    0xCCA8: ("chacha", 32, 12, 0, None, "sha256"),
    0x1301: ("gcm", 16, 12, 0, None, "sha256"),
    0x1302: ("gcm", 32, 12, 0, None, "sha384"),
    0x1303: ("chacha", 32, 12, 0, None, "sha256"),
}
TLS12_SUITES = [0x002F, 0x003C, 0xC02F, 0xC030, 0xCCA8]
TLS13_SUITES = [0x1301, 0x1302, 0x1303]
AEAD_SUITES = [0xC02F, 0xC030, 0xCCA8] + TLS13_SUITES


# --- key derivation oracles ---------------------------------------------------


def oracle_p_hash(secret: bytes, seed: bytes, n: int, hash_name: str = "sha256") -> bytes:
    """P_hash straight from the HMAC definition: A(0)=seed, A(i)=HMAC(secret, A(i-1))."""
    a_values = [seed]
    output = b""
    while len(output) < n:
        a_values.append(hmac.digest(secret, a_values[-1], hash_name))
        output += hmac.digest(secret, a_values[-1] + seed, hash_name)
    return output[:n]


def oracle_key_block(master: bytes, client_random: bytes, server_random: bytes, suite: int) -> dict:
    kind, key_len, iv_len, mac_len, _mac_hash, prf_hash = ORACLE_SUITES[suite]
    total = 2 * (mac_len + key_len + iv_len)
    block = oracle_p_hash(master, b"key expansion" + server_random + client_random, total, prf_hash)
    names = [("client_mac", mac_len), ("server_mac", mac_len), ("client_key", key_len),
             ("server_key", key_len), ("client_iv", iv_len), ("server_iv", iv_len)]
    out, pos = {}, 0
    for name, n in names:
        out[name] = block[pos:pos + n]
        pos += n
    return out


def _hash_obj(name: str):
    return hashes.SHA384() if name == "sha384" else hashes.SHA256()


def oracle_expand_label(secret: bytes, label: bytes, context: bytes, n: int,
                        hash_name: str = "sha256") -> bytes:
    full = b"tls13 " + label
    info = n.to_bytes(2, "big") + len(full).to_bytes(1, "big") + full + len(context).to_bytes(1, "big") + context
    return HKDFExpand(_hash_obj(hash_name), n, info).derive(secret)


def oracle_tls13_keys(secret: bytes, suite: int) -> tuple[bytes, bytes]:
    _kind, key_len, _iv, _mac, _mh, prf_hash = ORACLE_SUITES[suite]
    return (oracle_expand_label(secret, b"key", b"", key_len, prf_hash),
            oracle_expand_label(secret, b"iv", b"", 12, prf_hash))


def oracle_next_secret(secret: bytes, suite: int) -> bytes:
    prf_hash = ORACLE_SUITES[suite][5]
    return oracle_expand_label(secret, b"traffic upd", b"", len(secret), prf_hash)


# --- encrypt-side record oracle -------------------------------------------------


class SealingOracle:
    """Produces protected TLS records for one direction."""

    MAX_FRAGMENT = 1 << 14

    def __init__(self, suite: int, version: int, key: bytes, iv: bytes, mac_key: bytes = b"",
                 rng: random.Random = None):
        self.suite = suite
        self.version = version
        self.kind = ORACLE_SUITES[suite][0]
        self.mac_hash = ORACLE_SUITES[suite][4]
        self.key, self.iv, self.mac_key = key, iv, mac_key
        self.seq = 0
        self.rng = rng or random.Random(0)
        self.nonces: list[bytes] = []

    def rekey(self, key: bytes, iv: bytes) -> None:
        self.key, self.iv, self.seq = key, iv, 0

    def _xor_nonce(self) -> bytes:
        seq_bytes = b"\x00" * 4 + self.seq.to_bytes(8, "big")
        return bytes(x ^ y for x, y in zip(self.iv, seq_bytes))

    def seal_all(self, content_type: int, payload: bytes, pad: int = 0) -> bytes:
        """Seal ``payload`` as one or more records of at most 2^14 bytes."""
        step = self.MAX_FRAGMENT - (pad + 1 if self.version == 0x0304 else 0)
        parts = [payload[i:i + step] for i in range(0, len(payload), step)] or [b""]
        return b"".join(self.seal(content_type, part, pad) for part in parts)

    def seal(self, content_type: int, payload: bytes, pad: int = 0) -> bytes:
        if self.version == 0x0304:
            body = self._seal13(content_type, payload, pad)
            header = bytes([23, 3, 3]) + len(body).to_bytes(2, "big")
        else:
            body = self._seal12(content_type, payload)
            header = bytes([content_type, 3, 3]) + len(body).to_bytes(2, "big")
        self.seq += 1
        return header + body

    def _seal13(self, content_type, payload, pad):
        inner = payload + bytes([content_type]) + b"\x00" * pad
        nonce = self._xor_nonce()
        self.nonces.append(nonce)
        aad = bytes([23, 3, 3]) + (len(inner) + 16).to_bytes(2, "big")
        aead = ChaCha20Poly1305(self.key) if self.kind == "chacha" else AESGCM(self.key)
        return aead.encrypt(nonce, inner, aad)

    def _seal12(self, content_type, payload):
        seq_ct_ver = self.seq.to_bytes(8, "big") + bytes([content_type, 3, 3])
        if self.kind == "gcm":
            explicit = self.seq.to_bytes(8, "big")
            nonce = self.iv + explicit
            self.nonces.append(nonce)
            aad = seq_ct_ver + len(payload).to_bytes(2, "big")
            return explicit + AESGCM(self.key).encrypt(nonce, payload, aad)
        if self.kind == "chacha":
            nonce = self._xor_nonce()
            self.nonces.append(nonce)
            aad = seq_ct_ver + len(payload).to_bytes(2, "big")
            return ChaCha20Poly1305(self.key).encrypt(nonce, payload, aad)
        mac = hmac.new(self.mac_key, seq_ct_ver + len(payload).to_bytes(2, "big") + payload,
                       self.mac_hash).digest()
        plain = payload + mac
        pad_len = 15 - (len(plain) % 16) + 16 * self.rng.randrange(0, 3)
        if pad_len > 255:
            pad_len -= 16
        plain += bytes([pad_len]) * (pad_len + 1)
        iv = self.rng.randbytes(16)
        enc = Cipher(algorithms.AES(self.key), modes.CBC(iv)).encryptor()
        return iv + enc.update(plain) + enc.finalize()


# --- handshake message builders ----------------------------------------------------


def hs(msg_type: int, body: bytes) -> bytes:
    return bytes([msg_type]) + len(body).to_bytes(3, "big") + body


def record(content_type: int, payload: bytes, version: int = 0x0303) -> bytes:
    return bytes([content_type]) + version.to_bytes(2, "big") + len(payload).to_bytes(2, "big") + payload


def _ext(etype: int, data: bytes) -> bytes:
    return etype.to_bytes(2, "big") + len(data).to_bytes(2, "big") + data


def client_hello(client_random: bytes, suites, sni=None, versions=None, session_id=b"",
                 with_extensions=True, compression=b"\x00") -> bytes:
    body = b"\x03\x03" + client_random + bytes([len(session_id)]) + session_id
    sbytes = b"".join(s.to_bytes(2, "big") for s in suites)
    body += len(sbytes).to_bytes(2, "big") + sbytes
    body += bytes([len(compression)]) + compression
    if with_extensions:
        exts = b""
        if sni is not None:
            name = sni.encode()
            entry = b"\x00" + len(name).to_bytes(2, "big") + name
            exts += _ext(0, len(entry).to_bytes(2, "big") + entry)
        if versions:
            vb = b"".join(v.to_bytes(2, "big") for v in versions)
            exts += _ext(43, bytes([len(vb)]) + vb)
        exts += _ext(10, b"\x00\x02\x00\x1d")  # supported_groups: x25519
        body += len(exts).to_bytes(2, "big") + exts
    return hs(1, body)


def server_hello(server_random: bytes, suite: int, version13=False, session_id=b"",
                 compression=0) -> bytes:
    body = b"\x03\x03" + server_random + bytes([len(session_id)]) + session_id
    body += suite.to_bytes(2, "big") + bytes([compression])
    exts = b""
    if version13:
        exts += _ext(43, b"\x03\x04")
        exts += _ext(51, b"\x00\x1d\x00\x20" + bytes(32))
    body += len(exts).to_bytes(2, "big") + exts
    return hs(2, body)


# --- whole sessions -------------------------------------------------------------------


@dataclass
class FixtureSession:
    suite: int
    version: int
    client_random: bytes
    server_random: bytes
    keylog_lines: list
    flights: list  # (direction, bytes) in wire order; direction "c2s" | "s2c"
    c2s_plain: bytes = b""
    s2c_plain: bytes = b""
    sni: str = "example.com"
    sealers: dict = field(default_factory=dict)

    @property
    def session_id(self) -> str:
        return self.client_random[:8].hex()

    @property
    def keylog_text(self) -> str:
        return "".join(line + "\n" for line in self.keylog_lines)

    def stream(self, direction: str) -> bytes:
        return b"".join(data for d, data in self.flights if d == direction)


def _split_messages(rng, messages):
    out = []
    for m in messages:
        cut = rng.randrange(1, len(m)) if len(m) > 8 and rng.random() < 0.3 else None
        out.extend([m] if cut is None else [m[:cut], m[cut:]])
    return out


def build_tls12(suite: int, c2s_msgs, s2c_msgs, seed: int = 0, sni: str = "example.com",
                master: bytes = None, client_random: bytes = None) -> FixtureSession:
    """A full TLS 1.2 handshake followed by application data in both directions."""
    rng = random.Random(seed)
    client_random = client_random or rng.randbytes(32)
    server_random = rng.randbytes(32)
    master = master or rng.randbytes(48)
    kb = oracle_key_block(master, client_random, server_random, suite)
    cw = SealingOracle(suite, 0x0303, kb["client_key"], kb["client_iv"], kb["client_mac"], rng)
    sw = SealingOracle(suite, 0x0303, kb["server_key"], kb["server_iv"], kb["server_mac"], rng)

    flights = []
    flights.append(("c2s", record(22, client_hello(client_random, [suite, 0x009C], sni=sni), 0x0301)))
    s_hs = server_hello(server_random, suite) + hs(11, rng.randbytes(300)) + hs(14, b"")
    flights.append(("s2c", record(22, s_hs)))
    flights.append(("c2s", record(22, hs(16, rng.randbytes(33))) + record(20, b"\x01")
                    + cw.seal(22, hs(20, rng.randbytes(12)))))
    flights.append(("s2c", record(20, b"\x01") + sw.seal(22, hs(20, rng.randbytes(12)))))
    c_plain, s_plain = [], []
    for i in range(max(len(c2s_msgs), len(s2c_msgs))):
        if i < len(c2s_msgs):
            flights.append(("c2s", cw.seal_all(23, c2s_msgs[i])))
            c_plain.append(c2s_msgs[i])
        if i < len(s2c_msgs):
            flights.append(("s2c", sw.seal_all(23, s2c_msgs[i])))
            s_plain.append(s2c_msgs[i])
    flights.append(("c2s", cw.seal(21, b"\x01\x00")))
    return FixtureSession(
        suite, 0x0303, client_random, server_random,
        [f"CLIENT_RANDOM {client_random.hex()} {master.hex()}"],
        flights, b"".join(c_plain), b"".join(s_plain), sni, {"c2s": cw, "s2c": sw},
    )


def build_tls13(suite: int, c2s_msgs, s2c_msgs, seed: int = 0, sni: str = "example.com",
                key_update_at: int = None, coalesce: bool = True) -> FixtureSession:
    """TLS 1.3 handshake with random traffic secrets; optionally the client sends
    a KeyUpdate before c2s message number ``key_update_at``."""
    rng = random.Random(seed)
    hash_len = 48 if ORACLE_SUITES[suite][5] == "sha384" else 32
    client_random = rng.randbytes(32)
    server_random = rng.randbytes(32)
    secrets = {name: rng.randbytes(hash_len) for name in
               ("CLIENT_HANDSHAKE_TRAFFIC_SECRET", "SERVER_HANDSHAKE_TRAFFIC_SECRET",
                "CLIENT_TRAFFIC_SECRET_0", "SERVER_TRAFFIC_SECRET_0")}
    cw = SealingOracle(suite, 0x0304, *oracle_tls13_keys(secrets["CLIENT_HANDSHAKE_TRAFFIC_SECRET"], suite))
    sw = SealingOracle(suite, 0x0304, *oracle_tls13_keys(secrets["SERVER_HANDSHAKE_TRAFFIC_SECRET"], suite))

    flights = []
    ch = client_hello(client_random, [suite, 0x1301], sni=sni, versions=[0x0304, 0x0303],
                      session_id=rng.randbytes(32))
    flights.append(("c2s", record(22, ch, 0x0301)))
    server_msgs = [hs(8, b"\x00\x00"), hs(11, rng.randbytes(400)), hs(15, rng.randbytes(72)),
                   hs(20, rng.randbytes(hash_len))]
    s_flight = record(22, server_hello(server_random, suite, version13=True)) + record(20, b"\x01")
    if coalesce:
        s_flight += sw.seal(22, b"".join(server_msgs), pad=rng.randrange(0, 8))
    else:
        # one message spread over two records to exercise handshake defragmentation
        blob = b"".join(server_msgs)
        cut = rng.randrange(5, len(blob) - 5)
        s_flight += sw.seal(22, blob[:cut]) + sw.seal(22, blob[cut:])
    flights.append(("s2c", s_flight))
    sw.rekey(*oracle_tls13_keys(secrets["SERVER_TRAFFIC_SECRET_0"], suite))
    flights.append(("c2s", record(20, b"\x01") + cw.seal(22, hs(20, rng.randbytes(hash_len)))))
    cw.rekey(*oracle_tls13_keys(secrets["CLIENT_TRAFFIC_SECRET_0"], suite))
    flights.append(("s2c", sw.seal(22, hs(4, rng.randbytes(60)))))

    c_secret = secrets["CLIENT_TRAFFIC_SECRET_0"]
    c_plain, s_plain = [], []
    for i in range(max(len(c2s_msgs), len(s2c_msgs))):
        if i < len(c2s_msgs):
            if key_update_at is not None and i == key_update_at:
                flights.append(("c2s", cw.seal(22, hs(24, b"\x00"))))
                c_secret = oracle_next_secret(c_secret, suite)
                cw.rekey(*oracle_tls13_keys(c_secret, suite))
            flights.append(("c2s", cw.seal_all(23, c2s_msgs[i], pad=rng.randrange(0, 4))))
            c_plain.append(c2s_msgs[i])
        if i < len(s2c_msgs):
            flights.append(("s2c", sw.seal_all(23, s2c_msgs[i])))
            s_plain.append(s2c_msgs[i])
    lines = [f"{name} {client_random.hex()} {secret.hex()}" for name, secret in secrets.items()]
    return FixtureSession(suite, 0x0304, client_random, server_random, lines, flights,
                          b"".join(c_plain), b"".join(s_plain), sni, {"c2s": cw, "s2c": sw})


# --- TCP / IP / pcap ------------------------------------------------------------------

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10


def _ip_bytes(addr: str) -> bytes:
    import ipaddress
    return ipaddress.ip_address(addr).packed


def tcp_frame(src: str, dst: str, sport: int, dport: int, seq: int, ack: int, flags: int,
              payload: bytes = b"", vlan: int = None) -> bytes:
    """Ethernet + IPv4/IPv6 + TCP frame (checksums left at zero)."""
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      5 << 4, flags, 65535, 0, 0) + payload
    if ":" in src:
        ip = struct.pack(">IHBB", 6 << 28, len(tcp), 6, 64) + _ip_bytes(src) + _ip_bytes(dst)
        ethertype = 0x86DD
    else:
        ip = struct.pack(">BBHHHBBH", 0x45, 0, 20 + len(tcp), 0, 0x4000, 64, 6, 0)
        ip += _ip_bytes(src) + _ip_bytes(dst)
        ethertype = 0x0800
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01"
    if vlan is not None:
        eth += struct.pack(">HH", 0x8100, vlan)
    return eth + struct.pack(">H", ethertype) + ip + tcp


@dataclass
class Segment:
    direction: str
    seq: int
    flags: int
    payload: bytes


def session_segments(session: FixtureSession, mss: int = 1400, seed: int = 0,
                     client_isn: int = None, server_isn: int = None) -> list[Segment]:
    """SYN handshake, the session's flights cut into segments, then FINs."""
    rng = random.Random(seed)
    isn = {"c2s": rng.getrandbits(32) if client_isn is None else client_isn,
           "s2c": rng.getrandbits(32) if server_isn is None else server_isn}
    nxt = {d: (isn[d] + 1) & 0xFFFFFFFF for d in isn}
    segs = [Segment("c2s", isn["c2s"], SYN, b""), Segment("s2c", isn["s2c"], SYN | ACK, b""),
            Segment("c2s", nxt["c2s"], ACK, b"")]
    for direction, data in session.flights:
        pos = 0
        while pos < len(data):
            size = min(mss, len(data) - pos)
            if mss > 64:
                size = min(size, rng.randrange(mss // 2, mss + 1))
            chunk = data[pos:pos + size]
            segs.append(Segment(direction, nxt[direction], ACK | PSH, chunk))
            nxt[direction] = (nxt[direction] + len(chunk)) & 0xFFFFFFFF
            pos += size
    segs.append(Segment("c2s", nxt["c2s"], FIN | ACK, b""))
    segs.append(Segment("s2c", nxt["s2c"], FIN | ACK, b""))
    return segs


def frames_for(segments, client=("10.0.0.1", 50000), server=("10.0.0.2", 443), t0=1_700_000_000.0,
               step=0.001, vlan=None):
    out = []
    for i, s in enumerate(segments):
        if s.direction == "c2s":
            frame = tcp_frame(client[0], server[0], client[1], server[1], s.seq, 0, s.flags, s.payload, vlan)
        else:
            frame = tcp_frame(server[0], client[0], server[1], client[1], s.seq, 0, s.flags, s.payload, vlan)
        out.append((t0 + i * step, frame))
    return out


def pcap_bytes(frames, link_type: int = 1, nano: bool = False, big_endian: bool = False) -> bytes:
    e = ">" if big_endian else "<"
    magic = 0xA1B23C4D if nano else 0xA1B2C3D4
    out = [struct.pack(e + "IHHiIII", magic, 2, 4, 0, 0, 262144, link_type)]
    for ts, frame in frames:
        sec = int(ts)
        frac = round((ts - sec) * (1e9 if nano else 1e6))
        out.append(struct.pack(e + "IIII", sec, frac, len(frame), len(frame)) + frame)
    return b"".join(out)


def write_pcap(path, frames, **kw) -> str:
    with open(path, "wb") as fh:
        fh.write(pcap_bytes(frames, **kw))
    return os.fspath(path)


def session_pcap(path, sessions, seed: int = 0, mss: int = 1400) -> str:
    """Write several sessions, each on its own client port, one after another."""
    frames = []
    t0 = 1_700_000_000.0
    for i, s in enumerate(sessions):
        segs = session_segments(s, mss=mss, seed=seed + i)
        frames += frames_for(segs, client=("10.0.0.1", 50000 + i), t0=t0 + i)
    return write_pcap(path, frames)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
