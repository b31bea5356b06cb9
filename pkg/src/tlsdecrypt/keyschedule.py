"""Record-protection key derivation for TLS 1.2 and TLS 1.3.

TLS 1.2 expands the logged master secret with the P_hash PRF; TLS 1.3
expands each logged traffic secret with HKDF-Expand-Label. Both are built
directly on :mod:`hmac` so the byte layout is visible here.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import TlsDecryptError

TLS12 = 0x0303
TLS13 = 0x0304


class KeyScheduleError(TlsDecryptError):
    pass


class UnsupportedSuite(KeyScheduleError):
    pass


class LabelTooLong(KeyScheduleError):
    pass


class NonceShapeMismatch(KeyScheduleError):
    pass


class SecretLengthError(KeyScheduleError):
    pass


@dataclass(frozen=True)
class SuiteParams:
    id: int
    name: str
    aead_kind: str  # "gcm" | "chacha" | "cbc_hmac"
    key_len: int
    iv_len: int  # fixed IV bytes taken from the key block / HKDF
    mac_len: int  # 0 for AEAD suites
    tag_len: int
    prf_hash: str  # "sha256" | "sha384"
    mac_hash: Optional[str] = None
    tls13: bool = False

    @property
    def hash_len(self) -> int:
        return hashlib.new(self.prf_hash).digest_size


SUITES: dict[int, SuiteParams] = {
    s.id: s
    for s in [
        SuiteParams(0x002F, "TLS_RSA_WITH_AES_128_CBC_SHA", "cbc_hmac", 16, 0, 20, 0, "sha256", "sha1"),
        SuiteParams(0x003C, "TLS_RSA_WITH_AES_128_CBC_SHA256", "cbc_hmac", 16, 0, 32, 0, "sha256", "sha256"),
        SuiteParams(0xC02F, "TLS_ECDHE_RSA_WITH_AES_128_GCM_SHA256", "gcm", 16, 4, 0, 16, "sha256"),
        SuiteParams(0xC030, "TLS_ECDHE_RSA_WITH_AES_256_GCM_SHA384", "gcm", 32, 4, 0, 16, "sha384"),
        SuiteParams(0xCCA8, "TLS_ECDHE_RSA_WITH_CHACHA20_POLY1305_SHA256", "chacha", 32, 12, 0, 16, "sha256"),
        SuiteParams(0x1301, "TLS_AES_128_GCM_SHA256", "gcm", 16, 12, 0, 16, "sha256", tls13=True),
        SuiteParams(0x1302, "TLS_AES_256_GCM_SHA384", "gcm", 32, 12, 0, 16, "sha384", tls13=True),
        SuiteParams(0x1303, "TLS_CHACHA20_POLY1305_SHA256", "chacha", 32, 12, 0, 16, "sha256", tls13=True),
    ]
}


def get_suite(suite_id: int) -> SuiteParams:
    try:
        return SUITES[suite_id]
    except KeyError:
        raise UnsupportedSuite(f"cipher suite 0x{suite_id:04x} is not supported") from None


def suite_supported(suite_id: Optional[int], version: Optional[int]) -> bool:
    suite = SUITES.get(suite_id) if suite_id is not None else None
    if suite is None or version not in (TLS12, TLS13):
        return False
    return suite.tls13 == (version == TLS13)


@dataclass
class DirectionKeys:
    enc_key: bytes
    fixed_iv: bytes
    mac_key: Optional[bytes] = None
    seq: int = 0
    suite: Optional[SuiteParams] = None
    secret: Optional[bytes] = None  # TLS 1.3 traffic secret these keys came from


# --- TLS 1.2 -----------------------------------------------------------------


def p_hash(hash_name: str, secret: bytes, seed: bytes, out_len: int) -> bytes:
    out = bytearray()
    a = seed
    while len(out) < out_len:
        a = hmac.new(secret, a, hash_name).digest()
        out += hmac.new(secret, a + seed, hash_name).digest()
    return bytes(out[:out_len])


def prf_tls12(secret: bytes, label: bytes, seed: bytes, out_len: int,
              hash_name: str = "sha256") -> bytes:
    if isinstance(label, str):
        label = label.encode("ascii")
    return p_hash(hash_name, secret, label + seed, out_len)


def derive_keys_tls12(master_secret: bytes, client_random: bytes, server_random: bytes,
                      suite: SuiteParams) -> tuple[DirectionKeys, DirectionKeys]:
    if suite.tls13 or suite.id not in SUITES:
        raise UnsupportedSuite(f"0x{suite.id:04x} is not a TLS 1.2 suite")
    if len(master_secret) != 48:
        raise SecretLengthError(f"master secret must be 48 bytes, got {len(master_secret)}")
    needed = 2 * (suite.mac_len + suite.key_len + suite.iv_len)
    block = prf_tls12(master_secret, b"key expansion", server_random + client_random,
                      needed, suite.prf_hash)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        out = block[pos:pos + n]
        pos += n
        return out

    c_mac, s_mac = take(suite.mac_len), take(suite.mac_len)
    c_key, s_key = take(suite.key_len), take(suite.key_len)
    c_iv, s_iv = take(suite.iv_len), take(suite.iv_len)
    client = DirectionKeys(c_key, c_iv, c_mac or None, 0, suite)
    server = DirectionKeys(s_key, s_iv, s_mac or None, 0, suite)
    for keys in (client, server):
        _check_lengths(keys, suite)
    return client, server


# --- TLS 1.3 -----------------------------------------------------------------


def hkdf_expand(prk: bytes, info: bytes, out_len: int, hash_name: str = "sha256") -> bytes:
    out = bytearray()
    t = b""
    counter = 1
    while len(out) < out_len:
        t = hmac.new(prk, t + info + bytes([counter]), hash_name).digest()
        out += t
        counter += 1
    return bytes(out[:out_len])


def hkdf_expand_label(secret: bytes, label, context: bytes, out_len: int,
                      hash_name: str = "sha256") -> bytes:
    if isinstance(label, str):
        label = label.encode("ascii")
    full = b"tls13 " + label
    if len(full) > 255:
        raise LabelTooLong(f"label is {len(label)} bytes; at most 249 allowed")
    if len(context) > 255:
        raise LabelTooLong("context longer than 255 bytes")
    info = struct.pack(">H", out_len) + bytes([len(full)]) + full + bytes([len(context)]) + context
    return hkdf_expand(secret, info, out_len, hash_name)


def derive_keys_tls13(traffic_secret: bytes, suite: SuiteParams) -> DirectionKeys:
    if not suite.tls13:
        raise UnsupportedSuite(f"0x{suite.id:04x} is not a TLS 1.3 suite")
    if len(traffic_secret) != suite.hash_len:
        raise SecretLengthError(
            f"traffic secret is {len(traffic_secret)} bytes, suite 0x{suite.id:04x} needs {suite.hash_len}")
    keys = DirectionKeys(
        enc_key=hkdf_expand_label(traffic_secret, b"key", b"", suite.key_len, suite.prf_hash),
        fixed_iv=hkdf_expand_label(traffic_secret, b"iv", b"", 12, suite.prf_hash),
        seq=0,
        suite=suite,
        secret=traffic_secret,
    )
    _check_lengths(keys, suite)
    return keys


def next_secret_tls13(traffic_secret: bytes, suite: SuiteParams) -> bytes:
    return hkdf_expand_label(traffic_secret, b"traffic upd", b"", suite.hash_len, suite.prf_hash)


def _check_lengths(keys: DirectionKeys, suite: SuiteParams) -> None:
    mac_len = len(keys.mac_key) if keys.mac_key else 0
    if (len(keys.enc_key), len(keys.fixed_iv), mac_len) != (suite.key_len, suite.iv_len, suite.mac_len):
        raise KeyScheduleError(f"derived key material does not fit suite 0x{suite.id:04x}")


# --- nonces ------------------------------------------------------------------


def record_nonce(keys: DirectionKeys, explicit: Optional[bytes], version: int) -> bytes:
    """Per-record AEAD nonce.

    TLS 1.2 AES-GCM concatenates the 4-byte fixed IV with the record's 8-byte
    explicit part; TLS 1.3 and ChaCha20 XOR the 12-byte IV with the sequence
    number.
    """
    xor_scheme = version == TLS13 or len(keys.fixed_iv) == 12
    if xor_scheme:
        if explicit is not None or len(keys.fixed_iv) != 12:
            raise NonceShapeMismatch("XOR nonces take a 12-byte IV and no explicit part")
        padded = keys.seq.to_bytes(12, "big")
        return bytes(a ^ b for a, b in zip(keys.fixed_iv, padded))
    if explicit is None or len(explicit) != 8 or len(keys.fixed_iv) != 4:
        raise NonceShapeMismatch("TLS 1.2 GCM needs a 4-byte IV and 8-byte explicit nonce")
    return keys.fixed_iv + explicit
