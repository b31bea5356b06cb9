"""Decrypt and authenticate single TLS records.

Primitives come from ``cryptography``; this module owns the TLS framing:
explicit nonces, additional data, CBC padding and MAC-then-encrypt order,
and the TLS 1.3 inner content type.
"""

from __future__ import annotations

import hmac
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305

from .errors import TlsDecryptError
from .keyschedule import TLS13, DirectionKeys, SuiteParams, record_nonce
from .tlswire import CT_HANDSHAKE, HS_FINISHED, EncryptedRecord

MAX_PLAINTEXT = 2 ** 14


class RecordCryptError(TlsDecryptError):
    pass


class AuthFailure(RecordCryptError):
    pass


class BadPadding(RecordCryptError):
    pass


class TooShort(RecordCryptError):
    pass


@dataclass(frozen=True)
class PlaintextRecord:
    content_type: int
    payload: bytes


def _aead(suite: SuiteParams, key: bytes):
    return ChaCha20Poly1305(key) if suite.aead_kind == "chacha" else AESGCM(key)


def _decrypt_aead12(keys, rec, suite):
    explicit = None
    body = rec.ciphertext
    if suite.aead_kind == "gcm":
        if len(body) < 8 + suite.tag_len:
            raise TooShort(f"record of {len(body)} bytes cannot hold nonce and tag")
        explicit, body = body[:8], body[8:]
    elif len(body) < suite.tag_len:
        raise TooShort(f"record of {len(body)} bytes cannot hold a tag")
    nonce = record_nonce(keys, explicit, rec.legacy_version)
    aad = struct.pack(">QBHH", keys.seq, rec.content_type, rec.legacy_version,
                      len(body) - suite.tag_len)
    try:
        payload = _aead(suite, keys.enc_key).decrypt(nonce, body, aad)
    except InvalidTag:
        raise AuthFailure(f"bad tag on {rec.direction.value} record seq {keys.seq}") from None
    return PlaintextRecord(rec.content_type, payload)


def _decrypt_cbc12(keys, rec, suite):
    body = rec.ciphertext
    block = 16
    if len(body) < block + max(block, suite.mac_len + 1) or len(body) % block:
        raise TooShort(f"CBC record of {len(body)} bytes is not a valid length")
    iv, ct = body[:block], body[block:]
    dec = Cipher(algorithms.AES(keys.enc_key), modes.CBC(iv)).decryptor()
    padded = dec.update(ct) + dec.finalize()
    pad_len = padded[-1]
    if pad_len + 1 + suite.mac_len > len(padded):
        raise BadPadding(f"padding length {pad_len} overruns the record")
    if padded[-pad_len - 1:] != bytes([pad_len]) * (pad_len + 1):
        raise BadPadding("padding bytes disagree with padding length")
    content = padded[:-pad_len - 1]
    payload, mac = content[:-suite.mac_len], content[-suite.mac_len:]
    header = struct.pack(">QBHH", keys.seq, rec.content_type, rec.legacy_version, len(payload))
    expected = hmac.new(keys.mac_key, header + payload, suite.mac_hash).digest()
    if not hmac.compare_digest(mac, expected):
        raise AuthFailure(f"bad MAC on {rec.direction.value} record seq {keys.seq}")
    return PlaintextRecord(rec.content_type, payload)


def _decrypt_tls13(keys, rec, suite):
    body = rec.ciphertext
    if len(body) < suite.tag_len + 1:
        raise TooShort(f"record of {len(body)} bytes cannot hold a tag and content type")
    nonce = record_nonce(keys, None, TLS13)
    aad = struct.pack(">BHH", rec.content_type, rec.legacy_version, len(body))
    try:
        inner = _aead(suite, keys.enc_key).decrypt(nonce, body, aad)
    except InvalidTag:
        raise AuthFailure(f"bad tag on {rec.direction.value} record seq {keys.seq}") from None
    stripped = inner.rstrip(b"\x00")
    if not stripped:
        raise AuthFailure("TLS 1.3 inner plaintext is all padding")
    return PlaintextRecord(stripped[-1], stripped[:-1])


def decrypt_record(keys: DirectionKeys, rec: EncryptedRecord, suite: SuiteParams,
                   version: int) -> PlaintextRecord:
    """Open one record with ``keys`` at sequence number ``keys.seq``.

    The sequence number advances whether or not the record authenticates so
    that later records in the direction stay aligned.
    """
    try:
        if version == TLS13:
            out = _decrypt_tls13(keys, rec, suite)
        elif suite.aead_kind == "cbc_hmac":
            out = _decrypt_cbc12(keys, rec, suite)
        else:
            out = _decrypt_aead12(keys, rec, suite)
    finally:
        keys.seq += 1
    if len(out.payload) > MAX_PLAINTEXT:
        raise RecordCryptError(f"plaintext of {len(out.payload)} bytes exceeds 2^14")
    return out


def verify_finished_alignment(version: int, first: PlaintextRecord) -> str:
    """Check that a TLS 1.2 direction's first decrypted record is a Finished.

    Returns "ok", "warning" (probable key mismatch) or "skipped" for 1.3.
    """
    if version == TLS13:
        return "skipped"
    p = first.payload
    if (first.content_type == CT_HANDSHAKE and len(p) == 16 and p[0] == HS_FINISHED
            and p[1:4] == b"\x00\x00\x0c"):
        return "ok"
    return "warning"
