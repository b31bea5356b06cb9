"""Passive TLS 1.2/1.3 decryption of pcap files with NSS key logs."""

from .capture import decode_frame, follow_pcap, open_pcap
from .keylog import KeyStore, convert_jvm_debug, follow_keylog, load_keylog, parse_keylog_line
from .pipeline import DecryptedEvent, Pipeline, PipelineConfig, process

__version__ = "0.1.0"

__all__ = [
    "DecryptedEvent",
    "KeyStore",
    "Pipeline",
    "PipelineConfig",
    "convert_jvm_debug",
    "decode_frame",
    "follow_keylog",
    "follow_pcap",
    "load_keylog",
    "open_pcap",
    "parse_keylog_line",
    "process",
]
