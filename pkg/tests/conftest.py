import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import tlsfixture  # noqa: E402


@pytest.fixture
def gcm12_session():
    return tlsfixture.build_tls12(0xC02F, [b"GET /index.html HTTP/1.1\r\nHost: example.com\r\n\r\n"],
                                  [b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhello"], seed=7)


@pytest.fixture
def gcm12_files(tmp_path, gcm12_session):
    pcap = tlsfixture.session_pcap(tmp_path / "one.pcap", [gcm12_session])
    keylog = tmp_path / "keys.log"
    keylog.write_text(gcm12_session.keylog_text)
    return gcm12_session, pcap, str(keylog)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
