"""Command-line entry point.

Exit codes: 0 at least one session decrypted, 3 nothing decrypted,
2 usage or I/O error. The summary goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from typing import Optional

from .capture import CaptureError, FileRemoved, PcapTail, open_pcap
from .detect import Alert, load_rules
from .export import (LIVE_NDJSON_NAME, NDJSON_NAME, NdjsonAppender, SessionRecord,
                     StreamWriter, alert_to_json, write_ndjson)
from .keylog import (FileRemoved as KeyLogRemoved, KeyLogTail, NoSessionsFound,
                     convert_jvm_debug, load_keylog)
from .pipeline import DecryptedEvent, Demux, Pipeline, PipelineConfig, SessionUpdate
from .tlswire import STATUS_ORDER

logger = logging.getLogger("tlsdecrypt")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOTHING = 3

ENV_OUT = "TLSDECRYPT_OUT"
ENV_POLL_MS = "TLSDECRYPT_POLL_MS"


class UsageError(Exception):
    pass


class _Output:
    """Routes pipeline events to stream files, the alert list and the live log."""

    def __init__(self, outdir: str, live: bool = False):
        self.outdir = outdir
        self.writer = StreamWriter(outdir)
        self.demux = Demux(sink=self.writer.write, keep=False)
        self.alerts: list[Alert] = []
        self.records: list[SessionRecord] = []
        self.live = NdjsonAppender(os.path.join(outdir, LIVE_NDJSON_NAME)) if live else None

    def handle(self, events) -> None:
        for ev in events:
            if isinstance(ev, DecryptedEvent):
                self.demux.append(ev)
            elif isinstance(ev, Alert):
                self.alerts.append(ev)
                if self.live:
                    self.live.write_line(alert_to_json(ev))
            elif isinstance(ev, SessionRecord):
                self.records.append(ev)
            elif isinstance(ev, SessionUpdate) and self.live:
                self.live.write_line(ev.record.to_json("session_update"))

    def finalize(self) -> str:
        path = write_ndjson(self.records, self.alerts, os.path.join(self.outdir, NDJSON_NAME))
        if self.live:
            self.live.close()
        return path


def _parse_ports(text: Optional[str]) -> Optional[frozenset]:
    if not text:
        return None
    try:
        ports = frozenset(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise UsageError(f"--ports must be a comma-separated list of integers, got {text!r}")
    if not ports or any(not 0 < p < 65536 for p in ports):
        raise UsageError("--ports values must be between 1 and 65535")
    return ports


def _outdir(args) -> str:
    out = args.out or os.environ.get(ENV_OUT)
    if not out:
        raise UsageError(f"--out is required (or set {ENV_OUT})")
    return out


def _require_files(*paths) -> None:
    for p in paths:
        if not os.path.isfile(p):
            raise UsageError(f"no such file: {p}")


def _config(args) -> PipelineConfig:
    config = PipelineConfig(ports=_parse_ports(getattr(args, "ports", None)))
    if getattr(args, "max_pending", None) is not None:
        if args.max_pending <= 0:
            raise UsageError("--max-pending must be positive")
        config.max_pending_session = args.max_pending
    if getattr(args, "rules", None):
        if args.rules != "@starter":
            _require_files(args.rules)
        config.rules = load_rules(args.rules)
        for lineno, msg in config.rules.errors:
            print(f"rules: line {lineno}: {msg}", file=sys.stderr)
    return config


def print_summary(pipe: Pipeline, alerts: int, out=None) -> None:
    out = out or sys.stdout
    counts = pipe.summary()
    print(f"sessions: {sum(v for k, v in counts.items() if k != 'not_tls')}", file=out)
    for status in STATUS_ORDER:
        if counts.get(status):
            print(f"{status}: {counts[status]}", file=out)
    print(f"alerts: {alerts}", file=out)


def _exit_code(pipe: Pipeline) -> int:
    return EXIT_OK if pipe.summary().get("decrypted") else EXIT_NOTHING


def cmd_decrypt(args) -> int:
    _require_files(args.pcap, args.keylog)
    outdir = _outdir(args)
    config = _config(args)
    store, kstats = load_keylog(args.keylog)
    print(f"keylog: accepted={kstats.accepted} skipped={kstats.skipped} "
          f"errors={kstats.errors} conflicts={kstats.conflicts}", file=sys.stderr)
    for lineno, reason in kstats.error_lines:
        print(f"keylog: line {lineno}: {reason}", file=sys.stderr)
    reader = open_pcap(args.pcap)
    pipe = Pipeline(store, config)
    output = _Output(outdir)
    for packet in reader:
        output.handle(pipe.feed(packet))
    output.handle(pipe.finish())
    output.finalize()
    print_summary(pipe, len(output.alerts))
    return _exit_code(pipe)


class Follower:
    """One follow-mode run: tails a capture and a key log into an output directory.

    Each :meth:`poll_once` reads key log lines before packets so a key that
    lands together with its records is applied first.
    """

    def __init__(self, pcap: str, keylog: str, outdir: str, config: PipelineConfig):
        self.pcap_tail = PcapTail(pcap)
        self.key_tail = KeyLogTail(keylog)
        self.pipe = Pipeline(self.key_tail.store, config)
        self.output = _Output(outdir, live=True)

    def poll_once(self, final: bool = False) -> bool:
        got = False
        for entry in self.key_tail.poll(final=final):
            self.output.handle(self.pipe.on_key(entry))
            got = True
        for packet in self.pcap_tail.poll():
            self.output.handle(self.pipe.feed(packet))
            got = True
        self.output.handle(self.pipe.updates())
        return got

    def finalize(self) -> None:
        self.output.handle(self.pipe.finish())
        self.output.finalize()


def cmd_follow(args, stop: Optional[threading.Event] = None) -> int:
    poll_ms = args.poll_ms
    if poll_ms is None:
        env = os.environ.get(ENV_POLL_MS)
        try:
            poll_ms = int(env) if env else 200
        except ValueError:
            raise UsageError(f"{ENV_POLL_MS} must be an integer")
    if poll_ms <= 0:
        raise UsageError("--poll-ms must be positive")
    _require_files(args.pcap, args.keylog)
    outdir = _outdir(args)
    config = _config(args)
    stop = stop or threading.Event()

    follower = Follower(args.pcap, args.keylog, outdir, config)
    idle_exit = getattr(args, "idle_exit", None)
    last_activity = time.monotonic()
    code: Optional[int] = None

    previous = None
    if threading.current_thread() is threading.main_thread():
        previous = signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.is_set():
            if follower.poll_once():
                last_activity = time.monotonic()
            elif idle_exit and time.monotonic() - last_activity >= idle_exit:
                break
            stop.wait(poll_ms / 1000.0)
        follower.poll_once(final=True)
    except KeyboardInterrupt:
        pass
    except (FileRemoved, KeyLogRemoved) as exc:
        print(f"error: input file removed: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    follower.finalize()
    print_summary(follower.pipe, len(follower.output.alerts))
    return code if code is not None else _exit_code(follower.pipe)


def cmd_inspect(args) -> int:
    _require_files(args.pcap)
    config = PipelineConfig(ports=_parse_ports(args.ports))
    pipe = Pipeline(None, config)
    for packet in open_pcap(args.pcap):
        pipe.feed(packet)
    records = [e for e in pipe.finish() if isinstance(e, SessionRecord)]
    records.sort(key=lambda r: (r.first_ts, r.id))
    if records:
        print("\t".join(["id", "client", "server", "version", "cipher", "sni", "decryptable"]))
    for r in records:
        verdict = r.status if r.status in ("unsupported_suite", "broken") else "supported"
        print("\t".join([r.id, r.src, r.dst, r.version or "-", r.cipher or "-", r.sni or "-",
                         verdict]))
    return EXIT_OK


def cmd_keys_convert_jvm(args) -> int:
    _require_files(args.input)
    with open(args.input, encoding="utf-8", errors="replace") as fh:
        text = fh.read()
    try:
        result = convert_jvm_debug(text)
    except NoSessionsFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("accepted: 0\ndropped: 0")
        return EXIT_NOTHING
    for reason in result.dropped:
        print(f"dropped: {reason}", file=sys.stderr)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.text)
    print(f"accepted: {len(result.lines)}\ndropped: {len(result.dropped)}")
    return EXIT_OK if result.lines else EXIT_NOTHING


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlsdecrypt",
        description="Decrypt TLS 1.2/1.3 sessions in pcap files using an NSS key log.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decrypt", help="decrypt a finished capture")
    p.add_argument("--pcap", required=True)
    p.add_argument("--keylog", required=True)
    p.add_argument("--out", help=f"output directory (default: ${ENV_OUT})")
    p.add_argument("--rules", help="rule TSV file, or @starter for the bundled examples")
    p.add_argument("--ports", help="only these TCP ports, comma separated")
    p.add_argument("--max-pending", type=int, metavar="BYTES",
                   help="per-session budget for records waiting on keys (default 1 MiB)")
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("follow", help="decrypt a growing capture and key log")
    p.add_argument("--pcap", required=True)
    p.add_argument("--keylog", required=True)
    p.add_argument("--out", help=f"output directory (default: ${ENV_OUT})")
    p.add_argument("--poll-ms", type=int, help=f"poll interval (default: ${ENV_POLL_MS} or 200)")
    p.add_argument("--rules")
    p.add_argument("--ports")
    p.add_argument("--max-pending", type=int, metavar="BYTES")
    p.add_argument("--idle-exit", type=float, metavar="SECONDS",
                   help="finish after this long without new packets or keys")
    p.set_defaults(func=cmd_follow)

    p = sub.add_parser("inspect", help="list TLS sessions without keys")
    p.add_argument("--pcap", required=True)
    p.add_argument("--ports")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("keys-convert-jvm", help="convert javax.net.debug output to NSS format")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keys_convert_jvm)
    return parser


def main(argv=None, stop: Optional[threading.Event] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.func is cmd_follow:
            return cmd_follow(args, stop)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CaptureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
