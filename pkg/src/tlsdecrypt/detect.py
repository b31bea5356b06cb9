"""Signature matching over decrypted plaintext streams.

Rules live in a TSV file::

    id <TAB> direction <TAB> kind <TAB> pattern <TAB> description

``direction`` is c2s, s2c or any; ``kind`` is substr, hex or regex. Matching
runs over the logical stream of one session direction, so a pattern split
across two records is still found, and every (rule, offset) pair alerts once.

Literal rules report every occurrence, overlapping ones included. Regex rules
report every start offset at which the expression matches. Supported regex
subset: literals, character classes, quantifiers, alternation, groups and the
``^``/``\\A`` start anchor (start of stream). End anchors and negative
lookarounds are rejected because their answer changes as the stream grows.
Regex matches longer than the scanner window (4096 bytes by default) may be
missed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .errors import TlsDecryptError

logger = logging.getLogger(__name__)

DIRECTIONS = ("c2s", "s2c", "any")
KINDS = ("substr", "regex", "hex")
EXCERPT_LEN = 64
EXCERPT_LEAD = 16
DEFAULT_REGEX_WINDOW = 4096
STARTER_RULES = "@starter"

_LEADING_FLAGS = re.compile(r"^\(\?[aiLmsux]+\)")
_UNSTABLE_REGEX = re.compile(r"(?<!\\)\$|\\Z|\(\?!|\(\?<!")


class RuleError(TlsDecryptError):
    pass


@dataclass(frozen=True)
class Rule:
    id: str
    direction: str
    kind: str
    pattern: str
    description: str = ""

    def compile(self):
        if self.kind == "substr":
            return self.pattern.encode("utf-8")
        if self.kind == "hex":
            text = self.pattern.replace(" ", "")
            if not text or len(text) % 2:
                raise RuleError("hex pattern must be a non-empty even-length hex string")
            try:
                return bytes.fromhex(text)
            except ValueError:
                raise RuleError("hex pattern contains non-hex characters") from None
        if _UNSTABLE_REGEX.search(self.pattern):
            raise RuleError("end anchors and negative lookarounds are not supported in stream scanning")
        try:
            inner = re.compile(self.pattern.encode("utf-8"))
        except re.error as exc:
            raise RuleError(f"regex does not compile: {exc}") from None
        if inner.match(b""):
            raise RuleError("regex matches the empty string")
        # global inline flags must stay at the very front once wrapped
        flags = _LEADING_FLAGS.match(self.pattern)
        head = flags.group(0) if flags else ""
        body = self.pattern[len(head):]
        return re.compile((head + "(?=(" + body + "))").encode("utf-8"))

    def applies_to(self, direction: str) -> bool:
        return self.direction == "any" or self.direction == direction


@dataclass
class RuleSet:
    rules: list = field(default_factory=list)
    compiled: dict = field(default_factory=dict)  # rule id -> bytes | Pattern
    errors: list = field(default_factory=list)  # (line number, message)

    def add(self, rule: Rule) -> None:
        if rule.direction not in DIRECTIONS:
            raise RuleError(f"direction must be one of {', '.join(DIRECTIONS)}")
        if rule.kind not in KINDS:
            raise RuleError(f"kind must be one of {', '.join(KINDS)}")
        if rule.id in self.compiled:
            raise RuleError(f"duplicate rule id {rule.id!r}")
        compiled = rule.compile()
        self.rules.append(rule)
        self.compiled[rule.id] = compiled

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def max_literal_len(self) -> int:
        lens = [len(c) for c in self.compiled.values() if isinstance(c, bytes)]
        return max(lens, default=0)


def parse_rules(text: str) -> RuleSet:
    ruleset = RuleSet()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 5):
            ruleset.errors.append((lineno, f"expected 5 tab-separated columns, got {len(cols)}"))
            continue
        rule = Rule(*[c.strip() if i != 3 else c for i, c in enumerate(cols)])
        try:
            ruleset.add(rule)
        except RuleError as exc:
            ruleset.errors.append((lineno, str(exc)))
    for lineno, msg in ruleset.errors:
        logger.warning("rules line %d: %s", lineno, msg)
    if not ruleset.rules:
        logger.warning("rule set is empty")
    return ruleset


def starter_rules_text() -> str:
    return resources.files("tlsdecrypt").joinpath("data/starter_rules.tsv").read_text("utf-8")


def load_rules(path) -> RuleSet:
    if str(path) == STARTER_RULES:
        return parse_rules(starter_rules_text())
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


@dataclass(frozen=True)
class Alert:
    rule_id: str
    session_id: str
    direction: str
    offset: int
    excerpt: bytes
    ts: float = 0.0


class StreamScanner:
    """Incremental matcher for one (session, direction) plaintext stream."""

    def __init__(self, rules: RuleSet, session_id: str, direction: str,
                 regex_window: int = DEFAULT_REGEX_WINDOW):
        self.session_id = session_id
        self.direction = direction
        self.active = [(r, rules.compiled[r.id]) for r in rules.rules if r.applies_to(direction)]
        has_regex = any(not isinstance(c, bytes) for _, c in self.active)
        self.keep = max(rules.max_literal_len - 1, regex_window + 1 if has_regex else 0,
                        EXCERPT_LEAD, 0)
        self.window = b""
        self.window_start = 0
        self.seen: set[tuple[str, int]] = set()

    @property
    def position(self) -> int:
        return self.window_start + len(self.window)

    def feed(self, data: bytes, offset: Optional[int] = None, ts: float = 0.0) -> list[Alert]:
        if offset is not None and offset != self.position:
            raise ValueError(f"scanner expected offset {self.position}, got {offset}")
        if not data or not self.active:
            self.window_start += len(data)
            return []
        buf = self.window + data
        base = self.window_start
        old = len(self.window)
        alerts = []
        for rule, compiled in self.active:
            if isinstance(compiled, bytes):
                hits = self._literal_hits(buf, compiled, old)
            else:
                start = 1 if base > 0 else 0
                hits = ((m.start(), m.end(1)) for m in compiled.finditer(buf, start))
            for start, end in hits:
                key = (rule.id, base + start)
                if key in self.seen:
                    continue
                self.seen.add(key)
                lo = max(0, start - EXCERPT_LEAD)
                alerts.append(Alert(rule.id, self.session_id, self.direction, base + start,
                                    bytes(buf[lo:lo + EXCERPT_LEN]), ts))
        cut = max(0, len(buf) - self.keep)
        self.window = buf[cut:]
        self.window_start = base + cut
        if cut:
            self.seen = {k for k in self.seen if k[1] >= self.window_start}
        alerts.sort(key=lambda a: (a.offset, a.rule_id))
        return alerts

    @staticmethod
    def _literal_hits(buf: bytes, needle: bytes, old: int):
        i = buf.find(needle, max(0, old - len(needle) + 1))
        while i != -1:
            yield i, i + len(needle)
            i = buf.find(needle, i + 1)


def scan(events: Iterable, rules: RuleSet) -> list[Alert]:
    """Scan decrypted events (anything with session_id, direction, stream_offset,
    payload, ts) and return the alerts in stream order per session direction."""
    scanners: dict[tuple[str, str], StreamScanner] = {}
    alerts = []
    for ev in events:
        direction = getattr(ev.direction, "value", ev.direction)
        key = (ev.session_id, direction)
        sc = scanners.get(key)
        if sc is None:
            sc = scanners[key] = StreamScanner(rules, ev.session_id, direction)
        alerts.extend(sc.feed(ev.payload, ev.stream_offset, ev.ts))
    return alerts
