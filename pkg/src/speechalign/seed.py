"""Render utterance metadata as a timestamped "seed transcript" and parse it back.

Each segment becomes one line::

    [00:00:00-00:00:03] How are you? (Gender: Female, Emotion: Happy)
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .metadata import ATTRIBUTE_KEYS, TranscriptSegment, UtteranceRecord

DEFAULT_ATTRIBUTE_ORDER: tuple[str, ...] = ATTRIBUTE_KEYS

DISPLAY_NAMES: dict[str, str] = {
    "gender": "Gender",
    "age": "Age",
    "accent": "Accent",
    "emotion": "Emotion",
    "pitch": "Pitch",
    "volume": "Volume",
    "speaking_speed": "Speaking speed",
    "snr_level": "SNR",
    "c50_value": "C50",
    "duration": "Duration",
    "intent": "Intent",
}

# "," and ")" would break the parenthetical grammar.
_ESCAPES = {",": "，", ")": "〉"}

_LINE_RE = re.compile(r"\[(\d{2,}):(\d{2}):(\d{2})-(\d{2,}):(\d{2}):(\d{2})\] ")


class SeedParseError(ValueError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class SeedTranscript:
    text: str
    source_id: str


def format_timestamp(t: float) -> str:
    if t < 0 or math.isnan(t):
        raise ValueError(f"timestamp must be non-negative, got {t}")
    total = int(math.floor(t))
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def escape_value(value: str) -> str:
    for raw, sub in _ESCAPES.items():
        value = value.replace(raw, sub)
    return value


def _segment_attributes(
    attributes: Mapping[str, str], order: Sequence[str], names: Mapping[str, str], last: bool
) -> list[tuple[str, str]]:
    out = []
    for key in order:
        if key == "spoken_text" or key not in attributes:
            continue
        if key == "duration" and not last:
            continue
        out.append((names.get(key, key), escape_value(attributes[key])))
    return out


def build_seed_transcript(
    record: UtteranceRecord,
    attribute_order: Sequence[str] = DEFAULT_ATTRIBUTE_ORDER,
    display_names: Mapping[str, str] | None = None,
) -> SeedTranscript:
    """Serialize ``record`` to one line per segment.

    Utterance-level attributes go on every line except ``duration``, which
    only the final line carries. A record with no segments but a
    ``spoken_text`` attribute is rendered as a single segment spanning the
    whole clip.
    """
    names = {**DISPLAY_NAMES, **(display_names or {})}
    segments = list(record.segments)
    if not segments and "spoken_text" in record.attributes:
        segments = [
            TranscriptSegment(0.0, record.audio_duration_s, record.attributes["spoken_text"])
        ]
    lines = []
    for i, seg in enumerate(segments):
        text = " ".join(seg.text.split())
        line = f"[{format_timestamp(seg.start_s)}-{format_timestamp(seg.end_s)}] {text}"
        attrs = _segment_attributes(
            record.attributes, attribute_order, names, last=i == len(segments) - 1
        )
        if attrs:
            line += " (" + ", ".join(f"{k}: {v}" for k, v in attrs) + ")"
        lines.append(line)
    return SeedTranscript("\n".join(lines), record.id)


def _parse_pairs(inner: str) -> dict[str, str] | None:
    pairs: dict[str, str] = {}
    for chunk in inner.split(", "):
        key, sep, value = chunk.partition(": ")
        if not sep or not key or key in pairs or "(" in key:
            return None
        pairs[key] = value
    return pairs


def _split_attributes(body: str) -> tuple[str, dict[str, str]]:
    if not body.endswith(")"):
        return body, {}
    # ")" never occurs in an escaped value, so the block starts after the last
    # ")" that precedes the closing one; values may still contain " ("
    open_at = body.find(" (", body.rfind(")", 0, len(body) - 1) + 1)
    while open_at > 0:
        pairs = _parse_pairs(body[open_at + 2 : -1])
        if pairs is not None:
            return body[:open_at], pairs
        open_at = body.find(" (", open_at + 1)
    # an ordinary parenthetical remark belongs to the spoken text
    return body, {}


def parse_seed_transcript(text: str) -> list[tuple[float, float, str, dict[str, str]]]:
    """Inverse of :func:`build_seed_transcript` (timestamps come back floored)."""
    out = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        m = _LINE_RE.match(line)
        if m is None:
            raise SeedParseError(lineno, 1, "expected '[HH:MM:SS-HH:MM:SS] '")
        h1, m1, s1, h2, m2, s2 = (int(g) for g in m.groups())
        if m1 > 59 or s1 > 59:
            raise SeedParseError(lineno, 2, "minute/second field out of range")
        if m2 > 59 or s2 > 59:
            raise SeedParseError(lineno, m.start(4) + 1, "minute/second field out of range")
        start = float(h1 * 3600 + m1 * 60 + s1)
        end = float(h2 * 3600 + m2 * 60 + s2)
        body, attrs = _split_attributes(line[m.end() :])
        if not body.strip():
            raise SeedParseError(lineno, m.end() + 1, "empty segment text")
        out.append((start, end, body, attrs))
    return out
