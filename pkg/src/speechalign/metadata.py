"""Utterance metadata model, validation and manifest I/O.

A manifest is UTF-8 JSON Lines, one utterance per line::

    {"id": "u1", "source_dataset": "IEMOCAP", "audio_duration_s": 2.8,
     "segments": [{"start_s": 0.0, "end_s": 2.8, "text": "How are you?"}],
     "attributes": {"gender": "Female", "emotion": "Happy"}}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

DURATION_TOLERANCE_S = 0.1


class AttributeKey(str, Enum):
    GENDER = "gender"
    AGE = "age"
    ACCENT = "accent"
    EMOTION = "emotion"
    PITCH = "pitch"
    VOLUME = "volume"
    SPEAKING_SPEED = "speaking_speed"
    SNR_LEVEL = "snr_level"
    C50_VALUE = "c50_value"
    DURATION = "duration"
    INTENT = "intent"
    SPOKEN_TEXT = "spoken_text"


ATTRIBUTE_KEYS: tuple[str, ...] = tuple(k.value for k in AttributeKey)


class ManifestError(Exception):
    """Fatal problem with a manifest as a whole (unreadable, duplicate ids, ...)."""


@dataclass(frozen=True)
class TranscriptSegment:
    start_s: float
    end_s: float
    text: str


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    source_dataset: str
    audio_duration_s: float
    segments: tuple[TranscriptSegment, ...] = ()
    attributes: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_dataset": self.source_dataset,
            "audio_duration_s": self.audio_duration_s,
            "segments": [
                {"start_s": s.start_s, "end_s": s.end_s, "text": s.text} for s in self.segments
            ],
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "UtteranceRecord":
        """Build a record from its JSON form, rejecting unknown fields and attribute keys."""
        expected = {"id", "source_dataset", "audio_duration_s", "segments", "attributes"}
        extra = set(obj) - expected
        if extra:
            raise ValueError(f"unknown record fields: {sorted(extra)}")
        attrs = obj.get("attributes") or {}
        if not isinstance(attrs, dict):
            raise ValueError("attributes must be an object")
        unknown = [k for k in attrs if k not in ATTRIBUTE_KEYS]
        if unknown:
            raise ValueError(f"unknown attribute keys: {sorted(unknown)}")
        if not isinstance(obj["id"], str) or not obj["id"]:
            raise ValueError("id must be a non-empty string")
        segments = tuple(
            TranscriptSegment(float(s["start_s"]), float(s["end_s"]), str(s["text"]))
            for s in obj.get("segments") or []
        )
        return cls(
            id=obj["id"],
            source_dataset=str(obj["source_dataset"]),
            audio_duration_s=float(obj["audio_duration_s"]),
            segments=segments,
            attributes={str(k): str(v) for k, v in attrs.items()},
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...] = ()
    provenance: Mapping[str, str] = field(default_factory=dict)
    skipped: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        seen = set()
        dups = []
        for r in self.records:
            if r.id in seen:
                dups.append(r.id)
            seen.add(r.id)
        if dups:
            raise ManifestError(f"duplicate ids: {', '.join(sorted(set(dups)))}")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.id: r for r in self.records}

    @property
    def skip_count(self) -> int:
        return len(self.skipped)


def _parse_duration(value: str) -> float:
    return float(value.strip().rstrip("s").strip())


def validate_record(record: UtteranceRecord) -> list[str]:
    """Return a human-readable description of every invariant the record breaks."""
    problems: list[str] = []
    if not record.id:
        problems.append("empty id")
    if not record.audio_duration_s >= 0:
        problems.append(f"negative audio_duration_s {record.audio_duration_s}")
    for i, seg in enumerate(record.segments):
        if not 0 <= seg.start_s <= seg.end_s:
            problems.append(f"segment {i}: bad bounds ({seg.start_s}, {seg.end_s})")
        if not seg.text.strip():
            problems.append(f"segment {i}: empty text")
    for i in range(1, len(record.segments)):
        prev, cur = record.segments[i - 1], record.segments[i]
        if cur.start_s < prev.start_s:
            problems.append(f"segment {i}: out of order (starts {cur.start_s} before {prev.start_s})")
        elif cur.start_s < prev.end_s:
            problems.append(f"segment {i}: overlaps segment {i - 1} ({cur.start_s} < {prev.end_s})")
    for key in record.attributes:
        if key not in ATTRIBUTE_KEYS:
            problems.append(f"unknown attribute key {key!r}")
    if AttributeKey.DURATION.value in record.attributes:
        raw = record.attributes[AttributeKey.DURATION.value]
        try:
            dur = _parse_duration(raw)
        except ValueError:
            problems.append(f"duration attribute not numeric: {raw!r}")
        else:
            if abs(dur - record.audio_duration_s) > DURATION_TOLERANCE_S:
                problems.append(
                    f"duration attribute {dur} disagrees with audio_duration_s {record.audio_duration_s}"
                )
    return problems


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSONL manifest.

    Malformed lines and invalid records are skipped and remembered in
    ``Manifest.skipped`` as ``(line_number, reason)``. Duplicate ids and
    unreadable files raise :class:`ManifestError`.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    records: list[UtteranceRecord] = []
    skipped: list[tuple[int, str]] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = UtteranceRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            skipped.append((lineno, str(exc)))
            continue
        problems = validate_record(record)
        if problems:
            skipped.append((lineno, "; ".join(problems)))
            continue
        if record.id in seen:
            raise ManifestError(
                f"duplicate id {record.id!r} on lines {seen[record.id]} and {lineno}"
            )
        seen[record.id] = lineno
        records.append(record)
    for lineno, reason in skipped:
        logger.warning("%s:%d skipped: %s", path, lineno, reason)
    return Manifest(tuple(records), skipped=tuple(skipped))


def dump_manifest(manifest: Manifest | Iterable[UtteranceRecord], path: str | Path) -> None:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def merge_extractor_outputs(
    base: Manifest, overlay: Manifest, policy: str = "annotation-wins"
) -> Manifest:
    """Union model-derived attributes from ``overlay`` into ``base``.

    ``policy`` decides key conflicts: ``"annotation-wins"`` keeps the base
    value, ``"extractor-wins"`` takes the overlay value.
    """
    if policy not in ("annotation-wins", "extractor-wins"):
        raise ValueError(f"unknown precedence policy {policy!r}")
    base_ids = base.by_id()
    missing = [r.id for r in overlay.records if r.id not in base_ids]
    if missing:
        raise ManifestError(f"missing ids: {', '.join(missing)}")
    overlay_ids = overlay.by_id()
    merged = []
    for rec in base.records:
        extra = overlay_ids.get(rec.id)
        if extra is None:
            merged.append(rec)
            continue
        attrs = dict(rec.attributes)
        for key, value in extra.attributes.items():
            if key not in attrs or policy == "extractor-wins":
                attrs[key] = value
        merged.append(replace(rec, attributes=attrs))
    provenance = {**base.provenance, **overlay.provenance}
    return Manifest(tuple(merged), provenance=provenance)
