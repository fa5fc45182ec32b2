import json

import pytest

from conftest import write_jsonl
from speechalign.metadata import (
    ATTRIBUTE_KEYS,
    Manifest,
    ManifestError,
    TranscriptSegment,
    UtteranceRecord,
    dump_manifest,
    load_manifest,
    merge_extractor_outputs,
    validate_record,
)
from speechalign.synthetic import sample_manifest


def rec(rid="u1", segs=((0, 3, "hi"),), dur=5.0, **attrs):
    return UtteranceRecord(rid, "src", dur, tuple(TranscriptSegment(*s) for s in segs), attrs)


def test_twelve_keys():
    assert len(ATTRIBUTE_KEYS) == 12
    assert "spoken_text" in ATTRIBUTE_KEYS and "c50_value" in ATTRIBUTE_KEYS


def test_load_three_records(tmp_path):
    p = tmp_path / "m.jsonl"
    dump_manifest(sample_manifest(), p)
    m = load_manifest(p)
    assert len(m) == 3 and m.skip_count == 0
    assert m.records == sample_manifest().records


def test_unknown_key_skips_record(tmp_path):
    good = rec().to_dict()
    bad = {**rec("u2").to_dict(), "attributes": {"timbre": "warm"}}
    m = load_manifest(write_jsonl(tmp_path / "m.jsonl", [good, bad]))
    assert len(m) == 1 and m.skip_count == 1
    assert m.skipped[0][0] == 2 and "timbre" in m.skipped[0][1]


def test_malformed_line_skipped_with_lineno(tmp_path):
    m = load_manifest(write_jsonl(tmp_path / "m.jsonl", [rec().to_dict(), "{not json", ""]))
    assert len(m) == 1
    assert [n for n, _ in m.skipped] == [2]


def test_duplicate_id_fatal(tmp_path):
    p = write_jsonl(tmp_path / "m.jsonl", [rec().to_dict(), rec().to_dict()])
    with pytest.raises(ManifestError, match="u1"):
        load_manifest(p)


def test_unreadable_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.jsonl")


def test_validate_examples():
    assert validate_record(rec(segs=((0, 3, "a"), (3, 5, "b")))) == []
    v = validate_record(rec(segs=((0, 3, "a"), (2, 5, "b"))))
    assert len(v) == 1 and "overlap" in v[0]
    assert validate_record(rec(segs=((0, 2.8, "a"),), dur=2.8, duration="2.8")) == []


def test_validate_catches_bounds_and_duration():
    assert validate_record(rec(segs=((4, 2, "a"),)))
    assert validate_record(rec(dur=5.0, duration="3.0"))
    assert validate_record(rec(segs=((0, 1, "  "),)))


def test_merge_fills_and_precedence():
    base = Manifest((rec(gender="Female", emotion="Sad"),))
    overlay = Manifest((rec(emotion="Happy", pitch="Low"),))
    a = merge_extractor_outputs(base, overlay, "annotation-wins").records[0].attributes
    assert a == {"gender": "Female", "emotion": "Sad", "pitch": "Low"}
    e = merge_extractor_outputs(base, overlay, "extractor-wins").records[0].attributes
    assert e["emotion"] == "Happy"


def test_merge_missing_ids():
    with pytest.raises(ManifestError, match="missing ids: u9"):
        merge_extractor_outputs(Manifest((rec(),)), Manifest((rec("u9"),)))


def test_record_dict_round_trip():
    for r in sample_manifest().records:
        assert UtteranceRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r
