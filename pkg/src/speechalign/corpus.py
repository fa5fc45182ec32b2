"""Per-source balancing, corpus statistics and train/validation split.

Random choices use numpy's PCG64 bit generator seeded with the policy seed
(``numpy.random.Generator(PCG64(seed))``). Balancing draws
``Generator.choice(n, cap, replace=False)`` per source, sources processed
in sorted name order, and the kept pairs retain their input order.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .generation import TrainingPair, dump_pairs
from .metadata import Manifest

DEFAULT_CAPTION_CAP = 20000


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class BalancePolicy:
    per_source_caption_cap: Mapping[str, int] = field(default_factory=dict)
    rng_seed: int = 0
    default_cap: int = DEFAULT_CAPTION_CAP

    def __post_init__(self):
        if self.default_cap < 0 or any(c < 0 for c in self.per_source_caption_cap.values()):
            raise ValueError("caps must be >= 0")

    def cap_for(self, source: str) -> int:
        return self.per_source_caption_cap.get(source, self.default_cap)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _source_of(pairs: Sequence[TrainingPair], manifest: Manifest) -> list[str]:
    records = manifest.by_id()
    missing = sorted({p.record_id for p in pairs if p.record_id not in records})
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise CorpusError(f"unresolvable record ids: {shown}")
    return [records[p.record_id].source_dataset for p in pairs]


def balance(
    pairs: Sequence[TrainingPair], manifest: Manifest, policy: BalancePolicy
) -> list[TrainingPair]:
    """Cap the number of captions per source by uniform sampling without replacement."""
    sources = _source_of(pairs, manifest)
    by_source: dict[str, list[int]] = {}
    for i, s in enumerate(sources):
        by_source.setdefault(s, []).append(i)
    rng = _rng(policy.rng_seed)
    keep: list[int] = []
    for source in sorted(by_source):
        idx = by_source[source]
        cap = policy.cap_for(source)
        if len(idx) <= cap:
            keep.extend(idx)
        else:
            chosen = rng.choice(len(idx), size=cap, replace=False)
            keep.extend(idx[j] for j in chosen)
    keep.sort()
    return [pairs[i] for i in keep]


@dataclass(frozen=True)
class SourceStats:
    source: str
    n_audios: int
    n_captions: int
    duration_hours: float


@dataclass(frozen=True)
class CorpusStats:
    rows: tuple[SourceStats, ...]

    @property
    def total(self) -> SourceStats:
        return SourceStats(
            "All",
            sum(r.n_audios for r in self.rows),
            sum(r.n_captions for r in self.rows),
            round(sum(r.duration_hours for r in self.rows), 2),
        )

    def to_dict(self) -> dict:
        rows = [r.__dict__ for r in (*self.rows, self.total)]
        return {"rows": [dict(r) for r in rows]}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def table(self) -> str:
        header = ("Dataset", "# Audios", "# Captions", "Duration(hours)")
        body = [
            (r.source, str(r.n_audios), str(r.n_captions), f"{r.duration_hours:.2f}")
            for r in self.rows
        ]
        t = self.total
        foot = ("All", str(t.n_audios), str(t.n_captions), f"{t.duration_hours:.2f}")
        widths = [max(len(row[i]) for row in (header, *body, foot)) for i in range(4)]

        def fmt(row):
            first = row[0].ljust(widths[0])
            rest = [row[i].rjust(widths[i]) for i in range(1, 4)]
            return "  ".join([first, *rest])

        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule, *map(fmt, body), rule, fmt(foot)]) + "\n"


def compute_stats(pairs: Sequence[TrainingPair], manifest: Manifest) -> CorpusStats:
    """Per-source audio/caption counts and hours (each audio counted once).

    Rows follow first appearance in ``manifest``; hours are rounded to two
    decimals per row, and the totals row is the sum of the rounded rows.
    """
    sources = _source_of(pairs, manifest)
    records = manifest.by_id()
    captions: dict[str, int] = {}
    audios: dict[str, set[str]] = {}
    for pair, source in zip(pairs, sources):
        captions[source] = captions.get(source, 0) + 1
        audios.setdefault(source, set()).add(pair.record_id)
    order = list(dict.fromkeys(r.source_dataset for r in manifest.records))
    rows = []
    for source in order:
        if source not in captions:
            continue
        seconds = math.fsum(records[rid].audio_duration_s for rid in audios[source])
        rows.append(SourceStats(source, len(audios[source]), captions[source],
                                round(seconds / 3600, 2)))
    return CorpusStats(tuple(rows))


def split(
    pairs: Sequence[TrainingPair], val_fraction: float, rng_seed: int
) -> tuple[list[TrainingPair], list[TrainingPair]]:
    """Partition by record id; ``round(val_fraction * n_ids)`` ids go to validation."""
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    ids = sorted(dict.fromkeys(p.record_id for p in pairs))
    n_val = int(math.floor(val_fraction * len(ids) + 0.5))
    if n_val == 0:
        return list(pairs), []
    chosen = set(ids[i] for i in _rng(rng_seed).choice(len(ids), size=n_val, replace=False))
    train = [p for p in pairs if p.record_id not in chosen]
    val = [p for p in pairs if p.record_id in chosen]
    return train, val


def write_corpus(
    pairs: Sequence[TrainingPair],
    out_dir: str | Path,
    stats: CorpusStats,
    policy: BalancePolicy,
    name: str = "corpus",
) -> Path:
    """Write ``<name>.jsonl`` plus a ``<name>.meta.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.jsonl"
    dump_pairs(pairs, path)
    meta = {
        "policy": {
            "per_source_caption_cap": dict(policy.per_source_caption_cap),
            "default_cap": policy.default_cap,
            "rng_seed": policy.rng_seed,
            "rng": "numpy PCG64",
        },
        "n_pairs": len(pairs),
        "stats": stats.to_dict(),
        "stats_digest": stats.digest(),
    }
    (out_dir / f"{name}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
