"""Temporal augmentation rules for text/segment annotation corpora.

Two transforms operate per sequence:

* :func:`merge_overlapping` fuses heavily overlapping segments carrying
  different texts into their union interval with the texts joined by ``"; "``.
* :func:`one_to_many` gathers all segments that share an exact text into one
  query item.

:func:`corpus_stats` summarizes a corpus (frame counts, query lengths,
grounded length ratios, segments per query).
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grounding import Segment

TEXT_SEP = "; "
MERGE_MODES = ("min", "max", "either")


@dataclass(frozen=True)
class AnnotationItem:
    sequence_id: str
    text: str
    segments: tuple[Segment, ...]
    sequence_length: int

    def __post_init__(self):
        segs = tuple(sorted(self.segments))
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError(f"item {self.sequence_id!r}/{self.text!r} has no segments")
        if self.sequence_length <= 0:
            raise ValueError(f"sequence_length must be positive, got {self.sequence_length}")
        last = max(s.end for s in segs)
        if last > self.sequence_length:
            raise ValueError(f"segment end {last} exceeds sequence length {self.sequence_length} in {self.sequence_id!r}")


def _overlap(a: Segment, b: Segment) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def should_merge(a: Segment, b: Segment, ratio: float = 0.8, mode: str = "min") -> bool:
    """Overlap test relative to the shorter (``min``) or longer (``max``) segment.

    ``either`` accepts when the overlap covers ``ratio`` of either segment,
    which is the same condition as ``min``.
    """
    ov = _overlap(a, b)
    if ov == 0:
        return False
    if mode in ("min", "either"):
        ref = min(a.length, b.length)
    elif mode == "max":
        ref = max(a.length, b.length)
    else:
        raise ValueError(f"unknown merge mode {mode!r}; expected one of {MERGE_MODES}")
    # small slack so ratios like 0.8 * 85 compare as exact
    return ov >= ratio * ref * (1.0 - 1e-12)


@dataclass
class _Entry:
    segment: Segment
    texts: tuple[str, ...]
    owner: int | None  # source item index while untouched, None once merged

    def key(self):
        return (self.segment.start, self.segment.end, self.texts)


def _join_texts(a: Sequence[str], b: Sequence[str]) -> tuple[str, ...]:
    out = list(a)
    for t in b:
        if t not in out:
            out.append(t)
    return tuple(out)


def merge_overlapping(items: Sequence[AnnotationItem], ratio: float = 0.8, mode: str = "min") -> list[AnnotationItem]:
    """Merge overlapping segments of one sequence until no pair qualifies.

    Every segment is an entry. The earliest qualifying pair in (start, end,
    texts) order is replaced by its union, carrying both texts, and the scan
    restarts. Entries that never merge stay with their original item.

    Args:
        items: Annotations of a single sequence.
        ratio: Required overlap fraction in ``(0, 1]``.
        mode: Reference length for the fraction: ``min``, ``max`` or ``either``.

    Returns:
        Items sorted by (first segment, text).
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}; expected one of {MERGE_MODES}")
    if not items:
        return []
    seq_ids = {it.sequence_id for it in items}
    if len(seq_ids) > 1:
        raise ValueError(f"merge_overlapping expects one sequence, got {sorted(seq_ids)}")
    seq_id = items[0].sequence_id
    seq_len = max(it.sequence_length for it in items)

    entries = [_Entry(s, (it.text,), k) for k, it in enumerate(items) for s in it.segments]
    while True:
        entries.sort(key=_Entry.key)
        hit = None
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                if entries[j].segment.start >= entries[i].segment.end:
                    break
                if should_merge(entries[i].segment, entries[j].segment, ratio, mode):
                    hit = (i, j)
                    break
            if hit:
                break
        if hit is None:
            break
        i, j = hit
        a, b = entries[i], entries[j]
        union = Segment(min(a.segment.start, b.segment.start), max(a.segment.end, b.segment.end))
        merged = _Entry(union, _join_texts(a.texts, b.texts), None)
        entries = [e for k, e in enumerate(entries) if k not in (i, j)] + [merged]

    kept: dict[int, list[Segment]] = defaultdict(list)
    out = []
    for e in entries:
        if e.owner is None:
            out.append(AnnotationItem(seq_id, TEXT_SEP.join(e.texts), (e.segment,), seq_len))
        else:
            kept[e.owner].append(e.segment)
    for k, segs in kept.items():
        src = items[k]
        out.append(AnnotationItem(seq_id, src.text, tuple(segs), src.sequence_length))
    out.sort(key=lambda it: (it.segments[0].start, it.segments[0].end, it.text))
    return out


def coalesce(segments: Iterable[Segment]) -> list[Segment]:
    """Sorted union of segments, fusing overlapping ones (touching ones stay apart)."""
    out: list[Segment] = []
    for s in sorted(segments):
        if out and s.start < out[-1].end:
            if s.end > out[-1].end:
                out[-1] = Segment(out[-1].start, s.end)
        else:
            out.append(s)
    return out


def one_to_many(items: Sequence[AnnotationItem]) -> list[AnnotationItem]:
    """Group items sharing ``(sequence_id, text)`` into one multi-segment item."""
    groups: dict[tuple[str, str], list[AnnotationItem]] = defaultdict(list)
    for it in items:
        groups[(it.sequence_id, it.text)].append(it)
    out = []
    for (sid, text), group in sorted(groups.items()):
        lengths = {it.sequence_length for it in group}
        if len(lengths) > 1:
            raise ValueError(f"sequence {sid!r} has inconsistent lengths {sorted(lengths)}")
        segs = coalesce(s for it in group for s in it.segments)
        out.append(AnnotationItem(sid, text, tuple(segs), lengths.pop()))
    return out


def _augment_sequence(args) -> list[AnnotationItem]:
    items, ratio, mode = args
    return one_to_many(merge_overlapping(items, ratio, mode))


def augment(items: Sequence[AnnotationItem], ratio: float = 0.8, mode: str = "min", workers: int = 1) -> list[AnnotationItem]:
    """Overlap merging followed by one-to-many grouping, per sequence."""
    by_seq: dict[str, list[AnnotationItem]] = defaultdict(list)
    for it in items:
        by_seq[it.sequence_id].append(it)
    jobs = [(by_seq[k], ratio, mode) for k in sorted(by_seq)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_augment_sequence, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        parts = [_augment_sequence(j) for j in jobs]
    return [it for p in parts for it in p]


def covered_frames(items: Iterable[AnnotationItem]) -> dict[str, set[int]]:
    """Frames covered by any segment, per sequence."""
    cov: dict[str, set[int]] = defaultdict(set)
    for it in items:
        for s in it.segments:
            cov[it.sequence_id].update(range(s.start, s.end))
    return dict(cov)


# ---------------------------------------------------------------- statistics


@dataclass
class CorpusStats:
    frame_numbers: np.ndarray
    query_lengths: np.ndarray
    grounded_ratios: np.ndarray
    segment_counts: np.ndarray
    totals: dict = field(default_factory=dict)

    def summary(self) -> dict:
        def desc(v):
            return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "median": float(np.median(v))}

        return {
            "totals": dict(self.totals),
            "frame_number": desc(self.frame_numbers),
            "query_length": desc(self.query_lengths),
            "grounded_ratio": desc(self.grounded_ratios),
            "segment_count": desc(self.segment_counts),
        }

    def histograms(self, bins: int = 20) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for name, v, rng in (
            ("frame_number", self.frame_numbers, None),
            ("query_length", self.query_lengths, None),
            ("grounded_ratio", self.grounded_ratios, (0.0, 1.0)),
            ("segment_count", self.segment_counts, None),
        ):
            if name in ("query_length", "segment_count"):
                # integer-valued: one bin per value
                edges = np.arange(v.min(), v.max() + 2) - 0.5
                out[name] = np.histogram(v, bins=edges)
            else:
                out[name] = np.histogram(v, bins=bins, range=rng)
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))

    def write_csv(self, directory, bins: int = 20) -> list[Path]:
        """One ``<stat>_hist.csv`` per statistic with columns bin_lo, bin_hi, count."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, (counts, edges) in self.histograms(bins).items():
            p = d / f"{name}_hist.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_lo", "bin_hi", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
            paths.append(p)
        return paths


def corpus_stats(items: Sequence[AnnotationItem]) -> CorpusStats:
    """Per-query statistics; grounded ratio uses the covered length of the union."""
    if not items:
        raise ValueError("corpus_stats needs at least one item")
    seq_len: dict[str, int] = {}
    for it in items:
        seq_len[it.sequence_id] = max(seq_len.get(it.sequence_id, 0), it.sequence_length)
    ratios = np.array([sum(s.length for s in coalesce(it.segments)) / it.sequence_length for it in items])
    stats = CorpusStats(
        frame_numbers=np.array(list(seq_len.values()), dtype=np.int64),
        query_lengths=np.array([len(it.text.split()) for it in items], dtype=np.int64),
        grounded_ratios=ratios,
        segment_counts=np.array([len(it.segments) for it in items], dtype=np.int64),
    )
    stats.totals = {
        "sequences": len(seq_len),
        "queries": len(items),
        "segments": int(stats.segment_counts.sum()),
        "frames": int(stats.frame_numbers.sum()),
    }
    return stats


def from_synthetic(items, names: Sequence[str] | None = None) -> list[AnnotationItem]:
    """View synthetic items as annotations; motif ``k`` gets text ``names[k]``."""
    out = []
    for i, it in enumerate(items):
        text = names[it.query_id] if names else f"motif {it.query_id}"
        out.append(AnnotationItem(f"seq{i:06d}", text, tuple(it.segments), int(it.labels.shape[0])))
    return out


# ---------------------------------------------------------------- JSONL


def item_to_json(it: AnnotationItem) -> dict:
    return {
        "sequence_id": it.sequence_id,
        "text": it.text,
        "segments": [[s.start, s.end] for s in it.segments],
        "sequence_length": it.sequence_length,
    }


def item_from_json(obj: dict) -> AnnotationItem:
    segs = tuple(Segment(int(a), int(b)) for a, b in obj["segments"])
    return AnnotationItem(str(obj["sequence_id"]), str(obj["text"]), segs, int(obj["sequence_length"]))


def write_jsonl(items: Iterable[AnnotationItem], path) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps(item_to_json(it)) + "\n")


def read_jsonl(path) -> list[AnnotationItem]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(item_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: malformed annotation on line {lineno}: {e}") from e
    return out
