"""Synthetic text-grounding corpora on a skeleton graph.

Each motif is a band-limited sinusoid burst on a subset of nodes with a
per-channel amplitude/phase pattern and cosine on/off ramps. An item holds
1-4 intervals of the queried motif plus distractor intervals of other
motifs; labels mark the queried motif only.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grounding import Segment, labels_to_segments, segments_to_labels

RAMP = 5
GAP = 2


@dataclass
class SyntheticConfig:
    V: int = 8
    L: int = 256
    C_in: int = 3
    num_motifs: int = 6
    items: int = 2000
    noise_std: float = 0.1
    seed: int = 0
    amplitude: float = 1.0
    target_ratio: float = 0.15
    max_len: int = 2000

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**d)


def desk_config(**overrides) -> SyntheticConfig:
    """Single-core budget corpus: the default task with 400 items (320/80 split)."""
    return SyntheticConfig(**{"items": 400, **overrides})


@dataclass(frozen=True)
class MotifSpec:
    motif_id: int
    node_subset: tuple[int, ...]
    frequency: float  # cycles per frame
    phase: tuple[float, ...]  # per channel
    amplitude: tuple[float, ...]  # per channel
    min_duration: int
    max_duration: int

    def waveform(self, n: int, V: int, scale: float = 1.0) -> np.ndarray:
        """``(V, n, C)`` burst including cosine ramps."""
        t = np.arange(n)
        ramp = np.ones(n)
        r = min(RAMP, n // 2)
        if r > 0:
            up = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 1) / (r + 1))
            ramp[:r] = up
            ramp[n - r :] = up[::-1]
        phase = np.asarray(self.phase)
        amp = np.asarray(self.amplitude) * scale
        wave = amp[None, :] * np.sin(2 * np.pi * self.frequency * t[:, None] + phase[None, :])
        out = np.zeros((V, n, len(amp)))
        out[list(self.node_subset)] = wave * ramp[:, None]
        return out


def param_distance(a: MotifSpec, b: MotifSpec) -> float:
    """Distance between waveform parameters (frequency in units of 0.01 plus
    amplitude-pattern difference)."""
    return abs(a.frequency - b.frequency) / 0.01 + float(np.abs(np.subtract(a.amplitude, b.amplitude)).sum())


def make_motifs(num_motifs: int, V: int, C_in: int, L: int, rng, ratio: float = 0.15) -> list[MotifSpec]:
    if num_motifs < 2:
        raise ValueError("need at least two motifs")
    freqs = np.linspace(0.08, 0.24, num_motifs)
    rng.shuffle(freqs)
    # mean 2 target intervals per item, so mean duration is ratio * L / 2
    mean_dur = ratio * L / 2.0
    lo, hi = max(2 * RAMP + 2, int(round(0.6 * mean_dur))), max(2 * RAMP + 3, int(round(1.4 * mean_dur)))
    motifs = []
    for k in range(num_motifs):
        size = int(rng.integers(max(1, V // 4), max(2, V // 2) + 1))
        subset = tuple(sorted(rng.choice(V, size=size, replace=False).tolist()))
        amp = rng.choice([-1.0, 1.0], size=C_in) * rng.uniform(0.6, 1.0, size=C_in)
        phase = rng.uniform(0, 2 * np.pi, size=C_in)
        motifs.append(
            MotifSpec(k, subset, float(freqs[k]), tuple(phase.tolist()), tuple(amp.tolist()), lo, hi)
        )
    return motifs


@dataclass
class SyntheticItem:
    motion: np.ndarray  # (V, L, C_in)
    query_id: int
    labels: np.ndarray  # (L,)
    segments: list[Segment]
    distractors: list[tuple[int, Segment]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SyntheticItem)
            and self.query_id == other.query_id
            and np.array_equal(self.motion, other.motion)
            and np.array_equal(self.labels, other.labels)
            and self.segments == other.segments
        )


def _pack(durations: list[int], L: int, rng) -> list[int]:
    """Random non-overlapping starts (in the given order) with GAP frames between."""
    need = sum(durations) + GAP * (len(durations) - 1)
    if need > L:
        raise ValueError(f"cannot pack intervals totalling {need} frames into length {L}")
    slack = L - need
    cuts = np.sort(rng.integers(0, slack + 1, size=len(durations)))
    starts = []
    pos = 0
    for k, (c, d) in enumerate(zip(cuts, durations)):
        prev_cut = cuts[k - 1] if k else 0
        pos += c - prev_cut
        starts.append(int(pos))
        pos += d + GAP
    return starts


def gen_item(motifs: list[MotifSpec], cfg: SyntheticConfig, rng) -> SyntheticItem:
    V, L, C = cfg.V, cfg.L, cfg.C_in
    q = int(rng.integers(len(motifs)))
    n_target = int(rng.choice([1, 2, 3, 4], p=[0.4, 0.35, 0.15, 0.1]))
    n_distract = int(rng.integers(1, 4))
    others = [m for m in motifs if m.motif_id != q]
    placed = [(q, motifs[q]) for _ in range(n_target)]
    placed += [(m.motif_id, m) for m in (others[i] for i in rng.integers(len(others), size=n_distract))]
    order = rng.permutation(len(placed))
    placed = [placed[i] for i in order]
    durations = [int(rng.integers(m.min_duration, m.max_duration + 1)) for _, m in placed]
    starts = _pack(durations, L, rng)
    motion = rng.normal(0.0, cfg.noise_std, size=(V, L, C)) if cfg.noise_std > 0 else np.zeros((V, L, C))
    segs, distractors = [], []
    for (mid, m), s, d in zip(placed, starts, durations):
        motion[:, s : s + d] += m.waveform(d, V, cfg.amplitude)
        if mid == q:
            segs.append(Segment(s, s + d))
        else:
            distractors.append((mid, Segment(s, s + d)))
    segs.sort()
    return SyntheticItem(motion, q, segments_to_labels(segs, L), segs, distractors)


def item_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def _gen_range(args):
    motifs, cfg, lo, hi = args
    return [gen_item(motifs, cfg, np.random.default_rng(item_seed(cfg.seed, i))) for i in range(lo, hi)]


def gen_corpus(
    cfg: SyntheticConfig, motifs: list[MotifSpec] | None = None, workers: int = 1
) -> tuple[list[MotifSpec], list[SyntheticItem]]:
    """Generate ``cfg.items`` items; item ``i`` uses its own derived seed, so the
    corpus does not depend on how generation is split across workers."""
    if cfg.L > cfg.max_len:
        raise ValueError(f"L={cfg.L} exceeds max_len={cfg.max_len}")
    if cfg.num_motifs < 2:
        raise ValueError("num_motifs must be at least 2")
    if motifs is None:
        motifs = make_motifs(cfg.num_motifs, cfg.V, cfg.C_in, cfg.L, np.random.default_rng([cfg.seed, 2**31]), cfg.target_ratio)
    if workers > 1 and cfg.items > 1:
        step = -(-cfg.items // workers)
        jobs = [(motifs, cfg, lo, min(lo + step, cfg.items)) for lo in range(0, cfg.items, step)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            items = [it for part in ex.map(_gen_range, jobs) for it in part]
    else:
        items = _gen_range((motifs, cfg, 0, cfg.items))
    return motifs, items


def split(items, fractions=(0.8, 0.2), seed: int = 0):
    """Motif-stratified, seed-deterministic partition into ``len(fractions)`` parts."""
    fr = np.asarray(fractions, dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9 or np.any(fr < 0):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list] = [[] for _ in fr]
    by_motif: dict[int, list[int]] = {}
    for i, it in enumerate(items):
        by_motif.setdefault(it.query_id, []).append(i)
    for mid in sorted(by_motif):
        idx = np.array(by_motif[mid])
        rng.shuffle(idx)
        bounds = np.round(np.cumsum(fr) * len(idx)).astype(int)
        lo = 0
        for p, hi in enumerate(bounds):
            parts[p].extend(idx[lo:hi].tolist())
            lo = hi
    for p, f in zip(parts, fr):
        if f > 0 and not p:
            raise ValueError("a partition with positive fraction came out empty")
    return [[items[i] for i in sorted(p)] for p in parts]


# ---------------------------------------------------------------- query embeddings


class QueryEmbeddingProvider:
    """motif_id -> unit D-vector; frozen random by default."""

    def __init__(self, num_motifs: int, D: int, seed: int = 0, learnable: bool = False):
        rng = np.random.default_rng([seed, 7919])
        table = rng.normal(size=(num_motifs, D))
        self.table = table / np.linalg.norm(table, axis=1, keepdims=True)
        self.learnable = learnable

    def __call__(self, ids) -> np.ndarray:
        return self.table[np.asarray(ids)]


# ---------------------------------------------------------------- JSONL


def item_to_json(it: SyntheticItem) -> dict:
    return {
        "motion": it.motion.tolist(),
        "query_id": int(it.query_id),
        "labels": [int(v) for v in it.labels],
        "segments": [[s.start, s.end] for s in it.segments],
    }


def item_from_json(obj: dict) -> SyntheticItem:
    labels = np.asarray(obj["labels"], dtype=np.float64)
    segs = [Segment(int(a), int(b)) for a, b in obj["segments"]]
    if labels_to_segments(labels) != segs:
        raise ValueError("labels and segments disagree")
    return SyntheticItem(np.asarray(obj["motion"], dtype=np.float64), int(obj["query_id"]), labels, segs)


def write_jsonl(items, path, motifs: list[MotifSpec] | None = None) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps(item_to_json(it)) + "\n")
    if motifs is not None:
        Path(str(path) + ".motifs.json").write_text(json.dumps([asdict(m) for m in motifs]))


def read_jsonl(path) -> list[SyntheticItem]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(item_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: malformed item on line {lineno}: {e}") from e
    return out


def read_motifs(path) -> list[MotifSpec]:
    objs = json.loads(Path(path).read_text())
    return [
        MotifSpec(
            o["motif_id"], tuple(o["node_subset"]), o["frequency"], tuple(o["phase"]),
            tuple(o["amplitude"]), o["min_duration"], o["max_duration"],
        )
        for o in objs
    ]


# ---------------------------------------------------------------- oracles


def matched_filter_scores(item: SyntheticItem, motif: MotifSpec, window: int = 9) -> np.ndarray:
    """Quadrature correlation with the motif's spatial/temporal template,
    normalized so a full-amplitude burst scores about 1."""
    x = item.motion  # (V, L, C)
    L = x.shape[1]
    t = np.arange(L)
    amp = np.asarray(motif.amplitude)
    phase = np.asarray(motif.phase)
    carrier = np.exp(-1j * (2 * np.pi * motif.frequency * t[:, None] + phase[None, :]))  # (L, C)
    sub = x[list(motif.node_subset)]  # (S, L, C)
    z = (sub * carrier[None] * amp[None, None]).sum(axis=(0, 2))
    kernel = np.ones(window) / window
    zs = np.convolve(z, kernel, mode="same")
    norm = 0.5 * len(motif.node_subset) * float((amp * amp).sum())
    return np.abs(zs) / norm


def matched_filter_accuracy(items, motifs, threshold: float = 0.5, window: int = 9) -> float:
    correct = total = 0
    for it in items:
        pred = matched_filter_scores(it, motifs[it.query_id], window) >= threshold
        correct += int((pred == (it.labels > 0.5)).sum())
        total += it.labels.size
    return correct / total


def grounded_ratio(item: SyntheticItem) -> float:
    return float(item.labels.mean())
