"""Retained-activation memory benchmark across sequence lengths.

Peak memory is the tracker's count of scalars held for the backward pass
during one forward/backward on a single item, so it does not depend on the
allocator or platform.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .baselines import AttentionBaseline, AttentionConfig, RecurrentBaseline, RecurrentConfig
from .model import ModelConfig, TmMamba, loss_ce

log = logging.getLogger(__name__)

OOM = "out_of_memory"
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)
DEFAULT_CAP = 250_000_000  # scalars, about 2 GB of float64


@dataclass
class BenchRow:
    model: str
    length: int
    peak: int | None  # None when the cap was hit
    seconds: float
    status: str = "ok"


def bench_models(D: int = 64, V: int = 8, C_in: int = 3, max_len: int = 8192, seed: int = 0) -> dict[str, Callable]:
    """Default contenders at matching width ``D``."""
    tm = TmMamba(ModelConfig(D=D, V=V, C_in=C_in, N=8, expansion=1, num_blocks=2, max_len=max_len), seed=seed)
    attn = AttentionBaseline(AttentionConfig(D=D, heads=8, layers=2, C_in=C_in), seed=seed)
    rnn = RecurrentBaseline(RecurrentConfig(hidden=D // 2, C_in=C_in, query_dim=D), seed=seed)
    return {"tm_mamba": tm, "attention_baseline": attn, "recurrent_baseline": rnn}


def measure_peak(model, motion: np.ndarray, q: np.ndarray, labels: np.ndarray, cap: int | None = None) -> int:
    """One forward/backward; returns peak retained scalars (raises on cap)."""
    ad.tracker.reset(cap)
    try:
        with ad.Tape() as tape:
            loss = loss_ce(model(motion, q), labels)
        tape.backward(loss)
        return ad.tracker.peak
    finally:
        ad.tracker.reset(None)


def bench_memory(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    models: dict[str, Callable] | None = None,
    cap: int | None = DEFAULT_CAP,
    V: int = 8,
    C_in: int = 3,
    D: int = 64,
    seed: int = 0,
) -> list[BenchRow]:
    """Peak activation count per (model, length); cap hits become ``out_of_memory`` rows."""
    lengths = list(lengths)
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ValueError(f"lengths must be strictly ascending, got {lengths}")
    if models is None:
        models = bench_models(D=D, V=V, C_in=C_in, max_len=max(lengths), seed=seed)
    rng = np.random.default_rng(seed)
    rows = []
    for name, model in models.items():
        for L in lengths:
            motion = rng.normal(size=(V, L, C_in))
            q = rng.normal(size=D)
            q /= np.linalg.norm(q)
            labels = (rng.random(L) < 0.15).astype(np.float64)
            t0 = time.time()
            try:
                peak = measure_peak(model, motion, q, labels, cap)
                rows.append(BenchRow(name, L, int(peak), time.time() - t0))
            except (ad.ActivationCapExceeded, MemoryError) as e:
                log.info("%s at L=%d: %s", name, L, e)
                rows.append(BenchRow(name, L, None, time.time() - t0, OOM))
            log.info("%s", rows[-1])
    return rows


def doubling_ratios(rows: Sequence[BenchRow], model: str) -> dict[int, float]:
    """``peak(2L) / peak(L)`` keyed by ``L`` wherever both lengths were measured."""
    peaks = {r.length: r.peak for r in rows if r.model == model and r.peak is not None}
    return {L: peaks[2 * L] / peaks[L] for L in sorted(peaks) if 2 * L in peaks}


def slope(rows: Sequence[BenchRow], model: str) -> float:
    """Least-squares slope of peak against length (scalars per frame)."""
    pts = [(r.length, r.peak) for r in rows if r.model == model and r.peak is not None]
    if len(pts) < 2:
        raise ValueError(f"need two measured lengths for {model}")
    x, y = np.array(pts, dtype=np.float64).T
    return float(np.polyfit(x, y, 1)[0])


def write_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "length", "peak_scalars", "seconds", "status"])
        for r in rows:
            w.writerow([r.model, r.length, "" if r.peak is None else r.peak, f"{r.seconds:.3f}", r.status])


def read_csv(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        return [
            BenchRow(d["model"], int(d["length"]), int(d["peak_scalars"]) if d["peak_scalars"] else None, float(d["seconds"]), d["status"])
            for d in csv.DictReader(fh)
        ]


def write_report(rows: Sequence[BenchRow], out_dir) -> list[Path]:
    """CSV plus a log-log scaling plot."""
    from .plotting import plot_memory_scaling

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "memory.csv")
    return [out / "memory.csv", plot_memory_scaling(rows, out / "memory.png")]
