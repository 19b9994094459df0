"""Eval-mode forward latency and weight-file footprint."""

from __future__ import annotations

import json
import os
import platform
import tempfile
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .config import VARIANTS, MstnConfig, make_ablated
from .errors import ConfigError
from .model import MSTN, param_count
from .rng import Rng
from .tensor import no_grad

MIB = float(1 << 20)


@dataclass
class BenchReport:
    variant: str
    param_count: int
    serialized_mb: float
    serialized_bytes: int
    latency_p50_ms: float
    latency_p95_ms: float
    batch: int
    T: int
    D: int
    warmup_iters: int
    measure_iters: int
    threads: int
    host: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def host_description() -> str:
    return f"{platform.machine()} {platform.system()} python {platform.python_version()} numpy {np.__version__}"


def weight_file_bytes(model: MSTN) -> int:
    """Size of the model's weight file, measured by actually writing it."""
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "weights.bin")
        model.save(path)
        return os.path.getsize(path)


def time_forward(model: MSTN, x: np.ndarray, warmup: int, iters: int, threads: int = 1) -> np.ndarray:
    """Per-call wall-clock seconds of ``model(x)`` in eval mode.

    Only the forward call sits inside the timed region. With ``threads > 1``
    every thread runs ``iters`` calls against the same frozen model and all
    samples are pooled.
    """
    if warmup < 0 or iters < 1 or threads < 1:
        raise ConfigError("bench needs warmup >= 0, iters >= 1 and threads >= 1")
    samples: list[list[float]] = [[] for _ in range(threads)]

    def worker(slot: int) -> None:
        out = samples[slot]
        with no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(iters):
                t0 = time.perf_counter()
                model(x)
                out.append(time.perf_counter() - t0)

    if threads == 1:
        worker(0)
    else:
        pool = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
        for t in pool:
            t.start()
        for t in pool:
            t.join()
    return np.concatenate([np.asarray(s) for s in samples])


def bench_model(cfg: MstnConfig, batch: int = 1, warmup: int = 50, iters: int = 500, threads: int = 1,
                setup: Callable[[], None] | None = None) -> BenchReport:
    """Build the model, run ``setup`` (untimed), then time the forward pass."""
    if batch < 1:
        raise ConfigError("bench batch must be >= 1")
    cfg = cfg.validate()
    model = MSTN(cfg)
    x = Rng(cfg.seed, "bench").uniform(0.0, 1.0, (batch, cfg.seq_len, cfg.input_dim)).astype(cfg.dtype)
    if setup is not None:
        setup()
    secs = time_forward(model, x, warmup, iters, threads) * 1e3
    size = weight_file_bytes(model)
    return BenchReport(variant=cfg.variant, param_count=param_count(cfg), serialized_mb=size / MIB,
                       serialized_bytes=size, latency_p50_ms=float(np.percentile(secs, 50)),
                       latency_p95_ms=float(np.percentile(secs, 95)), batch=batch, T=cfg.seq_len,
                       D=cfg.input_dim, warmup_iters=warmup, measure_iters=iters, threads=threads,
                       host=host_description())


def bench_components(cfg: MstnConfig, variants: Sequence[str] = VARIANTS, **kw) -> list[BenchReport]:
    return [bench_model(make_ablated(cfg, v), **kw) for v in variants]


def component_table(reports: Sequence[BenchReport]) -> str:
    """Aligned text table of size and latency, with slowdown relative to the full model."""
    full = next((r for r in reports if r.variant == "Full"), reports[0])
    lines = [f"{'variant':<14}{'params':>10}{'size MB':>10}{'p50 ms':>10}{'p95 ms':>10}{'vs Full':>9}"]
    for r in reports:
        rel = r.latency_p50_ms / full.latency_p50_ms if full.latency_p50_ms > 0 else float("nan")
        lines.append(f"{r.variant:<14}{r.param_count:>10d}{r.serialized_mb:>10.3f}"
                     f"{r.latency_p50_ms:>10.3f}{r.latency_p95_ms:>10.3f}{rel:>8.2f}x")
    return "\n".join(lines)


def length_sweep(cfg: MstnConfig, lengths: Sequence[int] = (64, 128, 256), **kw) -> dict[int, BenchReport]:
    return {T: bench_model(cfg.replace(seq_len=T), **kw) for T in lengths}


def is_superlinear(p50: dict[int, float]) -> bool:
    """True when each successive length step costs more than proportionally.

    For lengths ``T0 < T1 < T2`` with ``T2 - T1 = 2 (T1 - T0)`` (the doubling
    sweep) linear cost gives an increment ratio of exactly 2; a positive
    quadratic term pushes it above 2 regardless of fixed per-call overhead.
    """
    ts = sorted(p50)
    if len(ts) < 3:
        raise ConfigError("superlinearity needs at least three lengths")
    for a, b, c in zip(ts, ts[1:], ts[2:]):
        first, second = p50[b] - p50[a], p50[c] - p50[b]
        if first <= 0 or second / first <= (c - b) / (b - a):
            return False
    return True
