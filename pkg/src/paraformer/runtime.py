"""Branch-parallel inference and latency benchmarking.

Each branch of a Para-Former runs on a worker thread against the shared,
read-only parameters and the shared embedded tokens. Results go into one
slot per branch; once every slot is filled the calling thread sums them in
ascending branch order, which is exactly the reduction
:func:`paraformer.models.forward` performs, so outputs are bitwise equal for
any worker count or completion order.
"""

from __future__ import annotations

import csv
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import count

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import ConfigError, Tensor, no_grad
from .models import Model, ModelSpec, aggregate, branch_forward, build, embed_tokens, forward, head

PINNING = ("none", "round-robin")


class BranchError(RuntimeError):
    def __init__(self, branch: int, cause: BaseException):
        super().__init__(f"branch {branch} failed: {cause!r}")
        self.branch = branch
        self.__cause__ = cause


@dataclass(frozen=True)
class PoolConfig:
    workers: int = 1
    pinning: str = "none"
    warmup: int = 3
    reps: int = 20

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.pinning not in PINNING:
            raise ConfigError(f"pinning must be one of {PINNING}")


class BranchPool:
    """A reusable thread pool that evaluates model branches."""

    def __init__(self, config: PoolConfig):
        self.config = config
        self._ids = count()
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=config.workers, initializer=self._init_worker,
                                            thread_name_prefix="branch")

    def _init_worker(self):
        if self.config.pinning != "round-robin" or not hasattr(os, "sched_setaffinity"):
            return
        with self._lock:
            idx = next(self._ids)
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[idx % len(cpus)]})

    def close(self):
        self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run(self, model: Model, image, jitter=None) -> np.ndarray:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        n = len(model.branches)
        with no_grad():
            tokens = embed_tokens(model, arr)
        slots: list[Tensor | None] = [None] * n

        def work(b: int):
            if jitter is not None:
                jitter(b)
            with no_grad():
                slots[b] = branch_forward(model, tokens, b)

        futures = [self._executor.submit(work, b) for b in range(n)]
        errors = []
        for b, fut in enumerate(futures):
            exc = fut.exception()
            if exc is not None:
                errors.append((b, exc))
        if errors:
            raise BranchError(*errors[0])
        with no_grad():
            return head(model, aggregate(slots, model.spec.aggregation)).data


def infer_parallel(model: Model, image, pool: PoolConfig | BranchPool, jitter=None) -> np.ndarray:
    if isinstance(pool, BranchPool):
        return pool.run(model, image, jitter)
    with BranchPool(pool) as bp:
        return bp.run(model, image, jitter)


def random_jitter(seed: int = 0, max_sleep: float = 1e-3):
    """Per-branch random sleep, to shuffle completion order in tests."""
    rng = random.Random(seed)
    lock = threading.Lock()

    def jitter(_branch: int):
        with lock:
            delay = rng.uniform(0.0, max_sleep)
        time.sleep(delay)

    return jitter


def speedup_theoretical(serial_depth: int, parallel_depth: int) -> float:
    if serial_depth < 1 or parallel_depth < 1:
        raise ValueError(f"depths must be positive, got N={serial_depth}, M={parallel_depth}")
    return serial_depth / parallel_depth


@dataclass
class BenchEntry:
    model: str
    depth: int
    branches: int
    workers: int
    reps: int
    input_shape: list[int]
    samples_ns: list[int]
    median_ns: float
    p10_ns: float
    p90_ns: float
    min_ns: int
    max_ns: int
    measured_speedup: float | None = None
    theoretical_speedup: float | None = None


@dataclass
class BenchReport:
    baseline: str | None
    baseline_depth: int | None
    entries: list[BenchEntry] = field(default_factory=list)

    def entry(self, model: str) -> BenchEntry:
        for e in self.entries:
            if e.model == model:
                return e
        raise KeyError(model)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        raw = json.loads(text)
        return cls(raw["baseline"], raw["baseline_depth"], [BenchEntry(**e) for e in raw["entries"]])

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json())
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "workers", "rep", "ns"])
            for e in self.entries:
                for i, ns in enumerate(e.samples_ns):
                    w.writerow([e.model, e.workers, i, ns])

    def summary(self) -> str:
        lines = [f"{'model':<20} {'workers':>7} {'median_ms':>10} {'p10_ms':>8} {'p90_ms':>8} "
                 f"{'measured':>9} {'N/M':>7}"]
        for e in self.entries:
            meas = "-" if e.measured_speedup is None else f"{e.measured_speedup:.2f}"
            theo = "-" if e.theoretical_speedup is None else f"{e.theoretical_speedup:.1f}"
            lines.append(f"{e.model:<20} {e.workers:>7} {e.median_ns / 1e6:>10.3f} {e.p10_ns / 1e6:>8.3f} "
                         f"{e.p90_ns / 1e6:>8.3f} {meas:>9} {theo:>7}")
        if self.baseline:
            lines.append(f"baseline: {self.baseline} (N={self.baseline_depth})")
        return "\n".join(lines) + "\n"


def _limit_blas(workers: int):
    # one BLAS thread per branch worker, otherwise pools oversubscribe the cores
    return threadpool_limits(limits=1 if workers > 1 else None)


def time_model(model: Model, image: np.ndarray, pool: BranchPool | None, warmup: int, reps: int) -> list[int]:
    run = (lambda: pool.run(model, image)) if pool is not None else (lambda: forward(model, image))
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        run()
        samples.append(time.perf_counter_ns() - t0)
    return samples


def bench_latency(specs: list[ModelSpec], pool: PoolConfig, reps: int | None = None,
                  warmup: int | None = None, seed: int = 0) -> BenchReport:
    """Median-of-reps latency per model on one shared random input.

    Serial models run the single-thread forward; parallel models run through a
    :class:`BranchPool`. The deepest serial model is the baseline: every entry
    gets ``median(baseline) / median(entry)`` and the ideal ratio ``N / M``.
    """
    reps = pool.reps if reps is None else reps
    warmup = pool.warmup if warmup is None else warmup
    if reps < 10:
        raise ConfigError(f"bench needs at least 10 measured reps, got {reps}")
    rng = np.random.default_rng(seed)
    entries = []
    images = {}
    with _limit_blas(pool.workers), BranchPool(pool) as bp:
        for spec in specs:
            model = build(spec)
            shape = spec.image
            if shape not in images:
                images[shape] = rng.random(shape).astype(spec.dtype)
            image = images[shape]
            samples = time_model(model, image, None if spec.topology == "serial" else bp, warmup, reps)
            arr = np.asarray(samples, dtype=np.int64)
            entries.append(BenchEntry(
                model=spec.name, depth=spec.depth, branches=spec.branches,
                workers=1 if spec.topology == "serial" else pool.workers, reps=reps,
                input_shape=list(shape), samples_ns=[int(v) for v in arr],
                median_ns=float(np.median(arr)), p10_ns=float(np.percentile(arr, 10)),
                p90_ns=float(np.percentile(arr, 90)), min_ns=int(arr.min()), max_ns=int(arr.max())))
    serial = [(e, s) for e, s in zip(entries, specs) if s.topology == "serial"]
    report = BenchReport(None, None, entries)
    if serial:
        base, base_spec = max(serial, key=lambda es: es[1].depth)
        report.baseline, report.baseline_depth = base.model, base_spec.depth
        for e in entries:
            e.theoretical_speedup = speedup_theoretical(base_spec.depth, e.depth)
            if e.input_shape == base.input_shape and e.reps == base.reps:
                e.measured_speedup = base.median_ns / e.median_ns
    return report
