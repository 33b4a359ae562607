"""Seeded batch execution and jackknife standard errors shared by the MC paths."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InputError

DEFAULT_BATCHES = 32


@dataclass(frozen=True)
class McOptions:
    """Monte-Carlo settings for simulation-based bounds and gradients.

    Attributes:
        replications: Total number of simulated datasets.
        seed: Root seed; batch streams are derived from it.
        batches: Number of equal batches used for jackknife standard errors.
        workers: Thread count. Results do not depend on it.
    """

    replications: int = 100_000
    seed: int = 0
    batches: int = DEFAULT_BATCHES
    workers: int | None = 1

    def __post_init__(self):
        if self.replications < 1:
            raise InputError("replications must be >= 1")
        if self.batches < 2:
            raise InputError("at least 2 batches are needed for standard errors")


def batch_rng(seed: int, key: Sequence[int], b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(*key, b)))


def batch_sizes(total: int, batches: int) -> list[int]:
    base, extra = divmod(int(total), int(batches))
    return [base + (1 if b < extra else 0) for b in range(batches)]


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


def run_batches(fn: Callable[[np.random.Generator, int, int], object], *, seed: int,
                key: Sequence[int], replications: int, batches: int,
                workers: int | None = 1) -> list:
    """Call ``fn(rng, size, b)`` for each batch and return results in batch order.

    Each batch owns a generator derived from ``(seed, key, b)``, so the output
    is identical for any worker count.
    """
    sizes = batch_sizes(replications, batches)
    jobs = [(batch_rng(seed, key, b), n, b) for b, n in enumerate(sizes)]
    nw = min(resolve_workers(workers), len(jobs))
    if nw <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=nw) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def jackknife(num, den=None, transform: Callable | None = None):
    """Delete-one-batch jackknife for ratio estimators.

    Args:
        num: Per-batch sums with batch along axis 0.
        den: Per-batch counts, broadcastable to ``num``. Defaults to ones.
        transform: Optional function applied to the ratio before the variance
            is taken (for example a log or a difference of two ratios).

    Returns:
        ``(estimate, standard_error)`` computed on the pooled sums. Entries with
        a zero pooled denominator come back as NaN.
    """
    num = np.asarray(num, dtype=float)
    den = np.ones(num.shape[0]) if den is None else np.asarray(den, dtype=float)
    den = np.broadcast_to(den.reshape(den.shape + (1,) * (num.ndim - den.ndim)), num.shape)
    B = num.shape[0]
    tf = transform if transform is not None else (lambda v: v)
    tot_n, tot_d = num.sum(axis=0), den.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        est = tf(tot_n / tot_d)
        loo = np.stack([tf((tot_n - num[b]) / (tot_d - den[b])) for b in range(B)])
    est = np.asarray(est, dtype=float)
    loo = np.asarray(loo, dtype=float)
    se = np.sqrt((B - 1) / B * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return est, se
