"""Seeded discrete-epoch simulation of a line network under hop-by-hop ACKs.

Every epoch each link succeeds independently with probability
``1 - eps_i``.  Transfers are resolved from the destination backwards, so
a relay that forwards its head packet can accept a new one in the same
epoch.  Relay buffers are FIFO; the source always has a packet ready and
stamps it with the epoch of its first transmission attempt.

Random numbers come from numpy's counter-based ``Philox`` generator.
Replication ``k`` of a run seeded with ``seed`` uses
``SeedSequence(seed, spawn_key=(k,))``, i.e. the ``k``-th child of
``SeedSequence(seed).spawn``; :func:`simulate` is replication 0.
Link outcomes are drawn in blocks of :data:`BLOCK_EPOCHS` rows of ``h``
uniforms.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .config import ConfigLike, NetworkConfig, check_config

BLOCK_EPOCHS = 1 << 16
DEFAULT_SEED = 20100613
N_BATCHES = 20


@dataclass(frozen=True)
class SimSettings:
    epochs: int = 1_000_000
    warmup_epochs: int | None = None
    seed: int = DEFAULT_SEED
    replications: int = 1
    debug: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.warmup_epochs is not None and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")

    def warmup_for(self, config: NetworkConfig) -> int:
        """Explicit warmup, else ``max(10 * sum(m), 10_000)`` capped at half the run."""
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return min(max(10 * sum(config.buffers), 10_000), self.epochs // 2)


@dataclass
class SimReport:
    throughput: float
    delay_histogram: dict[int, int]
    occupancy_freq: tuple[np.ndarray, ...]
    delivered: int
    blocked_events: np.ndarray
    stderr_throughput: float
    epochs: int
    warmup_epochs: int
    replications: int = 1
    seed: int = DEFAULT_SEED
    replicate_throughputs: list[float] = field(default_factory=list)

    def _delays(self):
        d = np.array(sorted(self.delay_histogram), dtype=float)
        c = np.array([self.delay_histogram[int(k)] for k in d], dtype=float)
        return d, c

    def mean_delay(self) -> float:
        d, c = self._delays()
        return float(d @ c / c.sum())

    def var_delay(self) -> float:
        d, c = self._delays()
        mu = d @ c / c.sum()
        return float(((d - mu) ** 2) @ c / c.sum())

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput,
            "stderr_throughput": self.stderr_throughput,
            "delivered": self.delivered,
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "replications": self.replications,
            "seed": self.seed,
            "blocked_events": self.blocked_events.tolist(),
            "occupancy": [o.tolist() for o in self.occupancy_freq],
            "delay_histogram": {str(k): v for k, v in sorted(self.delay_histogram.items())},
            "delay_mean": self.mean_delay() if self.delivered else None,
            "delay_variance": self.var_delay() if self.delivered else None,
            "replicate_throughputs": list(self.replicate_throughputs),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delay_epochs", "count"])
        for k, v in sorted(self.delay_histogram.items()):
            w.writerow([k, v])
        return buf.getvalue()


@njit(cache=True)
def _pop(ring, heads, counts, node):
    stamp = ring[node, heads[node]]
    heads[node] = (heads[node] + 1) % ring.shape[1]
    counts[node] -= 1
    return stamp


@njit(cache=True)
def _push(ring, heads, counts, node, cap, stamp):
    ring[node, (heads[node] + counts[node]) % ring.shape[1]] = stamp
    counts[node] += 1
    if counts[node] > cap:
        raise AssertionError("buffer overflow")


@njit(cache=True)
def _run_block(success, caps, counts, heads, ring, scalars, warmup, occ, blocked, out_stamp, debug):
    # scalars: [epoch, source stamp (-1 if none), accepted, delivered]
    n_epochs, h = success.shape
    Y = np.zeros(h + 2, np.int64)
    for b in range(n_epochs):
        epoch = scalars[0]
        measure = epoch >= warmup
        if measure:
            for k in range(h - 1):
                occ[k, counts[k]] += 1
        if scalars[1] < 0:
            scalars[1] = epoch

        Y[h] = 1 if (counts[h - 2] > 0 and success[b, h - 1]) else 0
        for i in range(h - 1, 0, -1):
            Y[i] = 0
            has_packet = True if i == 1 else counts[i - 2] > 0
            if has_packet and success[b, i - 1]:
                if caps[i - 1] - counts[i - 1] + Y[i + 1] > 0:
                    Y[i] = 1
                elif measure:
                    blocked[i - 1] += 1

        out_stamp[b] = -1
        if Y[h]:
            out_stamp[b] = _pop(ring, heads, counts, h - 2)
            scalars[3] += 1
        for i in range(h - 1, 0, -1):
            if Y[i]:
                if i == 1:
                    stamp = scalars[1]
                    scalars[1] = -1
                    scalars[2] += 1
                else:
                    stamp = _pop(ring, heads, counts, i - 2)
                _push(ring, heads, counts, i - 1, caps[i - 1], stamp)

        if debug:
            for k in range(h - 1):
                if counts[k] < 0 or counts[k] > caps[k]:
                    raise AssertionError("buffer bound violated")
        scalars[0] = epoch + 1


class LineSimulation:
    """Mutable simulation state for one network; advanced block by block."""

    def __init__(self, config: NetworkConfig, debug: bool = False):
        self.config = config
        self.debug = debug
        h = config.hops
        self.caps = np.array(config.buffers, dtype=np.int64)
        self.counts = np.zeros(h - 1, dtype=np.int64)
        self.heads = np.zeros(h - 1, dtype=np.int64)
        self.ring = np.full((h - 1, int(self.caps.max())), -1, dtype=np.int64)
        self.scalars = np.array([0, -1, 0, 0], dtype=np.int64)
        self.blocked = np.zeros(h - 1, dtype=np.int64)
        self.occ = np.zeros((h - 1, int(self.caps.max()) + 1), dtype=np.int64)
        self._eps = np.array(config.erasures)

    @property
    def epoch(self) -> int:
        return int(self.scalars[0])

    @property
    def accepted(self) -> int:
        return int(self.scalars[2])

    @property
    def delivered(self) -> int:
        return int(self.scalars[3])

    @property
    def occupancy(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.counts)

    def set_occupancy(self, state) -> None:
        """Overwrite buffer contents with placeholder packets (for instrumentation)."""
        for k, n in enumerate(state):
            if not 0 <= n <= self.caps[k]:
                raise ValueError(f"occupancy {n} out of bounds for node {k + 1}")
            self.counts[k] = n
            self.heads[k] = 0
            self.ring[k, :n] = self.epoch - 1

    def draw(self, rng: np.random.Generator, n_epochs: int) -> np.ndarray:
        return (rng.random((n_epochs, self.config.hops)) >= self._eps).astype(np.uint8)

    def run(self, success: np.ndarray, warmup: int = 0) -> np.ndarray:
        """Advance one epoch per row of ``success``; returns the delivered stamp per epoch (-1 if none)."""
        success = np.ascontiguousarray(success, dtype=np.uint8)
        out = np.empty(len(success), dtype=np.int64)
        _run_block(
            success, self.caps, self.counts, self.heads, self.ring, self.scalars,
            warmup, self.occ, self.blocked, out, self.debug,
        )
        return out

    def step(self, pattern) -> tuple[int, ...]:
        self.run(np.asarray([pattern], dtype=np.uint8), warmup=self.epoch + 1)
        return self.occupancy

    def buffered(self) -> int:
        return int(self.counts.sum())


def _generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def _run_one(config: NetworkConfig, settings: SimSettings, stream: int) -> SimReport:
    warmup = settings.warmup_for(config)
    sim = LineSimulation(config, settings.debug)
    rng = _generator(settings.seed, stream)
    measured = settings.epochs - warmup
    batch_len = max(measured // N_BATCHES, 1)
    batch_counts = np.zeros(N_BATCHES + 1, dtype=np.int64)
    hist = np.zeros(0, dtype=np.int64)

    remaining = settings.epochs
    while remaining > 0:
        n = min(BLOCK_EPOCHS, remaining)
        start = sim.epoch
        stamps = sim.run(sim.draw(rng, n), warmup)
        epochs = start + np.arange(n)
        hit = (stamps >= 0) & (epochs >= warmup)
        if hit.any():
            delays = epochs[hit] - stamps[hit] + 1
            counts = np.bincount(delays)
            if len(counts) > len(hist):
                counts[: len(hist)] += hist
                hist = counts
            else:
                hist[: len(counts)] += counts
            batch = np.minimum((epochs[hit] - warmup) // batch_len, N_BATCHES)
            batch_counts += np.bincount(batch, minlength=N_BATCHES + 1)
        remaining -= n

    delivered = int(hist.sum())
    throughput = delivered / measured
    full_batches = batch_counts[:N_BATCHES] / batch_len
    if measured >= N_BATCHES:
        stderr = float(np.std(full_batches, ddof=1) / math.sqrt(N_BATCHES))
    else:
        stderr = math.nan
    occ = tuple(sim.occ[k, : m + 1] / sim.occ[k, : m + 1].sum() for k, m in enumerate(config.buffers))
    return SimReport(
        throughput=throughput,
        delay_histogram={int(d): int(c) for d, c in enumerate(hist) if c},
        occupancy_freq=occ,
        delivered=delivered,
        blocked_events=sim.blocked.copy(),
        stderr_throughput=stderr,
        epochs=settings.epochs,
        warmup_epochs=warmup,
        replications=1,
        seed=settings.seed,
        replicate_throughputs=[throughput],
    )


def simulate(config: NetworkConfig, settings: SimSettings = SimSettings()) -> SimReport:
    """Single seeded run (replication 0).

    ``stderr_throughput`` is a batch-means estimate over
    :data:`N_BATCHES` equal slices of the measured epochs.
    """
    return _run_one(config, settings, 0)


def replicate(config: NetworkConfig, settings: SimSettings) -> SimReport:
    """Independent replications pooled into one report.

    Throughput is the mean over replications and its standard error is
    taken across them; delay histograms, blocking counts and occupancy
    counts are pooled.
    """
    runs = [_run_one(config, settings, k) for k in range(settings.replications)]
    tps = np.array([r.throughput for r in runs])
    hist: dict[int, int] = {}
    for r in runs:
        for d, c in r.delay_histogram.items():
            hist[d] = hist.get(d, 0) + c
    occ = tuple(np.mean([r.occupancy_freq[k] for r in runs], axis=0) for k in range(config.n_nodes))
    stderr = float(tps.std(ddof=1) / math.sqrt(len(runs))) if len(runs) > 1 else runs[0].stderr_throughput
    return SimReport(
        throughput=float(tps.mean()),
        delay_histogram=dict(sorted(hist.items())),
        occupancy_freq=occ,
        delivered=sum(r.delivered for r in runs),
        blocked_events=np.sum([r.blocked_events for r in runs], axis=0),
        stderr_throughput=stderr,
        epochs=settings.epochs,
        warmup_epochs=runs[0].warmup_epochs,
        replications=len(runs),
        seed=settings.seed,
        replicate_throughputs=tps.tolist(),
    )


class LineNetworkSimulator(BaseEstimator):
    """Estimator front end: ``fit(config)`` runs the simulation and keeps the report."""

    def __init__(self, epochs=1_000_000, warmup_epochs=None, seed=DEFAULT_SEED, replications=1, debug=False):
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.seed = seed
        self.replications = replications
        self.debug = debug

    def fit(self, config: ConfigLike, y=None):
        self.config_ = check_config(config)
        settings = SimSettings(self.epochs, self.warmup_epochs, self.seed, self.replications, self.debug)
        self.report_ = replicate(self.config_, settings) if self.replications > 1 else simulate(self.config_, settings)
        self.throughput_ = self.report_.throughput
        self.stderr_ = self.report_.stderr_throughput
        return self
