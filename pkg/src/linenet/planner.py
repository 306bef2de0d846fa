"""Congestion classes of relays and greedy buffer allocation.

A relay whose offered input rate exceeds what its outgoing link can carry
away is congested (type 1) and sits mostly full; one fed more slowly than
it can drain is starved (type 3) and sits mostly empty; a balanced relay
(type 2) spreads its occupancy out.  Only balanced relays turn extra
memory into throughput.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator

from .approx import DEFAULT_TOL, ApproxSolution, solve
from .config import ConfigLike, NetworkConfig, check_config
from .delay import DelayUndefined, mean_delay

DEFAULT_DELTA = 0.02


class NodeType(enum.IntEnum):
    CONGESTED = 1
    BALANCED = 2
    STARVED = 3

    def __str__(self) -> str:
        return f"Type{int(self)}"


@dataclass(frozen=True)
class NodeClass:
    node: int
    type: NodeType
    in_rate: float
    out_rate: float
    mean_fill: float

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "type": int(self.type),
            "in_rate": self.in_rate,
            "out_rate": self.out_rate,
            "mean_fill": self.mean_fill,
        }


@dataclass
class AllocationPlan:
    base_buffers: tuple[int, ...]
    increments: list[int]
    capacity: float
    mean_delay: float
    trajectory: list[dict] = field(default_factory=list)

    @property
    def buffers(self) -> tuple[int, ...]:
        return tuple(m + d for m, d in zip(self.base_buffers, self.increments))

    def to_dict(self) -> dict:
        return {
            "base_buffers": list(self.base_buffers),
            "increments": list(self.increments),
            "buffers": list(self.buffers),
            "capacity": self.capacity,
            "mean_delay": self.mean_delay,
            "trajectory": self.trajectory,
        }

    def to_csv(self) -> str:
        return _rows_to_csv(self.trajectory, ["step", "node", "capacity", "mean_delay"])


def _rows_to_csv(rows: Iterable[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _safe_mean_delay(config: NetworkConfig, solution: ApproxSolution) -> float:
    try:
        return mean_delay(config, solution)
    except DelayUndefined:
        return float("inf")


def classify(config: NetworkConfig, solution: ApproxSolution, delta: float = DEFAULT_DELTA) -> list[NodeClass]:
    """Compare each relay's offered rate with the rate its outgoing link can drain."""
    out = []
    for i in range(config.n_nodes):
        in_rate = float(solution.arrival_rates[i])
        out_rate = float((1.0 - config.erasures[i + 1]) * (1.0 - solution.blocking_probs[i + 1]))
        if in_rate > out_rate + delta:
            kind = NodeType.CONGESTED
        elif in_rate < out_rate - delta:
            kind = NodeType.STARVED
        else:
            kind = NodeType.BALANCED
        phi = solution.occupancies[i]
        fill = float(np.arange(len(phi)) @ phi) / config.buffers[i]
        out.append(NodeClass(i + 1, kind, in_rate, out_rate, fill))
    return out


def allocate(config: NetworkConfig, budget: int, delta: float = DEFAULT_DELTA, tol: float = DEFAULT_TOL) -> AllocationPlan:
    """Hand out ``budget`` extra packet slots one at a time to the relay with the largest capacity gain.

    Gains within ``10 * tol`` of the best count as ties and go to the
    lowest-indexed relay.  ``delta`` is accepted for interface symmetry
    with :func:`classify`; the greedy step itself only uses capacities.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    current = config
    sol = solve(current, tol)
    increments = [0] * config.n_nodes
    trajectory = [{"step": 0, "node": None, "capacity": sol.capacity, "mean_delay": _safe_mean_delay(current, sol)}]
    for step in range(1, budget + 1):
        candidates = []
        for node in range(1, config.n_nodes + 1):
            trial = current.with_buffer(node, current.buffers[node - 1] + 1)
            s = solve(trial, tol)
            candidates.append((s.capacity - sol.capacity, node, trial, s))
        best_gain = max(c[0] for c in candidates)
        gain, node, current, sol = next(c for c in candidates if c[0] >= best_gain - 10 * tol)
        increments[node - 1] += 1
        trajectory.append(
            {"step": step, "node": node, "capacity": sol.capacity, "mean_delay": _safe_mean_delay(current, sol)}
        )
    return AllocationPlan(
        base_buffers=config.buffers,
        increments=increments,
        capacity=sol.capacity,
        mean_delay=trajectory[-1]["mean_delay"],
        trajectory=trajectory,
    )


def tradeoff_sweep(config: NetworkConfig, node: int, m_range: Iterable[int], tol: float = DEFAULT_TOL) -> list[dict]:
    """Capacity and mean delay as one relay's buffer takes each value in ``m_range``."""
    values = sorted(set(int(m) for m in m_range))
    if not values:
        raise ValueError("empty buffer range")
    if not 1 <= node <= config.n_nodes:
        raise ValueError(f"node must lie in 1..{config.n_nodes}")
    rows = []
    for m in values:
        c = config.with_buffer(node, m)
        s = solve(c, tol)
        rows.append({"m": m, "capacity": s.capacity, "mean_delay": _safe_mean_delay(c, s)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    return _rows_to_csv(rows, ["m", "capacity", "mean_delay"])


class BufferPlanner(BaseEstimator):
    """Classify relays of a network; allocate and sweep buffers against the fitted network."""

    def __init__(self, delta=DEFAULT_DELTA, tol=DEFAULT_TOL):
        self.delta = delta
        self.tol = tol

    def fit(self, config: ConfigLike, y=None):
        self.config_ = check_config(config)
        self.solution_ = solve(self.config_, self.tol)
        self.classes_ = classify(self.config_, self.solution_, self.delta)
        self.types_ = [c.type for c in self.classes_]
        return self

    def allocate(self, budget: int) -> AllocationPlan:
        return allocate(self.config_, budget, self.delta, self.tol)

    def sweep(self, node: int, m_range) -> list[dict]:
        return tradeoff_sweep(self.config_, node, m_range, self.tol)

    def to_json(self, **kwargs) -> str:
        return json.dumps([c.to_dict() for c in self.classes_], **kwargs)
