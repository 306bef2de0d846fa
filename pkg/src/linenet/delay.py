"""End-to-end packet delay from per-hop geometric service times.

A packet's delay is built hop by hop: a geometric wait to get into the
first relay, then at every relay a sum of ``k + 1`` geometric service
times where ``k`` is the number of packets queued ahead of it.  Hops are
treated as independent, so the total is the convolution of the per-hop
distributions.

Delays are counted inclusively: a packet first attempted in epoch ``l``
and received in epoch ``l + h - 1`` has delay ``h``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .approx import DEFAULT_MAX_ITER, DEFAULT_TOL, ApproxSolution, solve
from .config import ConfigLike, NetworkConfig, check_config

DEFAULT_TAIL_BUDGET = 1e-9
OCCUPANCY_MODES = ("arrival", "stationary")


class DelayUndefined(ValueError):
    """Raised when some hop never delivers, so the delay has no distribution."""


@dataclass(frozen=True)
class DiscretePMF:
    """Probability mass function on ``min_support, min_support + 1, ...``.

    ``tail_mass`` is the probability cut off beyond the last stored value.
    Moments and quantiles are taken over the stored masses, renormalised.
    """

    min_support: int
    masses: np.ndarray
    tail_mass: float = 0.0

    @classmethod
    def point(cls, value: int) -> "DiscretePMF":
        return cls(int(value), np.array([1.0]), 0.0)

    @property
    def support(self) -> np.ndarray:
        return self.min_support + np.arange(len(self.masses))

    @property
    def max_support(self) -> int:
        return self.min_support + len(self.masses) - 1

    def total(self) -> float:
        return float(self.masses.sum() + self.tail_mass)

    def pmf(self, t: int) -> float:
        k = t - self.min_support
        return float(self.masses[k]) if 0 <= k < len(self.masses) else 0.0

    def mean(self) -> float:
        return float(self.support @ self.masses / self.masses.sum())

    def var(self) -> float:
        mu = self.mean()
        return float(((self.support - mu) ** 2) @ self.masses / self.masses.sum())

    def quantile(self, q: float) -> int:
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        cdf = np.cumsum(self.masses) / self.masses.sum()
        k = int(np.searchsorted(cdf, q - 1e-15, side="left"))
        return self.min_support + min(k, len(self.masses) - 1)

    def summary(self) -> dict:
        return {
            "mean": self.mean(),
            "variance": self.var(),
            "p50": self.quantile(0.50),
            "p90": self.quantile(0.90),
            "p99": self.quantile(0.99),
            "tail_mass": self.tail_mass,
        }

    def to_dict(self) -> dict:
        return {
            "min_support": self.min_support,
            "masses": self.masses.tolist(),
            "tail_mass": self.tail_mass,
            "summary": self.summary(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "DiscretePMF":
        return cls(int(data["min_support"]), np.asarray(data["masses"], dtype=float), float(data["tail_mass"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["delay_epochs", "probability"])
        for t, p in zip(self.support, self.masses):
            writer.writerow([int(t), repr(float(p))])
        return buf.getvalue()


def geometric(success_prob: float, tail_budget: float = DEFAULT_TAIL_BUDGET) -> DiscretePMF:
    """Number of attempts until the first success, ``P(k) = p (1 - p)**(k - 1)``."""
    return k_fold_geometric(1, success_prob, tail_budget)


def k_fold_geometric(k: int, success_prob: float, tail_budget: float = DEFAULT_TAIL_BUDGET) -> DiscretePMF:
    """Sum of ``k`` independent geometric attempt counts (negative binomial).

    ``P(t) = C(t - 1, k - 1) p**k (1 - p)**(t - k)`` for ``t >= k``, cut off
    at the first length whose remaining tail drops below ``tail_budget``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if tail_budget <= 0:
        raise ValueError("tail_budget must be positive")
    p = float(success_prob)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"success probability out of range: {p!r}")
    if p == 0.0:
        raise DelayUndefined("infinite expected delay: success probability is 0")
    if p == 1.0:
        return DiscretePMF.point(k)

    # failures before the k-th success ~ nbinom(k, p); keep 0..n-1 with P(F >= n) < budget
    dist = stats.nbinom(k, p)
    n = max(int(dist.isf(tail_budget)), 0)
    while dist.sf(n - 1) >= tail_budget:
        n += 1
    while n > 1 and dist.sf(n - 2) < tail_budget:
        n -= 1
    masses = dist.pmf(np.arange(n))
    # a tail sitting exactly on the budget can pass the sf test by rounding alone
    while 1.0 - masses.sum() >= tail_budget:
        n += 1
        masses = dist.pmf(np.arange(n))
    return DiscretePMF(k, masses, float(max(1.0 - masses.sum(), 0.0)))


def convolve(a: DiscretePMF, b: DiscretePMF) -> DiscretePMF:
    """Distribution of the sum of independent draws from ``a`` and ``b``."""
    return DiscretePMF(
        a.min_support + b.min_support,
        np.convolve(a.masses, b.masses),
        a.tail_mass + b.tail_mass - a.tail_mass * b.tail_mass,
    )


def mixture(weights: Sequence[float], pmfs: Sequence[DiscretePMF]) -> DiscretePMF:
    lo = min(p.min_support for p in pmfs)
    hi = max(p.max_support for p in pmfs)
    masses = np.zeros(hi - lo + 1)
    tail = 0.0
    for w, p in zip(weights, pmfs):
        if w == 0.0:
            continue
        start = p.min_support - lo
        masses[start : start + len(p.masses)] += w * p.masses
        tail += w * p.tail_mass
    return DiscretePMF(lo, masses, tail)


def arrival_seen_occupancy(config: NetworkConfig, solution: ApproxSolution, node: int) -> np.ndarray:
    """Occupancy of relay ``node`` (1-based) found by a packet delivered to it.

    The node first releases its own head packet if it can, so a packet
    arriving at a node holding ``k`` packets sees ``k - 1`` with the
    node's departure probability and ``k`` otherwise.
    """
    i = node - 1
    phi = solution.occupancies[i]
    pb_next = solution.blocking_probs[i + 1]
    eps_out = config.erasures[i + 1]
    hold = eps_out + (1.0 - eps_out) * pb_next
    seen = hold * phi
    seen[0] = phi[0]
    seen[:-1] += (1.0 - hold) * phi[1:]
    return seen


def occupancy_seen(config: NetworkConfig, solution: ApproxSolution, node: int, mode: str = "arrival") -> np.ndarray:
    if mode == "arrival":
        return arrival_seen_occupancy(config, solution, node)
    if mode == "stationary":
        return solution.occupancies[node - 1]
    raise ValueError(f"unknown occupancy mode {mode!r}; expected one of {OCCUPANCY_MODES}")


def effective_erasures(config: NetworkConfig, solution: ApproxSolution, mode: str = "arrival") -> np.ndarray:
    """Link erasures inflated by the chance the receiving relay is full.

    The last link is unchanged since the destination never blocks.
    """
    eps = np.array(config.erasures, dtype=float)
    out = eps.copy()
    for node in range(1, config.hops):
        theta = occupancy_seen(config, solution, node, mode)
        out[node - 1] = eps[node - 1] + theta[-1] * (1.0 - eps[node - 1])
    return out


def arrival_occupancy(node_pmf: Sequence[float]) -> np.ndarray:
    """Queue length ahead of an accepted packet; the full state is excluded."""
    theta = np.asarray(node_pmf, dtype=float)
    full = theta[-1]
    if full >= 1.0:
        raise DelayUndefined("node permanently full; delay undefined")
    pi = theta / (1.0 - full)
    pi[-1] = 0.0
    return pi


def node_delay(
    node: int,
    config: NetworkConfig,
    solution: ApproxSolution,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
    mode: str = "arrival",
    eps_eff: np.ndarray | None = None,
) -> DiscretePMF:
    """Time a packet spends at relay ``node`` (1-based) and crossing its outgoing link."""
    if not 1 <= node <= config.n_nodes:
        raise ValueError(f"node must lie in 1..{config.n_nodes}")
    if eps_eff is None:
        eps_eff = effective_erasures(config, solution, mode)
    success = 1.0 - eps_eff[node]
    if success <= 0.0:
        raise DelayUndefined("zero throughput; delay undefined")
    pi = arrival_occupancy(occupancy_seen(config, solution, node, mode))
    queued = [k for k in range(len(pi) - 1) if pi[k] > 0.0]
    return mixture(
        [pi[k] for k in queued],
        [k_fold_geometric(k + 1, success, tail_budget) for k in queued],
    )


def total_delay(
    config: NetworkConfig,
    solution: ApproxSolution,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
    mode: str = "arrival",
) -> DiscretePMF:
    """End-to-end delay distribution: source wait convolved with every relay's delay."""
    eps_eff = effective_erasures(config, solution, mode)
    if np.any(eps_eff >= 1.0):
        raise DelayUndefined("zero throughput; delay undefined")
    out = geometric(1.0 - eps_eff[0], tail_budget)
    for node in range(1, config.hops):
        out = convolve(out, node_delay(node, config, solution, tail_budget, mode, eps_eff))
    return out


class DelayEstimator(BaseEstimator):
    """Fit the fixed point for a network and derive its delay distribution.

    Parameters
    ----------
    tail_budget : float
        Probability allowed to be truncated from each elementary PMF.
    occupancy : {'arrival', 'stationary'}
        Occupancy a delivered packet is assumed to find at a relay: after
        the relay's own same-epoch departure (default), or the
        time-stationary occupancy.
    tol, max_iter :
        Passed to the fixed-point solver.
    """

    def __init__(self, tail_budget=DEFAULT_TAIL_BUDGET, occupancy="arrival", tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        self.tail_budget = tail_budget
        self.occupancy = occupancy
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, config: ConfigLike, y=None):
        self.config_ = check_config(config)
        self.solution_ = solve(self.config_, self.tol, self.max_iter)
        self.effective_erasures_ = effective_erasures(self.config_, self.solution_, self.occupancy)
        self.pmf_ = total_delay(self.config_, self.solution_, self.tail_budget, self.occupancy)
        self.node_delays_ = tuple(
            node_delay(j, self.config_, self.solution_, self.tail_budget, self.occupancy, self.effective_erasures_)
            for j in range(1, self.config_.hops)
        )
        self.mean_ = self.pmf_.mean()
        self.var_ = self.pmf_.var()
        return self

    def quantile(self, q: float) -> int:
        return self.pmf_.quantile(q)


def mean_delay(config: NetworkConfig, solution: ApproxSolution | None = None, mode: str = "arrival") -> float:
    """Mean end-to-end delay straight from the mixture means (no convolution)."""
    if solution is None:
        solution = solve(config)
    eps_eff = effective_erasures(config, solution, mode)
    if np.any(eps_eff >= 1.0):
        raise DelayUndefined("zero throughput; delay undefined")
    total = 1.0 / (1.0 - eps_eff[0])
    for node in range(1, config.hops):
        pi = arrival_occupancy(occupancy_seen(config, solution, node, mode))
        total += float(pi @ (np.arange(len(pi)) + 1.0)) / (1.0 - eps_eff[node])
    return total


__all__ = [
    "DiscretePMF",
    "DelayEstimator",
    "DelayUndefined",
    "arrival_occupancy",
    "arrival_seen_occupancy",
    "convolve",
    "effective_erasures",
    "geometric",
    "k_fold_geometric",
    "mean_delay",
    "node_delay",
    "total_delay",
]
