"""Decoupled per-node chains and the arrival-rate / blocking fixed point.

Each intermediate node ``v_i`` is modelled on its own as a birth-death
chain on ``0..m_i``.  The chain is driven by the offered arrival rate
``r_i`` from upstream and by the blocking probability ``pb_{i+1}`` that the
downstream neighbour imposes.  Arrival rates are propagated forward and
blocking probabilities backward until the two vectors stop changing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .config import ConfigLike, NetworkConfig, check_config

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000

# Above this buffer size the weight recurrence is evaluated in log space
# whenever it grows (alpha > beta).
_LOG_SPACE_MIN_M = 64


class ConvergenceError(RuntimeError):
    """The fixed-point iteration did not settle within the iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class FlowConservationError(RuntimeError):
    """A converged solution does not conserve flow along the line."""


@dataclass(frozen=True)
class NodeChainParams:
    """Transition probabilities of one decoupled node chain.

    ``alpha0`` moves the empty node up, ``alpha`` moves a non-empty node up
    and ``beta`` moves it down.
    """

    alpha0: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class ApproxSolution:
    arrival_rates: np.ndarray
    blocking_probs: np.ndarray
    occupancies: tuple[np.ndarray, ...]
    capacity: float
    iterations: int
    converged: bool
    residual: float
    tol: float = DEFAULT_TOL

    def flow_imbalance(self) -> float:
        """Largest deviation of ``r_i (1 - pb_i)`` from the capacity."""
        carried = self.arrival_rates * (1.0 - self.blocking_probs)
        return float(np.max(np.abs(carried - self.capacity)))

    def to_dict(self) -> dict:
        return {
            "r": self.arrival_rates.tolist(),
            "pb": self.blocking_probs.tolist(),
            "capacity": self.capacity,
            "occupancy": [phi.tolist() for phi in self.occupancies],
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "ApproxSolution":
        return cls(
            arrival_rates=np.asarray(data["r"], dtype=float),
            blocking_probs=np.asarray(data["pb"], dtype=float),
            occupancies=tuple(np.asarray(o, dtype=float) for o in data["occupancy"]),
            capacity=float(data["capacity"]),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            residual=float(data.get("residual", 0.0)),
        )


def chain_params(r: float, eps_out: float, pb_next: float) -> NodeChainParams:
    """Transition probabilities for a node fed at rate ``r``.

    A non-empty node keeps its head packet when the outgoing link erases it
    or the next node blocks it, which happens with probability
    ``eps_out + (1 - eps_out) * pb_next``.
    """
    hold = eps_out + (1.0 - eps_out) * pb_next
    return NodeChainParams(
        alpha0=r,
        alpha=r * hold,
        beta=(1.0 - r) * (1.0 - pb_next) * (1.0 - eps_out),
    )


def node_stationary(m: int, params: NodeChainParams) -> np.ndarray:
    """Stationary occupancy distribution of the decoupled chain on ``0..m``.

    Unnormalised weights are ``w_0 = 1`` and
    ``w_k = alpha0 * alpha**(k-1) / beta**k``; when ``beta == 0`` the mass
    sits on the recurrent class of the literal chain instead.
    """
    a0, a, b = params.alpha0, params.alpha, params.beta
    phi = np.zeros(m + 1)
    if a0 <= 0.0:
        phi[0] = 1.0
        return phi
    if b <= 0.0:
        # No departures: the buffer fills, or sticks at 1 if it can never grow.
        phi[m if a > 0.0 else 1] = 1.0
        return phi

    ratio = a / b
    if ratio > 1.0 and m > _LOG_SPACE_MIN_M:
        logw = np.empty(m + 1)
        logw[0] = 0.0
        logw[1:] = math.log(a0 / b) + np.arange(m) * math.log(ratio)
        w = np.exp(logw - logw.max())
    else:
        w = np.empty(m + 1)
        w[0] = 1.0
        w[1] = a0 / b
        for k in range(1, m):
            w[k + 1] = w[k] * ratio
    return w / w.sum()


def blocking_prob(m: int, r: float, eps_out: float, pb_next: float) -> float:
    """Probability that a packet offered to the node is refused.

    The node refuses only when it is full and its own head packet fails to
    leave in the same epoch.
    """
    phi = node_stationary(m, chain_params(r, eps_out, pb_next))
    return (eps_out + (1.0 - eps_out) * pb_next) * phi[m]


def forward_arrival_sweep(config: NetworkConfig, blocking_probs: Sequence[float]) -> np.ndarray:
    """Arrival rates ``r_1..r_h`` implied by a blocking vector.

    ``r_1`` is the raw success rate of the first link; each later rate is
    the chance the previous node is non-empty and its outgoing link
    delivers.
    """
    eps = config.erasures
    pb = np.asarray(blocking_probs, dtype=float)
    r = np.empty(config.hops)
    r[0] = 1.0 - eps[0]
    for i in range(config.n_nodes):
        pb_next = pb[i + 1] if i + 1 < config.n_nodes else 0.0
        phi = node_stationary(config.buffers[i], chain_params(r[i], eps[i + 1], pb_next))
        r[i + 1] = (1.0 - eps[i + 1]) * (1.0 - phi[0])
    return r


def backward_blocking_sweep(config: NetworkConfig, arrival_rates: Sequence[float]) -> np.ndarray:
    eps = config.erasures
    r = np.asarray(arrival_rates, dtype=float)
    pb = np.zeros(config.hops)
    for i in range(config.n_nodes - 1, -1, -1):
        pb[i] = blocking_prob(config.buffers[i], r[i], eps[i + 1], pb[i + 1])
    return pb


def occupancies(config: NetworkConfig, arrival_rates, blocking_probs) -> tuple[np.ndarray, ...]:
    """Per-node occupancy distributions at a given ``(R, P)``."""
    eps = config.erasures
    return tuple(
        node_stationary(config.buffers[i], chain_params(arrival_rates[i], eps[i + 1], blocking_probs[i + 1]))
        for i in range(config.n_nodes)
    )


def _initial_blocking(config: NetworkConfig, init, random_state) -> np.ndarray:
    h = config.hops
    if isinstance(init, str):
        if init == "zeros":
            pb = np.zeros(h)
        elif init == "ones":
            pb = np.ones(h)
        elif init == "random":
            pb = np.random.default_rng(random_state).uniform(size=h)
        else:
            raise ValueError(f"unknown init {init!r}; expected 'zeros', 'ones' or 'random'")
    else:
        pb = np.array(init, dtype=float)
        if pb.shape != (h,) or np.any((pb < 0) | (pb > 1)):
            raise ValueError(f"init must be {h} probabilities")
    pb[-1] = 0.0
    return pb


def solve(
    config: NetworkConfig,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init="zeros",
    random_state=None,
) -> ApproxSolution:
    """Iterate forward and backward sweeps to the unique ``(R, P)`` fixed point.

    Parameters
    ----------
    config : NetworkConfig
    tol : float
        Stop once one round changes ``(R, P)`` by less than this in max-norm
        and the geometric extrapolation of the remaining error is below it too.
    max_iter : int
        Maximum number of sweep rounds.
    init : {'zeros', 'ones', 'random'} or array-like
        Starting blocking vector; the last entry is always forced to 0.
    random_state : int or Generator, optional
        Seed for ``init='random'``.

    Raises
    ------
    ConvergenceError
        If the rounds have not settled after ``max_iter`` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pb = _initial_blocking(config, init, random_state)
    r = forward_arrival_sweep(config, pb)
    residual = previous = math.inf
    it = 0
    while it < max_iter:
        it += 1
        pb_new = backward_blocking_sweep(config, r)
        r_new = forward_arrival_sweep(config, pb_new)
        residual = float(max(np.max(np.abs(r_new - r)), np.max(np.abs(pb_new - pb))))
        r, pb = r_new, pb_new
        # Slow contractions leave the iterate far from the fixed point even when
        # one round barely moves it; require the extrapolated error below tol too.
        rate = residual / previous if previous > 0 else 0.0
        if residual == 0.0 or (residual < tol and rate < 1.0 and residual * rate / (1.0 - rate) < tol):
            break
        previous = residual
    else:
        raise ConvergenceError(
            f"fixed point not reached after {max_iter} iterations (residual {residual:.3e})",
            residual=residual,
            iterations=it,
        )

    if any(e == 1.0 for e in config.erasures):
        cap = 0.0
    else:
        cap = float(r[-1])
    return ApproxSolution(
        arrival_rates=r,
        blocking_probs=pb,
        occupancies=occupancies(config, r, pb),
        capacity=cap,
        iterations=it,
        converged=True,
        residual=residual,
        tol=tol,
    )


def capacity(solution: ApproxSolution) -> float:
    """Throughput estimate of a converged solution, after checking flow conservation."""
    imbalance = solution.flow_imbalance()
    if imbalance > 10 * solution.tol:
        raise FlowConservationError(
            f"flow conservation violated by {imbalance:.3e} (tolerance {10 * solution.tol:.1e})"
        )
    return solution.capacity


class FixedPointSolver(BaseEstimator):
    """Estimator wrapper around :func:`solve`.

    ``fit(config)`` stores the converged solution; ``predict(configs)``
    solves each network with the same settings and returns capacities.

    Examples
    --------
    >>> from linenet import FixedPointSolver
    >>> est = FixedPointSolver().fit({"hops": 2, "erasures": [0.5, 0.5], "buffers": [1]})
    >>> round(est.capacity_, 6)
    0.333333
    """

    def __init__(self, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, init="zeros", random_state=None):
        self.tol = tol
        self.max_iter = max_iter
        self.init = init
        self.random_state = random_state

    def _solve(self, config: ConfigLike) -> ApproxSolution:
        return solve(check_config(config), self.tol, self.max_iter, self.init, self.random_state)

    def fit(self, config: ConfigLike, y=None):
        self.config_ = check_config(config)
        self.solution_ = self._solve(self.config_)
        self.arrival_rates_ = self.solution_.arrival_rates
        self.blocking_probs_ = self.solution_.blocking_probs
        self.occupancies_ = self.solution_.occupancies
        self.capacity_ = capacity(self.solution_)
        self.n_iter_ = self.solution_.iterations
        return self

    def predict(self, configs) -> np.ndarray:
        if isinstance(configs, (NetworkConfig, dict)):
            configs = [configs]
        return np.array([capacity(self._solve(c)) for c in configs])
