"""Exact joint Markov chain over all buffer states.

States are indexed mixed-radix over digits ``n_i in 0..m_i`` with node 1
as the most significant digit, so for ``m = (1, 2)`` the order is
``(0,0), (0,1), (0,2), (1,0), ...``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .config import ConfigLike, NetworkConfig, check_config, state_count

DEFAULT_MAX_STATES = 2**20
DENSE_SOLVE_MAX_STATES = 2000

JointState = tuple[int, ...]


class StateSpaceTooLarge(ValueError):
    def __init__(self, n_states: int, cap: int):
        super().__init__(f"joint chain has {n_states} states, above the cap of {cap}")
        self.n_states = n_states
        self.cap = cap


class StationaryNotConverged(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"power iteration stopped at residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class ExactChainResult:
    stationary: np.ndarray
    throughput: float
    marginals: tuple[np.ndarray, ...]

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput,
            "marginals": [m.tolist() for m in self.marginals],
            "stationary": self.stationary.tolist(),
        }


def _sigma(x):
    return (np.asarray(x) > 0).astype(np.int64)


def transfer_vector(state: Sequence[int], pattern: Sequence[int], config: NetworkConfig) -> tuple[int, ...]:
    """Which links move a packet this epoch, resolved from the destination back.

    ``Y_i = 1`` iff the sender of link ``i`` is non-empty, the link delivers
    (``X_i = 1``) and the receiver has room once its own departure
    ``Y_{i+1}`` is accounted for.  Works elementwise on arrays too.
    """
    h = config.hops
    m = config.buffers
    Y = [0] * (h + 2)  # 1-based, Y[h + 1] stays 0
    Y[h] = _sigma(state[h - 2]) * pattern[h - 1]
    for i in range(h - 1, 0, -1):
        room = _sigma(m[i - 1] - np.asarray(state[i - 1]) + Y[i + 1])
        sender = _sigma(state[i - 2]) if i > 1 else 1
        Y[i] = sender * pattern[i - 1] * room
    out = Y[1 : h + 1]
    if all(np.ndim(v) == 0 for v in out):
        return tuple(int(v) for v in out)
    return tuple(out)


def next_state(state: Sequence[int], transfer: Sequence[int], config: NetworkConfig | None = None) -> JointState:
    """Apply one epoch's transfers: ``n_i + Y_i - Y_{i+1}``."""
    new = tuple(int(n) + int(transfer[i]) - int(transfer[i + 1]) for i, n in enumerate(state))
    if config is not None:
        for n, m in zip(new, config.buffers):
            if not 0 <= n <= m:
                raise AssertionError(f"transfer {tuple(transfer)} drives state {tuple(state)} out of bounds")
    elif any(n < 0 for n in new):
        raise AssertionError(f"transfer {tuple(transfer)} drives state {tuple(state)} negative")
    return new


def state_index(state: Sequence[int], config: NetworkConfig) -> int:
    idx = 0
    for n, m in zip(state, config.buffers):
        idx = idx * (m + 1) + int(n)
    return idx


def index_state(index: int, config: NetworkConfig) -> JointState:
    digits = []
    for m in reversed(config.buffers):
        index, d = divmod(index, m + 1)
        digits.append(d)
    return tuple(reversed(digits))


def all_states(config: NetworkConfig) -> np.ndarray:
    """Array of shape ``(state_count, h - 1)`` listing states in index order."""
    grids = np.meshgrid(*[np.arange(m + 1) for m in config.buffers], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def build_transition_matrix(config: NetworkConfig, max_states: int = DEFAULT_MAX_STATES) -> sp.csr_matrix:
    """Sparse row-stochastic transition matrix of the joint chain.

    Every one of the ``2**h`` erasure patterns is applied to all states at
    once and its probability accumulated on the resulting transition.
    """
    n_states = state_count(config)
    if n_states > max_states:
        raise StateSpaceTooLarge(n_states, max_states)
    h = config.hops
    states = all_states(config)
    cols_state = [states[:, k] for k in range(h - 1)]
    radix = np.array([math.prod(m + 1 for m in config.buffers[k + 1 :]) for k in range(h - 1)])
    src = np.arange(n_states)

    rows, cols, vals = [], [], []
    eps = np.array(config.erasures)
    for pattern in itertools.product((0, 1), repeat=h):
        p = float(np.prod(np.where(np.array(pattern) == 1, 1.0 - eps, eps)))
        if p == 0.0:
            continue
        Y = transfer_vector(cols_state, pattern, config)
        Y = [np.broadcast_to(np.asarray(y), (n_states,)) for y in Y]
        nxt = states + np.stack([Y[k] - Y[k + 1] for k in range(h - 1)], axis=1)
        rows.append(src)
        cols.append(nxt @ radix)
        vals.append(np.full(n_states, p))
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_states, n_states),
    ).tocsr()
    P.sum_duplicates()
    return P


def stationary(matrix, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution ``pi = pi P`` of a row-stochastic matrix.

    Small chains use a dense least-squares solve of the balance equations
    plus normalisation.  Larger chains use power iteration on the lazy
    chain ``(I + P) / 2``, which has the same stationary vector and is
    aperiodic even when ``P`` is not.
    """
    n = matrix.shape[0]
    if n <= DENSE_SOLVE_MAX_STATES:
        P = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
        A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    PT = sp.csr_matrix(matrix).T.tocsr()
    pi = np.full(n, 1.0 / n)
    residual = math.inf
    for it in range(1, max_iter + 1):
        stepped = PT @ pi
        residual = float(np.abs(stepped - pi).sum())
        if residual <= tol:
            return stepped / stepped.sum()
        pi = 0.5 * (pi + stepped)
    raise StationaryNotConverged(residual, max_iter)


def marginals(config: NetworkConfig, pi: np.ndarray) -> tuple[np.ndarray, ...]:
    shaped = pi.reshape([m + 1 for m in config.buffers])
    out = []
    for k in range(config.n_nodes):
        axes = tuple(a for a in range(config.n_nodes) if a != k)
        out.append(shaped.sum(axis=axes) if axes else shaped.copy())
    return tuple(out)


def exact_throughput(config: NetworkConfig, pi: np.ndarray) -> float:
    """Rate at which the destination receives packets: last relay busy and last link delivers."""
    last = marginals(config, pi)[-1]
    return float((1.0 - last[0]) * (1.0 - config.erasures[-1]))


def solve_exact(config: NetworkConfig, max_states: int = DEFAULT_MAX_STATES) -> ExactChainResult:
    P = build_transition_matrix(config, max_states)
    pi = stationary(P)
    return ExactChainResult(stationary=pi, throughput=exact_throughput(config, pi), marginals=marginals(config, pi))


def write_coo(matrix, stream: TextIO) -> None:
    """Write ``row col prob`` lines for every non-zero entry."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        stream.write(f"{r} {c} {v:.17g}\n")


class ExactChainSolver(BaseEstimator):
    """Estimator that solves the full joint chain for small networks."""

    def __init__(self, max_states=DEFAULT_MAX_STATES):
        self.max_states = max_states

    def fit(self, config: ConfigLike, y=None):
        self.config_ = check_config(config)
        self.transition_matrix_ = build_transition_matrix(self.config_, self.max_states)
        self.stationary_ = stationary(self.transition_matrix_)
        self.marginals_ = marginals(self.config_, self.stationary_)
        self.throughput_ = exact_throughput(self.config_, self.stationary_)
        return self

    @property
    def result_(self) -> ExactChainResult:
        return ExactChainResult(self.stationary_, self.throughput_, self.marginals_)
