"""Multi-device scheduling environment over quantized block-fading channels.

A system instance couples N linear dynamic processes (each monitored remotely,
with a per-device staleness cost equal to the trace of the propagated
estimation error covariance), M shared channels with level-dependent packet
drop rates, and the induced controlled Markov chain over
``(aoi vector, channel matrix)`` states.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

COST_CAP = 1e12  # overflow guard for unstable dynamics at large staleness

PSD_TOL = 1e-9
FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITER = 10_000


class ModelError(Exception):
    """Base class for environment construction/usage errors."""


class NonConvergent(ModelError):
    """Covariance fixed-point iteration failed to settle."""


class CapExceeded(ModelError):
    """Requested staleness beyond the tabulated range."""


class InvalidAction(ModelError):
    """Assignment vector violates the one-channel-one-device constraint."""


class TooLarge(ModelError):
    """Requested enumeration exceeds the supported budget."""


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def _check_symmetric_psd(m: np.ndarray, name: str, tol: float = PSD_TOL) -> None:
    if not np.allclose(m, m.T, atol=1e-9):
        raise ValueError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eig.min() < -tol:
        raise ValueError(f"{name} must be PSD (min eigenvalue {eig.min():.3e})")


def riccati_posterior_map(p: np.ndarray, a: np.ndarray, c: np.ndarray,
                          w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One measurement-update sweep of the posterior error covariance."""
    prior = a @ p @ a.T + w
    s = c @ prior @ c.T + v
    gain = prior @ c.T @ np.linalg.inv(s)
    post = prior - gain @ c @ prior
    return 0.5 * (post + post.T)


def solve_steady_covariance(a, c, w, v, *, tol: float = FIXED_POINT_TOL,
                            max_iter: int = FIXED_POINT_MAX_ITER) -> np.ndarray:
    """Fixed point of the posterior-covariance recursion, from P = 0.

    Raises NonConvergent if the iteration budget is exhausted while the
    residual is still above 1e-9.
    """
    a, c, w, v = map(_as_matrix, (a, c, w, v))
    p = np.zeros_like(w)
    residual = np.inf
    for _ in range(max_iter):
        nxt = riccati_posterior_map(p, a, c, w, v)
        residual = float(np.max(np.abs(nxt - p)))
        p = nxt
        if residual < tol:
            return p
    if residual > 1e-9:
        raise NonConvergent(f"posterior covariance residual {residual:.3e} "
                            f"after {max_iter} iterations")
    return p


@dataclass(frozen=True)
class ProcessModel:
    """One monitored linear process and its steady local error covariance."""

    A: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    P_bar: np.ndarray
    spectral_radius: float

    @classmethod
    def build(cls, a, c, w, v) -> "ProcessModel":
        a, c, w, v = map(_as_matrix, (a, c, w, v))
        _check_symmetric_psd(w, "W")
        _check_symmetric_psd(v, "V")
        if np.linalg.eigvalsh(0.5 * (v + v.T)).min() <= 0:
            raise ValueError("V must be positive definite")
        p_bar = solve_steady_covariance(a, c, w, v)
        rho = float(np.max(np.abs(np.linalg.eigvals(a))))
        return cls(A=a, C=c, W=w, V=v, P_bar=p_bar, spectral_radius=rho)

    def __post_init__(self):
        _check_symmetric_psd(self.P_bar, "P_bar")
        res = np.max(np.abs(riccati_posterior_map(
            self.P_bar, self.A, self.C, self.W, self.V) - self.P_bar))
        if res > 1e-9:
            raise ValueError(f"P_bar is not a Riccati fixed point (residual {res:.3e})")

    def propagated_trace(self, delta: int) -> float:
        """Tr of the error covariance after `delta` propagation steps."""
        p = self.P_bar
        for _ in range(delta):
            p = self.A @ p @ self.A.T + self.W
            if np.trace(p) > COST_CAP:
                return COST_CAP
        return min(float(np.trace(p)), COST_CAP)


@dataclass(frozen=True)
class CostTable:
    """Tabulated per-device staleness costs c_n(delta), delta = 1..delta_cap."""

    values: np.ndarray          # shape [N, delta_cap]
    delta_cap: int
    convex_onset: np.ndarray    # shape [N]; -1 means no onset in window

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise ValueError("costs must be strictly positive")
        diffs = np.diff(self.values, axis=1)
        if np.any(diffs < -1e-9 * np.maximum(self.values[:, :-1], 1.0)):
            raise ValueError("costs must be non-decreasing in staleness")

    @classmethod
    def tabulate(cls, processes: list[ProcessModel], delta_cap: int) -> "CostTable":
        vals = np.empty((len(processes), delta_cap))
        for n, proc in enumerate(processes):
            p = proc.P_bar
            for d in range(delta_cap):
                p = proc.A @ p @ proc.A.T + proc.W
                tr = float(np.trace(p))
                vals[n, d] = min(tr, COST_CAP)
                if tr > COST_CAP:
                    # clamp the rest; keeps the table monotone and finite
                    vals[n, d:] = COST_CAP
                    break
        onsets = np.array([_convex_onset(row) for row in vals], dtype=int)
        return cls(values=vals, delta_cap=delta_cap, convex_onset=onsets)


def _convex_onset(costs: np.ndarray, rel_tol: float = 1e-6) -> int:
    """Smallest staleness d0 (1-based) with non-negative second differences
    from d0 through the end of the table, or -1 if none exists."""
    n = len(costs)
    if n < 3:
        return 1
    second = costs[:-2] + costs[2:] - 2.0 * costs[1:-1]
    ok = second >= -rel_tol * np.maximum(costs[:-2], 1e-300)
    # find the last violation; onset is just after it
    bad = np.nonzero(~ok)[0]
    if len(bad) == 0:
        return 1
    onset = int(bad[-1]) + 2  # 1-based delta of the first clean second-diff
    if onset > n - 2:
        return -1
    return onset


@dataclass(frozen=True)
class ChannelModel:
    """Quantized fading: level distribution q and drop rate per level."""

    levels: int
    drop_rate: np.ndarray   # shape [N, M, levels], strictly increasing in level
    level_dist: np.ndarray  # shape [N, M, levels], rows sum to 1
    rayleigh_scale: np.ndarray  # shape [N, M]
    colocated: bool = False

    def __post_init__(self):
        q = self.level_dist
        if np.any(q < 0):
            raise ValueError("level distribution must be non-negative")
        if np.max(np.abs(q.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("level distribution rows must sum to 1")
        if self.levels > 1 and np.any(np.diff(self.drop_rate, axis=2) <= 0):
            raise ValueError("drop rate must be strictly increasing in level")
        if np.any((self.drop_rate < 0) | (self.drop_rate > 1)):
            raise ValueError("drop rates must be probabilities")
        if self.colocated:
            if not (np.allclose(self.drop_rate, self.drop_rate[:1]) and
                    np.allclose(self.level_dist, self.level_dist[:1])):
                raise ValueError("colocated devices require identical channel rows")

    def drop_prob(self, device: int, channel: int, level: int) -> float:
        return float(self.drop_rate[device, channel, level - 1])


@dataclass(frozen=True)
class SchedState:
    """Joint state: per-device staleness and the channel level matrix."""

    aoi: np.ndarray       # shape [N], ints >= 1
    channels: np.ndarray  # shape [N, M], ints in [1, levels]

    def __post_init__(self):
        if np.any(self.aoi < 1):
            raise ValueError("staleness must be >= 1")

    def key(self) -> tuple:
        return (tuple(int(x) for x in self.aoi),
                tuple(int(x) for x in self.channels.ravel()))


@dataclass(frozen=True)
class SchedAction:
    """Assignment vector: assign[n] = channel index in 1..M, or 0 for idle."""

    assign: np.ndarray  # shape [N]

    def __post_init__(self):
        validate_assignment(self.assign, n_channels=int(self.assign.max(initial=0)))


def validate_assignment(assign: np.ndarray, n_channels: int) -> None:
    assign = np.asarray(assign)
    used = assign[assign > 0]
    if len(np.unique(used)) != len(used):
        raise InvalidAction("a channel is assigned to more than one device")
    for m in range(1, n_channels + 1):
        if np.count_nonzero(assign == m) != 1:
            raise InvalidAction(f"channel {m} must be assigned exactly once")


@dataclass(frozen=True)
class SystemModel:
    """Immutable full instance; safe for concurrent read access."""

    processes: list[ProcessModel]
    costs: CostTable
    channels: ChannelModel
    n_channels: int
    gamma: float
    _chan_cdf: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_channels >= self.n_devices:
            raise ValueError("need fewer channels than devices")
        if self.costs.values.shape[0] != self.n_devices:
            raise ValueError("cost table does not cover all devices")
        object.__setattr__(self, "_chan_cdf",
                           np.cumsum(self.channels.level_dist, axis=2))

    @property
    def n_devices(self) -> int:
        return len(self.processes)

    @property
    def delta_cap(self) -> int:
        return self.costs.delta_cap

    @property
    def gbar(self) -> int:
        return self.channels.levels

    def cost_of(self, device: int, delta: int) -> float:
        if not 1 <= delta <= self.delta_cap:
            raise CapExceeded(f"delta={delta} outside [1, {self.delta_cap}]")
        return float(self.costs.values[device, delta - 1])

    def state_cost(self, state: SchedState) -> float:
        return float(self.costs.values[np.arange(self.n_devices),
                                       state.aoi - 1].sum())

    def sample_channel_matrix(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh i.i.d. level matrix; colocated instances share rows."""
        n, m = self.n_devices, self.n_channels
        if self.channels.colocated:
            u = rng.random((1, m, 1))
            row = 1 + (u > self._chan_cdf[:1]).sum(axis=2)
            return np.repeat(row, n, axis=0).astype(np.int64)
        u = rng.random((n, m, 1))
        return (1 + (u > self._chan_cdf).sum(axis=2)).astype(np.int64)

    def initial_state(self, rng: np.random.Generator) -> SchedState:
        return SchedState(aoi=np.ones(self.n_devices, dtype=np.int64),
                          channels=self.sample_channel_matrix(rng))

    def success_probs(self, state: SchedState, assign: np.ndarray) -> np.ndarray:
        """Per-device delivery probability under `assign` (0 when idle)."""
        probs = np.zeros(self.n_devices)
        for n, m in enumerate(assign):
            if m > 0:
                g = state.channels[n, m - 1]
                probs[n] = 1.0 - self.channels.drop_rate[n, m - 1, g - 1]
        return probs

    def sample_next_aoi(self, state: SchedState, assign: np.ndarray,
                        rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw next staleness vector(s); `size=None` gives one [N] vector."""
        validate_assignment(assign, self.n_channels)
        probs = self.success_probs(state, assign)
        bumped = np.minimum(state.aoi + 1, self.delta_cap)
        shape = (self.n_devices,) if size is None else (size, self.n_devices)
        success = rng.random(shape) < probs
        return np.where(success, 1, bumped).astype(np.int64)

    def step(self, state: SchedState, action: SchedAction,
             rng: np.random.Generator) -> tuple[SchedState, float]:
        """Advance one slot; the returned cost is charged at the current state."""
        cost = self.state_cost(state)
        aoi_next = self.sample_next_aoi(state, action.assign, rng)
        nxt = SchedState(aoi=aoi_next, channels=self.sample_channel_matrix(rng))
        return nxt, cost


def transition_kernel(model: SystemModel, state: SchedState,
                      action: SchedAction) -> list[tuple[np.ndarray, float]]:
    """Exact product-form distribution over next staleness vectors.

    The channel part factorizes as an action-independent i.i.d. draw and is
    not enumerated here. Weights sum to 1 within 1e-12.
    """
    validate_assignment(action.assign, model.n_channels)
    probs = model.success_probs(state, action.assign)
    bumped = np.minimum(state.aoi + 1, model.delta_cap)
    outcomes: list[tuple[np.ndarray, float]] = [(np.empty(0, dtype=np.int64), 1.0)]
    for n in range(model.n_devices):
        branched = []
        for prefix, w in outcomes:
            if action.assign[n] > 0 and probs[n] > 0.0:
                if probs[n] < 1.0:
                    branched.append((np.append(prefix, 1), w * probs[n]))
                    branched.append((np.append(prefix, bumped[n]), w * (1.0 - probs[n])))
                else:
                    branched.append((np.append(prefix, 1), w))
            else:
                branched.append((np.append(prefix, bumped[n]), w))
        outcomes = branched
    return outcomes


def enumerate_actions(n_devices: int, n_channels: int) -> list[np.ndarray]:
    """All injective channel-to-device assignments, in lexicographic order
    of the assignment vector. Count is n!/(n-m)!."""
    if n_channels >= n_devices:
        raise ValueError("need fewer channels than devices")
    count = math.perm(n_devices, n_channels)
    if count > 1_000_000:
        raise TooLarge(f"{count} assignments exceed the enumeration budget")
    actions = []
    for devices in itertools.permutations(range(n_devices), n_channels):
        assign = np.zeros(n_devices, dtype=np.int64)
        for m, n in enumerate(devices):
            assign[n] = m + 1
        actions.append(assign)
    uniq = {tuple(a) for a in actions}
    assert len(uniq) == count
    return sorted(actions, key=tuple)


def normalize_state(model: SystemModel, aoi: np.ndarray,
                    channels: np.ndarray) -> np.ndarray:
    """Flat network input: staleness / cap, then (level-1)/(levels-1) row-major."""
    denom = max(model.gbar - 1, 1)
    return np.concatenate([
        np.asarray(aoi, dtype=float) / model.delta_cap,
        (np.asarray(channels, dtype=float).ravel() - 1.0) / denom,
    ])


def state_input_dim(n_devices: int, n_channels: int) -> int:
    return n_devices + n_devices * n_channels
