"""Exact value iteration on truncated instances plus structural certificates.

States pair a staleness vector (truncated at ``delta_max`` with saturating
increments) with a channel configuration. Channel draws are i.i.d. and
action independent, so each Bellman sweep first averages the value table
over next-channel configurations and then applies the per-device staleness
transition, which factorizes across devices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelError, SchedState, SystemModel, enumerate_actions
from .structure import mandatory_set

MAX_STATE_ACTION_PAIRS = 5_000_000
TIE_TOL = 1e-12
CHECK_TOL = 1e-9
MAX_REPORT_ENTRIES = 200


class BudgetExceeded(ModelError):
    """Enumeration would not fit the configured budget."""


class NoOnset(ModelError):
    """No staleness beyond which a cost table stays convex."""


class PreconditionViolated(ModelError):
    """Checker ran on an instance outside its supported class."""


@dataclass(frozen=True)
class StateSpace:
    """Mixed-radix indexing of the truncated state grid.

    Colocated instances share one channel row across devices, so their
    channel coordinate is an M-vector instead of an N-by-M matrix.
    """

    n_devices: int
    n_channels: int
    gbar: int
    delta_max: int
    colocated: bool

    @property
    def n_elements(self) -> int:
        return self.n_channels if self.colocated else self.n_devices * self.n_channels

    @property
    def n_delta(self) -> int:
        return self.delta_max ** self.n_devices

    @property
    def n_chan(self) -> int:
        return self.gbar ** self.n_elements

    def delta_grid(self) -> np.ndarray:
        """All staleness vectors, 1-based, shape [n_delta, N]."""
        idx = np.arange(self.n_delta)
        out = np.empty((self.n_delta, self.n_devices), dtype=np.int64)
        for n in range(self.n_devices - 1, -1, -1):
            out[:, n] = idx % self.delta_max + 1
            idx //= self.delta_max
        return out

    def level_grid(self) -> np.ndarray:
        """All channel configurations, 1-based, shape [n_chan, n_elements]."""
        idx = np.arange(self.n_chan)
        out = np.empty((self.n_chan, self.n_elements), dtype=np.int64)
        for e in range(self.n_elements - 1, -1, -1):
            out[:, e] = idx % self.gbar + 1
            idx //= self.gbar
        return out

    def delta_index(self, aoi: np.ndarray) -> int:
        d = 0
        for x in aoi:
            d = d * self.delta_max + (int(x) - 1)
        return d

    def channel_index(self, channels: np.ndarray) -> int:
        flat = channels[0] if self.colocated else np.asarray(channels).ravel()
        c = 0
        for g in flat:
            c = c * self.gbar + (int(g) - 1)
        return c

    def channel_matrix(self, levels: np.ndarray) -> np.ndarray:
        if self.colocated:
            return np.tile(levels, (self.n_devices, 1)).astype(np.int64)
        return levels.reshape(self.n_devices, self.n_channels).astype(np.int64)

    def state_of(self, d: int, c: int, deltas: np.ndarray,
                 levels: np.ndarray) -> SchedState:
        return SchedState(aoi=deltas[d].copy(),
                          channels=self.channel_matrix(levels[c]))


@dataclass
class TruncatedMdp:
    model: SystemModel
    delta_max: int
    space: StateSpace
    actions: list[np.ndarray]
    deltas: np.ndarray      # [n_delta, N], 1-based
    levels: np.ndarray      # [n_chan, n_elements], 1-based
    chan_probs: np.ndarray  # [n_chan]
    succ_probs: np.ndarray  # [n_actions, n_chan, N]
    state_costs: np.ndarray  # [n_delta]
    _next_idx: np.ndarray = field(repr=False, default=None)

    @property
    def n_states(self) -> int:
        return self.space.n_delta * self.space.n_chan

    def grid_shape(self) -> tuple:
        return (self.delta_max,) * self.space.n_devices + \
            (self.space.gbar,) * self.space.n_elements


def build_truncated(model: SystemModel, delta_max: int) -> TruncatedMdp:
    n, m = model.n_devices, model.n_channels
    space = StateSpace(n_devices=n, n_channels=m, gbar=model.gbar,
                       delta_max=delta_max, colocated=model.channels.colocated)
    actions = enumerate_actions(n, m)
    if space.n_delta * space.n_chan * len(actions) > MAX_STATE_ACTION_PAIRS:
        raise BudgetExceeded("state-action enumeration exceeds the budget")
    if delta_max > model.delta_cap:
        raise ValueError("delta_max cannot exceed the tabulated cost cap")
    deltas = space.delta_grid()
    levels = space.level_grid()

    q = model.channels.level_dist
    chan_probs = np.ones(space.n_chan)
    for e in range(space.n_elements):
        if space.colocated:
            qe = q[0, e]
        else:
            qe = q[e // m, e % m]
        chan_probs *= qe[levels[:, e] - 1]

    succ = np.zeros((len(actions), space.n_chan, n))
    drop = model.channels.drop_rate
    for ci in range(space.n_chan):
        gmat = space.channel_matrix(levels[ci])
        for ai, assign in enumerate(actions):
            for dev in range(n):
                ch = assign[dev]
                if ch > 0:
                    succ[ai, ci, dev] = 1.0 - drop[dev, ch - 1, gmat[dev, ch - 1] - 1]

    cost_rows = model.costs.values
    state_costs = np.zeros(space.n_delta)
    for dev in range(n):
        state_costs += cost_rows[dev, deltas[:, dev] - 1]

    mdp = TruncatedMdp(model=model, delta_max=delta_max, space=space,
                       actions=actions, deltas=deltas, levels=levels,
                       chan_probs=chan_probs, succ_probs=succ,
                       state_costs=state_costs)
    nxt = np.minimum(np.arange(delta_max) + 1, delta_max - 1)
    mdp._next_idx = nxt
    return mdp


def _action_expectation(mdp: TruncatedMdp, vbar_t: np.ndarray, ai: int,
                        ci: int) -> np.ndarray:
    """E[ vbar(next staleness) ] for one action under one channel config."""
    ev = vbar_t
    for dev in range(mdp.space.n_devices):
        p = mdp.succ_probs[ai, ci, dev]
        shifted = np.take(ev, mdp._next_idx, axis=dev)
        if p > 0.0:
            reset = np.take(ev, [0], axis=dev)
            ev = p * reset + (1.0 - p) * shifted
        else:
            ev = shifted
    return ev.reshape(-1)


def _q_values(mdp: TruncatedMdp, v2d: np.ndarray) -> np.ndarray:
    """Q[a, d, c] = cost(d) + gamma * E[v | d, c, a]."""
    shape_d = (mdp.delta_max,) * mdp.space.n_devices
    vbar_t = (v2d @ mdp.chan_probs).reshape(shape_d)
    na, nc = len(mdp.actions), mdp.space.n_chan
    q = np.empty((na, mdp.space.n_delta, nc))
    for ci in range(nc):
        for ai in range(na):
            q[ai, :, ci] = _action_expectation(mdp, vbar_t, ai, ci)
    q *= mdp.model.gamma
    q += mdp.state_costs[None, :, None]
    return q


def bellman_backup(mdp: TruncatedMdp, v2d: np.ndarray) -> np.ndarray:
    return _q_values(mdp, v2d).min(axis=0)


def extract_policy(mdp: TruncatedMdp, v2d: np.ndarray) -> np.ndarray:
    """Greedy action indices; lexicographically first within TIE_TOL."""
    q = _q_values(mdp, v2d)
    best = q.min(axis=0)
    return np.argmax(q <= best + TIE_TOL, axis=0)


@dataclass
class ValueTable:
    values: np.ndarray        # [n_delta, n_chan]
    policy: np.ndarray        # [n_delta, n_chan] action indices
    iterations: int
    residual: float
    residual_history: np.ndarray

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1)

    def flat_policy(self) -> np.ndarray:
        return self.policy.reshape(-1)


def value_iteration(mdp: TruncatedMdp, tol: float = 1e-8,
                    max_iter: int = 10_000) -> ValueTable:
    v = np.zeros((mdp.space.n_delta, mdp.space.n_chan))
    history = []
    for it in range(max_iter):
        v_new = bellman_backup(mdp, v)
        res = float(np.max(np.abs(v_new - v)))
        history.append(res)
        v = v_new
        if res < tol:
            break
    else:
        raise BudgetExceeded(f"no convergence to {tol} within {max_iter} sweeps")
    policy = extract_policy(mdp, v)
    return ValueTable(values=v, policy=policy, iterations=len(history),
                      residual=history[-1],
                      residual_history=np.asarray(history))


@dataclass
class ViolationReport:
    kind: str
    checked: int
    count: int
    entries: list[dict]          # capped at MAX_REPORT_ENTRIES
    extra: dict = field(default_factory=dict)

    def summary(self) -> str:
        return f"{self.kind}: {self.count} violation(s) over {self.checked} comparisons"


def _collect(kind: str, checked: int, entries: list[dict],
             total: int, extra: dict | None = None) -> ViolationReport:
    return ViolationReport(kind=kind, checked=checked, count=total,
                           entries=entries[:MAX_REPORT_ENTRIES],
                           extra=extra or {})


def _grid(table_values: np.ndarray, mdp: TruncatedMdp) -> np.ndarray:
    return table_values.reshape(mdp.grid_shape())


def check_monotone_aoi(table: ValueTable, mdp: TruncatedMdp,
                       tol: float = CHECK_TOL) -> ViolationReport:
    """Value must not decrease when any one device gets staler."""
    v = _grid(table.values, mdp)
    entries, checked, total = [], 0, 0
    for dev in range(mdp.space.n_devices):
        lo = np.take(v, np.arange(mdp.delta_max - 1), axis=dev)
        hi = np.take(v, np.arange(1, mdp.delta_max), axis=dev)
        gap = hi - lo
        checked += gap.size
        bad = np.argwhere(gap < -tol)
        total += len(bad)
        for b in bad[:MAX_REPORT_ENTRIES]:
            entries.append({"axis": ("aoi", dev), "index": tuple(int(x) for x in b),
                            "gap": float(gap[tuple(b)])})
    return _collect("value monotone in staleness", checked, entries, total)


def check_monotone_channel(table: ValueTable, mdp: TruncatedMdp,
                           tol: float = CHECK_TOL) -> ViolationReport:
    """Value must not decrease when any channel level worsens."""
    v = _grid(table.values, mdp)
    n = mdp.space.n_devices
    entries, checked, total = [], 0, 0
    for e in range(mdp.space.n_elements):
        ax = n + e
        lo = np.take(v, np.arange(mdp.space.gbar - 1), axis=ax)
        hi = np.take(v, np.arange(1, mdp.space.gbar), axis=ax)
        gap = hi - lo
        checked += gap.size
        bad = np.argwhere(gap < -tol)
        total += len(bad)
        for b in bad[:MAX_REPORT_ENTRIES]:
            entries.append({"axis": ("channel", e), "index": tuple(int(x) for x in b),
                            "gap": float(gap[tuple(b)])})
    return _collect("value monotone in channel level", checked, entries, total)


def check_convex_aoi(table: ValueTable, mdp: TruncatedMdp,
                     tol: float = CHECK_TOL) -> ViolationReport:
    """Midpoint discrete convexity along each device's staleness axis.

    The report tracks, per device, the largest staleness at which a
    violation occurs, so the asymptotic regime can be read off as
    ``max_violation_delta + 1``.
    """
    v = _grid(table.values, mdp)
    entries, checked, total = [], 0, 0
    onset = np.ones(mdp.space.n_devices, dtype=int)
    for dev in range(mdp.space.n_devices):
        mid = np.take(v, np.arange(1, mdp.delta_max - 1), axis=dev)
        left = np.take(v, np.arange(mdp.delta_max - 2), axis=dev)
        right = np.take(v, np.arange(2, mdp.delta_max), axis=dev)
        second = left + right - 2.0 * mid
        checked += second.size
        bad = np.argwhere(second < -tol)
        total += len(bad)
        if len(bad):
            onset[dev] = int(bad[:, dev].max()) + 3  # center delta + 1, 1-based
        for b in bad[:MAX_REPORT_ENTRIES]:
            entries.append({"axis": ("aoi", dev), "index": tuple(int(x) for x in b),
                            "gap": float(second[tuple(b)]),
                            "delta": int(b[dev]) + 2})
    return _collect("value convex in staleness", checked, entries, total,
                    extra={"convex_onset_per_device": onset.tolist()})


def check_policy_monotone_channel(table: ValueTable, mdp: TruncatedMdp) -> ViolationReport:
    """A device keeps its channel when that channel's level improves."""
    if mdp.space.colocated:
        raise PreconditionViolated(
            "single-element channel probes need independent per-device rows")
    n, m = mdp.space.n_devices, mdp.space.n_channels
    assign_of = np.stack(mdp.actions)  # [A, N]
    pol = _grid(table.policy, mdp)
    entries, checked, total = [], 0, 0
    for e in range(mdp.space.n_elements):
        dev, ch = e // m, e % m
        ax = n + e
        hi = np.take(pol, np.arange(1, mdp.space.gbar), axis=ax)
        lo = np.take(pol, np.arange(mdp.space.gbar - 1), axis=ax)
        scheduled_hi = assign_of[hi, dev] == ch + 1
        kept_lo = assign_of[lo, dev] == ch + 1
        checked += int(scheduled_hi.sum())
        bad = np.argwhere(scheduled_hi & ~kept_lo)
        total += len(bad)
        for b in bad[:MAX_REPORT_ENTRIES]:
            entries.append({"axis": ("channel", e),
                            "index": tuple(int(x) for x in b)})
    return _collect("policy monotone in channel level", checked, entries, total)


def check_greedy_structure(table: ValueTable, mdp: TruncatedMdp) -> ViolationReport:
    """Wherever the mandatory set exists, its members are all scheduled."""
    if not mdp.space.colocated:
        raise PreconditionViolated("greedy structure requires colocated devices")
    model = mdp.model
    assign_of = np.stack(mdp.actions)
    entries, checked, total = [], 0, 0
    sets = []
    for d in range(mdp.space.n_delta):
        ms = mandatory_set(model, mdp.deltas[d])
        sets.append(None if ms is None else np.asarray(sorted(ms.members)))
    for d, members in enumerate(sets):
        if members is None:
            continue
        for c in range(mdp.space.n_chan):
            checked += 1
            assign = assign_of[table.policy[d, c]]
            if np.any(assign[members] == 0):
                total += 1
                if len(entries) < MAX_REPORT_ENTRIES:
                    entries.append({"delta": mdp.deltas[d].tolist(),
                                    "channel_config": mdp.levels[c].tolist(),
                                    "members": members.tolist(),
                                    "assign": assign.tolist()})
    return _collect("mandatory set scheduled", checked, entries, total)


def check_cost_convexity(model: SystemModel) -> np.ndarray:
    """Per-device convex onset of the tabulated cost, 1-based staleness."""
    onsets = model.costs.convex_onset
    if np.any(onsets < 0):
        bad = np.nonzero(onsets < 0)[0].tolist()
        raise NoOnset(f"no convex onset within the table for devices {bad}")
    return onsets.copy()


def run_all_checks(table: ValueTable, mdp: TruncatedMdp) -> dict[str, ViolationReport]:
    checks = {
        "monotone_aoi": check_monotone_aoi(table, mdp),
        "monotone_channel": check_monotone_channel(table, mdp),
        "convex_aoi": check_convex_aoi(table, mdp),
    }
    if mdp.space.colocated:
        checks["greedy_structure"] = check_greedy_structure(table, mdp)
    else:
        checks["policy_monotone_channel"] = check_policy_monotone_channel(table, mdp)
    return checks


def table_policy_fn(table: ValueTable, mdp: TruncatedMdp):
    """Closure mapping a live state to the tabulated optimal assignment."""
    def policy(state: SchedState) -> np.ndarray:
        aoi = np.minimum(state.aoi, mdp.delta_max)
        d = mdp.space.delta_index(aoi)
        c = mdp.space.channel_index(state.channels)
        return mdp.actions[table.policy[d, c]]
    return policy


def policy_eval(model: SystemModel, policy_fn, horizon: int, episodes: int,
                rng: np.random.Generator) -> dict:
    """Closed-loop simulation: per-step average cost and discounted return."""
    from .model import SchedAction

    step_costs = []
    returns = []
    for _ in range(episodes):
        state = model.initial_state(rng)
        total, disc, g = 0.0, 0.0, 1.0
        for _ in range(horizon):
            action = SchedAction(assign=np.asarray(policy_fn(state)))
            state, cost = model.step(state, action, rng)
            total += cost
            disc += g * cost
            g *= model.gamma
        step_costs.append(total / horizon)
        returns.append(disc)
    step_costs = np.asarray(step_costs)
    return {
        "avg_cost": float(step_costs.mean()),
        "avg_cost_se": float(step_costs.std(ddof=1) / np.sqrt(len(step_costs)))
        if episodes > 1 else 0.0,
        "discounted_return": float(np.mean(returns)),
        "discounted_return_se": float(np.std(returns, ddof=1) / np.sqrt(len(returns)))
        if episodes > 1 else 0.0,
    }


def policy_value_exact(mdp: TruncatedMdp, policy: np.ndarray) -> np.ndarray:
    """Exact value of a stationary deterministic policy by linear solve.

    Exploits the channel factorization: with u(d) = E_c[v(d, c)],
    u = cost + gamma * B u, where B only involves staleness transitions.
    """
    nd, nc = mdp.space.n_delta, mdp.space.n_chan
    if nd > 5000:
        raise BudgetExceeded("exact policy evaluation is for small instances")
    b = np.zeros((nd, nd))
    trans = np.zeros((nd, nc, nd))
    for d in range(nd):
        digits = mdp.deltas[d] - 1
        for c in range(nc):
            ai = policy[d, c]
            outcomes = [(0, 1.0)]
            for dev in range(mdp.space.n_devices):
                p = mdp.succ_probs[ai, c, dev]
                nxt_digit = min(int(digits[dev]) + 1, mdp.delta_max - 1)
                grown = []
                for acc, w in outcomes:
                    if p > 0.0:
                        grown.append((acc * mdp.delta_max + 0, w * p))
                        if p < 1.0:
                            grown.append((acc * mdp.delta_max + nxt_digit,
                                          w * (1.0 - p)))
                    else:
                        grown.append((acc * mdp.delta_max + nxt_digit, w))
                outcomes = grown
            for dp, w in outcomes:
                trans[d, c, dp] += w
            b[d] += mdp.chan_probs[c] * trans[d, c]
    u = np.linalg.solve(np.eye(nd) - mdp.model.gamma * b, mdp.state_costs)
    v = mdp.state_costs[:, None] + mdp.model.gamma * (trans @ u)
    return v


def table_to_doc(table: ValueTable, mdp: TruncatedMdp) -> dict:
    return {
        "version": 1,
        "n_devices": mdp.space.n_devices,
        "n_channels": mdp.space.n_channels,
        "gbar": mdp.space.gbar,
        "delta_max": mdp.delta_max,
        "colocated": mdp.space.colocated,
        "gamma": mdp.model.gamma,
        "iterations": table.iterations,
        "residual": table.residual,
        "values": table.flat_values().tolist(),
        "policy": table.flat_policy().tolist(),
        "actions": [a.tolist() for a in mdp.actions],
    }


def table_from_doc(doc: dict, mdp: TruncatedMdp) -> ValueTable:
    nd, nc = mdp.space.n_delta, mdp.space.n_chan
    values = np.asarray(doc["values"], dtype=float).reshape(nd, nc)
    policy = np.asarray(doc["policy"], dtype=np.int64).reshape(nd, nc)
    return ValueTable(values=values, policy=policy,
                      iterations=int(doc["iterations"]),
                      residual=float(doc["residual"]),
                      residual_history=np.empty(0))
