"""Structural probes of learned networks and the mandatory scheduling set.

The probes perturb one sampled state coordinate at a time and measure
whether a critic respects the monotonicity/convexity that the optimal value
function provably has, and whether the policy keeps a device on a channel
whose quality improved. Probe penalties feed the on-policy critic loss;
per-trajectory scores gate the replay buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ModelError, SchedState, SystemModel


class NoStableOrdering(ModelError):
    """Cost curves keep crossing through the tabulated range."""


@dataclass(frozen=True)
class StructureProbe:
    """Sampling budget: states per trajectory and probes per state."""

    n_states: int = 50   # state-action pairs sampled per trajectory
    n_probes: int = 4    # devices / channel elements tested per state

    def __post_init__(self):
        if self.n_states < 1 or self.n_probes < 1:
            raise ValueError("probe budget must be positive")


@dataclass
class ProbeSet:
    """Raw probe coordinates sampled from one trajectory."""

    mono_aoi: list[tuple[SchedState, int]]
    mono_ch: list[tuple[SchedState, int, int]]
    convex: list[tuple[SchedState, int] | None]
    actor: list[tuple[SchedState, np.ndarray, int]]

    @property
    def n_slots(self) -> int:
        return len(self.mono_aoi)


@dataclass(frozen=True)
class StructureScores:
    cm: float
    cc: float
    am: float

    def __post_init__(self):
        for s in (self.cm, self.cc, self.am):
            if not 0.0 <= s <= 100.0:
                raise ValueError("scores live in [0, 100]")

    @property
    def priority(self) -> float:
        return self.cm + self.cc + self.am


@dataclass(frozen=True)
class MandatorySet:
    threshold: int
    ordering: tuple[int, ...]
    members: tuple[int, ...]


def bump_aoi(state: SchedState, device: int, delta: int) -> SchedState:
    aoi = state.aoi.copy()
    aoi[device] += delta
    return SchedState(aoi=aoi, channels=state.channels)


def bump_channel(state: SchedState, device: int, channel: int, delta: int,
                 gbar: int) -> SchedState:
    ch = state.channels.copy()
    ch[device, channel] = min(max(ch[device, channel] + delta, 1), gbar)
    return SchedState(aoi=state.aoi, channels=ch)


def critic_mono_aoi_penalty(value_fn, state: SchedState, device: int) -> float:
    base, up = value_fn([state, bump_aoi(state, device, +1)])
    return max(0.0, float(base - up))


def critic_mono_ch_penalty(value_fn, state: SchedState, device: int,
                           channel: int, gbar: int) -> float:
    probed = bump_channel(state, device, channel, +1, gbar)
    base, up = value_fn([state, probed])
    return max(0.0, float(base - up))


def critic_convexity_penalty(value_fn, state: SchedState, device: int) -> float:
    if state.aoi[device] < 2:
        raise ValueError("convexity probe needs the lower neighbor")
    base, down, up = value_fn([state, bump_aoi(state, device, -1),
                               bump_aoi(state, device, +1)])
    return max(0.0, float(2.0 * base - down - up))


def actor_mono_indicator(sample_assign_fn, state: SchedState,
                         executed_assign: np.ndarray, device: int,
                         rng: np.random.Generator) -> int:
    """1 when improving the executed channel makes the policy move the device."""
    m = int(executed_assign[device])
    if m == 0:
        return 0
    # downward bump only needs the floor clamp at level 1
    probed = bump_channel(state, device, m - 1, -1, gbar=2 ** 31)
    fresh = sample_assign_fn(probed, rng)
    return int(fresh[device] != m)


def sample_probes(cfg: StructureProbe, model: SystemModel,
                  states: list[SchedState], assigns: np.ndarray,
                  rng: np.random.Generator) -> ProbeSet:
    """Draw K states and, per state, probe coordinates without replacement."""
    t = len(states)
    n, m = model.n_devices, model.n_channels
    k = min(cfg.n_states, t)
    xi_dev = min(cfg.n_probes, n)
    xi_elem = min(cfg.n_probes, n * m)
    picks = rng.choice(t, size=k, replace=False)
    mono_aoi, mono_ch, convex, actor = [], [], [], []
    for ki in picks:
        state = states[ki]
        devices = rng.choice(n, size=xi_dev, replace=False)
        elements = rng.choice(n * m, size=xi_elem, replace=False)
        eligible = rng.permutation(np.nonzero(state.aoi >= 2)[0])
        taken: set[int] = set()
        for dev in devices:
            mono_aoi.append((state, int(dev)))
            actor.append((state, assigns[ki], int(dev)))
            if state.aoi[dev] >= 2 and int(dev) not in taken:
                convex.append((state, int(dev)))
                taken.add(int(dev))
            else:
                alt = next((int(e) for e in eligible if int(e) not in taken), None)
                if alt is None:
                    convex.append(None)
                else:
                    convex.append((state, alt))
                    taken.add(alt)
        for e in elements:
            mono_ch.append((state, int(e) // m, int(e) % m))
    return ProbeSet(mono_aoi=mono_aoi, mono_ch=mono_ch, convex=convex,
                    actor=actor)


@dataclass
class CriticPenalties:
    mono_aoi: np.ndarray
    mono_ch: np.ndarray
    convex: np.ndarray

    def mean_total(self) -> float:
        return float(self.mono_aoi.mean() + self.mono_ch.mean()
                     + self.convex.mean()) if len(self.mono_aoi) else 0.0


def critic_penalties(probes: ProbeSet, value_fn, gbar: int) -> CriticPenalties:
    """Batched evaluation of all critic probes.

    value_fn maps a list of states to an array of critic values.
    """
    batch: list[SchedState] = []
    for state, dev in probes.mono_aoi:
        batch.extend([state, bump_aoi(state, dev, +1)])
    for state, dev, ch in probes.mono_ch:
        batch.extend([state, bump_channel(state, dev, ch, +1, gbar)])
    for item in probes.convex:
        if item is not None:
            state, dev = item
            batch.extend([state, bump_aoi(state, dev, -1), bump_aoi(state, dev, +1)])
    values = np.asarray(value_fn(batch)) if batch else np.empty(0)
    pos = 0
    mono_aoi = np.zeros(len(probes.mono_aoi))
    for i in range(len(probes.mono_aoi)):
        mono_aoi[i] = max(0.0, values[pos] - values[pos + 1])
        pos += 2
    mono_ch = np.zeros(len(probes.mono_ch))
    for i in range(len(probes.mono_ch)):
        mono_ch[i] = max(0.0, values[pos] - values[pos + 1])
        pos += 2
    convex = np.zeros(len(probes.convex))
    for i, item in enumerate(probes.convex):
        if item is None:
            continue
        convex[i] = max(0.0, 2.0 * values[pos] - values[pos + 1] - values[pos + 2])
        pos += 3
    return CriticPenalties(mono_aoi=mono_aoi, mono_ch=mono_ch, convex=convex)


def actor_violations(probes: ProbeSet, sample_assign_fn,
                     rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(len(probes.actor), dtype=int)
    for i, (state, assign, dev) in enumerate(probes.actor):
        out[i] = actor_mono_indicator(sample_assign_fn, state, assign, dev, rng)
    return out


def scores_from(pen: CriticPenalties, violations: np.ndarray) -> StructureScores:
    slots = len(pen.mono_aoi)
    if slots == 0:
        return StructureScores(cm=100.0, cc=100.0, am=100.0)
    cm = 100.0 * ((pen.mono_aoi == 0.0).sum() + (pen.mono_ch == 0.0).sum()) \
        / (len(pen.mono_aoi) + len(pen.mono_ch))
    cc = 100.0 * (pen.convex == 0.0).sum() / len(pen.convex)
    am = 100.0 * (violations == 0).sum() / len(violations)
    return StructureScores(cm=float(cm), cc=float(cc), am=float(am))


def score_trajectory(cfg: StructureProbe, model: SystemModel,
                     states: list[SchedState], assigns: np.ndarray,
                     value_fn, sample_assign_fn,
                     rng: np.random.Generator) -> tuple[StructureScores, ProbeSet]:
    probes = sample_probes(cfg, model, states, assigns, rng)
    pen = critic_penalties(probes, value_fn, model.gbar)
    viol = actor_violations(probes, sample_assign_fn, rng)
    return scores_from(pen, viol), probes


def stable_cost_ordering(model: SystemModel) -> tuple[tuple[int, ...], int]:
    """Device ordering by asymptotic cost and the staleness where it locks in.

    Returns (ordering, threshold): ordering lists device indices from the
    highest cost curve down; the ordering holds for every tabulated
    staleness >= threshold. Cached on the model.
    """
    cached = getattr(model, "_stable_order", None)
    if cached is not None:
        return cached
    costs = model.costs.values
    cap = model.delta_cap
    order = sorted(range(model.n_devices),
                   key=lambda i: (-costs[i, cap - 1], i))
    ranked = costs[order, :]
    ok = np.all(ranked[:-1] >= ranked[1:] - 1e-12 * np.abs(ranked[1:]), axis=0)
    bad = np.nonzero(~ok)[0]
    threshold = 1 if len(bad) == 0 else int(bad[-1]) + 2
    if threshold >= cap:
        raise NoStableOrdering("cost curves cross up to the tabulated cap")
    result = (tuple(order), threshold)
    object.__setattr__(model, "_stable_order", result)
    return result


def mandatory_set(model: SystemModel, aoi: np.ndarray) -> MandatorySet | None:
    """Largest prefix of the cost ordering that is also the top-staleness set,
    every member staler than the threshold. None when no such prefix exists."""
    order, threshold = stable_cost_ordering(model)
    aoi = np.asarray(aoi)
    for nbar in range(min(model.n_channels, model.n_devices), 0, -1):
        members = order[:nbar]
        rest = order[nbar:]
        if np.all(aoi[list(members)] > threshold) and \
                (not rest or aoi[list(members)].min() >= aoi[list(rest)].max()):
            return MandatorySet(threshold=threshold, ordering=order,
                                members=tuple(sorted(members)))
    return None


def structure_guided_sample(model: SystemModel, state: SchedState,
                            sample_fn, rng: np.random.Generator,
                            max_resamples: int = 50):
    """Resample the stochastic policy until the mandatory set is covered.

    sample_fn(state, rng) -> (continuous action, mapped assignment).
    On exhaustion the last assignment is repaired: each unscheduled member,
    stalest first, takes its lowest-drop channel among those held by
    non-members (ties broken toward the holder with the smallest continuous
    action, then the lower channel index). The repaired assignment still
    uses every channel exactly once.
    """
    ms = mandatory_set(model, state.aoi)
    if ms is None:
        return sample_fn(state, rng)
    members = np.asarray(ms.members)
    a_cont, assign = None, None
    for _ in range(max_resamples):
        a_cont, assign = sample_fn(state, rng)
        if np.all(assign[members] > 0):
            return a_cont, assign
    assign = assign.copy()
    member_set = set(int(x) for x in members)
    pending = sorted((int(i) for i in members if assign[i] == 0),
                     key=lambda i: (-int(state.aoi[i]), i))
    for dev in pending:
        holders = [(int(assign[j]), j) for j in range(model.n_devices)
                   if j not in member_set and assign[j] > 0]
        choices = sorted(
            holders,
            key=lambda hc: (model.channels.drop_rate[
                dev, hc[0] - 1, state.channels[dev, hc[0] - 1] - 1],
                a_cont[hc[1]], hc[0]))
        ch, victim = choices[0]
        assign[dev] = ch
        assign[victim] = 0
    return a_cont, assign
