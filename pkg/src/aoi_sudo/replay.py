"""Structure-gated trajectory replay with recency-decayed priority sampling.

A trajectory enters the buffer only when its structure scores are at least
the running averages over the recent scored history; all of its transitions
then share one priority equal to the score sum. Sampling picks a trajectory
with probability proportional to priority times decay^age (age 0 = newest)
and a uniform transition within it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import ModelError, SchedState
from .structure import StructureScores


class EmptyBuffer(ModelError):
    """Nothing stored yet; off-policy terms are skipped this episode."""


@dataclass
class StoredTrajectory:
    states: list[SchedState]      # length T+1
    cont_actions: np.ndarray      # [T, N]
    costs: np.ndarray             # [T]
    priority: float
    traj_id: int

    def __len__(self) -> int:
        return len(self.costs)


@dataclass
class ReplayItem:
    state: SchedState
    cont_action: np.ndarray
    cost: float
    next_state: SchedState
    priority: float
    traj_id: int


class ReplayBuffer:
    def __init__(self, capacity: int, avg_window: int):
        self.capacity = capacity
        self.avg_window = avg_window
        self.trajectories: deque[StoredTrajectory] = deque()
        self.score_history: deque[StructureScores] = deque(maxlen=avg_window)
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def running_averages(self, fallback: StructureScores) -> tuple[float, float, float]:
        """Mean scores over the recent history; the fallback seeds an empty one."""
        hist = self.score_history if self.score_history else [fallback]
        return (float(np.mean([s.cm for s in hist])),
                float(np.mean([s.cc for s in hist])),
                float(np.mean([s.am for s in hist])))

    def maybe_store(self, states: list[SchedState], cont_actions: np.ndarray,
                    costs: np.ndarray, scores: StructureScores) -> bool:
        """Gate on the running averages; the history advances either way."""
        cm_avg, cc_avg, am_avg = self.running_averages(fallback=scores)
        stored = (scores.cm >= cm_avg and scores.cc >= cc_avg
                  and scores.am >= am_avg)
        self.score_history.append(scores)
        if stored:
            traj = StoredTrajectory(states=list(states),
                                    cont_actions=np.array(cont_actions),
                                    costs=np.array(costs, dtype=float),
                                    priority=scores.priority,
                                    traj_id=self._next_id)
            self._next_id += 1
            self.trajectories.append(traj)
            while len(self.trajectories) > self.capacity:
                self.trajectories.popleft()
        return stored

    def trajectory_weights(self, decay: float) -> np.ndarray:
        """Unnormalized priority * decay^age, age 0 for the newest."""
        n = len(self.trajectories)
        ages = np.arange(n - 1, -1, -1, dtype=float)
        pri = np.array([t.priority for t in self.trajectories])
        return pri * decay ** ages

    def sample(self, batch_size: int, decay: float,
               rng: np.random.Generator) -> list[ReplayItem]:
        if not self.trajectories:
            raise EmptyBuffer("replay buffer is empty")
        w = self.trajectory_weights(decay)
        total = w.sum()
        probs = np.full(len(w), 1.0 / len(w)) if total <= 0 else w / total
        traj_idx = rng.choice(len(self.trajectories), size=batch_size, p=probs)
        items = []
        for ti in traj_idx:
            traj = self.trajectories[int(ti)]
            t = int(rng.integers(len(traj)))
            items.append(ReplayItem(state=traj.states[t],
                                    cont_action=traj.cont_actions[t],
                                    cost=float(traj.costs[t]),
                                    next_state=traj.states[t + 1],
                                    priority=traj.priority,
                                    traj_id=traj.traj_id))
        return items
