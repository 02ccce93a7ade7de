"""Hybrid on/off-policy trainer with structure-gated replay, plus the plain
clipped-surrogate baseline as the degenerate configuration (zero off-policy
weights, zero penalty, no pre-training).

Cost convention throughout: advantages measure extra discounted cost, so the
surrogate takes the pessimistic (max) branch of the clipped objective and
the optimizer minimizes it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .model import (ModelError, SchedAction, SchedState, SystemModel,
                    normalize_state, state_input_dim, validate_assignment)
from .nets import (AdamState, Mlp, adam_step, adam_to_doc, gaussian_entropy,
                   gaussian_log_prob, gaussian_log_prob_grads, net_from_doc,
                   net_to_doc, sample_gaussian, split_policy_output)
from .replay import ReplayBuffer
from .structure import (ProbeSet, StructureProbe, bump_aoi, bump_channel,
                        mandatory_set, structure_guided_sample)
from . import structure as _structure

CHECKPOINT_VERSION = 1


class DegenerateRatio(ModelError):
    """A behavior log-density is non-finite; ratios are meaningless."""


class NonFiniteLoss(ModelError):
    """Training diverged; aborting with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the reference setup."""

    gamma: float | None = None        # None: use the scenario's discount
    gae_lambda: float = 0.99
    clip_eps: float = 0.2
    entropy_weight: float = 0.01      # on-policy entropy bonus
    off_entropy_weight: float = 0.01  # off-policy log-density weight
    sample_decay: float = 0.95        # replay recency decay
    beta_critic: float = 0.9          # off-policy critic loss weight
    beta_actor: float = 0.9           # off-policy actor loss weight
    batch_on: int = 128
    batch_off: int = 128
    probe_states: int = 50            # structure probe: states per trajectory
    probe_tests: int = 4              # structure probe: tests per state
    avg_window: int = 50              # trajectories for running score averages
    horizon: int = 128
    buffer_size: int = 200            # replay capacity, in trajectories
    episodes: int = 10_000
    pretrain_episodes: int | None = None  # None: 10 * n_devices
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    lr_decay: float = 1e-3
    hidden: tuple[int, ...] = (256, 256, 256)
    epochs: int = 4                   # 1 reproduces the single-pass update
    normalize_advantages: bool = True
    penalty_weight: float = 1.0
    algo: str = "sudo"                # "sudo" | "ppo"
    pretrain: bool = True
    off_policy_fresh_next: bool = True
    max_resamples: int = 50
    checkpoint_every: int = 100
    seed: int = 0

    def resolved(self, model: SystemModel) -> "TrainConfig":
        cfg = self
        if cfg.gamma is None:
            cfg = replace(cfg, gamma=model.gamma)
        elif abs(cfg.gamma - model.gamma) > 1e-12:
            raise ValueError("config discount disagrees with the scenario")
        if cfg.algo == "ppo":
            cfg = replace(cfg, beta_critic=0.0, beta_actor=0.0,
                          penalty_weight=0.0, pretrain=False)
        elif cfg.algo != "sudo":
            raise ValueError(f"unknown algo {cfg.algo!r}")
        if cfg.pretrain_episodes is None:
            cfg = replace(cfg, pretrain_episodes=10 * model.n_devices)
        return cfg


@dataclass
class Trajectory:
    states: list[SchedState]        # length T + 1
    cont_actions: np.ndarray        # [T, N]
    assigns: np.ndarray             # [T, N] mapped actions
    costs: np.ndarray               # [T]
    logp_old: np.ndarray            # [T]
    values: np.ndarray              # [T + 1] critic at rollout time

    def __len__(self) -> int:
        return len(self.costs)


def action_map(a_cont: np.ndarray, state: SchedState,
               model: SystemModel) -> np.ndarray:
    """Rank devices by the continuous action; the top M each take the free
    channel with their lowest drop rate. Ties fall back to lower indices."""
    n, m = model.n_devices, model.n_channels
    order = np.lexsort((np.arange(n), -np.asarray(a_cont)))
    assign = np.zeros(n, dtype=np.int64)
    free = list(range(1, m + 1))
    for dev in order[:m]:
        drops = [model.channels.drop_rate[dev, ch - 1,
                                          state.channels[dev, ch - 1] - 1]
                 for ch in free]
        ch = free.pop(int(np.argmin(drops)))
        assign[dev] = ch
    return assign


def states_to_inputs(model: SystemModel, states: list[SchedState]) -> np.ndarray:
    return np.stack([normalize_state(model, s.aoi, s.channels) for s in states])


def make_value_fn(model: SystemModel, critic: Mlp):
    def value_fn(states: list[SchedState]) -> np.ndarray:
        out, _ = critic.forward(states_to_inputs(model, states))
        return out.ravel()
    return value_fn


def make_sampler(model: SystemModel, actor: Mlp):
    """sample_fn(state, rng) -> (continuous action, mapped assignment)."""
    def sample_fn(state: SchedState, rng: np.random.Generator):
        x = normalize_state(model, state.aoi, state.channels)
        out, _ = actor.forward(x)
        mu, log_std, _ = split_policy_output(out)
        a = sample_gaussian(mu, log_std, rng)[0]
        return a, action_map(a, state, model)
    return sample_fn


def rollout(model: SystemModel, actor: Mlp, critic: Mlp, horizon: int,
            env_rng: np.random.Generator, policy_rng: np.random.Generator,
            *, pretraining: bool = False, max_resamples: int = 50,
            start_state: SchedState | None = None) -> Trajectory:
    n = model.n_devices
    state = model.initial_state(env_rng) if start_state is None else start_state
    sample_fn = make_sampler(model, actor)
    states, conts, assigns, costs = [state], [], [], []
    for _ in range(horizon):
        if pretraining:
            a_cont, assign = structure_guided_sample(
                model, state, sample_fn, policy_rng, max_resamples=max_resamples)
            ms = mandatory_set(model, state.aoi)
            assert ms is None or np.all(assign[list(ms.members)] > 0)
        else:
            a_cont, assign = sample_fn(state, policy_rng)
        validate_assignment(assign, model.n_channels)
        state, cost = model.step(state, SchedAction(assign=assign), env_rng)
        states.append(state)
        conts.append(a_cont)
        assigns.append(assign)
        costs.append(cost)
    conts = np.asarray(conts)
    xs = states_to_inputs(model, states)
    out, _ = actor.forward(xs[:-1])
    mu, log_std, _ = split_policy_output(out)
    logp = gaussian_log_prob(mu, log_std, conts)
    values, _ = critic.forward(xs)
    return Trajectory(states=states, cont_actions=conts,
                      assigns=np.asarray(assigns),
                      costs=np.asarray(costs, dtype=float),
                      logp_old=logp, values=values.ravel())


def compute_gae(traj: Trajectory, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """(advantages, one-step cost-to-go targets); bootstraps the final value."""
    v = traj.values
    zeta = traj.costs + gamma * v[1:] - v[:-1]
    adv = np.zeros_like(zeta)
    acc = 0.0
    for t in range(len(zeta) - 1, -1, -1):
        acc = zeta[t] + gamma * lam * acc
        adv[t] = acc
    targets = traj.costs + gamma * v[1:]
    return adv, targets


@dataclass
class ProbeMatrices:
    """Normalized input matrices for the critic probe families."""

    mono_base: np.ndarray
    mono_up: np.ndarray
    ch_base: np.ndarray
    ch_up: np.ndarray
    cvx_base: np.ndarray
    cvx_dn: np.ndarray
    cvx_up: np.ndarray
    n_mono: int
    n_ch: int
    n_cvx_slots: int


def probe_matrices(model: SystemModel, probes: ProbeSet) -> ProbeMatrices:
    gbar = model.gbar
    mono_b = [s for s, _ in probes.mono_aoi]
    mono_u = [bump_aoi(s, d, +1) for s, d in probes.mono_aoi]
    ch_b = [s for s, _, _ in probes.mono_ch]
    ch_u = [bump_channel(s, d, c, +1, gbar) for s, d, c in probes.mono_ch]
    cvx = [it for it in probes.convex if it is not None]
    cvx_b = [s for s, _ in cvx]
    cvx_d = [bump_aoi(s, d, -1) for s, d in cvx]
    cvx_u = [bump_aoi(s, d, +1) for s, d in cvx]

    def mat(states):
        if not states:
            return np.zeros((0, state_input_dim(model.n_devices,
                                                model.n_channels)))
        return states_to_inputs(model, states)

    return ProbeMatrices(mono_base=mat(mono_b), mono_up=mat(mono_u),
                         ch_base=mat(ch_b), ch_up=mat(ch_u),
                         cvx_base=mat(cvx_b), cvx_dn=mat(cvx_d),
                         cvx_up=mat(cvx_u),
                         n_mono=max(len(mono_b), 1),
                         n_ch=max(len(ch_b), 1),
                         n_cvx_slots=max(len(probes.convex), 1))


def critic_on_policy_loss(critic: Mlp, x_states: np.ndarray,
                          targets: np.ndarray,
                          probes: ProbeMatrices | None = None,
                          penalty_weight: float = 0.0):
    """Mean squared TD against frozen targets plus mean structure penalties."""
    out, cache = critic.forward(x_states)
    v = out.ravel()
    td = targets - v
    loss = float(np.mean(td ** 2))
    gout = (-2.0 * td / len(td))[:, None]
    grads = critic.backward(cache, gout)
    if probes is not None and penalty_weight > 0.0:
        pen_loss, pen_grads = _penalty_loss(critic, probes, penalty_weight)
        loss += pen_loss
        grads = [g + pg for g, pg in zip(grads, pen_grads)]
    return loss, grads


def _pair_penalty(critic: Mlp, base: np.ndarray, up: np.ndarray, scale: float):
    """sum of max(0, v(base) - v(up)) * scale, with gradients."""
    if len(base) == 0:
        return 0.0, None
    x = np.vstack([base, up])
    out, cache = critic.forward(x)
    v = out.ravel()
    k = len(base)
    margin = v[:k] - v[k:]
    active = margin > 0.0
    loss = float(margin[active].sum()) * scale
    gout = np.zeros((2 * k, 1))
    gout[:k, 0] = np.where(active, scale, 0.0)
    gout[k:, 0] = np.where(active, -scale, 0.0)
    return loss, critic.backward(cache, gout)


def _penalty_loss(critic: Mlp, pm: ProbeMatrices, weight: float):
    zero = [np.zeros_like(p) for p in critic.params()]
    total = 0.0
    grads = zero
    l1, g1 = _pair_penalty(critic, pm.mono_base, pm.mono_up, weight / pm.n_mono)
    l2, g2 = _pair_penalty(critic, pm.ch_base, pm.ch_up, weight / pm.n_ch)
    total += l1 + l2
    for g in (g1, g2):
        if g is not None:
            grads = [a + b for a, b in zip(grads, g)]
    if len(pm.cvx_base):
        scale = weight / pm.n_cvx_slots
        x = np.vstack([pm.cvx_base, pm.cvx_dn, pm.cvx_up])
        out, cache = critic.forward(x)
        v = out.ravel()
        k = len(pm.cvx_base)
        margin = 2.0 * v[:k] - v[k:2 * k] - v[2 * k:]
        active = margin > 0.0
        total += float(margin[active].sum()) * scale
        gout = np.zeros((3 * k, 1))
        gout[:k, 0] = np.where(active, 2.0 * scale, 0.0)
        gout[k:2 * k, 0] = np.where(active, -scale, 0.0)
        gout[2 * k:, 0] = np.where(active, -scale, 0.0)
        g3 = critic.backward(cache, gout)
        grads = [a + b for a, b in zip(grads, g3)]
    return total, grads


def actor_on_policy_loss(actor: Mlp, x_states: np.ndarray, actions: np.ndarray,
                         logp_old: np.ndarray, advantages: np.ndarray,
                         clip_eps: float, entropy_weight: float,
                         normalize: bool = True):
    """Pessimistically clipped cost surrogate minus the entropy bonus."""
    if not np.all(np.isfinite(logp_old)):
        raise DegenerateRatio("non-finite behavior log-probability")
    adv = np.asarray(advantages, dtype=float)
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    out, cache = actor.forward(x_states)
    mu, log_std, inside = split_policy_output(out)
    logp = gaussian_log_prob(mu, log_std, actions)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surro = np.maximum(ratio * adv, clipped * adv)
    ent = gaussian_entropy(log_std)
    b = len(adv)
    loss = float(surro.mean() - entropy_weight * ent.mean())
    # d surro / d logp is A*ratio on the unclipped branch, else 0
    unclipped = ratio * adv >= clipped * adv
    dsurro = np.where(unclipped, adv * ratio, 0.0) / b
    dmu, dls = gaussian_log_prob_grads(mu, log_std, actions)
    gmu = dsurro[:, None] * dmu
    gls = dsurro[:, None] * dls - entropy_weight / b
    gout = np.hstack([gmu, gls * inside])
    return loss, actor.backward(cache, gout)


def critic_off_policy_loss(critic: Mlp, x_states: np.ndarray,
                           targets: np.ndarray):
    out, cache = critic.forward(x_states)
    td = targets - out.ravel()
    loss = float(np.mean(td ** 2))
    grads = critic.backward(cache, (-2.0 * td / len(td))[:, None])
    return loss, grads


def actor_off_policy_loss(actor: Mlp, x_states: np.ndarray,
                          stored_actions: np.ndarray,
                          future_costs: np.ndarray, varpi: float):
    """varpi * mean log-density of stored actions plus the (constant w.r.t.
    the actor) simulated one-step cost-to-go."""
    out, cache = actor.forward(x_states)
    mu, log_std, inside = split_policy_output(out)
    logp = gaussian_log_prob(mu, log_std, stored_actions)
    loss = float(varpi * logp.mean() + np.mean(future_costs))
    b = len(logp)
    dmu, dls = gaussian_log_prob_grads(mu, log_std, stored_actions)
    gout = np.hstack([dmu * (varpi / b), dls * (varpi / b) * inside])
    return loss, actor.backward(cache, gout)


@dataclass
class TrainResult:
    metrics: list[dict]
    actor: Mlp
    critic: Mlp
    config: TrainConfig
    buffer: ReplayBuffer
    out_dir: Path | None = None


METRIC_FIELDS = ["episode", "avg_cost", "cm", "cc", "am",
                 "critic_loss", "actor_loss", "stored_flag"]


class Trainer:
    """Episode loop: sample, score, store, and one unified update per epoch."""

    def __init__(self, model: SystemModel, config: TrainConfig,
                 out_dir: str | Path | None = None):
        self.model = model
        self.cfg = config.resolved(model)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seeds = np.random.SeedSequence(self.cfg.seed).spawn(7)
        (self._init_rng, self.env_rng, self.policy_rng, self.probe_rng,
         self.replay_rng, self.model_rng, self.batch_rng) = \
            [np.random.default_rng(s) for s in seeds]
        in_dim = state_input_dim(model.n_devices, model.n_channels)
        hid = list(self.cfg.hidden)
        self.critic = Mlp.create([in_dim] + hid + [1], self._init_rng)
        self.actor = Mlp.create([in_dim] + hid + [2 * model.n_devices],
                                self._init_rng)
        self.critic_opt = AdamState.for_net(self.critic, self.cfg.critic_lr,
                                            self.cfg.lr_decay)
        self.actor_opt = AdamState.for_net(self.actor, self.cfg.actor_lr,
                                           self.cfg.lr_decay)
        self.buffer = ReplayBuffer(capacity=self.cfg.buffer_size,
                                   avg_window=self.cfg.avg_window)
        self.probe_cfg = StructureProbe(n_states=self.cfg.probe_states,
                                        n_probes=self.cfg.probe_tests)
        self.metrics: list[dict] = []

    @property
    def uses_off_policy(self) -> bool:
        return self.cfg.algo == "sudo" and \
            (self.cfg.beta_critic != 0.0 or self.cfg.beta_actor != 0.0)

    def train(self) -> TrainResult:
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
        for episode in range(cfg.episodes):
            pretraining = (cfg.algo == "sudo" and cfg.pretrain
                           and episode < cfg.pretrain_episodes)
            traj = rollout(self.model, self.actor, self.critic, cfg.horizon,
                           self.env_rng, self.policy_rng,
                           pretraining=pretraining,
                           max_resamples=cfg.max_resamples)
            sampler = make_sampler(self.model, self.actor)
            scores, probes = _structure.score_trajectory(
                self.probe_cfg, self.model, traj.states[:-1], traj.assigns,
                make_value_fn(self.model, self.critic),
                lambda st, rng: sampler(st, rng)[1],
                self.probe_rng)
            adv, targets = compute_gae(traj, cfg.gamma, cfg.gae_lambda)
            stored = False
            if cfg.algo == "sudo":
                stored = self.buffer.maybe_store(traj.states,
                                                 traj.cont_actions,
                                                 traj.costs, scores)
            critic_loss, actor_loss = self._update(episode, traj, adv,
                                                   targets, probes)
            self.metrics.append({
                "episode": episode,
                "avg_cost": float(traj.costs.mean()),
                "cm": scores.cm, "cc": scores.cc, "am": scores.am,
                "critic_loss": critic_loss, "actor_loss": actor_loss,
                "stored_flag": int(stored),
            })
            if self.out_dir is not None and cfg.checkpoint_every > 0 \
                    and episode % cfg.checkpoint_every == 0:
                self._write_checkpoint(episode)
        if self.out_dir is not None:
            self._write_checkpoint(cfg.episodes)
            self._write_metrics()
        return TrainResult(metrics=self.metrics, actor=self.actor,
                           critic=self.critic, config=cfg,
                           buffer=self.buffer, out_dir=self.out_dir)

    def _update(self, episode: int, traj: Trajectory, adv: np.ndarray,
                targets: np.ndarray, probes: ProbeSet):
        cfg = self.cfg
        t = len(traj)
        xs = states_to_inputs(self.model, traj.states[:-1])
        pm = probe_matrices(self.model, probes) if cfg.penalty_weight > 0 else None
        lr_c = self.critic_opt.effective_lr(episode)
        lr_a = self.actor_opt.effective_lr(episode)
        critic_loss = actor_loss = 0.0
        for _ in range(cfg.epochs):
            if cfg.batch_on <= t:
                idx = self.batch_rng.permutation(t)[:cfg.batch_on]
            else:
                idx = self.batch_rng.integers(0, t, size=cfg.batch_on)
            c_loss, c_grads = critic_on_policy_loss(
                self.critic, xs[idx], targets[idx], pm, cfg.penalty_weight)
            a_loss, a_grads = actor_on_policy_loss(
                self.actor, xs[idx], traj.cont_actions[idx],
                traj.logp_old[idx], adv[idx], cfg.clip_eps,
                cfg.entropy_weight, cfg.normalize_advantages)
            if self.uses_off_policy and len(self.buffer):
                oc_loss, oc_grads, oa_loss, oa_grads = self._off_policy_pass()
                c_loss += cfg.beta_critic * oc_loss
                a_loss += cfg.beta_actor * oa_loss
                c_grads = [g + cfg.beta_critic * og
                           for g, og in zip(c_grads, oc_grads)]
                a_grads = [g + cfg.beta_actor * og
                           for g, og in zip(a_grads, oa_grads)]
            if not (np.isfinite(c_loss) and np.isfinite(a_loss)):
                raise NonFiniteLoss(
                    f"episode {episode}: critic={c_loss} actor={a_loss}")
            adam_step(self.critic_opt, self.critic.params(), c_grads, lr=lr_c)
            adam_step(self.actor_opt, self.actor.params(), a_grads, lr=lr_a)
            self.critic.assert_finite()
            self.actor.assert_finite()
            critic_loss, actor_loss = c_loss, a_loss
        return critic_loss, actor_loss

    def _off_policy_pass(self):
        cfg = self.cfg
        items = self.buffer.sample(cfg.batch_off, cfg.sample_decay,
                                   self.replay_rng)
        xs = states_to_inputs(self.model, [it.state for it in items])
        xs_next = states_to_inputs(self.model, [it.next_state for it in items])
        costs = np.array([it.cost for it in items])
        v_next, _ = self.critic.forward(xs_next)
        targets = costs + cfg.gamma * v_next.ravel()
        oc_loss, oc_grads = critic_off_policy_loss(self.critic, xs, targets)
        if cfg.off_policy_fresh_next:
            sim_next = []
            sampler = make_sampler(self.model, self.actor)
            for it in items:
                _, assign = sampler(it.state, self.model_rng)
                nxt, _ = self.model.step(it.state, SchedAction(assign=assign),
                                         self.model_rng)
                sim_next.append(nxt)
        else:
            sim_next = [it.next_state for it in items]
        v_sim, _ = self.critic.forward(states_to_inputs(self.model, sim_next))
        future = costs + cfg.gamma * v_sim.ravel()
        stored_actions = np.stack([it.cont_action for it in items])
        oa_loss, oa_grads = actor_off_policy_loss(
            self.actor, xs, stored_actions, future, cfg.off_entropy_weight)
        return oc_loss, oc_grads, oa_loss, oa_grads

    def _write_checkpoint(self, episode: int) -> None:
        doc = {
            "version": CHECKPOINT_VERSION,
            "episode": episode,
            "actor": net_to_doc(self.actor),
            "critic": net_to_doc(self.critic),
            "actor_opt": adam_to_doc(self.actor_opt),
            "critic_opt": adam_to_doc(self.critic_opt),
        }
        path = self.out_dir / "checkpoints" / f"{episode}.json"
        path.write_text(json.dumps(doc))

    def _write_metrics(self) -> None:
        with open(self.out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            writer.writerows(self.metrics)


def train(model: SystemModel, config: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    return Trainer(model, config, out_dir=out_dir).train()


def greedy_policy_fn(model: SystemModel, actor: Mlp):
    """Deterministic mean-action policy."""
    def policy(state: SchedState) -> np.ndarray:
        x = normalize_state(model, state.aoi, state.channels)
        out, _ = actor.forward(x)
        mu, _, _ = split_policy_output(out)
        return action_map(mu[0], state, model)
    return policy


def evaluate(model: SystemModel, policy_fn, steps: int,
             rng: np.random.Generator, n_blocks: int = 20) -> dict:
    """Long single-run closed-loop average cost with a block-mean SE."""
    state = model.initial_state(rng)
    costs = np.empty(steps)
    for t in range(steps):
        action = SchedAction(assign=np.asarray(policy_fn(state)))
        state, cost = model.step(state, action, rng)
        costs[t] = cost
    blocks = np.array_split(costs, n_blocks)
    means = np.array([b.mean() for b in blocks])
    se = float(means.std(ddof=1) / np.sqrt(len(means))) if len(means) > 1 else 0.0
    return {"avg_cost": float(costs.mean()), "se": se, "steps": steps}


def load_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    return {
        "episode": doc["episode"],
        "actor": net_from_doc(doc["actor"]),
        "critic": net_from_doc(doc["critic"]),
        "actor_opt_doc": doc["actor_opt"],
        "critic_opt_doc": doc["critic_opt"],
    }
