"""Recurrent actor-critic trained with PPO and GAE.

The actor and critic share a trunk: a 3x3 conv over the one-hot view and a
dense layer over the heading, concatenated into a GRU cell. The GRU hidden
state is the representation ``b(H_t)`` the level-id probe reads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nn_core
from .grid_env import N_ACTIONS, N_TILE_TYPES, VIEW_SIZE, GridEnv, Outcome


@dataclass
class PpoConfig:
    gamma: float = 0.995
    gae_lambda: float = 0.95
    rollout_length: int = 256
    epochs: int = 5
    minibatches: int = 1
    clip: float = 0.2
    workers: int = 32
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    lr: float = 1e-4
    adam_eps: float = 1e-5
    max_grad_norm: float = 0.5
    value_clip: bool = True
    normalize_advantages: bool = True
    hidden_size: int = 64


class PolicyNetwork(nn.Module):
    def __init__(self, hidden_size: int = 64, conv_channels: int = 16, dir_features: int = 5, head_width: int = 32):
        super().__init__()
        self.hidden_size = hidden_size
        self.conv = nn.Conv2d(N_TILE_TYPES, conv_channels, kernel_size=3)
        self.direction = nn.Linear(4, dir_features)
        conv_out = conv_channels * (VIEW_SIZE - 2) ** 2
        self.rnn = nn.GRUCell(conv_out + dir_features, hidden_size)
        self.actor = nn.Sequential(
            nn.Linear(hidden_size, head_width), nn.ReLU(),
            nn.Linear(head_width, head_width), nn.ReLU(),
            nn.Linear(head_width, N_ACTIONS),
        )
        self.critic = nn.Sequential(
            nn.Linear(hidden_size, head_width), nn.ReLU(),
            nn.Linear(head_width, head_width), nn.ReLU(),
            nn.Linear(head_width, 1),
        )

    def features(self, window: torch.Tensor, heading: torch.Tensor) -> torch.Tensor:
        """Non-recurrent encoding for a flat batch of observations."""
        x = F.one_hot(window.long(), N_TILE_TYPES).permute(0, 3, 1, 2).to(nn_core.DTYPE)
        v = F.relu(self.conv(x)).flatten(1)
        d = F.relu(self.direction(F.one_hot(heading.long(), 4).to(nn_core.DTYPE)))
        return torch.cat([v, d], dim=1)

    def heads(self, h: torch.Tensor):
        return self.actor(h), self.critic(h).squeeze(-1)

    def step(self, window, heading, h):
        h = self.rnn(self.features(window, heading), h)
        logits, value = self.heads(h)
        return logits, value, h

    def unroll(self, window, heading, h0, starts):
        """Run a (T, N) sequence; ``starts[t]`` zeroes the hidden state before step t."""
        T, N = heading.shape
        feats = self.features(window.reshape(T * N, VIEW_SIZE, VIEW_SIZE), heading.reshape(T * N))
        feats = feats.reshape(T, N, -1)
        keep = (1.0 - starts.to(nn_core.DTYPE)).unsqueeze(-1)
        h, hs = h0, []
        for t in range(T):
            h = self.rnn(feats[t], h * keep[t])
            hs.append(h)
        hs = torch.stack(hs)
        logits, values = self.heads(hs.reshape(T * N, -1))
        return logits.reshape(T, N, -1), values.reshape(T, N), hs


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalised advantage estimates along axis 0.

    ``values`` carries one extra bootstrap row: ``values[T]`` is V(s_T).
    ``dones[t]`` marks that the episode ended at step t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:T]


@dataclass
class Segment:
    """A contiguous piece of one episode inside a rollout."""

    worker: int
    start: int
    end: int  # exclusive
    tag: object
    level: object
    finished: bool = False
    outcome: Outcome = Outcome.IN_PROGRESS
    ret: float = 0.0


@dataclass
class RolloutBatch:
    window: np.ndarray  # (T, N, 5, 5)
    heading: np.ndarray  # (T, N)
    starts: np.ndarray  # (T, N) bool, episode began at this step
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray  # (T + 1, N) incl. bootstrap
    rewards: np.ndarray
    dones: np.ndarray
    trunk: np.ndarray  # (T, N, H) representation after each observation
    h0: np.ndarray  # (N, H)
    segments: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return int(self.actions.size)

    def segment_slice(self, seg: Segment, arr: np.ndarray) -> np.ndarray:
        return arr[seg.start:seg.end, seg.worker]


class Workers:
    """Persistent vectorised environments; an episode can span rollouts."""

    def __init__(self, n: int, hidden_size: int):
        self.n = n
        self.envs: list[GridEnv | None] = [None] * n
        self.tags: list = [None] * n
        self.obs = [None] * n
        self.h = np.zeros((n, hidden_size))
        self.fresh = np.ones(n, dtype=bool)
        self.returns = np.zeros(n)

    def reset_worker(self, i: int, sampler, rng: np.random.Generator):
        tag, level = sampler()
        env = GridEnv(level)
        _, obs = env.reset(rng)
        self.envs[i], self.tags[i], self.obs[i] = env, tag, obs
        self.h[i] = 0.0
        self.fresh[i] = True
        self.returns[i] = 0.0

    def observations(self):
        window = np.stack([o.window for o in self.obs])
        heading = np.array([int(o.heading_onehot.argmax()) for o in self.obs])
        return window, heading


def sample_actions(logits: torch.Tensor, rng: np.random.Generator):
    logp_all = F.log_softmax(logits, dim=-1).numpy()
    probs = np.exp(logp_all)
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    actions = np.minimum((u[:, None] > cdf).sum(axis=1), N_ACTIONS - 1)
    return actions, logp_all[np.arange(len(actions)), actions]


class PPOAgent:
    def __init__(self, cfg: PpoConfig | None = None, seed: int = 0):
        self.cfg = cfg or PpoConfig()
        self.net = nn_core.build(lambda: PolicyNetwork(self.cfg.hidden_size), seed)
        self.opt = nn_core.Adam(self.net.parameters(), lr=self.cfg.lr, eps=self.cfg.adam_eps,
                                max_grad_norm=self.cfg.max_grad_norm)

    @property
    def hidden_size(self) -> int:
        return self.cfg.hidden_size

    @torch.no_grad()
    def act(self, window, heading, h, rng):
        logits, value, h_new = self.net.step(torch.from_numpy(window), torch.from_numpy(heading),
                                             torch.from_numpy(h))
        actions, logp = sample_actions(logits, rng)
        return actions, logp, value.numpy(), h_new.numpy()

    @torch.no_grad()
    def value(self, window, heading, h):
        # value of the current observation given the hidden state before it
        _, value, _ = self.net.step(torch.from_numpy(window), torch.from_numpy(heading), torch.from_numpy(h))
        return value.numpy()

    # -- data collection
    def collect(self, workers: Workers, sampler, steps: int, rng: np.random.Generator) -> RolloutBatch:
        """Step every worker ``steps`` times; finished episodes restart via ``sampler``."""
        n, H = workers.n, self.hidden_size
        for i in range(n):
            if workers.envs[i] is None:
                workers.reset_worker(i, sampler, rng)
        window = np.zeros((steps, n, VIEW_SIZE, VIEW_SIZE), dtype=np.int8)
        heading = np.zeros((steps, n), dtype=np.int64)
        starts = np.zeros((steps, n), dtype=bool)
        actions = np.zeros((steps, n), dtype=np.int64)
        log_probs = np.zeros((steps, n))
        values = np.zeros((steps + 1, n))
        rewards = np.zeros((steps, n))
        dones = np.zeros((steps, n), dtype=bool)
        trunk = np.zeros((steps, n, H))
        h0 = workers.h.copy()
        seg_start = [0] * n
        segments = []
        for t in range(steps):
            w, hd = workers.observations()
            window[t], heading[t], starts[t] = w, hd, workers.fresh
            workers.fresh[:] = False
            a, lp, v, h_new = self.act(w, hd, workers.h, rng)
            actions[t], log_probs[t], values[t], trunk[t] = a, lp, v, h_new
            workers.h = h_new
            for i in range(n):
                _, obs, r, done = workers.envs[i].step(int(a[i]))
                workers.obs[i] = obs
                rewards[t, i] = r
                workers.returns[i] += r
                if done:
                    dones[t, i] = True
                    env = workers.envs[i]
                    segments.append(Segment(i, seg_start[i], t + 1, workers.tags[i], env.level, True,
                                            env.state.outcome, workers.returns[i]))
                    seg_start[i] = t + 1
                    workers.reset_worker(i, sampler, rng)
        w, hd = workers.observations()
        values[steps] = self.value(w, hd, workers.h)
        for i in range(n):
            if seg_start[i] < steps:
                env = workers.envs[i]
                segments.append(Segment(i, seg_start[i], steps, workers.tags[i], env.level, False,
                                        Outcome.IN_PROGRESS, workers.returns[i]))
        batch = RolloutBatch(window, heading, starts, actions, log_probs, values, rewards, dones, trunk, h0, segments)
        batch.advantages, batch.returns = gae(rewards, values, dones, self.cfg.gamma, self.cfg.gae_lambda)
        return batch

    # -- learning
    def loss_terms(self, batch: RolloutBatch, adv: torch.Tensor):
        cfg = self.cfg
        logits, v, _ = self.net.unroll(torch.from_numpy(batch.window), torch.from_numpy(batch.heading),
                                       torch.from_numpy(batch.h0), torch.from_numpy(batch.starts))
        return ppo_loss(logits, v, torch.from_numpy(batch.actions), torch.from_numpy(batch.log_probs),
                        torch.from_numpy(batch.values[:-1]), torch.from_numpy(batch.returns), adv, cfg)

    def update(self, batch: RolloutBatch) -> dict:
        cfg = self.cfg
        adv = batch.advantages
        if cfg.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        adv_t = torch.from_numpy(adv)
        report = {}
        # minibatches split the worker axis so each keeps its full sequence
        groups = np.array_split(np.arange(batch.actions.shape[1]), cfg.minibatches)
        for _ in range(cfg.epochs):
            for g in groups:
                sub = _select_workers(batch, g)
                terms = {}

                def loss_fn():
                    out = self.loss_terms(sub, adv_t[:, g])
                    terms.update(out)
                    return out["loss"]

                self.opt.minimize(loss_fn)
                report = {k: float(v.detach()) for k, v in terms.items()}
        return report


def _select_workers(batch: RolloutBatch, idx) -> RolloutBatch:
    if len(idx) == batch.actions.shape[1]:
        return batch
    pick = lambda a: a[:, idx]  # noqa: E731
    return RolloutBatch(pick(batch.window), pick(batch.heading), pick(batch.starts), pick(batch.actions),
                        pick(batch.log_probs), pick(batch.values), pick(batch.rewards), pick(batch.dones),
                        pick(batch.trunk), batch.h0[idx], [], pick(batch.advantages), pick(batch.returns))


def ppo_loss(logits, values, actions, old_log_probs, old_values, returns, advantages, cfg: PpoConfig) -> dict:
    """Clipped surrogate + (clipped) squared value error - entropy bonus."""
    logp_all = F.log_softmax(logits, dim=-1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - old_log_probs)
    surr = torch.min(ratio * advantages, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * advantages)
    policy_loss = -surr.mean()
    err = (values - returns) ** 2
    if cfg.value_clip:
        v_clip = old_values + torch.clamp(values - old_values, -cfg.clip, cfg.clip)
        err = torch.max(err, (v_clip - returns) ** 2)
    value_loss = err.mean()
    entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    return {"loss": loss, "policy_loss": policy_loss.detach(), "value_loss": value_loss.detach(),
            "entropy": entropy.detach()}


@torch.no_grad()
def evaluate(agent: PPOAgent, levels, episodes: int, seed: int, chunk: int = 256):
    """Run ``episodes`` stochastic episodes per level; returns (mean_return, solved_rate) arrays."""
    rng = np.random.default_rng(seed)
    jobs = [(li, e) for li in range(len(levels)) for e in range(episodes)]
    returns = np.zeros((len(levels), episodes))
    solved = np.zeros((len(levels), episodes))
    for c0 in range(0, len(jobs), chunk):
        part = jobs[c0:c0 + chunk]
        envs = [GridEnv(levels[li]) for li, _ in part]
        obs = [env.reset(rng)[1] for env in envs]
        h = np.zeros((len(part), agent.hidden_size))
        alive = np.ones(len(part), dtype=bool)
        while alive.any():
            idx = np.flatnonzero(alive)
            w = np.stack([obs[i].window for i in idx])
            hd = np.array([int(obs[i].heading_onehot.argmax()) for i in idx])
            a, _, _, h_new = agent.act(w, hd, h[idx], rng)
            h[idx] = h_new
            for k, i in enumerate(idx):
                _, obs[i], r, done = envs[i].step(int(a[k]))
                if done:
                    li, e = part[i]
                    returns[li, e] = r
                    solved[li, e] = float(envs[i].state.outcome == Outcome.SUCCESS)
                    alive[i] = False
    return returns.mean(axis=1), solved.mean(axis=1)


@dataclass
class EpisodeRecord:
    """One complete episode played without learning."""

    level: object
    values: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    trunk: np.ndarray  # (T, H)
    outcome: Outcome
    ret: float

    @property
    def solved(self) -> bool:
        return self.outcome == Outcome.SUCCESS

    def advantages(self, gamma: float, lam: float):
        """GAE over the finished episode (terminal bootstrap 0)."""
        T = len(self.rewards)
        values = np.append(self.values, 0.0)[:, None]
        dones = np.zeros((T, 1))
        dones[-1] = 1.0
        adv, ret = gae(self.rewards[:, None], values, dones, gamma, lam)
        return adv[:, 0], ret[:, 0]


@torch.no_grad()
def rollout_episodes(agent: PPOAgent, levels, rng: np.random.Generator) -> list[EpisodeRecord]:
    """Play one stochastic episode on each level in lockstep."""
    envs = [GridEnv(lv) for lv in levels]
    obs = [env.reset(rng)[1] for env in envs]
    h = np.zeros((len(envs), agent.hidden_size))
    alive = np.ones(len(envs), dtype=bool)
    vals = [[] for _ in envs]
    rews = [[] for _ in envs]
    trunks = [[] for _ in envs]
    while alive.any():
        idx = np.flatnonzero(alive)
        w = np.stack([obs[i].window for i in idx])
        hd = np.array([int(obs[i].heading_onehot.argmax()) for i in idx])
        a, _, v, h_new = agent.act(w, hd, h[idx], rng)
        h[idx] = h_new
        for k, i in enumerate(idx):
            _, obs[i], r, done = envs[i].step(int(a[k]))
            vals[i].append(v[k])
            rews[i].append(r)
            trunks[i].append(h_new[k])
            if done:
                alive[i] = False
    return [EpisodeRecord(env.level, np.array(vals[i]), np.array(rews[i]), np.array(trunks[i]),
                          env.state.outcome, float(np.sum(rews[i])))
            for i, env in enumerate(envs)]
