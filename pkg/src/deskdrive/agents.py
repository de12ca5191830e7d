"""Training algorithms over the agent networks: PPO, SAC, behavior cloning.

Action log-densities use the renormalized truncated Gaussian matching the
rollout-time interval sampler, implemented here in torch so importance
ratios, entropy bonuses and the SAC reparameterized samples are all exactly
differentiable with respect to the policy means and stds.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .action import ActionConfig, feasible_ranges
from .errors import EmptyBuffer, EmptyDataset, LengthMismatch, NonFinite
from .nets import AgentNets, batch_obs_to_tensors
from .simkernel import EpisodeLog

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
MIN_MASS = 1e-12


# ---------------------------------------------------------------------------
# Truncated normal, torch side


def trunc_mass(mean, std, lo, hi):
    alpha = (lo - mean) / std
    beta = (hi - mean) / std
    return torch.clamp(torch.special.ndtr(beta) - torch.special.ndtr(alpha), min=MIN_MASS)


def trunc_log_prob(x, mean, std, lo, hi):
    z = (x - mean) / std
    return -0.5 * z * z - torch.log(std) - LOG_SQRT_2PI - torch.log(trunc_mass(mean, std, lo, hi))


def trunc_sample(mean, std, lo, hi, u):
    """Inverse-CDF reparameterized draw; differentiable in mean and std."""
    alpha = (lo - mean) / std
    beta = (hi - mean) / std
    cdf_lo = torch.special.ndtr(alpha)
    mass = torch.clamp(torch.special.ndtr(beta) - cdf_lo, min=MIN_MASS)
    p = torch.clamp(cdf_lo + u * mass, min=1e-15, max=1.0 - 1e-15)
    x = mean + std * torch.special.ndtri(p)
    return torch.clamp(x, min=lo, max=hi)


def trunc_entropy(mean, std, lo, hi):
    alpha = (lo - mean) / std
    beta = (hi - mean) / std
    mass = trunc_mass(mean, std, lo, hi)
    phi_a = torch.exp(-0.5 * alpha * alpha) / math.sqrt(2.0 * math.pi)
    phi_b = torch.exp(-0.5 * beta * beta) / math.sqrt(2.0 * math.pi)
    return (
        torch.log(std * mass)
        + 0.5 * math.log(2.0 * math.pi * math.e)
        + (alpha * phi_a - beta * phi_b) / (2.0 * mass)
    )


# ---------------------------------------------------------------------------
# Advantages


def compute_gae(rewards, values, gamma: float, lam: float):
    """Generalized advantage recursion; lam = 1 gives return-minus-value.

    values must carry one bootstrap entry past the last reward (0 at a
    terminal). Returns (advantages, value targets).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) != len(rewards) + 1:
        raise LengthMismatch(f"need {len(rewards) + 1} values, got {len(values)}")
    adv = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


# ---------------------------------------------------------------------------
# Transitions / replay


@dataclass
class Transition:
    obs: np.ndarray  # (C, H, W) uint8
    speed: float
    action: np.ndarray  # (n, 2)
    lo: np.ndarray  # (n, 2) feasible lower bounds
    hi: np.ndarray
    reward: float
    next_obs: np.ndarray
    next_speed: float
    next_lo: np.ndarray
    next_hi: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform with-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be > 0")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, seed: int) -> list[Transition]:
        if not self._items:
            raise EmptyBuffer("replay buffer is empty")
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


def episode_to_transitions(log: EpisodeLog, action_cfg: ActionConfig, limits) -> list[Transition]:
    """Unpack an episode (with collected observations) into SAC transitions."""
    if log.observations is None:
        raise ValueError("episode was collected without observations")
    out = []
    n = len(log.steps)
    prev_speed = None
    for i, step in enumerate(log.steps):
        obs = log.observations[i]
        speed = log.obs_speeds[i]
        rg = feasible_ranges(speed, limits, action_cfg)
        lo = np.column_stack([rg.dr[:, 0], rg.dphi[:, 0]])
        hi = np.column_stack([rg.dr[:, 1], rg.dphi[:, 1]])
        done = step.status != "running"
        if i + 1 < n:
            nxt_obs, nxt_speed = log.observations[i + 1], log.obs_speeds[i + 1]
        else:
            nxt_obs, nxt_speed = np.zeros_like(obs), 0.0
        nrg = feasible_ranges(nxt_speed, limits, action_cfg)
        out.append(
            Transition(
                obs=obs,
                speed=speed,
                action=step.action.steps.copy(),
                lo=lo,
                hi=hi,
                reward=step.reward,
                next_obs=nxt_obs,
                next_speed=nxt_speed,
                next_lo=np.column_stack([nrg.dr[:, 0], nrg.dphi[:, 0]]),
                next_hi=np.column_stack([nrg.dr[:, 1], nrg.dphi[:, 1]]),
                done=done,
            )
        )
    return out


# ---------------------------------------------------------------------------
# PPO


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    c1: float = 0.5  # value-loss coefficient
    c2: float = 0.003  # entropy coefficient
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    max_kl: float = 0.05
    normalize_adv: bool = True
    kl_penalty: bool = False
    kl_target: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


def _policy_log_prob(nets: AgentNets, feat, actions, lo, hi):
    """Summed truncated log density of actions under the nets' means/stds.

    Means are projected into their feasible interval exactly as the rollout
    sampler does, so recomputed densities match behavioral ones.
    """
    means, log_std, _ = nets.pi(feat)
    std = torch.exp(log_std).reshape(1, 1, 2).expand_as(means)
    proj = torch.clamp(means, min=lo, max=hi)
    logp = trunc_log_prob(actions, proj, std, lo, hi)
    return logp.sum(dim=(1, 2)), proj, std


def ppo_loss(batch: dict, nets: AgentNets, old_nets: AgentNets, cfg: PPOConfig):
    """Clipped-surrogate composite loss (returned for minimization).

    batch tensors: obs, speed, action, lo, hi, adv, ret. The old policy's
    log-probs are recomputed from the frozen snapshot on the same minibatch,
    so with unchanged parameters the ratio is exactly one.
    """
    feat = nets.feature(batch["obs"], batch["speed"])
    logp_new, proj, std = _policy_log_prob(nets, feat, batch["action"], batch["lo"], batch["hi"])
    with torch.no_grad():
        old_feat = old_nets.feature(batch["obs"], batch["speed"])
        logp_old, _, _ = _policy_log_prob(old_nets, old_feat, batch["action"], batch["lo"], batch["hi"])
    ratio = torch.exp(logp_new - logp_old)
    adv = batch["adv"]
    clip_term = torch.minimum(
        ratio * adv, torch.clamp(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    ).mean()
    value = nets.v(feat)
    vf = ((value - batch["ret"]) ** 2).mean()
    entropy = trunc_entropy(proj, std, batch["lo"], batch["hi"]).sum(dim=(1, 2)).mean()
    approx_kl = (logp_old - logp_new).mean()
    objective = clip_term - cfg.c1 * vf + cfg.c2 * entropy
    if cfg.kl_penalty:
        objective = objective - batch["kl_beta"] * approx_kl.clamp(min=0.0)
    loss = -objective
    if not torch.isfinite(loss):
        raise NonFinite("PPO loss is not finite")
    info = {
        "loss": float(loss.detach()),
        "clip_term": float(clip_term.detach()),
        "value_loss": float(vf.detach()),
        "entropy": float(entropy.detach()),
        "approx_kl": float(approx_kl.detach()),
    }
    return loss, info


class PPOTrainer:
    def __init__(self, nets: AgentNets, cfg: PPOConfig, action_cfg: ActionConfig, limits):
        self.nets = nets
        self.cfg = cfg
        self.action_cfg = action_cfg
        self.limits = limits
        self.opt = torch.optim.Adam(nets.trainable(), lr=cfg.lr)
        self.kl_beta = 1.0

    def _flatten(self, episodes: list[EpisodeLog]):
        obs, speeds, actions, lows, highs, advs, rets = [], [], [], [], [], [], []
        gamma, lam = self.cfg.gamma, self.cfg.gae_lambda
        for ep in episodes:
            if ep.observations is None or not ep.steps:
                continue
            x, s = batch_obs_to_tensors(
                np.stack(ep.observations), np.asarray(ep.obs_speeds, dtype=float)
            )
            with torch.no_grad():
                values = self.nets.v(self.nets.feature(x, s)).numpy().astype(float)
            rewards = np.array([st.reward for st in ep.steps])
            values_b = np.concatenate([values, [0.0]])  # all episodes end terminal
            adv, ret = compute_gae(rewards, values_b, gamma, lam)
            for i, st in enumerate(ep.steps):
                obs.append(ep.observations[i])
                speeds.append(ep.obs_speeds[i])
                actions.append(st.action.steps)
                rg = feasible_ranges(ep.obs_speeds[i], self.limits, self.action_cfg)
                lows.append(np.column_stack([rg.dr[:, 0], rg.dphi[:, 0]]))
                highs.append(np.column_stack([rg.dr[:, 1], rg.dphi[:, 1]]))
            advs.append(adv)
            rets.append(ret)
        if not obs:
            return None
        adv = np.concatenate(advs)
        if self.cfg.normalize_adv:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        return {
            "obs": np.stack(obs),
            "speed": np.array(speeds, dtype=float),
            "action": np.stack(actions),
            "lo": np.stack(lows),
            "hi": np.stack(highs),
            "adv": adv,
            "ret": np.concatenate(rets),
        }

    def update(self, episodes: list[EpisodeLog], seed: int = 0) -> dict:
        data = self._flatten(episodes)
        if data is None:
            return {"updates": 0}
        n = len(data["adv"])
        old_nets = copy.deepcopy(self.nets)
        old_nets.eval()
        rng = np.random.default_rng(seed)
        infos = []
        dropped = 0
        stop = False
        for epoch in range(self.cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.cfg.minibatch):
                idx = order[start : start + self.cfg.minibatch]
                x, s = batch_obs_to_tensors(data["obs"][idx], data["speed"][idx])
                mb = {
                    "obs": x,
                    "speed": s,
                    "action": torch.from_numpy(data["action"][idx]).float(),
                    "lo": torch.from_numpy(data["lo"][idx]).float(),
                    "hi": torch.from_numpy(data["hi"][idx]).float(),
                    "adv": torch.from_numpy(data["adv"][idx]).float(),
                    "ret": torch.from_numpy(data["ret"][idx]).float(),
                    "kl_beta": self.kl_beta,
                }
                try:
                    loss, info = ppo_loss(mb, self.nets, old_nets, self.cfg)
                    self.opt.zero_grad()
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(self.nets.trainable(), self.cfg.grad_clip)
                    self.opt.step()
                    infos.append(info)
                except NonFinite:
                    self.opt.zero_grad()
                    dropped += 1
            mean_kl = float(np.mean([i["approx_kl"] for i in infos[-max(1, n // self.cfg.minibatch):]])) if infos else 0.0
            if self.cfg.kl_penalty:
                if mean_kl > 1.5 * self.cfg.kl_target:
                    self.kl_beta = min(self.kl_beta * 2.0, 64.0)
                elif mean_kl < self.cfg.kl_target / 1.5:
                    self.kl_beta = max(self.kl_beta / 2.0, 1.0 / 64.0)
            if mean_kl > self.cfg.max_kl:
                stop = True
                break
        out = {
            "updates": len(infos),
            "dropped": dropped,
            "kl_stop": stop,
            "transitions": n,
        }
        if infos:
            for key in ("loss", "clip_term", "value_loss", "entropy", "approx_kl"):
                out[key] = float(np.mean([i[key] for i in infos]))
        return out


# ---------------------------------------------------------------------------
# SAC


@dataclass(frozen=True)
class SACConfig:
    target_entropy: float = -30.0
    init_alpha: float = 0.1
    tau: float = 0.01
    capacity: int = 5000
    batch_size: int = 64
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    lr_alpha: float = 3e-4
    gamma: float = 0.99
    updates_per_iteration: int = 50

    def __post_init__(self):
        if self.init_alpha <= 0 or not 0 < self.tau <= 1:
            raise ValueError("need init_alpha > 0 and tau in (0, 1]")


def sac_target(reward, gamma, q1_t, q2_t, alpha, logp_next, done):
    """Soft Bellman target: r + gamma * (min Q-bar - alpha log pi) on non-terminals."""
    v_bar = torch.minimum(q1_t, q2_t) - alpha * logp_next
    return reward + gamma * (1.0 - done) * v_bar


def sac_losses(batch: dict, nets: AgentNets, targets: AgentNets, log_alpha: torch.Tensor,
               cfg: SACConfig, gen: torch.Generator):
    """The three SAC losses (twin Q, policy, temperature) on one batch."""
    alpha = log_alpha.exp()
    with torch.no_grad():
        # next action from the online policy (on online features), value from targets
        f_next_on = nets.feature(batch["next_obs"], batch["next_speed"])
        means_n, log_std_n, _ = nets.pi(f_next_on)
        std_n = torch.exp(log_std_n).reshape(1, 1, 2).expand_as(means_n)
        proj_n = torch.clamp(means_n, min=batch["next_lo"], max=batch["next_hi"])
        u = torch.rand(means_n.shape, generator=gen, dtype=means_n.dtype)
        a_next = trunc_sample(proj_n, std_n, batch["next_lo"], batch["next_hi"], u)
        logp_next = trunc_log_prob(a_next, proj_n, std_n, batch["next_lo"], batch["next_hi"]).sum(dim=(1, 2))
        f_next_t = targets.feature(batch["next_obs"], batch["next_speed"])
        q1_t = targets.q1(f_next_t, a_next.flatten(1))
        q2_t = targets.q2(f_next_t, a_next.flatten(1))
        y = sac_target(batch["reward"], cfg.gamma, q1_t, q2_t, alpha.detach(), logp_next, batch["done"])

    feat = nets.feature(batch["obs"], batch["speed"])
    act_flat = batch["action"].flatten(1)
    j_q1 = ((nets.q1(feat, act_flat) - y) ** 2).mean()
    j_q2 = ((nets.q2(feat, act_flat) - y) ** 2).mean()

    feat_pi = feat.detach()
    means, log_std, _ = nets.pi(feat_pi)
    std = torch.exp(log_std).reshape(1, 1, 2).expand_as(means)
    proj = torch.clamp(means, min=batch["lo"], max=batch["hi"])
    u2 = torch.rand(means.shape, generator=gen, dtype=means.dtype)
    a_re = trunc_sample(proj, std, batch["lo"], batch["hi"], u2)
    logp = trunc_log_prob(a_re, proj, std, batch["lo"], batch["hi"]).sum(dim=(1, 2))
    q_min = torch.minimum(nets.q1(feat_pi, a_re.flatten(1)), nets.q2(feat_pi, a_re.flatten(1)))
    j_pi = (alpha.detach() * logp - q_min).mean()

    j_alpha = (-log_alpha.exp() * (logp.detach() + cfg.target_entropy)).mean()

    for name, val in (("J_q1", j_q1), ("J_q2", j_q2), ("J_pi", j_pi), ("J_alpha", j_alpha)):
        if not torch.isfinite(val):
            raise NonFinite(f"SAC {name} is not finite")
    info = {
        "q1_loss": float(j_q1.detach()),
        "q2_loss": float(j_q2.detach()),
        "pi_loss": float(j_pi.detach()),
        "alpha_loss": float(j_alpha.detach()),
        "alpha": float(alpha.detach()),
        "entropy": float(-logp.detach().mean()),
    }
    return j_q1, j_q2, j_pi, j_alpha, info


def polyak_update(target: AgentNets, online: AgentNets, tau: float):
    with torch.no_grad():
        for pt, po in zip(target.parameters(), online.parameters()):
            pt.mul_(1.0 - tau).add_(po, alpha=tau)
        for bt, bo in zip(target.buffers(), online.buffers()):
            bt.copy_(bo)


class SACTrainer:
    def __init__(self, nets: AgentNets, cfg: SACConfig, action_cfg: ActionConfig, limits):
        self.nets = nets
        self.cfg = cfg
        self.action_cfg = action_cfg
        self.limits = limits
        self.buffer = ReplayBuffer(cfg.capacity)
        self.targets = copy.deepcopy(nets)
        self.targets.eval()
        for p in self.targets.parameters():
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(math.log(cfg.init_alpha), requires_grad=True)
        self.opt_q = torch.optim.Adam(
            nets.trainable("q1", "q2") + nets.trainable("feature"), lr=cfg.lr_q
        )
        self.opt_pi = torch.optim.Adam(nets.trainable("pi"), lr=cfg.lr_pi)
        self.opt_alpha = torch.optim.Adam([self.log_alpha], lr=cfg.lr_alpha)

    def push_episodes(self, episodes: list[EpisodeLog]):
        for ep in episodes:
            for tr in episode_to_transitions(ep, self.action_cfg, self.limits):
                self.buffer.push(tr)

    def _batch(self, transitions: list[Transition]):
        obs = np.stack([t.obs for t in transitions])
        nxt = np.stack([t.next_obs for t in transitions])
        x, s = batch_obs_to_tensors(obs, np.array([t.speed for t in transitions]))
        xn, sn = batch_obs_to_tensors(nxt, np.array([t.next_speed for t in transitions]))
        f32 = lambda arr: torch.from_numpy(np.stack(arr)).float()
        return {
            "obs": x,
            "speed": s,
            "next_obs": xn,
            "next_speed": sn,
            "action": f32([t.action for t in transitions]),
            "lo": f32([t.lo for t in transitions]),
            "hi": f32([t.hi for t in transitions]),
            "next_lo": f32([t.next_lo for t in transitions]),
            "next_hi": f32([t.next_hi for t in transitions]),
            "reward": torch.tensor([t.reward for t in transitions], dtype=torch.float32),
            "done": torch.tensor([float(t.done) for t in transitions], dtype=torch.float32),
        }

    def update(self, n_steps: int, seed: int = 0) -> dict:
        if not len(self.buffer):
            return {"updates": 0}
        infos = []
        dropped = 0
        for step in range(n_steps):
            batch = self._batch(self.buffer.sample(self.cfg.batch_size, seed=seed * 100003 + step))
            gen = torch.Generator()
            gen.manual_seed((seed * 100003 + step) & 0x7FFFFFFF)
            try:
                j_q1, j_q2, j_pi, j_alpha, info = sac_losses(
                    batch, self.nets, self.targets, self.log_alpha, self.cfg, gen
                )
            except NonFinite:
                dropped += 1
                continue
            self.opt_q.zero_grad()
            (j_q1 + j_q2).backward()
            self.opt_q.step()
            self.opt_pi.zero_grad()
            j_pi.backward()
            self.opt_pi.step()
            self.opt_alpha.zero_grad()
            j_alpha.backward()
            self.opt_alpha.step()
            polyak_update(self.targets, self.nets, self.cfg.tau)
            infos.append(info)
        out = {"updates": len(infos), "dropped": dropped, "buffer": len(self.buffer)}
        if infos:
            for key in infos[0]:
                out[key] = float(np.mean([i[key] for i in infos]))
        return out


# ---------------------------------------------------------------------------
# Behavior cloning


def behavior_clone(dataset, nets: AgentNets, epochs: int, lr: float,
                   batch_size: int = 64, seed: int = 0) -> list[float]:
    """Supervised pretraining: fit policy means to expert (dR, dphi) sequences.

    dataset is a sequence of ((channels uint8, speed), expert steps (n, 2)).
    Respects freeze masks. Returns the per-epoch mean training loss.
    """
    if not len(dataset):
        raise EmptyDataset("behavior cloning needs a nonempty dataset")
    params = nets.trainable()
    opt = torch.optim.Adam(params, lr=lr)
    obs = np.stack([d[0][0] for d in dataset])
    speeds = np.array([d[0][1] for d in dataset], dtype=float)
    target = torch.from_numpy(np.stack([np.asarray(d[1], dtype=float) for d in dataset])).float()
    rng = np.random.default_rng(seed)
    nets.train()
    losses = []
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, s = batch_obs_to_tensors(obs[idx], speeds[idx])
            feat = nets.feature(x, s)
            means, _, _ = nets.pi(feat)
            loss = ((means - target[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise NonFinite("BC loss is not finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))
    nets.eval()
    return losses
