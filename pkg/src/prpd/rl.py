"""PPO actor-critic: rollout collection, GAE, clipped surrogate, evaluation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from prpd.env.soil import SimulationFault
from prpd.env.world import ACT_DIM, OBS_DIM, ExcavationEnv
from prpd.tensor import (
    AdamState,
    GaussianHead,
    Mlp,
    Tensor,
    TrainingDivergenceError,
    adam_step,
    backprop,
    clamp_log_std,
    clip,
    exp,
    gaussian_entropy,
    gaussian_log_prob,
    minimum,
    mlp_forward,
    param_hash,
    reshape,
    square,
    tmean,
)

# fixed input scaling: mm -> dm, angles and the flag untouched
OBS_SCALE = np.array([0.01, 0.01, 1.0, 1.0, 0.01, 0.01, 0.01, 1.0])
# policy outputs live in roughly unit range; the env clamps after scaling
ACTION_SCALE = np.array([30.0, 30.0, 30.0, 0.2])


@dataclass
class PpoConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gae_lambda: float = 0.95
    horizon: int = 64
    n_envs: int = 16
    epochs: int = 8
    minibatch_size: int = 256
    lr: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.horizon <= 0 or self.n_envs <= 0 or self.epochs < 0 or self.minibatch_size <= 0:
            raise ValueError("horizon, n_envs, minibatch_size must be positive and epochs >= 0")

    @property
    def samples_per_iteration(self) -> int:
        return self.horizon * self.n_envs


class ActorCritic:
    """Gaussian policy (theta), state value V (phi) and auxiliary Q (psi)."""

    def __init__(self, hidden: Sequence[int] = (64, 64), seed: int = 0, init_log_std: float = 0.0):
        rng = np.random.default_rng(seed)
        hidden = list(hidden)
        self.pi = Mlp([OBS_DIM, *hidden, ACT_DIM], rng, out_scale=0.01)
        self.log_std = Tensor(np.full(ACT_DIM, float(init_log_std)), requires_grad=True)
        self.v = Mlp([OBS_DIM, *hidden, 1], rng)
        self.q = Mlp([OBS_DIM + ACT_DIM, *hidden, 1], rng)
        clamp_log_std(self.log_std)

    def policy_params(self) -> list[Tensor]:
        return self.pi.parameters() + [self.log_std]

    def value_params(self) -> list[Tensor]:
        return self.v.parameters()

    def q_params(self) -> list[Tensor]:
        return self.q.parameters()

    def parameters(self) -> list[Tensor]:
        return self.policy_params() + self.value_params() + self.q_params()

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        names = []
        for net_name, net in (("pi", self.pi), ("v", self.v), ("q", self.q)):
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                names += [(f"{net_name}.w{k}", w.shape), (f"{net_name}.b{k}", b.shape)]
            if net_name == "pi":
                names.append(("pi.log_std", self.log_std.shape))
        return names

    def ordered_params(self) -> list[Tensor]:
        """Parameters in ``layout`` order."""
        out = []
        for net in (self.pi, self.v, self.q):
            for w, b in zip(net.weights, net.biases):
                out += [w, b]
            if net is self.pi:
                out.append(self.log_std)
        return out

    def fingerprint(self) -> str:
        return param_hash(self.ordered_params())

    def clone(self) -> "ActorCritic":
        return copy.deepcopy(self)

    # graph-free helpers used during rollouts and alpha estimation

    def mean_action(self, obs_scaled: np.ndarray) -> np.ndarray:
        return self.pi.predict(obs_scaled)

    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def value(self, obs_scaled: np.ndarray) -> np.ndarray:
        return self.v.predict(obs_scaled)[..., 0]

    def q_value(self, obs_scaled: np.ndarray, act: np.ndarray) -> np.ndarray:
        return self.q.predict(np.concatenate([obs_scaled, act], axis=-1))[..., 0]

    def head(self, obs_scaled) -> GaussianHead:
        return GaussianHead(mlp_forward(self.pi, obs_scaled), self.log_std)


def log_prob_np(mean: np.ndarray, log_std: np.ndarray, act: np.ndarray) -> np.ndarray:
    z = (act - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2 * np.pi), axis=-1)


@dataclass
class RolloutBuffer:
    """Time-major (T, E) arrays; observations are stored already scaled."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise RuntimeError("advantages not computed")
        n = len(self)
        return {
            "obs": self.obs.reshape(n, OBS_DIM),
            "actions": self.actions.reshape(n, ACT_DIM),
            "rewards": self.rewards.reshape(n),
            "next_obs": self.next_obs.reshape(n, OBS_DIM),
            "log_probs": self.log_probs.reshape(n),
            "terminals": self.terminals.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


def collect_rollout(ac: ActorCritic, envs: Sequence[ExcavationEnv], horizon: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Run every env for ``horizon`` steps from a fresh episode.

    Each env's first episode is the one scored for the success rate; envs that
    finish early are reset in place and keep producing samples.
    """
    E = len(envs)
    obs = np.zeros((horizon, E, OBS_DIM))
    nxt = np.zeros((horizon, E, OBS_DIM))
    acts = np.zeros((horizon, E, ACT_DIM))
    rews = np.zeros((horizon, E))
    logp = np.zeros((horizon, E))
    dones = np.zeros((horizon, E), dtype=bool)
    terms = np.zeros((horizon, E), dtype=bool)

    current = np.stack([env.reset() for env in envs]) * OBS_SCALE
    first_open = np.ones(E, dtype=bool)
    first_success = np.zeros(E, dtype=bool)
    faults = 0
    voxel_ops = 0
    std = ac.std()
    log_std = ac.log_std.data
    for t in range(horizon):
        mean = ac.mean_action(current)
        a = mean + std * rng.standard_normal(mean.shape)
        obs[t] = current
        acts[t] = a
        logp[t] = log_prob_np(mean, log_std, a)
        for e, env in enumerate(envs):
            try:
                res = env.step(a[e] * ACTION_SCALE)
            except SimulationFault:
                faults += 1
                nxt[t, e] = current[e]
                dones[t, e] = True
                first_open[e] = False
                current[e] = env.reset() * OBS_SCALE
                continue
            voxel_ops += res.voxel_ops
            rews[t, e] = res.reward
            nxt[t, e] = res.observation * OBS_SCALE
            if res.done:
                dones[t, e] = True
                terms[t, e] = res.success
                if first_open[e]:
                    first_success[e] = res.success
                    first_open[e] = False
                current[e] = env.reset() * OBS_SCALE
            else:
                current[e] = nxt[t, e]
    buf = RolloutBuffer(obs, acts, rews, nxt, logp, dones, terms)
    buf.stats = {
        "tau": float(first_success.mean()),
        "episodes": E,
        "successes": int(first_success.sum()),
        "mean_reward": float(rews.mean()),
        "faults": faults,
        "voxel_ops": voxel_ops,
        "first_success": first_success.tolist(),
    }
    return buf


def compute_gae(rewards: np.ndarray, values: np.ndarray, next_values: np.ndarray,
                dones: np.ndarray, gamma: float, lam: float,
                terminals: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """GAE over time-major arrays of shape (T,) or (T, E).

    ``dones`` cut the recursion; ``terminals`` (default: ``dones``) also drop
    the bootstrap value, so time-limit ends still bootstrap from V(s').
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = dones if terminals is None else terminals
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    not_term = 1.0 - np.asarray(terminals, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * not_term[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        adv[t] = running
    return adv, adv + values


def add_advantages(buf: RolloutBuffer, ac: ActorCritic, gamma: float, lam: float) -> None:
    T, E = buf.rewards.shape
    values = ac.value(buf.obs.reshape(-1, OBS_DIM)).reshape(T, E)
    next_values = ac.value(buf.next_obs.reshape(-1, OBS_DIM)).reshape(T, E)
    buf.advantages, buf.returns = compute_gae(buf.rewards, values, next_values, buf.dones,
                                              gamma, lam, buf.terminals)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def clipped_surrogate(ratio, adv, eps: float):
    """Elementwise min(rho*A, clip(rho, 1-eps, 1+eps)*A)."""
    return minimum(ratio * adv, clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(batch: dict[str, np.ndarray], ac: ActorCritic, clip_eps: float, c1: float,
             c2: float) -> tuple[Tensor, dict[str, float]]:
    """Clipped PPO objective written as a quantity to minimise.

    loss = -E[min(rho A, clip(rho) A)] + c1 E[(V - R)^2] - c2 H[pi]
    """
    head = ac.head(batch["obs"])
    logp = gaussian_log_prob(head, batch["actions"])
    ratio = exp(logp - batch["log_probs"])
    surr = tmean(clipped_surrogate(ratio, batch["advantages"], clip_eps))
    v = reshape(mlp_forward(ac.v, batch["obs"]), (len(batch["returns"]),))
    v_loss = tmean(square(v - batch["returns"]))
    entropy = gaussian_entropy(ac.log_std)
    loss = -surr + v_loss * c1 - entropy * c2
    stats = {
        "surrogate": surr.item(),
        "value_loss": v_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(batch["log_probs"] - logp.data)),
    }
    return loss, stats


LossFn = Callable[[dict[str, np.ndarray]], tuple[Tensor, dict[str, float]]]


def make_optimizer(ac: ActorCritic, lr: float) -> AdamState:
    return AdamState(ac.parameters(), lr=lr)


def update_iteration(buf: RolloutBuffer, ac: ActorCritic, optimizer: AdamState, cfg: PpoConfig,
                     rng: np.random.Generator, loss_fn: LossFn | None = None) -> dict[str, float]:
    """Run ``cfg.epochs`` passes of shuffled minibatch steps over the buffer."""
    data = buf.flat()
    data["advantages"] = normalize_advantages(data["advantages"])
    if loss_fn is None:
        def loss_fn(batch):
            return ppo_loss(batch, ac, cfg.clip_eps, cfg.c1, cfg.c2)

    n = len(buf)
    totals: dict[str, float] = {}
    steps = 0
    params = ac.parameters()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            batch = {k: v[idx] for k, v in data.items()}
            optimizer.zero_grad()
            loss, stats = loss_fn(batch)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(f"non-finite loss at update {steps}: {stats}")
            backprop(loss, params)
            adam_step(optimizer)
            clamp_log_std(ac.log_std)
            stats["loss"] = loss.item()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            steps += 1
    out = {k: v / steps for k, v in totals.items()} if steps else {}
    out["updates"] = steps
    return out


def evaluate_policy(ac: ActorCritic, env_factory: Callable[[int], ExcavationEnv], n_episodes: int,
                    seed: int = 0, deterministic: bool = True) -> float:
    """Success rate over ``n_episodes`` fresh episodes.

    The mean action is used by default; with ``deterministic=False`` actions
    are sampled as in training, from an RNG seeded by ``seed`` alone.
    ``env_factory(i)`` builds the i-th evaluation env.
    """
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    std = ac.std()
    successes = 0
    for i in range(n_episodes):
        env = env_factory(i)
        obs = env.reset()
        while True:
            a = ac.mean_action(obs * OBS_SCALE)
            if not deterministic:
                a = a + std * rng.standard_normal(a.shape)
            res = env.step(a * ACTION_SCALE)
            obs = res.observation
            if res.done:
                successes += bool(res.success)
                break
    return successes / n_episodes
