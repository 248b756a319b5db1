"""Soft actor-critic with a tanh-squashed Gaussian policy and twin critics.

The temperature is fixed. Updates are functional: each returns a new agent
and leaves the input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn import MLP, AdamState, NonFiniteError, load_params, mlp_meta, opt_step, save_params

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    alpha: float = 0.2
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch: int = 256


@dataclass(frozen=True)
class SacAgent:
    obs_dim: int
    act_dim: int
    policy_net: MLP
    q_net: MLP
    policy: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    q1_target: np.ndarray
    q2_target: np.ndarray
    cfg: SacConfig
    policy_opt: AdamState
    q1_opt: AdamState
    q2_opt: AdamState

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: np.random.Generator,
               cfg: SacConfig | None = None) -> "SacAgent":
        cfg = cfg or SacConfig()
        pnet = MLP((obs_dim, *cfg.hidden, 2 * act_dim))
        qnet = MLP((obs_dim + act_dim, *cfg.hidden, 1))
        policy = pnet.init(rng)
        q1, q2 = qnet.init(rng), qnet.init(rng)
        return cls(obs_dim, act_dim, pnet, qnet, policy, q1, q2, q1.copy(), q2.copy(), cfg,
                   AdamState.zeros(pnet.n_params), AdamState.zeros(qnet.n_params),
                   AdamState.zeros(qnet.n_params))

    def save(self, directory) -> None:
        d = Path(directory)
        cfg = {"alpha": self.cfg.alpha, "gamma": self.cfg.gamma, "tau": self.cfg.tau,
               "lr": self.cfg.lr, "batch": self.cfg.batch, "hidden": list(self.cfg.hidden)}
        save_params(d / "policy.bin", self.policy, {**mlp_meta(self.policy_net), "sac": cfg,
                                                    "obs_dim": self.obs_dim, "act_dim": self.act_dim})
        for name in ("q1", "q2", "q1_target", "q2_target"):
            save_params(d / f"{name}.bin", getattr(self, name), mlp_meta(self.q_net))

    @classmethod
    def load(cls, directory) -> "SacAgent":
        d = Path(directory)
        policy, meta = load_params(d / "policy.bin")
        c = meta["sac"]
        cfg = SacConfig(tuple(c["hidden"]), c["alpha"], c["gamma"], c["tau"], c["lr"], c["batch"])
        agent = cls.create(meta["obs_dim"], meta["act_dim"], np.random.default_rng(0), cfg)
        nets = {name: load_params(d / f"{name}.bin")[0] for name in ("q1", "q2", "q1_target", "q2_target")}
        return replace(agent, policy=policy, **nets)


def policy_head(net: MLP, params: np.ndarray, obs: np.ndarray, keep: bool = False):
    """Mean and clipped log-std; with ``keep`` also the net cache and the clip mask."""
    out, cache = net.forward(params, obs, keep=True)
    k = out.shape[-1] // 2
    mean, raw = out[..., :k], out[..., k:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise NonFiniteError("non-finite policy output")
    if keep:
        return mean, log_std, cache, (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return mean, log_std


def squashed_log_prob(eps: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """log density of ``tanh(mean + std * eps)`` given the standard-normal draw ``eps``."""
    gauss = -0.5 * eps * eps - log_std - HALF_LOG_2PI
    return np.sum(gauss - np.log(1.0 - action * action + SQUASH_EPS), axis=-1)


def sample_action(agent: SacAgent, obs, rng: np.random.Generator, deterministic: bool = False):
    """Return ``(action, log_prob)``; deterministic mode gives ``(tanh(mean), None)``."""
    mean, log_std = policy_head(agent.policy_net, agent.policy, np.asarray(obs, dtype=float))
    if deterministic:
        return np.tanh(mean), None
    eps = rng.standard_normal(mean.shape)
    a = np.tanh(mean + np.exp(log_std) * eps)
    return a, squashed_log_prob(eps, log_std, a)


def _q_forward(net: MLP, params: np.ndarray, obs: np.ndarray, act: np.ndarray):
    x = np.concatenate([obs, act], axis=-1)
    q, cache = net.forward(params, x, keep=True)
    return q[:, 0], cache


def twin_critic(agent: SacAgent, target: bool = False):
    """Closure ``(obs, act) -> (min Q, dminQ/dact)`` over the two critics."""
    p1, p2 = (agent.q1_target, agent.q2_target) if target else (agent.q1, agent.q2)
    net = agent.q_net

    def critic(obs, act):
        q1, c1 = _q_forward(net, p1, obs, act)
        q2, c2 = _q_forward(net, p2, obs, act)
        pick1 = q1 <= q2
        ones = np.ones((q1.shape[0], 1))
        _, gx1 = net.backward(p1, c1, ones)
        _, gx2 = net.backward(p2, c2, ones)
        k = act.shape[-1]
        grad = np.where(pick1[:, None], gx1[:, -k:], gx2[:, -k:])
        return np.minimum(q1, q2), grad

    return critic


def actor_loss_and_grad(net: MLP, params: np.ndarray, obs: np.ndarray, eps: np.ndarray,
                        alpha: float, critic):
    """Reparameterized actor objective ``mean(alpha * log_pi - Q)`` and its gradient.

    ``critic(obs, act)`` returns the critic value and its action gradient, so a
    hand-written critic can stand in for the learned ones.
    Returns ``(loss, grad, log_prob)``.
    """
    mean, log_std, cache, free = policy_head(net, params, obs, keep=True)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    logp = squashed_log_prob(eps, log_std, a)
    q, dq_da = critic(obs, a)
    n = obs.shape[0]
    loss = float(np.mean(alpha * logp - q))
    one_m = 1.0 - a * a
    dlogp_du = 2.0 * a * one_m / (one_m + SQUASH_EPS)
    dq_du = dq_da * one_m
    g_u = (alpha * dlogp_du - dq_du) / n
    g_mean = g_u
    g_log_std = (g_u * std * eps - alpha / n) * free
    grad, _ = net.backward(params, cache, np.concatenate([g_mean, g_log_std], axis=-1))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite actor loss")
    return loss, grad, logp


def critic_targets(agent: SacAgent, obs_next: np.ndarray, reward: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    a_next, logp_next = sample_action(agent, obs_next, rng)
    q_next = _min_target(agent, obs_next, a_next)
    return reward + agent.cfg.gamma * (q_next - agent.cfg.alpha * logp_next)


def _min_target(agent, obs, act):
    x = np.concatenate([obs, act], axis=-1)
    q1 = agent.q_net.forward(agent.q1_target, x)[:, 0]
    q2 = agent.q_net.forward(agent.q2_target, x)[:, 0]
    return np.minimum(q1, q2)


def critic_loss_and_grad(agent: SacAgent, obs, act, y):
    """Squared-error regression of both critics to fixed targets ``y``.

    Loss is the mean over the batch and over the two critics.
    """
    n = obs.shape[0]
    out = []
    total = 0.0
    for params in (agent.q1, agent.q2):
        q, cache = _q_forward(agent.q_net, params, obs, act)
        err = q - y
        total += 0.5 * float(np.mean(err * err))
        g, _ = agent.q_net.backward(params, cache, (err / n)[:, None])
        out.append(g)
    if not np.isfinite(total):
        raise NonFiniteError("non-finite critic loss")
    return total, out[0], out[1]


def critic_update(agent: SacAgent, batch, lr: float, rng: np.random.Generator):
    """One Adam step on both critics. ``batch`` is ``(obs, act, reward, obs_next)``."""
    obs, act, rew, obs_next = batch
    y = critic_targets(agent, obs_next, rew, rng)
    loss, g1, g2 = critic_loss_and_grad(agent, obs, act, y)
    q1, s1 = opt_step("adam", agent.q1, g1, lr, agent.q1_opt)
    q2, s2 = opt_step("adam", agent.q2, g2, lr, agent.q2_opt)
    return replace(agent, q1=q1, q2=q2, q1_opt=s1, q2_opt=s2), loss


def actor_update(agent: SacAgent, batch, lr: float, rng: np.random.Generator):
    """One Adam step on the policy. Returns ``(agent, loss, entropy_estimate)``."""
    obs = batch[0]
    eps = rng.standard_normal((obs.shape[0], agent.act_dim))
    loss, grad, logp = actor_loss_and_grad(agent.policy_net, agent.policy, obs, eps,
                                           agent.cfg.alpha, twin_critic(agent))
    policy, state = opt_step("adam", agent.policy, grad, lr, agent.policy_opt)
    return replace(agent, policy=policy, policy_opt=state), loss, float(-np.mean(logp))


def soft_target_update(agent: SacAgent, tau: float) -> SacAgent:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return replace(agent,
                   q1_target=tau * agent.q1 + (1.0 - tau) * agent.q1_target,
                   q2_target=tau * agent.q2 + (1.0 - tau) * agent.q2_target)


def sac_update(agent: SacAgent, batch, rng: np.random.Generator, lr: float | None = None):
    """Critic step, actor step, target smoothing. Returns ``(agent, stats)``."""
    lr = agent.cfg.lr if lr is None else lr
    agent, c_loss = critic_update(agent, batch, lr, rng)
    agent, a_loss, ent = actor_update(agent, batch, lr, rng)
    agent = soft_target_update(agent, agent.cfg.tau)
    return agent, {"critic_loss": c_loss, "actor_loss": a_loss, "entropy_estimate": ent}
