"""PPO with a Beta policy head: rollouts, GAE, clipped-surrogate updates, training and evaluation."""
from __future__ import annotations

import logging
import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .auction import (
    DEFAULT_EPSILON,
    EvalTally,
    UndefinedMetricError,
    max_profit_capture,
    tally_bids,
    win_ratio,
)
from .env import BiddingEnv, EnvConfig, EnvError
from .market import RngStream
from .nn import (
    AdamState,
    DenseNetwork,
    adam_step,
    beta_entropy,
    beta_entropy_grad,
    beta_log_prob,
    beta_log_prob_grad,
    beta_mean,
    beta_params,
    beta_params_grad,
    beta_sample,
)
from .replay import ScenarioStream

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("update_index", "mean_reward", "WR", "MPC", "policy_loss", "value_loss", "entropy",
                 "clip_fraction", "approx_kl")


@dataclass(frozen=True)
class PPOConfig:
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.0
    epochs_per_update: int = 4
    minibatch_size: int = 256
    rollout_length: int = 2048
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    max_updates: int = 200
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (64, 64)
    num_workers: int = 1
    eval_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.num_workers < 1 or self.rollout_length < self.num_workers:
            raise ValueError("need 1 <= num_workers <= rollout_length")


class ActorCritic:
    """Shared tanh trunk; the linear output carries (raw alpha, raw beta, value)."""

    def __init__(self, net: DenseNetwork):
        if net.layer_sizes[-1] != 3:
            raise ValueError("actor-critic network needs exactly 3 outputs")
        self.net = net

    @classmethod
    def create(cls, obs_dim: int, hidden_sizes: Sequence[int], rng: np.random.Generator) -> "ActorCritic":
        return cls(DenseNetwork.initialize([obs_dim, *hidden_sizes, 3], rng))

    @property
    def obs_dim(self) -> int:
        return self.net.layer_sizes[0]

    def heads(self, obs, record: bool = False):
        out = self.net.forward(obs, record=record)
        a, b = beta_params(out[..., 0], out[..., 1])
        return a, b, out[..., 2]

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Return ``(action, log_prob, value)`` for one observation."""
        a, b, value = self.heads(obs)
        if deterministic:
            x = beta_mean(a, b)
        else:
            x = beta_sample(a, b, rng)
        return float(x), float(beta_log_prob(a, b, x)), float(value)

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.net.copy())


@dataclass
class Trajectory:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    wins: np.ndarray
    profits: np.ndarray
    thresholds: np.ndarray
    mevs: np.ndarray
    last_value: float = 0.0

    def __len__(self):
        return int(self.actions.shape[0])

    @classmethod
    def concatenate(cls, parts: Sequence["Trajectory"]) -> "Trajectory":
        """Join segments in the given order; only the last segment's bootstrap survives.

        Segments other than the last must end in a terminal step or carry a
        bootstrap folded in by the caller (see :func:`_fold_bootstrap`).
        """
        names = [f for f in cls.__dataclass_fields__ if f != "last_value"]
        joined = {n: np.concatenate([getattr(p, n) for p in parts]) for n in names}
        return cls(**joined, last_value=parts[-1].last_value)


def collect_rollout(policy: ActorCritic, env: BiddingEnv, length: int, rng: np.random.Generator) -> Trajectory:
    """Step ``env`` up to ``length`` times with actions sampled from ``policy``."""
    if env.done or env.observation is None:
        raise EnvError("environment is exhausted; reset it before collecting")
    obs_l, act_l, lp_l, rew_l, val_l, done_l = [], [], [], [], [], []
    win_l, prof_l, thr_l, mev_l = [], [], [], []
    obs = env.observation
    for _ in range(length):
        action, logp, value = policy.act(obs, rng)
        reward, next_obs, done, info = env.step(action)
        obs_l.append(obs)
        act_l.append(action)
        lp_l.append(logp)
        rew_l.append(reward)
        val_l.append(value)
        done_l.append(float(done))
        win_l.append(info["won"])
        prof_l.append(info["profit"])
        thr_l.append(info["threshold"])
        mev_l.append(info["mev"])
        obs = next_obs
        if done:
            break
    last_value = 0.0 if env.done else float(policy.heads(obs)[2])
    return Trajectory(
        obs=np.array(obs_l), actions=np.array(act_l), log_probs=np.array(lp_l), rewards=np.array(rew_l),
        values=np.array(val_l), dones=np.array(done_l), wins=np.array(win_l, dtype=bool),
        profits=np.array(prof_l), thresholds=np.array(thr_l), mevs=np.array(mev_l), last_value=last_value,
    )


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Return ``(advantages, returns)``; ``last_value`` bootstraps the final step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal length")
    adv = _accel.gae(rewards, values, dones, last_value, gamma, lam)
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


@dataclass
class LossTerms:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def ppo_loss(policy: ActorCritic, obs, actions, old_log_probs, advantages, returns, config: PPOConfig,
             with_grad: bool = True):
    """Clipped-surrogate loss on one minibatch, plus its parameter gradients.

    ``loss = -mean(min(r*A, clip(r)*A)) + value_coef*mean((V-R)^2) - entropy_coef*mean(H)``
    """
    n = len(actions)
    out = policy.net.forward(obs, record=with_grad)
    raw_a, raw_b, value = out[:, 0], out[:, 1], out[:, 2]
    a, b = beta_params(raw_a, raw_b)
    logp = beta_log_prob(a, b, actions)
    ratio = np.exp(logp - old_log_probs)
    eps = config.clip_ratio
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * advantages, clipped * advantages)
    ent = beta_entropy(a, b)
    policy_loss = -float(surr.mean())
    value_loss = float(((value - returns) ** 2).mean())
    entropy = float(ent.mean())
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    terms = LossTerms(
        loss=loss, policy_loss=policy_loss, value_loss=value_loss, entropy=entropy,
        clip_fraction=float((np.abs(ratio - 1.0) > eps).mean()),
        approx_kl=float(((ratio - 1.0) - np.log(ratio)).mean()),
    )
    if not with_grad:
        return terms, None

    # the unclipped branch carries the gradient unless clipping is active and binding
    active = np.where(advantages >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    d_logp = np.where(active, -advantages * ratio, 0.0) / n
    gla, glb = beta_log_prob_grad(a, b, actions)
    gea, geb = beta_entropy_grad(a, b)
    d_a = d_logp * gla - config.entropy_coef * gea / n
    d_b = d_logp * glb - config.entropy_coef * geb / n
    sa, sb = beta_params_grad(raw_a, raw_b)
    grad_out = np.empty_like(out)
    grad_out[:, 0] = d_a * sa
    grad_out[:, 1] = d_b * sb
    grad_out[:, 2] = config.value_coef * 2.0 * (value - returns) / n
    return terms, policy.net.backward(grad_out)


def _dump_minibatch(**arrays) -> str:
    fd, path = tempfile.mkstemp(prefix="mevauction-nan-", suffix=".npz")
    with open(fd, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def ppo_update(policy: ActorCritic, adam: AdamState, traj: Trajectory, config: PPOConfig,
               rng: np.random.Generator) -> dict:
    adv, returns = compute_gae(traj.rewards, traj.values, traj.dones, config.gamma, config.gae_lambda,
                               traj.last_value)
    adv = normalize_advantages(adv)
    n = len(traj)
    stats = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")}
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            batch = (traj.obs[idx], traj.actions[idx], traj.log_probs[idx], adv[idx], returns[idx])
            terms, grads = ppo_loss(policy, *batch, config)
            if not math.isfinite(terms.loss):
                path = _dump_minibatch(obs=batch[0], actions=batch[1], old_log_probs=batch[2],
                                       advantages=batch[3], returns=batch[4])
                raise FloatingPointError(f"non-finite PPO loss; minibatch dumped to {path}")
            adam_step(policy.net.params(), grads, adam)
            for k in stats:
                stats[k].append(getattr(terms, k))
    return {k: float(np.mean(v)) for k, v in stats.items()}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class OraclePolicy:
    """Bids just above the known competition threshold."""

    def __init__(self, epsilon: float = DEFAULT_EPSILON):
        self.epsilon = epsilon

    def bids(self, stream: ScenarioStream) -> np.ndarray:
        return np.minimum(stream.thresholds + self.epsilon, 1.0)


class ConstantPolicy:
    def __init__(self, fraction: float):
        self.fraction = float(fraction)

    def bids(self, stream: ScenarioStream) -> np.ndarray:
        return np.full(len(stream), self.fraction)


@dataclass
class EvalResult:
    tally: EvalTally
    win_ratio: float
    mpc: float
    sum_profit: float
    upper_bound: float

    def row(self) -> dict:
        return {"WR": self.win_ratio, "MPC": self.mpc, "SumProfit": self.sum_profit, "UB": self.upper_bound}


def summarize(tally: EvalTally) -> EvalResult:
    wr = win_ratio(tally)
    try:
        mpc, sp, ub = max_profit_capture(tally)
    except UndefinedMetricError:
        sp, ub = float(tally.profits.sum()), 0.0
        mpc = math.nan
    return EvalResult(tally, wr, mpc, sp, ub)


def policy_bids(policy, stream: ScenarioStream, env_config: EnvConfig, stochastic: bool = False,
                seed: int = 0) -> np.ndarray:
    """Fractions ``policy`` bids on every auction of ``stream``, in order."""
    if hasattr(policy, "bids"):
        return np.asarray(policy.bids(stream), dtype=np.float64)
    if env_config.mode == "stateless" and not stochastic:
        # stateless observations do not depend on earlier actions: batch them
        routes = BiddingEnv(env_config, stream, RngStream(seed, 0)).route_matrix()
        obs = np.zeros((len(stream), env_config.obs_dim))
        obs[:, :env_config.route_dim] = routes
        a, b, _ = policy.heads(obs)
        return beta_mean(a, b)
    env = BiddingEnv(env_config, stream, RngStream(seed, 0))
    obs = env.reset()
    rng = RngStream(seed, 0).generator(2)
    out = np.empty(len(stream))
    for t in range(len(stream)):
        action, _, _ = policy.act(obs, rng, deterministic=not stochastic)
        out[t] = action
        _, obs, _, _ = env.step(action)
    return out


def evaluate(policy, stream: ScenarioStream, env_config: EnvConfig = EnvConfig(), stochastic: bool = False,
             seed: int = 0) -> EvalResult:
    """Score ``policy`` on a frozen scenario stream.

    Deterministic mode bids the Beta mean.  Baseline policies exposing
    ``bids(stream)`` are scored directly.
    """
    if len(stream) == 0:
        raise ValueError("cannot evaluate on an empty scenario stream")
    fractions = policy_bids(policy, stream, env_config, stochastic, seed)
    tally = tally_bids(fractions, stream.thresholds, stream.mev_values, env_config.reward_params.epsilon)
    return summarize(tally)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: ActorCritic
    best_policy: ActorCritic
    adam: AdamState
    curve: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    best_validation_mpc: float = math.nan


def _collect_worker(policy, env: BiddingEnv, length: int, rng) -> Trajectory:
    parts = []
    remaining = length
    while remaining > 0:
        if env.done:
            env.reset()
        part = collect_rollout(policy, env, remaining, rng)
        parts.append(part)
        remaining -= len(part)
    return Trajectory.concatenate(_fold_bootstrap(parts))


def _fold_bootstrap(parts: list[Trajectory]) -> list[Trajectory]:
    """Mark non-final segment ends as terminal.

    A segment ending mid-stream would bootstrap from a value that is lost on
    concatenation; treating its end as terminal is exact when gamma is 0 and
    a small truncation otherwise.
    """
    for p in parts[:-1]:
        p.dones[-1] = 1.0
    return parts


def rollout_metrics(traj: Trajectory, epsilon: float) -> tuple[float, float]:
    tally = tally_bids(traj.actions, traj.thresholds, traj.mevs, epsilon)
    res = summarize(tally)
    return res.win_ratio, res.mpc


def train(config: PPOConfig, env_factory: Callable[[int], BiddingEnv], validation: ScenarioStream | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Alternate rollout collection and PPO updates for ``config.max_updates`` rounds.

    ``env_factory(worker_id)`` builds one environment per worker; workers'
    segments are concatenated in worker-id order.  With a validation stream
    the policy with the best deterministic validation MPC is kept.
    """
    root = RngStream(config.seed, 0)
    envs = [env_factory(w) for w in range(config.num_workers)]
    for e in envs:
        e.reset()
    env_cfg = envs[0].config
    policy = ActorCritic.create(env_cfg.obs_dim, config.hidden_sizes, root.generator(10))
    adam = AdamState.for_params(policy.net.params(), lr=config.learning_rate)
    update_rng = root.generator(11)
    worker_rngs = [RngStream(config.seed, 1000 + w).generator(12) for w in range(config.num_workers)]
    per_worker = [config.rollout_length // config.num_workers] * config.num_workers
    per_worker[-1] += config.rollout_length - sum(per_worker)
    eps = env_cfg.reward_params.epsilon

    result = TrainResult(policy=policy, best_policy=policy.copy(), adam=adam)
    best = -math.inf
    pool = ThreadPoolExecutor(config.num_workers) if config.num_workers > 1 else None
    try:
        for u in range(1, config.max_updates + 1):
            if pool is None:
                parts = [_collect_worker(policy, envs[0], per_worker[0], worker_rngs[0])]
            else:
                futures = [pool.submit(_collect_worker, policy, envs[w], per_worker[w], worker_rngs[w])
                           for w in range(config.num_workers)]
                parts = [f.result() for f in futures]
            traj = Trajectory.concatenate(_fold_bootstrap(parts))
            wr, mpc = rollout_metrics(traj, eps)
            stats = ppo_update(policy, adam, traj, config, update_rng)
            row = {"update_index": u, "mean_reward": float(traj.rewards.mean()), "WR": wr, "MPC": mpc, **stats}
            result.curve.append(row)
            if callback is not None:
                callback(row)
            if validation is not None and (u % config.eval_every == 0 or u == config.max_updates):
                res = evaluate(policy, validation, env_cfg)
                result.validation.append({"update_index": u, **res.row()})
                score = res.mpc if not math.isnan(res.mpc) else -math.inf
                if score > best:
                    best = score
                    result.best_policy = policy.copy()
                    result.best_validation_mpc = res.mpc
    finally:
        if pool is not None:
            pool.shutdown()
    if validation is None:
        result.best_policy = policy.copy()
    return result


def config_dict(config: PPOConfig) -> dict:
    d = asdict(config)
    d["hidden_sizes"] = list(config.hidden_sizes)
    return d
