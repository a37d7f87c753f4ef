"""Self-play PPO trainer, plus a vanilla policy-gradient mode for ablation.

Each training iteration collects a batch of auction episodes by self-play,
computes reward-to-go returns and value-baseline advantages, and runs
mini-batch epochs that ascend the clipped surrogate objective (with entropy
regularisation) while descending the value-function MSE. Symmetric auctions
share one policy across all seats; asymmetric ones train one policy per seat.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .envs import (
    AuctionFormat,
    AuctionId,
    AuctionSpec,
    draw_types,
    korean_signals_batch,
    settle_batch,
)
from .nets import Adam, GaussianPolicy, ValueNet


class TrainingDiverged(RuntimeError):
    """Raised when a loss or network output stops being finite."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class PpoConfig:
    iterations: int = 500
    episodes_per_iteration: int = 1000
    minibatch_size: int = 256
    epochs: int = 4
    clip_eps: float = 0.2
    gamma: float = 1.0
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    entropy_coef_start: float = 1e-2
    entropy_coef_end: float = 1e-4
    advantage_normalization: bool = True
    self_play_mode: str = "shared"  # or "independent"
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = math.log(0.3)
    lr_anneal: bool = False
    eval_cadence: int = 50  # iterations between exploitability estimates
    eval_type_grid: int = 11
    eval_bid_grid: int = 51
    eval_mc_samples: int = 2000

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.entropy_coef_start < 0.0 or self.entropy_coef_end < 0.0:
            raise ValueError("entropy coefficients must be >= 0")
        if self.self_play_mode not in ("shared", "independent"):
            raise ValueError("self_play_mode must be 'shared' or 'independent'")


@dataclass
class Trajectory:
    """Flat per-step arrays for one policy, episode-major ordering."""

    states: np.ndarray
    actions: np.ndarray  # raw (unclamped) actions on the normalised scale
    rewards: np.ndarray
    log_probs: np.ndarray
    episode_length: int  # steps per episode: 1, or 2 for the Korean format
    values: np.ndarray | None = None


def compute_returns(rewards: np.ndarray, gamma: float, episode_length: int = 1) -> np.ndarray:
    """Discounted reward-to-go, computed within episode boundaries only."""
    r = np.asarray(rewards, dtype=float)
    if episode_length == 1:
        return r.copy()
    per_ep = r.reshape(-1, episode_length)
    out = np.empty_like(per_ep)
    acc = np.zeros(per_ep.shape[0])
    for t in range(episode_length - 1, -1, -1):
        acc = per_ep[:, t] + gamma * acc
        out[:, t] = acc
    return out.reshape(-1)


def compute_advantages(
    returns: np.ndarray, values: np.ndarray, normalize: bool = False
) -> np.ndarray:
    """Advantage estimates R - V(s), optionally standardised over the batch."""
    adv = np.asarray(returns, dtype=float) - np.asarray(values, dtype=float)
    if normalize:
        std = adv.std()
        if std > 1e-12:  # zero-variance batches are left unnormalised
            adv = (adv - adv.mean()) / std
    return adv


def clipped_surrogate(
    log_prob_new: np.ndarray,
    log_prob_old: np.ndarray,
    advantage: np.ndarray,
    clip_eps: float,
) -> np.ndarray:
    """Per-sample clipped objective min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratio = np.exp(np.asarray(log_prob_new) - np.asarray(log_prob_old))
    a = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * a, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a)


def value_loss(values: np.ndarray, returns: np.ndarray) -> float:
    v = np.asarray(values, dtype=float)
    r = np.asarray(returns, dtype=float)
    return float(np.mean((v - r) ** 2))


def state_dim(spec: AuctionSpec) -> int:
    return 3 if spec.format == AuctionFormat.KOREAN else 1


def _collect(
    spec: AuctionSpec,
    policies: list[GaussianPolicy],
    n_episodes: int,
    rng: np.random.Generator,
) -> tuple[list[Trajectory], np.ndarray]:
    """Roll out one batch of self-play episodes.

    Returns one Trajectory per seat plus the per-episode reward matrix
    (episodes, seats). Seat trajectories reference the behaviour policy that
    produced them, so callers pool them per policy object.
    """
    nb = spec.num_bidders
    scales = spec.type_scales()
    types, common = draw_types(spec, n_episodes, rng)

    if spec.format != AuctionFormat.KOREAN:
        states = [(types[:, i] / scales[i])[:, None] for i in range(nb)]
        actions, bids, logps = [], [], []
        for i in range(nb):
            a, b, lp = policies[i].sample(states[i], rng)
            actions.append(a)
            bids.append(b)
            logps.append(lp)
        rewards, _, _ = settle_batch(spec, types, np.column_stack(bids), common)
        trajs = [
            Trajectory(states[i], actions[i], rewards[:, i], logps[i], 1) for i in range(nb)
        ]
        return trajs, rewards

    # Korean: two decision steps per episode, first-price settlement at the end.
    v = types  # uniform [0, 1] valuations
    s0 = [np.column_stack([v[:, i], np.zeros(n_episodes), np.zeros(n_episodes)]) for i in range(nb)]
    a0, b0, lp0 = zip(*(policies[i].sample(s0[i], rng) for i in range(nb)))
    signals = korean_signals_batch(np.column_stack(b0))
    s1 = [np.column_stack([v[:, i], np.ones(n_episodes), signals[:, i]]) for i in range(nb)]
    a1, b1, lp1 = zip(*(policies[i].sample(s1[i], rng) for i in range(nb)))
    fp = dataclasses.replace(spec, format=AuctionFormat.FIRST_PRICE, num_rounds=1)
    final_rewards, _, _ = settle_batch(fp, types, np.column_stack(b1), common)

    trajs = []
    for i in range(nb):
        states = np.stack([s0[i], s1[i]], axis=1).reshape(-1, 3)
        acts = np.stack([a0[i], a1[i]], axis=1).reshape(-1)
        lps = np.stack([lp0[i], lp1[i]], axis=1).reshape(-1)
        rews = np.stack([np.zeros(n_episodes), final_rewards[:, i]], axis=1).reshape(-1)
        trajs.append(Trajectory(states, acts, rews, lps, 2))
    return trajs, final_rewards


def _update_policy(
    policy: GaussianPolicy,
    optimizer: Adam,
    batch: dict[str, np.ndarray],
    config: PpoConfig,
    entropy_coef: float,
    lr: float,
    rng: np.random.Generator,
    vanilla: bool,
) -> None:
    n = batch["states"].shape[0]
    epochs = 1 if vanilla else config.epochs
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start : start + config.minibatch_size]
            states = batch["states"][idx]
            actions = batch["actions"][idx]
            adv = batch["advantages"][idx]
            logp_old = batch["log_probs"][idx]

            policy.zero_grads()
            if vanilla:
                coeffs = adv / idx.size
            else:
                logp_new = policy.log_prob(states, actions)
                if not np.all(np.isfinite(logp_new)):
                    raise FloatingPointError("non-finite log probabilities")
                ratio = np.exp(logp_new - logp_old)
                surr1 = ratio * adv
                surr2 = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
                # Gradient flows through the unclipped branch only where it is
                # the minimiser (ties included, covering the inactive-clip case).
                coeffs = np.where(surr1 <= surr2, ratio * adv, 0.0) / idx.size
            policy.log_prob_backward(states, actions, coeffs)
            policy.add_entropy_grad(entropy_coef)
            optimizer.step(policy.params(), policy.grads(), lr=lr)
            policy.clamp_log_std()


def _update_value(
    value_net: ValueNet,
    optimizer: Adam,
    batch: dict[str, np.ndarray],
    config: PpoConfig,
    lr: float,
    rng: np.random.Generator,
    vanilla: bool,
) -> float:
    n = batch["states"].shape[0]
    last = 0.0
    epochs = 1 if vanilla else config.epochs
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start : start + config.minibatch_size]
            value_net.zero_grads()
            loss = value_net.mse_backward(batch["states"][idx], batch["returns"][idx])
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite value loss")
            optimizer.step(value_net.params(), value_net.grads(), lr=lr)
            last = loss
    return last


@dataclass
class PpoResult:
    policies: list[GaussianPolicy]
    value_nets: list[ValueNet]
    metrics: list[dict]
    shared: bool
    iteration_seconds: list[float] = field(default_factory=list)


def _oracle_error(
    spec: AuctionSpec, auction_id: AuctionId | None, policy: GaussianPolicy, scale: float
) -> tuple[float | None, float | None]:
    if auction_id is None:
        return None, None
    strat = oracles.oracle_strategy(auction_id)
    if not strat.has_closed_form:
        return None, None
    lo, hi = spec.type_support(0)
    grid = lo + (hi - lo) * (np.arange(21) + 0.5) / 21.0
    learned = policy.mean_bids((grid / scale)[:, None])
    resid = learned - np.asarray(strat.bid_fn(grid), dtype=float)
    return float(np.sqrt(np.mean(resid**2))), float(np.max(np.abs(resid)))


def _dump(policies: list[GaussianPolicy], value_nets: list[ValueNet], iteration: int) -> dict:
    def stats(arrs):
        flat = np.concatenate([a.ravel() for a in arrs])
        return {
            "finite_fraction": float(np.mean(np.isfinite(flat))),
            "max_abs": float(np.nanmax(np.abs(flat))),
        }

    return {
        "iteration": iteration,
        "policy_params": [stats(p.params()) for p in policies],
        "value_params": [stats(v.params()) for v in value_nets],
        "policy_std": [p.std for p in policies],
    }


def train(
    spec: AuctionSpec,
    config: PpoConfig,
    seed: int,
    auction_id: AuctionId | None = None,
    vanilla: bool = False,
) -> PpoResult:
    """Run self-play training and return trained policies plus a metrics log.

    One metrics row per iteration: mean reward per agent, policy std, policy
    error against the closed-form oracle when one exists, and an exploitability
    estimate every ``eval_cadence`` iterations. Deterministic given the seed.
    """
    from . import metrics as metrics_mod  # local import to avoid a cycle

    shared = config.self_play_mode == "shared"
    if shared:
        supports = {spec.type_support(i) for i in range(spec.num_bidders)}
        if len(supports) != 1:
            raise ValueError("shared self-play needs symmetric type supports")

    root = np.random.SeedSequence(seed)
    init_rng = np.random.default_rng(root.spawn(1)[0])
    dim = state_dim(spec)
    scales = spec.type_scales()
    n_policies = 1 if shared else spec.num_bidders
    policies = [
        GaussianPolicy(
            dim,
            init_rng,
            hidden=config.hidden,
            init_log_std=config.init_log_std,
            action_scale=spec.bid_cap,
        )
        for _ in range(n_policies)
    ]
    value_nets = [ValueNet(dim, init_rng, hidden=config.hidden) for _ in range(n_policies)]
    policy_opts = [
        Adam(p.params(), lr=config.policy_lr, maximize=True) for p in policies
    ]
    value_opts = [Adam(v.params(), lr=config.value_lr) for v in value_nets]
    seat_policies = policies * spec.num_bidders if shared else policies

    metrics_rows: list[dict] = []
    iteration_seconds: list[float] = []
    iter_rng = np.random.default_rng(root.spawn(1)[0])

    for k in range(config.iterations):
        t0 = time.perf_counter()
        frac = k / max(config.iterations - 1, 1)
        entropy_coef = config.entropy_coef_start + frac * (
            config.entropy_coef_end - config.entropy_coef_start
        )
        lr_scale = max(1.0 - frac, 0.05) if config.lr_anneal else 1.0

        try:
            trajs, ep_rewards = _collect(
                spec, seat_policies, config.episodes_per_iteration, iter_rng
            )
            if shared:
                batches = [
                    {
                        "states": np.concatenate([t.states for t in trajs]),
                        "actions": np.concatenate([t.actions for t in trajs]),
                        "rewards": np.concatenate([t.rewards for t in trajs]),
                        "log_probs": np.concatenate([t.log_probs for t in trajs]),
                        "episode_length": trajs[0].episode_length,
                    }
                ]
            else:
                batches = [
                    {
                        "states": t.states,
                        "actions": t.actions,
                        "rewards": t.rewards,
                        "log_probs": t.log_probs,
                        "episode_length": t.episode_length,
                    }
                    for t in trajs
                ]
            for b in batches:
                b["returns"] = compute_returns(
                    b["rewards"], config.gamma, b["episode_length"]
                )
            for pi, b in enumerate(batches):
                b["values"] = value_nets[pi].values(b["states"])
                b["advantages"] = compute_advantages(
                    b["returns"], b["values"], config.advantage_normalization
                )
            for pi, b in enumerate(batches):
                _update_policy(
                    policies[pi],
                    policy_opts[pi],
                    b,
                    config,
                    entropy_coef,
                    config.policy_lr * lr_scale,
                    iter_rng,
                    vanilla,
                )
                _update_value(
                    value_nets[pi],
                    value_opts[pi],
                    b,
                    config,
                    config.value_lr * lr_scale,
                    iter_rng,
                    vanilla,
                )
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"training diverged at iteration {k + 1}: {exc}",
                dump=_dump(policies, value_nets, k + 1),
            ) from exc

        row: dict = {
            "iteration": k + 1,
            "mean_reward_per_agent": float(ep_rewards.mean()),
            "policy_std": float(np.mean([p.std for p in policies])),
        }
        l2, linf = _oracle_error(spec, auction_id, policies[0], scales[0])
        row["oracle_L2"] = l2
        row["oracle_Linf"] = linf
        if config.eval_cadence > 0 and (k + 1) % config.eval_cadence == 0:
            report = metrics_mod.estimate_exploitability(
                spec,
                metrics_mod.policy_bidders(spec, policies if not shared else policies * spec.num_bidders),
                type_grid_size=config.eval_type_grid,
                bid_grid_size=config.eval_bid_grid,
                mc_samples=config.eval_mc_samples,
                seed=np.random.default_rng(root.spawn(1)[0]),
            )
            row["exploitability_eps"] = report.headline_eps
        else:
            row["exploitability_eps"] = None
        metrics_rows.append(row)
        iteration_seconds.append(time.perf_counter() - t0)

    return PpoResult(
        policies=policies,
        value_nets=value_nets,
        metrics=metrics_rows,
        shared=shared,
        iteration_seconds=iteration_seconds,
    )


def train_vanilla_pg(
    spec: AuctionSpec,
    config: PpoConfig,
    seed: int,
    auction_id: AuctionId | None = None,
) -> PpoResult:
    """Single-epoch unclipped policy-gradient ablation of the PPO loop."""
    return train(spec, config, seed, auction_id=auction_id, vanilla=True)
