"""Fictitious-play family on discretised auctions.

Continuous benchmark auctions are discretised onto valuation and bid grids so
that best responses and exploitability are exact sums instead of Monte-Carlo
estimates. On top of that sit classical fictitious play, its generalised
weakened variant, and neural fictitious self-play (NFSP) with circular and
reservoir replay memories.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .envs import AuctionFormat, AuctionSpec, ValuationKind, settle_batch
from .nets import Adam, Mlp, SoftmaxPolicy


@dataclass(frozen=True)
class DiscretizedGame:
    """Two-bidder private-value auction on finite valuation and bid grids.

    ``payoff[v, b, c]`` is one bidder's reward with valuation ``valuation_grid[v]``,
    own bid ``bid_grid[b]`` and opponent bid ``bid_grid[c]``, settled by the
    continuous environment with exact tie sharing.
    """

    spec: AuctionSpec
    valuation_grid: np.ndarray
    valuation_weights: np.ndarray
    bid_grid: np.ndarray
    payoff: np.ndarray

    @property
    def num_valuations(self) -> int:
        return self.valuation_grid.size

    @property
    def num_bids(self) -> int:
        return self.bid_grid.size

    @property
    def bid_step(self) -> float:
        return float(self.bid_grid[1] - self.bid_grid[0])


def _valuation_grid(spec: AuctionSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-probability midpoints of the valuation distribution."""
    model = spec.valuation
    q = (np.arange(n) + 0.5) / n
    if model.kind == ValuationKind.PRIVATE_UNIFORM:
        lo, hi = model.supports[0]
        return lo + (hi - lo) * q, np.full(n, 1.0 / n)
    if model.kind == ValuationKind.PRIVATE_POWER:
        return q ** (1.0 / model.cdf_exponent), np.full(n, 1.0 / n)
    raise ValueError("discretisation supports private-value models only")


def discretize(spec: AuctionSpec, num_valuations: int = 21, num_bids: int = 51) -> DiscretizedGame:
    """Build the discretised game, delegating payoffs to the settlement rule."""
    if spec.num_bidders != 2:
        raise ValueError("discretised games are two-bidder")
    if spec.format == AuctionFormat.KOREAN:
        raise ValueError("the two-round format has no normal-form discretisation")
    supports = {spec.type_support(i) for i in range(2)}
    if len(supports) != 1:
        raise ValueError("discretisation assumes symmetric supports")
    vals, weights = _valuation_grid(spec, num_valuations)
    bids = np.linspace(0.0, spec.bid_cap, num_bids)

    vv, bb, cc = np.meshgrid(vals, bids, bids, indexing="ij")
    types = np.column_stack([vv.ravel(), np.zeros(vv.size)])
    joint = np.column_stack([bb.ravel(), cc.ravel()])
    rewards, _, _ = settle_batch(spec, types, joint, None)
    payoff = rewards[:, 0].reshape(num_valuations, num_bids, num_bids)
    return DiscretizedGame(spec, vals, weights, bids, payoff)


def uniform_strategy(game: DiscretizedGame) -> np.ndarray:
    return np.full((game.num_valuations, game.num_bids), 1.0 / game.num_bids)


def pure_strategy(game: DiscretizedGame, bid_indices: np.ndarray) -> np.ndarray:
    rows = np.zeros((game.num_valuations, game.num_bids))
    rows[np.arange(game.num_valuations), bid_indices] = 1.0
    return rows


def check_simplex(strategy: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(strategy < 0.0) or np.any(np.abs(strategy.sum(axis=1) - 1.0) > tol):
        raise ValueError("strategy rows must be probability vectors")


def _bid_values(game: DiscretizedGame, opponent: np.ndarray) -> np.ndarray:
    """Expected payoff per (valuation, own bid) against an opponent strategy."""
    marginal = game.valuation_weights @ opponent  # opponent's bid distribution
    return game.payoff @ marginal


def exact_best_response(game: DiscretizedGame, opponent: np.ndarray) -> np.ndarray:
    """Pure interim best response (bid index per valuation), exact expectation.

    Argmax ties break toward the lowest bid, so re-running on identical inputs
    returns the identical pure strategy.
    """
    check_simplex(opponent)
    return np.argmax(_bid_values(game, opponent), axis=1)


def strategy_value(game: DiscretizedGame, own: np.ndarray, opponent: np.ndarray) -> float:
    """Ex-ante expected payoff of playing ``own`` against ``opponent``."""
    ev = _bid_values(game, opponent)
    return float(game.valuation_weights @ (own * ev).sum(axis=1))


def exact_exploitability(game: DiscretizedGame, strategies: list[np.ndarray]) -> list[float]:
    """Per-player gain from the exact best deviation (always >= 0)."""
    eps = []
    for i, own in enumerate(strategies):
        opp = strategies[1 - i]
        ev = _bid_values(game, opp)
        br_value = float(game.valuation_weights @ ev.max(axis=1))
        eps.append(br_value - float(game.valuation_weights @ (own * ev).sum(axis=1)))
    return eps


@dataclass
class FpTrace:
    strategies: list[np.ndarray]  # final empirical strategies per player
    exploitability: np.ndarray  # (iterations, players)
    best_responses: list[np.ndarray] | None = None

    @property
    def headline(self) -> np.ndarray:
        return self.exploitability.max(axis=1)


def _epsilon_best_response(
    game: DiscretizedGame, opponent: np.ndarray, eps: float
) -> np.ndarray:
    """A strategy losing at most ``eps`` against the exact best response.

    Realised as the exact best response mixed with the uniform strategy, the
    mixture weight chosen so the expected shortfall stays within ``eps``.
    """
    ev = _bid_values(game, opponent)
    br = pure_strategy(game, np.argmax(ev, axis=1))
    if eps <= 0.0:
        return br
    unif = uniform_strategy(game)
    gap = float(game.valuation_weights @ ((br - unif) * ev).sum(axis=1))
    w = 1.0 if gap <= eps else eps / gap
    return (1.0 - w) * br + w * unif


def gwfp_iterate(
    game: DiscretizedGame,
    iterations: int,
    alpha_schedule=None,
    eps_schedule=None,
    perturbation_scale: float = 0.0,
    seed: int | np.random.Generator = 0,
    record_best_responses: bool = False,
) -> FpTrace:
    """Generalised weakened fictitious play.

    Update n (starting at 1) mixes the previous empirical strategy with an
    eps_n-best response plus a zero-mean uniform perturbation, then projects
    back onto the simplex. The default schedules alpha_n = 1/n, eps_n = 0 and
    zero perturbation reproduce classical fictitious play bit for bit (the
    projection is skipped when no noise is added).
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    alpha_schedule = alpha_schedule or (lambda n: 1.0 / n)
    eps_schedule = eps_schedule or (lambda n: 0.0)
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed

    strategies = [uniform_strategy(game), uniform_strategy(game)]
    exploit = np.empty((iterations, 2))
    br_log: list[np.ndarray] | None = [] if record_best_responses else None

    for n in range(1, iterations + 1):
        alpha = alpha_schedule(n)
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha schedule must stay in (0, 1]")
        eps_n = eps_schedule(n)
        if eps_n < 0.0:
            raise ValueError("eps schedule must be nonnegative")
        responses = []
        for i in (0, 1):
            opp = strategies[1 - i]
            if eps_n == 0.0:
                responses.append(pure_strategy(game, exact_best_response(game, opp)))
            else:
                responses.append(_epsilon_best_response(game, opp, eps_n))
        for i in (0, 1):
            target = responses[i]
            if perturbation_scale > 0.0:
                noise = rng.uniform(
                    -perturbation_scale, perturbation_scale, size=target.shape
                ) / n
                target = np.maximum(target + noise, 0.0)
                target /= target.sum(axis=1, keepdims=True)
            strategies[i] = (1.0 - alpha) * strategies[i] + alpha * target
        exploit[n - 1] = exact_exploitability(game, strategies)
        if br_log is not None:
            br_log.append(np.argmax(responses[0], axis=1))
    return FpTrace(strategies=strategies, exploitability=exploit, best_responses=br_log)


def fp_iterate(game: DiscretizedGame, iterations: int) -> FpTrace:
    """Classical fictitious play: exact best responses, uniform averaging."""
    return gwfp_iterate(game, iterations)


class CircularBuffer:
    """Fixed-capacity FIFO of transition rows."""

    def __init__(self, capacity: int, row_dim: int):
        self.capacity = capacity
        self.data = np.zeros((capacity, row_dim))
        self.size = 0
        self._next = 0

    def add(self, rows: np.ndarray) -> None:
        for row in np.atleast_2d(rows):
            self.data[self._next] = row
            self._next = (self._next + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.size, size=batch)
        return self.data[idx]


class ReservoirBuffer:
    """Uniform sample over an unbounded stream (reservoir sampling)."""

    def __init__(self, capacity: int, row_dim: int):
        self.capacity = capacity
        self.data = np.zeros((capacity, row_dim))
        self.size = 0
        self.seen = 0

    def add(self, rows: np.ndarray, rng: np.random.Generator) -> None:
        for row in np.atleast_2d(rows):
            self.seen += 1
            if self.size < self.capacity:
                self.data[self.size] = row
                self.size += 1
            else:
                j = rng.integers(0, self.seen)
                if j < self.capacity:
                    self.data[j] = row

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.size, size=batch)
        return self.data[idx]


@dataclass
class NfspConfig:
    episodes: int = 150_000
    eta: float = 0.1  # probability of acting with the best-response policy
    rl_capacity: int = 200_000
    sl_capacity: int = 100_000
    eps_start: float = 0.6
    eps_end: float = 0.01
    eps_decay_fraction: float = 0.15  # fraction of episodes over which eps decays
    q_lr: float = 1e-3
    sl_lr: float = 1e-3
    batch_size: int = 128
    episode_batch: int = 64  # episodes simulated per loop tick
    updates_per_tick: int = 2
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 1.0
    eval_cadence: int = 10_000  # episodes between exact exploitability evals

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


class NfspAgent:
    """One NFSP learner: Q-network best response plus supervised average policy."""

    def __init__(
        self,
        state_dim: int,
        num_bids: int,
        config: NfspConfig,
        rng: np.random.Generator,
    ):
        self.config = config
        self.num_bids = num_bids
        self.q_net = Mlp([state_dim, *config.hidden, num_bids], rng)
        self.avg_policy = SoftmaxPolicy(state_dim, num_bids, rng, hidden=config.hidden)
        self.q_opt = Adam(self.q_net.params(), lr=config.q_lr)
        self.sl_opt = Adam(self.avg_policy.params(), lr=config.sl_lr, maximize=True)
        # rows: state..., action, reward, next_state..., done
        self.m_rl = CircularBuffer(config.rl_capacity, 2 * state_dim + 3)
        self.m_sl = ReservoirBuffer(config.sl_capacity, state_dim + 1)
        self.state_dim = state_dim

    def act(
        self, states: np.ndarray, br_mode: np.ndarray, epsilon: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Pick bid indices: epsilon-greedy on Q in BR mode, else the average policy."""
        n = states.shape[0]
        actions = np.empty(n, dtype=int)
        if br_mode.any():
            q = self.q_net.forward(states[br_mode])
            greedy = np.argmax(q, axis=1)
            explore = rng.random(br_mode.sum()) < epsilon
            randoms = rng.integers(0, self.num_bids, size=br_mode.sum())
            actions[br_mode] = np.where(explore, randoms, greedy)
        if (~br_mode).any():
            idx, _ = self.avg_policy.sample(states[~br_mode], rng)
            actions[~br_mode] = idx
        return actions

    def train_q(self, rng: np.random.Generator) -> None:
        if self.m_rl.size < self.config.batch_size:
            return
        rows = self.m_rl.sample(self.config.batch_size, rng)
        d = self.state_dim
        states = rows[:, :d]
        acts = rows[:, d].astype(int)
        rewards = rows[:, d + 1]
        next_states = rows[:, d + 2 : 2 * d + 2]
        done = rows[:, -1]
        targets = rewards.copy()
        live = done < 0.5
        if live.any():
            q_next = self.q_net.forward(next_states[live])
            targets[live] += self.config.gamma * q_next.max(axis=1)
        self.q_net.zero_grads()
        q = self.q_net.forward(states)
        grad = np.zeros_like(q)
        diff = q[np.arange(q.shape[0]), acts] - targets
        grad[np.arange(q.shape[0]), acts] = 2.0 * diff / q.shape[0]
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite TD gradient")
        self.q_net.backward(grad)
        self.q_opt.step(self.q_net.params(), self.q_net.grads())

    def train_sl(self, rng: np.random.Generator) -> None:
        if self.m_sl.size < self.config.batch_size:
            return
        rows = self.m_sl.sample(self.config.batch_size, rng)
        states = rows[:, : self.state_dim]
        acts = rows[:, -1].astype(int)
        self.avg_policy.zero_grads()
        self.avg_policy.log_prob_backward(
            states, acts, np.full(acts.size, 1.0 / acts.size)
        )
        self.sl_opt.step(self.avg_policy.params(), self.avg_policy.grads())

    def average_strategy(self, states: np.ndarray) -> np.ndarray:
        return self.avg_policy.probs(states)


@dataclass
class NfspResult:
    agents: list[NfspAgent]
    game: DiscretizedGame
    metrics: list[dict] = field(default_factory=list)

    def strategy_matrix(self, agent: int) -> np.ndarray:
        states = (self.game.valuation_grid / self.game.spec.type_scales()[agent])[:, None]
        return self.agents[agent].average_strategy(states)

    def mean_bids(self, agent: int) -> np.ndarray:
        return self.strategy_matrix(agent) @ self.game.bid_grid


def nfsp_train(
    spec: AuctionSpec,
    game: DiscretizedGame,
    config: NfspConfig,
    seed: int,
) -> NfspResult:
    """Train NFSP agents on a discretised single-round auction.

    Each episode every agent acts with the epsilon-greedy Q policy with
    probability eta (storing those state/action pairs in the reservoir) and
    with the average policy otherwise. Q learns from all transitions; the
    average policy is the returned equilibrium candidate.
    """
    if spec.format == AuctionFormat.KOREAN:
        raise ValueError("nfsp_train assumes single-round episodes")
    rng = np.random.default_rng(seed)
    nb = spec.num_bidders
    if nb != 2:
        raise ValueError("NFSP here follows the two-bidder discretised games")
    scales = spec.type_scales()
    agents = [NfspAgent(1, game.num_bids, config, rng) for _ in range(nb)]
    result = NfspResult(agents=agents, game=game)

    decay_episodes = max(int(config.episodes * config.eps_decay_fraction), 1)
    done_episodes = 0
    while done_episodes < config.episodes:
        batch = min(config.episode_batch, config.episodes - done_episodes)
        frac = min(done_episodes / decay_episodes, 1.0)
        epsilon = config.eps_start + frac * (config.eps_end - config.eps_start)

        v_idx = rng.choice(game.num_valuations, size=(batch, nb), p=game.valuation_weights)
        values = game.valuation_grid[v_idx]
        bid_idx = np.empty((batch, nb), dtype=int)
        br_modes = rng.random((batch, nb)) < config.eta
        for i in range(nb):
            states = (values[:, i] / scales[i])[:, None]
            bid_idx[:, i] = agents[i].act(states, br_modes[:, i], epsilon, rng)
        bids = game.bid_grid[bid_idx]
        rewards, _, _ = settle_batch(spec, values, bids, None)

        for i in range(nb):
            states = (values[:, i] / scales[i])[:, None]
            rows = np.column_stack(
                [
                    states,
                    bid_idx[:, i],
                    rewards[:, i],
                    np.zeros((batch, 1)),  # terminal next state placeholder
                    np.ones(batch),  # done
                ]
            )
            agents[i].m_rl.add(rows)
            if br_modes[:, i].any():
                sl_rows = np.column_stack(
                    [states[br_modes[:, i]], bid_idx[br_modes[:, i], i]]
                )
                agents[i].m_sl.add(sl_rows, rng)
            for _ in range(config.updates_per_tick):
                agents[i].train_q(rng)
                agents[i].train_sl(rng)

        done_episodes += batch
        if config.eval_cadence and (
            done_episodes % config.eval_cadence < config.episode_batch
        ):
            strategies = [result.strategy_matrix(i) for i in range(nb)]
            eps = exact_exploitability(game, strategies)
            result.metrics.append(
                {
                    "episode": done_episodes,
                    "exploitability_eps": max(eps),
                    "epsilon_greedy": epsilon,
                }
            )
    return result
