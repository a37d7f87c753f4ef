"""Quantitative verification: Monte-Carlo exploitability, oracle distance,
and auction statistics.

Exploitability is estimated interim: for each agent and each type on a grid,
the most profitable deviation bid found by grid search is compared with the
agent's own (mean) bid, using common random numbers so that the on-policy bid
contributes exactly zero at its own grid point. The headline estimate is the
worst case over agents.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .envs import AuctionFormat, AuctionSpec
from .nets import GaussianPolicy
from .oracles import (
    NoClosedFormError,
    OracleStrategy,
    deviation_utilities,
    sample_opponent_bids,
    shortlist_candidates,
)


class OracleBidder:
    """Deterministic strategy from a closed-form bid function."""

    def __init__(self, bid_fn: Callable):
        self.bid_fn = bid_fn

    def sample_bids(self, types: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.bid_fn(np.asarray(types, dtype=float)), dtype=float)

    def mean_bids(self, types: np.ndarray) -> np.ndarray:
        return np.asarray(self.bid_fn(np.asarray(types, dtype=float)), dtype=float)


class PolicyBidder:
    """Single-round adapter: normalises types and scales executed bids."""

    def __init__(self, policy: GaussianPolicy, type_scale: float):
        self.policy = policy
        self.type_scale = float(type_scale)

    def _states(self, types: np.ndarray) -> np.ndarray:
        return (np.asarray(types, dtype=float) / self.type_scale)[:, None]

    def sample_bids(self, types: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, bids, _ = self.policy.sample(self._states(types), rng)
        return bids

    def mean_bids(self, types: np.ndarray) -> np.ndarray:
        return self.policy.mean_bids(self._states(types))


class KoreanPolicyBidder:
    """Two-round adapter for the Korean auction (states: value, round, signal)."""

    def __init__(self, policy: GaussianPolicy):
        self.policy = policy

    def _states(self, types: np.ndarray, round_idx: int, signals) -> np.ndarray:
        t = np.asarray(types, dtype=float)
        return np.column_stack(
            [t, np.full(t.shape, float(round_idx)), np.broadcast_to(signals, t.shape)]
        )

    def sample_round0(self, types: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        _, bids, _ = self.policy.sample(self._states(types, 0, 0.0), rng)
        return bids

    def mean_round0(self, types: np.ndarray) -> np.ndarray:
        return self.policy.mean_bids(self._states(types, 0, 0.0))

    def sample_round1(self, types, signals, rng: np.random.Generator) -> np.ndarray:
        _, bids, _ = self.policy.sample(self._states(types, 1, signals), rng)
        return bids

    def mean_round1(self, types, signals) -> np.ndarray:
        return self.policy.mean_bids(self._states(types, 1, signals))


def policy_bidders(spec: AuctionSpec, policies: Sequence[GaussianPolicy]) -> list:
    """Wrap per-seat policies in the adapter matching the spec's format."""
    if spec.format == AuctionFormat.KOREAN:
        return [KoreanPolicyBidder(p) for p in policies]
    scales = spec.type_scales()
    return [PolicyBidder(p, scales[i]) for i, p in enumerate(policies)]


@dataclass
class ExploitabilityReport:
    eps_per_agent: list[float]
    se_per_agent: list[float]
    headline_eps: float
    bid_grid_size: int
    mc_samples: int
    type_grid_size: int

    def __post_init__(self) -> None:
        for eps, se in zip(self.eps_per_agent, self.se_per_agent):
            if eps < -2.0 * se:
                raise ValueError("exploitability far below zero indicates a bug")


@dataclass
class PolicyErrorReport:
    l2: float
    linf: float
    type_grid: np.ndarray
    residuals: np.ndarray


def _type_grid(spec: AuctionSpec, bidder: int, size: int) -> np.ndarray:
    """Support midpoints, avoiding the atypical boundary types."""
    lo, hi = spec.type_support(bidder)
    return lo + (hi - lo) * (np.arange(size) + 0.5) / size


def _single_round_agent_eps(
    spec: AuctionSpec,
    bidders: list,
    agent: int,
    types: np.ndarray,
    bid_grid: np.ndarray,
    mc_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Mean over the type grid of the best paired deviation gain.

    A screening pass shortlists promising deviations, a refinement pass on
    fresh draws estimates each shortlisted bid's gain over the agent's own
    mean bid with common random numbers, and the largest gain counts. The own
    bid sits in every shortlist, so the estimate is exactly zero at a grid
    point where no deviation helps.
    """
    others = [j for j in range(spec.num_bidders) if j != agent]
    strategies = [bidders[j].sample_bids for j in others]
    n_screen = min(mc_samples, 25_000)

    # Private-value opponents are independent of the agent's type, so one draw
    # per agent serves every grid point; common values must recondition.
    per_type_draws = spec.valuation.is_common
    if not per_type_draws:
        screen_draw = sample_opponent_bids(
            spec, agent, float(types[0]), strategies, n_screen, rng
        )
        refine_draw = sample_opponent_bids(
            spec, agent, float(types[0]), strategies, mc_samples, rng
        )

    gains = []
    variances = []
    for tv in types:
        if per_type_draws:
            own_a, opp_a = sample_opponent_bids(
                spec, agent, float(tv), strategies, n_screen, rng
            )
            own_b, opp_b = sample_opponent_bids(
                spec, agent, float(tv), strategies, mc_samples, rng
            )
        else:
            own_a, opp_a = np.full(n_screen, float(tv)), screen_draw[1]
            own_b, opp_b = np.full(mc_samples, float(tv)), refine_draw[1]
        own_bid = float(bidders[agent].mean_bids(np.array([tv]))[0])
        cands = np.sort(np.append(bid_grid, own_bid))
        own_idx = int(np.searchsorted(cands, own_bid))

        u_a = deviation_utilities(spec, own_a, cands, opp_a)
        short, _ = shortlist_candidates(u_a, must_keep=[own_idx])
        u_b = deviation_utilities(spec, own_b, cands[short], opp_b)
        diffs = u_b - u_b[short.index(own_idx)][None, :]
        best = int(np.argmax(diffs.mean(axis=1)))
        gains.append(float(diffs[best].mean()))
        variances.append(float(diffs[best].var(ddof=1)) / mc_samples)
    eps = float(np.mean(gains))
    se = float(np.sqrt(np.sum(variances)) / len(types))
    return eps, se


def _korean_agent_eps(
    spec: AuctionSpec,
    bidders: list,
    agent: int,
    types: np.ndarray,
    bid_grid: np.ndarray,
    mc_samples: int,
    rng: np.random.Generator,
    round0_grid_size: int = 21,
) -> tuple[float, float]:
    """Best deviation over (round-0 bid, per-signal round-1 bid) triples.

    Samples the opponent's round-0 bid and both conditional round-1 bids once
    (common random numbers), sorts by the round-0 bid, and uses prefix sums to
    evaluate every candidate round-0 bid in one pass.
    """
    opp = bidders[1 - agent]
    b0_grid = np.linspace(0.0, spec.bid_cap, round0_grid_size)
    gains = []
    variances = []
    for tv in types:
        v = float(tv)
        opp_types = rng.random(mc_samples)  # opponent valuations, uniform [0, 1]
        c0 = opp.sample_round0(opp_types, rng)
        c1 = {
            0: opp.sample_round1(opp_types, 0.0, rng),
            1: opp.sample_round1(opp_types, 1.0, rng),
        }
        own0 = float(bidders[agent].mean_round0(np.array([v]))[0])
        own1 = {
            x: float(bidders[agent].mean_round1(np.array([v]), float(x))[0]) for x in (0, 1)
        }
        b1_cands = np.sort(np.concatenate([bid_grid, [own1[0], own1[1]]]))
        b0_cands = np.sort(np.append(b0_grid, own0))

        order = np.argsort(c0, kind="stable")
        c0s = c0[order]
        # Round-1 utility samples under each possible opponent signal.
        u = {}
        for x_opp in (0, 1):
            c1s = c1[x_opp][order]
            win = b1_cands[:, None] > c1s[None, :]
            tie = b1_cands[:, None] == c1s[None, :]
            u[x_opp] = (win + 0.5 * tie) * (v - b1_cands[:, None])
        # prefix[i] = sum over the i smallest round-0 opponent bids
        pre0 = np.concatenate([np.zeros((b1_cands.size, 1)), np.cumsum(u[0], axis=1)], axis=1)
        pre1 = np.concatenate([np.zeros((b1_cands.size, 1)), np.cumsum(u[1], axis=1)], axis=1)
        total1 = pre1[:, -1]

        left = np.searchsorted(c0s, b0_cands, side="left")
        right = np.searchsorted(c0s, b0_cands, side="right")
        # I outbid the opponent (signal 1 for me, 0 for them): c0 < b0.
        sum_high = pre0[:, left]
        # Opponent outbids me (my signal 0, theirs 1): c0 > b0.
        sum_low_gt = total1[:, None] - pre1[:, right]
        # Round-0 ties: both signals 0.
        sum_low_tie = pre0[:, right] - pre0[:, left]
        best_values = (
            sum_high.max(axis=0) + (sum_low_gt + sum_low_tie).max(axis=0)
        ) / mc_samples
        br_value = float(best_values.max())

        # On-policy play, same draws.
        x_me = (own0 > c0).astype(int)
        x_opp = (c0 > own0).astype(int)
        c1_faced = np.where(x_opp == 1, c1[1], c1[0])
        my_b1 = np.where(x_me == 1, own1[1], own1[0])
        u_pol = ((my_b1 > c1_faced) + 0.5 * (my_b1 == c1_faced)) * (v - my_b1)
        gains.append(br_value - float(u_pol.mean()))
        variances.append(float(u_pol.var(ddof=1)) / mc_samples)
    eps = float(np.mean(gains))
    se = float(np.sqrt(np.sum(variances)) / len(types))
    return eps, se


def estimate_exploitability(
    spec: AuctionSpec,
    bidders: list,
    type_grid_size: int = 21,
    bid_grid_size: int = 201,
    mc_samples: int = 100_000,
    seed: int | np.random.Generator = 0,
) -> ExploitabilityReport:
    """Monte-Carlo exploitability of a frozen strategy profile.

    ``bidders`` holds one adapter per seat (``PolicyBidder`` / ``OracleBidder``
    for single-round formats, ``KoreanPolicyBidder`` for the two-round one).
    """
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
    bid_grid = np.linspace(0.0, spec.bid_cap, bid_grid_size)
    eps_per_agent: list[float] = []
    se_per_agent: list[float] = []
    for agent in range(spec.num_bidders):
        types = _type_grid(spec, agent, type_grid_size)
        if spec.format == AuctionFormat.KOREAN:
            eps, se = _korean_agent_eps(
                spec, bidders, agent, types, bid_grid, mc_samples, rng
            )
        else:
            eps, se = _single_round_agent_eps(
                spec, bidders, agent, types, bid_grid, mc_samples, rng
            )
        eps_per_agent.append(eps)
        se_per_agent.append(se)
    return ExploitabilityReport(
        eps_per_agent=eps_per_agent,
        se_per_agent=se_per_agent,
        headline_eps=max(eps_per_agent),
        bid_grid_size=bid_grid_size,
        mc_samples=mc_samples,
        type_grid_size=type_grid_size,
    )


def policy_error(
    bidder,
    oracle: OracleStrategy | Callable,
    type_grid: np.ndarray,
) -> PolicyErrorReport:
    """L2/Linf distance between a strategy's mean bid and the oracle curve."""
    if isinstance(oracle, OracleStrategy):
        if not oracle.has_closed_form:
            raise NoClosedFormError(
                f"{oracle.auction_id.value} has no closed-form equilibrium"
            )
        fn = oracle.bid_fn
    else:
        fn = oracle
    grid = np.asarray(type_grid, dtype=float)
    learned = np.asarray(bidder.mean_bids(grid), dtype=float)
    residuals = learned - np.asarray(fn(grid), dtype=float)
    return PolicyErrorReport(
        l2=float(np.sqrt(np.mean(residuals**2))),
        linf=float(np.max(np.abs(residuals))),
        type_grid=grid,
        residuals=residuals,
    )


def auction_stats(
    spec: AuctionSpec,
    bidders: list,
    episodes: int,
    seed: int | np.random.Generator = 0,
) -> dict[str, float]:
    """Monte-Carlo revenue, allocative efficiency, and tie rate."""
    from .envs import draw_types, settle_batch  # local: avoid name shadowing

    if spec.format == AuctionFormat.KOREAN:
        raise ValueError("auction_stats covers single-round formats")
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
    types, common = draw_types(spec, episodes, rng)
    bids = np.column_stack(
        [bidders[i].sample_bids(types[:, i], rng) for i in range(spec.num_bidders)]
    )
    _, winner, payments = settle_batch(spec, types, bids, common)
    revenue = float(payments.sum(axis=1).mean())
    k = winner.sum(axis=1)
    if spec.valuation.is_common:
        efficiency = float((k > 0).mean())  # identical values: any sale is efficient
    else:
        best = types.max(axis=1, keepdims=True)
        eff_hit = (winner & (types == best)).any(axis=1)
        efficiency = float(eff_hit.mean())
    tie_rate = float((k >= 2).mean())
    return {"mean_revenue": revenue, "efficiency": efficiency, "tie_rate": tie_rate}
