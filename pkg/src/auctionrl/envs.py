"""Sealed-bid auction environments as seeded episodic games.

Eleven benchmark experiments share one declarative description: a payment
format, a valuation model, an optional reserve price, optional risk aversion,
and one or two rounds. An episode draws private types, collects one bid per
bidder (twice for the two-round format), and maps the joint bids to rewards.

All sampling goes through ``numpy.random.Generator`` so episodes are
reproducible given a seed. Batch variants of the core operations are provided
for vectorised rollouts; the scalar operations wrap them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np


class AuctionFormat(str, Enum):
    FIRST_PRICE = "first_price"
    SECOND_PRICE = "second_price"
    THIRD_PRICE = "third_price"
    ALL_PAY = "all_pay"
    KOREAN = "korean"


class RiskAversion(str, Enum):
    NEUTRAL = "neutral"
    SQRT = "sqrt"


class ValuationKind(str, Enum):
    PRIVATE_UNIFORM = "private_uniform"
    PRIVATE_POWER = "private_power"
    COMMON_ADDITIVE = "common_additive"
    COMMON_SCALED = "common_scaled"


# Signals of both common-value models live in [0, 2]: additive signals are
# k_i + t with k_i, t uniform on [0, 1]; scaled signals are uniform on [0, 2v]
# with v uniform on [0, 1].
_COMMON_SIGNAL_HI = 2.0


@dataclass(frozen=True)
class ValuationModel:
    """How private types (valuations or signals) are drawn.

    ``private_uniform`` draws bidder i's valuation uniformly from
    ``supports[i]``. ``private_power`` draws from the distribution with CDF
    F(v) = v ** cdf_exponent on [0, 1]. ``common_additive`` gives bidder i the
    signal x_i = k_i + t (k_i, t uniform on [0, 1]) of a common value
    v = (x_1 + x_2) / 2. ``common_scaled`` draws a common value v uniform on
    [0, 1] and signals x_i uniform on [0, 2v].
    """

    kind: ValuationKind
    supports: tuple[tuple[float, float], ...] | None = None
    cdf_exponent: float = 0.5

    @property
    def is_common(self) -> bool:
        return self.kind in (ValuationKind.COMMON_ADDITIVE, ValuationKind.COMMON_SCALED)

    def type_support(self, bidder: int) -> tuple[float, float]:
        if self.kind == ValuationKind.PRIVATE_UNIFORM:
            assert self.supports is not None
            return self.supports[bidder]
        if self.kind == ValuationKind.PRIVATE_POWER:
            return (0.0, 1.0)
        return (0.0, _COMMON_SIGNAL_HI)


@dataclass(frozen=True)
class AuctionSpec:
    """Full declarative description of one auction game."""

    format: AuctionFormat
    num_bidders: int
    valuation: ValuationModel
    reserve_price: float = 0.0
    risk_aversion: RiskAversion = RiskAversion.NEUTRAL
    num_rounds: int = 1
    bid_cap: float = 1.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.num_bidders < 2:
            raise ValueError("need at least 2 bidders")
        if self.format == AuctionFormat.THIRD_PRICE and self.num_bidders < 3:
            raise ValueError("third-price auction needs at least 3 bidders")
        if (self.format == AuctionFormat.KOREAN) != (self.num_rounds == 2):
            raise ValueError("exactly the Korean format runs 2 rounds")
        if self.num_rounds not in (1, 2):
            raise ValueError("num_rounds must be 1 or 2")
        if self.bid_cap <= 0.0:
            raise ValueError("bid_cap must be positive")
        if not 0.0 <= self.reserve_price < self.bid_cap:
            raise ValueError("reserve_price must lie in [0, bid_cap)")
        if self.risk_aversion == RiskAversion.SQRT and self.format != AuctionFormat.FIRST_PRICE:
            raise ValueError("sqrt utility is defined for first-price payments only")
        model = self.valuation
        if model.kind == ValuationKind.PRIVATE_UNIFORM:
            if model.supports is None or len(model.supports) != self.num_bidders:
                raise ValueError("private_uniform needs one (lo, hi) support per bidder")
            for lo, hi in model.supports:
                if not 0.0 <= lo < hi:
                    raise ValueError("supports must satisfy 0 <= lo < hi")
        elif model.kind == ValuationKind.PRIVATE_POWER:
            if not 0.0 < model.cdf_exponent <= 1.0:
                raise ValueError("cdf_exponent must lie in (0, 1]")
        elif model.kind == ValuationKind.COMMON_ADDITIVE:
            if self.num_bidders != 2:
                raise ValueError("common_additive is a 2-bidder model")
        # Types must be representable as bids, except third price where the
        # equilibrium bids twice the valuation.
        for i in range(self.num_bidders):
            _, hi = model.type_support(i)
            if self.format == AuctionFormat.THIRD_PRICE:
                if self.bid_cap < 2.0 * hi:
                    raise ValueError("third price needs bid_cap >= 2 * max valuation")
            elif hi > self.bid_cap + 1e-12:
                raise ValueError("type support must fit inside [0, bid_cap]")

    def type_support(self, bidder: int) -> tuple[float, float]:
        return self.valuation.type_support(bidder)

    def type_scales(self) -> np.ndarray:
        """Upper support bound per bidder, used to normalise network inputs."""
        return np.array([self.type_support(i)[1] for i in range(self.num_bidders)])


@dataclass(frozen=True)
class EpisodeState:
    """Per-bidder view of one episode: private type plus any observations."""

    bidder_id: int
    valuation_or_signal: float
    observation: tuple[float, ...] = ()
    round: int = 0
    common_value: float | None = None  # realised v in common-value settings


@dataclass(frozen=True)
class ActionProfile:
    bids: tuple[float, ...]


@dataclass(frozen=True)
class Outcome:
    winner_ids: tuple[int, ...]
    price_paid: tuple[float, ...]  # one entry per winner, aligned with winner_ids
    rewards: tuple[float, ...]
    realized_common_value: float | None = None


def draw_types(
    spec: AuctionSpec, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw ``n`` independent type profiles.

    Returns ``(types, common_values)`` where ``types`` has shape
    ``(n, num_bidders)`` (valuations, or signals in common-value settings) and
    ``common_values`` is the realised common value per episode (None for
    private-value models).
    """
    nb = spec.num_bidders
    model = spec.valuation
    if model.kind == ValuationKind.PRIVATE_UNIFORM:
        u = rng.random((n, nb))
        lo = np.array([s[0] for s in model.supports])
        hi = np.array([s[1] for s in model.supports])
        return lo + u * (hi - lo), None
    if model.kind == ValuationKind.PRIVATE_POWER:
        u = rng.random((n, nb))
        # inverse transform of F(v) = v ** e
        return u ** (1.0 / model.cdf_exponent), None
    if model.kind == ValuationKind.COMMON_ADDITIVE:
        k = rng.random((n, 2))
        t = rng.random((n, 1))
        x = k + t
        return x, x.mean(axis=1)
    if model.kind == ValuationKind.COMMON_SCALED:
        v = rng.random(n)
        x = rng.random((n, nb)) * (2.0 * v[:, None])
        return x, v
    raise ValueError(f"unknown valuation model {model.kind}")


def sample_types(spec: AuctionSpec, rng_seed: int | np.random.Generator) -> list[EpisodeState]:
    """Draw one type profile and wrap it as per-bidder episode states."""
    rng = np.random.default_rng(rng_seed) if isinstance(rng_seed, int) else rng_seed
    types, common = draw_types(spec, 1, rng)
    cv = float(common[0]) if common is not None else None
    return [
        EpisodeState(bidder_id=i, valuation_or_signal=float(types[0, i]), common_value=cv)
        for i in range(spec.num_bidders)
    ]


def _max_of_others(bids: np.ndarray) -> np.ndarray:
    """Per bidder, the highest bid among the other bidders."""
    top1 = bids.max(axis=1, keepdims=True)
    part = np.partition(bids, -2, axis=1)
    top2 = part[:, -2][:, None]
    n_top = (bids == top1).sum(axis=1, keepdims=True)
    alone_at_top = (bids == top1) & (n_top == 1)
    return np.where(alone_at_top, top2, top1)


def _winner_utility(spec: AuctionSpec, values: np.ndarray, prices: np.ndarray) -> np.ndarray:
    diff = values - prices
    if spec.risk_aversion == RiskAversion.SQRT:
        # Overbids (price above value) are penalised continuously.
        return np.sign(diff) * np.sqrt(np.abs(diff))
    return diff


def settle_batch(
    spec: AuctionSpec,
    types: np.ndarray,
    bids: np.ndarray,
    common_values: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Settle a batch of single-round auctions.

    ``types`` and ``bids`` have shape ``(n, num_bidders)``. Returns
    ``(rewards, winner_mask, payments)`` each of the same shape; payments are
    expected transfers to the seller (tie lotteries included), so their row sum
    is the seller revenue.
    """
    if spec.format == AuctionFormat.KOREAN:
        raise ValueError("Korean auctions settle through step_korean")
    bids = np.asarray(bids, dtype=float)
    types = np.asarray(types, dtype=float)
    if bids.shape != types.shape or bids.shape[1] != spec.num_bidders:
        raise ValueError("types/bids must both be (n, num_bidders)")
    if not np.all(np.isfinite(bids)):
        raise ValueError("bids must be finite")

    eligible = bids >= spec.reserve_price
    masked = np.where(eligible, bids, -np.inf)
    top = masked.max(axis=1)
    any_winner = np.isfinite(top)
    winner = eligible & (bids == top[:, None]) & any_winner[:, None]
    k = winner.sum(axis=1, keepdims=True)
    k_safe = np.maximum(k, 1)

    if spec.valuation.is_common:
        if common_values is None:
            raise ValueError("common-value settlement needs realised values")
        values = np.broadcast_to(np.asarray(common_values, dtype=float)[:, None], bids.shape)
    else:
        values = types

    if spec.format == AuctionFormat.ALL_PAY:
        # Everyone pays own bid; a k-way tie allocates the item by a uniform
        # lottery, so the tied winners expect value / k.
        rewards = winner * values / k_safe - bids
        payments = bids.copy()
        return rewards, winner, payments

    if spec.format == AuctionFormat.FIRST_PRICE:
        prices = bids
    elif spec.format == AuctionFormat.SECOND_PRICE:
        prices = _max_of_others(bids)
    elif spec.format == AuctionFormat.THIRD_PRICE:
        prices = np.broadcast_to(np.sort(bids, axis=1)[:, -3][:, None], bids.shape)
    else:
        raise ValueError(f"unknown format {spec.format}")

    rewards = np.where(winner, _winner_utility(spec, values, prices) / k_safe, 0.0)
    payments = np.where(winner, prices / k_safe, 0.0)
    return rewards, winner, payments


def settle(spec: AuctionSpec, states: list[EpisodeState], actions: ActionProfile) -> Outcome:
    """Settle one single-round auction episode."""
    if len(actions.bids) != spec.num_bidders or len(states) != spec.num_bidders:
        raise ValueError("states/actions must have one entry per bidder")
    for st in states:
        if st.round != 0:
            raise ValueError("single-round settlement expects round 0 states")
    types = np.array([[st.valuation_or_signal for st in states]])
    bids = np.array([list(actions.bids)], dtype=float)
    common = None
    if spec.valuation.is_common:
        common = np.array([states[0].common_value], dtype=float)
    rewards, winner, payments = settle_batch(spec, types, bids, common)

    winner_ids = tuple(int(i) for i in np.flatnonzero(winner[0]))
    k = max(len(winner_ids), 1)
    price_paid = tuple(float(payments[0, i]) * k for i in winner_ids)
    if spec.format == AuctionFormat.ALL_PAY:
        price_paid = tuple(float(bids[0, i]) for i in winner_ids)
    return Outcome(
        winner_ids=winner_ids,
        price_paid=price_paid,
        rewards=tuple(float(r) for r in rewards[0]),
        realized_common_value=float(common[0]) if common is not None else None,
    )


def korean_signals_batch(round0_bids: np.ndarray) -> np.ndarray:
    """Signal per bidder: 1 if they hold the strictly highest round-0 bid."""
    bids = np.asarray(round0_bids, dtype=float)
    top = bids.max(axis=1, keepdims=True)
    strict = (bids == top) & ((bids == top).sum(axis=1, keepdims=True) == 1)
    return strict.astype(float)


def step_korean(
    spec: AuctionSpec, states: list[EpisodeState], actions: ActionProfile
) -> tuple[list[EpisodeState], Outcome | None]:
    """Advance a Korean auction by one round.

    Round 0 produces no payments: each bidder learns the binary signal (1 iff
    they held the strictly highest round-0 bid; ties give everyone 0) and the
    episode moves to round 1. Round 1 settles as a first-price auction on the
    round-1 bids alone.
    """
    if spec.format != AuctionFormat.KOREAN:
        raise ValueError("step_korean needs a Korean spec")
    if len(actions.bids) != spec.num_bidders:
        raise ValueError("one bid per bidder")
    rounds = {st.round for st in states}
    if len(rounds) != 1:
        raise ValueError("bidders disagree on the current round")
    (round_idx,) = rounds

    if round_idx == 0:
        signals = korean_signals_batch(np.array([list(actions.bids)]))[0]
        next_states = [
            dataclasses.replace(st, observation=(1.0, float(signals[i])), round=1)
            for i, st in enumerate(states)
        ]
        return next_states, None

    if round_idx == 1:
        fp = dataclasses.replace(spec, format=AuctionFormat.FIRST_PRICE, num_rounds=1)
        flat = [dataclasses.replace(st, observation=(), round=0) for st in states]
        return states, settle(fp, flat, actions)

    raise ValueError(f"round {round_idx} out of range for a 2-round auction")


class AuctionId(str, Enum):
    """The eleven benchmark experiments."""

    FPA_UNIFORM = "fpa_uniform"
    FPA_POWER = "fpa_power"
    FPA_RISK_AVERSE = "fpa_risk_averse"
    FPA_ASYMMETRIC = "fpa_asymmetric"
    FPA_RESERVE = "fpa_reserve"
    SPA = "spa"
    ALL_PAY = "all_pay"
    THIRD_PRICE = "third_price"
    FPA_COMMON_VALUE = "fpa_common_value"
    SPA_COMMON_VALUE = "spa_common_value"
    KOREAN = "korean"


def _uniform(n: int, hi: float = 1.0) -> ValuationModel:
    return ValuationModel(ValuationKind.PRIVATE_UNIFORM, supports=((0.0, hi),) * n)


def standard_spec(auction_id: AuctionId | str) -> AuctionSpec:
    """The benchmark AuctionSpec for each experiment id."""
    aid = AuctionId(auction_id)
    if aid == AuctionId.FPA_UNIFORM:
        return AuctionSpec(AuctionFormat.FIRST_PRICE, 2, _uniform(2))
    if aid == AuctionId.FPA_POWER:
        return AuctionSpec(
            AuctionFormat.FIRST_PRICE, 2, ValuationModel(ValuationKind.PRIVATE_POWER)
        )
    if aid == AuctionId.FPA_RISK_AVERSE:
        return AuctionSpec(
            AuctionFormat.FIRST_PRICE, 2, _uniform(2), risk_aversion=RiskAversion.SQRT
        )
    if aid == AuctionId.FPA_ASYMMETRIC:
        model = ValuationModel(
            ValuationKind.PRIVATE_UNIFORM, supports=((0.0, 1.33), (0.0, 0.8))
        )
        return AuctionSpec(AuctionFormat.FIRST_PRICE, 2, model, bid_cap=1.33)
    if aid == AuctionId.FPA_RESERVE:
        return AuctionSpec(AuctionFormat.FIRST_PRICE, 2, _uniform(2), reserve_price=0.25)
    if aid == AuctionId.SPA:
        return AuctionSpec(AuctionFormat.SECOND_PRICE, 2, _uniform(2))
    if aid == AuctionId.ALL_PAY:
        return AuctionSpec(AuctionFormat.ALL_PAY, 2, _uniform(2))
    if aid == AuctionId.THIRD_PRICE:
        return AuctionSpec(AuctionFormat.THIRD_PRICE, 3, _uniform(3), bid_cap=2.0)
    if aid == AuctionId.FPA_COMMON_VALUE:
        return AuctionSpec(
            AuctionFormat.FIRST_PRICE,
            2,
            ValuationModel(ValuationKind.COMMON_ADDITIVE),
            bid_cap=2.0,
        )
    if aid == AuctionId.SPA_COMMON_VALUE:
        return AuctionSpec(
            AuctionFormat.SECOND_PRICE,
            3,
            ValuationModel(ValuationKind.COMMON_SCALED),
            bid_cap=2.0,
        )
    if aid == AuctionId.KOREAN:
        return AuctionSpec(AuctionFormat.KOREAN, 2, _uniform(2), num_rounds=2)
    raise ValueError(f"unknown auction id {auction_id}")
