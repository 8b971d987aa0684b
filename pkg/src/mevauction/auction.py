"""Sealed-bid first-price auction rules, shaped reward and evaluation metrics.

Bids are expressed as fractions of the opportunity's MEV value.  A bidder wins
only when its fraction is *strictly* above every other on-time fraction, so
exact ties leave the tied bidders without a win.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import _accel

DEFAULT_WINDOW_MS = 250.0
DEFAULT_EPSILON = 1e-9


class MalformedInputError(ValueError):
    """Raised for structurally invalid auction input (e.g. duplicate bidders)."""


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (empty tally, zero upper bound)."""


@dataclass(frozen=True)
class Opportunity:
    id: str
    block_height: int
    mev_value: float
    route: tuple[str, ...]
    route_frequency: float = 0.0

    def __post_init__(self):
        if self.mev_value < 0:
            raise ValueError(f"mev_value must be >= 0, got {self.mev_value}")
        if not self.route:
            raise ValueError("route must be non-empty")
        if self.block_height < 0:
            raise ValueError("block_height must be >= 0")
        if not isinstance(self.route, tuple):
            object.__setattr__(self, "route", tuple(self.route))


@dataclass(frozen=True)
class BidSubmission:
    searcher_id: str
    fraction: float
    latency_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")
        if self.latency_ms < 0:
            raise ValueError(f"latency_ms must be >= 0, got {self.latency_ms}")


@dataclass(frozen=True)
class AuctionOutcome:
    winner: str | None
    winning_fraction: float
    threshold_per_bidder: Mapping[str, float]
    on_time_bidders: tuple[str, ...]
    num_late: int

    @property
    def num_on_time(self) -> int:
        return len(self.on_time_bidders)


@dataclass(frozen=True)
class RewardParams:
    epsilon: float = DEFAULT_EPSILON
    lambda_loss: float = 0.05
    alpha_overbid: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.lambda_loss < 0 or self.alpha_overbid < 0:
            raise ValueError("lambda_loss and alpha_overbid must be >= 0")


@dataclass
class EvalTally:
    """Per-auction win indicators, realized profits and counterfactual maxima."""

    wins: np.ndarray
    profits: np.ndarray
    counterfactual_max: np.ndarray
    fractions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.wins = np.asarray(self.wins, dtype=np.int64)
        self.profits = np.asarray(self.profits, dtype=np.float64)
        self.counterfactual_max = np.asarray(self.counterfactual_max, dtype=np.float64)
        n = self.wins.shape[0]
        if self.profits.shape[0] != n or self.counterfactual_max.shape[0] != n:
            raise ValueError("tally arrays must have equal length")
        if np.any(self.profits[self.wins == 0] != 0):
            raise ValueError("profits must be 0 for lost auctions")
        if np.any(self.counterfactual_max < 0):
            raise ValueError("counterfactual_max must be >= 0")

    @property
    def num_auctions(self) -> int:
        return int(self.wins.shape[0])


class ProfitCapture(NamedTuple):
    mpc: float
    sum_profit: float
    upper_bound: float


def is_win(fraction: float, threshold: float) -> bool:
    return fraction > threshold


def resolve_auction(bids: Sequence[BidSubmission], window_ms: float = DEFAULT_WINDOW_MS) -> AuctionOutcome:
    """Resolve one sealed-bid first-price auction.

    Bids arriving after ``window_ms`` are discarded.  Every on-time bidder gets
    a threshold equal to the best competing on-time fraction (0 when alone);
    the winner is the bidder whose fraction strictly exceeds its threshold.
    """
    if not window_ms > 0:
        raise ValueError("window_ms must be > 0")
    seen = set()
    for b in bids:
        if b.searcher_id in seen:
            raise MalformedInputError(f"duplicate searcher_id {b.searcher_id!r} in bids")
        seen.add(b.searcher_id)

    on_time = [b for b in bids if b.latency_ms <= window_ms]
    num_late = len(bids) - len(on_time)
    # two largest fractions are enough to get every bidder's competing maximum
    top1 = top2 = 0.0
    top1_count = 0
    for b in on_time:
        if b.fraction > top1:
            top2, top1, top1_count = top1, b.fraction, 1
        elif b.fraction == top1:
            top1_count += 1
            top2 = top1
        elif b.fraction > top2:
            top2 = b.fraction

    thresholds = {}
    winner = None
    winning_fraction = 0.0
    for b in on_time:
        thr = top2 if (b.fraction == top1 and top1_count == 1) else top1
        thresholds[b.searcher_id] = thr
        if is_win(b.fraction, thr):
            winner, winning_fraction = b.searcher_id, b.fraction
    return AuctionOutcome(
        winner=winner,
        winning_fraction=winning_fraction,
        threshold_per_bidder=thresholds,
        on_time_bidders=tuple(b.searcher_id for b in on_time),
        num_late=num_late,
    )


def realized_profit(fraction: float, mev: float, won: bool) -> float:
    return (1.0 - fraction) * mev if won else 0.0


def shaped_reward(fraction: float, mev: float, threshold: float, won: bool,
                  params: RewardParams = RewardParams()) -> float:
    """Variance-reduced per-auction reward.

    Normalized profit, minus ``lambda_loss`` on a loss, minus ``alpha_overbid``
    times the margin by which the bid exceeded the competing threshold.  The
    overbid term applies whether or not the auction was won.
    """
    profit = realized_profit(fraction, mev, won)
    reward = profit / (mev + params.epsilon)
    if not won:
        reward -= params.lambda_loss
    reward -= params.alpha_overbid * max(fraction - threshold, 0.0)
    return reward


def counterfactual_max_profit(threshold: float, mev: float, epsilon: float = DEFAULT_EPSILON) -> float:
    return max(0.0, (1.0 - (threshold + epsilon)) * mev)


def tally_bids(fractions, thresholds, mev_values, epsilon: float = DEFAULT_EPSILON) -> EvalTally:
    """Score a vector of bids against known thresholds in one pass."""
    fractions = np.asarray(fractions, dtype=np.float64)
    wins, profits, best = _accel.tally(fractions, thresholds, mev_values, epsilon)
    return EvalTally(wins=wins, profits=profits, counterfactual_max=best, fractions=fractions)


def win_ratio(tally: EvalTally) -> float:
    if tally.num_auctions == 0:
        raise UndefinedMetricError("win ratio undefined for zero auctions")
    return float(tally.wins.sum()) / tally.num_auctions


def max_profit_capture(tally: EvalTally) -> ProfitCapture:
    return profit_capture_from_sums(float(tally.profits.sum()), float(tally.counterfactual_max.sum()))


def profit_capture_from_sums(sum_profit: float, upper_bound: float) -> ProfitCapture:
    if not upper_bound > 0:
        raise UndefinedMetricError("max-profit capture undefined when the upper bound is 0")
    return ProfitCapture(sum_profit / upper_bound, sum_profit, upper_bound)
