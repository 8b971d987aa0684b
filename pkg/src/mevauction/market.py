"""Stochastic opponent model: arrival, latency censoring and bid fractions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .auction import (
    DEFAULT_WINDOW_MS,
    AuctionOutcome,
    BidSubmission,
    Opportunity,
    resolve_auction,
)

AGENT_ID = "__agent__"
REAL_TIME = "real_time"
DELAYED = "delayed"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self, *purpose: int) -> np.random.Generator:
        key = (int(self.stream_id),) + tuple(int(p) for p in purpose)
        return np.random.default_rng(np.random.SeedSequence(int(self.seed), spawn_key=key))


@dataclass(frozen=True)
class BidFractionDist:
    """Opponent bid-fraction law: Beta(a, b) on [0, 1], or a point mass.

    Point masses (``fixed``) are the degenerate limit used for deterministic
    opponents.
    """

    a: float = 2.0
    b: float = 5.0
    fixed: float | None = None

    def __post_init__(self):
        if self.fixed is not None:
            if not 0.0 <= self.fixed <= 1.0:
                raise ConfigurationError("fixed bid fraction must lie in [0, 1]")
        elif not (self.a > 0 and self.b > 0):
            raise ConfigurationError("Beta parameters must be > 0")

    @classmethod
    def from_moments(cls, mean: float, var: float) -> "BidFractionDist":
        """Moment-matched Beta law for an observed mean and variance."""
        if not 0 < mean < 1 or not 0 < var < mean * (1 - mean):
            raise ConfigurationError(f"no Beta law with mean {mean} and variance {var}")
        common = mean * (1 - mean) / var - 1
        return cls(a=mean * common, b=(1 - mean) * common)

    def sample(self, rng: np.random.Generator) -> float:
        if self.fixed is not None:
            return float(self.fixed)
        return float(rng.beta(self.a, self.b))


@dataclass(frozen=True)
class SearcherProfile:
    searcher_id: str
    arrival_prob_by_complexity: Mapping[int, float]
    latency_mean_ms: float
    bid_fraction_dist: BidFractionDist = field(default_factory=BidFractionDist)

    def __post_init__(self):
        for k, p in self.arrival_prob_by_complexity.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{self.searcher_id}: arrival probability {p} for bucket {k} not in [0, 1]")
        if not self.latency_mean_ms > 0:
            raise ConfigurationError(f"{self.searcher_id}: latency_mean_ms must be > 0")

    @classmethod
    def uniform(cls, searcher_id: str, arrival_prob: float, latency_mean_ms: float,
                bid_fraction_dist: BidFractionDist) -> "SearcherProfile":
        """Profile whose arrival probability ignores route complexity."""
        return cls(searcher_id, {1: arrival_prob, 2: arrival_prob, 3: arrival_prob},
                   latency_mean_ms, bid_fraction_dist)


@dataclass(frozen=True)
class InformationRegime:
    mode: str = REAL_TIME
    delay_auctions: int = 0

    def __post_init__(self):
        if self.mode not in (REAL_TIME, DELAYED):
            raise ConfigurationError(f"unknown disclosure mode {self.mode!r}")
        if self.delay_auctions < 0:
            raise ConfigurationError("delay_auctions must be >= 0")
        if (self.delay_auctions == 0) != (self.mode == REAL_TIME):
            raise ConfigurationError("delay_auctions must be 0 exactly when mode is real_time")

    def last_visible(self, now_index: int) -> int:
        """Largest outcome index visible at ``now_index`` (may be negative)."""
        if self.mode == REAL_TIME:
            return now_index - 1
        return now_index - self.delay_auctions


def route_complexity(opportunity: Opportunity) -> int:
    return min(len(set(opportunity.route)), 3)


def sample_arrival(profile: SearcherProfile, opportunity: Opportunity, rng: np.random.Generator) -> bool:
    bucket = route_complexity(opportunity)
    try:
        p = profile.arrival_prob_by_complexity[bucket]
    except KeyError:
        raise ConfigurationError(
            f"profile {profile.searcher_id!r} has no arrival probability for complexity bucket {bucket}"
        ) from None
    # one uniform per call keeps draw counts fixed even for p in {0, 1}
    return bool(rng.random() < p)


def sample_latency(profile: SearcherProfile, rng: np.random.Generator) -> float:
    return float(rng.exponential(profile.latency_mean_ms))


def _as_generator(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


def draw_opponent_bids(opportunity: Opportunity, profiles: Sequence[SearcherProfile],
                       rng) -> list[BidSubmission]:
    """Sample the arriving opponents' bids, in declared profile order.

    Per profile the draw order is arrival, then latency, then fraction; a
    profile that does not arrive consumes only its arrival draw.
    """
    rng = _as_generator(rng)
    bids = []
    for prof in profiles:
        if not sample_arrival(prof, opportunity, rng):
            continue
        latency = sample_latency(prof, rng)
        fraction = prof.bid_fraction_dist.sample(rng)
        bids.append(BidSubmission(prof.searcher_id, fraction, latency))
    return bids


def simulate_auction(opportunity: Opportunity, agent_fraction: float,
                     profiles: Sequence[SearcherProfile], window_ms: float = DEFAULT_WINDOW_MS,
                     rng=None) -> tuple[AuctionOutcome, float]:
    """Run one auction with the agent bidding at zero latency.

    Returns the outcome and the agent's competition threshold.
    """
    if not 0.0 <= agent_fraction <= 1.0:
        raise ValueError("agent_fraction must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng()
    bids = draw_opponent_bids(opportunity, profiles, rng)
    bids.append(BidSubmission(AGENT_ID, agent_fraction, 0.0))
    outcome = resolve_auction(bids, window_ms)
    return outcome, outcome.threshold_per_bidder[AGENT_ID]


def opponent_threshold(bids: Sequence[BidSubmission], window_ms: float = DEFAULT_WINDOW_MS) -> float:
    return max((b.fraction for b in bids if b.latency_ms <= window_ms), default=0.0)


def disclose(history: Sequence, regime: InformationRegime, now_index: int) -> list:
    """Entries of ``history`` (indexed by auction order) visible at ``now_index``.

    Items may be :class:`AuctionOutcome` objects, in which case the winning
    fractions are returned, or any per-auction record, returned unchanged.
    """
    if now_index < 0:
        raise ValueError("now_index must be >= 0")
    stop = min(regime.last_visible(now_index) + 1, len(history))
    visible = history[:max(stop, 0)]
    return [h.winning_fraction if isinstance(h, AuctionOutcome) else h for h in visible]
