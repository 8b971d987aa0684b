"""Stateless and history-conditioned bidding environments.

Observations are flat float64 vectors made of three blocks:

* route block: route length, distinct-protocol count, log route frequency,
  one-hot first hop and one-hot last hop (vocabulary plus an "other" slot);
* window block: the agent's recent win rate, the mean on-time bidder count
  and the mean top fraction over the last ``W`` disclosed auctions;
* history block: ``K`` entries sampled in temporal order from the last ``H``
  disclosed auctions, each ``[valid, length, distinct, frequency, top
  fraction, bidder count]``; padded entries are all zeros.

In stateless mode only the route block is populated, so every observation is
a pure function of the current opportunity.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .auction import DEFAULT_WINDOW_MS, Opportunity, RewardParams, is_win, realized_profit, shaped_reward
from .market import InformationRegime, RngStream, SearcherProfile, simulate_auction
from .replay import DEFAULT_PROTOCOLS, ScenarioStream

log = logging.getLogger(__name__)

STATELESS = "stateless"
HISTORY = "history_conditioned"
WINDOW_FEATURES = 3
HISTORY_ENTRY = 6


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    mode: str = STATELESS
    H: int = 10
    K: int = 5
    W: int = 50
    regime: InformationRegime = field(default_factory=InformationRegime)
    reward_params: RewardParams = field(default_factory=RewardParams)
    protocol_vocabulary: tuple[str, ...] = DEFAULT_PROTOCOLS
    max_route_len: float = 6.0
    max_bidders: float = 10.0

    def __post_init__(self):
        if self.mode not in (STATELESS, HISTORY):
            raise ValueError(f"unknown environment mode {self.mode!r}")
        if not 1 <= self.K <= self.H:
            raise ValueError("need 1 <= K <= H")
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if not self.protocol_vocabulary:
            raise ValueError("protocol vocabulary must be non-empty")

    @property
    def route_dim(self) -> int:
        return 3 + 2 * (len(self.protocol_vocabulary) + 1)

    @property
    def obs_dim(self) -> int:
        return self.route_dim + WINDOW_FEATURES + self.K * HISTORY_ENTRY

    def blocks(self) -> dict[str, slice]:
        r, w = self.route_dim, self.route_dim + WINDOW_FEATURES
        return {"route": slice(0, r), "window": slice(r, w), "history": slice(w, self.obs_dim)}


def route_features(opportunity: Opportunity, vocabulary: Sequence[str], max_route_len: float = 6.0) -> np.ndarray:
    v = len(vocabulary)
    if v == 0:
        raise ValueError("vocabulary must be non-empty")
    index = {p: i for i, p in enumerate(vocabulary)}
    out = np.zeros(3 + 2 * (v + 1), dtype=np.float64)
    route = opportunity.route
    out[0] = len(route) / max_route_len
    out[1] = len(set(route)) / max_route_len
    out[2] = math.log1p(opportunity.route_frequency)
    out[3 + index.get(route[0], v)] = 1.0
    out[3 + (v + 1) + index.get(route[-1], v)] = 1.0
    return out


def sample_history(window: Sequence, k: int, rng: np.random.Generator) -> tuple[list, int]:
    """Sample ``k`` entries of ``window`` uniformly without replacement, kept in order.

    Returns ``(entries, num_padding)``; when the window holds fewer than ``k``
    entries all of them are returned and the remainder is padding.
    """
    n = len(window)
    if n <= k:
        return list(window), k - n
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [window[i] for i in idx], 0


class ReplaySource:
    """Auction thresholds taken from a frozen scenario stream."""

    def __init__(self, stream: ScenarioStream):
        self.stream = stream
        self.opportunities = [r.opportunity for r in stream.records]

    def __len__(self):
        return len(self.stream.records)

    def resolve(self, t: int, action: float, rng) -> tuple[float, int]:
        rec = self.stream.records[t]
        return rec.threshold, rec.num_competitors


class SimulatorSource:
    """Auctions resolved against freshly sampled opponents."""

    def __init__(self, opportunities: Sequence[Opportunity], profiles: Sequence[SearcherProfile],
                 window_ms: float = DEFAULT_WINDOW_MS):
        self.opportunities = list(opportunities)
        self.profiles = tuple(profiles)
        self.window_ms = window_ms

    def __len__(self):
        return len(self.opportunities)

    def resolve(self, t: int, action: float, rng) -> tuple[float, int]:
        outcome, threshold = simulate_auction(self.opportunities[t], action, self.profiles, self.window_ms, rng)
        return threshold, outcome.num_on_time - 1


class BiddingEnv:
    """One auction per step; an episode walks the source once."""

    def __init__(self, config: EnvConfig, source, rng_stream: RngStream | None = None):
        if isinstance(source, ScenarioStream):
            source = ReplaySource(source)
        self.config = config
        self.source = source
        self.rng_stream = rng_stream or RngStream(0, 0)
        self._route_cache = None
        self._t = 0
        self._done = True
        self.observation = None
        self.last_history_indices = []

    # -- episode interface -------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        if len(self.source) == 0:
            raise EnvError("cannot reset on an empty auction stream")
        if seed is not None:
            self.rng_stream = RngStream(seed, self.rng_stream.stream_id)
        self._sim_rng = self.rng_stream.generator(0)
        self._hist_rng = self.rng_stream.generator(1)
        self.route_matrix()
        self._t = 0
        self._done = False
        # disclosed[i] = (summary_row, top_fraction, bidders) for auction i
        self._disclosed: list[tuple[np.ndarray, float, float]] = []
        self._own = deque(maxlen=self.config.W)
        self.observation = self._observe()
        return self.observation

    def route_matrix(self) -> np.ndarray:
        """Route features of every auction in the stream, one row each (computed once)."""
        if self._route_cache is None:
            cfg = self.config
            self._route_cache = np.stack([
                route_features(o, cfg.protocol_vocabulary, cfg.max_route_len) for o in self.source.opportunities
            ])
        return self._route_cache

    @property
    def index(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action: float):
        if self._done:
            raise EnvError("step() called on a finished episode; call reset()")
        if not math.isfinite(action):
            raise ValueError(f"action must be finite, got {action}")
        if not 0.0 <= action <= 1.0:
            log.warning("action %r outside [0, 1]; clipping", action)
            action = min(max(action, 0.0), 1.0)
        t = self._t
        opp = self.source.opportunities[t]
        threshold, competitors = self.source.resolve(t, action, self._sim_rng)
        won = is_win(action, threshold)
        v = opp.mev_value
        reward = shaped_reward(action, v, threshold, won, self.config.reward_params)
        profit = realized_profit(action, v, won)

        self._own.append(1.0 if won else 0.0)
        summary = self._route_cache[t, :3]
        self._disclosed.append((summary, max(action, threshold), float(competitors + 1)))

        self._t += 1
        self._done = self._t >= len(self.source)
        obs = np.zeros(self.config.obs_dim) if self._done else self._observe()
        self.observation = obs
        info = {"won": won, "profit": profit, "threshold": threshold, "mev": v, "action": action}
        return reward, obs, self._done, info

    # -- observation -------------------------------------------------------

    def visible_indices(self) -> range:
        """Indices of past auctions disclosed to the agent at the current step."""
        last = self.config.regime.last_visible(self._t)
        return range(0, max(min(last + 1, len(self._disclosed)), 0))

    def _observe(self) -> np.ndarray:
        cfg = self.config
        obs = np.zeros(cfg.obs_dim, dtype=np.float64)
        blocks = cfg.blocks()
        obs[blocks["route"]] = self._route_cache[self._t]
        self.last_history_indices = []
        if cfg.mode == STATELESS:
            return obs

        vis = self.visible_indices()
        w = blocks["window"].start
        if self._own:
            obs[w] = sum(self._own) / len(self._own)
        recent = vis[-cfg.W:]
        if len(recent):
            obs[w + 1] = sum(self._disclosed[i][2] for i in recent) / len(recent) / cfg.max_bidders
            obs[w + 2] = sum(self._disclosed[i][1] for i in recent) / len(recent)

        window = list(vis[-cfg.H:])
        picked, _ = sample_history(window, cfg.K, self._hist_rng)
        self.last_history_indices = picked
        h = blocks["history"].start
        for j, i in enumerate(picked):
            summary, top, bidders = self._disclosed[i]
            base = h + j * HISTORY_ENTRY
            obs[base] = 1.0
            obs[base + 1:base + 4] = summary
            obs[base + 4] = top
            obs[base + 5] = bidders / cfg.max_bidders
        return obs
