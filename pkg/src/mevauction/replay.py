"""Auction-log ingestion, preprocessing and counterfactual scenario streams."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _accel
from .auction import DEFAULT_WINDOW_MS, BidSubmission, Opportunity, resolve_auction
from .market import BidFractionDist, RngStream, SearcherProfile, draw_opponent_bids

log = logging.getLogger(__name__)

LOG_HEADER = ("block_height", "opp_id", "mev_value", "route", "searcher_id", "fraction", "latency_ms", "is_winner")
HISTORICAL = "historical_participation"
LEADER = "leader_replacement"

DEFAULT_PROTOCOLS = (
    "uniswap_v2", "uniswap_v3", "quickswap", "sushiswap",
    "curve", "balancer", "dodo", "kyberswap",
)


class LogParseError(ValueError):
    """Raised when an auction log contains malformed lines.

    ``errors`` holds ``(line_number, message)`` pairs for every bad line.
    """

    def __init__(self, path, errors):
        self.path = str(path)
        self.errors = list(errors)
        shown = "; ".join(f"line {n}: {m}" for n, m in self.errors[:10])
        more = f" (+{len(self.errors) - 10} more)" if len(self.errors) > 10 else ""
        super().__init__(f"{self.path}: {len(self.errors)} malformed line(s): {shown}{more}")


@dataclass(frozen=True)
class AuctionRecord:
    block_height: int
    opp_id: str
    mev_value: float
    route: tuple[str, ...]
    bids: tuple[BidSubmission, ...] = ()
    winner_id: str | None = None

    def __post_init__(self):
        if self.winner_id is not None and self.winner_id not in {b.searcher_id for b in self.bids}:
            raise ValueError(f"{self.opp_id}: winner {self.winner_id!r} has no bid")

    def bid_of(self, searcher_id: str) -> BidSubmission | None:
        for b in self.bids:
            if b.searcher_id == searcher_id:
                return b
        return None


@dataclass(frozen=True)
class ScenarioRecord:
    opportunity: Opportunity
    threshold: float
    removed_bids: tuple[BidSubmission, ...] = ()
    num_competitors: int = 0
    removed_won: bool = False


@dataclass(frozen=True)
class ScenarioStream:
    name: str
    records: tuple[ScenarioRecord, ...]
    leader_id: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([r.threshold for r in self.records], dtype=np.float64)

    @property
    def mev_values(self) -> np.ndarray:
        return np.array([r.opportunity.mev_value for r in self.records], dtype=np.float64)


# ---------------------------------------------------------------------------
# log I/O
# ---------------------------------------------------------------------------

def _parse_row(row: dict) -> tuple:
    block = int(row["block_height"])
    if block < 0:
        raise ValueError("block_height must be >= 0")
    opp_id = row["opp_id"]
    if not opp_id:
        raise ValueError("empty opp_id")
    mev = float(row["mev_value"])
    if not math.isfinite(mev):
        raise ValueError("mev_value must be finite")
    route = tuple(p for p in str(row["route"]).split("|") if p)
    if not route:
        raise ValueError("empty route")
    sid = row.get("searcher_id") or ""
    bid = None
    winner = False
    if sid:
        fraction = float(row["fraction"])
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction {fraction} outside [0, 1]")
        lat_raw = row.get("latency_ms")
        latency = float(lat_raw) if lat_raw not in (None, "") else 0.0
        if latency < 0:
            raise ValueError("latency_ms must be >= 0")
        bid = BidSubmission(sid, fraction, latency)
        winner = str(row.get("is_winner", "0")).strip().lower() in ("1", "true")
    elif row.get("fraction") not in (None, ""):
        raise ValueError("fraction given without searcher_id")
    return block, opp_id, mev, route, bid, winner


def _iter_rows(path: Path):
    """Yield ``(line_number, row_dict_or_exception)``."""
    if path.suffix == ".jsonl":
        with path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    if isinstance(row.get("route"), list):
                        row["route"] = "|".join(row["route"])
                    row = {k: ("" if v is None else v) for k, v in row.items()}
                    missing = [k for k in LOG_HEADER if k not in row and k not in ("latency_ms", "is_winner")]
                    if missing:
                        raise ValueError(f"missing fields {missing}")
                    yield n, row
                except ValueError as exc:
                    yield n, exc
        return
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LOG_HEADER:
            raise LogParseError(path, [(1, f"header mismatch: expected {','.join(LOG_HEADER)}")])
        for fields in reader:
            n = reader.line_num
            if not fields:
                continue
            if len(fields) != len(LOG_HEADER):
                yield n, ValueError(f"expected {len(LOG_HEADER)} fields, got {len(fields)}")
                continue
            yield n, dict(zip(LOG_HEADER, fields))


def parse_auction_log(path) -> list[AuctionRecord]:
    """Read an auction log (CSV, or JSON lines for ``*.jsonl``).

    Lines of one auction must be contiguous.  Every malformed line is
    collected and reported together in a :class:`LogParseError`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"auction log not found: {path}")
    errors = []
    groups: dict[str, dict] = {}
    order = []
    last_id = None
    for n, row in _iter_rows(path):
        if isinstance(row, Exception):
            errors.append((n, str(row)))
            continue
        try:
            block, opp_id, mev, route, bid, winner = _parse_row(row)
        except (ValueError, KeyError) as exc:
            errors.append((n, str(exc)))
            continue
        g = groups.get(opp_id)
        if g is None:
            g = groups[opp_id] = {"block": block, "mev": mev, "route": route, "bids": [], "winner": None,
                                  "line": n}
            order.append(opp_id)
        else:
            if opp_id != last_id:
                errors.append((n, f"lines of auction {opp_id!r} are not contiguous"))
                continue
            if (block, mev, route) != (g["block"], g["mev"], g["route"]):
                errors.append((n, f"auction {opp_id!r} fields disagree with line {g['line']}"))
                continue
        last_id = opp_id
        if bid is not None:
            if any(b.searcher_id == bid.searcher_id for b in g["bids"]):
                errors.append((n, f"duplicate bid from {bid.searcher_id!r} in auction {opp_id!r}"))
                continue
            g["bids"].append(bid)
            if winner:
                if g["winner"] is not None:
                    errors.append((n, f"auction {opp_id!r} has more than one winner"))
                    continue
                g["winner"] = bid.searcher_id
    if errors:
        raise LogParseError(path, errors)
    return [
        AuctionRecord(g["block"], oid, g["mev"], g["route"], tuple(g["bids"]), g["winner"])
        for oid, g in ((oid, groups[oid]) for oid in order)
    ]


def _fmt(x: float) -> str:
    return repr(float(x))


def format_auction_log(records: Iterable[AuctionRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for r in records:
        route = "|".join(r.route)
        if not r.bids:
            writer.writerow([r.block_height, r.opp_id, _fmt(r.mev_value), route, "", "", "", ""])
        for b in r.bids:
            writer.writerow([r.block_height, r.opp_id, _fmt(r.mev_value), route, b.searcher_id,
                             _fmt(b.fraction), _fmt(b.latency_ms), int(b.searcher_id == r.winner_id)])
    return buf.getvalue()


def write_auction_log(records: Iterable[AuctionRecord], path) -> None:
    Path(path).write_text(format_auction_log(records), encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessReport:
    num_input: int = 0
    mev_cutoff: float = 0.0
    dropped_small_mev: int = 0
    dropped_negative_mev: int = 0
    dropped_no_winner: int = 0
    num_output: int = 0


def small_mev_cutoff(records: Sequence[AuctionRecord], quantile: float) -> float:
    if not 0.0 <= quantile < 1.0:
        raise ValueError("small_mev_quantile must lie in [0, 1)")
    if quantile == 0.0 or not records:
        return -math.inf
    return float(np.quantile([r.mev_value for r in records], quantile))


def preprocess(records: Sequence[AuctionRecord], small_mev_quantile: float = 0.10,
               require_winner: bool = True, min_mev: float | None = None,
               report: PreprocessReport | None = None) -> list[AuctionRecord]:
    """Drop small-MEV, negative-MEV and (optionally) winnerless auctions.

    The small-MEV cutoff is the empirical ``small_mev_quantile`` of the input,
    unless an absolute ``min_mev`` is given.  Records strictly below the cutoff
    are dropped.  The result is sorted by block height (stable).
    """
    cutoff = small_mev_cutoff(records, small_mev_quantile) if min_mev is None else float(min_mev)
    rep = report if report is not None else PreprocessReport()
    rep.num_input = len(records)
    rep.mev_cutoff = cutoff
    out = []
    for r in records:
        if r.mev_value < cutoff:
            rep.dropped_small_mev += 1
        elif r.mev_value < 0:
            rep.dropped_negative_mev += 1
        elif require_winner and r.winner_id is None:
            rep.dropped_no_winner += 1
        else:
            out.append(r)
    out.sort(key=lambda r: r.block_height)
    rep.num_output = len(out)
    return out


def chronological_split(records: Sequence[AuctionRecord], ratio: float = 0.5):
    """Split sorted records into ``(train, test)`` without splitting a block."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    blocks = [r.block_height for r in records]
    if any(a > b for a, b in zip(blocks, blocks[1:])):
        raise ValueError("records must be sorted by block_height")
    cut = min(math.ceil(ratio * len(records)), len(records))
    while 0 < cut < len(records) and blocks[cut - 1] == blocks[cut]:
        cut -= 1
    return list(records[:cut]), list(records[cut:])


def identify_leader(records: Sequence[AuctionRecord]) -> str:
    """Searcher with the largest realized profit; ties go to the smaller id."""
    totals: dict[str, float] = defaultdict(float)
    for r in records:
        if r.winner_id is None:
            continue
        b = r.bid_of(r.winner_id)
        totals[r.winner_id] += (1.0 - b.fraction) * r.mev_value
    if not totals:
        raise ValueError("no winning bids: cannot identify a market leader")
    return min(totals, key=lambda s: (-totals[s], s))


def route_frequency_table(records: Sequence[AuctionRecord]) -> dict[tuple[str, ...], float]:
    """Occurrences of each route per 1000 records."""
    if not records:
        return {}
    counts = Counter(r.route for r in records)
    n = len(records)
    return {route: 1000.0 * c / n for route, c in counts.items()}


def to_opportunity(r: AuctionRecord, frequency: dict | None = None) -> Opportunity:
    freq = frequency.get(r.route, 0.0) if frequency else 0.0
    return Opportunity(r.opp_id, r.block_height, max(r.mev_value, 0.0), r.route, freq)


def _csr(records: Sequence[AuctionRecord], exclude: str | None):
    indptr = np.zeros(len(records) + 1, dtype=np.int64)
    fr, lat, keep = [], [], []
    for i, r in enumerate(records):
        for b in r.bids:
            fr.append(b.fraction)
            lat.append(b.latency_ms)
            keep.append(b.searcher_id != exclude)
        indptr[i + 1] = len(fr)
    return indptr, np.array(fr, dtype=np.float64), np.array(lat, dtype=np.float64), np.array(keep, dtype=bool)


def build_historical_participation(test_records: Sequence[AuctionRecord], window_ms: float = DEFAULT_WINDOW_MS,
                                   frequency: dict | None = None) -> ScenarioStream:
    """Add the agent as one more bidder against every recorded auction."""
    if frequency is None:
        frequency = route_frequency_table(test_records)
    indptr, fr, lat, keep = _csr(test_records, None)
    thresholds = _accel.segment_max(indptr, fr, lat, keep, window_ms)
    out = []
    for r, thr in zip(test_records, thresholds):
        n_on_time = sum(1 for b in r.bids if b.latency_ms <= window_ms)
        out.append(ScenarioRecord(to_opportunity(r, frequency), float(thr), (), n_on_time))
    return ScenarioStream(HISTORICAL, tuple(out))


def build_leader_replacement(test_records: Sequence[AuctionRecord], leader_id: str,
                             window_ms: float = DEFAULT_WINDOW_MS,
                             frequency: dict | None = None) -> ScenarioStream:
    """Replace ``leader_id`` by the agent in the auctions where the leader bid."""
    if frequency is None:
        frequency = route_frequency_table(test_records)
    kept = [r for r in test_records if r.bid_of(leader_id) is not None]
    if not kept:
        log.warning("leader %r never bid in the given records; leader-replacement stream is empty", leader_id)
        return ScenarioStream(LEADER, (), leader_id)
    indptr, fr, lat, keep = _csr(kept, leader_id)
    thresholds = _accel.segment_max(indptr, fr, lat, keep, window_ms)
    out = []
    for r, thr in zip(kept, thresholds):
        removed = tuple(b for b in r.bids if b.searcher_id == leader_id)
        n_on_time = sum(1 for b in r.bids if b.searcher_id != leader_id and b.latency_ms <= window_ms)
        out.append(ScenarioRecord(to_opportunity(r, frequency), float(thr), removed, n_on_time,
                                  removed_won=r.winner_id == leader_id))
    return ScenarioStream(LEADER, tuple(out), leader_id)


def scenario_from_simulation(opportunities: Sequence[Opportunity], profiles: Sequence[SearcherProfile],
                             window_ms: float, rng, name: str = "simulated") -> ScenarioStream:
    """Freeze simulated opponents into a replayable stream.

    Opponent draws never depend on the agent's bid, so the pre-drawn
    thresholds give the same auctions a live simulation would.
    """
    g = rng.generator() if isinstance(rng, RngStream) else rng
    out = []
    for opp in opportunities:
        bids = draw_opponent_bids(opp, profiles, g)
        on_time = [b.fraction for b in bids if b.latency_ms <= window_ms]
        out.append(ScenarioRecord(opp, max(on_time, default=0.0), (), len(on_time)))
    return ScenarioStream(name, tuple(out))


# ---------------------------------------------------------------------------
# synthetic logs
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Opportunity distribution plus opponent profiles for generated logs."""

    count: int = 1000
    profiles: tuple[SearcherProfile, ...] = field(default_factory=tuple)
    protocols: tuple[str, ...] = DEFAULT_PROTOCOLS
    max_route_len: int = 4
    mev_log_mean: float = 0.0
    mev_log_sigma: float = 1.0
    opps_per_block: float = 1.5
    start_block: int = 1
    window_ms: float = DEFAULT_WINDOW_MS


def default_profiles() -> tuple[SearcherProfile, ...]:
    """A small heterogeneous market with one dominant searcher."""
    return (
        SearcherProfile("searcher_x", {1: 0.9, 2: 0.8, 3: 0.6}, 60.0, BidFractionDist(6.0, 6.0)),
        SearcherProfile("searcher_a", {1: 0.5, 2: 0.4, 3: 0.3}, 120.0, BidFractionDist(3.0, 5.0)),
        SearcherProfile("searcher_b", {1: 0.3, 2: 0.3, 3: 0.4}, 90.0, BidFractionDist(2.0, 6.0)),
        SearcherProfile("searcher_c", {1: 0.2, 2: 0.1, 3: 0.1}, 200.0, BidFractionDist(4.0, 4.0)),
    )


def synthetic_opportunities(spec: SyntheticSpec, rng: np.random.Generator, count: int | None = None) -> list[Opportunity]:
    count = spec.count if count is None else count
    if count < 1:
        raise ValueError("count must be >= 1")
    protos = list(spec.protocols)
    block = spec.start_block
    out = []
    for i in range(count):
        length = int(rng.integers(1, spec.max_route_len + 1))
        route = tuple(protos[j] for j in rng.integers(0, len(protos), size=length))
        mev = float(rng.lognormal(spec.mev_log_mean, spec.mev_log_sigma))
        out.append(Opportunity(f"opp{i:07d}", block, mev, route))
        # geometric gaps keep several opportunities in some blocks
        if rng.random() < 1.0 / spec.opps_per_block:
            block += 1
    return out


def generate_synthetic_log(spec: SyntheticSpec, rng) -> list[AuctionRecord]:
    """Deterministic synthetic auction log; only on-time bids are recorded."""
    g = rng.generator() if isinstance(rng, RngStream) else rng
    opps = synthetic_opportunities(spec, g)
    records = []
    for opp in opps:
        bids = [b for b in draw_opponent_bids(opp, spec.profiles, g) if b.latency_ms <= spec.window_ms]
        outcome = resolve_auction(bids, spec.window_ms)
        records.append(AuctionRecord(opp.block_height, opp.id, opp.mev_value, opp.route, tuple(bids),
                                     outcome.winner))
    return records
