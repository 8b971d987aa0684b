import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import opp
from mevauction.auction import AuctionOutcome
from mevauction.market import (
    BidFractionDist,
    ConfigurationError,
    InformationRegime,
    RngStream,
    SearcherProfile,
    disclose,
    draw_opponent_bids,
    route_complexity,
    sample_arrival,
    sample_latency,
    simulate_auction,
)


def profile(p=1.0, latency=1.0, fixed=None, a=2.0, b=5.0, sid="x"):
    dist = BidFractionDist(fixed=fixed) if fixed is not None else BidFractionDist(a, b)
    return SearcherProfile.uniform(sid, p, latency, dist)


@pytest.mark.parametrize("route,bucket", [
    (("P1", "P1"), 1), (("P1", "P2"), 2), (("P1", "P2", "P3", "P4"), 3), (("P1", "P2", "P1"), 2),
])
def test_route_complexity(route, bucket):
    assert route_complexity(opp(route)) == bucket


def test_arrival_degenerate_probabilities():
    g = np.random.default_rng(0)
    o = opp()
    assert not any(sample_arrival(profile(0.0), o, g) for _ in range(1000))
    assert all(sample_arrival(profile(1.0), o, g) for _ in range(1000))


def test_arrival_frequency():
    g = RngStream(5, 0).generator()
    hits = sum(sample_arrival(profile(0.5), opp(), g) for _ in range(10_000))
    assert hits / 10_000 == pytest.approx(0.5, abs=0.02)


def test_arrival_uses_complexity_bucket():
    prof = SearcherProfile("x", {1: 1.0, 2: 0.0, 3: 1.0}, 10.0)
    g = np.random.default_rng(0)
    assert sample_arrival(prof, opp(("a",)), g)
    assert not sample_arrival(prof, opp(("a", "b")), g)


def test_missing_bucket_is_configuration_error():
    prof = SearcherProfile("x", {1: 0.5}, 10.0)
    with pytest.raises(ConfigurationError):
        sample_arrival(prof, opp(("a", "b", "c")), np.random.default_rng(0))


def test_latency_on_time_probability_matches_exponential_cdf():
    g = RngStream(9, 3).generator()
    lat = np.array([sample_latency(profile(latency=100.0), g) for _ in range(10_000)])
    assert (lat >= 0).all()
    assert (lat <= 250).mean() == pytest.approx(1 - math.exp(-2.5), abs=0.01)


def test_latency_degenerate_mean():
    g = np.random.default_rng(1)
    assert max(sample_latency(profile(latency=1e-6), g) for _ in range(100)) < 1e-3


def test_rng_stream_determinism_and_independence():
    a = RngStream(42, 7).generator().random(5)
    b = RngStream(42, 7).generator().random(5)
    c = RngStream(42, 8).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sample_latency(profile(latency=50), RngStream(1, 1).generator()) == \
        sample_latency(profile(latency=50), RngStream(1, 1).generator())


def test_profile_validation():
    with pytest.raises(ConfigurationError):
        profile(p=1.5)
    with pytest.raises(ConfigurationError):
        profile(latency=0.0)
    with pytest.raises(ConfigurationError):
        BidFractionDist(a=0.0, b=1.0)
    with pytest.raises(ConfigurationError):
        BidFractionDist(fixed=1.2)


def test_beta_moment_matching_roundtrip():
    d = BidFractionDist.from_moments(0.3, 0.01)
    mean = d.a / (d.a + d.b)
    var = d.a * d.b / ((d.a + d.b) ** 2 * (d.a + d.b + 1))
    assert mean == pytest.approx(0.3)
    assert var == pytest.approx(0.01)
    with pytest.raises(ConfigurationError):
        BidFractionDist.from_moments(0.5, 0.3)


# -- simulate_auction -----------------------------------------------------------

def test_uncontested_auction():
    out, thr = simulate_auction(opp(), 0.1, [], 250, np.random.default_rng(0))
    assert out.winner == "__agent__" and thr == 0.0


def test_deterministic_opponent_below_agent():
    out, thr = simulate_auction(opp(), 0.31, [profile(1.0, 1.0, fixed=0.3)], 250, RngStream(0).generator())
    assert out.winner == "__agent__"
    assert thr == 0.3


def test_deterministic_opponent_above_agent():
    out, thr = simulate_auction(opp(), 0.4, [profile(1.0, 1.0, fixed=0.5)], 250, RngStream(0).generator())
    assert out.winner == "x"
    assert thr == 0.5


def test_simulation_reproducible_per_stream():
    profs = [profile(0.6, 120.0, sid="a"), profile(0.4, 80.0, a=3, b=3, sid="b")]
    opps = [opp(("p", "q")[: 1 + i % 2], mev=1 + i) for i in range(50)]

    def run(stream):
        g = stream.generator()
        res = []
        for o in opps:
            out, thr = simulate_auction(o, 0.3, profs, 250, g)
            res.append((out.winner, thr, out.num_late))
        return res

    assert run(RngStream(3, 1)) == run(RngStream(3, 1))
    assert run(RngStream(3, 1)) != run(RngStream(3, 2))


def test_opponent_draws_do_not_depend_on_agent_bid():
    profs = [profile(0.7, 100.0, sid="a"), profile(0.5, 200.0, sid="b")]
    for agent in (0.0, 0.5, 1.0):
        g = RngStream(11).generator()
        _, thr = simulate_auction(opp(), agent, profs, 250, g)
        trailing = g.random()
        if agent == 0.0:
            ref = (thr, trailing)
        assert (thr, trailing) == ref


def test_wider_window_never_lowers_on_time_rate():
    profs = [profile(1.0, 150.0)]
    rates = []
    for window in (50, 150, 250, 400):
        g = RngStream(4).generator()
        on_time = 0
        for _ in range(3000):
            bids = draw_opponent_bids(opp(), profs, g)
            on_time += sum(b.latency_ms <= window for b in bids)
        rates.append(on_time / 3000)
    assert rates == sorted(rates)
    assert rates[0] == pytest.approx(1 - math.exp(-50 / 150), abs=0.03)


def test_zero_arrival_market_is_uncontested():
    profs = [profile(0.0, 10.0, sid=s) for s in "abc"]
    g = np.random.default_rng(0)
    for _ in range(200):
        out, thr = simulate_auction(opp(), 0.05, profs, 250, g)
        assert out.winner == "__agent__" and thr == 0.0


# -- disclosure -----------------------------------------------------------------

def outcomes(n):
    return [AuctionOutcome("w", i / 10, {}, (), 0) for i in range(n)]


def test_disclose_real_time():
    assert disclose(outcomes(5), InformationRegime(), 5) == [0.0, 0.1, 0.2, 0.3, 0.4]


def test_disclose_delay_exceeds_history():
    assert disclose(outcomes(5), InformationRegime("delayed", 10), 5) == []


def test_disclose_delayed_window():
    assert disclose(outcomes(5), InformationRegime("delayed", 2), 5) == [0.0, 0.1, 0.2, 0.3]


def test_regime_validation():
    with pytest.raises(ConfigurationError):
        InformationRegime("delayed", 0)
    with pytest.raises(ConfigurationError):
        InformationRegime("real_time", 3)
    with pytest.raises(ConfigurationError):
        InformationRegime("sometimes", 0)


@given(st.integers(0, 30), st.integers(1, 20), st.integers(0, 40))
def test_real_time_disclosure_is_superset(n, delay, now):
    hist = outcomes(n)
    rt = disclose(hist, InformationRegime(), now)
    dl = disclose(hist, InformationRegime("delayed", delay), now)
    assert dl == rt[: len(dl)]
    assert len(dl) <= len(rt)
