import numpy as np
import pytest

from conftest import opp
from mevauction.auction import RewardParams
from mevauction.env import (
    HISTORY,
    STATELESS,
    BiddingEnv,
    EnvConfig,
    EnvError,
    SimulatorSource,
    route_features,
    sample_history,
)
from mevauction.market import BidFractionDist, InformationRegime, RngStream, SearcherProfile
from mevauction.replay import ScenarioRecord, ScenarioStream, default_profiles

RP = RewardParams(1e-9, 0.05, 0.1)


def stream(thresholds, mev=100.0, routes=None):
    recs = []
    for i, thr in enumerate(thresholds):
        route = routes[i % len(routes)] if routes else ("curve", "dodo")[: 1 + i % 2]
        recs.append(ScenarioRecord(opp(route, mev, block=i, oid=f"o{i}", freq=float(i % 7)), thr, (), 1 + i % 3))
    return ScenarioStream("historical_participation", tuple(recs))


def test_route_features_hand_encoding():
    f = route_features(opp(("P1", "P2")), ["P1", "P2"], max_route_len=1.0)
    np.testing.assert_array_equal(f, [2, 2, 0, 1, 0, 0, 0, 1, 0])
    g = route_features(opp(("P1", "P2")), ["P1", "P2"])
    assert g[0] == pytest.approx(2 / 6) and g[1] == pytest.approx(2 / 6)


def test_route_features_out_of_vocabulary():
    f = route_features(opp(("P9",)), ["P1", "P2"])
    assert f[3:6].tolist() == [0, 0, 1] and f[6:9].tolist() == [0, 0, 1]


def test_route_features_frequency_and_determinism():
    o = opp(("a", "b", "a"), freq=999.0)
    f1, f2 = route_features(o, ["a"]), route_features(o, ["a"])
    np.testing.assert_array_equal(f1, f2)
    assert f1[1] == pytest.approx(2 / 6)
    assert f1[2] == pytest.approx(np.log(1000.0))


def test_sample_history_sorted_distinct():
    window = list(range(10))
    picked, pad = sample_history(window, 5, np.random.default_rng(0))
    assert len(picked) == 5 and pad == 0
    assert all(a < b for a, b in zip(picked, picked[1:]))


def test_sample_history_padding_and_exhaustive():
    picked, pad = sample_history([7, 8, 9], 5, np.random.default_rng(0))
    assert picked == [7, 8, 9] and pad == 2
    picked, pad = sample_history(list(range(5)), 5, np.random.default_rng(0))
    assert picked == list(range(5)) and pad == 0


def test_env_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(K=11, H=10)
    with pytest.raises(ValueError):
        EnvConfig(W=0)
    with pytest.raises(ValueError):
        EnvConfig(mode="recurrent")


@pytest.mark.parametrize("mode", [STATELESS, HISTORY])
def test_reset_and_episode_length(mode):
    cfg = EnvConfig(mode=mode, reward_params=RP)
    env = BiddingEnv(cfg, stream([0.2] * 25))
    obs = env.reset()
    assert obs.shape == (cfg.obs_dim,)
    assert not obs[cfg.blocks()["history"]].any()
    steps = 0
    done = False
    while not done:
        _, o, done, _ = env.step(0.5)
        assert o.shape == (cfg.obs_dim,)
        steps += 1
    assert steps == 25
    with pytest.raises(EnvError):
        env.step(0.5)


def test_reset_determinism_and_full_clear():
    cfg = EnvConfig(mode=HISTORY, reward_params=RP)
    env = BiddingEnv(cfg, stream(np.linspace(0, 0.9, 40)))
    first = env.reset(seed=3)
    for _ in range(17):
        env.step(0.4)
    again = env.reset(seed=3)
    np.testing.assert_array_equal(first, again)
    seq1 = [env.step(0.3)[1] for _ in range(20)]
    env.reset(seed=3)
    seq2 = [env.step(0.3)[1] for _ in range(20)]
    np.testing.assert_array_equal(np.array(seq1), np.array(seq2))


def test_empty_stream_reset_fails():
    with pytest.raises(EnvError):
        BiddingEnv(EnvConfig(), stream([])).reset()


def test_replay_step_win_with_overbid():
    env = BiddingEnv(EnvConfig(reward_params=RP), stream([0.4]))
    env.reset()
    reward, _, done, info = env.step(0.5)
    assert info["won"] and info["profit"] == pytest.approx(50.0)
    assert reward == pytest.approx(0.5 - 0.1 * 0.1, abs=1e-9)
    assert info["threshold"] == 0.4 and info["mev"] == 100.0
    assert done


def test_zero_bid_against_zero_threshold_loses():
    env = BiddingEnv(EnvConfig(reward_params=RP), stream([0.0]))
    env.reset()
    reward, _, _, info = env.step(0.0)
    assert not info["won"]
    assert reward == pytest.approx(-0.05)


def test_out_of_range_action_is_clipped(caplog):
    env = BiddingEnv(EnvConfig(reward_params=RP), stream([0.2]))
    env.reset()
    _, _, _, info = env.step(1.4)
    assert info["action"] == 1.0 and "clipping" in caplog.text
    env.reset()
    with pytest.raises(ValueError):
        env.step(float("nan"))


def test_stateless_observations_independent_of_actions():
    cfg = EnvConfig(mode=STATELESS, reward_params=RP)
    s = stream(np.random.default_rng(0).random(60))
    runs = []
    for policy in (lambda t: 0.0, lambda t: 0.9, lambda t: (t * 37 % 100) / 100):
        env = BiddingEnv(cfg, s)
        obs = [env.reset()]
        for t in range(59):
            obs.append(env.step(policy(t))[1])
        runs.append(np.array(obs))
    np.testing.assert_array_equal(runs[0], runs[1])
    np.testing.assert_array_equal(runs[0], runs[2])


@pytest.mark.parametrize("regime", [InformationRegime(), InformationRegime("delayed", 3)])
def test_history_entries_strictly_past_and_respect_delay(regime):
    cfg = EnvConfig(mode=HISTORY, regime=regime, reward_params=RP)
    env = BiddingEnv(cfg, stream(np.random.default_rng(1).random(80)))
    env.reset(seed=5)
    lag = 1 if regime.mode == "real_time" else regime.delay_auctions
    for t in range(1, 80):
        env.step(0.5)
        if env.done:
            break
        idx = env.last_history_indices
        assert all(i <= t - lag for i in idx)
        assert idx == sorted(set(idx))
        assert len(idx) == min(cfg.K, max(0, t - lag + 1))
        h = env.observation[cfg.blocks()["history"]].reshape(cfg.K, -1)
        assert h[: len(idx), 0].tolist() == [1.0] * len(idx)
        assert not h[len(idx):].any()


def test_history_window_statistics():
    cfg = EnvConfig(mode=HISTORY, W=4, reward_params=RP)
    s = stream([0.1, 0.2, 0.9, 0.3, 0.6])
    env = BiddingEnv(cfg, s)
    env.reset()
    actions = [0.5, 0.5, 0.5, 0.5]
    for a in actions:
        env.step(a)
    w = env.observation[cfg.blocks()["window"]]
    # own wins: 1, 1, 0, 1 ; top fractions 0.5, 0.5, 0.9, 0.5 ; bidders (competitors + 1) 2, 3, 4, 2
    assert w[0] == pytest.approx(0.75)
    assert w[1] == pytest.approx(np.mean([2, 3, 4, 2]) / cfg.max_bidders)
    assert w[2] == pytest.approx(np.mean([0.5, 0.5, 0.9, 0.5]))


def test_replay_non_interference():
    s = stream(np.random.default_rng(2).random(50))
    cfg = EnvConfig(mode=HISTORY, reward_params=RP)
    pairs = []
    for a in (0.1, 0.8):
        env = BiddingEnv(cfg, s)
        env.reset(seed=1)
        seq = []
        while not env.done:
            _, _, _, info = env.step(a)
            seq.append((info["mev"], info["threshold"]))
        pairs.append(seq)
    assert pairs[0] == pairs[1]


def test_simulator_source_non_interference_and_determinism():
    opps = [opp(("curve", "dodo")[: 1 + i % 2], mev=1.0 + i, block=i, oid=f"o{i}") for i in range(100)]
    src = SimulatorSource(opps, default_profiles())
    cfg = EnvConfig(mode=HISTORY, reward_params=RP)
    seqs = []
    for a in (0.05, 0.95, 0.05):
        env = BiddingEnv(cfg, src, RngStream(4, 2))
        env.reset()
        seq = []
        while not env.done:
            seq.append(env.step(a)[3]["threshold"])
        seqs.append(seq)
    assert seqs[0] == seqs[1] == seqs[2]
    assert len(set(seqs[0])) > 10


def test_simulator_env_with_deterministic_opponent():
    opps = [opp(block=i, oid=f"o{i}") for i in range(10)]
    prof = SearcherProfile.uniform("x", 1.0, 1.0, BidFractionDist(fixed=0.3))
    env = BiddingEnv(EnvConfig(reward_params=RP), SimulatorSource(opps, [prof]))
    env.reset()
    infos = [env.step(0.31)[3] for _ in range(10)]
    assert all(i["won"] and i["threshold"] == 0.3 for i in infos)


def test_route_matrix_matches_per_step_route_block():
    cfg = EnvConfig(reward_params=RP)
    s = stream(np.linspace(0, 0.5, 12))
    env = BiddingEnv(cfg, s)
    routes = env.route_matrix()
    assert routes.shape == (12, cfg.route_dim)
    obs = env.reset()
    for t in range(12):
        np.testing.assert_array_equal(obs[cfg.blocks()["route"]], routes[t])
        obs = env.step(0.5)[1]
