import csv
import json

import pytest

from conftest import DATA
from mevauction.cli import main
from mevauction.replay import parse_auction_log

FAST = """
[ppo]
rollout_length = 64
minibatch_size = 32
hidden_sizes = 8
eval_every = 1
learning_rate = 1e-3
"""


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.ini"
    p.write_text(FAST)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_is_deterministic(tmp_path):
    assert run("synth", "--count", 300, "--seed", 4, "--out-dir", tmp_path / "a") == 0
    assert run("--seed", 4, "--out-dir", tmp_path / "b", "synth", "--count", 300) == 0
    a, b = (tmp_path / d / "synthetic_log.csv" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert len({r.opp_id for r in parse_auction_log(a)}) == 300
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["command"] == "synth"
    assert (tmp_path / "a" / "config.ini").exists()


def test_synth_with_fixed_profile(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[profile rival]\narrival_1 = 1\narrival_2 = 1\narrival_3 = 1\n"
                   "latency_mean_ms = 1\nbid_fixed = 0.3\n")
    assert run("--config", cfg, "--out-dir", tmp_path, "synth", "--count", 50) == 0
    recs = parse_auction_log(tmp_path / "synthetic_log.csv")
    assert all(len(r.bids) == 1 and r.bids[0].fraction == 0.3 and r.winner_id == "rival" for r in recs)


def test_ingest_fixture_counts(tmp_path):
    assert run("--out-dir", tmp_path / "one", "ingest", DATA / "fixture_100.csv") == 0
    summary = json.loads((tmp_path / "one" / "ingest_summary.json").read_text())
    assert summary["num_input"] == 100 and summary["dropped"]["small_mev"] == 10
    assert (summary["num_kept"], summary["num_train"], summary["num_test"]) == (90, 45, 45)
    train = parse_auction_log(tmp_path / "one" / "train.csv")
    test = parse_auction_log(tmp_path / "one" / "test.csv")
    assert train[-1].block_height < test[0].block_height

    # re-ingesting the output at the recorded cutoff is a no-op
    merged = tmp_path / "merged.csv"
    merged.write_text((tmp_path / "one" / "train.csv").read_text()
                      + "".join((tmp_path / "one" / "test.csv").read_text().splitlines(True)[1:]))
    assert run("--out-dir", tmp_path / "two", "ingest", merged, "--min-mev", summary["mev_cutoff"]) == 0
    again = json.loads((tmp_path / "two" / "ingest_summary.json").read_text())
    assert again["num_kept"] == 90 and again["dropped"]["small_mev"] == 0


def test_missing_input_is_bad_input(tmp_path, capsys):
    missing = tmp_path / "no_such_log.csv"
    assert run("--out-dir", tmp_path, "ingest", missing) == 2
    assert "no_such_log.csv" in capsys.readouterr().err


def test_malformed_log_reports_line(tmp_path, capsys):
    assert run("--out-dir", tmp_path, "ingest", DATA / "bad_fraction.csv") == 2
    assert "3" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nbogus = 1\n")
    assert run("--config", cfg, "--out-dir", tmp_path, "synth") == 2


def test_eval_oracle_on_fixture(tmp_path, capsys):
    assert run("--out-dir", tmp_path, "eval", "--policy", "oracle", "--policy", "constant:1.0",
               "--test-log", DATA / "fixture_100.csv") == 0
    rows = read_csv(tmp_path / "report.csv")
    assert float(rows[0]["MPC"]) == pytest.approx(1.0, abs=1e-9)
    assert float(rows[0]["WR"]) == 1.0
    assert float(rows[1]["SumProfit"]) == 0.0
    assert "100.00%" in capsys.readouterr().out
    curve = read_csv(tmp_path / "cumulative_profit.csv")
    assert len(curve) == 100
    assert float(curve[-1]["Oracle"]) == pytest.approx(float(rows[0]["SumProfit"]))


def test_eval_needs_a_policy(tmp_path):
    assert run("--out-dir", tmp_path, "eval", "--test-log", DATA / "fixture_100.csv") == 2


@pytest.fixture
def trained(tmp_path, fast_cfg):
    out = tmp_path / "train"
    assert run("--config", fast_cfg, "--out-dir", out, "train", "--train-log", DATA / "fixture_100.csv",
               "--updates", 2) == 0
    return out


def test_train_outputs(trained):
    curve = read_csv(trained / "learning_curve.csv")
    assert len(curve) == 2 and list(curve[0]) == [
        "update_index", "mean_reward", "WR", "MPC", "policy_loss", "value_loss", "entropy", "clip_fraction",
        "approx_kl"]
    summary = json.loads((trained / "train_summary.json").read_text())
    assert summary["num_validation"] == 10 and summary["num_train"] == 90
    assert (trained / "checkpoint_final.json").exists()


def test_eval_checkpoint_is_reproducible(trained, tmp_path):
    for d in ("e1", "e2"):
        assert run("--out-dir", tmp_path / d, "eval", "--checkpoint", trained / "checkpoint.json",
                   "--test-log", DATA / "fixture_100.csv") == 0
    for name in ("report.csv", "report.json", "cumulative_profit.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    assert read_csv(tmp_path / "e1" / "report.csv")[0]["Environment"] == "Stateless"


def test_leader_eval_has_sota_row_and_stochastic_seeds(trained, tmp_path):
    out = tmp_path / "lead"
    assert run("--out-dir", out, "--stochastic-eval", "eval", "--checkpoint", trained / "checkpoint.json",
               "--test-log", DATA / "fixture_100.csv", "--scenario", "leader_replacement") == 0
    rows = read_csv(out / "report.csv")
    assert rows[0]["Environment"].endswith("(SOTA)")
    assert sum("[seed" in r["Environment"] for r in rows) == 5
    assert rows[-1]["Environment"].startswith("Stateless (mean of 5 seeds)") and rows[-1]["MPC_std"] != ""

    assert run("--out-dir", tmp_path / "rep", "report", out / "report.json") == 0
    assert "(SOTA)" in (tmp_path / "rep" / "table.txt").read_text()


def test_checkpoint_version_mismatch(trained, tmp_path, capsys):
    doc = json.loads((trained / "checkpoint.json").read_text())
    doc["version"] = 2
    bad = tmp_path / "old.json"
    bad.write_text(json.dumps(doc))
    assert run("--out-dir", tmp_path / "x", "eval", "--checkpoint", bad, "--test-log", DATA / "fixture_100.csv") == 2
    assert "version" in capsys.readouterr().err


def test_train_on_simulator(tmp_path, fast_cfg):
    assert run("--config", fast_cfg, "--out-dir", tmp_path, "train", "--scenario", "simulated",
               "--mode", "history_conditioned", "--updates", 1) == 0
    meta = json.loads((tmp_path / "checkpoint.json").read_text())["meta"]
    assert meta["env"]["mode"] == "history_conditioned"
