"""Command-line entry point: ``mevauction {synth,ingest,train,eval,report}``.

Exit codes: 0 success, 1 internal failure, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .config import CONFIG_VERSION, ConfigError, RunConfig, load_config
from .env import HISTORY, STATELESS, BiddingEnv, EnvConfig, SimulatorSource
from .market import InformationRegime, RngStream
from .nn import load_checkpoint, save_checkpoint
from .ppo import CURVE_COLUMNS, ActorCritic, ConstantPolicy, OraclePolicy, evaluate, policy_bids, summarize, train
from .replay import (
    HISTORICAL,
    LEADER,
    LogParseError,
    PreprocessReport,
    ScenarioStream,
    build_historical_participation,
    build_leader_replacement,
    chronological_split,
    generate_synthetic_log,
    identify_leader,
    parse_auction_log,
    preprocess,
    route_frequency_table,
    scenario_from_simulation,
    synthetic_opportunities,
    write_auction_log,
)
from .auction import EvalTally, RewardParams, tally_bids

log = logging.getLogger("mevauction")

SIMULATED = "simulated"
ENV_LABELS = {STATELESS: "Stateless", HISTORY: "History-Conditioned"}
SETTING_LABELS = {HISTORICAL: "Historical Participation", LEADER: "Market Leader Replacement",
                  SIMULATED: "Simulated"}
REPORT_COLUMNS = ("Setting", "Environment", "WR", "MPC", "SumProfit", "UB")


class BadInput(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return "" if v is None else v


def write_manifest(out_dir: Path, command: str, argv, cfg: RunConfig) -> None:
    import numba
    import scipy

    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.run.seed,
        "config_version": CONFIG_VERSION,
        "config": cfg.to_dict(),
        "versions": {
            "mevauction": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version(),
        },
        "numba_kernels": _accel.USE_NUMBA,
    }
    _write(out_dir / "manifest.json", _json(manifest))
    _write(out_dir / "config.ini", cfg.to_ini())


def _load_log(path) -> list:
    if path is None:
        raise BadInput("no auction log given")
    return parse_auction_log(path)


def env_config_to_meta(ec: EnvConfig) -> dict:
    return {
        "mode": ec.mode, "H": ec.H, "K": ec.K, "W": ec.W,
        "disclosure": ec.regime.mode, "delay_auctions": ec.regime.delay_auctions,
        "epsilon": ec.reward_params.epsilon, "lambda_loss": ec.reward_params.lambda_loss,
        "alpha_overbid": ec.reward_params.alpha_overbid,
        "protocols": list(ec.protocol_vocabulary), "max_route_len": ec.max_route_len,
        "max_bidders": ec.max_bidders,
    }


def env_config_from_meta(m: dict) -> EnvConfig:
    return EnvConfig(
        mode=m["mode"], H=m["H"], K=m["K"], W=m["W"],
        regime=InformationRegime(m["disclosure"], m["delay_auctions"]),
        reward_params=RewardParams(m["epsilon"], m["lambda_loss"], m["alpha_overbid"]),
        protocol_vocabulary=tuple(m["protocols"]), max_route_len=m["max_route_len"], max_bidders=m["max_bidders"],
    )


def build_stream(scenario: str, records, window_ms: float, frequency, leader_id=None) -> ScenarioStream:
    if scenario == HISTORICAL:
        return build_historical_participation(records, window_ms, frequency)
    if scenario == LEADER:
        if leader_id is None:
            raise BadInput("leader_replacement needs a leader id")
        return build_leader_replacement(records, leader_id, window_ms, frequency)
    raise BadInput(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    if args.count is not None:
        cfg.synth.count = args.count
    spec = cfg.synthetic_spec()
    records = generate_synthetic_log(spec, RngStream(cfg.run.seed, 0))
    write_auction_log(records, out / "synthetic_log.csv")
    won = sum(r.winner_id is not None for r in records)
    print(f"wrote {len(records)} auctions ({won} with a winner) to {out / 'synthetic_log.csv'}")
    return 0


def cmd_ingest(args, cfg: RunConfig, out: Path) -> int:
    records = _load_log(args.log)
    p = cfg.preprocess
    rep = PreprocessReport()
    min_mev = args.min_mev if args.min_mev is not None else p.min_mev
    kept = preprocess(records, p.small_mev_quantile, p.require_winner, min_mev, rep)
    train_r, test_r = chronological_split(kept, p.split_ratio) if kept else ([], [])
    write_auction_log(train_r, out / "train.csv")
    write_auction_log(test_r, out / "test.csv")

    def block_range(rs):
        return [rs[0].block_height, rs[-1].block_height] if rs else None

    summary = {
        "input": str(args.log), "num_input": rep.num_input, "mev_cutoff": rep.mev_cutoff if math.isfinite(rep.mev_cutoff) else None,
        "dropped": {"small_mev": rep.dropped_small_mev, "negative_mev": rep.dropped_negative_mev,
                    "no_winner": rep.dropped_no_winner},
        "num_kept": rep.num_output, "num_train": len(train_r), "num_test": len(test_r),
        "train_blocks": block_range(train_r), "test_blocks": block_range(test_r),
    }
    _write(out / "ingest_summary.json", _json(summary))
    print(f"kept {rep.num_output}/{rep.num_input} auctions; train {len(train_r)}, test {len(test_r)}")
    return 0


def _train_sources(cfg: RunConfig, env_cfg: EnvConfig):
    """Return ``(env_factory, validation_stream, description)`` for the configured scenario."""
    t = cfg.train
    seed = cfg.run.seed
    window = cfg.preprocess.window_ms
    workers = cfg.run.workers
    if t.scenario == SIMULATED:
        spec = cfg.synthetic_spec()
        profiles = spec.profiles
        opps = synthetic_opportunities(spec, RngStream(seed, 0).generator(20), t.sim_count)
        val_opps = synthetic_opportunities(spec, RngStream(seed, 0).generator(21), t.sim_validation_count)
        validation = scenario_from_simulation(val_opps, profiles, window, RngStream(seed, 0).generator(22))
        source = SimulatorSource(opps, profiles, window)

        def factory(w):
            return BiddingEnv(env_cfg, source, RngStream(seed, 100 + w))

        return factory, validation, {"scenario": SIMULATED, "num_opportunities": len(opps)}

    records = _load_log(t.train_log)
    if not records:
        raise BadInput(f"{t.train_log}: no auctions to train on")
    freq = route_frequency_table(records)
    leader = None
    if t.scenario == LEADER:
        leader = t.leader_id or identify_leader(records)
    n_val = int(round(t.validation_fraction * len(records)))
    fit_r, val_r = (records[:-n_val], records[-n_val:]) if 0 < n_val < len(records) else (records, [])
    stream = build_stream(t.scenario, fit_r, window, freq, leader)
    validation = build_stream(t.scenario, val_r, window, freq, leader) if val_r else None
    if validation is not None and len(validation) == 0:
        validation = None
    if len(stream) < workers:
        raise BadInput("training stream shorter than the number of workers")
    bounds = np.linspace(0, len(stream), workers + 1).astype(int)

    def factory(w):
        part = ScenarioStream(stream.name, stream.records[bounds[w]:bounds[w + 1]], stream.leader_id)
        return BiddingEnv(env_cfg, part, RngStream(seed, 100 + w))

    return factory, validation, {"scenario": t.scenario, "leader_id": leader, "num_train": len(stream),
                                 "num_validation": 0 if validation is None else len(validation)}


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    if args.train_log is not None:
        cfg.train.train_log = args.train_log
    if args.scenario is not None:
        cfg.train.scenario = args.scenario
    if args.mode is not None:
        cfg.env.mode = args.mode
    if args.updates is not None:
        cfg.ppo.max_updates = args.updates
    env_cfg = cfg.env_config()
    ppo_cfg = cfg.ppo_config()
    factory, validation, desc = _train_sources(cfg, env_cfg)

    def progress(row):
        if row["update_index"] % 10 == 0 or row["update_index"] == ppo_cfg.max_updates:
            log.info("update %d: reward %.4f WR %.3f MPC %.3f", row["update_index"], row["mean_reward"],
                     row["WR"], row["MPC"])

    result = train(ppo_cfg, factory, validation, progress)
    meta = {"config_version": CONFIG_VERSION, "env": env_config_to_meta(env_cfg), "train": desc,
            "seed": cfg.run.seed, "best_validation_mpc": None if math.isnan(result.best_validation_mpc)
            else result.best_validation_mpc}
    save_checkpoint(out / "checkpoint.json", result.best_policy.net, None, meta)
    save_checkpoint(out / "checkpoint_final.json", result.policy.net, result.adam, meta)
    _write(out / "learning_curve.csv", _csv(result.curve, CURVE_COLUMNS))
    _write(out / "train_summary.json", _json({**desc, "validation": result.validation,
                                              "best_validation_mpc": meta["best_validation_mpc"]}))
    last = result.curve[-1]
    print(f"trained {ppo_cfg.max_updates} updates; last rollout WR {last['WR']:.4f} MPC {last['MPC']:.4f}")
    return 0


def _load_policy(path: str):
    try:
        net, _, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise BadInput(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise BadInput(f"{path}: {exc}") from None
    if meta.get("config_version") != CONFIG_VERSION:
        raise BadInput(f"{path}: checkpoint config version {meta.get('config_version')} != {CONFIG_VERSION}")
    env_cfg = env_config_from_meta(meta["env"])
    if net.layer_sizes[0] != env_cfg.obs_dim:
        raise BadInput(f"{path}: network input {net.layer_sizes[0]} does not match observation size {env_cfg.obs_dim}")
    return ActorCritic(net), env_cfg


def leader_baseline(stream: ScenarioStream, epsilon: float) -> EvalTally:
    """Tally of the removed leader's own recorded bids in its auctions."""
    fractions = np.array([r.removed_bids[0].fraction for r in stream.records])
    wins = np.array([r.removed_won for r in stream.records], dtype=np.int64)
    values = stream.mev_values
    profits = np.where(wins == 1, (1.0 - fractions) * values, 0.0)
    best = np.maximum((1.0 - (stream.thresholds + epsilon)) * values, 0.0)
    return EvalTally(wins, profits, best, fractions)


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    e = cfg.eval
    scenario = args.scenario or e.scenario
    test_log = args.test_log or e.test_log
    train_log = args.train_log or e.train_log
    stochastic = args.stochastic_eval or cfg.run.stochastic_eval
    test_r = _load_log(test_log)
    ref_r = _load_log(train_log) if train_log else test_r
    freq = route_frequency_table(ref_r)
    window = cfg.preprocess.window_ms
    leader = None
    if scenario == LEADER:
        leader = args.leader_id or e.leader_id or identify_leader(ref_r)
    stream = build_stream(scenario, test_r, window, freq, leader)
    if len(stream) == 0:
        raise BadInput("evaluation stream is empty")
    setting = SETTING_LABELS[scenario]
    eps = cfg.reward.epsilon

    rows, curves = [], {}

    def add(label, tally, extra=None):
        res = summarize(tally)
        rows.append({"Setting": setting, "Environment": label, **res.row(), **(extra or {})})
        curves[label] = np.cumsum(tally.profits)

    if scenario == LEADER:
        add(f"{leader} (SOTA)", leader_baseline(stream, eps))

    policies = []
    for spec in args.policy or []:
        if spec == "oracle":
            policies.append(("Oracle", OraclePolicy(eps), cfg.env_config()))
        elif spec.startswith("constant:"):
            policies.append((f"Constant {spec.split(':', 1)[1]}", ConstantPolicy(float(spec.split(":", 1)[1])),
                             cfg.env_config()))
        else:
            raise BadInput(f"unknown baseline policy {spec!r}")
    for path in args.checkpoint or []:
        policy, env_cfg = _load_policy(path)
        policies.append((ENV_LABELS[env_cfg.mode], policy, env_cfg))
    if not policies:
        raise BadInput("nothing to evaluate: pass --checkpoint and/or --policy")

    for label, policy, env_cfg in policies:
        if stochastic and isinstance(policy, ActorCritic):
            per_seed = []
            for s in range(e.stochastic_seeds):
                seed = cfg.run.seed + s
                fr = policy_bids(policy, stream, env_cfg, stochastic=True, seed=seed)
                tally = tally_bids(fr, stream.thresholds, stream.mev_values, eps)
                add(f"{label} [seed {seed}]", tally)
                per_seed.append(rows[-1])
            agg = {k: np.array([r[k] for r in per_seed]) for k in ("WR", "MPC", "SumProfit", "UB")}
            std = {f"{k}_std": float(v.std(ddof=1)) if len(v) > 1 else 0.0 for k, v in agg.items()}
            rows.append({"Setting": setting, "Environment": f"{label} (mean of {len(per_seed)} seeds)",
                         **{k: float(v.mean()) for k, v in agg.items()}, **std})
        else:
            fr = policy_bids(policy, stream, env_cfg)
            add(label, tally_bids(fr, stream.thresholds, stream.mev_values, eps))

    std_cols = ("WR_std", "MPC_std", "SumProfit_std", "UB_std") if stochastic else ()
    _write(out / "report.csv", _csv(rows, REPORT_COLUMNS + std_cols))
    _write(out / "report.json", _json({"scenario": scenario, "leader_id": leader, "num_auctions": len(stream),
                                       "rows": [{k: _cell(v) if isinstance(v, float) and math.isnan(v) else v
                                                 for k, v in r.items()} for r in rows]}))
    labels = list(curves)
    detail = []
    for i, rec in enumerate(stream.records):
        d = {"auction_index": i, "opp_id": rec.opportunity.id, "block_height": rec.opportunity.block_height,
             "mev_value": rec.opportunity.mev_value, "threshold": rec.threshold}
        d.update({lab: float(curves[lab][i]) for lab in labels})
        detail.append(d)
    _write(out / "cumulative_profit.csv",
           _csv(detail, ("auction_index", "opp_id", "block_height", "mev_value", "threshold", *labels)))
    print(format_table(rows))
    return 0


def format_table(rows) -> str:
    lines = [f"{'Setting':<28} {'Environment':<36} {'WR':>8} {'MPC':>8} {'SumProfit':>14} {'UB':>14}"]
    for r in rows:
        wr, mpc = r["WR"], r["MPC"]
        mpc_s = "n/a" if isinstance(mpc, str) or mpc is None or (isinstance(mpc, float) and math.isnan(mpc)) \
            else f"{100 * mpc:.2f}%"
        lines.append(f"{r['Setting']:<28} {r['Environment']:<36} {100 * wr:>7.2f}% {mpc_s:>8} "
                     f"{r['SumProfit']:>14,.2f} {r['UB']:>14,.2f}")
    return "\n".join(lines)


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    rows = []
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise BadInput(f"report not found: {p}")
        try:
            rows.extend(json.loads(p.read_text(encoding="utf-8"))["rows"])
        except (ValueError, KeyError) as exc:
            raise BadInput(f"{p}: not an eval report ({exc})") from None
    table = format_table(rows)
    _write(out / "table.txt", table + "\n")
    _write(out / "table.csv", _csv(rows, REPORT_COLUMNS))
    print(table)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="INI run configuration")
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides [run] seed)")
    p.add_argument("--out-dir", default=d, help="output directory (overrides [run] out_dir)")
    p.add_argument("--stochastic-eval", action="store_true", default=d if suppress else False,
                   help="evaluate sampled actions over several seeds")
    p.add_argument("--workers", type=int, default=d, help="parallel rollout workers")
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mevauction", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic auction log")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="preprocess and split an auction log")
    p.add_argument("log")
    p.add_argument("--min-mev", type=float, help="absolute small-MEV cutoff instead of the quantile")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a PPO bidding policy")
    p.add_argument("--train-log")
    p.add_argument("--scenario", choices=(HISTORICAL, LEADER, SIMULATED))
    p.add_argument("--mode", choices=(STATELESS, HISTORY))
    p.add_argument("--updates", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="counterfactual evaluation on a test log")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--policy", action="append", help="baseline: 'oracle' or 'constant:<fraction>'")
    p.add_argument("--test-log")
    p.add_argument("--train-log", help="reference log for route frequencies and leader identification")
    p.add_argument("--scenario", choices=(HISTORICAL, LEADER))
    p.add_argument("--leader-id")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into one table")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out_dir is not None:
            cfg.run.out_dir = args.out_dir
        if args.workers is not None:
            cfg.run.workers = args.workers
        if args.stochastic_eval:
            cfg.run.stochastic_eval = True
        out = Path(cfg.run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        code = args.func(args, cfg, out)
        write_manifest(out, args.command, argv, cfg)
        return code
    except (BadInput, ConfigError, LogParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 1
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
