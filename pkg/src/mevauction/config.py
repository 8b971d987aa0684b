"""Typed INI run configuration.

Sections map one-to-one onto dataclasses below; ``[profile NAME]`` sections
declare opponent profiles.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .auction import DEFAULT_EPSILON, DEFAULT_WINDOW_MS, RewardParams
from .env import EnvConfig
from .market import BidFractionDist, InformationRegime, SearcherProfile
from .ppo import PPOConfig
from .replay import DEFAULT_PROTOCOLS, HISTORICAL, SyntheticSpec, default_profiles

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    stochastic_eval: bool = False


@dataclass
class PreprocessSection:
    small_mev_quantile: float = 0.10
    min_mev: float | None = None
    require_winner: bool = True
    split_ratio: float = 0.5
    window_ms: float = DEFAULT_WINDOW_MS


@dataclass
class EnvSection:
    mode: str = "stateless"
    H: int = 10
    K: int = 5
    W: int = 50
    disclosure: str = "real_time"
    delay_auctions: int = 0
    max_route_len: float = 6.0
    max_bidders: float = 10.0
    protocols: tuple[str, ...] = DEFAULT_PROTOCOLS


@dataclass
class RewardSection:
    epsilon: float = DEFAULT_EPSILON
    lambda_loss: float = 0.05
    alpha_overbid: float = 0.1


@dataclass
class PPOSection:
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.0
    epochs_per_update: int = 4
    minibatch_size: int = 256
    rollout_length: int = 2048
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    max_updates: int = 200
    hidden_sizes: tuple[int, ...] = (64, 64)
    eval_every: int = 10


@dataclass
class TrainSection:
    scenario: str = HISTORICAL
    train_log: str | None = None
    leader_id: str | None = None
    validation_fraction: float = 0.1
    sim_count: int = 5000
    sim_validation_count: int = 1000


@dataclass
class EvalSection:
    scenario: str = HISTORICAL
    test_log: str | None = None
    train_log: str | None = None
    leader_id: str | None = None
    stochastic_seeds: int = 5


@dataclass
class SynthSection:
    count: int = 1000
    max_route_len: int = 4
    mev_log_mean: float = 0.0
    mev_log_sigma: float = 1.0
    opps_per_block: float = 1.5
    start_block: int = 1
    window_ms: float = DEFAULT_WINDOW_MS
    protocols: tuple[str, ...] = DEFAULT_PROTOCOLS


@dataclass
class ProfileSection:
    arrival_1: float = 0.5
    arrival_2: float = 0.5
    arrival_3: float = 0.5
    latency_mean_ms: float = 100.0
    bid_a: float = 2.0
    bid_b: float = 5.0
    bid_fixed: float | None = None


SECTIONS = {
    "run": RunSection, "preprocess": PreprocessSection, "env": EnvSection, "reward": RewardSection,
    "ppo": PPOSection, "train": TrainSection, "eval": EvalSection, "synth": SynthSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    env: EnvSection = field(default_factory=EnvSection)
    reward: RewardSection = field(default_factory=RewardSection)
    ppo: PPOSection = field(default_factory=PPOSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)
    profiles: dict[str, ProfileSection] | None = None

    # -- derived objects ---------------------------------------------------

    def reward_params(self) -> RewardParams:
        return RewardParams(self.reward.epsilon, self.reward.lambda_loss, self.reward.alpha_overbid)

    def env_config(self) -> EnvConfig:
        e = self.env
        return EnvConfig(
            mode=e.mode, H=e.H, K=e.K, W=e.W,
            regime=InformationRegime(e.disclosure, e.delay_auctions),
            reward_params=self.reward_params(), protocol_vocabulary=tuple(e.protocols),
            max_route_len=e.max_route_len, max_bidders=e.max_bidders,
        )

    def ppo_config(self) -> PPOConfig:
        p = dataclasses.asdict(self.ppo)
        p["hidden_sizes"] = tuple(p["hidden_sizes"])
        return PPOConfig(**p, seed=self.run.seed, num_workers=self.run.workers)

    def searcher_profiles(self) -> tuple[SearcherProfile, ...]:
        if self.profiles is None:
            return default_profiles()
        out = []
        for name, p in self.profiles.items():
            dist = BidFractionDist(fixed=p.bid_fixed) if p.bid_fixed is not None else BidFractionDist(p.bid_a, p.bid_b)
            out.append(SearcherProfile(name, {1: p.arrival_1, 2: p.arrival_2, 3: p.arrival_3},
                                       p.latency_mean_ms, dist))
        return tuple(out)

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synth
        return SyntheticSpec(count=s.count, profiles=self.searcher_profiles(), protocols=tuple(s.protocols),
                             max_route_len=s.max_route_len, mev_log_mean=s.mev_log_mean,
                             mev_log_sigma=s.mev_log_sigma, opps_per_block=s.opps_per_block,
                             start_block=s.start_block, window_ms=s.window_ms)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {name: _section_dict(getattr(self, name)) for name in SECTIONS}
        d["profiles"] = None if self.profiles is None else {k: _section_dict(v) for k, v in self.profiles.items()}
        return d

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in _section_dict(getattr(self, name)).items() if v is not None}
        for pname, p in (self.profiles or {}).items():
            cp[f"profile {pname}"] = {k: _fmt(v) for k, v in _section_dict(p).items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _section_dict(obj) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v) for f in fields(obj)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(section: str, key: str, raw: str, annotation: str):
    raw = raw.strip()
    try:
        if raw.lower() in ("", "none") and "None" in annotation:
            return None
        if "bool" in annotation:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if annotation.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if annotation.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if annotation.startswith("int"):
            return int(raw)
        if annotation.startswith("float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _fill(section: str, cls, items) -> object:
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kwargs[key] = _coerce(section, key, raw, str(known[key].type))
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__", inline_comment_prefixes=(";",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    profiles = {}
    for name in cp.sections():
        items = cp.items(name)
        if name in SECTIONS:
            setattr(cfg, name, _fill(name, SECTIONS[name], items))
        elif name.startswith("profile "):
            pname = name[len("profile "):].strip()
            if not pname:
                raise ConfigError("profile section needs a name: [profile NAME]")
            profiles[pname] = _fill(name, ProfileSection, items)
        else:
            raise ConfigError(f"unknown section [{name}]")
    if profiles:
        cfg.profiles = profiles
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
