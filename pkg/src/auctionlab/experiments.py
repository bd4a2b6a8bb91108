"""Experiment orchestration: YAML configs, artifact trees, and manifests.

An experiment is a market template, a set of mechanisms, and a list of
seeds. Each (mechanism, seed) pair gets its own artifact directory with
the full rounds table plus derived metric tables; pooled summaries land at
the top level. Every float is written with repr, so a rerun of the same
config produces byte-identical CSVs; the manifest carries the only
timestamp and is written last.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
import yaml

from ._version import __version__
from .agents import RiskAverseAgent, RiskAverseParams, TruthfulAgent, bid_drift_metric
from .analysis import (
    cfp_tau_rollup,
    checkpoint_ratio_table,
    chernoff_empirical_check,
    chernoff_min_clicks,
    cpa_ratio_table,
    etic_violation_rate,
    payment_fluctuation,
    write_metric_summary_csv,
    write_ratio_csv,
)
from .controllers import DebtController
from .errors import ConfigError, MissingInputError
from .market import MarketConfig, generate_market
from .mechanisms import (
    MechanismConfig,
    SimulationResult,
    run_auction,
    write_rounds_csv,
    write_summary_csv,
)
from .ppo import RLConfig, RLPaymentController, load_checkpoint

AGENT_KINDS = ("risk_averse", "truthful")

FLUCTUATION_CSV_HEADER = "bidder,variance,range"
ETIC_CSV_HEADER = "table,epsilon,rate"
DRIFT_CSV_HEADER = "bidder,drift,withdrawn"
CHERNOFF_CSV_HEADER = "epsilon,cvr,min_clicks,empirical_rate"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one artifact tree."""

    market: MarketConfig
    mechanisms: tuple[MechanismConfig, ...]
    seeds: tuple[int, ...]
    agent: str = "risk_averse"
    agent_params: RiskAverseParams = field(default_factory=RiskAverseParams)
    epsilon: float = 0.1
    tau: int | None = None
    chernoff: tuple[float, float] | None = None
    rl: RLConfig = field(default_factory=RLConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.mechanisms:
            raise ConfigError("mechanisms must be a nonempty list")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        labels = [m.label for m in self.mechanisms]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate mechanism labels in {labels}")
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {self.agent!r}, expected one of {AGENT_KINDS}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.tau is not None and self.tau < 1:
            raise ConfigError(f"tau must be at least 1, got {self.tau}")
        if self.chernoff is not None:
            if len(self.chernoff) != 2:
                raise ConfigError(f"chernoff must be (epsilon, cvr), got {self.chernoff}")
            object.__setattr__(self, "chernoff", (float(self.chernoff[0]), float(self.chernoff[1])))


_TOP_KEYS = ("market", "mechanisms", "seeds", "agent", "agent_params", "epsilon", "tau", "chernoff", "rl")
_MARKET_KEYS = (
    "num_bidders", "num_rounds", "num_slots", "stage_plan",
    "ctr_range", "cvr_range", "value_range", "tcpa_range", "seed",
)
_MECH_KEYS = ("kind", "ranking", "controller")
_AGENT_PARAM_KEYS = ("epsilon", "step", "patience")
_RL_KEYS = (
    "gamma", "lam", "clip", "zeta", "xi", "alphas", "lr", "epochs",
    "minibatch", "updates", "hidden", "sigma_floor", "adv_norm",
)
_CHERNOFF_KEYS = ("epsilon", "cvr")
_PLAN_KEYS = ("stages", "rounds_per_stage")


def _check_keys(section: dict, allowed: tuple[str, ...], where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where} (allowed: {', '.join(allowed)})")


def _as_mapping(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(obj).__name__}")
    return obj


def _parse_market(section: dict) -> MarketConfig:
    _check_keys(section, _MARKET_KEYS, "market")
    kwargs = dict(section)
    plan = kwargs.get("stage_plan")
    if plan is None:
        raise ConfigError("market.stage_plan is required")
    if isinstance(plan, dict):
        _check_keys(plan, _PLAN_KEYS, "market.stage_plan")
        if "stages" not in plan or "rounds_per_stage" not in plan:
            raise ConfigError("market.stage_plan mapping needs both stages and rounds_per_stage")
        kwargs["stage_plan"] = (int(plan["rounds_per_stage"]),) * int(plan["stages"])
    else:
        kwargs["stage_plan"] = tuple(int(n) for n in plan)
    kwargs.setdefault("num_rounds", sum(kwargs["stage_plan"]))
    for key in ("ctr_range", "cvr_range", "value_range", "tcpa_range"):
        if key in kwargs:
            rng = kwargs[key]
            if not isinstance(rng, (list, tuple)) or len(rng) != 2:
                raise ConfigError(f"market.{key} must be a two-element list, got {rng!r}")
            kwargs[key] = (float(rng[0]), float(rng[1]))
    return MarketConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    """Parse a YAML experiment config, naming any offending key on failure."""
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    data = _as_mapping(data, "config")
    _check_keys(data, _TOP_KEYS, "config")
    if "market" not in data:
        raise ConfigError("config needs a market section")
    if "mechanisms" not in data or "seeds" not in data:
        raise ConfigError("config needs mechanisms and seeds")

    market = _parse_market(_as_mapping(data["market"], "market"))

    mechanisms = []
    for i, entry in enumerate(data["mechanisms"]):
        entry = _as_mapping(entry, f"mechanisms[{i}]")
        _check_keys(entry, _MECH_KEYS, f"mechanisms[{i}]")
        if "kind" not in entry:
            raise ConfigError(f"mechanisms[{i}] needs a kind")
        mechanisms.append(MechanismConfig(**entry))

    kwargs: dict = {
        "market": market,
        "mechanisms": tuple(mechanisms),
        "seeds": tuple(int(s) for s in data["seeds"]),
    }
    if "agent" in data:
        kwargs["agent"] = data["agent"]
    if "agent_params" in data:
        section = _as_mapping(data["agent_params"], "agent_params")
        _check_keys(section, _AGENT_PARAM_KEYS, "agent_params")
        kwargs["agent_params"] = RiskAverseParams(**section)
    if "epsilon" in data:
        kwargs["epsilon"] = float(data["epsilon"])
    if "tau" in data and data["tau"] is not None:
        kwargs["tau"] = int(data["tau"])
    if "chernoff" in data and data["chernoff"] is not None:
        section = _as_mapping(data["chernoff"], "chernoff")
        _check_keys(section, _CHERNOFF_KEYS, "chernoff")
        if "epsilon" not in section or "cvr" not in section:
            raise ConfigError("chernoff needs both epsilon and cvr")
        kwargs["chernoff"] = (float(section["epsilon"]), float(section["cvr"]))
    if "rl" in data:
        section = _as_mapping(data["rl"], "rl")
        _check_keys(section, _RL_KEYS, "rl")
        rl_kwargs = dict(section)
        if "alphas" in rl_kwargs:
            rl_kwargs["alphas"] = tuple(float(a) for a in rl_kwargs["alphas"])
        if "hidden" in rl_kwargs:
            rl_kwargs["hidden"] = tuple(int(h) for h in rl_kwargs["hidden"])
        kwargs["rl"] = RLConfig(**rl_kwargs)
    return ExperimentConfig(**kwargs)


def desk_default_config() -> ExperimentConfig:
    """Mid-size benchmark: 50 bidders, 5 slots, 31 stages of 1800 rounds."""
    market = MarketConfig(
        num_bidders=50,
        num_rounds=55800,
        num_slots=5,
        stage_plan=(1800,) * 31,
        ctr_range=(0.3, 0.9),
        cvr_range=(0.05, 0.15),
        value_range=(1.0, 5.0),
        tcpa_range=(1.0, 10.0),
        seed=0,
    )
    mechanisms = (
        MechanismConfig("CFP"),
        MechanismConfig("CPA_OFFLINE"),
        MechanismConfig("PACING_OFFLINE"),
        MechanismConfig("DFP", controller="debt"),
        MechanismConfig("DFP", controller="oracle"),
    )
    return ExperimentConfig(
        market=market,
        mechanisms=mechanisms,
        seeds=(0, 1, 2, 3, 4),
        agent="risk_averse",
        epsilon=0.1,
        tau=4,
        chernoff=(0.1, 0.05),
    )


def sparse_config() -> ExperimentConfig:
    """Low click-volume stress case: roughly 100-150 clicks per stage per bidder."""
    market = MarketConfig(
        num_bidders=10,
        num_rounds=18600,
        num_slots=4,
        stage_plan=(600,) * 31,
        ctr_range=(0.4, 0.8),
        cvr_range=(0.05, 0.15),
        value_range=(1.0, 5.0),
        tcpa_range=(2.0, 6.0),
        seed=0,
    )
    return ExperimentConfig(
        market=market,
        mechanisms=(MechanismConfig("DFP", controller="debt"),),
        seeds=(0, 1, 2, 3, 4),
        agent="truthful",
        epsilon=0.1,
    )


def toy_training_config() -> ExperimentConfig:
    """Single-bidder market small enough to train the payment policy quickly.

    The conversion rate is pinned so per-click payment scale is not
    dominated by cvr noise when comparing payers.
    """
    market = MarketConfig(
        num_bidders=1,
        num_rounds=6200,
        num_slots=1,
        stage_plan=(200,) * 31,
        ctr_range=(0.45, 0.55),
        cvr_range=(0.1, 0.1),
        value_range=(1.0, 5.0),
        tcpa_range=(2.0, 2.0),
        seed=0,
    )
    return ExperimentConfig(
        market=market,
        mechanisms=(MechanismConfig("DFP", controller="debt"),),
        seeds=(0, 1, 2, 3, 4),
        agent="truthful",
        epsilon=0.1,
    )


def make_agents(config: ExperimentConfig, num_bidders: int) -> list:
    if config.agent == "truthful":
        return [TruthfulAgent() for _ in range(num_bidders)]
    return [RiskAverseAgent(config.agent_params) for _ in range(num_bidders)]


def _make_controller(mech: MechanismConfig, market, config: ExperimentConfig, rl_checkpoint: str | None):
    if mech.kind != "DFP" or mech.controller == "oracle":
        return None
    if mech.controller == "debt":
        return DebtController(market.tcpa)
    if mech.controller == "rl":
        if rl_checkpoint is None:
            raise ConfigError("mechanism DFP:rl needs an rl_checkpoint path")
        policy, critic = load_checkpoint(rl_checkpoint)
        return RLPaymentController(
            policy, critic, market.tcpa,
            zeta=config.rl.zeta, xi=config.rl.xi,
            deterministic=True, collect=False,
        )
    raise ConfigError(f"unknown DFP controller {mech.controller!r}")


def _write_fluctuation_csv(path: str, table) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FLUCTUATION_CSV_HEADER + "\n")
        for b, var, rng in zip(table.bidder, table.variance, table.value_range):
            fh.write(f"{int(b)},{repr(float(var))},{repr(float(rng))}\n")


def _write_etic_csv(path: str, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ETIC_CSV_HEADER + "\n")
        for name, eps, rate in rows:
            fh.write(f"{name},{repr(float(eps))},{repr(float(rate))}\n")


def _write_drift_csv(path: str, drift: np.ndarray, withdrawn: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DRIFT_CSV_HEADER + "\n")
        for m in range(drift.size):
            fh.write(f"{m},{repr(float(drift[m]))},{int(withdrawn[m])}\n")


def _summary_stats(values: np.ndarray) -> tuple[float, float, float]:
    if values.size == 0:
        return float("nan"), float("nan"), float("nan")
    return (
        float(np.quantile(values, 0.75)),
        float(np.quantile(values, 0.25)),
        float(np.mean(values)),
    )


def run_experiment(config: ExperimentConfig, out_dir: str, rl_checkpoint: str | None = None) -> dict:
    """Run every (mechanism, seed) pair and write the artifact tree.

    Layout: <out>/<label>/seed_<s>/{rounds,summary,ratios,checkpoint_ratios,
    fluctuation,etic,drift}.csv plus top-level summary.csv, optional
    chernoff.csv and cfp_tau.csv, and manifest.json (written last).

    Returns a dict with the run directories and pooled summary rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    run_dirs: list[str] = []
    summary_rows: list[tuple[str, str, float, float, float]] = []
    tau_rows: list[tuple[str, str, float, float, float]] = []

    for mech in config.mechanisms:
        label = mech.label
        pooled_stage: list[np.ndarray] = []
        pooled_checkpoint: list[np.ndarray] = []
        pooled_variance: list[np.ndarray] = []
        pooled_tau: list[np.ndarray] = []
        etic_rates: list[float] = []
        drift_means: list[float] = []

        for seed in config.seeds:
            market = generate_market(replace(config.market, seed=seed))
            agents = make_agents(config, market.num_bidders)
            controller = _make_controller(mech, market, config, rl_checkpoint)
            result = run_auction(market, mech, agents, controller=controller)

            run_dir = os.path.join(out_dir, label.replace(":", "_"), f"seed_{seed}")
            os.makedirs(run_dir, exist_ok=True)
            write_rounds_csv(result, os.path.join(run_dir, "rounds.csv"))
            write_summary_csv(result, os.path.join(run_dir, "summary.csv"))

            stage_table = cpa_ratio_table(result)
            ckpt_table = checkpoint_ratio_table(result)
            write_ratio_csv(stage_table, os.path.join(run_dir, "ratios.csv"))
            write_ratio_csv(ckpt_table, os.path.join(run_dir, "checkpoint_ratios.csv"))

            fluct = payment_fluctuation(result)
            _write_fluctuation_csv(os.path.join(run_dir, "fluctuation.csv"), fluct)

            etic_stage = etic_violation_rate(stage_table.ratio, config.epsilon)
            etic_ckpt = etic_violation_rate(ckpt_table.ratio, config.epsilon)
            _write_etic_csv(
                os.path.join(run_dir, "etic.csv"),
                [("per_stage", config.epsilon, etic_stage), ("checkpoint", config.epsilon, etic_ckpt)],
            )

            drift = bid_drift_metric(result)
            _write_drift_csv(os.path.join(run_dir, "drift.csv"), drift.drift, result.withdrawn)

            pooled_stage.append(stage_table.ratio)
            pooled_checkpoint.append(ckpt_table.ratio)
            pooled_variance.append(fluct.variance)
            etic_rates.append(etic_ckpt)
            drift_means.append(drift.mean_drift)
            if config.tau is not None and mech.kind == "CFP":
                rollup = cfp_tau_rollup(
                    result.stage_conversions, result.stage_payments, result.tcpa, config.tau
                )
                pooled_tau.append(rollup.ratio)
            run_dirs.append(run_dir)

        summary_rows.append((label, "stage_ratio", *_summary_stats(np.concatenate(pooled_stage))))
        summary_rows.append((label, "checkpoint_ratio", *_summary_stats(np.concatenate(pooled_checkpoint))))
        summary_rows.append((label, "fluctuation_var", *_summary_stats(np.concatenate(pooled_variance))))
        summary_rows.append((label, "etic_rate", *_summary_stats(np.array(etic_rates))))
        summary_rows.append((label, "bid_drift", *_summary_stats(np.array(drift_means))))
        if pooled_tau:
            tau_rows.append((label, f"tau_{config.tau}_ratio", *_summary_stats(np.concatenate(pooled_tau))))

    write_metric_summary_csv(summary_rows, os.path.join(out_dir, "summary.csv"))
    if tau_rows:
        write_metric_summary_csv(tau_rows, os.path.join(out_dir, "cfp_tau.csv"))
    if config.chernoff is not None:
        eps, cvr = config.chernoff
        min_clicks = chernoff_min_clicks(eps, cvr)
        ctr_mid = 0.5 * (config.market.ctr_range[0] + config.market.ctr_range[1])
        rate = chernoff_empirical_check(ctr_mid, cvr, eps, trials=2000, seed=config.market.seed)
        with open(os.path.join(out_dir, "chernoff.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CHERNOFF_CSV_HEADER + "\n")
            fh.write(f"{repr(float(eps))},{repr(float(cvr))},{min_clicks},{repr(float(rate))}\n")

    manifest = {
        "config": asdict(config),
        "config_sha256": config_digest(config),
        "mechanisms": [m.label for m in config.mechanisms],
        "seeds": list(config.seeds),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "auctionlab": __version__,
        },
        "created": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return {"out_dir": out_dir, "run_dirs": run_dirs, "summary_rows": summary_rows}


def config_digest(config: ExperimentConfig) -> str:
    """Stable content hash of an experiment config."""
    blob = json.dumps(asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def checkpoint_abs_error(result: SimulationResult) -> float:
    """Mean |ratio - 1| over the cumulative checkpoint table."""
    table = checkpoint_ratio_table(result)
    if table.num_entries == 0:
        return float("nan")
    return float(np.mean(np.abs(table.ratio - 1.0)))


def payment_smoothness(result: SimulationResult) -> float:
    """Mean relative step between consecutive positive per-click payments.

    Matches the smoothness reward magnitude: |p_i - p_{i-1}| / p_{i-1}
    averaged over all consecutive positive-payment click pairs, pooled
    across bidders. nan when no bidder has two positive payments.
    """
    clicked = result.rounds.click == 1
    steps: list[np.ndarray] = []
    for m in range(result.num_bidders):
        pays = result.rounds.payment[clicked & (result.rounds.bidder == m)]
        pays = pays[pays > 0.0]
        if pays.size >= 2:
            steps.append(np.abs(np.diff(pays)) / pays[:-1])
    if not steps:
        return float("nan")
    return float(np.mean(np.concatenate(steps)))


def _evaluate_runs(
    market_config: MarketConfig,
    seeds: tuple[int, ...],
    make_run,
) -> dict[str, float]:
    errs = []
    smooth = []
    for seed in seeds:
        market = generate_market(replace(market_config, seed=seed))
        mech, controller = make_run(market)
        agents = [TruthfulAgent() for _ in range(market.num_bidders)]
        result = run_auction(market, mech, agents, controller=controller)
        errs.append(checkpoint_abs_error(result))
        smooth.append(payment_smoothness(result))
    smooth_arr = np.array(smooth)
    smooth_arr = smooth_arr[~np.isnan(smooth_arr)]
    return {
        "ratio_err": float(np.mean(errs)),
        "smoothness": float(smooth_arr.mean()) if smooth_arr.size else float("nan"),
    }


def evaluate_debt_controller(market_config: MarketConfig, seeds: tuple[int, ...]) -> dict[str, float]:
    """Checkpoint accuracy and payment smoothness of the debt payer."""
    def make_run(market):
        return MechanismConfig("DFP", controller="debt"), DebtController(market.tcpa)
    return _evaluate_runs(market_config, seeds, make_run)


def evaluate_rl_controller(
    market_config: MarketConfig,
    seeds: tuple[int, ...],
    policy,
    critic,
    rl: RLConfig,
) -> dict[str, float]:
    """Same metrics for the learned payer, acting deterministically."""
    def make_run(market):
        controller = RLPaymentController(
            policy, critic, market.tcpa, zeta=rl.zeta, xi=rl.xi,
            deterministic=True, collect=False,
        )
        return MechanismConfig("DFP", controller="rl"), controller
    return _evaluate_runs(market_config, seeds, make_run)
