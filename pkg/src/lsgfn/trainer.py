"""The sample / refine / train round loop and its monitoring protocol."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .env import (
    EnvError,
    APPEND_ONLY,
    PREPEND_APPEND,
    RewardSpec,
    SequenceEnv,
    SyntheticLandscape,
    TokenAlphabet,
    load_reward_table,
    synthetic_reward,
)
from .localsearch import DETERMINISTIC, STANDARD, STOCHASTIC, SWAPPED, FilterRule, default_k, refine_batch
from .metrics import EvalAccumulator, TargetOracle, default_mode_specs
from .nn import ACTIVATIONS, INIT_SCHEME, AdamState, NonFiniteGradient, adam_step, save_arrays
from .objectives import KINDS, NonFiniteLoss, ObjectiveConfig, batch_loss
from .policy import SSRPolicy, sample_trajectories
from .replay import ORIGIN_STEP_A, ReplayDataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    # environment
    alphabet: str = "ACGT"
    length: int = 8
    mode: str = PREPEND_APPEND
    reward_table: str = ""
    landscape_seed: int = 0
    n_modes: int = 8
    landscape_width: float = 2.0
    landscape_floor: float = 1e-3
    planted_separation: int = 0
    scale_cap: float = 1.0
    beta: float = 3.0
    enumeration_cap: int = 10**6
    # objective
    objective: str = "TB"
    subtb_lambda: float = 0.9
    # round structure
    rounds: int = 2000
    chains: int = 4
    iterations: int = 7
    k: int = -1
    epsilon: float = 0.05
    filter: str = DETERMINISTIC
    mh_orientation: str = STANDARD
    batch_size: int = 16
    train_steps: int = 1
    capacity: int = 0
    # optimisation and networks
    lr_log_z: float = 1e-2
    lr_net: float = 1e-4
    grad_clip: float = 10.0
    log_z_init: float = 5.0
    hidden: int = 128
    n_hidden: int = 2
    activation: str = "leaky_relu"
    # monitoring
    eval_every: int = 10
    eval_samples: int = 128
    mode_quantile: float = 0.995
    mode_threshold: float = -1.0
    mode_separation: int = 2
    mode_radius: int = 1
    checkpoint_every: int = 0
    dump_dataset: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def K(self) -> int:
        return default_k(self.length) if self.k < 0 else self.k

    @property
    def budget(self) -> int:
        return self.chains * (self.iterations + 1)

    def validate(self) -> None:
        errs = []

        def need(ok, name, msg):
            if not ok:
                errs.append(f"{name}: {msg}")

        need(len(self.alphabet) >= 1 and len(set(self.alphabet)) == len(self.alphabet),
             "alphabet", "must be a string of distinct single-character tokens")
        need(self.length >= 1, "length", "must be >= 1")
        need(self.mode in (PREPEND_APPEND, APPEND_ONLY), "mode", f"must be {PREPEND_APPEND!r} or {APPEND_ONLY!r}")
        need(self.objective in KINDS, "objective", f"must be one of {KINDS}")
        need(0 < self.subtb_lambda <= 1, "subtb_lambda", "must lie in (0, 1]")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.chains >= 1, "chains", "must be >= 1")
        need(self.iterations >= 0, "iterations", "must be >= 0")
        need(self.k == -1 or 0 <= self.k <= self.length, "k", "must be -1 (auto) or lie in [0, length]")
        need(0 <= self.epsilon <= 1, "epsilon", "must lie in [0, 1]")
        need(self.filter in (DETERMINISTIC, STOCHASTIC), "filter", f"must be {DETERMINISTIC!r} or {STOCHASTIC!r}")
        need(self.mh_orientation in (STANDARD, SWAPPED), "mh_orientation",
             f"must be {STANDARD!r} or {SWAPPED!r}")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.train_steps >= 1, "train_steps", "must be >= 1")
        need(self.capacity >= 0, "capacity", "must be >= 0 (0 = unbounded)")
        need(self.lr_log_z > 0 and self.lr_net > 0, "lr_log_z/lr_net", "must be positive")
        need(self.hidden >= 1 and self.n_hidden >= 1, "hidden/n_hidden", "must be >= 1")
        need(self.activation in ACTIVATIONS, "activation", f"must be one of {ACTIVATIONS}")
        need(self.scale_cap > 0, "scale_cap", "must be positive")
        need(self.beta >= 1, "beta", "must be >= 1")
        need(self.eval_every >= 0 and self.eval_samples >= 1, "eval_every/eval_samples", "must be non-negative / positive")
        need(0 < self.mode_quantile < 1, "mode_quantile", "must lie in (0, 1)")
        need(self.mode_radius >= 1, "mode_radius", "must be >= 1")
        need(self.landscape_width > 0 and self.landscape_floor >= 0, "landscape_width/landscape_floor",
             "width must be positive and floor non-negative")
        if errs:
            raise ConfigError("; ".join(errs))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def build_env(cfg: RunConfig) -> SequenceEnv:
    alphabet = TokenAlphabet(tuple(cfg.alphabet))
    if cfg.reward_table:
        table = load_reward_table(cfg.reward_table, alphabet, cfg.length)
        n_total = len(alphabet) ** cfg.length
        if len(table) != n_total:
            missing = next(x for x in map("".join, itertools.product(alphabet.tokens, repeat=cfg.length))
                           if x not in table)
            raise EnvError(f"reward table {cfg.reward_table} covers {len(table)} of {n_total} terminals "
                           f"(missing e.g. {missing!r})")
        spec = RewardSpec(table, cfg.scale_cap, cfg.beta, source=f"table:{Path(cfg.reward_table).name}")
    else:
        land = SyntheticLandscape(
            alphabet,
            cfg.length,
            seed=cfg.landscape_seed,
            n_modes=cfg.n_modes,
            width=cfg.landscape_width,
            floor=cfg.landscape_floor,
            min_separation=cfg.planted_separation or None,
        )
        spec = synthetic_reward(land, cfg.scale_cap, cfg.beta, cfg.enumeration_cap)
        spec.landscape = land  # type: ignore[attr-defined]
    return SequenceEnv(alphabet, cfg.length, spec, cfg.mode, cfg.enumeration_cap)


def build_policy(cfg: RunConfig, env: SequenceEnv, rng) -> SSRPolicy:
    obj = ObjectiveConfig(cfg.objective, cfg.subtb_lambda)
    return SSRPolicy(
        env,
        hidden=cfg.hidden,
        n_hidden=cfg.n_hidden,
        activation=cfg.activation,
        backward=obj.backward_mode,
        state_flow=obj.needs_state_flow,
        log_z_init=cfg.log_z_init,
        rng=rng,
    )


class CountingOracle:
    """Reward oracle wrapper that counts every evaluation."""

    def __init__(self, env: SequenceEnv):
        self.env = env
        self.calls = 0

    def __call__(self, x: str) -> float:
        self.calls += 1
        return self.env.log_reward(x)


CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "round",
    "loss",
    "accept_rate",
    "oracle_calls",
    "dataset_size",
    "accuracy",
    "n_modes_threshold",
    "n_modes_localopt",
    "top100_mean",
    "unique_fraction",
    "diversity",
)
METRIC_COLUMNS = CSV_COLUMNS[5:]


@dataclass
class RoundLog:
    round: int
    loss: float
    accept_rate: float | None
    oracle_calls: int
    dataset_size: int
    metrics: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)  # evaluation terminals drawn this round

    def row(self) -> list[str]:
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(v) if isinstance(v, float) else str(v)

        vals = [self.round, self.loss, self.accept_rate, self.oracle_calls, self.dataset_size]
        vals += [self.metrics.get(c) for c in METRIC_COLUMNS]
        return [fmt(v) for v in vals]


@dataclass
class RunResult:
    policy: SSRPolicy
    logs: list[RoundLog]
    summary: dict
    dataset: ReplayDataset
    evals: EvalAccumulator


def evaluate(policy: SSRPolicy, env: SequenceEnv, n_samples: int, rng, target_mean=None, mode_specs=()):
    """Pure on-policy samples (no exploration, no local search) and their metrics."""
    trajs = sample_trajectories(policy, env, n_samples, 0.0, rng, with_log_pb=False)
    xs = [t.terminal for t in trajs]
    acc = EvalAccumulator(env, target_mean, mode_specs)
    acc.add(xs, [t.log_reward for t in trajs])
    return xs, acc.metrics()


def checkpoint(path: Path, policy: SSRPolicy, opt: AdamState, cfg: RunConfig, round_index: int) -> None:
    arrays = {f"param.{k}": v for k, v in policy.state_dict().items()}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"adam.m.{i}"] = m
        arrays[f"adam.v.{i}"] = v
    meta = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "round": round_index,
        "adam_step": opt.step,
        "version": __version__,
    }
    save_arrays(path, arrays, meta)


def config_hash(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def load_policy(path, cfg: RunConfig | None = None) -> tuple[SSRPolicy, RunConfig, SequenceEnv]:
    from .nn import load_arrays

    arrays, meta = load_arrays(path)
    if cfg is None:
        cfg = RunConfig(**meta["config"])
    env = build_env(cfg)
    policy = build_policy(cfg, env, np.random.default_rng(0))
    policy.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return policy, cfg, env


def run(cfg: RunConfig, out_dir: str | Path | None = None, on_round=None) -> RunResult:
    """Train for ``cfg.rounds`` rounds; writes checkpoints when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    env = build_env(cfg)
    init_ss, train_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    policy = build_policy(cfg, env, np.random.default_rng(init_ss))
    rng = np.random.default_rng(train_ss)
    eval_rng = np.random.default_rng(eval_ss)
    params = policy.parameters()
    opt = AdamState.for_params(params, policy.learning_rates(cfg.lr_log_z, cfg.lr_net))
    objective = ObjectiveConfig(cfg.objective, cfg.subtb_lambda)
    rule = FilterRule(cfg.filter, cfg.mh_orientation)
    dataset = ReplayDataset(cfg.capacity or None)
    oracle = CountingOracle(env)

    target_mean = None
    mode_specs: tuple = ()
    if env.enumerable:
        target_mean = TargetOracle.from_env(env).target_mean
        thr = cfg.mode_threshold if cfg.mode_threshold >= 0 else None
        mode_specs = default_mode_specs(env, cfg.mode_quantile, cfg.mode_separation, cfg.mode_radius, thr)
    evals = EvalAccumulator(env, target_mean, mode_specs)

    logs: list[RoundLog] = []
    K = cfg.K
    for r in range(1, cfg.rounds + 1):
        rate = None
        with policy.frozen():
            chains = sample_trajectories(policy, env, cfg.chains, cfg.epsilon, rng, oracle, with_log_pb=False)
            for t in chains:
                dataset.insert(t, r, ORIGIN_STEP_A)
            if cfg.iterations > 0:
                res = refine_batch(policy, env, chains, cfg.iterations, K, rule, dataset, rng, oracle, r)
                rate = res.accept_rate
        losses = []
        try:
            for _ in range(cfg.train_steps):
                batch = dataset.sample_prt(cfg.batch_size, rng)
                loss, grads, _ = batch_loss(policy, batch, objective)
                adam_step(params, grads, opt, cfg.grad_clip, context=f"round {r}")
                policy.bump_version()
                losses.append(loss)
        except (NonFiniteLoss, NonFiniteGradient) as exc:
            if out is not None:
                checkpoint(out / "abort_checkpoint.npz", policy, opt, cfg, r)
                (out / "abort_diagnostics.json").write_text(
                    json.dumps({"round": r, "error": str(exc), "oracle_calls": oracle.calls}, indent=2)
                )
            raise TrainingAborted(f"round {r}: {exc}") from exc
        if oracle.calls != r * cfg.budget:
            raise AssertionError(f"budget drift: {oracle.calls} oracle calls after round {r}")
        entry = RoundLog(r, float(np.mean(losses)), rate, oracle.calls, len(dataset))
        if cfg.eval_every and r % cfg.eval_every == 0:
            ev = sample_trajectories(policy, env, cfg.eval_samples, 0.0, eval_rng, with_log_pb=False)
            evals.add([t.terminal for t in ev], [t.log_reward for t in ev])
            entry.samples = [(t.terminal, t.log_reward) for t in ev]
            entry.metrics = evals.metrics()
            log.info("round %d: loss %.4g, accuracy %s", r, entry.loss, entry.metrics.get("accuracy"))
        logs.append(entry)
        if on_round is not None:
            on_round(entry)
        if out is not None and cfg.checkpoint_every and r % cfg.checkpoint_every == 0:
            checkpoint(out / f"checkpoint_{r:06d}.npz", policy, opt, cfg, r)

    if out is not None:
        checkpoint(out / "checkpoint_final.npz", policy, opt, cfg, cfg.rounds)
    final = next((lg.metrics for lg in reversed(logs) if lg.metrics), {})
    summary = {
        "config": cfg.to_dict(),
        "metadata": run_metadata(cfg, env, policy, target_mean, mode_specs),
        "final_metrics": final,
        "oracle_calls": oracle.calls,
        "dataset_size": len(dataset),
        "accept_rate_trace": [lg.accept_rate for lg in logs],
        "final_log_z": float(policy.log_z[0]),
    }
    return RunResult(policy, logs, summary, dataset, evals)


def run_metadata(cfg: RunConfig, env: SequenceEnv, policy: SSRPolicy, target_mean, mode_specs) -> dict:
    meta = {
        "budget_per_round": cfg.budget,
        "K": cfg.K,
        "env": env.fingerprint(),
        "reward_normalisation_max_raw": env.reward_spec.max_raw,
        "init_scheme": INIT_SCHEME,
        "activation": cfg.activation,
        "n_params": sum(p.size for p in policy.parameters()),
        "target_mean": target_mean,
        "mode_specs": [dataclasses.asdict(s) for s in mode_specs],
        "version": __version__,
    }
    land = getattr(env.reward_spec, "landscape", None)
    if land is not None:
        meta["planted_modes"] = list(land.modes)
    return meta
