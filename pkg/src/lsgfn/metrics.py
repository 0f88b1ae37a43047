"""Distribution-level metrics and the exact oracles behind them."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .env import SequenceEnv, hamming

THRESHOLD = "threshold-separated"
LOCAL_OPTIMUM = "local-optimum"
DEFAULT_MODE_QUANTILE = 0.995
DIVERSITY_CAP = 512


@dataclass
class TargetOracle:
    """p*(x) = R(x) / Z over the enumerated terminal set."""

    terminals: list[str]
    log_rewards: np.ndarray

    @classmethod
    def from_env(cls, env: SequenceEnv) -> "TargetOracle":
        xs, lr = env.terminal_log_rewards()
        return cls(xs, lr)

    @property
    def rewards(self) -> np.ndarray:
        return np.exp(self.log_rewards)

    @property
    def log_z(self) -> float:
        m = self.log_rewards.max()
        return float(m + np.log(np.exp(self.log_rewards - m).sum()))

    @property
    def Z(self) -> float:
        return math.exp(self.log_z)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_rewards - self.log_z)

    @property
    def target_mean(self) -> float:
        # sum R^2 / sum R, scaled by max R for range safety
        m = self.log_rewards.max()
        r = np.exp(self.log_rewards - m)
        return float(math.exp(m) * (r * r).sum() / r.sum())

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.rewards, q))


def exact_target_mean(env: SequenceEnv) -> float:
    return TargetOracle.from_env(env).target_mean


def accuracy(sample_rewards, target_mean: float) -> float:
    r = np.asarray(sample_rewards, dtype=float)
    if r.size == 0:
        raise ValueError("accuracy needs at least one sample")
    if target_mean <= 0:
        raise ValueError("target mean must be positive")
    return 100.0 * min(float(r.mean()) / target_mean, 1.0)


def exact_terminating_distribution(policy, env: SequenceEnv) -> dict[str, float]:
    """P_F^T(x) by pushing probability mass level by level through the DAG."""
    if not env.enumerable:
        from .env import TooLargeToEnumerate

        raise TooLargeToEnumerate(
            f"environment too large to enumerate: {env.n_terminals} terminals "
            f"exceeds cap {env.enumeration_cap}"
        )
    mass = {env.initial_state: 1.0}
    for _ in range(env.length):
        states = list(mass)
        nxt: dict[str, float] = {}
        for s, p in zip(states, policy.forward_dists(states)):
            w = mass[s]
            for c, pc in zip(env.children(s), p):
                nxt[c] = nxt.get(c, 0.0) + w * pc
        mass = nxt
    return mass


def total_variation(p: dict[str, float], q: dict[str, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical_distribution(samples) -> dict[str, float]:
    c = Counter(samples)
    n = sum(c.values())
    return {k: v / n for k, v in c.items()}


@dataclass(frozen=True)
class ModeSpec:
    kind: str = LOCAL_OPTIMUM
    threshold: float = 0.0
    min_separation: int = 2
    radius: int = 1

    def __post_init__(self):
        if self.kind not in (THRESHOLD, LOCAL_OPTIMUM):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.radius < 1:
            raise ValueError("Hamming radius must be >= 1")
        if self.min_separation < 0:
            raise ValueError("min_separation must be non-negative")

    @property
    def log_threshold(self) -> float:
        return math.log(self.threshold) if self.threshold > 0 else -math.inf


def hamming_ball(x: str, radius: int, tokens) -> list[str]:
    """Every string within Hamming distance ``radius`` of ``x`` (excluding x)."""
    out = []
    for r in range(1, radius + 1):
        for pos in itertools.combinations(range(len(x)), r):
            choices = [[t for t in tokens if t != x[p]] for p in pos]
            for repl in itertools.product(*choices):
                y = list(x)
                for p, t in zip(pos, repl):
                    y[p] = t
                out.append("".join(y))
    return out


def is_local_optimum(x: str, env: SequenceEnv, radius: int) -> bool:
    lr = env.log_reward(x)
    return all(env.log_reward(y) <= lr for y in hamming_ball(x, radius, env.alphabet.tokens))


def _distinct_above(samples, env: SequenceEnv, log_thr: float) -> list[tuple[str, float]]:
    distinct = dict.fromkeys(samples)
    out = [(x, env.log_reward(x)) for x in distinct]
    return [(x, lr) for x, lr in out if lr > log_thr]


def count_modes(samples, spec: ModeSpec, env: SequenceEnv) -> int:
    return len(find_modes(samples, spec, env))


def find_modes(samples, spec: ModeSpec, env: SequenceEnv) -> list[str]:
    cands = _distinct_above(samples, env, spec.log_threshold)
    if spec.kind == LOCAL_OPTIMUM:
        return sorted(x for x, _ in cands if is_local_optimum(x, env, spec.radius))
    cands.sort(key=lambda t: (-t[1], t[0]))
    modes: list[str] = []
    for x, _ in cands:
        if all(hamming(x, m) >= spec.min_separation for m in modes):
            modes.append(x)
    return modes


def default_mode_specs(env: SequenceEnv, quantile: float = DEFAULT_MODE_QUANTILE,
                       min_separation: int = 2, radius: int = 1,
                       threshold: float | None = None) -> tuple[ModeSpec, ModeSpec]:
    """Threshold at a reward quantile of the enumerated landscape unless given."""
    if threshold is None:
        threshold = TargetOracle.from_env(env).quantile(quantile) if env.enumerable else 0.0
    return (
        ModeSpec(THRESHOLD, threshold, min_separation, radius),
        ModeSpec(LOCAL_OPTIMUM, threshold, min_separation, radius),
    )


def mean_pairwise_hamming(strings, cap: int = DIVERSITY_CAP, seed: int = 0) -> float:
    strings = list(strings)
    if len(strings) < 2:
        return 0.0
    if len(strings) > cap:
        rng = np.random.default_rng(seed)
        strings = [strings[i] for i in np.sort(rng.choice(len(strings), cap, replace=False))]
    arr = np.array([[ord(c) for c in s] for s in strings])
    n = len(arr)
    total = 0
    for i in range(n - 1):
        total += int((arr[i + 1 :] != arr[i]).sum())
    return total / (n * (n - 1) / 2)


def summary_metrics(samples, rewards, k: int = 100) -> dict[str, float]:
    """Top-k mean reward, unique fraction and mean pairwise Hamming distance of distinct samples."""
    samples = list(samples)
    r = np.asarray(rewards, dtype=float)
    if not samples or len(samples) != len(r):
        raise ValueError("need a non-empty sample list with one reward per sample")
    kk = min(k, len(r))
    top = np.partition(r, len(r) - kk)[len(r) - kk :]
    distinct = sorted(set(samples))
    return {
        "top100_mean": float(top.mean()),
        "unique_fraction": len(distinct) / len(samples),
        "diversity": mean_pairwise_hamming(distinct),
    }


class EvalAccumulator:
    """Evaluation samples accumulated across training and the metrics over them."""

    def __init__(self, env: SequenceEnv, target_mean: float | None, mode_specs=()):
        self.env = env
        self.target_mean = target_mean
        self.mode_specs = tuple(mode_specs)
        self.samples: list[str] = []
        self._logr: list[float] = []
        self._local_opt: dict[str, bool] = {}

    def add(self, samples, log_rewards) -> None:
        self.samples.extend(samples)
        self._logr.extend(float(v) for v in log_rewards)

    @property
    def rewards(self) -> np.ndarray:
        return np.exp(np.array(self._logr))

    def _count_local(self, spec: ModeSpec) -> int:
        n = 0
        for x, _ in _distinct_above(self.samples, self.env, spec.log_threshold):
            key = (x, spec.radius)
            hit = self._local_opt.get(key)
            if hit is None:
                hit = self._local_opt[key] = is_local_optimum(x, self.env, spec.radius)
            n += hit
        return n

    def metrics(self) -> dict[str, float]:
        if not self.samples:
            return {}
        r = self.rewards
        out: dict[str, float] = {}
        out["accuracy"] = accuracy(r, self.target_mean) if self.target_mean else float("nan")
        for spec in self.mode_specs:
            if spec.kind == THRESHOLD:
                out["n_modes_threshold"] = count_modes(self.samples, spec, self.env)
            else:
                out["n_modes_localopt"] = self._count_local(spec)
        out.update(summary_metrics(self.samples, r))
        return out
