"""Sequence-construction MDPs and their terminal rewards.

States are plain strings over a single-character token alphabet. The empty
string is the initial state and a string of the target length is terminal.
In prepend-append mode every action adds one token to either end of the
partial string, so one terminal object is reachable by many trajectories.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

PREPEND_APPEND = "prepend-append"
APPEND_ONLY = "append-only"
MODES = (PREPEND_APPEND, APPEND_ONLY)

DEFAULT_ENUMERATION_CAP = 10**6


class EnvError(ValueError):
    """Raised for invalid states, actions or reward lookups."""


class TooLargeToEnumerate(EnvError):
    pass


@dataclass(frozen=True)
class TokenAlphabet:
    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens:
            raise EnvError("alphabet needs at least one token")
        if len(set(tokens)) != len(tokens):
            raise EnvError(f"alphabet tokens are not unique: {tokens}")
        for t in tokens:
            if not isinstance(t, str) or len(t) != 1:
                raise EnvError(f"tokens must be single characters, got {t!r}")

    @classmethod
    def from_string(cls, s: str) -> "TokenAlphabet":
        return cls(tuple(s))

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    def validate(self, seq: str) -> None:
        bad = set(seq) - set(self.tokens)
        if bad:
            raise EnvError(f"sequence {seq!r} contains tokens outside the alphabet: {sorted(bad)}")


def hamming(a: str, b: str) -> int:
    if len(a) != len(b):
        raise ValueError("hamming distance needs equal-length strings")
    return sum(c1 != c2 for c1, c2 in zip(a, b))


@dataclass(frozen=True)
class SyntheticLandscape:
    """Planted-mode landscape: raw(x) = max_m exp(-hamming(x, m) / width) + floor.

    Modes are drawn uniformly at random under ``seed`` and rejection-sampled so
    that every pair is at least ``min_separation`` apart.
    """

    alphabet: TokenAlphabet
    length: int
    seed: int = 0
    n_modes: int = 8
    width: float = 1.0
    floor: float = 1e-3
    min_separation: int | None = None
    modes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.width <= 0 or self.floor < 0 or self.n_modes < 1:
            raise EnvError("landscape needs width > 0, floor >= 0, n_modes >= 1")
        if not self.modes:
            object.__setattr__(self, "modes", self._plant())

    @property
    def separation(self) -> int:
        if self.min_separation is not None:
            return self.min_separation
        return (self.length + 1) // 2

    def _plant(self) -> tuple[str, ...]:
        rng = np.random.default_rng(self.seed)
        tokens = self.alphabet.tokens
        modes: list[str] = []
        for _ in range(100_000):
            cand = "".join(tokens[i] for i in rng.integers(len(tokens), size=self.length))
            if all(hamming(cand, m) >= self.separation for m in modes):
                modes.append(cand)
                if len(modes) == self.n_modes:
                    return tuple(modes)
        raise EnvError(
            f"could not plant {self.n_modes} modes with separation {self.separation}"
        )

    @property
    def max_raw(self) -> float:
        return 1.0 + self.floor

    def raw(self, x: str) -> float:
        d = min(hamming(x, m) for m in self.modes)
        return math.exp(-d / self.width) + self.floor

    def raw_array(self, codes: np.ndarray) -> np.ndarray:
        """Vectorised ``raw`` over integer-coded strings of shape (n, length)."""
        mode_codes = np.array([[self.alphabet.index(c) for c in m] for m in self.modes])
        d = (codes[:, None, :] != mode_codes[None, :, :]).sum(-1).min(1)
        return np.exp(-d / self.width) + self.floor


class RewardSpec:
    """Maps terminal strings to R(x) = (raw(x) * scale_cap / max_raw) ** beta.

    ``raw`` is either a table (dict) or a callable; ``max_raw`` is the
    normalisation constant recorded in run metadata.
    """

    def __init__(
        self,
        raw: dict[str, float] | Callable[[str], float],
        scale_cap: float = 1.0,
        beta: float = 1.0,
        max_raw: float | None = None,
        source: str = "table",
    ):
        if scale_cap <= 0:
            raise EnvError("scale_cap must be positive")
        if beta < 1:
            raise EnvError("reward exponent beta must be >= 1")
        self.scale_cap = float(scale_cap)
        self.beta = float(beta)
        self.source = source
        if isinstance(raw, dict):
            if not raw:
                raise EnvError("reward table is empty")
            vals = np.fromiter(raw.values(), dtype=float, count=len(raw))
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise EnvError("raw rewards must be finite and non-negative")
            if not np.any(vals > 0):
                raise EnvError("at least one raw reward must be positive")
            self.table: dict[str, float] | None = dict(raw)
            self._raw_fn = None
            self.max_raw = float(vals.max()) if max_raw is None else float(max_raw)
        else:
            if max_raw is None:
                raise EnvError("callable rewards need an explicit max_raw")
            self.table = None
            self._raw_fn = raw
            self.max_raw = float(max_raw)

    def raw(self, x: str) -> float:
        if self.table is not None:
            try:
                return self.table[x]
            except KeyError:
                raise EnvError(f"unknown terminal object {x!r}") from None
        return float(self._raw_fn(x))

    def log_transform(self, raw: float | np.ndarray) -> float | np.ndarray:
        with np.errstate(divide="ignore"):
            return self.beta * (np.log(raw) + math.log(self.scale_cap) - math.log(self.max_raw))

    def log_reward(self, x: str) -> float:
        r = self.raw(x)
        if r <= 0:
            raise EnvError(f"raw reward of {x!r} is zero; R(x) must be positive")
        return float(self.log_transform(r))

    def reward(self, x: str) -> float:
        return math.exp(self.log_reward(x))

    def table_digest(self) -> str:
        h = hashlib.sha256()
        if self.table is not None:
            for k in sorted(self.table):
                h.update(f"{k},{self.table[k]!r}\n".encode())
        else:
            h.update(self.source.encode())
        return h.hexdigest()


def load_reward_table(path: str | Path, alphabet: TokenAlphabet, length: int) -> dict[str, float]:
    """Read ``<sequence>,<value>`` records; a leading header line is skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"reward table not found: {path}")
    table: dict[str, float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise EnvError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            seq, val = row[0].strip(), row[1].strip()
            try:
                value = float(val)
            except ValueError:
                if lineno == 1 and not table:
                    continue  # header
                raise EnvError(f"{path}:{lineno}: bad value {val!r}") from None
            alphabet.validate(seq)
            if len(seq) != length:
                raise EnvError(f"{path}:{lineno}: sequence {seq!r} is not of length {length}")
            if seq in table:
                raise EnvError(f"{path}:{lineno}: duplicate sequence {seq!r}")
            table[seq] = value
    return table


class SequenceEnv:
    """Prepend-append (or append-only) string-building DAG with a terminal reward.

    Environments are immutable after construction; the neighbour caches only
    memoise pure functions.
    """

    def __init__(
        self,
        alphabet: TokenAlphabet | str | Sequence[str],
        length: int,
        reward: RewardSpec,
        mode: str = PREPEND_APPEND,
        enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    ):
        if not isinstance(alphabet, TokenAlphabet):
            alphabet = TokenAlphabet(tuple(alphabet))
        if length < 1:
            raise EnvError("target length must be a positive integer")
        if mode not in MODES:
            raise EnvError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.alphabet = alphabet
        self.length = int(length)
        self.reward_spec = reward
        self.mode = mode
        self.enumeration_cap = enumeration_cap
        self._children: dict[str, tuple[str, ...]] = {}
        self._parents: dict[str, tuple[str, ...]] = {}
        self._log_rewards: dict[str, float] = {}

    initial_state = ""

    def __repr__(self):
        return f"SequenceEnv(A={len(self.alphabet)}, L={self.length}, mode={self.mode!r})"

    @property
    def n_tokens(self) -> int:
        return len(self.alphabet)

    @property
    def n_terminals(self) -> int:
        return self.n_tokens**self.length

    @property
    def enumerable(self) -> bool:
        return self.n_terminals <= self.enumeration_cap

    def is_terminal(self, s: str) -> bool:
        return len(s) == self.length

    def check_state(self, s: str) -> None:
        if not isinstance(s, str) or len(s) > self.length:
            raise EnvError(f"invalid state {s!r} for target length {self.length}")
        self.alphabet.validate(s)

    def children(self, s: str) -> tuple[str, ...]:
        try:
            return self._children[s]
        except KeyError:
            pass
        if len(s) >= self.length:
            raise EnvError("no children of terminal state")
        out: list[str] = []
        for t in self.alphabet.tokens:
            out.append(s + t)
        if self.mode == PREPEND_APPEND:
            for t in self.alphabet.tokens:
                out.append(t + s)
        kids = tuple(dict.fromkeys(out))
        self._children[s] = kids
        return kids

    def parents(self, s: str) -> tuple[str, ...]:
        try:
            return self._parents[s]
        except KeyError:
            pass
        if not s:
            raise EnvError("no parents of initial state")
        if self.mode == PREPEND_APPEND:
            pars = tuple(dict.fromkeys((s[:-1], s[1:])))
        else:
            pars = (s[:-1],)
        self._parents[s] = pars
        return pars

    def log_reward(self, x: str) -> float:
        try:
            return self._log_rewards[x]
        except KeyError:
            pass
        if not self.is_terminal(x):
            raise EnvError(f"reward is only defined on terminal states, got {x!r}")
        lr = self.reward_spec.log_reward(x)
        self._log_rewards[x] = lr
        return lr

    def reward(self, x: str) -> float:
        return math.exp(self.log_reward(x))

    def iter_terminals(self) -> Iterator[str]:
        for combo in itertools.product(self.alphabet.tokens, repeat=self.length):
            yield "".join(combo)

    def enumerate_terminals(self) -> list[tuple[str, float]]:
        """All terminal strings in lexicographic (alphabet) order with rewards."""
        if not self.enumerable:
            raise TooLargeToEnumerate(
                f"environment too large to enumerate: {self.n_terminals} terminals "
                f"exceeds cap {self.enumeration_cap}"
            )
        return [(x, self.reward(x)) for x in self.iter_terminals()]

    def terminal_log_rewards(self) -> tuple[list[str], np.ndarray]:
        if not self.enumerable:
            raise TooLargeToEnumerate(
                f"environment too large to enumerate: {self.n_terminals} terminals "
                f"exceeds cap {self.enumeration_cap}"
            )
        xs = list(self.iter_terminals())
        spec = self.reward_spec
        if spec.table is not None:
            raws = np.array([spec.raw(x) for x in xs])
            if np.any(raws <= 0):
                bad = xs[int(np.argmax(raws <= 0))]
                raise EnvError(f"raw reward of {bad!r} is zero; R(x) must be positive")
            return xs, np.asarray(spec.log_transform(raws), dtype=float)
        return xs, np.array([self.log_reward(x) for x in xs])

    def states_by_length(self) -> list[list[str]]:
        """Every state grouped by length; only for enumerable environments."""
        if not self.enumerable:
            raise TooLargeToEnumerate("environment too large to enumerate")
        return [
            ["".join(c) for c in itertools.product(self.alphabet.tokens, repeat=k)]
            for k in range(self.length + 1)
        ]

    def fingerprint(self) -> dict:
        spec = self.reward_spec
        return {
            "alphabet": "".join(self.alphabet.tokens),
            "length": self.length,
            "mode": self.mode,
            "reward_source": spec.source,
            "reward_table_sha256": spec.table_digest(),
            "max_raw": spec.max_raw,
            "scale_cap": spec.scale_cap,
            "beta": spec.beta,
        }


def synthetic_reward(landscape: SyntheticLandscape, scale_cap: float = 1.0, beta: float = 1.0,
                     enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> RewardSpec:
    """Reward spec over a planted landscape; tabulated when the space is enumerable."""
    alphabet, length = landscape.alphabet, landscape.length
    source = (
        f"synthetic:seed={landscape.seed},modes={landscape.n_modes},"
        f"width={landscape.width},floor={landscape.floor},sep={landscape.separation}"
    )
    if len(alphabet) ** length <= enumeration_cap:
        codes = np.array(list(itertools.product(range(len(alphabet)), repeat=length)))
        raws = landscape.raw_array(codes.reshape(-1, length))
        toks = alphabet.tokens
        keys = ("".join(toks[i] for i in row) for row in codes)
        table = dict(zip(keys, raws.tolist()))
        return RewardSpec(table, scale_cap, beta, max_raw=landscape.max_raw, source=source)
    return RewardSpec(landscape.raw, scale_cap, beta, max_raw=landscape.max_raw, source=source)
