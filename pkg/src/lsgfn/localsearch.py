"""Back-and-forth local search over complete trajectories.

A proposal walks K steps back from the terminal object with P_B, then rebuilds
K steps with the pure forward policy. Filtering is either greedy (strict reward
improvement) or Metropolis-Hastings.

The MH ratio uses the sampled backward walk itself, re-scored under P_F, as
the reverse move's reconstruction. That makes the acceptance rule satisfy
detailed balance for R(x) on terminal objects, whatever the policies are. The
prefix of the candidate is the original trajectory's prefix when the walk
lands on the original state s_{n-K}; otherwise it is completed down to s0 with
P_B (that part never enters the acceptance ratio).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import SequenceEnv
from .policy import SSRPolicy, Trajectory
from .replay import ORIGIN_ACCEPTED, ORIGIN_REJECTED, ReplayDataset

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
STANDARD = "standard"
SWAPPED = "swapped"


def default_k(length: int) -> int:
    return (length + 1) // 2


@dataclass(frozen=True)
class FilterRule:
    kind: str = DETERMINISTIC
    mh_orientation: str = STANDARD

    def __post_init__(self):
        if self.kind not in (DETERMINISTIC, STOCHASTIC):
            raise ValueError(f"filter must be {DETERMINISTIC!r} or {STOCHASTIC!r}, got {self.kind!r}")
        if self.mh_orientation not in (STANDARD, SWAPPED):
            raise ValueError(f"unknown MH orientation {self.mh_orientation!r}")


@dataclass
class Backtrack:
    prefix: tuple[str, ...]  # s0 ... s'_{n-K}
    walk: tuple[str, ...]  # x = s_n, s'_{n-1}, ..., s'_{n-K}
    log_pb: float


@dataclass
class Proposal:
    original: Trajectory
    candidate: Trajectory
    shared_prefix_len: int
    log_q_fwd: float
    log_q_bwd: float
    walk: tuple[str, ...] = ()

    @property
    def log_q_ratio(self) -> float:
        """log q(tau | tau') - log q(tau' | tau)."""
        return self.log_q_bwd - self.log_q_fwd


def _walk(policy: SSRPolicy, starts, steps: int, direction: str, rng):
    paths = [[s] for s in starts]
    cur = list(starts)
    total = np.zeros(len(starts))
    for _ in range(steps):
        cur, lp = policy.sample_step(cur, direction, rng)
        total += lp
        for p, s in zip(paths, cur):
            p.append(s)
    return paths, total


def backtrack_batch(policy: SSRPolicy, env: SequenceEnv, trajs, K: int, rng) -> list[Backtrack]:
    n = env.length
    for t in trajs:
        if t.n_steps != n:
            raise ValueError("local search needs complete trajectories")
    if not 0 <= K <= n:
        raise ValueError(f"K={K} must lie in [0, {n}]")
    walks, log_pb = _walk(policy, [t.terminal for t in trajs], K, "b", rng)
    keep = n - K
    prefixes: list[tuple[str, ...] | None] = []
    redo = []
    for i, (t, w) in enumerate(zip(trajs, walks)):
        if t.states[keep] == w[-1]:
            prefixes.append(t.states[: keep + 1])
        else:
            prefixes.append(None)
            redo.append(i)
    if redo:
        lower, _ = _walk(policy, [walks[i][-1] for i in redo], keep, "b", rng)
        for i, path in zip(redo, lower):
            prefixes[i] = tuple(reversed(path))
    return [Backtrack(p, tuple(w), float(lp)) for p, w, lp in zip(prefixes, walks, log_pb)]


def backtrack(policy: SSRPolicy, env: SequenceEnv, traj: Trajectory, K: int, rng):
    """Returns (retained prefix s0..s'_{n-K}, log P_B of the destroyed segment)."""
    if K > traj.n_steps:
        raise ValueError(f"cannot backtrack K={K} steps from a {traj.n_steps}-step trajectory")
    bt = backtrack_batch(policy, env, [traj], K, rng)[0]
    return bt.prefix, bt.log_pb


def reconstruct_batch(policy: SSRPolicy, env: SequenceEnv, prefixes, rng):
    starts = [p[-1] for p in prefixes]
    remaining = {env.length - len(s) for s in starts}
    if len(remaining) != 1:
        raise ValueError("prefixes in a batch must end at states of equal length")
    return _walk(policy, starts, remaining.pop(), "f", rng)


def reconstruct(policy: SSRPolicy, env: SequenceEnv, prefix, rng):
    """Returns (reconstructed segment s'_{n-K} .. x', its log P_F)."""
    paths, lp = reconstruct_batch(policy, env, [tuple(prefix)], rng)
    return tuple(paths[0]), float(lp[0])


def propose_batch(policy: SSRPolicy, env: SequenceEnv, trajs, K: int, rng, log_reward_fn=None) -> list[Proposal]:
    log_reward_fn = env.log_reward if log_reward_fn is None else log_reward_fn
    trajs = list(trajs)
    bts = backtrack_batch(policy, env, trajs, K, rng)
    recon, log_pf_recon = reconstruct_batch(policy, env, [b.prefix for b in bts], rng)
    M = len(trajs)
    log_pb_recon = np.zeros(M)
    log_pf_destroy = np.zeros(M)
    if K > 0:
        # reverse move: walk back along the new segment, rebuild the destroyed one
        child = [r[t + 1] for r in recon for t in range(K)]
        parent = [r[t] for r in recon for t in range(K)]
        log_pb_recon = policy.edge_log_probs(child, parent, "b").reshape(M, K).sum(1)
        src = [b.walk[t + 1] for b in bts for t in range(K)]
        dst = [b.walk[t] for b in bts for t in range(K)]
        log_pf_destroy = policy.edge_log_probs(src, dst, "f").reshape(M, K).sum(1)
    out = []
    for i, (t, b) in enumerate(zip(trajs, bts)):
        states = b.prefix + tuple(recon[i][1:])
        cand = Trajectory(states, log_reward_fn(states[-1]))
        out.append(
            Proposal(
                original=t,
                candidate=cand,
                shared_prefix_len=env.length - K,
                log_q_fwd=float(b.log_pb + log_pf_recon[i]),
                log_q_bwd=float(log_pb_recon[i] + log_pf_destroy[i]),
                walk=b.walk,
            )
        )
    return out


def propose(policy: SSRPolicy, env: SequenceEnv, traj: Trajectory, K: int, rng, log_reward_fn=None) -> Proposal:
    return propose_batch(policy, env, [traj], K, rng, log_reward_fn)[0]


def acceptance_probability(rule: FilterRule, proposal: Proposal) -> float:
    dr = proposal.candidate.log_reward - proposal.original.log_reward
    if rule.kind == DETERMINISTIC:
        return 1.0 if dr > 0 else 0.0
    if rule.mh_orientation == STANDARD:
        log_a = dr + proposal.log_q_bwd - proposal.log_q_fwd
    else:
        log_a = dr + proposal.log_q_fwd - proposal.log_q_bwd
    return 1.0 if log_a >= 0 else math.exp(log_a)


def accept(rule: FilterRule, proposal: Proposal, rng) -> bool:
    a = acceptance_probability(rule, proposal)
    if rule.kind == DETERMINISTIC:
        return a > 0
    return bool(rng.random() < a)


@dataclass
class RefineResult:
    chains: list[Trajectory]
    accept_rate: float | None
    n_proposals: int
    accepted: list[list[bool]]


def refine_batch(
    policy: SSRPolicy,
    env: SequenceEnv,
    chains,
    I: int,
    K: int,
    rule: FilterRule,
    dataset: ReplayDataset | None,
    rng,
    log_reward_fn=None,
    round_index: int = 0,
) -> RefineResult:
    """I rounds of propose / insert / filter over M independent chains."""
    chains = list(chains)
    if not chains:
        raise ValueError("need at least one chain")
    if I < 0:
        raise ValueError("I must be non-negative")
    history: list[list[bool]] = []
    n_acc = 0
    for _ in range(I):
        props = propose_batch(policy, env, chains, K, rng, log_reward_fn)
        flags = []
        for m, prop in enumerate(props):
            ok = accept(rule, prop, rng)
            if dataset is not None:
                dataset.insert(prop.candidate, round_index, ORIGIN_ACCEPTED if ok else ORIGIN_REJECTED)
            if ok:
                chains[m] = prop.candidate
            flags.append(ok)
        n_acc += sum(flags)
        history.append(flags)
    n_prop = I * len(chains)
    rate = n_acc / n_prop if n_prop else None
    return RefineResult(chains, rate, n_prop, history)
