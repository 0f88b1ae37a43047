"""SSR-parametrised forward/backward policies, log-partition and state flows.

Edge logits are predicted from the concatenated one-hot encodings of the
(parent, child) pair. Logits are clipped to [-50, 50] before the softmax over
the de-duplicated children (forward) or parents (backward) of a state.

Everything here is batched: one network call scores every candidate edge of a
whole batch of states, and a segment softmax turns the flat logit vector into
per-state distributions.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .env import EnvError, SequenceEnv
from .nn import DenseNet, net_backward, net_forward

LOGIT_CLIP = 50.0
LOG_Z_INIT = 5.0

BACKWARD_LEARNED = "learned"
BACKWARD_UNIFORM = "uniform"


def clip_logits(v):
    return np.clip(v, -LOGIT_CLIP, LOGIT_CLIP)


@dataclass
class Trajectory:
    """A complete path s0 -> ... -> x with its (log) reward.

    ``log_pf``/``log_pb`` cache the path log-probabilities under the policy that
    produced the trajectory; they are None when not computed.
    """

    states: tuple[str, ...]
    log_reward: float
    log_pf: float | None = None
    log_pb: float | None = None

    @property
    def reward(self) -> float:
        return math.exp(self.log_reward)

    @property
    def terminal(self) -> str:
        return self.states[-1]

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


class StateEncoder:
    """Fixed-width one-hot layout: L slots of A token bits plus an empty bit.

    Encodings are memoised in a growing matrix so a batch of states can be
    gathered with a single fancy-index.
    """

    def __init__(self, env: SequenceEnv):
        self.env = env
        self.n_tokens = env.n_tokens
        self.slot = env.n_tokens + 1
        self.dim = env.length * self.slot
        self._tok = {t: i for i, t in enumerate(env.alphabet.tokens)}
        self._ids: dict[str, int] = {}
        self._mat = np.zeros((1024, self.dim))
        self._n = 0

    def _add(self, s: str) -> int:
        if self._n == len(self._mat):
            grown = np.zeros((2 * len(self._mat), self.dim))
            grown[: self._n] = self._mat
            self._mat = grown
        row = self._mat[self._n]
        for i in range(self.env.length):
            j = self._tok[s[i]] if i < len(s) else self.n_tokens
            row[i * self.slot + j] = 1.0
        self._ids[s] = self._n
        self._n += 1
        return self._n - 1

    def ids(self, states) -> np.ndarray:
        get = self._ids.get
        out = np.empty(len(states), dtype=np.intp)
        for k, s in enumerate(states):
            i = get(s)
            out[k] = self._add(s) if i is None else i
        return out

    def rows(self, ids: np.ndarray) -> np.ndarray:
        return self._mat[ids]

    def encode(self, s: str) -> np.ndarray:
        return self.rows(self.ids([s]))[0].copy()

    def pairs(self, src_ids: np.ndarray, dst_ids: np.ndarray) -> np.ndarray:
        return np.concatenate([self._mat[src_ids], self._mat[dst_ids]], axis=1)


@dataclass
class _Segments:
    """Flat per-edge scores for a batch of states, grouped into segments."""

    neighbours: list[tuple[str, ...]]
    starts: np.ndarray
    counts: np.ndarray
    seg: np.ndarray  # segment index of every row
    raw: np.ndarray | None  # unclipped logits; None for the uniform backward stand-in
    logp: np.ndarray
    tape: object = None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)


def _segment_log_softmax(logits: np.ndarray, starts: np.ndarray, seg: np.ndarray) -> np.ndarray:
    m = np.maximum.reduceat(logits, starts)
    shifted = logits - m[seg]
    s = np.add.reduceat(np.exp(shifted), starts)
    return shifted - np.log(s)[seg]


class SSRPolicy:
    """Forward net, backward net (or uniform stand-in), log Z and optional state flow."""

    def __init__(
        self,
        env: SequenceEnv,
        hidden: int = 128,
        n_hidden: int = 2,
        activation: str = "leaky_relu",
        backward: str = BACKWARD_LEARNED,
        state_flow: bool = False,
        log_z_init: float = LOG_Z_INIT,
        rng: np.random.Generator | None = None,
        zero: bool = False,
    ):
        if backward not in (BACKWARD_LEARNED, BACKWARD_UNIFORM):
            raise ValueError(f"backward must be 'learned' or 'uniform', got {backward!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.env = env
        self.encoder = StateEncoder(env)
        d = self.encoder.dim
        dims = [2 * d] + [hidden] * n_hidden + [1]
        self.forward_net = DenseNet(dims, activation, rng, zero=zero)
        self.backward_net = (
            DenseNet(dims, activation, rng, zero=zero) if backward == BACKWARD_LEARNED else None
        )
        self.state_flow_net = (
            DenseNet([d] + [hidden] * n_hidden + [1], activation, rng, zero=zero)
            if state_flow
            else None
        )
        self.log_z = np.array([float(log_z_init)])
        self._nbr_cache: dict[str, dict] = {"f": {}, "b": {}}
        self._dist_cache: dict | None = None

    @property
    def uniform_backward(self) -> bool:
        return self.backward_net is None

    def nets(self) -> list[tuple[str, DenseNet]]:
        out = [("forward", self.forward_net)]
        if self.backward_net is not None:
            out.append(("backward", self.backward_net))
        if self.state_flow_net is not None:
            out.append(("state_flow", self.state_flow_net))
        return out

    def parameters(self) -> list[np.ndarray]:
        params = [self.log_z]
        for _, net in self.nets():
            params.extend(net.params)
        return params

    def learning_rates(self, lr_log_z: float, lr_net: float) -> list[float]:
        return [lr_log_z] + [lr_net] * (len(self.parameters()) - 1)

    @contextlib.contextmanager
    def frozen(self):
        """Memoise per-state distributions while the parameters are held fixed."""
        outer = self._dist_cache
        self._dist_cache = {} if outer is None else outer
        try:
            yield self
        finally:
            self._dist_cache = outer

    def bump_version(self) -> None:
        self._dist_cache = None if self._dist_cache is None else {}
        for _, net in self.nets():
            net.version += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"log_z": self.log_z.copy()}
        for name, net in self.nets():
            for i, p in enumerate(net.params):
                out[f"{name}.{i}"] = p.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.log_z[...] = state["log_z"]
        for name, net in self.nets():
            for i, p in enumerate(net.params):
                key = f"{name}.{i}"
                if key not in state or state[key].shape != p.shape:
                    raise ValueError(f"checkpoint is missing or mis-shapes {key}")
                p[...] = state[key]
        self.bump_version()

    # ------------------------------------------------------------------ scoring

    def _neighbours(self, s: str, direction: str):
        cache = self._nbr_cache[direction]
        hit = cache.get(s)
        if hit is None:
            nb = self.env.children(s) if direction == "f" else self.env.parents(s)
            hit = cache[s] = (nb, self.encoder.ids([s])[0], self.encoder.ids(nb))
        return hit

    def _segments(self, states, direction: str, keep_tape: bool = False) -> _Segments:
        info = [self._neighbours(s, direction) for s in states]
        nbrs = [t[0] for t in info]
        counts = np.fromiter((len(n) for n in nbrs), dtype=np.intp, count=len(nbrs))
        starts = np.zeros(len(nbrs), dtype=np.intp)
        np.cumsum(counts[:-1], out=starts[1:])
        seg = np.repeat(np.arange(len(nbrs)), counts)
        if direction == "b" and self.backward_net is None:
            logp = -np.log(counts.astype(float))[seg]
            return _Segments(nbrs, starts, counts, seg, None, logp)
        enc = self.encoder
        own = np.fromiter((t[1] for t in info), dtype=np.intp, count=len(info))
        other = np.concatenate([t[2] for t in info])
        if direction == "f":
            x = enc.pairs(own[seg], other)
            net = self.forward_net
        else:
            x = enc.pairs(other, own[seg])
            net = self.backward_net
        out, tape = net_forward(net, x, check=False)
        raw = out[:, 0]
        logp = _segment_log_softmax(clip_logits(raw), starts, seg)
        return _Segments(nbrs, starts, counts, seg, raw, logp, tape if keep_tape else None)

    def _cached_segments(self, states, direction: str) -> _Segments:
        """Like _segments (no tape), served from the frozen-parameter cache when active."""
        cache = self._dist_cache
        if cache is None:
            return self._segments(states, direction)
        miss = list(dict.fromkeys(s for s in states if (direction, s) not in cache))
        if miss:
            sg = self._segments(miss, direction)
            for s, a, c in zip(miss, sg.starts, sg.counts):
                cache[(direction, s)] = sg.logp[a : a + c]
        parts = [cache[(direction, s)] for s in states]
        nbrs = [self._nbr_cache[direction][s][0] for s in states]
        counts = np.fromiter((len(p) for p in parts), dtype=np.intp, count=len(parts))
        starts = np.zeros(len(parts), dtype=np.intp)
        np.cumsum(counts[:-1], out=starts[1:])
        seg = np.repeat(np.arange(len(parts)), counts)
        return _Segments(nbrs, starts, counts, seg, None, np.concatenate(parts))

    def forward_dist(self, s: str) -> np.ndarray:
        """P_F(. | s) aligned with ``env.children(s)``."""
        if self.env.is_terminal(s):
            raise EnvError("no children of terminal state")
        return self._segments([s], "f").probs

    def backward_dist(self, s: str) -> np.ndarray:
        """P_B(. | s) aligned with ``env.parents(s)``."""
        if s == self.env.initial_state:
            raise EnvError("no parents of initial state")
        return self._segments([s], "b").probs

    def forward_dists(self, states, chunk: int = 8192) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(states), chunk):
            sg = self._segments(states[i : i + chunk], "f")
            p = sg.probs
            out.extend(p[a : a + c] for a, c in zip(sg.starts, sg.counts))
        return out

    def log_state_flows(self, states) -> np.ndarray:
        if self.state_flow_net is None:
            raise ValueError("policy has no state-flow network")
        out, _ = net_forward(self.state_flow_net, self.encoder.rows(self.encoder.ids(states)))
        return out[:, 0]

    # ---------------------------------------------------------------- sampling

    def sample_step(self, states, direction: str, rng: np.random.Generator, epsilon: float = 0.0):
        """Sample one neighbour per state; returns (next states, log-prob under the policy)."""
        sg = self._cached_segments(states, direction)
        p = sg.probs
        n = len(states)
        cs = np.cumsum(p)
        base = cs[sg.starts] - p[sg.starts]
        u = rng.random(n)
        idx = np.searchsorted(cs, base + u, side="right")
        idx = np.clip(idx, sg.starts, sg.starts + sg.counts - 1)
        if epsilon > 0:
            explore = rng.random(n) < epsilon
            uni = sg.starts + np.minimum((rng.random(n) * sg.counts).astype(np.intp), sg.counts - 1)
            idx = np.where(explore, uni, idx)
        local = idx - sg.starts
        nxt = [sg.neighbours[k][local[k]] for k in range(n)]
        return nxt, sg.logp[idx]

    def edge_log_probs(self, src, dst, direction: str) -> np.ndarray:
        """log P_F(dst|src) (direction 'f') or log P_B(dst|src) ('b') for each pair."""
        sg = self._cached_segments(src, direction)
        out = np.empty(len(src))
        for k, (nb, a) in enumerate(zip(sg.neighbours, sg.starts)):
            try:
                out[k] = sg.logp[a + nb.index(dst[k])]
            except ValueError:
                raise EnvError(f"invalid edge {src[k]!r} -> {dst[k]!r}") from None
        return out

    # ---------------------------------------------------- differentiable batch

    def evaluate(self, paths, need_flows: bool = False, log_rewards=None) -> "PathBatch":
        return PathBatch(self, paths, need_flows, log_rewards)


class PathBatch:
    """Per-edge log P_F / log P_B (and state flows) for equal-length paths.

    ``backward`` maps upstream gradients on those quantities to gradients on
    ``policy.parameters()``. Terminal flows are taken from ``log_rewards``
    when given, so training never queries the reward oracle again.
    """

    def __init__(self, policy: SSRPolicy, paths, need_flows: bool = False, log_rewards=None):
        paths = [tuple(p) for p in paths]
        if not paths:
            raise ValueError("empty batch")
        n = len(paths[0]) - 1
        if n < 1 or any(len(p) != n + 1 for p in paths):
            raise ValueError("paths in a batch must all have the same number (>= 1) of edges")
        self.policy = policy
        self.B, self.n = len(paths), n
        src = [p[t] for p in paths for t in range(n)]
        dst = [p[t + 1] for p in paths for t in range(n)]
        self.fwd = policy._segments(src, "f", keep_tape=True)
        self.bwd = policy._segments(dst, "b", keep_tape=True)
        self.f_idx = self._chosen(self.fwd, dst, src)
        self.b_idx = self._chosen(self.bwd, src, dst)
        self.log_pf = self.fwd.logp[self.f_idx].reshape(self.B, n)
        self.log_pb = self.bwd.logp[self.b_idx].reshape(self.B, n)
        self.flow_tape = None
        self.log_flow = None
        if need_flows:
            env = policy.env
            if policy.state_flow_net is None:
                raise ValueError("detailed/sub-trajectory balance need a state-flow network")
            inner = [p[t] for p in paths for t in range(1, n)]
            lf = np.empty((self.B, n + 1))
            lf[:, 0] = policy.log_z[0]
            for b, p in enumerate(paths):
                if p[0] != env.initial_state or not env.is_terminal(p[-1]):
                    raise ValueError("flow objectives need complete trajectories")
                lf[b, n] = env.log_reward(p[-1]) if log_rewards is None else log_rewards[b]
            if inner:
                enc = policy.encoder
                out, self.flow_tape = net_forward(policy.state_flow_net, enc.rows(enc.ids(inner)))
                lf[:, 1:n] = out[:, 0].reshape(self.B, n - 1)
            self.log_flow = lf

    @staticmethod
    def _chosen(sg: _Segments, targets, origins) -> np.ndarray:
        idx = np.empty(len(targets), dtype=np.intp)
        for k, (nb, a) in enumerate(zip(sg.neighbours, sg.starts)):
            try:
                idx[k] = a + nb.index(targets[k])
            except ValueError:
                raise EnvError(f"invalid edge between {origins[k]!r} and {targets[k]!r}") from None
        return idx

    @staticmethod
    def _logit_grad(sg: _Segments, chosen: np.ndarray, g_edge: np.ndarray) -> np.ndarray:
        # d log softmax_c / d logit_j = 1[j = c] - p_j, zeroed where the clip is active
        d = -sg.probs * g_edge[sg.seg]
        np.add.at(d, chosen, g_edge)
        d *= np.abs(sg.raw) < LOGIT_CLIP
        return d

    def backward(self, d_log_z: float = 0.0, d_log_pf=None, d_log_pb=None, d_log_flow=None):
        pol = self.policy
        grads: list[np.ndarray] = [np.array([float(d_log_z)])]
        zeros = np.zeros((self.B, self.n))
        d_log_pf = zeros if d_log_pf is None else np.asarray(d_log_pf)
        d_log_pb = zeros if d_log_pb is None else np.asarray(d_log_pb)

        d = self._logit_grad(self.fwd, self.f_idx, d_log_pf.reshape(-1))
        grads.extend(net_backward(pol.forward_net, self.fwd.tape, d[:, None]))
        if pol.backward_net is not None:
            d = self._logit_grad(self.bwd, self.b_idx, d_log_pb.reshape(-1))
            grads.extend(net_backward(pol.backward_net, self.bwd.tape, d[:, None]))
        if pol.state_flow_net is not None:
            if d_log_flow is None or self.flow_tape is None:
                grads.extend(np.zeros_like(p) for p in pol.state_flow_net.params)
            else:
                d_log_flow = np.asarray(d_log_flow)
                grads[0] = grads[0] + d_log_flow[:, 0].sum()
                inner = d_log_flow[:, 1 : self.n].reshape(-1, 1)
                grads.extend(net_backward(pol.state_flow_net, self.flow_tape, inner))
        return grads


# -------------------------------------------------------------- free functions


def forward_dist(policy: SSRPolicy, env: SequenceEnv, s: str) -> np.ndarray:
    return policy.forward_dist(s)


def backward_dist(policy: SSRPolicy, env: SequenceEnv, s: str) -> np.ndarray:
    return policy.backward_dist(s)


def traj_logprobs(policy: SSRPolicy, env: SequenceEnv, states) -> tuple[float, float]:
    """Summed log P_F and log P_B along a (possibly partial) path."""
    states = tuple(states)
    if len(states) < 2:
        return 0.0, 0.0
    batch = PathBatch(policy, [states])
    return float(batch.log_pf.sum()), float(batch.log_pb.sum())


def sample_trajectories(
    policy: SSRPolicy,
    env: SequenceEnv,
    n: int,
    epsilon: float,
    rng: np.random.Generator,
    log_reward_fn=None,
    with_log_pb: bool = True,
) -> list[Trajectory]:
    """Roll out ``n`` trajectories from s0 with epsilon-uniform exploration.

    The recorded log_pf is always under the unmixed forward policy.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    log_reward_fn = env.log_reward if log_reward_fn is None else log_reward_fn
    paths = [[env.initial_state] for _ in range(n)]
    cur = [env.initial_state] * n
    log_pf = np.zeros(n)
    for _ in range(env.length):
        cur, lp = policy.sample_step(cur, "f", rng, epsilon)
        log_pf += lp
        for path, s in zip(paths, cur):
            path.append(s)
    log_pb = np.full(n, np.nan)
    if with_log_pb:
        src = [p[t + 1] for p in paths for t in range(env.length)]
        dst = [p[t] for p in paths for t in range(env.length)]
        log_pb = policy.edge_log_probs(src, dst, "b").reshape(n, env.length).sum(1)
    out = []
    for k, path in enumerate(paths):
        out.append(
            Trajectory(
                tuple(path),
                log_reward_fn(path[-1]),
                float(log_pf[k]),
                float(log_pb[k]) if with_log_pb else None,
            )
        )
    return out


def sample_trajectory(policy, env, epsilon, rng, log_reward_fn=None) -> Trajectory:
    return sample_trajectories(policy, env, 1, epsilon, rng, log_reward_fn)[0]
