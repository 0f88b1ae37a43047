"""Small environment builders shared by the tests."""

from lsgfn.env import RewardSpec, SequenceEnv
from lsgfn.nn import DenseNet

from oracles import all_strings

TINY_RAW = {"AA": 1.0, "AB": 2.0, "BA": 3.0, "BB": 4.0}


def table_env(raw: dict, tokens="AB", scale_cap=None, beta=1.0, mode="prepend-append") -> SequenceEnv:
    length = len(next(iter(raw)))
    cap = max(raw.values()) if scale_cap is None else scale_cap
    return SequenceEnv(tokens, length, RewardSpec(dict(raw), cap, beta), mode)


def random_table_env(rng, tokens="AB", length=3, beta=1.0, mode="prepend-append", ties=False) -> SequenceEnv:
    xs = all_strings(tokens, length)
    vals = rng.integers(1, 4, size=len(xs)) if ties else rng.uniform(0.05, 1.0, size=len(xs))
    return table_env(dict(zip(xs, map(float, vals))), tokens, beta=beta, mode=mode)


def linear_forward(policy, child_weights):
    """Replace the forward net by a linear map that scores the child's slot-0 token."""
    enc = policy.encoder
    net = DenseNet([2 * enc.dim, 1], zero=True)
    for tok, w in child_weights.items():
        net.weights[0][enc.dim + policy.env.alphabet.index(tok), 0] = w
    policy.forward_net = net
    return policy
