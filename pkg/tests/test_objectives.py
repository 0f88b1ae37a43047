import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsgfn.nn import AdamState, adam_step
from lsgfn.objectives import (
    DB,
    KINDS,
    MAXENT,
    SUBTB,
    TB,
    NonFiniteLoss,
    ObjectiveConfig,
    batch_loss,
    db_loss,
    pair_weights,
    path_losses,
    subpath_residuals,
    subtb_loss,
    tb_loss,
)
from lsgfn.policy import SSRPolicy, Trajectory

from helpers import TINY_RAW, random_table_env, table_env
from oracles import TabularPolicy, all_strings, bf_paths, central_difference, relative_error


# ------------------------------------------------------------------ loop oracles


def loop_loss(kind, log_pf, log_pb, log_flow, lam=0.9):
    """Sub-path losses written out term by term from their definitions."""
    n = len(log_pf)

    def resid(i, j):
        return log_flow[i] + sum(log_pf[i:j]) - log_flow[j] - sum(log_pb[i:j])

    if kind in (TB, MAXENT):
        return resid(0, n) ** 2
    if kind == DB:
        return sum(resid(t, t + 1) ** 2 for t in range(n))
    num = sum(lam ** (j - i) * resid(i, j) ** 2 for i in range(n) for j in range(i + 1, n + 1))
    den = sum(lam ** (j - i) for i in range(n) for j in range(i + 1, n + 1))
    return num / den


def quantities(policy, env, path):
    """Per-edge log-probs and flows of one path via the single-state distribution API."""
    lpf = [math.log(policy.forward_dist(a)[env.children(a).index(b)]) for a, b in zip(path, path[1:])]
    lpb = [math.log(policy.backward_dist(b)[env.parents(b).index(a)]) for a, b in zip(path, path[1:])]
    flow = [float(policy.log_z[0])]
    if len(path) > 2:
        flow += list(policy.log_state_flows(list(path[1:-1]))) if policy.state_flow_net is not None else [0.0] * (len(path) - 2)
    flow.append(env.log_reward(path[-1]))
    return lpf, lpb, flow


def trajs_of(env, xs):
    return [Trajectory(p, env.log_reward(x)) for x in xs for p in bf_paths(x)]


# ------------------------------------------------------------------ worked examples


def test_tb_arithmetic_example():
    # log Z=5, log P_F=-2, log P_B=-1, log R=3
    assert path_losses([[-2.0]], [[-1.0]], [[5.0, 3.0]], TB)[0] == pytest.approx(1.0, abs=1e-15)


def test_tb_balanced_case_is_zero():
    # uniform P_F over two children, single parent: log Z = log R + log P_B - log P_F
    lpf, lpb, lr = [math.log(0.5), math.log(0.5)], [math.log(0.5), 0.0], 1.3
    lz = lr + sum(lpb) - sum(lpf)
    assert path_losses([lpf], [lpb], [[lz, 0.0, lr]], TB)[0] == pytest.approx(0.0, abs=1e-28)


def test_db_single_edge_example():
    env = table_env({"A": 1.0}, tokens="A")
    pol = SSRPolicy(env, hidden=4, state_flow=True, log_z_init=math.log(2.0), rng=np.random.default_rng(0))
    loss, _ = db_loss(pol, Trajectory(("", "A"), 0.0))
    assert loss == pytest.approx(math.log(2.0) ** 2, rel=1e-14)


def test_subtb_weights_for_two_edges():
    lam = 0.7
    w, norm = pair_weights(2, SUBTB, lam)
    assert w[0, 1] == pytest.approx(lam) and w[1, 2] == pytest.approx(lam)
    assert w[0, 2] == pytest.approx(lam**2)
    assert np.count_nonzero(w) == 3
    assert norm == pytest.approx(2 * lam + lam**2)


def test_pair_weights_shapes():
    w, norm = pair_weights(4, DB)
    assert np.count_nonzero(w) == 4 and norm == 1.0
    w, norm = pair_weights(4, TB)
    assert np.count_nonzero(w) == 1 and w[0, 4] == 1.0
    with pytest.raises(ValueError):
        pair_weights(3, "FM")


def test_objective_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig("FM")
    with pytest.raises(ValueError):
        ObjectiveConfig(SUBTB, lam=0.0)
    assert ObjectiveConfig(DB).needs_state_flow and not ObjectiveConfig(TB).needs_state_flow
    assert ObjectiveConfig(MAXENT).backward_mode == "uniform"


# ------------------------------------------------------------------ against the loop oracle


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(KINDS),
    st.integers(1, 6),
    st.floats(0.05, 1.0),
    st.integers(0, 2**32 - 1),
)
def test_path_losses_match_loop(kind, n, lam, seed):
    r = np.random.default_rng(seed)
    lpf, lpb, flow = r.normal(size=n), r.normal(size=n), r.normal(size=n + 1) * 3
    got = path_losses(lpf[None], lpb[None], flow[None], kind, lam)[0]
    want = loop_loss(kind, list(lpf), list(lpb), list(flow), lam)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-12)
    assert got >= 0


@pytest.mark.parametrize("kind", KINDS)
def test_batch_loss_matches_loop_oracle(kind):
    env = random_table_env(np.random.default_rng(3), "AB", 3)
    pol = SSRPolicy(env, hidden=8, backward="uniform" if kind == MAXENT else "learned",
                    state_flow=kind in (DB, SUBTB), rng=np.random.default_rng(1))
    trajs = trajs_of(env, all_strings("AB", 3))
    loss, grads, per = batch_loss(pol, trajs, ObjectiveConfig(kind, 0.8))
    want = [loop_loss(kind, *quantities(pol, env, t.states), lam=0.8) for t in trajs]
    assert np.allclose(per, want, rtol=1e-10, atol=1e-12)
    assert loss == pytest.approx(np.mean(want), rel=1e-10)
    assert len(grads) == len(pol.parameters())


def test_single_trajectory_wrappers_dispatch():
    env = table_env(TINY_RAW)
    t = Trajectory(("", "B", "AB"), env.log_reward("AB"))
    pol = SSRPolicy(env, hidden=4, state_flow=True, rng=np.random.default_rng(0))
    for fn, kind in ((tb_loss, TB), (db_loss, DB), (subtb_loss, SUBTB)):
        loss, _ = fn(pol, t)
        assert loss == pytest.approx(loop_loss(kind, *quantities(pol, env, t.states)), rel=1e-10)
    me = SSRPolicy(env, hidden=4, backward="uniform", rng=np.random.default_rng(0))
    loss, _ = tb_loss(me, t)
    assert loss == pytest.approx(loop_loss(MAXENT, *quantities(me, env, t.states)), rel=1e-10)


def test_flow_objectives_need_state_flow_and_maxent_needs_uniform():
    env = table_env(TINY_RAW)
    t = Trajectory(("", "A", "AA"), env.log_reward("AA"))
    with pytest.raises(ValueError, match="state-flow"):
        db_loss(SSRPolicy(env, hidden=4), t)
    with pytest.raises(ValueError, match="uniform"):
        batch_loss(SSRPolicy(env, hidden=4), [t], ObjectiveConfig(MAXENT))


def test_non_finite_loss_reports_trajectory():
    env = table_env(TINY_RAW)
    pol = SSRPolicy(env, hidden=4)
    t = Trajectory(("", "A", "AA"), float("nan"))
    with pytest.raises(NonFiniteLoss, match="AA"):
        batch_loss(pol, [t])


# ------------------------------------------------------------------ consistency


@pytest.mark.parametrize("tokens,length", [("AB", 2), ("AB", 3), ("ABC", 2), ("A", 3)])
def test_zero_on_consistent_assignments(tokens, length):
    """Exact flows from the tabular solution are balanced on every path and sub-path."""
    r = np.random.default_rng(length)
    raw = {x: float(v) for x, v in zip(all_strings(tokens, length), r.uniform(0.1, 2.0, len(tokens) ** length))}
    env = table_env(raw, tokens)
    reward = {x: env.reward(x) for x in raw}
    tab = TabularPolicy(env, reward)
    for x in raw:
        for p in bf_paths(x):
            lpf = [math.log(tab.pf[a][b]) for a, b in zip(p, p[1:])]
            lpb = [math.log(tab.pb[b][a]) for a, b in zip(p, p[1:])]
            flow = [math.log(tab.flow[s]) for s in p]
            for kind in KINDS:
                assert abs(path_losses([lpf], [lpb], [flow], kind)[0]) < 1e-24
            # a wrong intermediate flow is seen by DB and SubTB but not by TB
            if len(p) > 2:
                bad = list(flow)
                bad[1] += 0.3
                assert path_losses([lpf], [lpb], [bad], DB)[0] > 1e-3
                assert path_losses([lpf], [lpb], [bad], SUBTB)[0] > 1e-3
                assert abs(path_losses([lpf], [lpb], [bad], TB)[0]) < 1e-24


def test_subtb_reduces_to_tb_with_exact_intermediate_flows():
    """If log F(s_k) = log Z + C_k for 0 < k < n only the sub-paths ending at x carry the TB residual."""
    r = np.random.default_rng(0)
    n, lam = 4, 0.9
    lpf, lpb = r.normal(size=n), r.normal(size=n)
    lz, lr = 2.0, -1.0
    C = np.concatenate([[0.0], np.cumsum(lpf - lpb)])
    flow = np.full(n + 1, lz)
    flow[1:n] = lz + C[1:n]
    flow[n] = lr
    delta2 = path_losses([lpf], [lpb], [flow], TB)[0]
    w, norm = pair_weights(n, SUBTB, lam)
    expect = delta2 * sum(lam ** (n - i) for i in range(n)) / norm
    assert path_losses([lpf], [lpb], [flow], SUBTB, lam)[0] == pytest.approx(expect, rel=1e-12)
    # full-path-only weighting gives TB exactly
    assert path_losses([lpf], [lpb], [flow], MAXENT)[0] == pytest.approx(delta2, rel=1e-15)


def test_subpath_residual_matrix_is_antisymmetric():
    env = table_env(TINY_RAW)
    pol = SSRPolicy(env, hidden=4, state_flow=True, rng=np.random.default_rng(2))
    m = subpath_residuals(pol, Trajectory(("", "B", "AB"), env.log_reward("AB")))
    assert m.shape == (3, 3)
    assert np.allclose(m, -m.T) and np.allclose(np.diag(m), 0)
    assert m[0, 2] == pytest.approx(m[0, 1] + m[1, 2])


# ------------------------------------------------------------------ gradients


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(kind, seed):
    env = random_table_env(np.random.default_rng(seed), "AB", 3)
    pol = SSRPolicy(env, hidden=6, backward="uniform" if kind == MAXENT else "learned",
                    state_flow=kind in (DB, SUBTB), rng=np.random.default_rng(seed + 10))
    pol.log_z[0] = 0.7
    rng = np.random.default_rng(seed)
    xs = rng.choice(all_strings("AB", 3), 4)
    trajs = [Trajectory(bf_paths(x)[rng.integers(len(bf_paths(x)))], env.log_reward(x)) for x in xs]
    obj = ObjectiveConfig(kind, 0.9)
    _, grads, _ = batch_loss(pol, trajs, obj)

    def f():
        pol.bump_version()
        return batch_loss(pol, trajs, obj)[0]

    num = central_difference(f, pol.parameters(), h=1e-6)
    assert relative_error(grads, num) < 1e-4


def test_maxent_gradient_has_no_backward_component():
    env = table_env(TINY_RAW)
    pol = SSRPolicy(env, hidden=4, backward="uniform", rng=np.random.default_rng(0))
    t = Trajectory(("", "B", "AB"), env.log_reward("AB"))
    _, grads = tb_loss(pol, t)
    assert len(grads) == 1 + len(pol.forward_net.params)


# ------------------------------------------------------------------ convergence


def _fit(kind, steps, lr=1e-2):
    env = table_env(TINY_RAW)
    pol = SSRPolicy(env, hidden=16, state_flow=kind in (DB, SUBTB), rng=np.random.default_rng(0))
    trajs = trajs_of(env, TINY_RAW)
    opt = AdamState.for_params(pol.parameters(), lr)
    obj = ObjectiveConfig(kind)
    for _ in range(steps):
        _, grads, _ = batch_loss(pol, trajs, obj)
        adam_step(pol.parameters(), grads, opt)
        pol.bump_version()
    return env, pol, trajs


def test_tb_converges_on_every_enumerable_trajectory():
    env, pol, trajs = _fit(TB, 3000)
    assert len(trajs) == 6
    _, _, per = batch_loss(pol, trajs, ObjectiveConfig(TB))
    assert per.max() < 1e-4
    assert pol.log_z[0] == pytest.approx(math.log(sum(env.reward(x) for x in TINY_RAW)), abs=1e-2)


def test_db_converges_per_edge():
    env, pol, trajs = _fit(DB, 3000)
    for t in trajs:
        lpf, lpb, flow = quantities(pol, env, t.states)
        for k in range(len(lpf)):
            assert abs(flow[k] + lpf[k] - flow[k + 1] - lpb[k]) < 1e-2
