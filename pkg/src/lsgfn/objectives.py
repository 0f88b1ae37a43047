"""Trajectory balance and its relatives, with analytic parameter gradients.

DB and SubTB are reconstructed from the works that introduced them; MaxEnt is
TB with the backward policy fixed to the uniform distribution over parents.
For the flow objectives the initial-state flow is log Z and the terminal
flow is log R(x); intermediate flows come from the state-flow network.

Every loss is written in terms of the potentials D_k = log F(s_k) - C_k with
C_k = sum_{t<k} (log P_F - log P_B); the residual of the sub-path i -> j is
then D_i - D_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import PathBatch, SSRPolicy, Trajectory

TB = "TB"
DB = "DB"
SUBTB = "SubTB"
MAXENT = "MaxEnt"
KINDS = (TB, DB, SUBTB, MAXENT)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = TB
    lam: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("SubTB lambda must lie in (0, 1]")

    @property
    def needs_state_flow(self) -> bool:
        return self.kind in (DB, SUBTB)

    @property
    def backward_mode(self) -> str:
        return "uniform" if self.kind == MAXENT else "learned"


def pair_weights(n: int, kind: str, lam: float = 0.9) -> tuple[np.ndarray, float]:
    """Weights W[i, j] (i < j) of the sub-path residuals of an n-edge path, and their normaliser.

    TB and MaxEnt weight only the full path, DB every single edge with weight 1,
    SubTB every sub-path by lam^(j - i) normalised by the weight sum.
    """
    w = np.zeros((n + 1, n + 1))
    if kind in (TB, MAXENT):
        w[0, n] = 1.0
        return w, 1.0
    i, j = np.triu_indices(n + 1, k=1)
    if kind == DB:
        w[i[j == i + 1], j[j == i + 1]] = 1.0
        return w, 1.0
    if kind != SUBTB:
        raise ValueError(f"unknown objective {kind!r}")
    w[i, j] = lam ** (j - i).astype(float)
    return w, float(w.sum())


def potentials(log_pf, log_pb, log_flow) -> np.ndarray:
    """D_k = log F(s_k) - sum_{t<k} (log P_F - log P_B); residual of sub-path (i, j) is D_i - D_j."""
    log_pf = np.atleast_2d(log_pf)
    log_pb = np.atleast_2d(log_pb)
    C = np.zeros((log_pf.shape[0], log_pf.shape[1] + 1))
    np.cumsum(log_pf - log_pb, axis=1, out=C[:, 1:])
    return np.atleast_2d(log_flow) - C


def path_losses(log_pf, log_pb, log_flow, kind: str, lam: float = 0.9) -> np.ndarray:
    """Per-path losses from edge log-probabilities (B, n) and log-flows (B, n + 1).

    log_flow[:, 0] plays log Z for TB and log_flow[:, -1] is always log R(x).
    """
    D = potentials(log_pf, log_pb, log_flow)
    W, norm = pair_weights(D.shape[1] - 1, kind, lam)
    R = D[:, :, None] - D[:, None, :]
    return np.einsum("ij,bij->b", W, R * R) / norm


def _check(values: np.ndarray, paths) -> None:
    if not np.all(np.isfinite(values)):
        bad = [p for p, v in zip(paths, values) if not np.isfinite(v)]
        raise NonFiniteLoss(f"non-finite loss term; offending trajectories: {bad[:3]}")


def tb_terms(batch: PathBatch, log_z: float, log_r: np.ndarray) -> np.ndarray:
    return log_z + batch.log_pf.sum(1) - log_r - batch.log_pb.sum(1)


def batch_loss(policy: SSRPolicy, trajs, objective: ObjectiveConfig = ObjectiveConfig()):
    """Mean loss over ``trajs`` and its gradient w.r.t. ``policy.parameters()``.

    Returns (loss, grads, per-trajectory losses).
    """
    trajs = list(trajs)
    paths = [t.states for t in trajs]
    log_r = np.array([t.log_reward for t in trajs])
    B = len(trajs)
    if objective.kind in (TB, MAXENT):
        if objective.kind == MAXENT and not policy.uniform_backward:
            raise ValueError("MaxEnt needs a policy with the uniform backward stand-in")
        batch = policy.evaluate(paths)
        delta = tb_terms(batch, float(policy.log_z[0]), log_r)
        per = delta**2
        _check(per, paths)
        g = 2.0 * delta / B
        grads = batch.backward(
            d_log_z=g.sum(),
            d_log_pf=np.repeat(g[:, None], batch.n, 1),
            d_log_pb=np.repeat(-g[:, None], batch.n, 1),
        )
        return float(per.mean()), grads, per

    batch = policy.evaluate(paths, need_flows=True, log_rewards=log_r)
    D = potentials(batch.log_pf, batch.log_pb, batch.log_flow)
    W, norm = pair_weights(batch.n, objective.kind, objective.lam)
    R = D[:, :, None] - D[:, None, :]
    per = np.einsum("ij,bij->b", W, R * R) / norm
    _check(per, paths)
    WR = W[None] * R
    dD = 2.0 * (WR.sum(2) - WR.sum(1)) / norm / B
    # C_k depends on edges t < k, so edge t collects dD_k for every k > t
    tail = np.cumsum(dD[:, ::-1], axis=1)[:, ::-1][:, 1:]
    grads = batch.backward(d_log_pf=-tail, d_log_pb=tail, d_log_flow=dD)
    return float(per.mean()), grads, per


def _single(policy, traj: Trajectory, kind: str, lam: float = 0.9):
    loss, grads, _ = batch_loss(policy, [traj], ObjectiveConfig(kind, lam))
    return loss, grads


def tb_loss(policy: SSRPolicy, traj: Trajectory):
    kind = MAXENT if policy.uniform_backward else TB
    return _single(policy, traj, kind)


def db_loss(policy: SSRPolicy, traj: Trajectory):
    return _single(policy, traj, DB)


def subtb_loss(policy: SSRPolicy, traj: Trajectory, lam: float = 0.9):
    return _single(policy, traj, SUBTB, lam)


def subpath_residuals(policy: SSRPolicy, traj: Trajectory) -> np.ndarray:
    """(n+1, n+1) matrix of sub-path balance residuals D_i - D_j for one trajectory."""
    batch = policy.evaluate([traj.states], need_flows=True, log_rewards=[traj.log_reward])
    D = potentials(batch.log_pf, batch.log_pb, batch.log_flow)[0]
    return D[:, None] - D[None, :]
