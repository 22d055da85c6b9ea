"""Exact solvers for small explicit MDPs, used as training oracles.

Value iteration gives Q* to tight tolerance; the classic one-step
Q-learning update (Q += alpha * (r + gamma*max Q(s') - Q)) and the neural
double-Q learner are checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcmu.errors import ConfigError, DataError
from pcmu.nn import DenseStack, RmsProp
from pcmu.agent import ReplayBuffer, select_action, sync_target, td_targets, update_q


@dataclass(frozen=True)
class SmallMdp:
    """Finite MDP with explicit dynamics: transitions (S,A,S), rewards (S,A)."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ConfigError("transitions must be (S, A, S)")
        if r.shape != p.shape[:2]:
            raise ConfigError("rewards must be (S, A)")
        if not (np.isfinite(p).all() and np.isfinite(r).all()):
            raise DataError("MDP tensors must be finite")
        if not np.allclose(p.sum(axis=2), 1.0, atol=1e-9):
            raise DataError("transition rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("tabular solvers need gamma in [0,1)")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def value_iteration(mdp: SmallMdp, tol: float = 1e-10,
                    max_iter: int = 1_000_000) -> np.ndarray:
    """Iterate Q <- R + gamma * P . max_a Q to a sup-norm residual < tol."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = q.max(axis=1)
        q_new = mdp.rewards + mdp.gamma * mdp.transitions @ v
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    raise DataError("value iteration did not converge")


def tabular_cql(mdp: SmallMdp, rng, n_updates: int = 100_000,
                alpha: float | None = 0.5) -> np.ndarray:
    """Classic Q-learning with uniform (s,a) sampling.

    A constant step size contracts geometrically on deterministic MDPs;
    pass alpha=None for visit-count decay (needed when transitions are
    stochastic).
    """
    q = np.zeros((mdp.n_states, mdp.n_actions))
    visits = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(n_updates):
        s = int(rng.integers(0, mdp.n_states))
        a = int(rng.integers(0, mdp.n_actions))
        s_next = int(rng.choice(mdp.n_states, p=mdp.transitions[s, a]))
        visits[s, a] += 1
        step = alpha if alpha is not None else visits[s, a] ** -0.7
        target = mdp.rewards[s, a] + mdp.gamma * q[s_next].max()
        q[s, a] += step * (target - q[s, a])
    return q


def ddql_on_mdp(mdp: SmallMdp, rng, episodes: int = 1200, horizon: int = 25,
                hidden: int = 24, lr: float = 2e-3, fine_lr: float = 2e-4,
                batch: int = 64, sync_every: int = 100) -> np.ndarray:
    """Train the neural double-Q learner on an explicit MDP with one-hot
    state features; returns the network's Q estimates on all states.

    The learning rate drops for the second half of training (RMSProp keeps
    a constant-size step, so annealing is what removes the noise floor);
    exploration decays linearly to 0.1.
    """
    n_s, n_a = mdp.n_states, mdp.n_actions
    eye = np.eye(n_s)
    widths = [n_s, hidden, n_a]
    qnet = DenseStack.create(widths, ["relu", "linear"], rng)
    target = DenseStack.create(widths, ["relu", "linear"], rng)
    optimizer = RmsProp(lr)
    buffer = ReplayBuffer(5000)
    all_true = np.ones(n_a, dtype=bool)
    step = 0
    total = episodes * horizon
    for episode in range(episodes):
        s = int(rng.integers(0, n_s))
        epsilon = max(0.1, 1.0 - 2.0 * episode / episodes)
        for _t in range(horizon):
            a = select_action(qnet, eye[s], all_true, epsilon, rng)
            s_next = int(rng.choice(n_s, p=mdp.transitions[s, a]))
            # continuing task: never terminal, always bootstrap
            buffer.push(t=0, level=s, demand=0.0, action=a,
                        reward=mdp.rewards[s, a], next_level=s_next,
                        next_demand=0.0, terminal=0.0)
            s = s_next
            step += 1
            optimizer.learning_rate = lr if step < total // 2 else fine_lr
            if len(buffer) >= batch:
                sample = buffer.sample(batch, rng)
                feats = eye[sample["level"].astype(np.int64)]
                next_feats = eye[sample["next_level"].astype(np.int64)]
                masks = np.ones((batch, n_a), dtype=bool)
                targets = td_targets(target, sample["reward"], next_feats,
                                     masks, sample["terminal"], mdp.gamma)
                update_q(qnet, optimizer, feats,
                         sample["action"].astype(np.int64), targets)
            if step % sync_every == 0:
                sync_target(qnet, target)
    q, _ = qnet.forward(eye)
    return q
