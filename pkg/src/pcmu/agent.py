"""Deep double Q-learning for the battery controller.

A dense Q-network maps the scaled state (battery level, demand) to one
value per discrete rate; a periodically copied target network stabilises
the TD targets.  Transitions go through a uniform replay buffer, actions
are epsilon-greedy over the feasible set, and infeasible actions are never
executed nor (by default) allowed inside the target max.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from pcmu import env as envmod
from pcmu.config import RunConfig
from pcmu.data import CheckpointBundle, LoadEpisode
from pcmu.errors import ConfigError, DataError
from pcmu.nn import DenseStack, RmsProp, mse_loss
from pcmu.privacy import Discretizer, build_backend, combined_loss


class ReplayBuffer:
    """Uniform-sampling ring buffer of transitions, FIFO eviction."""

    FIELDS = ("t", "level", "demand", "action", "reward",
              "next_level", "next_demand", "terminal")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data = {name: np.empty(capacity) for name in self.FIELDS}
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def push(self, **values) -> None:
        for name in self.FIELDS:
            self._data[name][self._next] = values[name]
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng) -> dict:
        idx = rng.integers(0, self._size, size=n)
        return {name: self._data[name][idx] for name in self.FIELDS}


def select_action(qnet: DenseStack, features: np.ndarray, mask: np.ndarray,
                  epsilon: float, rng) -> int:
    """Epsilon-greedy over the feasible actions; ties break to the lowest
    index and infeasible actions are never returned."""
    feasible = np.nonzero(mask)[0]
    if len(feasible) == 0:
        raise DataError("no feasible action (mask is empty)")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(feasible[rng.integers(0, len(feasible))])
    q, _ = qnet.forward(features[None, :])
    q = q[0].copy()
    q[~mask] = -np.inf
    return int(np.argmax(q))


def td_targets(target_net: DenseStack, rewards: np.ndarray,
               next_features: np.ndarray, next_masks: np.ndarray,
               terminals: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * max over feasible a of Q(s', a; target); r at terminals."""
    q_next, _ = target_net.forward(next_features)
    q_next = q_next.copy()
    q_next[~next_masks] = -np.inf
    best = q_next.max(axis=1)
    targets = rewards + gamma * best
    return np.where(terminals > 0.5, rewards, targets)


def update_q(qnet: DenseStack, optimizer: RmsProp, features: np.ndarray,
             actions: np.ndarray, targets: np.ndarray) -> float:
    """One RMSProp step on the squared TD error of the taken actions.

    Only the taken action's output head receives gradient.  Returns the
    pre-step loss.
    """
    q, cache = qnet.forward(features)
    rows = np.arange(len(actions))
    picked = q[rows, actions]
    loss, grad_on_picked = mse_loss(picked, targets)
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = grad_on_picked
    grads, _ = qnet.backward(cache, grad_out)
    optimizer.apply(qnet.arrays(), grads)
    return loss


def sync_target(qnet: DenseStack, target_net: DenseStack) -> None:
    target_net.set_arrays([a.copy() for a in qnet.arrays()])


@dataclass
class TrainLogRow:
    episode: int
    total_reward: float
    epsilon: float
    hnet_loss: float | None
    wall_ms: float


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    log: list = field(default_factory=list)


def epsilon_at(episode: int, n_episodes: int, start: float, end: float,
               decay_frac: float) -> float:
    """Linear decay from start to end over the first decay_frac of training."""
    horizon = max(1, int(round(n_episodes * decay_frac)))
    if episode >= horizon:
        return end
    return start + (end - start) * episode / horizon


def state_features(t: int, level: float, demand: float, scale: float,
                   horizon: int, clock: bool) -> np.ndarray:
    feats = [level, demand / scale]
    if clock:
        feats.append((t - 1) / horizon)
    return np.asarray(feats, dtype=np.float64)


def features_batch(ts, levels, demands, scale, horizon, clock) -> np.ndarray:
    cols = [levels, demands / scale]
    if clock:
        cols.append((ts - 1) / horizon)
    return np.stack(cols, axis=1)


class DdqlTrainer:
    """Owns the networks, buffers, and RNG for one training run."""

    def __init__(self, cfg: RunConfig, train_episodes: list):
        if not train_episodes:
            raise DataError("empty training split")
        self.cfg = cfg
        self.episodes = train_episodes
        # separate streams: the privacy estimator must not perturb the
        # trajectory stream (so runs are comparable across backends)
        main_ss, backend_ss = np.random.SeedSequence(cfg.train.seed).spawn(2)
        self.rng = np.random.default_rng(main_ss)
        self.backend_rng = np.random.default_rng(backend_ss)
        self.grid = envmod.action_grid(cfg.env, cfg.battery)
        scale = cfg.train.demand_scale
        if scale is None:
            scale = max(float(ep.y.max()) for ep in train_episodes)
        self.scale = scale if scale > 0 else 1.0
        n_features = 3 if cfg.train.clock_feature else 2
        widths = [n_features, cfg.train.hidden_width, cfg.train.hidden_width,
                  len(self.grid)]
        acts = ["relu", "relu", "linear"]
        self.qnet = DenseStack.create(widths, acts, self.rng)
        self.target = DenseStack.create(widths, acts, self.rng)
        self.optimizer = RmsProp(cfg.train.learning_rate, cfg.train.rms_decay,
                                 cfg.train.rms_epsilon)
        self.discretizer = Discretizer.from_episodes(train_episodes,
                                                     cfg.privacy.n_bins)
        self.backend = build_backend(cfg.privacy, self.discretizer,
                                     cfg.env.horizon_t, self.scale,
                                     self.backend_rng)
        self.buffer = ReplayBuffer(cfg.train.buffer_capacity)
        self._norm = self._signal_norms() if cfg.privacy.normalize_signals else None

    def _signal_norms(self):
        max_price = max(p for _, _, p in self.cfg.tariff.bands)
        g_norm = self.cfg.env.delta_t * max_price * max(
            abs(self.cfg.battery.b_min), self.cfg.battery.b_max)
        f_norm = np.log(self.cfg.privacy.n_bins)
        return g_norm if g_norm > 0 else 1.0, f_norm

    def _privacy_term(self, f_raw: float) -> float:
        # mi backends emit log-probabilities; flatness is already a penalty
        if self._norm is not None and self.backend.name != "flatness":
            return f_raw / self._norm[1]
        return f_raw

    def _cost_term(self, g: float) -> float:
        if self._norm is not None:
            return g / self._norm[0]
        return g

    def _masks_for(self, levels, demands) -> np.ndarray:
        return envmod.feasible_mask_batch(levels, demands, self.cfg.env,
                                          self.cfg.battery, self.grid)

    def _update_from_buffer(self) -> None:
        tc = self.cfg.train
        if len(self.buffer) < tc.batch_size:
            return
        batch = self.buffer.sample(tc.batch_size, self.rng)
        feats = features_batch(batch["t"], batch["level"], batch["demand"],
                               self.scale, self.cfg.env.horizon_t,
                               tc.clock_feature)
        next_feats = features_batch(batch["t"] + 1, batch["next_level"],
                                    batch["next_demand"], self.scale,
                                    self.cfg.env.horizon_t, tc.clock_feature)
        if tc.mask_target_max:
            next_masks = self._masks_for(batch["next_level"],
                                         batch["next_demand"])
        else:
            next_masks = np.ones((tc.batch_size, len(self.grid)), dtype=bool)
        targets = td_targets(self.target, batch["reward"], next_feats,
                             next_masks, batch["terminal"], tc.gamma)
        update_q(self.qnet, self.optimizer, feats,
                 batch["action"].astype(np.int64), targets)

    def train(self) -> TrainResult:
        cfg = self.cfg
        tc = cfg.train
        t_len = cfg.env.horizon_t
        lam = tc.lambda_weight
        step_count = 0
        log = []
        last_hnet_loss = None
        for episode in range(tc.episodes):
            t0 = time.perf_counter()
            eps = epsilon_at(episode, tc.episodes, tc.epsilon_start,
                             tc.epsilon_end, tc.epsilon_decay_frac)
            ep_data = self.episodes[self.rng.integers(0, len(self.episodes))]
            demand = ep_data.y
            level = 0.0
            staged = []   # transitions awaiting an episode-end leakage score
            g_seq = np.empty(t_len)
            z_seq = np.empty(t_len)
            total_reward = 0.0
            for t in range(1, t_len + 1):
                y_t = float(demand[t - 1])
                state = envmod.EnvState(t=t, level_l=level, demand_y=y_t)
                mask = envmod.feasible_mask(state, cfg.env, cfg.battery,
                                            self.grid)
                feats = state_features(t, level, y_t, self.scale, t_len,
                                       tc.clock_feature)
                a_idx = select_action(self.qnet, feats, mask, eps, self.rng)
                assert mask[a_idx], "infeasible action selected"
                b = float(self.grid[a_idx])
                z_t = y_t + b
                g_t = envmod.cost_signal(envmod.Action(b), t, cfg.tariff,
                                         cfg.env)
                f_t = self.backend.step_signal(t, y_t, z_t)
                next_y = float(demand[t]) if t < t_len else 0.0
                next_state, _ = envmod.step(state, envmod.Action(b), next_y,
                                            cfg.env, cfg.battery)
                terminal = 1.0 if t == t_len else 0.0
                if f_t is None:
                    staged.append((t, level, y_t, a_idx, g_t,
                                   next_state.level_l, next_y, terminal))
                else:
                    r = -combined_loss(self._cost_term(g_t),
                                       self._privacy_term(f_t), lam)
                    total_reward += r
                    self.buffer.push(t=t, level=level, demand=y_t,
                                     action=a_idx, reward=r,
                                     next_level=next_state.level_l,
                                     next_demand=next_y, terminal=terminal)
                g_seq[t - 1] = g_t
                z_seq[t - 1] = z_t
                level = next_state.level_l
                step_count += 1
                if step_count % tc.train_every == 0:
                    self._update_from_buffer()
                if step_count % tc.sync_every == 0:
                    sync_target(self.qnet, self.target)
                    loss = self.backend.refresh(self.backend_rng,
                                                step=step_count)
                    if loss is not None:
                        last_hnet_loss = loss
            f_seq = self.backend.finish_episode(demand.copy(), z_seq.copy())
            if staged:
                if f_seq is None:
                    raise DataError("backend returned no episode leakage for "
                                    "staged transitions")
                for (t, level_t, y_t, a_idx, g_t, next_level, next_y,
                     terminal) in staged:
                    r = -combined_loss(self._cost_term(g_t),
                                       self._privacy_term(float(f_seq[t - 1])),
                                       lam)
                    total_reward += r
                    self.buffer.push(t=t, level=level_t, demand=y_t,
                                     action=a_idx, reward=r,
                                     next_level=next_level,
                                     next_demand=next_y, terminal=terminal)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log.append(TrainLogRow(episode=episode, total_reward=total_reward,
                                   epsilon=eps, hnet_loss=last_hnet_loss,
                                   wall_ms=wall_ms))
        return TrainResult(bundle=self._bundle(), log=log)

    def _bundle(self) -> CheckpointBundle:
        cfg_echo = self.cfg.replace(
            train=dataclasses.replace(self.cfg.train,
                                      demand_scale=self.scale)).to_dict()
        params = {"qnet": self.qnet.arrays(), "target": self.target.arrays()}
        params.update(self.backend.param_groups())
        opt = {"qnet": self.optimizer.state_arrays()}
        opt.update(self.backend.opt_groups())
        return CheckpointBundle(
            config=cfg_echo, params=params, opt_state=opt,
            rng_state={"main": self.rng.bit_generator.state,
                       "backend": self.backend_rng.bit_generator.state},
            meta={"lambda": lam_val(self.cfg), "backend": self.backend.name,
                  "episodes": self.cfg.train.episodes,
                  "demand_scale": self.scale,
                  "n_actions": len(self.grid)})


def lam_val(cfg: RunConfig) -> float:
    return cfg.train.lambda_weight


def qnet_from_bundle(bundle: CheckpointBundle) -> tuple:
    """Rebuild the greedy Q-network and its config from a checkpoint."""
    cfg = RunConfig.from_dict(bundle.config)
    grid = envmod.action_grid(cfg.env, cfg.battery)
    n_features = 3 if cfg.train.clock_feature else 2
    widths = [n_features, cfg.train.hidden_width, cfg.train.hidden_width,
              len(grid)]
    qnet = DenseStack.create(widths, ["relu", "relu", "linear"],
                             np.random.default_rng(0))
    qnet.set_arrays(bundle.params["qnet"])
    return qnet, cfg


def greedy_policy(qnet: DenseStack, cfg: RunConfig):
    """Deterministic policy for env.rollout from a trained network."""
    scale = cfg.train.demand_scale
    if scale is None or scale <= 0:
        raise ConfigError("checkpoint carries no demand scale")

    def policy(state, mask, rng):
        feats = state_features(state.t, state.level_l, state.demand_y, scale,
                               cfg.env.horizon_t, cfg.train.clock_feature)
        return select_action(qnet, feats, mask, 0.0, rng)

    return policy


def train_run(cfg: RunConfig, train_episodes: list) -> TrainResult:
    return DdqlTrainer(cfg, train_episodes).train()
