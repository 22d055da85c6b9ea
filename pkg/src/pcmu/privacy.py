"""Privacy-leakage signals and the combined reward.

Three interchangeable signals drive the controller:

* flatness: |z - target|/target, the naive constant-load penalty;
* mi-iid: log P(bin(y_t) | z_t) from a feedforward estimator, evaluated
  causally at every step;
* mi-general: log P(bin(y_t) | y^{t-1}, z^T) from a recurrent estimator
  whose conditioning set covers the whole grid-load sequence.

The estimators ("H-networks") train by cross-entropy on (demand, grid)
pairs collected in a second replay buffer, so their converged loss is an
upper estimate of the conditional entropy in nats.  The per-step loss fed
to the agent is lam*g + (1-lam)*f where g is the electricity-cost signal
and f the leakage signal; minimising it simultaneously cuts cost and
pushes the demand's conditional log-likelihood down (leakage values are
log-probabilities, <= 0, so smaller means better hidden).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcmu.config import PrivacySection
from pcmu.errors import ConfigError, DataError
from pcmu.nn import DenseStack, LstmStack, RmsProp, softmax, softmax_xent


def flatness_signal(z, target_kw: float):
    """|z - target| / target (scalar or array), >= 0."""
    if target_kw <= 0:
        raise ConfigError("flatness target must be positive")
    return np.abs(np.asarray(z, dtype=np.float64) - target_kw) / target_kw


def combined_loss(g, f, lam: float):
    """lam*g + (1-lam)*f; the agent's reward is the negative of this."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0,1], got {lam}")
    return lam * g + (1.0 - lam) * f


@dataclass(frozen=True)
class Discretizer:
    """Uniform bins over [lo, hi]; out-of-range values clamp to end bins."""

    n_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("need at least 2 bins")
        if not self.hi > self.lo:
            raise ConfigError("bin range must have positive width")

    @classmethod
    def from_episodes(cls, episodes, n_bins: int) -> "Discretizer":
        hi = max(float(ep.y.max()) for ep in episodes)
        if hi <= 0:
            hi = 1.0
        return cls(n_bins=n_bins, lo=0.0, hi=hi)

    def bin_index(self, values):
        width = (self.hi - self.lo) / self.n_bins
        idx = np.floor((np.asarray(values, dtype=np.float64) - self.lo) / width)
        return np.clip(idx, 0, self.n_bins - 1).astype(np.int64)


class EpisodeBuffer:
    """Ring buffer of whole (y, z) episode pairs, FIFO eviction."""

    def __init__(self, capacity: int, horizon: int):
        self.capacity = capacity
        self.horizon = horizon
        self._y = np.empty((capacity, horizon))
        self._z = np.empty((capacity, horizon))
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def push(self, y: np.ndarray, z: np.ndarray) -> None:
        if len(y) != self.horizon or len(z) != self.horizon:
            raise DataError("episode length does not match buffer horizon")
        self._y[self._next] = y
        self._z[self._next] = z
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng):
        idx = rng.integers(0, self._size, size=n)
        return self._y[idx], self._z[idx]


class StepBuffer:
    """Ring buffer of per-step (y, z) pairs for the i.i.d. estimator."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._y = np.empty(capacity)
        self._z = np.empty(capacity)
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def push_episode(self, y: np.ndarray, z: np.ndarray) -> None:
        for yv, zv in zip(y, z):
            self._y[self._next] = yv
            self._z[self._next] = zv
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng):
        idx = rng.integers(0, self._size, size=n)
        return self._y[idx], self._z[idx]


@dataclass
class PrivacyTable:
    """Per-timestep leakage estimate: values[t-1] is the buffer-averaged
    log-probability of the demand bin at step t (nats, <= 0)."""

    values: np.ndarray
    refresh_step: int


class HNetFeedforward:
    """P(bin(y) | z) as a dense softmax net on the scaled grid load.

    The input carries both the scalar and its bin one-hot; the latter
    makes near-identity grid loads exploitable within a handful of
    updates instead of thousands.
    """

    def __init__(self, cfg: PrivacySection, scale: float, rng,
                 discretizer: "Discretizer | None" = None):
        self.n_bins = cfg.n_bins
        widths = [1 + cfg.n_bins, cfg.hnet_hidden_width,
                  cfg.hnet_hidden_width, cfg.n_bins]
        self.net = DenseStack.create(widths, ["relu", "relu", "linear"], rng)
        self.optimizer = RmsProp(cfg.hnet_learning_rate)
        self.scale = scale
        self.discretizer = discretizer or Discretizer(cfg.n_bins, 0.0, scale)
        self.prob_floor = cfg.prob_floor

    def _features(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        onehot = np.eye(self.n_bins)[self.discretizer.bin_index(z)]
        return np.concatenate([(z / self.scale)[:, None], onehot], axis=1)

    def train_step(self, z, y_bins) -> float:
        logits, cache = self.net.forward(self._features(z))
        loss, grad = softmax_xent(logits, y_bins)
        grads, _ = self.net.backward(cache, grad)
        self.optimizer.apply(self.net.arrays(), grads)
        return loss

    def log_prob(self, y_bins, z) -> np.ndarray:
        """log P(bin | z) with the probability floored before the log."""
        logits, _ = self.net.forward(self._features(z))
        probs = softmax(logits)
        y_bins = np.atleast_1d(np.asarray(y_bins, dtype=np.int64))
        p = probs[np.arange(len(y_bins)), y_bins]
        return np.log(np.maximum(p, self.prob_floor))


class HNetRecurrent:
    """P(bin(y_t) | y^{t-1}, z^T): a bidirectional stack over the whole
    grid-load sequence plus a strictly causal forward stack over the
    one-step-shifted demand history, feeding a per-step softmax head.

    Feeding the demand into the bidirectional stack would leak future
    demand into the conditioning set, so the two streams stay separate.
    The head also receives the binned current grid load and binned
    previous demand directly (both inside the conditioning set); without
    that shortcut the recurrent states have to carry fine magnitude
    information and the estimator converges far too slowly to act as a
    competent adversary.
    """

    def __init__(self, cfg: PrivacySection, horizon: int, scale: float,
                 rng, discretizer: "Discretizer | None" = None):
        width = cfg.hnet_lstm_width
        self.n_bins = cfg.n_bins
        self.z_stream = LstmStack.create(1, width, 2, bidirectional=True, rng=rng)
        self.y_stream = LstmStack.create(1, width, 2, bidirectional=False, rng=rng)
        self.discretizer = discretizer or Discretizer(cfg.n_bins, 0.0, scale)
        head_in = (self.z_stream.out_width + self.y_stream.out_width
                   + 2 * cfg.n_bins)
        self.head = DenseStack.create([head_in, 64, cfg.n_bins],
                                      ["relu", "linear"], rng)
        self.optimizer = RmsProp(cfg.hnet_learning_rate)
        self.horizon = horizon
        self.scale = scale
        self.prob_floor = cfg.prob_floor

    def arrays(self):
        return (self.z_stream.arrays() + self.y_stream.arrays()
                + self.head.arrays())

    def _inputs(self, y: np.ndarray, z: np.ndarray):
        """(batch, T) pairs -> time-major scaled streams + head features."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        z_in = (z.T / self.scale)[:, :, None]
        y_shift = np.concatenate(
            [np.zeros((y.shape[0], 1)), y[:, :-1]], axis=1)
        y_in = (y_shift.T / self.scale)[:, :, None]
        t_len, batch = z_in.shape[0], z_in.shape[1]
        eye = np.eye(self.n_bins)
        z_onehot = eye[self.discretizer.bin_index(z.T)]       # (T, B, K)
        y_prev_onehot = eye[self.discretizer.bin_index(y_shift.T)]
        return (np.ascontiguousarray(y_in), np.ascontiguousarray(z_in),
                np.concatenate([z_onehot, y_prev_onehot], axis=2))

    def _logits(self, y, z):
        y_in, z_in, onehots = self._inputs(y, z)
        z_out, z_cache = self.z_stream.forward(z_in)
        y_out, y_cache = self.y_stream.forward(y_in)
        joint = np.concatenate([z_out, y_out, onehots], axis=2)
        t_len, batch, width = joint.shape
        logits, head_cache = self.head.forward(joint.reshape(t_len * batch, width))
        return logits, (z_cache, y_cache, head_cache, (t_len, batch, width))

    def train_step(self, y, z, y_bins) -> float:
        """One cross-entropy step on a batch of episodes; y_bins (batch, T)."""
        logits, caches = self._logits(y, z)
        z_cache, y_cache, head_cache, (t_len, batch, width) = caches
        targets = np.asarray(y_bins, dtype=np.int64).T.reshape(-1)
        loss, grad = softmax_xent(logits, targets)
        head_grads, joint_grad = self.head.backward(head_cache, grad)
        joint_grad = joint_grad.reshape(t_len, batch, width)
        zw = self.z_stream.out_width
        yw = self.y_stream.out_width
        z_grads, _ = self.z_stream.backward(z_cache, joint_grad[:, :, :zw])
        y_grads, _ = self.y_stream.backward(y_cache,
                                            joint_grad[:, :, zw:zw + yw])
        self.optimizer.apply(self.arrays(), z_grads + y_grads + head_grads)
        return loss

    def log_prob_episodes(self, y, z, y_bins) -> np.ndarray:
        """Per-step floored log-probabilities, shape (batch, T)."""
        logits, _ = self._logits(y, z)
        probs = softmax(logits)
        targets = np.asarray(np.atleast_2d(y_bins), dtype=np.int64).T.reshape(-1)
        p = probs[np.arange(len(targets)), targets]
        out = np.log(np.maximum(p, self.prob_floor))
        batch = np.atleast_2d(y_bins).shape[0]
        return out.reshape(self.horizon, batch).T


def leakage_table(hnet: HNetRecurrent, buffer: EpisodeBuffer,
                  discretizer: Discretizer, n_sample: int, rng,
                  refresh_step: int = 0) -> PrivacyTable:
    """Buffer-averaged per-step leakage: mean over sampled episodes of the
    log-probability the estimator assigns to the realised demand bin."""
    if len(buffer) == 0:
        raise DataError("episode buffer is empty")
    y, z = buffer.sample(min(n_sample, len(buffer)), rng)
    lp = hnet.log_prob_episodes(y, z, discretizer.bin_index(y))
    return PrivacyTable(values=lp.mean(axis=0), refresh_step=refresh_step)


class FlatnessBackend:
    """Constant-target signal; needs no estimator and no second buffer."""

    name = "flatness"

    def __init__(self, cfg: PrivacySection):
        self.target = cfg.flat_target_kw

    def step_signal(self, t, y_t, z_t):
        return float(flatness_signal(z_t, self.target))

    def finish_episode(self, y, z):
        return None

    def refresh(self, rng, step: int = 0):
        return None

    def param_groups(self):
        return {}

    def opt_groups(self):
        return {}


class IidMiBackend:
    """Pointwise log P(bin(y_t) | z_t); action-dependent through z_t."""

    name = "mi-iid"

    def __init__(self, cfg: PrivacySection, discretizer: Discretizer,
                 scale: float, rng):
        self.cfg = cfg
        self.discretizer = discretizer
        self.hnet = HNetFeedforward(cfg, scale, rng, discretizer)
        self.buffer = StepBuffer(cfg.step_buffer_capacity)

    def step_signal(self, t, y_t, z_t):
        b = self.discretizer.bin_index(y_t)
        return float(self.hnet.log_prob(b, z_t)[0])

    def finish_episode(self, y, z):
        self.buffer.push_episode(y, z)
        return None

    def refresh(self, rng, step: int = 0) -> float | None:
        if len(self.buffer) == 0:
            return None
        losses = []
        for _ in range(self.cfg.refresh_batches):
            yb, zb = self.buffer.sample(self.cfg.step_batch_size, rng)
            losses.append(self.hnet.train_step(
                zb, self.discretizer.bin_index(yb)))
        return float(np.mean(losses))

    def param_groups(self):
        return {"hnet": self.hnet.net.arrays()}

    def opt_groups(self):
        return {"hnet": self.hnet.optimizer.state_arrays()}


class GeneralMiBackend:
    """Sequence-conditioned leakage from the recurrent estimator.

    Two reward modes: "episode" scores each finished episode with its own
    per-step log-probabilities (conditioning on the realised trajectory,
    evaluated once the full grid-load sequence exists), while "table"
    looks up the latest buffer-averaged per-step estimate.  The table mode
    follows the training loop's coarse refresh cadence but carries no
    action-level credit, so "episode" is the default.
    """

    name = "mi-general"

    def __init__(self, cfg: PrivacySection, discretizer: Discretizer,
                 horizon: int, scale: float, rng):
        self.cfg = cfg
        self.discretizer = discretizer
        self.hnet = HNetRecurrent(cfg, horizon, scale, rng, discretizer)
        self.buffer = EpisodeBuffer(cfg.episode_buffer_capacity, horizon)
        self.table = PrivacyTable(values=np.full(horizon, -np.log(cfg.n_bins)),
                                  refresh_step=0)
        self.mode = cfg.general_reward_mode

    def step_signal(self, t, y_t, z_t):
        if self.mode == "table":
            return float(self.table.values[t - 1])
        return None  # episode mode scores at episode end

    def finish_episode(self, y, z):
        f_seq = None
        if self.mode == "episode":
            lp = self.hnet.log_prob_episodes(
                y[None, :], z[None, :],
                self.discretizer.bin_index(y)[None, :])
            f_seq = lp[0]
        self.buffer.push(y, z)
        return f_seq

    def refresh(self, rng, step: int = 0) -> float | None:
        if len(self.buffer) == 0:
            return None
        losses = []
        for _ in range(self.cfg.refresh_batches):
            yb, zb = self.buffer.sample(
                min(self.cfg.episode_batch_size, len(self.buffer)), rng)
            losses.append(self.hnet.train_step(
                yb, zb, self.discretizer.bin_index(yb)))
        if self.mode == "table":
            self.table = leakage_table(self.hnet, self.buffer,
                                       self.discretizer,
                                       self.cfg.table_sample_episodes, rng,
                                       refresh_step=step)
        return float(np.mean(losses))

    def param_groups(self):
        return {"hnet": self.hnet.arrays()}

    def opt_groups(self):
        return {"hnet": self.hnet.optimizer.state_arrays()}


def build_backend(cfg: PrivacySection, discretizer: Discretizer,
                  horizon: int, scale: float, rng):
    if cfg.backend == "flatness":
        return FlatnessBackend(cfg)
    if cfg.backend == "mi-iid":
        return IidMiBackend(cfg, discretizer, scale, rng)
    if cfg.backend == "mi-general":
        return GeneralMiBackend(cfg, discretizer, horizon, scale, rng)
    raise ConfigError(f"unknown privacy backend {cfg.backend!r}")
