import numpy as np
import pytest

from pcmu.config import PrivacySection
from pcmu.errors import ConfigError
from pcmu.privacy import (Discretizer, EpisodeBuffer, GeneralMiBackend,
                          HNetFeedforward, HNetRecurrent, IidMiBackend,
                          StepBuffer, combined_loss, flatness_signal,
                          leakage_table)


class TestFlatness:
    def test_trivials(self):
        assert flatness_signal(0.7, 0.7) == 0.0
        assert flatness_signal(1.4, 0.7) == pytest.approx(1.0)
        assert flatness_signal(0.0, 0.7) == pytest.approx(1.0)

    def test_linear_masking_scale_identity(self, rng):
        """For z = beta*y + target the mean signal is |beta|*mean|y|/target,
        exactly, for every beta."""
        y = rng.uniform(0, 4, size=(30, 96))
        target = 0.7
        for beta in (0.0, 0.2, 1.0):
            z = beta * y + target
            mean_sig = float(np.mean(flatness_signal(z, target)))
            expected = abs(beta) * float(np.mean(np.abs(y))) / target
            assert mean_sig == pytest.approx(expected, abs=1e-12)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            flatness_signal(1.0, 0.0)


class TestCombinedLoss:
    def test_endpoints(self):
        assert combined_loss(0.3, 9.9, 1.0) == pytest.approx(0.3)
        assert combined_loss(9.9, 0.4, 0.0) == pytest.approx(0.4)

    def test_midpoint(self):
        assert combined_loss(0.2, 0.4, 0.5) == pytest.approx(0.3)

    def test_lambda_range(self):
        with pytest.raises(ConfigError):
            combined_loss(0.0, 0.0, 1.5)


class TestDiscretizer:
    def test_edges_clamp(self):
        d = Discretizer(n_bins=4, lo=0.0, hi=4.0)
        assert d.bin_index(-1.0) == 0
        assert d.bin_index(99.0) == 3
        assert np.array_equal(d.bin_index([0.5, 1.5, 2.5, 3.5]), [0, 1, 2, 3])

    def test_from_episodes(self):
        class Ep:
            def __init__(self, y):
                self.y = np.asarray(y)
        d = Discretizer.from_episodes([Ep([1.0, 3.0]), Ep([2.0])], 8)
        assert d.hi == 3.0 and d.lo == 0.0 and d.n_bins == 8


class TestBuffers:
    def test_episode_fifo_eviction(self, rng):
        buf = EpisodeBuffer(capacity=3, horizon=4)
        for i in range(5):
            buf.push(np.full(4, float(i)), np.zeros(4))
        assert len(buf) == 3
        kept = {int(buf._y[i, 0]) for i in range(3)}
        assert kept == {2, 3, 4}

    def test_step_buffer_capacity(self):
        buf = StepBuffer(capacity=10)
        buf.push_episode(np.arange(25.0), np.arange(25.0))
        assert len(buf) == 10


def _cfg(**kw) -> PrivacySection:
    base = dict(n_bins=2, hnet_hidden_width=24, hnet_lstm_width=8,
                refresh_batches=2, episode_batch_size=8, step_batch_size=64)
    base.update(kw)
    return PrivacySection(**base)


class TestFeedforwardEstimator:
    def test_zeroed_head_gives_uniform_loss(self, rng):
        cfg = _cfg(n_bins=32)
        net = HNetFeedforward(cfg, scale=1.0, rng=rng)
        net.net.weights[-1][...] = 0.0
        net.net.biases[-1][...] = 0.0
        z = rng.uniform(0, 1, size=64)
        bins = rng.integers(0, 32, size=64)
        logits, _ = net.net.forward(net._features(z))
        from pcmu.nn import softmax_xent
        loss, _ = softmax_xent(logits, bins)
        assert loss == pytest.approx(np.log(32), abs=1e-9)

    def test_deterministic_map_reaches_low_entropy(self, rng):
        """y a deterministic function of z: conditional entropy 0."""
        cfg = _cfg()
        disc = Discretizer(n_bins=2, lo=0.0, hi=2.0)
        net = HNetFeedforward(cfg, scale=2.0, rng=rng)
        z = rng.uniform(0, 2, size=4000)
        y = np.where(z > 1.0, 1.5, 0.5)   # bin(y) = 1 iff z > 1
        loss = None
        for _ in range(400):
            idx = rng.integers(0, len(z), size=128)
            loss = net.train_step(z[idx], disc.bin_index(y[idx]))
        assert loss < 0.1

    def test_known_conditional_entropy_ln2(self, rng):
        """y = bin(z) xor fair coin: H(Y|Z) = ln 2 exactly."""
        cfg = _cfg()
        disc = Discretizer(n_bins=2, lo=0.0, hi=2.0)
        net = HNetFeedforward(cfg, scale=2.0, rng=rng)
        z = rng.uniform(0, 2, size=6000)
        coin = rng.integers(0, 2, size=6000)
        y_bin = (disc.bin_index(z) ^ coin).astype(np.int64)
        y = np.where(y_bin == 1, 1.5, 0.5)
        losses = []
        for step in range(600):
            idx = rng.integers(0, len(z), size=128)
            losses.append(net.train_step(z[idx], disc.bin_index(y[idx])))
        converged = float(np.mean(losses[-50:]))
        assert converged == pytest.approx(np.log(2), abs=0.05)

    def test_monotone_in_probability(self, rng):
        cfg = _cfg(n_bins=4)
        net = HNetFeedforward(cfg, scale=1.0, rng=rng)
        lp = net.log_prob([0, 1, 2, 3], [0.5, 0.5, 0.5, 0.5])
        probs = np.exp(lp)
        order = np.argsort(probs)
        assert np.all(np.diff(lp[order]) >= 0)

    def test_floor_prevents_minus_infinity(self, rng):
        cfg = _cfg(n_bins=2)
        net = HNetFeedforward(cfg, scale=1.0, rng=rng)
        net.net.biases[-1][...] = np.array([200.0, -200.0])
        lp = net.log_prob([1], [0.5])
        assert np.isfinite(lp).all()
        assert lp[0] >= np.log(cfg.prob_floor) - 1e-9


class TestRecurrentEstimator:
    def test_causality_of_demand_stream(self, rng):
        """Perturbing y_s leaves every output at steps <= s untouched."""
        cfg = _cfg(n_bins=4)
        horizon = 12
        net = HNetRecurrent(cfg, horizon, scale=1.0, rng=rng)
        y = rng.uniform(0, 1, size=(1, horizon))
        z = rng.uniform(0, 1, size=(1, horizon))
        bins = np.zeros((1, horizon), dtype=np.int64)
        base = net.log_prob_episodes(y, z, bins)[0]
        for s in range(horizon):
            y2 = y.copy()
            y2[0, s] += 10.0
            pert = net.log_prob_episodes(y2, z, bins)[0]
            assert np.max(np.abs(pert[:s + 1] - base[:s + 1])) <= 1e-12
            # and the shifted stream must actually matter afterwards
            if s < horizon - 1:
                assert np.max(np.abs(pert[s + 1:] - base[s + 1:])) > 0

    def test_grid_stream_is_anticausal(self, rng):
        """The grid-load stream may (and does) see the whole sequence."""
        cfg = _cfg(n_bins=4)
        net = HNetRecurrent(cfg, 8, scale=1.0, rng=rng)
        y = rng.uniform(0, 1, size=(1, 8))
        z = rng.uniform(0, 1, size=(1, 8))
        bins = np.zeros((1, 8), dtype=np.int64)
        base = net.log_prob_episodes(y, z, bins)[0]
        z2 = z.copy()
        z2[0, -1] += 10.0
        pert = net.log_prob_episodes(y, z2, bins)[0]
        assert np.abs(pert[0] - base[0]) > 0

    def test_frozen_buffer_loss_trailing_average_decreases(self, rng):
        cfg = _cfg(n_bins=4, episode_batch_size=8)
        horizon = 16
        net = HNetRecurrent(cfg, horizon, scale=1.0, rng=rng)
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        buf = EpisodeBuffer(capacity=32, horizon=horizon)
        for _ in range(32):
            y = rng.uniform(0, 1, size=horizon)
            buf.push(y, y + 0.1 * rng.normal(size=horizon))
        losses = []
        for _ in range(120):
            yb, zb = buf.sample(8, rng)
            losses.append(net.train_step(yb, zb, disc.bin_index(yb)))
        first = float(np.mean(losses[:30]))
        last = float(np.mean(losses[-30:]))
        assert last <= first

    def test_gibbs_inequality_on_known_fixture(self, rng):
        """Converged cross-entropy cannot undercut the true entropy ln 2."""
        cfg = _cfg(n_bins=2, episode_batch_size=16)
        horizon = 8
        net = HNetRecurrent(cfg, horizon, scale=1.0, rng=rng)
        disc = Discretizer(n_bins=2, lo=0.0, hi=1.0)
        buf = EpisodeBuffer(capacity=256, horizon=horizon)
        for _ in range(256):
            y_bin = rng.integers(0, 2, size=horizon)
            y = np.where(y_bin == 1, 0.75, 0.25)
            z = rng.uniform(0, 1, size=horizon)   # independent of y
            buf.push(y, z)
        losses = [net.train_step(*_sampled(buf, disc, rng, 16))
                  for _ in range(150)]
        converged = float(np.mean(losses[-30:]))
        assert converged >= np.log(2) - 0.05


def _sampled(buf, disc, rng, n):
    yb, zb = buf.sample(n, rng)
    return yb, zb, disc.bin_index(yb)


class TestLeakageTable:
    def test_uniform_head_gives_log_nbins(self, rng):
        cfg = _cfg(n_bins=8)
        horizon = 10
        net = HNetRecurrent(cfg, horizon, scale=1.0, rng=rng)
        net.head.weights[-1][...] = 0.0
        net.head.biases[-1][...] = 0.0
        buf = EpisodeBuffer(capacity=4, horizon=horizon)
        for _ in range(4):
            buf.push(rng.uniform(0, 1, size=horizon),
                     rng.uniform(0, 1, size=horizon))
        disc = Discretizer(n_bins=8, lo=0.0, hi=1.0)
        table = leakage_table(net, buf, disc, 4, rng)
        assert table.values.shape == (horizon,)
        assert np.allclose(table.values, -np.log(8), atol=1e-12)

    def test_entries_nonpositive_finite(self, rng):
        cfg = _cfg(n_bins=4)
        horizon = 6
        net = HNetRecurrent(cfg, horizon, scale=1.0, rng=rng)
        buf = EpisodeBuffer(capacity=8, horizon=horizon)
        for _ in range(8):
            buf.push(rng.uniform(0, 1, size=horizon),
                     rng.uniform(0, 1, size=horizon))
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        table = leakage_table(net, buf, disc, 8, rng)
        assert np.all(table.values <= 0.0)
        assert np.all(np.isfinite(table.values))


class TestBackends:
    def test_iid_signal_is_log_probability(self, rng):
        cfg = _cfg(n_bins=4)
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        backend = IidMiBackend(cfg, disc, scale=1.0, rng=rng)
        f = backend.step_signal(1, 0.5, 0.6)
        assert f <= 0.0
        assert backend.finish_episode(np.full(4, 0.5), np.full(4, 0.6)) is None
        assert len(backend.buffer) == 4

    def test_general_episode_mode_scores_at_end(self, rng):
        cfg = _cfg(n_bins=4, general_reward_mode="episode")
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        backend = GeneralMiBackend(cfg, disc, horizon=6, scale=1.0, rng=rng)
        assert backend.step_signal(1, 0.5, 0.6) is None
        f_seq = backend.finish_episode(rng.uniform(0, 1, 6),
                                       rng.uniform(0, 1, 6))
        assert f_seq.shape == (6,)
        assert np.all(f_seq <= 0.0)

    def test_general_table_mode_uses_table(self, rng):
        cfg = _cfg(n_bins=4, general_reward_mode="table")
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        backend = GeneralMiBackend(cfg, disc, horizon=6, scale=1.0, rng=rng)
        f = backend.step_signal(3, 0.5, 0.6)
        assert f == pytest.approx(-np.log(4))   # initial table is uniform
        assert backend.finish_episode(rng.uniform(0, 1, 6),
                                      rng.uniform(0, 1, 6)) is None
        loss = backend.refresh(rng, step=7)
        assert loss is not None
        assert backend.table.refresh_step == 7

    def test_refresh_on_empty_buffer_is_noop(self, rng):
        cfg = _cfg(n_bins=4)
        disc = Discretizer(n_bins=4, lo=0.0, hi=1.0)
        backend = GeneralMiBackend(cfg, disc, horizon=6, scale=1.0, rng=rng)
        assert backend.refresh(rng) is None
