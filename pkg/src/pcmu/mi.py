"""Post-hoc dependence measures and spectra.

The k-nearest-neighbour mutual-information estimator here is the classic
first variant: I = psi(k) + psi(N) - <psi(n_x + 1) + psi(n_y + 1)> with
max-norm balls, where n_x / n_y count strictly-closer marginal neighbours
within the joint-space k-NN radius.  A tiny uniform jitter breaks the
distance ties that quantised load data would otherwise create.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from pcmu.errors import ConfigError, DataError
from pcmu.privacy import flatness_signal


@dataclass(frozen=True)
class KsgConfig:
    k_neighbors: int = 4
    jitter_amplitude: float = 1e-10

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ConfigError("k must be >= 1")
        if self.jitter_amplitude < 0:
            raise ConfigError("jitter amplitude must be >= 0")


def ksg_mi(samples_x: np.ndarray, samples_y: np.ndarray,
           config: KsgConfig = KsgConfig(), rng=None) -> float:
    """Mutual information estimate in nats between paired samples.

    samples_x: (N, d1), samples_y: (N, d2); 1-D inputs are treated as one
    column.  Deterministic for a given rng seed (default seed 0).
    """
    x = np.asarray(samples_x, dtype=np.float64)
    y = np.asarray(samples_y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise DataError("x and y must have the same sample count")
    n = x.shape[0]
    k = config.k_neighbors
    if n <= k:
        raise DataError(f"need more than k={k} samples, got {n}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("samples must be finite")
    if rng is None:
        rng = np.random.default_rng(0)
    if config.jitter_amplitude > 0:
        x = x + rng.uniform(-config.jitter_amplitude,
                            config.jitter_amplitude, size=x.shape)
        y = y + rng.uniform(-config.jitter_amplitude,
                            config.jitter_amplitude, size=y.shape)
    if (x.std(axis=0) == 0).any() or (y.std(axis=0) == 0).any():
        raise DataError("zero-variance input after jitter")
    # standardise each coordinate: the shared-radius estimator needs the
    # marginals on a common scale, otherwise the within-radius counts of a
    # compressed marginal saturate and the estimate collapses
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    y = (y - y.mean(axis=0)) / y.std(axis=0)
    joint = np.concatenate([x, y], axis=1)
    tree_joint = cKDTree(joint)
    # distance to the k-th neighbour (excluding self) in max-norm
    dist, _ = tree_joint.query(joint, k=k + 1, p=np.inf)
    eps = dist[:, k]
    # strictly-inside counts in each marginal, minus self
    radius = np.nextafter(eps, 0.0)
    n_x = cKDTree(x).query_ball_point(x, r=radius, p=np.inf,
                                      return_length=True) - 1
    n_y = cKDTree(y).query_ball_point(y, r=radius, p=np.inf,
                                      return_length=True) - 1
    return float(digamma(k) + digamma(n)
                 - np.mean(digamma(n_x + 1) + digamma(n_y + 1)))


def exact_discrete_mi(joint: np.ndarray) -> float:
    """Exact MI in nats of a finite joint probability matrix p(x, y)."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or (p < -1e-12).any() or not np.isfinite(p).all():
        raise DataError("joint must be a nonnegative 2-D probability table")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DataError(f"joint must sum to 1, got {p.sum()}")
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mask = p > 0
    ratio = p[mask] / (px[:, None] * py[None, :])[mask]
    return float(np.sum(p[mask] * np.log(ratio)))


@dataclass(frozen=True)
class MarkovChainSpec:
    """A stationary-kernel Markov source observed through a memoryless
    channel: p0 (m,), transition (m,m), channel p(z|y) (m,n), horizon T."""

    p0: np.ndarray
    transition: np.ndarray
    channel: np.ndarray
    horizon: int

    def __post_init__(self):
        p0 = np.asarray(self.p0, dtype=np.float64)
        tr = np.asarray(self.transition, dtype=np.float64)
        ch = np.asarray(self.channel, dtype=np.float64)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "transition", tr)
        object.__setattr__(self, "channel", ch)
        m = p0.shape[0]
        if tr.shape != (m, m) or ch.shape[0] != m:
            raise ConfigError("chain shapes are inconsistent")
        for name, arr in (("p0", p0[None, :]), ("transition", tr),
                          ("channel", ch)):
            if (arr < 0).any() or not np.allclose(arr.sum(axis=1), 1.0,
                                                  atol=1e-9):
                raise DataError(f"{name} rows must be distributions")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if (m ** self.horizon) * (ch.shape[1] ** self.horizon) > 4_000_000:
            raise DataError("alphabet too large for exact enumeration")


def iid_lower_bound_check(spec: MarkovChainSpec) -> tuple:
    """Exact (joint sequence MI, average per-step MI) by enumeration.

    The joint MI of the sequences can never fall below the per-step
    average: that inequality is asserted before returning.
    """
    m = spec.p0.shape[0]
    n = spec.channel.shape[1]
    t_len = spec.horizon
    y_seqs = list(itertools.product(range(m), repeat=t_len))
    z_seqs = list(itertools.product(range(n), repeat=t_len))
    joint = np.zeros((len(y_seqs), len(z_seqs)))
    for yi, ys in enumerate(y_seqs):
        py = spec.p0[ys[0]]
        for a, b in zip(ys, ys[1:]):
            py *= spec.transition[a, b]
        if py == 0.0:
            continue
        for zi, zs in enumerate(z_seqs):
            pz = 1.0
            for yv, zv in zip(ys, zs):
                pz *= spec.channel[yv, zv]
            joint[yi, zi] = py * pz
    joint_mi = exact_discrete_mi(joint)

    per_step = []
    marginal = spec.p0.copy()
    for _t in range(t_len):
        step_joint = marginal[:, None] * spec.channel
        per_step.append(exact_discrete_mi(step_joint))
        marginal = marginal @ spec.transition
    avg = float(np.mean(per_step))
    if joint_mi < avg - 1e-9:
        raise DataError("sequence MI fell below the per-step average; "
                        "enumeration is inconsistent")
    return joint_mi, avg


def flatness_pathology(beta_list, load_episodes, delta_c: float = 0.7,
                       ksg_config: KsgConfig = KsgConfig(), rng=None) -> list:
    """Score the linear masking family z_t = beta*y_t + delta_c.

    Returns one row per beta: (beta, mean flatness signal, KSG MI between
    the demand and grid-load episode vectors).  The flatness signal scales
    with |beta| while the dependence between the sequences does not: any
    beta != 0 leaves the demand perfectly recoverable.
    """
    if len(load_episodes) == 0:
        raise DataError("no load episodes given")
    y_mat = np.stack([np.asarray(ep.y, dtype=np.float64)
                      for ep in load_episodes])
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    for beta in beta_list:
        z_mat = beta * y_mat + delta_c
        mean_flat = float(np.mean(flatness_signal(z_mat, delta_c)))
        mi = ksg_mi(y_mat, z_mat, ksg_config, rng=rng)
        rows.append((float(beta), mean_flat, mi))
    return rows


@dataclass(frozen=True)
class PsdConfig:
    segment_length: int = 32
    overlap: float = 0.5
    fs: float = 1.0

    def __post_init__(self):
        if self.segment_length < 2:
            raise ConfigError("segment length must be >= 2")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must be in [0,1)")
        if self.fs <= 0:
            raise ConfigError("sample rate must be positive")


def welch_psd(signal: np.ndarray, config: PsdConfig = PsdConfig()) -> tuple:
    """One-sided Welch periodogram with a Hann window.

    Normalised as a density: integrating the returned power over frequency
    recovers the signal's mean square (so white noise is flat at its
    variance density).  Returns (frequencies, power).
    """
    x = np.asarray(signal, dtype=np.float64)
    nseg = config.segment_length
    if x.ndim != 1 or x.size < nseg:
        raise DataError(
            f"signal length {x.size} shorter than segment {nseg}")
    step = max(1, int(round(nseg * (1.0 - config.overlap))))
    window = np.hanning(nseg)
    win_power = np.sum(window ** 2)
    n_bins = nseg // 2 + 1
    acc = np.zeros(n_bins)
    count = 0
    start = 0
    while start + nseg <= x.size:
        seg = x[start:start + nseg] * window
        spec = np.abs(np.fft.rfft(seg)) ** 2
        acc += spec
        count += 1
        start += step
    psd = acc / (count * win_power * config.fs)
    # one-sided: double everything except DC and (for even nseg) Nyquist
    psd[1:] *= 2.0
    if nseg % 2 == 0:
        psd[-1] /= 2.0
    freqs = np.arange(n_bins) * (config.fs / nseg)
    return freqs, psd
