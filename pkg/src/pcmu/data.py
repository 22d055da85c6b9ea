"""Load-profile ingestion, synthetic household generation, dataset splits,
and checkpoint persistence.

CSV interchange format: header ``timestamp,power_kw[,occupancy]``, UTF-8,
LF line endings, ISO-8601 timestamps (UTC offsets allowed), strictly
increasing within a file.  Checkpoints are a binary container: magic
``PCMU``, u32 version, length-prefixed named blocks, and a trailing
SHA-256 integrity digest; all numeric payloads are 64-bit little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from pcmu.env import EnvConfig
from pcmu.errors import ConfigError, DataError

CHECKPOINT_MAGIC = b"PCMU"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LoadCsvRecord:
    timestamp: datetime
    power_kw: float
    occupancy: int | None = None


@dataclass
class LoadEpisode:
    """One day of demand at the environment resolution (length T)."""

    y: np.ndarray
    occupancy: np.ndarray | None = None
    day: str | None = None


def _parse_timestamp(text: str):
    # fromisoformat in 3.10 rejects a trailing Z
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def load_csv(path) -> list:
    """Read and validate a load CSV; raises DataError naming the bad line."""
    records = []
    last = None
    last_line = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        cols = header.split(",")
        if cols[:2] != ["timestamp", "power_kw"] or len(cols) > 3 or (
                len(cols) == 3 and cols[2] != "occupancy"):
            raise DataError(
                f"{path}: line 1: expected header "
                f"'timestamp,power_kw[,occupancy]', got {header!r}")
        has_occ = len(cols) == 3
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.rstrip("\n").rstrip("\r")
            if not raw:
                continue
            parts = raw.split(",")
            if len(parts) != len(cols):
                raise DataError(
                    f"{path}: line {lineno}: expected {len(cols)} fields, "
                    f"got {len(parts)}")
            try:
                ts = _parse_timestamp(parts[0])
            except ValueError as exc:
                raise DataError(
                    f"{path}: line {lineno}: column timestamp: {exc}") from exc
            try:
                power = float(parts[1])
            except ValueError as exc:
                raise DataError(
                    f"{path}: line {lineno}: column power_kw: {exc}") from exc
            if not np.isfinite(power) or power < 0:
                raise DataError(
                    f"{path}: line {lineno}: power must be finite and >= 0, "
                    f"got {parts[1]}")
            occ = None
            if has_occ and parts[2] != "":
                if parts[2] not in ("0", "1"):
                    raise DataError(
                        f"{path}: line {lineno}: column occupancy: "
                        f"expected 0 or 1, got {parts[2]!r}")
                occ = int(parts[2])
            if last is not None:
                if ts == last:
                    raise DataError(
                        f"{path}: duplicate timestamp {parts[0]} on lines "
                        f"{last_line} and {lineno}")
                if ts < last:
                    raise DataError(
                        f"{path}: line {lineno}: timestamps must be strictly "
                        f"increasing")
            last = ts
            last_line = lineno
            records.append(LoadCsvRecord(ts, power, occ))
    return records


def write_csv(path, records) -> None:
    has_occ = any(r.occupancy is not None for r in records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timestamp,power_kw,occupancy\n" if has_occ
                 else "timestamp,power_kw\n")
        for r in records:
            row = f"{r.timestamp.isoformat()},{r.power_kw!r}"
            if has_occ:
                row += f",{'' if r.occupancy is None else r.occupancy}"
            fh.write(row + "\n")


def resample_to_episodes(records, env_config: EnvConfig):
    """Average records into delta_t bins, one episode per complete day.

    Occupancy per bin is the majority vote (ties count occupied).  Days
    with any empty bin are dropped; returns (episodes, dropped_days).
    """
    t_len = env_config.horizon_t
    bin_seconds = env_config.delta_t * 3600.0
    days: dict = {}
    for rec in records:
        key = rec.timestamp.date().isoformat()
        sec = (rec.timestamp.hour * 3600 + rec.timestamp.minute * 60
               + rec.timestamp.second + rec.timestamp.microsecond / 1e6)
        b = int(sec // bin_seconds)
        days.setdefault(key, []).append((b, rec.power_kw, rec.occupancy))
    episodes = []
    dropped = 0
    for key in sorted(days):
        rows = days[key]
        if any(b < 0 or b >= t_len for b, _, _ in rows):
            dropped += 1
            continue
        sums = np.zeros(t_len)
        counts = np.zeros(t_len, dtype=np.int64)
        occ_sum = np.zeros(t_len)
        occ_cnt = np.zeros(t_len, dtype=np.int64)
        for b, p, o in rows:
            sums[b] += p
            counts[b] += 1
            if o is not None:
                occ_sum[b] += o
                occ_cnt[b] += 1
        if (counts == 0).any():
            dropped += 1
            continue
        y = sums / counts
        occupancy = None
        if (occ_cnt == counts).all():
            occupancy = (occ_sum / occ_cnt >= 0.5).astype(np.int64)
        episodes.append(LoadEpisode(y=y, occupancy=occupancy, day=key))
    return episodes, dropped


@dataclass(frozen=True)
class SynthGenConfig:
    """Deterministic synthetic household generator.

    Occupancy follows a two-state chain whose stay probability depends on
    the time of day; appliance events start only while occupied and last a
    geometric number of bins, so the load carries real temporal structure.
    """

    seed: int = 0
    n_episodes: int = 300
    base_load_kw: float = 0.25
    occupied_base_kw: float = 0.15   # extra standby draw while home
    event_rate: float = 0.10
    event_magnitudes: tuple = (0.5, 1.0, 2.0)
    event_probs: tuple = (0.5, 0.3, 0.2)
    event_magnitude_spread: float = 0.5   # relative per-event variation
    event_continue_prob: float = 0.9
    stay_prob_night: float = 0.95
    stay_prob_day: float = 0.85
    stay_prob_evening: float = 0.95
    initial_occupied_prob: float = 0.8
    noise_sd_kw: float = 0.05
    max_load_kw: float = 8.0

    def __post_init__(self):
        for name in ("event_rate", "event_continue_prob", "stay_prob_night",
                     "stay_prob_day", "stay_prob_evening",
                     "initial_occupied_prob", "event_magnitude_spread"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if len(self.event_magnitudes) != len(self.event_probs):
            raise ConfigError("event magnitudes and probabilities must align")
        if any(m < 0 for m in self.event_magnitudes):
            raise ConfigError("event magnitudes must be >= 0")
        if abs(sum(self.event_probs) - 1.0) > 1e-9:
            raise ConfigError("event probabilities must sum to 1")
        if self.n_episodes < 1 or self.base_load_kw < 0 or self.noise_sd_kw < 0:
            raise ConfigError("invalid generator size parameters")


def _stay_prob(cfg: SynthGenConfig, hour: float) -> float:
    if hour < 7.0:
        return cfg.stay_prob_night
    if hour < 17.0:
        return cfg.stay_prob_day
    return cfg.stay_prob_evening


def generate_synthetic(gen: SynthGenConfig,
                       env_config: EnvConfig) -> list:
    """Generate n_episodes day-long load episodes, bit-reproducible per seed."""
    rng = np.random.default_rng(gen.seed)
    t_len = env_config.horizon_t
    mags = np.asarray(gen.event_magnitudes, dtype=np.float64)
    probs = np.asarray(gen.event_probs, dtype=np.float64)
    episodes = []
    for ep in range(gen.n_episodes):
        occ = np.empty(t_len, dtype=np.int64)
        y = np.empty(t_len)
        active: list = []  # [remaining_bins, magnitude]
        occupied = rng.random() < gen.initial_occupied_prob
        for t in range(t_len):
            hour = (env_config.episode_start_hour
                    + t * env_config.delta_t) % 24.0
            if t > 0:
                if rng.random() >= _stay_prob(gen, hour):
                    occupied = not occupied
            occ[t] = int(occupied)
            if occupied and rng.random() < gen.event_rate:
                mag = float(mags[rng.choice(len(mags), p=probs)])
                # real appliances draw a spread of powers around a class
                mag *= 1.0 + gen.event_magnitude_spread * (2.0 * rng.random() - 1.0)
                duration = int(rng.geometric(1.0 - gen.event_continue_prob))
                active.append([duration, mag])
            load = gen.base_load_kw + sum(m for _, m in active)
            if occupied:
                load += gen.occupied_base_kw
            load += rng.normal(0.0, gen.noise_sd_kw)
            y[t] = min(max(load, 0.0), gen.max_load_kw)
            active = [[n - 1, m] for n, m in active if n > 1]
        episodes.append(LoadEpisode(y=y, occupancy=occ, day=f"syn{ep:05d}"))
    return episodes


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


def split_dataset(episodes, seed: int) -> DatasetSplit:
    """Seeded shuffle, then a 70:10:20 contiguous cut."""
    n = len(episodes)
    if n < 10:
        raise DataError(f"need at least 10 episodes to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    idx_train = order[:n_train]
    idx_val = order[n_train:n_train + n_val]
    idx_test = order[n_train + n_val:]
    return DatasetSplit(train=[episodes[i] for i in idx_train],
                        val=[episodes[i] for i in idx_val],
                        test=[episodes[i] for i in idx_test],
                        seed=seed)


@dataclass
class CheckpointBundle:
    """Everything needed to reload a trained model deterministically."""

    config: dict
    params: dict          # name -> list of float64 arrays
    opt_state: dict       # name -> list of float64 arrays
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.astype("<f8").tobytes()


def _unpack_array(payload: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", payload, 0)
    off = 4
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<Q", payload, off)
        shape.append(d)
        off += 8
    data = np.frombuffer(payload, dtype="<f8", offset=off)
    return data.reshape(shape).astype(np.float64).copy()


def _blocks(bundle: CheckpointBundle):
    meta = {"config": bundle.config, "rng_state": bundle.rng_state,
            "meta": bundle.meta,
            "params": {k: len(v) for k, v in bundle.params.items()},
            "opt_state": {k: len(v) for k, v in bundle.opt_state.items()}}
    yield "meta", json.dumps(meta, sort_keys=True).encode("utf-8")
    for group in sorted(bundle.params):
        for i, arr in enumerate(bundle.params[group]):
            yield f"arr:{group}/{i}", _pack_array(arr)
    for group in sorted(bundle.opt_state):
        for i, arr in enumerate(bundle.opt_state[group]):
            yield f"opt:{group}/{i}", _pack_array(arr)


def save_checkpoint(path, bundle: CheckpointBundle) -> None:
    blocks = list(_blocks(bundle))
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(blocks))
    for name, payload in blocks:
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<Q", len(payload)) + payload
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body) + digest)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise DataError(f"{path}: truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if body[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch (corrupt or truncated)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})")
    (n_blocks,) = struct.unpack_from("<I", body, 8)
    off = 12
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        blocks[name] = body[off:off + payload_len]
        off += payload_len
    meta = json.loads(blocks["meta"].decode("utf-8"))
    params = {g: [_unpack_array(blocks[f"arr:{g}/{i}"]) for i in range(n)]
              for g, n in meta["params"].items()}
    opt_state = {g: [_unpack_array(blocks[f"opt:{g}/{i}"]) for i in range(n)]
                 for g, n in meta["opt_state"].items()}
    return CheckpointBundle(config=meta["config"], params=params,
                            opt_state=opt_state,
                            rng_state=meta["rng_state"], meta=meta["meta"])
