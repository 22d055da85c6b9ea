"""Battery-augmented smart-meter MDP.

The controller picks a charge/discharge rate b (kW, positive = charging)
each step; the grid then sees z = y + b instead of the true demand y.  The
battery level evolves as l' = l + b*dt*eta/C and must stay within its
charge-fraction bounds; by default the grid load may not go negative (no
energy is sold back).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcmu.errors import ConfigError, ContractViolation

LEVEL_TOL = 1e-9
GRID_TOL = 1e-9


@dataclass(frozen=True)
class BatteryConfig:
    """Physical battery parameters: capacity (kWh), round efficiency,
    rate bounds (kW, b_min < 0 < b_max) and charge-fraction bounds."""

    capacity_c: float = 10.0
    efficiency_eta: float = 1.0
    b_min: float = -4.0
    b_max: float = 4.0
    l_min: float = 0.0
    l_max: float = 1.0

    def __post_init__(self):
        if self.capacity_c <= 0:
            raise ConfigError("battery capacity must be positive")
        if not 0.0 < self.efficiency_eta <= 1.0:
            raise ConfigError("efficiency must be in (0,1]")
        if not self.b_min <= 0.0 <= self.b_max:
            raise ConfigError("rate bounds must satisfy b_min <= 0 <= b_max")
        if not 0.0 <= self.l_min < self.l_max <= 1.0:
            raise ConfigError("need 0 <= l_min < l_max <= 1")


@dataclass(frozen=True)
class EnvConfig:
    delta_t: float = 0.25           # hours per step
    horizon_t: int = 96             # steps per episode
    episode_start_hour: float = 0.0
    enforce_nonneg_grid: bool = True
    n_actions: int = 9

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ConfigError("delta_t must be positive")
        if self.horizon_t < 1:
            raise ConfigError("horizon must be at least one step")
        if self.n_actions < 3 or self.n_actions % 2 == 0:
            raise ConfigError("n_actions must be an odd integer >= 3 "
                              "(the zero action must be on the grid)")


@dataclass(frozen=True)
class TariffSchedule:
    """Piecewise-constant time-of-use price, $/kWh.

    bands: ordered (start_hour, end_hour, price) tuples tiling [0, 24).
    """

    bands: tuple = field(default=())

    def __post_init__(self):
        bands = tuple(tuple(b) for b in self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise ConfigError("tariff needs at least one band")
        ordered = sorted(bands, key=lambda b: b[0])
        if ordered[0][0] != 0.0 or ordered[-1][1] != 24.0:
            raise ConfigError("tariff bands must cover [0,24)")
        for (s0, e0, p0), (s1, _e1, _p1) in zip(ordered, ordered[1:]):
            if e0 != s1:
                raise ConfigError(
                    f"tariff bands leave a gap or overlap at hour {e0}")
        for s, e, p in ordered:
            if e <= s:
                raise ConfigError(f"empty tariff band [{s},{e})")
            if p <= 0:
                raise ConfigError("tariff prices must be positive")

    @classmethod
    def default_tou(cls) -> "TariffSchedule":
        """Winter time-of-use rates: off-peak $0.101 (19:00-7:00),
        mid-peak $0.144 (11:00-17:00), on-peak $0.208 (7:00-11:00 and
        17:00-19:00)."""
        return cls(bands=(
            (0.0, 7.0, 0.101),
            (7.0, 11.0, 0.208),
            (11.0, 17.0, 0.144),
            (17.0, 19.0, 0.208),
            (19.0, 24.0, 0.101),
        ))

    def price_at_hour(self, hour: float) -> float:
        hour = hour % 24.0
        for s, e, p in self.bands:
            if s <= hour < e:
                return p
        raise ConfigError(f"no tariff band covers hour {hour}")


@dataclass(frozen=True)
class EnvState:
    """MDP state at step t: battery charge fraction and demand (kW)."""

    t: int
    level_l: float
    demand_y: float


@dataclass(frozen=True)
class Action:
    rate_b: float


@dataclass
class Trajectory:
    """One rolled-out episode.

    cost_seq holds the per-step cost signal dt*price*|b| (the training
    signal, zero for an idle battery), not the billed grid cost; use
    billed_cost() for the latter.
    """

    y_seq: np.ndarray
    z_seq: np.ndarray
    b_seq: np.ndarray
    l_seq: np.ndarray      # length T+1
    cost_seq: np.ndarray
    occupancy_seq: np.ndarray | None = None


def action_grid(env_config: EnvConfig, battery: BatteryConfig) -> np.ndarray:
    """n_actions equally spaced rates spanning [b_min, b_max], containing 0."""
    grid = np.linspace(battery.b_min, battery.b_max, env_config.n_actions)
    near_zero = np.abs(grid) < 1e-12
    if not near_zero.any():
        raise ConfigError(
            "action grid does not contain the zero rate; adjust n_actions "
            "or the rate bounds")
    grid[near_zero] = 0.0
    return grid


def zero_action_index(grid: np.ndarray) -> int:
    return int(np.nonzero(grid == 0.0)[0][0])


def feasible_mask(state: EnvState, env_config: EnvConfig,
                  battery: BatteryConfig,
                  grid: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask per grid action; the zero action is always feasible."""
    if grid is None:
        grid = action_grid(env_config, battery)
    next_levels = state.level_l + grid * (
        env_config.delta_t * battery.efficiency_eta / battery.capacity_c)
    ok = ((next_levels >= battery.l_min - LEVEL_TOL)
          & (next_levels <= battery.l_max + LEVEL_TOL))
    if env_config.enforce_nonneg_grid:
        ok &= state.demand_y + grid >= -GRID_TOL
    ok[grid == 0.0] = True
    return ok


def feasible_mask_batch(levels: np.ndarray, demands: np.ndarray,
                        env_config: EnvConfig, battery: BatteryConfig,
                        grid: np.ndarray) -> np.ndarray:
    """Vectorised feasible_mask: (n,) levels/demands -> (n, n_actions)."""
    next_levels = levels[:, None] + grid[None, :] * (
        env_config.delta_t * battery.efficiency_eta / battery.capacity_c)
    ok = ((next_levels >= battery.l_min - LEVEL_TOL)
          & (next_levels <= battery.l_max + LEVEL_TOL))
    if env_config.enforce_nonneg_grid:
        ok &= demands[:, None] + grid[None, :] >= -GRID_TOL
    ok[:, grid == 0.0] = True
    return ok


def step(state: EnvState, action: Action, next_demand_y: float,
         env_config: EnvConfig, battery: BatteryConfig):
    """Advance one step; returns (next_state, grid_load_z).

    The level is clamped only against <= 1e-9 float drift; anything larger
    is a contract violation, as is a negative grid load when forbidden.
    """
    rate = action.rate_b
    if not battery.b_min <= rate <= battery.b_max:
        raise ContractViolation(
            f"rate {rate} outside [{battery.b_min}, {battery.b_max}] kW")
    next_level = state.level_l + rate * (
        env_config.delta_t * battery.efficiency_eta / battery.capacity_c)
    if next_level < battery.l_min - LEVEL_TOL:
        raise ContractViolation(
            f"level {next_level} below l_min={battery.l_min}")
    if next_level > battery.l_max + LEVEL_TOL:
        raise ContractViolation(
            f"level {next_level} above l_max={battery.l_max}")
    next_level = min(max(next_level, battery.l_min), battery.l_max)
    z = state.demand_y + rate
    if env_config.enforce_nonneg_grid and z < -GRID_TOL:
        raise ContractViolation(f"grid load {z} kW is negative")
    return EnvState(t=state.t + 1, level_l=next_level,
                    demand_y=float(next_demand_y)), z


def step_hour(t: int, env_config: EnvConfig) -> float:
    """Clock hour at the start of step t (t counts from 1)."""
    return (env_config.episode_start_hour
            + (t - 1) * env_config.delta_t) % 24.0


def price_at(tariff: TariffSchedule, t: int, env_config: EnvConfig) -> float:
    return tariff.price_at_hour(step_hour(t, env_config))


def cost_signal(action: Action, t: int, tariff: TariffSchedule,
                env_config: EnvConfig) -> float:
    """dt * price * |b|: the battery-usage cost proxy (>= 0)."""
    return env_config.delta_t * price_at(tariff, t, env_config) * abs(action.rate_b)


def billed_cost(trajectory: Trajectory, tariff: TariffSchedule,
                env_config: EnvConfig) -> float:
    """Billed grid cost: sum of dt * price * max(z, 0) over the episode."""
    total = 0.0
    for t, z in enumerate(trajectory.z_seq, start=1):
        total += env_config.delta_t * price_at(tariff, t, env_config) * max(z, 0.0)
    return total


def rollout(policy, demand: np.ndarray, env_config: EnvConfig,
            battery: BatteryConfig, tariff: TariffSchedule, rng,
            occupancy: np.ndarray | None = None,
            initial_level: float = 0.0) -> Trajectory:
    """Roll one episode under a policy(state, mask, rng) -> action index.

    Each action depends only on the state at its own step (and policy
    randomness).  The battery starts at initial_level (default empty).
    """
    demand = np.asarray(demand, dtype=np.float64)
    t_len = env_config.horizon_t
    if demand.shape[0] != t_len:
        raise ConfigError(
            f"episode length {demand.shape[0]} != horizon {t_len}")
    if not battery.l_min <= initial_level <= battery.l_max:
        raise ConfigError("initial level outside battery bounds")
    grid = action_grid(env_config, battery)
    y_seq = demand.copy()
    z_seq = np.empty(t_len)
    b_seq = np.empty(t_len)
    l_seq = np.empty(t_len + 1)
    cost_seq = np.empty(t_len)
    l_seq[0] = initial_level
    state = EnvState(t=1, level_l=initial_level, demand_y=float(demand[0]))
    for t in range(1, t_len + 1):
        mask = feasible_mask(state, env_config, battery, grid)
        idx = policy(state, mask, rng)
        if not mask[idx]:
            raise ContractViolation(f"policy chose infeasible action {idx}")
        action = Action(rate_b=float(grid[idx]))
        next_y = float(demand[t]) if t < t_len else 0.0
        state, z = step(state, action, next_y, env_config, battery)
        z_seq[t - 1] = z
        b_seq[t - 1] = action.rate_b
        l_seq[t] = state.level_l
        cost_seq[t - 1] = cost_signal(action, t, tariff, env_config)
    occ = None if occupancy is None else np.asarray(occupancy).copy()
    return Trajectory(y_seq=y_seq, z_seq=z_seq, b_seq=b_seq, l_seq=l_seq,
                      cost_seq=cost_seq, occupancy_seq=occ)
