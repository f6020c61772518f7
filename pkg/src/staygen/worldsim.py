"""Deterministic toy-world generator used as ground truth.

Agents follow a weekly routine (home at night, work on weekday
daytimes, occasional exploration in free hours) on a grid of areas.
Each hour the agent's device reports a point record with configurable
probability, yielding an LBS-style corpus plus known home/work labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigurationError
from .geo import AreaMap
from .ingest import LbsRecord

HOME_EVENING_HOUR = 20  # home 20:00-09:00
HOME_MORNING_HOUR = 9
WORK_START_HOUR = 9  # work 09:00-17:00 on weekdays
WORK_END_HOUR = 17

HOURS_PER_WEEK = 168


@dataclass(frozen=True)
class WorldConfig:
    seed: int
    grid_rows: int = 5
    grid_cols: int = 10
    n_agents: int = 200
    window_start: datetime = datetime(2018, 5, 7)  # a Monday
    n_days: int = 5
    report_prob: float = 0.7
    explore_prob: float = 0.15
    commute_decay_cells: float = 2.0  # work-area weight ~ exp(-cells/decay); 0 = uniform
    lat_min: float = 42.0
    lat_max: float = 42.5
    lon_min: float = -71.5
    lon_max: float = -70.9

    def validate(self) -> None:
        if self.grid_rows * self.grid_cols < 2:
            raise ConfigurationError("world needs at least 2 areas")
        if self.n_agents < 0:
            raise ConfigurationError("n_agents must be non-negative")
        if self.n_days < 1:
            raise ConfigurationError("n_days must be positive")
        if not (0.0 <= self.report_prob <= 1.0):
            raise ConfigurationError("report_prob must lie in [0, 1]")
        if not (0.0 <= self.explore_prob <= 1.0):
            raise ConfigurationError("explore_prob must lie in [0, 1]")
        if self.commute_decay_cells < 0:
            raise ConfigurationError("commute_decay_cells must be >= 0")
        if self.window_start.weekday() != 0 or self.window_start.hour or self.window_start.minute:
            raise ConfigurationError("window_start must be a Monday at 00:00")

    @property
    def n_hours(self) -> int:
        return self.n_days * 24


@dataclass(frozen=True)
class Agent:
    agent_id: str
    home_area: str
    work_area: str
    routine: tuple = field(repr=False)  # intended area per hour-of-week (168 entries)


def is_home_hour(hour_of_day: int) -> bool:
    return hour_of_day >= HOME_EVENING_HOUR or hour_of_day < HOME_MORNING_HOUR


def is_work_hour(hour_of_week: int) -> bool:
    weekday, hour = divmod(hour_of_week, 24)
    return weekday < 5 and WORK_START_HOUR <= hour < WORK_END_HOUR


def is_free_hour(hour_of_week: int) -> bool:
    hour = hour_of_week % 24
    return not is_home_hour(hour) and not is_work_hour(hour_of_week)


def make_routine(home_area: str, work_area: str) -> tuple:
    """Intended area per hour-of-week; free hours default to home."""
    routine = []
    for how in range(HOURS_PER_WEEK):
        if is_work_hour(how):
            routine.append(work_area)
        else:
            routine.append(home_area)
    return tuple(routine)


def simulate_world(config: WorldConfig) -> tuple[AreaMap, list[LbsRecord], list[Agent]]:
    """Generate (area map, LBS records, ground-truth agents) for a config.

    One record is emitted per (agent, hour) with probability
    ``report_prob``; its coordinates fall inside the agent's current
    area cell and its dwell never crosses the hour boundary. Output is
    identical for identical configs.
    """
    config.validate()
    amap = AreaMap(
        lat_min=config.lat_min,
        lat_max=config.lat_max,
        lon_min=config.lon_min,
        lon_max=config.lon_max,
        grid_rows=config.grid_rows,
        grid_cols=config.grid_cols,
    )
    rng = np.random.default_rng(config.seed)
    area_ids = amap.area_ids()
    n_areas = len(area_ids)
    id_width = max(4, len(str(max(config.n_agents - 1, 0))))

    # commute-distance weights: short home-to-work trips dominate, so the
    # corpus trip-distance distribution differs from uniform area pairs
    rows = np.arange(n_areas) // config.grid_cols
    cols = np.arange(n_areas) % config.grid_cols
    cell_dist = np.hypot(rows[:, None] - rows[None, :], cols[:, None] - cols[None, :])
    if config.commute_decay_cells > 0:
        work_w = np.exp(-cell_dist / config.commute_decay_cells)
    else:
        work_w = np.ones_like(cell_dist)
    work_w /= work_w.sum(axis=1, keepdims=True)

    agents = []
    for i in range(config.n_agents):
        home_idx = int(rng.integers(n_areas))
        work_idx = int(rng.choice(n_areas, p=work_w[home_idx]))
        home, work = area_ids[home_idx], area_ids[work_idx]
        agents.append(Agent(f"d{i:0{id_width}d}", home, work, make_routine(home, work)))

    start_how = config.window_start.weekday() * 24 + config.window_start.hour
    records: list[LbsRecord] = []
    for agent in agents:
        exclude = {agent.home_area, agent.work_area}
        candidates = [a for a in area_ids if a not in exclude]
        for h in range(config.n_hours):
            how = (start_how + h) % HOURS_PER_WEEK
            area = agent.routine[how]
            if is_free_hour(how) and candidates and rng.random() < config.explore_prob:
                area = candidates[int(rng.integers(len(candidates)))]
            if rng.random() >= config.report_prob:
                continue
            lat_lo, lat_hi, lon_lo, lon_hi = amap.cell_bounds(area)
            lat = lat_lo + rng.random() * (lat_hi - lat_lo)
            lon = lon_lo + rng.random() * (lon_hi - lon_lo)
            # keep the stay inside its hour so trajectories mirror routines
            minute = int(rng.random() * 59.0)
            dwell = math.floor((1.0 + rng.random() * (59.0 - minute)) * 1e4) / 1e4
            ts = config.window_start + timedelta(hours=h, minutes=minute)
            records.append(LbsRecord(agent.agent_id, lat, lon, ts, dwell))
    return amap, records, agents


def write_ground_truth_csv(agents: list[Agent], dest: Union[str, Path]) -> None:
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent_id", "home_area", "work_area"])
        for a in agents:
            writer.writerow([a.agent_id, a.home_area, a.work_area])


def read_ground_truth_csv(path: Union[str, Path]) -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["agent_id"]] = (row["home_area"], row["work_area"])
    return out
