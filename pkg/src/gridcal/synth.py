"""Synthetic city traffic on a grid, with known ground truth.

Roads carry a daily two-peak volume profile scaled down on weekends, with
lognormal multiplicative noise whose level varies per cell (optionally
AR(1) in time).  Speeds fall from free flow as volume rises.  Volumes under
a detection threshold read as zero, and so do their speeds, which makes
quiet roads intermittent.  Channels follow the default layout: volume/speed
pairs for the NE, NW, SE, SW headings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_kv, read_tensor, write_kv, write_tensor
from .tensor import N_INPUT_FRAMES, STEPS_PER_DAY, TARGET_STEPS, SampleSequence

N_CHANNELS = 8
NE, NW, SE, SW = range(4)
ARTERIAL, SIDE = 1, 2
WINDOW_SPAN = N_INPUT_FRAMES + TARGET_STEPS[-1]
WINDOWS_PER_DAY = STEPS_PER_DAY - WINDOW_SPAN + 1
SHIFT_KINDS = ("volume-drop", "pattern-regularization", "variance-increase")


@dataclass(frozen=True)
class CityConfig:
    height: int = 64
    width: int = 64
    n_arterials: int = 4
    n_side_roads: int = 10
    rush_hour_peaks: tuple[float, float] = (8.0, 17.5)  # hours of day
    rush_hour_width: float = 1.2  # hours
    weekday_weekend_ratio: float = 1.6
    noise_scale: tuple[float, float] = (0.2, 0.35)  # lognormal sigma: arterial, side road
    base_volume: tuple[float, float] = (70.0, 25.0)
    free_flow_speed: tuple[float, float] = (200.0, 120.0)
    noise_autocorr: float = 0.0
    speed_noise_ratio: float = 0.5  # speed lognormal sigma relative to volume
    zero_below: float = 0.2  # detection threshold: volumes under this read as no traffic
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid must be at least 1x1")
        if self.weekday_weekend_ratio <= 1:
            raise ValueError("weekday_weekend_ratio must exceed 1")
        if min(self.noise_scale) <= 0:
            raise ValueError("noise scales must be positive")
        if not 0 <= self.noise_autocorr < 1:
            raise ValueError("noise_autocorr must lie in [0, 1)")
        if self.zero_below < 0 or self.speed_noise_ratio < 0:
            raise ValueError("zero_below and speed_noise_ratio must be non-negative")


# A small city where off-peak traffic mostly falls under the detection
# threshold, so error size varies strongly over the day in every road cell.
SPARSE_TASK = CityConfig(height=16, width=16, n_arterials=2, n_side_roads=4,
                         noise_scale=(0.4, 0.6), zero_below=20.0, seed=3)


@dataclass(frozen=True)
class ShiftSpec:
    """A dated, localized change. ``region`` is (row0, row1, col0, col1), half-open."""

    region: tuple[int, int, int, int]
    onset_day: int
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"shift kind must be one of {SHIFT_KINDS}")
        r0, r1, c0, c1 = self.region
        if not (r0 < r1 and c0 < c1):
            raise ValueError(f"empty shift region {self.region}")
        if self.kind == "volume-drop" and not 0 <= self.magnitude <= 1:
            raise ValueError("volume-drop magnitude must lie in [0, 1]")
        if self.magnitude < 0:
            raise ValueError("shift magnitude must be non-negative")

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        r0, r1, c0, c1 = self.region
        m[r0:r1, c0:c1] = True
        return m


@dataclass
class SynthDataset:
    config: CityConfig
    days: list[np.ndarray]  # each (288, h, w, 8) float32
    road_class: np.ndarray  # (h, w) int: 0 none, 1 arterial, 2 side road
    noise_level: np.ndarray  # (h, w, 8) lognormal sigma per cell
    shifts: list[ShiftSpec] = field(default_factory=list)

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def road_mask(self) -> np.ndarray:
        return self.road_class > 0

    def shift_mask(self, day: int) -> np.ndarray:
        """Pixels under an active shift on ``day``."""
        h, w = self.road_class.shape
        m = np.zeros((h, w), dtype=bool)
        for s in self.shifts:
            if day >= s.onset_day:
                m |= s.mask(h, w)
        return m

    def is_weekend(self, day: int) -> bool:
        return day % 7 >= 5

    def samples(self, day_indices, stride: int = 1, starts=None) -> list[SampleSequence]:
        """Input/target windows of the given days, in chronological order."""
        starts = range(0, WINDOWS_PER_DAY, stride) if starts is None else starts
        return [SampleSequence(self.days[d], int(t), d) for d in day_indices for t in starts]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, frames in enumerate(self.days):
            write_tensor(frames, d / f"day_{i:03d}.grt")
        write_tensor(self.road_class.astype(np.uint8), d / "road_class.grt")
        write_tensor(self.noise_level.astype(np.float32), d / "noise_level.grt")
        write_kv(d / "manifest.txt", {
            "n_days": self.n_days,
            "config": json.dumps(dataclasses.asdict(self.config), sort_keys=True),
            "shifts": json.dumps([dataclasses.asdict(s) for s in self.shifts]),
            "seed": self.config.seed,
        })

    @classmethod
    def load(cls, directory) -> "SynthDataset":
        d = Path(directory)
        meta = read_kv(d / "manifest.txt")
        cfg = json.loads(meta["config"])
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        shifts = [ShiftSpec(tuple(s["region"]), s["onset_day"], s["kind"], s["magnitude"])
                  for s in json.loads(meta["shifts"])]
        days = [read_tensor(d / f"day_{i:03d}.grt") for i in range(int(meta["n_days"]))]
        return cls(CityConfig(**cfg), days, read_tensor(d / "road_class.grt").astype(np.int64),
                   read_tensor(d / "noise_level.grt").astype(np.float64), shifts)


def _layout_roads(cfg: CityConfig, rng: np.random.Generator):
    """Road class per pixel and per-heading direction weights, shape (h, w, 4)."""
    h, w = cfg.height, cfg.width
    road = np.zeros((h, w), dtype=np.int64)
    dirs = np.zeros((h, w, 4))

    def draw(cls, horizontal, fixed, lo, hi):
        if horizontal:
            sl = (fixed, slice(lo, hi))
            heads = (NE, SW)  # eastbound, westbound
        else:
            sl = (slice(lo, hi), fixed)
            heads = (NW, SE)  # northbound, southbound
        if cls == ARTERIAL:
            road[sl] = ARTERIAL
        else:
            road[sl] = np.where(road[sl] == ARTERIAL, ARTERIAL, SIDE)
        for k in heads:
            dirs[sl + (k,)] = np.maximum(dirs[sl + (k,)], 1.0)

    for a in range(cfg.n_arterials):
        horizontal = a % 2 == 0
        draw(ARTERIAL, horizontal, int(rng.integers(h if horizontal else w)), 0, w if horizontal else h)
    for _ in range(cfg.n_side_roads):
        horizontal = bool(rng.integers(2))
        span = w if horizontal else h
        length = int(rng.integers(max(1, span // 4), max(2, span // 2 + 1)))
        lo = int(rng.integers(0, max(1, span - length + 1)))
        draw(SIDE, horizontal, int(rng.integers(h if horizontal else w)), lo, lo + length)
    return road, dirs


def daily_profile(cfg: CityConfig) -> np.ndarray:
    """Relative volume per 5-minute step: night floor, daytime plateau, two rush peaks."""
    hours = np.arange(STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    day = 0.45 / (1 + np.exp(-(hours - 6.5) * 2)) / (1 + np.exp((hours - 21.5) * 2))
    peaks = sum(np.exp(-0.5 * ((hours - c) / cfg.rush_hour_width) ** 2) for c in cfg.rush_hour_peaks)
    return 0.03 + day + peaks


def _check_shifts(shifts, cfg: CityConfig, n_days: int) -> None:
    for s in shifts:
        r0, r1, c0, c1 = s.region
        if r0 < 0 or c0 < 0 or r1 > cfg.height or c1 > cfg.width:
            raise ValueError(f"shift region {s.region} outside the {cfg.height}x{cfg.width} grid")
        if not 0 <= s.onset_day < n_days:
            raise ValueError(f"shift onset day {s.onset_day} outside the {n_days}-day horizon")
    for i, a in enumerate(shifts):
        for b in shifts[i + 1:]:
            if np.any(a.mask(cfg.height, cfg.width) & b.mask(cfg.height, cfg.width)):
                raise ValueError(f"overlapping shifts {a} and {b}")


def generate(config: CityConfig = CityConfig(), n_days: int = 10, shifts=()) -> SynthDataset:
    """Generate ``n_days`` of 288 frames each.  Identical arguments give identical data."""
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    shifts = list(shifts)
    _check_shifts(shifts, config, n_days)
    h, w = config.height, config.width
    root = np.random.SeedSequence(config.seed)
    layout_seq, level_seq, *day_seqs = root.spawn(2 + n_days)
    road, dirs = _layout_roads(config, np.random.default_rng(layout_seq))

    cls_idx = np.clip(road - 1, 0, 1)
    on_road = road > 0
    base = np.where(on_road, np.asarray(config.base_volume)[cls_idx], 0.0)
    free_flow = np.where(on_road, np.asarray(config.free_flow_speed)[cls_idx], 0.0)
    cell_factor = np.exp(np.random.default_rng(level_seq).normal(0.0, 0.3, size=(h, w, 4)))
    vol_noise = np.where(on_road, np.asarray(config.noise_scale)[cls_idx], 0.0)[..., None] * cell_factor
    noise_level = np.zeros((h, w, N_CHANNELS))
    noise_level[..., 0::2] = vol_noise
    noise_level[..., 1::2] = config.speed_noise_ratio * vol_noise

    profile = daily_profile(config)
    rho = config.noise_autocorr
    days = []
    for d in range(n_days):
        rng = np.random.default_rng(day_seqs[d])
        z = rng.standard_normal((STEPS_PER_DAY, h, w, 4, 2))
        if rho:
            z[1:] *= np.sqrt(1 - rho**2)
            for t in range(1, STEPS_PER_DAY):
                z[t] += rho * z[t - 1]

        scale_v = np.broadcast_to(vol_noise, (h, w, 4)).copy()
        level = np.ones((h, w))
        for s in shifts:
            if d < s.onset_day:
                continue
            m = s.mask(h, w)
            if s.kind == "volume-drop":
                level[m] *= 1.0 - s.magnitude
            elif s.kind == "pattern-regularization":
                scale_v[m] *= 1.0 - min(s.magnitude, 1.0)
            else:
                scale_v[m] *= 1.0 + s.magnitude
        weekday = 1.0 / config.weekday_weekend_ratio if d % 7 >= 5 else 1.0

        mean_vol = (base * level * weekday)[None, :, :, None] * profile[:, None, None, None] * dirs[None]
        vol = mean_vol * np.exp(scale_v * z[..., 0] - 0.5 * scale_v**2)
        vol = np.where(vol < config.zero_below, 0.0, np.minimum(vol, 255.0))
        capacity = np.maximum(base * 2.2, 1.0)[None, :, :, None]
        congestion = np.clip(vol / capacity, 0.0, 0.9)
        spd_noise = scale_v * config.speed_noise_ratio
        speed = free_flow[None, :, :, None] * (1 - congestion) * np.exp(spd_noise * z[..., 1] - 0.5 * spd_noise**2)
        speed = np.where(vol > 0, np.clip(speed, 1.0, 255.0), 0.0)

        frames = np.empty((STEPS_PER_DAY, h, w, N_CHANNELS), dtype=np.float32)
        frames[..., 0::2] = vol
        frames[..., 1::2] = speed
        days.append(frames)
    return SynthDataset(config, days, road, noise_level, shifts)


def train_val_test_split(dataset: SynthDataset, scheme=(6, 2, 2), stride: int = 1):
    """Chronological day-level split into (train, validation, test) sample lists.

    ``scheme`` gives whole days per split; fractions summing to 1 are scaled
    to the dataset length.  Every split needs at least one day.
    """
    scheme = tuple(scheme)
    if len(scheme) != 3:
        raise ValueError("scheme must have three entries")
    if all(isinstance(x, float) for x in scheme) and abs(sum(scheme) - 1) < 1e-9:
        counts = [int(round(f * dataset.n_days)) for f in scheme]
        counts[0] = dataset.n_days - counts[1] - counts[2]
    else:
        counts = [int(x) for x in scheme]
    if min(counts) < 1 or sum(counts) > dataset.n_days:
        raise ValueError(f"split {counts} needs {sum(counts)} days (>= 1 each); dataset has {dataset.n_days}")
    bounds = np.cumsum([0] + counts)
    return tuple(dataset.samples(range(bounds[i], bounds[i + 1]), stride) for i in range(3))
