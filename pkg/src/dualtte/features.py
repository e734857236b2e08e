"""Per-slot link speeds and the link/intersection feature augmentation."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numerics import Tensor, concat, matmul, tanh
from .roadnet import LINK, RoadNetwork, TripRecord

log = logging.getLogger(__name__)

DEFAULT_SPEED = 8.0

OBSERVED, SLOT_MEAN, LINK_MEAN, NET_MEAN, DEFAULT = range(5)
SOURCE_NAMES = ("observed", "slot-mean", "link-mean", "net-mean", "default")


@dataclass(frozen=True)
class SlotGrid:
    slot_seconds: int = 300
    history: int = 12
    day_start: float = 0.0

    def __post_init__(self) -> None:
        if self.slot_seconds <= 0 or 86400 % self.slot_seconds:
            raise ValueError(f"slot length {self.slot_seconds} s must divide 86400")
        if self.history < 1:
            raise ValueError("history length T must be at least 1")

    @property
    def slots_per_day(self) -> int:
        return 86400 // self.slot_seconds

    def slot_of(self, ts: float) -> int:
        return int(math.floor((ts - self.day_start) / self.slot_seconds))

    def window(self, depart_slot: int) -> np.ndarray:
        """The ``history`` slots strictly before ``depart_slot``, oldest first."""
        return np.arange(depart_slot - self.history, depart_slot)


def element_start_times(trip: TripRecord) -> list[float]:
    """Entry time of every element; unknown intersection delays count as 0."""
    t = trip.depart_ts
    out = []
    for dt in trip.times:
        out.append(t)
        if not math.isnan(dt):
            t += dt
    return out


class LinkDynamic:
    """Mean link speed per (link, absolute slot) with a fallback chain.

    Missing cells resolve to the link's mean for that time of day over all
    days, then the link's overall mean, then the network mean, then a fixed
    default speed.
    """

    def __init__(self, grid: SlotGrid, n_links: int, cells: dict[tuple[int, int], tuple[float, float, int]],
                 default_speed: float = DEFAULT_SPEED):
        self.grid = grid
        self.n_links = n_links
        self.default_speed = default_speed
        self.cells = cells
        spd = grid.slots_per_day
        self.slot_sum = np.zeros((n_links, spd))
        self.slot_cnt = np.zeros((n_links, spd))
        self.link_sum = np.zeros(n_links)
        self.link_cnt = np.zeros(n_links)
        by_slot: dict[int, list[tuple[int, float]]] = defaultdict(list)
        for (e, s), (total, _, n) in sorted(cells.items()):
            self.slot_sum[e, s % spd] += total
            self.slot_cnt[e, s % spd] += n
            self.link_sum[e] += total
            self.link_cnt[e] += n
            by_slot[s].append((e, total / n))
        self._by_slot = {s: (np.array([e for e, _ in v], dtype=np.int64), np.array([m for _, m in v]))
                         for s, v in by_slot.items()}
        n_obs = self.link_cnt.sum()
        self.net_mean = float(self.link_sum.sum() / n_obs) if n_obs else None
        with np.errstate(invalid="ignore", divide="ignore"):
            self.slot_mean = np.where(self.slot_cnt > 0, self.slot_sum / np.maximum(self.slot_cnt, 1), np.nan)
            self.link_mean = np.where(self.link_cnt > 0, self.link_sum / np.maximum(self.link_cnt, 1), np.nan)

    @property
    def n_observations(self) -> int:
        return int(self.link_cnt.sum())

    def observation_stats(self) -> tuple[float, float]:
        """Mean and population std of the individual speed observations."""
        n = sum(c for _, _, c in self.cells.values())
        if n == 0:
            return self.default_speed, 1.0
        s1 = sum(t for t, _, _ in self.cells.values())
        s2 = sum(q for _, q, _ in self.cells.values())
        m = s1 / n
        var = max(s2 / n - m * m, 0.0)
        return m, math.sqrt(var) if var > 0 else 1.0

    def speeds(self, slots) -> tuple[np.ndarray, np.ndarray]:
        """Resolved speeds and source codes, both ``(len(slots), n_links)``."""
        slots = np.asarray(slots, dtype=np.int64)
        out = np.full((len(slots), self.n_links), np.nan)
        src = np.full(out.shape, OBSERVED, dtype=np.int64)
        for r, s in enumerate(slots):
            hit = self._by_slot.get(int(s))
            if hit is not None:
                out[r, hit[0]] = hit[1]
        miss = np.isnan(out)
        if miss.any():
            fill = self.slot_mean[:, slots % self.grid.slots_per_day].T
            src[miss] = SLOT_MEAN
            out[miss] = fill[miss]
            miss = np.isnan(out)
        if miss.any():
            fill = np.broadcast_to(self.link_mean, out.shape)
            src[miss] = LINK_MEAN
            out[miss] = fill[miss]
            miss = np.isnan(out)
        if miss.any():
            if self.net_mean is not None:
                src[miss] = NET_MEAN
                out[miss] = self.net_mean
            else:
                src[miss] = DEFAULT
                out[miss] = self.default_speed
        return out, src

    def slot_speeds(self, slots) -> np.ndarray:
        """Historical time-of-day speeds (the chain without the observed level)."""
        slots = np.asarray(slots, dtype=np.int64)
        out = self.slot_mean[:, slots % self.grid.slots_per_day].T.copy()
        out = np.where(np.isnan(out), self.link_mean[None, :], out)
        fallback = self.net_mean if self.net_mean is not None else self.default_speed
        return np.where(np.isnan(out), fallback, out)

    def to_arrays(self) -> dict[str, np.ndarray]:
        keys = sorted(self.cells)
        tab = np.array([[e, s, *self.cells[(e, s)]] for e, s in keys], dtype=np.float64).reshape(-1, 5)
        return {"cells": tab}

    @classmethod
    def from_arrays(cls, grid: SlotGrid, n_links: int, arrays: dict[str, np.ndarray],
                    default_speed: float = DEFAULT_SPEED) -> "LinkDynamic":
        cells = {(int(e), int(s)): (float(t), float(q), int(n)) for e, s, t, q, n in arrays["cells"]}
        return cls(grid, n_links, cells, default_speed)

    def dump_csv(self, path, net: RoadNetwork, slots) -> None:
        speeds, src = self.speeds(slots)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("link_id", "slot", "speed_mps", "source"))
            for e, lid in enumerate(net.link_ids):
                for r, s in enumerate(slots):
                    w.writerow((lid, int(s), repr(float(speeds[r, e])), SOURCE_NAMES[src[r, e]]))


def aggregate_link_speeds(trips: Iterable[TripRecord], net: RoadNetwork, grid: SlotGrid,
                          default_speed: float = DEFAULT_SPEED) -> LinkDynamic:
    """Mean traversal speed per link and per slot of traversal start."""
    acc: dict[tuple[int, int], list] = {}
    dropped = 0
    for trip in trips:
        starts = element_start_times(trip)
        for k, idx, t, frac, t0 in zip(trip.kinds, trip.index, trip.times, trip.fracs, starts):
            if k != LINK:
                continue
            if t <= 0:
                dropped += 1
                continue
            v = frac * net.length[idx] / t
            cell = acc.setdefault((idx, grid.slot_of(t0)), [0.0, 0.0, 0])
            cell[0] += v
            cell[1] += v * v
            cell[2] += 1
    if dropped:
        log.warning("discarded %d link traversal(s) with zero observed time", dropped)
    cells = {key: (s, q, n) for key, (s, q, n) in acc.items()}
    return LinkDynamic(grid, net.n_links, cells, default_speed)


@dataclass
class FeatureEncoder:
    """Frozen input scaling: speed standardisation, km lengths, one-hot classes.

    Road classes outside ``classes`` map to a trailing "other" bucket.
    """

    speed_mean: float
    speed_std: float
    classes: tuple[int, ...]

    @classmethod
    def fit(cls, dyn: LinkDynamic, net: RoadNetwork) -> "FeatureEncoder":
        m, s = dyn.observation_stats()
        return cls(m, s, tuple(sorted(int(c) for c in set(net.road_class.tolist()))))

    @property
    def link_input_dim(self) -> int:
        return 2 + len(self.classes) + 1

    node_input_extra = 2

    def link_static(self, net: RoadNetwork) -> np.ndarray:
        onehot = np.zeros((net.n_links, len(self.classes) + 1))
        lookup = {c: i for i, c in enumerate(self.classes)}
        for e, c in enumerate(net.road_class):
            onehot[e, lookup.get(int(c), len(self.classes))] = 1.0
        return np.concatenate([net.length[:, None] / 1000.0, onehot], axis=1)

    def link_inputs(self, speeds: np.ndarray, static: np.ndarray) -> np.ndarray:
        """``[s_e(t), d_e, p_e]`` rows for a ``(..., E)`` block of speeds."""
        z = (speeds - self.speed_mean) / self.speed_std
        lead = z.shape
        return np.concatenate([z[..., None], np.broadcast_to(static, lead + static.shape[-1:])], axis=-1)

    @staticmethod
    def node_static(net: RoadNetwork) -> np.ndarray:
        onehot = np.zeros((net.n_nodes, 2))
        onehot[np.arange(net.n_nodes), net.signal] = 1.0
        return onehot

    def to_dict(self) -> dict:
        return {"speed_mean": self.speed_mean, "speed_std": self.speed_std, "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(float(d["speed_mean"]), float(d["speed_std"]), tuple(int(c) for c in d["classes"]))


def augment_link_features(link_inputs, W_a) -> Tensor:
    """h_e(t) = tanh([s_e(t), d_e, p_e] W_a) for every slot and link."""
    return tanh(matmul(link_inputs, W_a))


def augment_intersection_features(h_e, P, node_static, W_b) -> Tensor:
    """z_v(t) = tanh([sum of incident link reps, p_v] W_b).

    ``P`` is the incidence matrix, so ``P @ h_e`` sums the representations
    of every link touching each intersection (both directions).
    """
    agg = matmul(P, h_e)
    lead = agg.shape[:-1]
    sig = np.broadcast_to(node_static, lead + node_static.shape[-1:])
    return tanh(matmul(concat([agg, sig], axis=-1), W_b))
