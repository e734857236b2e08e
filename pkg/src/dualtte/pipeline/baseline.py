"""AVG baseline: historical per-slot link speeds plus mean intersection delays."""
from __future__ import annotations

import math

import numpy as np

from ..features import DEFAULT_SPEED, LinkDynamic, SlotGrid, aggregate_link_speeds
from ..roadnet import LINK, RoadNetwork, TripRecord
from .metrics import MetricsReport


class AvgBaseline:
    def __init__(self, net: RoadNetwork, train: list[TripRecord], grid: SlotGrid = SlotGrid(),
                 default_speed: float = DEFAULT_SPEED):
        self.net, self.grid = net, grid
        self.dyn: LinkDynamic = aggregate_link_speeds(train, net, grid, default_speed)
        tot = np.zeros(net.n_nodes)
        cnt = np.zeros(net.n_nodes)
        for trip in train:
            for k, i, t in zip(trip.kinds, trip.index, trip.times):
                if k != LINK and not math.isnan(t):
                    tot[i] += t
                    cnt[i] += 1
        self.node_delay = np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)

    def element_times(self, path) -> np.ndarray:
        """Per-element estimates; each link uses the slot in which it is entered."""
        t = path.depart_ts
        out = np.empty(len(path.kinds))
        for p, (k, i, f) in enumerate(zip(path.kinds, path.index, path.fracs)):
            if k == LINK:
                speed = self.dyn.slot_speeds([self.grid.slot_of(t)])[0, i]
                out[p] = f * self.net.length[i] / speed
            else:
                out[p] = self.node_delay[i]
            t += out[p]
        return out

    def predict(self, path) -> float:
        return math.fsum(self.element_times(path))


def avg_baseline(net: RoadNetwork, train: list[TripRecord], test: list[TripRecord],
                 grid: SlotGrid = SlotGrid(), default_speed: float = DEFAULT_SPEED) -> MetricsReport:
    model = AvgBaseline(net, train, grid, default_speed)
    rep = MetricsReport()
    for trip in test:
        est = model.element_times(trip)
        rep.tasks["path"].add([math.fsum(est)], [trip.total])
        kinds = np.array(trip.kinds)
        truth = np.array(trip.times)
        rep.tasks["link"].add(est[kinds == LINK], truth[kinds == LINK])
        rep.tasks["intersection"].add(est[kinds != LINK], truth[kinds != LINK])
    return rep
