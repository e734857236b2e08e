"""Seeded synthetic city: grid road network plus trips from a congestion model.

Link travel time for a traversal entered at time t is

    frac * length / base_speed * congestion(link, slot(t)) * trip_noise

where the congestion multiplier combines a day-level factor, two rush-hour
bumps weighted by link centrality, and local incidents.  Intersection delays
are the node's mean delay times the same congestion at the node and an
independent lognormal draw.  Everything is a pure function of the spec.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

import networkx as nx
import numpy as np

from ..roadnet import LINK, NODE, RoadNetwork, TripRecord
from .config import coerce_values, read_kv, write_kv

EARTH_M_PER_DEG = 111_320.0
DAY = 86400


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    rows: int = 7
    cols: int = 7
    spacing_m: float = 300.0
    two_way_prob: float = 0.1
    trips: int = 5000
    days: int = 4
    start_ts: int = 1_704_067_200
    depart_start_h: float = 6.0
    depart_end_h: float = 22.0
    slot_seconds: int = 300
    speed_arterial: float = 13.9
    speed_collector: float = 11.1
    speed_local: float = 8.3
    speed_jitter: float = 0.1
    rush_factor: float = 1.6
    rush_width_h: float = 1.0
    day_sigma: float = 0.15
    incidents_per_day: float = 6.0
    incident_radius: int = 2
    incident_min_min: float = 30.0
    incident_max_min: float = 120.0
    incident_severity: float = 2.0
    signal_prob: float = 0.2
    signal_delay_mean: float = 20.0
    plain_delay_mean: float = 4.0
    noise_sigma: float = 0.1
    delay_noise_sigma: float = 0.3
    min_hops: int = 3
    max_hops: int = 12
    min_link_trips: int = 10

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 columns")
        if self.trips < 1 or self.days < 1:
            raise ValueError("trips and days must be positive")
        if not 0 <= self.depart_start_h < self.depart_end_h <= 24:
            raise ValueError("departure window must lie within one day")
        if self.min_hops < 1 or self.max_hops < self.min_hops:
            raise ValueError("need 1 <= min_hops <= max_hops")
        if self.min_link_trips < 0:
            raise ValueError("min_link_trips must be nonnegative")
        if DAY % self.slot_seconds:
            raise ValueError("slot_seconds must divide 86400")

    @classmethod
    def degenerate(cls, **kw) -> "SynthSpec":
        """No slowdown, no incidents, no delays, no noise."""
        base = dict(rush_factor=1.0, day_sigma=0.0, incidents_per_day=0.0, signal_delay_mean=0.0,
                    plain_delay_mean=0.0, noise_sigma=0.0, delay_noise_sigma=0.0, speed_jitter=0.1)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "SynthSpec":
        return dataclasses.replace(self, **kw)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls(**coerce_values(cls, read_kv(path)))

    def save(self, path) -> None:
        write_kv({f.name: getattr(self, f.name) for f in fields(self)}, path)


@dataclass
class SynthWorld:
    """Generated network plus the hidden quantities of the congestion model."""

    net: RoadNetwork
    base_speed: np.ndarray
    node_delay: np.ndarray
    centrality_link: np.ndarray
    centrality_node: np.ndarray
    day_factor: np.ndarray
    incidents: list[tuple[int, float, float, float]]  # (node, start_ts, end_ts, severity)
    hops: np.ndarray  # node-to-node undirected hop distance


def _line_class(r: int, c: int, horizontal: bool, rows: int, cols: int) -> int:
    k, n = (r, rows) if horizontal else (c, cols)
    if k == n // 2:
        return 0
    if k % 3 == 0 or k == n - 1:
        return 1
    return 2


def build_grid(spec: SynthSpec, rng: np.random.Generator) -> tuple[RoadNetwork, np.ndarray, np.ndarray]:
    rows, cols = spec.rows, spec.cols
    node_ids = [f"n{r}_{c}" for r in range(rows) for c in range(cols)]
    pos = {(r, c): r * cols + c for r in range(rows) for c in range(cols)}
    xy = np.array([(c * spec.spacing_m, r * spec.spacing_m) for r in range(rows) for c in range(cols)])
    xy = xy + rng.uniform(-0.1, 0.1, xy.shape) * spec.spacing_m
    streets = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                streets.append((pos[r, c], pos[r, c + 1], _line_class(r, c, True, rows, cols)))
            if r + 1 < rows:
                streets.append((pos[r, c], pos[r + 1, c], _line_class(r, c, False, rows, cols)))
    directed: list[tuple[int, int, int]] = []
    one_way: list[tuple[int, int, int]] = []
    for a, b, cls in streets:
        if cls < 2 or rng.uniform() < spec.two_way_prob:
            directed += [(a, b, cls), (b, a, cls)]
        else:
            fwd = (a, b, cls) if rng.uniform() < 0.5 else (b, a, cls)
            directed.append(fwd)
            one_way.append(fwd)
    g = nx.DiGraph()
    g.add_nodes_from(range(len(node_ids)))
    g.add_edges_from((a, b) for a, b, _ in directed)
    for a, b, cls in one_way:
        if nx.is_strongly_connected(g):
            break
        comp = {n: i for i, cc in enumerate(nx.strongly_connected_components(g)) for n in cc}
        if comp[a] != comp[b]:
            g.add_edge(b, a)
            directed.append((b, a, cls))
    if not nx.is_strongly_connected(g):
        raise RuntimeError("grid repair failed to make the network strongly connected")
    directed.sort(key=lambda x: (x[0], x[1]))
    base_by_class = np.array([spec.speed_arterial, spec.speed_collector, spec.speed_local])
    src = np.array([a for a, _, _ in directed], dtype=np.int64)
    dst = np.array([b for _, b, _ in directed], dtype=np.int64)
    cls = np.array([k for _, _, k in directed], dtype=np.int64)
    length = np.hypot(*(xy[dst] - xy[src]).T)
    base = base_by_class[cls] * (1.0 + rng.uniform(-spec.speed_jitter, spec.speed_jitter, len(directed)))
    crossing = np.array([(r % 3 == 0 or r == rows // 2) and (c % 3 == 0 or c == cols // 2)
                         for r in range(rows) for c in range(cols)])
    signal = (crossing | (rng.uniform(size=len(node_ids)) < spec.signal_prob)).astype(np.int64)
    net = RoadNetwork(
        node_ids=node_ids,
        lon=104.0 + xy[:, 0] / EARTH_M_PER_DEG,
        lat=30.6 + xy[:, 1] / EARTH_M_PER_DEG,
        signal=signal,
        link_ids=[f"l{node_ids[a]}_{node_ids[b]}" for a, b in zip(src, dst)],
        src=src,
        dst=dst,
        length=length,
        road_class=cls,
    )
    return net, base, xy


def _hop_matrix(net: RoadNetwork) -> np.ndarray:
    g = nx.Graph()
    g.add_nodes_from(range(net.n_nodes))
    g.add_edges_from(zip(net.src.tolist(), net.dst.tolist()))
    hops = np.full((net.n_nodes, net.n_nodes), np.inf)
    for a, dist in nx.all_pairs_shortest_path_length(g):
        for b, h in dist.items():
            hops[a, b] = h
    return hops


def build_world(spec: SynthSpec) -> SynthWorld:
    ss = np.random.SeedSequence(spec.seed)
    rng_net, rng_dyn, _ = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))
    net, base, xy = build_grid(spec, rng_net)
    center = xy.mean(axis=0)
    dist = np.hypot(*(xy - center).T)
    cn = 1.0 - 0.5 * dist / max(dist.max(), 1e-9)
    cl = 0.5 * (cn[net.src] + cn[net.dst]) * np.array([1.0, 0.85, 0.7])[net.road_class]
    delay = np.where(net.signal == 1, spec.signal_delay_mean, spec.plain_delay_mean).astype(np.float64)
    day_factor = np.exp(rng_dyn.normal(0.0, spec.day_sigma, spec.days)) if spec.day_sigma > 0 else np.ones(spec.days)
    incidents = []
    for day in range(spec.days):
        n_inc = rng_dyn.poisson(spec.incidents_per_day) if spec.incidents_per_day > 0 else 0
        for _ in range(n_inc):
            node = int(rng_dyn.integers(net.n_nodes))
            start = spec.start_ts + day * DAY + rng_dyn.uniform(spec.depart_start_h - 1, spec.depart_end_h) * 3600
            dur = rng_dyn.uniform(spec.incident_min_min, spec.incident_max_min) * 60
            sev = rng_dyn.uniform(0.3, 1.0) * spec.incident_severity
            incidents.append((node, float(start), float(start + dur), float(sev)))
    return SynthWorld(net, base, delay, cl, cn, day_factor, incidents, _hop_matrix(net))


class Congestion:
    """Per-slot multipliers for links and nodes, cached by absolute slot."""

    def __init__(self, spec: SynthSpec, world: SynthWorld):
        self.spec, self.world = spec, world
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def at(self, slot: int) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(slot)
        if hit is not None:
            return hit
        spec, w = self.spec, self.world
        t = slot * spec.slot_seconds
        day = min(max(int((t - spec.start_ts) // DAY), 0), spec.days - 1)
        h = ((t - spec.start_ts) % DAY) / 3600.0
        rush = max(math.exp(-0.5 * ((h - 8.0) / spec.rush_width_h) ** 2),
                   math.exp(-0.5 * ((h - 18.0) / spec.rush_width_h) ** 2))
        node_f = w.day_factor[day] * (1.0 + (spec.rush_factor - 1.0) * rush * w.centrality_node)
        inc = np.ones(w.net.n_nodes)
        for node, t0, t1, sev in w.incidents:
            if t0 <= t < t1:
                hop = w.hops[node]
                inc *= 1.0 + sev * np.clip(1.0 - hop / (spec.incident_radius + 1), 0.0, None)
        node_f = node_f * inc
        rush_link = 1.0 + (spec.rush_factor - 1.0) * rush * w.centrality_link
        link_f = w.day_factor[day] * rush_link * np.sqrt(inc[w.net.src] * inc[w.net.dst])
        self._cache[slot] = (link_f, node_f)
        return link_f, node_f


def _route(world: SynthWorld, a: int, b: int, rng: np.random.Generator) -> list[int] | None:
    net = world.net
    g = nx.DiGraph()
    weights = net.length * rng.uniform(0.8, 1.25, net.n_links)
    for e in range(net.n_links):
        g.add_edge(int(net.src[e]), int(net.dst[e]), w=float(weights[e]), e=e)
    try:
        nodes = nx.dijkstra_path(g, a, b, weight="w")
    except nx.NetworkXNoPath:
        return None
    return [g[u][v]["e"] for u, v in zip(nodes, nodes[1:])]


def _random_route(world: SynthWorld, spec: SynthSpec, rng: np.random.Generator) -> list[int]:
    """Route between random endpoints whose hop distance lies in the allowed band."""
    while True:
        a, b = (int(x) for x in rng.integers(world.net.n_nodes, size=2))
        if spec.min_hops <= world.hops[a, b] <= spec.max_hops:
            links = _route(world, a, b, rng)
            if links and len(links) >= spec.min_hops:
                return links


def _route_via(world: SynthWorld, e: int, spec: SynthSpec, rng: np.random.Generator) -> list[int]:
    """A random route forced through link ``e``, without repeated links."""
    net = world.net
    s, t = int(net.src[e]), int(net.dst[e])
    while True:
        a, b = (int(x) for x in rng.integers(net.n_nodes, size=2))
        head = _route(world, a, s, rng) if a != s else []
        tail = _route(world, t, b, rng) if b != t else []
        if head is None or tail is None:
            continue
        links = head + [e] + tail
        if spec.min_hops <= len(links) <= spec.max_hops and len(set(links)) == len(links):
            return links


def simulate_trip(spec: SynthSpec, world: SynthWorld, cong: Congestion, links: list[int], fr0: float, fr1: float,
                  depart: float, trip_id: str, rng: np.random.Generator) -> TripRecord:
    net = world.net
    noise = math.exp(rng.normal(0.0, spec.noise_sigma)) if spec.noise_sigma > 0 else 1.0
    kinds, index, times, fracs = [], [], [], []
    t = depart
    for j, e in enumerate(links):
        frac = fr0 if j == 0 else fr1 if j == len(links) - 1 else 1.0
        link_f, node_f = cong.at(int(t // spec.slot_seconds))
        dt = frac * net.length[e] / world.base_speed[e] * link_f[e] * noise
        kinds.append(LINK)
        index.append(e)
        times.append(float(dt))
        fracs.append(frac)
        t += dt
        if j < len(links) - 1:
            v = int(net.dst[e])
            link_f, node_f = cong.at(int(t // spec.slot_seconds))
            dn = math.exp(rng.normal(0.0, spec.delay_noise_sigma)) if spec.delay_noise_sigma > 0 else 1.0
            dv = float(world.node_delay[v] * node_f[v] * dn)
            kinds.append(NODE)
            index.append(v)
            times.append(dv)
            fracs.append(1.0)
            t += dv
    return TripRecord(trip_id, float(depart), tuple(kinds), tuple(index), tuple(times), tuple(fracs),
                      math.fsum(times))


def gen_synthetic(spec: SynthSpec, world: SynthWorld | None = None) -> tuple[RoadNetwork, list[TripRecord]]:
    """Generate the network and ``spec.trips`` trips, sorted by departure.

    Up to ``min_link_trips`` trips per link (fewer if the trip budget is too
    small) are routed through that link, at random positions in the
    departure order, so every link has history whatever the split.
    """
    world = world or build_world(spec)
    net = world.net
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed).spawn(3)[2]))
    cong = Congestion(spec, world)
    lo, hi = spec.depart_start_h * 3600, spec.depart_end_h * 3600
    departs = np.sort(spec.start_ts + rng.integers(0, spec.days, spec.trips) * DAY + rng.uniform(lo, hi, spec.trips))
    per_link = min(spec.min_link_trips, spec.trips // net.n_links)
    forced_links = np.repeat(np.arange(net.n_links), per_link)
    forced = dict(zip(rng.choice(spec.trips, size=forced_links.size, replace=False).tolist(), forced_links.tolist()))
    trips = []
    for k, depart in enumerate(departs):
        links = _route_via(world, forced[k], spec, rng) if k in forced else _random_route(world, spec, rng)
        fr0, fr1 = (float(x) for x in rng.uniform(0.3, 1.0, 2))
        trips.append(simulate_trip(spec, world, cong, links, fr0, fr1, float(depart), f"t{k:05d}", rng))
    return net, trips
