"""Road network model, trip ingestion and dual-graph construction."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NODE_COLUMNS = ("node_id", "lon", "lat", "signal")
LINK_COLUMNS = ("link_id", "from_node", "to_node", "length_m", "road_class")


class NetworkError(ValueError):
    """Invalid node or link table."""


class TripError(ValueError):
    """A trip record violates the path rules."""


class UnknownIdError(TripError):
    pass


@dataclass
class RoadNetwork:
    """Directed road graph with intersections as nodes and links as edges.

    Ids are kept as strings; all arrays are indexed by position in
    ``node_ids`` / ``link_ids``.
    """

    node_ids: list[str]
    lon: np.ndarray
    lat: np.ndarray
    signal: np.ndarray
    link_ids: list[str]
    src: np.ndarray
    dst: np.ndarray
    length: np.ndarray
    road_class: np.ndarray
    node_index: dict[str, int] = field(init=False, repr=False)
    link_index: dict[str, int] = field(init=False, repr=False)
    out_links: list[list[int]] = field(init=False, repr=False)
    in_links: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.node_index = {nid: i for i, nid in enumerate(self.node_ids)}
        self.link_index = {lid: i for i, lid in enumerate(self.link_ids)}
        self.out_links = [[] for _ in self.node_ids]
        self.in_links = [[] for _ in self.node_ids]
        for e, (s, t) in enumerate(zip(self.src, self.dst)):
            self.out_links[s].append(e)
            self.in_links[t].append(e)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    def out_degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.out_links], dtype=np.int64)

    def in_degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.in_links], dtype=np.int64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for nid in self.node_ids:
            h.update(nid.encode() + b"\0")
        for lid, s, t in zip(self.link_ids, self.src, self.dst):
            h.update(f"{lid}\0{s}\0{t}\0".encode())
        return h.hexdigest()[:16]


def _read_csv(source) -> tuple[list[str], list[list[str]]]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = [list(r) for r in source]
    if not rows:
        raise NetworkError("table is empty (no header)")
    return [c.strip() for c in rows[0]], [r for r in rows[1:] if any(x.strip() for x in r)]


def load_network(nodes, links) -> RoadNetwork:
    """Build a validated network from node and link tables.

    ``nodes`` and ``links`` are CSV paths or iterables of rows including the
    header row.  Row numbers in errors count the header as row 1.
    """
    header, rows = _read_csv(nodes)
    if tuple(header) != NODE_COLUMNS:
        raise NetworkError(f"nodes header must be {','.join(NODE_COLUMNS)}, got {','.join(header)}")
    node_ids, lon, lat, sig = [], [], [], []
    seen: set[str] = set()
    for r, row in enumerate(rows, start=2):
        try:
            nid, x, y, s = (c.strip() for c in row)
            if nid in seen:
                raise NetworkError(f"nodes row {r}: duplicate node id {nid!r}")
            if s not in ("0", "1"):
                raise NetworkError(f"nodes row {r}: signal must be 0 or 1, got {s!r}")
            lon.append(float(x))
            lat.append(float(y))
        except ValueError as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"nodes row {r}: {exc}") from None
        seen.add(nid)
        node_ids.append(nid)
        sig.append(int(s))

    header, rows = _read_csv(links)
    if tuple(header) != LINK_COLUMNS:
        raise NetworkError(f"links header must be {','.join(LINK_COLUMNS)}, got {','.join(header)}")
    index = {nid: i for i, nid in enumerate(node_ids)}
    link_ids, src, dst, length, cls = [], [], [], [], []
    seen = set()
    for r, row in enumerate(rows, start=2):
        try:
            lid, a, b, ln, rc = (c.strip() for c in row)
            ln_f, rc_i = float(ln), int(rc)
        except ValueError as exc:
            raise NetworkError(f"links row {r}: {exc}") from None
        if lid in seen:
            raise NetworkError(f"links row {r}: duplicate link id {lid!r}")
        for end in (a, b):
            if end not in index:
                raise NetworkError(f"links row {r}: link {lid!r} references missing intersection {end!r}")
        if not (ln_f > 0 and math.isfinite(ln_f)):
            raise NetworkError(f"links row {r}: length must be positive, got {ln}")
        seen.add(lid)
        link_ids.append(lid)
        src.append(index[a])
        dst.append(index[b])
        length.append(ln_f)
        cls.append(rc_i)

    return RoadNetwork(
        node_ids=node_ids,
        lon=np.array(lon, dtype=np.float64),
        lat=np.array(lat, dtype=np.float64),
        signal=np.array(sig, dtype=np.int64),
        link_ids=link_ids,
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        length=np.array(length, dtype=np.float64),
        road_class=np.array(cls, dtype=np.int64),
    )


def write_network(net: RoadNetwork, nodes_path, links_path) -> None:
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_COLUMNS)
        for i, nid in enumerate(net.node_ids):
            w.writerow([nid, repr(float(net.lon[i])), repr(float(net.lat[i])), int(net.signal[i])])
    with open(links_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINK_COLUMNS)
        for e, lid in enumerate(net.link_ids):
            w.writerow([lid, net.node_ids[net.src[e]], net.node_ids[net.dst[e]],
                        repr(float(net.length[e])), int(net.road_class[e])])


# trips ---------------------------------------------------------------------

LINK, NODE = 0, 1


@dataclass(frozen=True)
class TripRecord:
    """An alternating link/intersection path with per-element times.

    ``kinds`` holds LINK/NODE codes, ``index`` the network position of each
    element.  ``times`` may contain NaN for intersections without observed
    delay; such elements are masked out of intersection supervision.
    """

    trip_id: str
    depart_ts: float
    kinds: tuple[int, ...]
    index: tuple[int, ...]
    times: tuple[float, ...]
    fracs: tuple[float, ...]
    total: float

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def link_positions(self) -> range:
        return range(0, len(self.kinds), 2)

    @property
    def node_positions(self) -> range:
        return range(1, len(self.kinds), 2)


def _check_path(kinds: Sequence[int], index: Sequence[int], net: RoadNetwork, tag: str) -> None:
    if not kinds:
        raise TripError(f"{tag}: empty element list")
    if kinds[0] != LINK or kinds[-1] != LINK:
        raise TripError(f"{tag}: path must begin and end with a link")
    for i in range(1, len(kinds)):
        if kinds[i] == kinds[i - 1]:
            kind = "link" if kinds[i] == LINK else "node"
            raise TripError(f"{tag}: alternation broken at element {i} ({kind} follows {kind})")
        if kinds[i] == NODE:
            if net.dst[index[i - 1]] != index[i]:
                raise TripError(
                    f"{tag}: link {net.link_ids[index[i - 1]]!r} does not end at node {net.node_ids[index[i]]!r}")
        elif net.src[index[i]] != index[i - 1]:
            raise TripError(
                f"{tag}: link {net.link_ids[index[i]]!r} does not start at node {net.node_ids[index[i - 1]]!r}")


def _resolve(elements: list, net: RoadNetwork, tag: str) -> tuple[list[int], list[int]]:
    kinds, index = [], []
    for i, el in enumerate(elements):
        kind = el.get("kind")
        eid = str(el.get("id"))
        if kind == "link":
            if eid not in net.link_index:
                raise UnknownIdError(f"{tag}: element {i} references unknown link {eid!r}")
            kinds.append(LINK)
            index.append(net.link_index[eid])
        elif kind == "node":
            if eid not in net.node_index:
                raise UnknownIdError(f"{tag}: element {i} references unknown node {eid!r}")
            kinds.append(NODE)
            index.append(net.node_index[eid])
        else:
            raise TripError(f"{tag}: element {i} has kind {kind!r}, expected 'link' or 'node'")
    return kinds, index


def _fracs(elements: list, kinds: list[int], tag: str) -> list[float]:
    fracs = []
    for i, el in enumerate(elements):
        f = el.get("frac")
        f = 1.0 if f is None else float(f)
        if kinds[i] == NODE and f != 1.0:
            raise TripError(f"{tag}: traversal fraction given for intersection element {i}")
        if not (0.0 < f <= 1.0):
            raise TripError(f"{tag}: traversal fraction {f} of element {i} outside (0, 1]")
        fracs.append(f)
    return fracs


def parse_trip(record: dict, net: RoadNetwork) -> TripRecord:
    """Validate one trip record (as decoded from a JSON line).

    Link times are required; intersection times may be ``null``.  An optional
    ``total_t`` must agree with the element sum within 1e-6 s when all
    element times are known, and is required otherwise.
    """
    trip_id = str(record.get("trip_id"))
    tag = f"trip {trip_id}"
    elements = record.get("elements") or []
    kinds, index = _resolve(elements, net, tag)
    _check_path(kinds, index, net, tag)
    times = []
    for i, el in enumerate(elements):
        t = el.get("t")
        if t is None:
            if kinds[i] == LINK:
                raise TripError(f"{tag}: link element {i} has no observed time")
            times.append(math.nan)
            continue
        t = float(t)
        if not math.isfinite(t) or t < 0:
            raise TripError(f"{tag}: element {i} has invalid time {t}")
        times.append(t)
    known = math.fsum(t for t in times if not math.isnan(t))
    total = record.get("total_t")
    if any(math.isnan(t) for t in times):
        if total is None:
            raise TripError(f"{tag}: total_t required when intersection times are missing")
        total = float(total)
        if total + 1e-6 < known:
            raise TripError(f"{tag}: total_t {total} below the sum of known element times {known}")
    else:
        if total is not None and abs(float(total) - known) > 1e-6:
            raise TripError(f"{tag}: element times sum to {known}, total_t is {total}")
        total = known
    if total <= 0:
        raise TripError(f"{tag}: total travel time must be positive")
    return TripRecord(
        trip_id=trip_id,
        depart_ts=float(record.get("depart_ts")),
        kinds=tuple(kinds),
        index=tuple(index),
        times=tuple(times),
        fracs=tuple(_fracs(elements, kinds, tag)),
        total=total,
    )


@dataclass(frozen=True)
class PathQuery:
    """A path to estimate: same element rules as a trip, no observed times."""

    trip_id: str
    depart_ts: float
    kinds: tuple[int, ...]
    index: tuple[int, ...]
    fracs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.kinds)


def parse_query(record: dict, net: RoadNetwork) -> PathQuery:
    trip_id = str(record.get("trip_id"))
    tag = f"query {trip_id}"
    elements = record.get("elements") or []
    kinds, index = _resolve(elements, net, tag)
    _check_path(kinds, index, net, tag)
    return PathQuery(trip_id, float(record.get("depart_ts")), tuple(kinds), tuple(index),
                     tuple(_fracs(elements, kinds, tag)))


def as_query(trip: TripRecord) -> PathQuery:
    return PathQuery(trip.trip_id, trip.depart_ts, trip.kinds, trip.index, trip.fracs)


@dataclass
class TripLoad:
    trips: list[TripRecord]
    skipped_unknown: int = 0


def read_trips(path_or_lines, net: RoadNetwork) -> TripLoad:
    """Parse a JSON-lines trip file.

    Rows naming ids missing from the network are skipped and counted; any
    other violation raises :class:`TripError` with the line number.
    """
    lines = Path(path_or_lines).read_text(encoding="utf-8").splitlines() \
        if isinstance(path_or_lines, (str, Path)) else list(path_or_lines)
    out, skipped = [], 0
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(parse_trip(json.loads(line), net))
        except UnknownIdError as exc:
            skipped += 1
            log.debug("line %d skipped: %s", n, exc)
        except (TripError, ValueError, TypeError) as exc:
            raise TripError(f"line {n}: {exc}") from None
    if skipped:
        log.warning("skipped %d trip(s) referencing unknown ids", skipped)
    return TripLoad(out, skipped)


def trip_to_json(trip: TripRecord, net: RoadNetwork) -> str:
    elements = []
    for k, i, t, f in zip(trip.kinds, trip.index, trip.times, trip.fracs):
        el = {"kind": "link" if k == LINK else "node",
              "id": net.link_ids[i] if k == LINK else net.node_ids[i],
              "t": None if math.isnan(t) else t}
        if f != 1.0:
            el["frac"] = f
        elements.append(el)
    rec = {"trip_id": trip.trip_id, "depart_ts": trip.depart_ts, "elements": elements}
    if any(math.isnan(t) for t in trip.times):
        rec["total_t"] = trip.total
    return json.dumps(rec, separators=(",", ":"))


def write_trips(trips: Iterable[TripRecord], net: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trip in trips:
            fh.write(trip_to_json(trip, net) + "\n")


# dual graph ----------------------------------------------------------------

def degree_sigma(net: RoadNetwork, mode: str = "total") -> float:
    """Population standard deviation of node degrees (``total``, ``in`` or ``out``)."""
    if mode == "total":
        deg = net.in_degree() + net.out_degree()
    elif mode == "in":
        deg = net.in_degree()
    elif mode == "out":
        deg = net.out_degree()
    else:
        raise ValueError(f"unknown degree mode {mode!r}")
    return float(np.std(deg.astype(np.float64)))


def node_adjacency_mask(net: RoadNetwork) -> np.ndarray:
    R = np.zeros((net.n_nodes, net.n_nodes))
    R[net.src, net.dst] = 1.0
    np.fill_diagonal(R, 0.0)
    return R


def build_node_graph(net: RoadNetwork, sigma_mode: str = "total") -> np.ndarray:
    """Degree-kernel weights ``exp(-(d+(i) + d-(j) - 2)^2 / sigma^2)`` on adjacent pairs."""
    if net.n_nodes < 2:
        raise NetworkError("node-wise graph needs at least two intersections")
    R = node_adjacency_mask(net)
    sigma = degree_sigma(net, sigma_mode)
    if sigma == 0.0:
        log.warning("all node degrees are equal (sigma = 0); using unit weights")
        return R
    excess = net.out_degree()[:, None] + net.in_degree()[None, :] - 2.0
    return R * np.exp(-(excess ** 2) / sigma ** 2)


def edge_adjacency_mask(net: RoadNetwork) -> np.ndarray:
    """Link i precedes link j when i ends where j starts."""
    R = (net.dst[:, None] == net.src[None, :]).astype(np.float64)
    np.fill_diagonal(R, 0.0)
    return R


def transition_counts(net: RoadNetwork, trips: Iterable[TripRecord]) -> np.ndarray:
    """Number of trips containing each consecutive (link, node, link) step."""
    Z = np.zeros((net.n_links, net.n_links))
    for trip in trips:
        pairs = {(trip.index[p - 2], trip.index[p]) for p in range(2, len(trip.kinds), 2)}
        for i, j in pairs:
            Z[i, j] += 1.0
    return Z


def build_edge_graph(net: RoadNetwork, trips: Iterable[TripRecord]) -> np.ndarray:
    R = edge_adjacency_mask(net)
    Z = transition_counts(net, trips) * R
    rows = Z.sum(axis=1, keepdims=True)
    return np.divide(Z, rows, out=np.zeros_like(Z), where=rows > 0)


def build_incidence(net: RoadNetwork) -> np.ndarray:
    loops = np.flatnonzero(net.src == net.dst)
    if loops.size:
        raise NetworkError(f"self-loop link {net.link_ids[loops[0]]!r} cannot be encoded in the incidence matrix")
    P = np.zeros((net.n_nodes, net.n_links))
    cols = np.arange(net.n_links)
    P[net.src, cols] = 1.0
    P[net.dst, cols] = 1.0
    return P


def normalized_propagation(W: np.ndarray) -> np.ndarray:
    """``D^-1/2 (W + I) D^-1/2`` with D the row sums of ``W + I``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"adjacency must be square, got {W.shape}")
    if np.any(W < 0):
        raise ValueError("adjacency weights must be nonnegative")
    A = W + np.eye(W.shape[0])
    d = A.sum(axis=1) ** -0.5
    return d[:, None] * A * d[None, :]


@dataclass
class DualGraph:
    W_n: np.ndarray
    W_e: np.ndarray
    R_n: np.ndarray
    R_e: np.ndarray
    P: np.ndarray
    sigma: float
    L_n: np.ndarray = field(init=False)
    L_e: np.ndarray = field(init=False)
    L_nT: np.ndarray = field(init=False)
    L_eT: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.L_n = normalized_propagation(self.W_n)
        self.L_e = normalized_propagation(self.W_e)
        self.L_nT = np.ascontiguousarray(self.L_n.T)
        self.L_eT = np.ascontiguousarray(self.L_e.T)


def build_dual_graph(net: RoadNetwork, trips: Iterable[TripRecord], sigma_mode: str = "total",
                     W_e: np.ndarray | None = None) -> DualGraph:
    return DualGraph(
        W_n=build_node_graph(net, sigma_mode),
        W_e=build_edge_graph(net, trips) if W_e is None else W_e,
        R_n=node_adjacency_mask(net),
        R_e=edge_adjacency_mask(net),
        P=build_incidence(net),
        sigma=degree_sigma(net, sigma_mode),
    )


def write_triplets(M: np.ndarray, path) -> None:
    """Dump the nonzero entries of ``M`` as ``row,col,value`` CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "col", "value"))
        for r, c in zip(*np.nonzero(M)):
            w.writerow((int(r), int(c), repr(float(M[r, c]))))
