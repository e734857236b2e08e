"""Dataset split, training loop, evaluation and prediction."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import FeatureEncoder, aggregate_link_speeds
from ..mtl import flatten_local
from ..numerics import AdamState, NonFiniteGradient, Tape, adam_step, grad, make_rng
from ..roadnet import LINK, RoadNetwork, TripRecord, build_dual_graph
from .config import TrainConfig
from .metrics import MetricsReport
from .model import Model, TargetScales, init_parameters

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_rmse", "val_mae", "val_mape")


class TrainingDiverged(FloatingPointError):
    pass


def split_dataset(trips, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Seeded split by trip id; independent of input order."""
    trips = sorted(trips, key=lambda t: t.trip_id)
    if not trips:
        raise ValueError("cannot split an empty trip list")
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or min(f) < 0 or abs(sum(f) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions} must be three nonnegative numbers summing to 1")
    n = len(trips)
    n_train = int(round(n * f[0]))
    n_val = min(int(round(n * f[1])), n - n_train)
    order = make_rng(seed).permutation(n)
    pick = [trips[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


def departure_batches(trips, batch_size: int) -> list[list]:
    """Chunks of trips in departure order, so each chunk spans few slots."""
    ordered = sorted(trips, key=lambda t: (t.depart_ts, t.trip_id))
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


def slot_shuffled_batches(trips, batch_size: int, grid, rng) -> list[list]:
    """Chunks of trips whose departure-slot groups come in random order.

    Trips sharing a slot stay adjacent, so a chunk still needs only a few
    stdg passes, but consecutive slots of one day no longer fill a batch.
    """
    groups: dict[int, list] = {}
    for t in sorted(trips, key=lambda t: (t.depart_ts, t.trip_id)):
        groups.setdefault(grid.slot_of(t.depart_ts), []).append(t)
    keys = sorted(groups)
    ordered = [t for i in rng.permutation(len(keys)) for t in groups[keys[i]]]
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_rmse: float
    val_mae: float
    val_mape: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in HISTORY_COLUMNS[1:]]


@dataclass
class TrainResult:
    model: Model                       # parameters of the best validation epoch
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    split: tuple[list, list, list] = ((), (), ())


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow(rec.row())


def build_model(cfg: TrainConfig, net: RoadNetwork, train_trips: list[TripRecord]) -> Model:
    """Freeze graph, speeds, scaling and initial parameters from the training split."""
    dyn = aggregate_link_speeds(train_trips, net, cfg.grid, cfg.default_speed)
    dual = build_dual_graph(net, train_trips, cfg.sigma_mode)
    encoder = FeatureEncoder.fit(dyn, net)
    params = init_parameters(cfg, encoder.link_input_dim)
    return Model(cfg, net, dual, dyn, encoder, TargetScales.fit(train_trips), params)


def _param_norms(model: Model) -> str:
    return ", ".join(f"{k}={np.linalg.norm(v.data):.3g}" for k, v in model.params.items())


def batch_loss(model: Model, trips) -> float:
    """Trip-weighted mean combined loss without recording a tape."""
    if not trips:
        return math.nan
    parts = []
    for chunk in departure_batches(trips, model.cfg.batch_size):
        total, _ = model.loss(model.forward(chunk), chunk)
        parts.append(total.item() * len(chunk))
    return math.fsum(parts) / len(trips)


def train(cfg: TrainConfig, net: RoadNetwork, trips: list[TripRecord], out_dir=None,
          progress=None) -> TrainResult:
    """Mini-batch Adam on the combined loss with early stopping on validation loss.

    The learning rate is multiplied by ``cfg.lr_decay`` after every
    ``cfg.lr_patience`` epochs without a new best validation loss.

    With ``out_dir`` the history CSV and best checkpoint are written there as
    ``history.csv`` and ``model.ckpt``.
    """
    train_set, val_set, test_set = split_dataset(trips, cfg.fractions, cfg.seed)
    if not train_set:
        raise ValueError("training split is empty")
    model = build_model(cfg, net, train_set)
    rng = make_rng(cfg.seed + 1)
    batches = slot_shuffled_batches(train_set, cfg.batch_size, cfg.grid, rng)
    state = AdamState(lr=cfg.lr)
    history: list[EpochRecord] = []
    best = (math.inf, 0, {k: v.data.copy() for k, v in model.params.items()})
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        weighted = []
        for b, idx in enumerate(rng.permutation(len(batches))):
            chunk = batches[idx]
            with Tape():
                total, _ = model.loss(model.forward(chunk), chunk)
                value = total.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}; "
                                           f"parameter norms: {_param_norms(model)}")
                grads = grad(total, model.params)
            try:
                adam_step(model.params, grads, state)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch {b}; "
                                       f"parameter norms: {_param_norms(model)}") from None
            weighted.append(value * len(chunk))
        train_loss = math.fsum(weighted) / len(train_set)
        if val_set:
            val_loss, rep = _validate(model, val_set)
        else:
            val_loss, rep = train_loss, MetricsReport()
        rec = EpochRecord(epoch, train_loss, val_loss, rep.rmse, rep.mae, rep.mape)
        history.append(rec)
        if progress:
            progress(rec)
        log.info("epoch %d train %.5f val %.5f val_mape %.5f", epoch, train_loss, val_loss, rep.mape)
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.data.copy() for k, v in model.params.items()})
            stale = 0
        else:
            stale += 1
            if stale % cfg.lr_patience == 0:
                state.lr *= cfg.lr_decay
                log.info("learning rate now %g", state.lr)
            if stale >= cfg.patience:
                log.info("early stop after epoch %d (best %d)", epoch, best[1])
                break
    for k, v in best[2].items():
        model.params[k].data = v
    result = TrainResult(model, history, best[1] or len(history), (train_set, val_set, test_set))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(history, out / "history.csv")
        model.save(out / "model.ckpt")
    return result


# evaluation ---------------------------------------------------------------

def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("STDG_THREADS", "1") or 1)
    return max(1, threads)


def _shards(items: list, n: int) -> list[list]:
    size = math.ceil(len(items) / n) if items else 0
    return [items[i:i + size] for i in range(0, len(items), size)] if size else []


def _validate(model: Model, trips: list[TripRecord]) -> tuple[float, MetricsReport]:
    """Combined loss and metrics from a single forward pass per batch."""
    parts: list[float] = []
    rep = _evaluate_shard(model, trips, parts)
    return math.fsum(parts) / len(trips), rep


def _evaluate_shard(model: Model, trips: list[TripRecord], losses: list | None = None) -> MetricsReport:
    rep = MetricsReport()
    for chunk in departure_batches(trips, model.cfg.batch_size):
        out = model.forward(chunk)
        if losses is not None:
            losses.append(model.loss(out, chunk)[0].item() * len(chunk))
        rep.tasks["path"].add(out.path.data, [t.total for t in chunk])
        per = flatten_local(out.links.data, out.nodes.data, out.batch)
        for trip, est in zip(chunk, per):
            kinds = np.asarray(trip.kinds)
            truth = np.asarray(trip.times)
            rep.tasks["link"].add(est[kinds == LINK], truth[kinds == LINK])
            rep.tasks["intersection"].add(est[kinds != LINK], truth[kinds != LINK])
    return rep


def evaluate(model: Model, trips: list[TripRecord], threads: int | None = None) -> MetricsReport:
    """Path, link and intersection metrics; ``STDG_THREADS`` sets the default shard count."""
    trips = sorted(trips, key=lambda t: (t.depart_ts, t.trip_id))
    n = _thread_count(threads)
    if n == 1 or len(trips) < 2:
        return _evaluate_shard(model, trips)
    with ThreadPoolExecutor(max_workers=n) as pool:
        reports = list(pool.map(lambda s: _evaluate_shard(model, s), _shards(trips, n)))
    out = MetricsReport()
    for r in reports:
        out = out.merge(r)
    return out


@dataclass
class QueryError:
    trip_id: str
    message: str


def _predict_shard(model: Model, queries: list) -> list[dict]:
    order = sorted(range(len(queries)), key=lambda i: (queries[i].depart_ts, i))
    out: list = [None] * len(queries)
    size = model.cfg.batch_size
    for start in range(0, len(order), size):
        idx = order[start:start + size]
        chunk = [queries[i] for i in idx]
        res = model.forward(chunk)
        per = flatten_local(res.links.data, res.nodes.data, res.batch)
        for i, q, t_path, est in zip(idx, chunk, res.path.data, per):
            out[i] = {
                "trip_id": q.trip_id,
                "t_path_s": float(t_path),
                "per_element": [
                    {"kind": "link" if k == LINK else "node",
                     "id": model.net.link_ids[j] if k == LINK else model.net.node_ids[j],
                     "t_s": float(t)}
                    for k, j, t in zip(q.kinds, q.index, est)
                ],
            }
    return out


def predict(model: Model, queries: list, threads: int | None = None) -> list[dict]:
    """One record per query, in input order.

    ``QueryError`` entries (queries that failed to parse) become error
    records and do not stop the run.
    """
    valid = [q for q in queries if not isinstance(q, QueryError)]
    n = _thread_count(threads)
    if n == 1 or len(valid) < 2:
        results = _predict_shard(model, valid) if valid else []
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = [r for part in pool.map(lambda s: _predict_shard(model, s), _shards(valid, n)) for r in part]
    found = iter(results)
    records = []
    for q in queries:
        if isinstance(q, QueryError):
            records.append({"trip_id": q.trip_id, "error": q.message})
        else:
            records.append(next(found))
    return records
