import logging
import math

import numpy as np
import pytest

from dualtte.numerics import CheckpointError, Tape, grad, make_rng
from dualtte.pipeline.baseline import AvgBaseline, avg_baseline
from dualtte.pipeline.config import ABLATIONS, ConfigError, TrainConfig, load_config, read_kv, write_kv
from dualtte.pipeline.metrics import ErrorStats, MetricsReport, path_metrics
from dualtte.pipeline.model import Model
from dualtte.pipeline.synth import SynthSpec, build_world, gen_synthetic
from dualtte.pipeline.train import (
    QueryError,
    build_model,
    departure_batches,
    evaluate,
    predict,
    slot_shuffled_batches,
    split_dataset,
    train,
)
from dualtte.roadnet import LINK, as_query, parse_query, parse_trip, read_trips, write_trips

from conftest import make_net
from oracles import central_diff, metrics, rel_err

SMALL = SynthSpec(rows=3, cols=3, trips=120, days=2, seed=5)
TINY = TrainConfig(cells=2, dim=4, hidden=6, history=3, epochs=2, batch_size=16, patience=5)


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(SMALL)


@pytest.fixture(scope="module")
def trained(small):
    net, trips = small
    return train(TINY, net, trips)


# config -------------------------------------------------------------------------

def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ndim = 8\nlr = 0.01\nmultiscale = false\n\n")
    cfg = load_config(path, lr=0.5, epochs=None)
    assert (cfg.dim, cfg.lr, cfg.multiscale, cfg.epochs) == (8, 0.5, False, 30)
    assert load_config() == TrainConfig()


def test_config_rejects_unknown_and_bad_values(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("dimension = 8\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)
    path.write_text("no equals sign\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(path)
    with pytest.raises(ConfigError) as info:
        TrainConfig(cells=0, lr=-1.0)
    assert len(str(info.value).split("; ")) == 2
    with pytest.raises(ConfigError):
        TrainConfig(node_stream=False, edge_stream=False)
    with pytest.raises(ConfigError):
        load_config(None, multiscale="maybe")
    with pytest.raises(ConfigError, match="lr_decay"):
        TrainConfig(lr_decay=0.0)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(dim=7, tcn=False, lr=0.002)
    write_kv(cfg.to_dict(), tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    assert read_kv(tmp_path / "c.cfg")["tcn"] == "false"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert set(ABLATIONS.values()) <= set(cfg.to_dict())


# metrics ------------------------------------------------------------------------

def test_metric_examples():
    rep = path_metrics([100.0, 200.0], [110.0, 190.0])
    assert rep.mae == pytest.approx(10.0, abs=1e-9)
    assert rep.rmse == pytest.approx(10.0, abs=1e-9)
    assert rep.mape == pytest.approx((10 / 110 + 10 / 190) / 2, abs=1e-12)
    assert abs(rep.mape - 0.07177) < 1e-5
    perfect = path_metrics([3.0, 4.0], [3.0, 4.0])
    assert (perfect.rmse, perfect.mae, perfect.mape) == (0.0, 0.0, 0.0)
    one = path_metrics([55.0], [50.0])
    assert (one.rmse, one.mae) == (5.0, 5.0) and one.mape == pytest.approx(0.1)


def test_metrics_match_oracle_and_rmse_dominates(rng):
    for _ in range(200):
        n = int(rng.integers(1, 20))
        truth = rng.uniform(1, 100, n)
        pred = truth + rng.normal(0, 10, n)
        rep = path_metrics(pred, truth)
        want = metrics(pred.tolist(), truth.tolist())
        assert np.allclose((rep.rmse, rep.mae, rep.mape), want, rtol=1e-12)
        assert rep.rmse >= rep.mae


def test_zero_truth_excluded_and_counted():
    st = ErrorStats()
    st.add([1.0, 5.0, 2.0], [0.0, 4.0, math.nan])
    assert st.n == 2 and st.ape_excluded == 1 and st.mape == pytest.approx(0.25)
    assert st.summary()["mape_excluded"] == 1


def test_merge_equals_pooled(rng):
    pred, truth = rng.uniform(1, 9, 30), rng.uniform(1, 9, 30)
    a = path_metrics(pred[:11], truth[:11]).merge(path_metrics(pred[11:], truth[11:]))
    b = path_metrics(pred, truth)
    assert np.allclose((a.rmse, a.mae, a.mape), (b.rmse, b.mae, b.mape), rtol=1e-13)


def test_report_formats():
    rep = path_metrics([100.0, 200.0], [110.0, 190.0])
    assert '"mape"' in rep.to_json()
    lines = rep.to_table().splitlines()
    assert lines[0].split()[0] == "task" and len({len(x) for x in lines}) == 1


# split and batching -------------------------------------------------------------

def test_split_sizes_and_order_invariance(small):
    _, trips = small
    tr, va, te = split_dataset(trips[:10], (0.7, 0.1, 0.2), seed=1)
    assert (len(tr), len(va), len(te)) == (7, 1, 2)
    ids = sorted(t.trip_id for t in tr + va + te)
    assert ids == sorted(t.trip_id for t in trips[:10])
    again = split_dataset(trips[:10][::-1], (0.7, 0.1, 0.2), seed=1)
    assert [t.trip_id for t in again[0]] == [t.trip_id for t in tr]
    with pytest.raises(ValueError):
        split_dataset(trips, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_dataset([], (0.7, 0.1, 0.2))


def test_departure_batches_are_sorted(small):
    _, trips = small
    chunks = departure_batches(trips[::-1], 16)
    flat = [t for c in chunks for t in c]
    assert [len(c) for c in chunks] == [16] * 7 + [8]
    assert [t.depart_ts for t in flat] == sorted(t.depart_ts for t in trips)


def test_slot_shuffled_batches_keep_slots_together(small):
    _, trips = small
    grid = TINY.grid
    chunks = slot_shuffled_batches(trips, 16, grid, make_rng(3))
    flat = [t for c in chunks for t in c]
    assert sorted(t.trip_id for t in flat) == sorted(t.trip_id for t in trips)
    assert all(len(c) == 16 for c in chunks[:-1])
    slots = [grid.slot_of(t.depart_ts) for t in flat]
    runs = [s for i, s in enumerate(slots) if i == 0 or s != slots[i - 1]]
    assert len(runs) == len(set(slots))
    assert runs != sorted(runs)
    again = slot_shuffled_batches(trips, 16, grid, make_rng(3))
    assert [[t.trip_id for t in c] for c in again] == [[t.trip_id for t in c] for c in chunks]


# baseline -----------------------------------------------------------------------

def _one_link_trip(net, tid, t, frac=1.0, depart=0.0):
    el = {"kind": "link", "id": "e0", "t": t}
    if frac != 1.0:
        el["frac"] = frac
    return parse_trip({"trip_id": tid, "depart_ts": depart, "elements": [el]}, net)


def test_baseline_examples():
    net = make_net(2, [(0, 1)], lengths=[100.0])
    base = AvgBaseline(net, [_one_link_trip(net, "a", 10.0)])
    assert base.predict(_one_link_trip(net, "q", 1.0)) == pytest.approx(10.0)
    assert base.predict(_one_link_trip(net, "q", 1.0, frac=0.5)) == pytest.approx(5.0)


def test_baseline_three_link_hand_sum():
    net = make_net(4, [(0, 1), (1, 2), (2, 3)], lengths=[100.0, 200.0, 300.0])

    def trip(tid, times):
        names = ["e0", "v1", "e1", "v2", "e2"]
        return parse_trip({"trip_id": tid, "depart_ts": 0.0, "elements": [
            {"kind": "link" if n[0] == "e" else "node", "id": n, "t": t} for n, t in zip(names, times)]}, net)

    # speeds 10, 20, 15 m/s; delays 3 and 5 s
    base = AvgBaseline(net, [trip("a", [10.0, 3.0, 10.0, 5.0, 20.0])])
    est = base.element_times(trip("q", [1.0] * 5))
    assert np.allclose(est, [10.0, 3.0, 10.0, 5.0, 20.0], rtol=1e-14)
    assert base.predict(trip("q", [1.0] * 5)) == pytest.approx(48.0, rel=1e-14)


def test_baseline_unseen_intersection_delay_is_zero():
    net = make_net(3, [(0, 1), (1, 2)], lengths=[100.0, 100.0])
    base = AvgBaseline(net, [])
    q = parse_trip({"trip_id": "q", "depart_ts": 0.0, "elements": [
        {"kind": "link", "id": "e0", "t": 1.0}, {"kind": "node", "id": "v1", "t": 1.0},
        {"kind": "link", "id": "e1", "t": 1.0}]}, net)
    assert np.array_equal(base.element_times(q), [12.5, 0.0, 12.5])


def test_baseline_exact_on_noise_free_data():
    net, trips = gen_synthetic(SynthSpec.degenerate(rows=3, cols=3, trips=300, days=2, seed=2))
    tr, _, te = split_dataset(trips, (0.7, 0.1, 0.2), 0)
    rep = avg_baseline(net, tr, te)
    assert rep.mape < 1e-9 and rep.tasks["link"].mape < 1e-9


# synthetic data -----------------------------------------------------------------

def test_synthetic_is_deterministic(tmp_path, small):
    net, trips = small
    write_trips(trips, net, tmp_path / "a.jsonl")
    net2, trips2 = gen_synthetic(SMALL)
    write_trips(trips2, net2, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    net3, trips3 = gen_synthetic(SMALL.replace(seed=6))
    assert [t.times for t in trips3] != [t.times for t in trips]


def test_synthetic_trips_are_valid(tmp_path, small):
    net, trips = small
    write_trips(trips, net, tmp_path / "t.jsonl")
    back = read_trips(tmp_path / "t.jsonl", net)
    assert back.skipped_unknown == 0 and len(back.trips) == len(trips)
    for t in trips:
        assert t.total == math.fsum(t.times) and all(x > 0 for x in t.times)
        assert t.kinds[0] == LINK and t.kinds[-1] == LINK


def test_degenerate_times_are_free_flow():
    spec = SynthSpec.degenerate(rows=3, cols=3, trips=50, days=1, seed=4)
    world = build_world(spec)
    net, trips = gen_synthetic(spec, world)
    for t in trips:
        want = [f * net.length[i] / world.base_speed[i] if k == LINK else 0.0
                for k, i, f in zip(t.kinds, t.index, t.fracs)]
        assert list(t.times) == want


def test_rush_hour_slows_traffic():
    kw = dict(rows=3, cols=3, trips=600, days=1, seed=1, noise_sigma=0.0, day_sigma=0.0, incidents_per_day=0.0)
    net, trips = gen_synthetic(SynthSpec(**kw))
    world = build_world(SynthSpec(**kw))

    def ratio(t):
        free = sum(f * net.length[i] / world.base_speed[i] for k, i, f in zip(t.kinds, t.index, t.fracs) if k == LINK)
        return sum(x for k, x in zip(t.kinds, t.times) if k == LINK) / free

    hour = lambda t: (t.depart_ts % 86400) / 3600
    rush = [ratio(t) for t in trips if 7.5 <= hour(t) <= 8.5]
    calm = [ratio(t) for t in trips if 12.5 <= hour(t) <= 14.0]
    assert min(calm) >= 1.0 - 1e-12 and np.mean(rush) > np.mean(calm) * 1.2


# training -----------------------------------------------------------------------

def test_zero_learning_rate_keeps_loss_constant(small):
    net, trips = small
    res = train(TINY.replace(lr=0.0, epochs=3), net, trips)
    losses = [r.train_loss for r in res.history]
    assert losses[0] == losses[1] == losses[2]
    fresh = build_model(TINY, net, res.split[0])
    for k, v in fresh.params.items():
        assert np.array_equal(v.data, res.model.params[k].data)


def test_training_is_bitwise_reproducible(tmp_path, small):
    net, trips = small
    train(TINY, net, trips, out_dir=tmp_path / "a")
    train(TINY, net, trips, out_dir=tmp_path / "b")
    for name in ("history.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,val_rmse,val_mae,val_mape"


def test_training_reduces_loss(small):
    net, trips = small
    res = train(TINY.replace(epochs=4, lr=0.01), net, trips)
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_ablations_train(small):
    net, trips = small
    for key in ABLATIONS.values():
        res = train(TINY.replace(epochs=1, **{key: False}), net, trips)
        assert math.isfinite(res.history[0].train_loss), key


def test_checkpoint_round_trip(tmp_path, small, trained):
    net, trips = small
    trained.model.save(tmp_path / "m.ckpt")
    back = Model.load(tmp_path / "m.ckpt", net)
    test = trained.split[2]
    a = trained.model.forward(test)
    b = back.forward(test)
    assert np.array_equal(a.path.data, b.path.data)
    assert np.array_equal(a.links.data, b.links.data)
    other, _ = gen_synthetic(SMALL.replace(rows=4, trips=5))
    with pytest.raises(CheckpointError, match="network"):
        Model.load(tmp_path / "m.ckpt", other)


def test_best_epoch_parameters_restored(small):
    net, trips = small
    res = train(TINY.replace(epochs=3, lr=0.05), net, trips)
    best = min(res.history, key=lambda r: r.val_loss)
    assert res.best_epoch == best.epoch
    rep = evaluate(res.model, res.split[1])
    assert rep.mape == pytest.approx(best.val_mape, rel=1e-12)


def test_learning_rate_halves_after_stale_epochs(small, caplog):
    net, trips = small
    cfg = TINY.replace(epochs=8, lr=0.2, lr_patience=1, patience=8)
    with caplog.at_level(logging.INFO, logger="dualtte.pipeline.train"):
        res = train(cfg, net, trips)
    rates = [float(r.getMessage().split()[-1]) for r in caplog.records if "learning rate" in r.getMessage()]
    best, stale = math.inf, 0
    for rec in res.history:
        if rec.val_loss < best:
            best = rec.val_loss
        else:
            stale += 1
    assert stale > 0
    assert rates == pytest.approx([0.2 * 0.5 ** k for k in range(1, stale + 1)])


# evaluation and prediction ------------------------------------------------------

def test_evaluate_is_order_and_shard_invariant(small, trained, rng):
    test = trained.split[2]
    a = evaluate(trained.model, test)
    b = evaluate(trained.model, [test[i] for i in rng.permutation(len(test))])
    c = evaluate(trained.model, test, threads=3)
    for t in a.tasks:
        for r in (b, c):
            assert np.allclose(
                (a.tasks[t].rmse, a.tasks[t].mae, a.tasks[t].mape),
                (r.tasks[t].rmse, r.tasks[t].mae, r.tasks[t].mape), rtol=1e-12)
    assert a.count == len(test) and a.rmse >= a.mae
    assert all(math.isfinite(a.tasks[t].mape) for t in a.tasks)


def test_predict_records(small, trained):
    net, _ = small
    test = trained.split[2]
    queries = [as_query(test[0]), QueryError("bad", "unknown link"), as_query(test[0])]
    one = parse_query({"trip_id": "solo", "depart_ts": test[1].depart_ts,
                       "elements": [{"kind": "link", "id": net.link_ids[0], "frac": 0.5}]}, net)
    recs = predict(trained.model, queries + [one])
    assert recs[1] == {"trip_id": "bad", "error": "unknown link"}
    assert recs[0] == recs[2]
    assert len(recs[0]["per_element"]) == len(test[0].kinds)
    assert all(e["t_s"] > 0 for e in recs[0]["per_element"]) and recs[0]["t_path_s"] > 0
    assert len(recs[3]["per_element"]) == 1 and recs[3]["per_element"][0]["kind"] == "link"
    # sharding changes batch composition, which may move the last bit
    sharded = predict(trained.model, queries, threads=2)
    assert sharded[1] == recs[1]
    for got, want in zip(sharded[::2], recs[:3:2]):
        assert got["t_path_s"] == pytest.approx(want["t_path_s"], rel=1e-12)


# full-model gradient ------------------------------------------------------------

def test_full_model_gradient_on_two_node_network():
    net = make_net(2, [(0, 1)], lengths=[250.0])
    trips = [_one_link_trip(net, f"t{i}", 20.0 + 3 * i, depart=300.0 * i) for i in range(6)]
    cfg = TrainConfig(cells=3, dim=3, hidden=4, history=2, batch_size=8)
    model = build_model(cfg, net, trips)
    rng = np.random.default_rng(0)
    for v in model.params.values():
        v.data = v.data + rng.normal(0, 0.3, v.shape)

    def loss():
        return model.loss(model.forward(trips), trips)[0]

    with Tape():
        g = grad(loss(), model.params)
    num = central_diff(lambda: loss().item(), {k: v.data for k, v in model.params.items()})
    for k in model.params:
        floor = 1e-5 * max(1.0, float(np.abs(num[k]).max()))
        assert rel_err(g[k], num[k], floor=floor) < 1e-3, k


def test_every_link_gets_forced_coverage():
    spec = SynthSpec(rows=3, cols=3, trips=400, days=1, seed=3, min_link_trips=5)
    net, trips = gen_synthetic(spec)
    seen = np.zeros(net.n_links, dtype=int)
    for t in trips:
        for k, i in zip(t.kinds, t.index):
            if k == LINK:
                seen[i] += 1
        links = [i for k, i in zip(t.kinds, t.index) if k == LINK]
        assert len(set(links)) == len(links) and spec.min_hops <= len(links) <= spec.max_hops
    assert seen.min() >= 5
