"""Command-line entry point: ``dualtte <subcommand> [flags]``.

Exit status is 0 on success, 1 when inputs fail validation (one ``error:``
line per problem on stderr) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .numerics import CheckpointError
from .pipeline.baseline import avg_baseline
from .pipeline.config import ABLATIONS, ConfigError, load_config, write_kv
from .pipeline.metrics import MetricsReport
from .pipeline.model import Model
from .pipeline.synth import SynthSpec, gen_synthetic
from .pipeline.train import QueryError, TrainingDiverged, evaluate, predict, split_dataset, train
from .roadnet import (
    NetworkError,
    TripError,
    UnknownIdError,
    build_dual_graph,
    load_network,
    parse_query,
    read_trips,
    write_network,
    write_trips,
    write_triplets,
)

log = logging.getLogger("dualtte")

VALIDATION_ERRORS = (ConfigError, NetworkError, TripError, CheckpointError, TrainingDiverged, ValueError, OSError)


class _Parser(argparse.ArgumentParser):
    def require(self, args: argparse.Namespace, *names: str) -> None:
        missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
        if missing:
            self.error(f"missing required path: {', '.join(missing)}")


def _add_data(p: argparse.ArgumentParser, trips: bool = True) -> None:
    p.add_argument("--nodes", type=Path, help="nodes CSV")
    p.add_argument("--links", type=Path, help="links CSV")
    if trips:
        p.add_argument("--trips", type=Path, help="JSON-lines trips (queries for predict)")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cells", type=int)
    p.add_argument("--dim", type=int)
    for flag, key in ABLATIONS.items():
        p.add_argument(f"--{flag}", dest=key, action="store_const", const=False, default=None)


def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("json", "table"), default="table")


def build_parser() -> _Parser:
    parser = _Parser(prog="dualtte", description="Dual-graph travel time estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=argparse.ArgumentParser)
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate a synthetic network and trips")
    p.add_argument("--config", type=Path, help="synthetic city settings (key = value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("build-graph", help="build the dual graph and dump it as triplets")
    _add_data(p)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("train", help="train a model")
    _add_data(p)
    _add_training(p)
    _add_format(p)
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on trips")
    _add_data(p)
    _add_format(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="metrics JSON file")

    p = sub.add_parser("predict", help="estimate travel times for path queries")
    _add_data(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="predictions JSON-lines file")

    p = sub.add_parser("baseline", help="AVG baseline on the test split")
    _add_data(p)
    _add_format(p)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="metrics JSON file")
    return parser


def _emit(rep: MetricsReport, fmt: str, out: Path | None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_json() + "\n", encoding="utf-8")
    print(rep.to_json() if fmt == "json" else rep.to_table())


def _load(args):
    net = load_network(args.nodes, args.links)
    trips = read_trips(args.trips, net).trips if getattr(args, "trips", None) is not None else []
    return net, trips


def _training_config(args):
    overrides = {k: getattr(args, k) for k in ("seed", "epochs", "lr", "cells", "dim")}
    overrides.update({key: getattr(args, key) for key in ABLATIONS.values()})
    return load_config(args.config, **overrides)


def cmd_gen_synth(args) -> int:
    spec = SynthSpec.load(args.config) if args.config else SynthSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    net, trips = gen_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    write_network(net, args.out / "nodes.csv", args.out / "links.csv")
    write_trips(trips, net, args.out / "trips.jsonl")
    spec.save(args.out / "synth.cfg")
    print(f"{net.n_nodes} intersections, {net.n_links} links, {len(trips)} trips -> {args.out}")
    return 0


def cmd_build_graph(args) -> int:
    cfg = load_config(args.config)
    net, trips = _load(args)
    dual = build_dual_graph(net, trips, cfg.sigma_mode)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, M in (("W_n", dual.W_n), ("W_e", dual.W_e), ("P", dual.P)):
        write_triplets(M, args.out / f"{name}.csv")
    observed = int((dual.W_e.sum(axis=1) > 0).sum())
    print(f"nodes {net.n_nodes}  links {net.n_links}  sigma {dual.sigma:.6g}  "
          f"node-graph nonzeros {int((dual.W_n != 0).sum())}  observed link rows {observed}")
    return 0


def cmd_train(args) -> int:
    cfg = _training_config(args)
    net, trips = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    write_kv(cfg.to_dict(), args.out / "config.cfg")
    res = train(cfg, net, trips, out_dir=args.out)
    test = res.split[2]
    rep = evaluate(res.model, test) if test else MetricsReport()
    log.info("best epoch %d of %d", res.best_epoch, len(res.history))
    _emit(rep, args.format, args.out / "test_metrics.json")
    return 0


def cmd_eval(args) -> int:
    net, trips = _load(args)
    model = Model.load(args.checkpoint, net)
    _emit(evaluate(model, trips), args.format, args.out)
    return 0


def _read_queries(path: Path, net) -> list:
    queries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TripError(f"line {n}: {exc}") from None
        try:
            queries.append(parse_query(record, net))
        except UnknownIdError as exc:
            queries.append(QueryError(str(record.get("trip_id")), str(exc)))
        except (TripError, TypeError, ValueError) as exc:
            raise TripError(f"line {n}: {exc}") from None
    return queries


def cmd_predict(args) -> int:
    net = load_network(args.nodes, args.links)
    model = Model.load(args.checkpoint, net)
    records = predict(model, _read_queries(args.trips, net))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    failed = sum("error" in r for r in records)
    print(f"{len(records) - failed} predictions, {failed} error record(s) -> {args.out}")
    return 0


def cmd_baseline(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    net, trips = _load(args)
    train_set, _, test_set = split_dataset(trips, cfg.fractions, cfg.seed)
    _emit(avg_baseline(net, train_set, test_set, cfg.grid, cfg.default_speed), args.format, args.out)
    return 0


COMMANDS = {
    "gen-synth": (cmd_gen_synth, ("out",)),
    "build-graph": (cmd_build_graph, ("nodes", "links", "trips", "out")),
    "train": (cmd_train, ("nodes", "links", "trips", "out")),
    "eval": (cmd_eval, ("nodes", "links", "trips", "checkpoint")),
    "predict": (cmd_predict, ("nodes", "links", "trips", "checkpoint", "out")),
    "baseline": (cmd_baseline, ("nodes", "links", "trips")),
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler, required = COMMANDS[args.command]
    try:
        parser.require(args, *required)
    except SystemExit as exc:
        return int(exc.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return handler(args)
    except VALIDATION_ERRORS as exc:
        text = str(exc) or exc.__class__.__name__
        for line in text.split("; "):
            print(f"error: {line}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
