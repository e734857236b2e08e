"""The full estimator: parameters, frozen data context, forward pass, checkpoint I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import mtl, stdg
from ..features import FeatureEncoder, LinkDynamic, augment_intersection_features, augment_link_features
from ..numerics import CheckpointError, Tensor, glorot_uniform, load_checkpoint, make_rng, save_checkpoint
from ..roadnet import LINK, DualGraph, RoadNetwork, build_dual_graph
from .config import TrainConfig

CHECKPOINT_KIND = "dualtte-model"


@dataclass
class TargetScales:
    """Mean targets from the training split; heads emit multiples of these."""

    path: float = 1.0
    link: float = 1.0
    node: float = 1.0

    @classmethod
    def fit(cls, trips) -> "TargetScales":
        totals = [t.total for t in trips]
        links = [x for t in trips for k, x in zip(t.kinds, t.times) if k == LINK]
        nodes = [x for t in trips for k, x in zip(t.kinds, t.times) if k != LINK and not math.isnan(x)]

        def positive_mean(v):
            m = math.fsum(v) / len(v) if v else 0.0
            return m if m > 0 else 1.0

        return cls(positive_mean(totals), positive_mean(links), positive_mean(nodes))


def parameter_shapes(cfg: TrainConfig, link_input_dim: int) -> dict[str, tuple[tuple[int, ...], int, int]]:
    d = cfg.dim
    out = {
        "features.W_a": ((link_input_dim, d), link_input_dim, d),
        "features.W_b": ((d + FeatureEncoder.node_input_extra, d), d + FeatureEncoder.node_input_extra, d),
    }
    out.update(stdg.parameter_shapes(cfg.stdg))
    out.update(mtl.parameter_shapes(d, cfg.hidden))
    return out


def init_parameters(cfg: TrainConfig, link_input_dim: int, seed: int | None = None) -> dict[str, Tensor]:
    """Glorot-uniform weights and zero biases, drawn in a fixed name order."""
    rng = make_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, (shape, fan_in, fan_out) in parameter_shapes(cfg, link_input_dim).items():
        data = glorot_uniform(rng, shape, fan_in, fan_out) if fan_in else np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class Outputs:
    path: Tensor        # (B,)
    links: Tensor       # (B, n_link_max)
    nodes: Tensor       # (B, n_node_max)
    batch: mtl.PathBatch


class Model:
    """Parameters plus everything frozen at training time that inference needs."""

    def __init__(self, cfg: TrainConfig, net: RoadNetwork, dual: DualGraph, dyn: LinkDynamic,
                 encoder: FeatureEncoder, scales: TargetScales, params: dict[str, Tensor]):
        self.cfg, self.net, self.dual, self.dyn = cfg, net, dual, dyn
        self.encoder, self.scales, self.params = encoder, scales, params
        self.ops = stdg.GraphOperators.from_dual(dual, use_p=cfg.p_matrix)
        self._link_static = encoder.link_static(net)
        self._node_static = encoder.node_static(net)
        self._inputs: dict[int, np.ndarray] = {}

    # inputs ---------------------------------------------------------------

    def window_inputs(self, depart_slot: int) -> np.ndarray:
        """Standardised ``(T, E, F)`` link inputs for the slots before ``depart_slot``."""
        hit = self._inputs.get(depart_slot)
        if hit is None:
            speeds, _ = self.dyn.speeds(self.cfg.grid.window(depart_slot))
            hit = self.encoder.link_inputs(speeds, self._link_static)
            self._inputs[depart_slot] = hit
        return hit

    # forward --------------------------------------------------------------

    def representations(self, slots) -> tuple[Tensor, Tensor]:
        """Next-interval representations ``(S, V, d)`` and ``(S, E, d)`` for departure slots."""
        p, cfg = self.params, self.cfg
        x = np.stack([self.window_inputs(int(s)) for s in slots])
        h_e = augment_link_features(x, p["features.W_a"])
        z_v = augment_intersection_features(h_e, self.dual.P, self._node_static, p["features.W_b"])
        rn, re = stdg.multiscale_forward(z_v, h_e, self.ops, p, cfg.stdg)
        S, d = len(slots), cfg.dim
        Z_n = stdg.project_next_interval(rn, p["stdg.fc.n"]) if rn is not None \
            else Tensor(np.zeros((S, self.net.n_nodes, d)))
        Z_e = stdg.project_next_interval(re, p["stdg.fc.e"]) if re is not None \
            else Tensor(np.zeros((S, self.net.n_links, d)))
        return Z_n, Z_e

    def forward(self, paths) -> Outputs:
        """Estimate a batch of paths (anything with kinds/index/fracs/depart_ts)."""
        paths = list(paths)
        grid = self.cfg.grid
        dep = [grid.slot_of(q.depart_ts) for q in paths]
        slots = sorted(set(dep))
        row = {s: i for i, s in enumerate(slots)}
        batch = mtl.PathBatch.build(paths, [row[s] for s in dep], self.net.n_links, self.net.n_nodes)
        Z_n, Z_e = self.representations(slots)
        q_l, q_v = mtl.select_path_reps(Z_n, Z_e, batch)
        c_l, c_v = mtl.path_gru_forward(q_l, q_v, batch, self.params)
        t_l, t_v = mtl.local_heads(c_l, c_v, self.params, self.scales.link, self.scales.node)
        t_p = mtl.global_head(c_l, c_v, batch, self.params, self.scales.path)
        return Outputs(t_p, t_l, t_v, batch)

    def loss(self, out: Outputs, trips) -> tuple[Tensor, dict[str, float]]:
        """Combined objective and its components for a batch of trips with ground truth."""
        b = out.batch
        tl = np.zeros(b.link_mask.shape)
        tv = np.full(b.node_mask.shape, np.nan)
        for r, trip in enumerate(trips):
            times = np.asarray(trip.times)
            lt, vt = times[0::2], times[1::2]
            tl[r, :lt.size] = lt
            tv[r, :vt.size] = vt
        w = self.cfg.loss_weights
        L_P = mtl.loss_global(out.path, [t.total for t in trips])
        L_l = mtl.loss_links(out.links, tl, w.eps, mask=b.link_mask)
        L_v = mtl.loss_intersections(out.nodes, tv, w.eps, mask=b.node_mask) if b.node_mask.size else None
        total = mtl.loss_combined(L_P, L_l, L_v, w)
        parts = {"path": L_P.item(), "link": L_l.item(), "intersection": math.nan if L_v is None else L_v.item()}
        return total, parts

    # persistence ----------------------------------------------------------

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        config = {
            "kind": CHECKPOINT_KIND,
            "train": self.cfg.to_dict(),
            "encoder": self.encoder.to_dict(),
            "scales": {"path": self.scales.path, "link": self.scales.link, "node": self.scales.node},
            "network": {"fingerprint": self.net.fingerprint(), "nodes": self.net.n_nodes, "links": self.net.n_links},
            "default_speed": self.dyn.default_speed,
        }
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["buffer.W_e"] = self.dual.W_e
        arrays.update({f"buffer.{k}": v for k, v in self.dyn.to_arrays().items()})
        return config, arrays

    def save(self, path) -> None:
        config, arrays = self.state()
        save_checkpoint(path, config, arrays)

    @classmethod
    def load(cls, path, net: RoadNetwork) -> "Model":
        config, arrays = load_checkpoint(path)
        return cls.from_state(config, arrays, net)

    @classmethod
    def from_state(cls, config: dict, arrays: dict[str, np.ndarray], net: RoadNetwork) -> "Model":
        if config.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError("not a model checkpoint")
        fp = config["network"]["fingerprint"]
        if fp != net.fingerprint():
            raise CheckpointError(f"checkpoint was trained on network {fp}, given network is {net.fingerprint()}")
        cfg = TrainConfig.from_dict(config["train"])
        encoder = FeatureEncoder.from_dict(config["encoder"])
        dyn = LinkDynamic.from_arrays(cfg.grid, net.n_links, {"cells": arrays["buffer.cells"]},
                                      float(config["default_speed"]))
        dual = build_dual_graph(net, [], cfg.sigma_mode, W_e=arrays["buffer.W_e"])
        scales = TargetScales(**config["scales"])
        expected = parameter_shapes(cfg, encoder.link_input_dim)
        params = {}
        for name, (shape, _, _) in expected.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != shape:
                raise CheckpointError(f"parameter {name} has shape {arrays[name].shape}, expected {shape}")
            params[name] = Tensor(arrays[name].copy(), requires_grad=True, name=name)
        return cls(cfg, net, dual, dyn, encoder, scales, params)
