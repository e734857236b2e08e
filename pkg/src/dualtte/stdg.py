"""Spatio-temporal dual graph learning layer.

Representations are laid out ``(..., T, N, d)``: optional leading batch
axes, then time slots, then graph vertices (intersections or links), then
channels.  Graph operators mix the vertex axis, temporal convolutions and
GRUs run along the time axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    conv1d_prepad,
    getitem,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
)

GRU_GATES = ("u", "x", "h")


@dataclass(frozen=True)
class StdgConfig:
    n_cells: int = 3
    dim: int = 20
    history: int = 12
    kernel: int = 3
    multiscale: bool = True
    use_tcn: bool = True
    use_gcn: bool = True
    node_stream: bool = True
    edge_stream: bool = True
    use_p: bool = True
    separate_direction_weights: bool = False

    def __post_init__(self) -> None:
        if self.n_cells < 1:
            raise ValueError("the layer needs at least one cell (n >= 1)")
        if not (self.node_stream or self.edge_stream):
            raise ValueError("at least one of the node and edge streams must be enabled")


@dataclass
class GraphOperators:
    """Constant propagation operators shared by every forward pass."""

    L_n: np.ndarray
    L_nT: np.ndarray
    L_e: np.ndarray
    L_eT: np.ndarray
    P: np.ndarray
    PT: np.ndarray
    L_nS: np.ndarray = field(init=False)
    L_eS: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.L_nS = self.L_n + self.L_nT
        self.L_eS = self.L_e + self.L_eT

    @classmethod
    def from_dual(cls, dual, use_p: bool = True) -> "GraphOperators":
        P = dual.P if use_p else np.zeros_like(dual.P)
        return cls(dual.L_n, dual.L_nT, dual.L_e, dual.L_eT, P, np.ascontiguousarray(P.T))


def gcn_forward(Z, L, LT, W, W_rev=None, L_sym=None) -> Tensor:
    """relu(L Z W + L^T Z W'), with W' = W unless a reverse weight is given.

    With a shared weight the two terms collapse to (L + L^T) Z W; pass the
    precomputed sum as ``L_sym`` to use one propagation instead of two.
    """
    ZW = matmul(Z, W)
    if W_rev is None:
        return relu(matmul(L + LT if L_sym is None else L_sym, ZW))
    return relu(add(matmul(L, ZW), matmul(LT, matmul(Z, W_rev))))


def tcn_forward(Z, theta1, bias1, theta2, bias2, time_axis: int = -3) -> Tensor:
    """Gated causal temporal convolution: tanh(conv_1(Z)) * sigmoid(conv_2(Z)).

    The convolution runs independently for every vertex along ``time_axis``.
    """
    d = theta1.shape[-1]
    ab = conv1d_prepad(Z, concat([theta1, theta2], axis=-1), concat([bias1, bias2], axis=-1), time_axis=time_axis)
    return mul(tanh(getitem(ab, (..., slice(0, d)))), sigmoid(getitem(ab, (..., slice(d, 2 * d)))))


def dgcn_forward(Z_n, Z_e, P, PT, L_n, L_nT, L_e, L_eT, theta_n, theta_e,
                 edge_cross=None, theta_n_rev=None, theta_e_rev=None) -> tuple[Tensor, Tensor]:
    """Dual graph convolution, node update first.

    Z_n' = GCN_n([Z_n, P X_e]) with X_e = ``edge_cross`` (default Z_e), then
    Z_e' = GCN_e([Z_e, P^T Z_n']), so the edge update sees the updated nodes.
    """
    cross = Z_e if edge_cross is None else edge_cross
    zn = gcn_forward(concat([Z_n, matmul(P, cross)], axis=-1), L_n, L_nT, theta_n, theta_n_rev)
    ze = gcn_forward(concat([Z_e, matmul(PT, zn)], axis=-1), L_e, L_eT, theta_e, theta_e_rev)
    return zn, ze


def gru_cell(r, c_prev, p: dict) -> Tensor:
    """One GRU step; ``p`` holds W_*, U_*, b_* for the gates u, x and h.

    Works row-wise on any ``(..., d)`` block, so one call updates every
    time slot and vertex at once.
    """
    d = p["U_u"].shape[0]
    # one product per input for all gates; column blocks are u, x, h
    rw = matmul(r, concat([p["W_u"], p["W_x"], p["W_h"]], axis=-1))
    cu = matmul(c_prev, concat([p["U_u"], p["U_x"]], axis=-1))
    u = sigmoid(getitem(rw, (..., slice(0, d))) + getitem(cu, (..., slice(0, d))) + p["b_u"])
    x = sigmoid(getitem(rw, (..., slice(d, 2 * d))) + getitem(cu, (..., slice(d, 2 * d))) + p["b_x"])
    cand = tanh(getitem(rw, (..., slice(2 * d, 3 * d))) + matmul(mul(x, c_prev), p["U_h"]) + p["b_h"])
    return add(mul(u, c_prev), mul(sub(1.0, u), cand))


def project_next_interval(r, W_fc) -> Tensor:
    """Flatten each vertex's ``T x d`` history and map it to width d."""
    T, N, d = r.shape[-3:]
    lead = r.shape[:-3]
    nd = len(r.shape)
    flat = reshape(transpose(r, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)), lead + (N, T * d))
    return matmul(flat, W_fc)


# parameters ---------------------------------------------------------------

def parameter_shapes(cfg: StdgConfig) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """name -> (shape, fan_in, fan_out); names ending in a bias marker are zero-initialised."""
    d, k, T = cfg.dim, cfg.kernel, cfg.history
    out: dict[str, tuple[tuple[int, ...], int, int]] = {}
    streams = [s for s, on in (("node", cfg.node_stream), ("edge", cfg.edge_stream)) if on]
    for l in range(1, cfg.n_cells + 1):
        for s in streams:
            base = f"stdg.cell{l}.{s}"
            out[f"{base}.gcn"] = ((d, d), d, d)
            if cfg.separate_direction_weights:
                out[f"{base}.gcn_rev"] = ((d, d), d, d)
            for j in (1, 2):
                out[f"{base}.tcn.theta{j}"] = ((k, d, d), k * d, k * d)
                out[f"{base}.tcn.bias{j}"] = ((d,), 0, 0)
        if l >= 2:
            own = 2 * d if cfg.multiscale else d
            for tag, on in (("n", cfg.node_stream), ("e", cfg.edge_stream)):
                if on:
                    out[f"stdg.dgcn{l}.{tag}"] = ((own + d, d), own + d, d)
                    if cfg.separate_direction_weights:
                        out[f"stdg.dgcn{l}.{tag}_rev"] = ((own + d, d), own + d, d)
    if cfg.multiscale and cfg.n_cells >= 3:
        for tag, on in (("n", cfg.node_stream), ("e", cfg.edge_stream)):
            if on:
                for gate in GRU_GATES:
                    out[f"stdg.gru.{tag}.W_{gate}"] = ((d, d), d, d)
                    out[f"stdg.gru.{tag}.U_{gate}"] = ((d, d), d, d)
                    out[f"stdg.gru.{tag}.b_{gate}"] = ((d,), 0, 0)
    for tag, on in (("n", cfg.node_stream), ("e", cfg.edge_stream)):
        if on:
            out[f"stdg.fc.{tag}"] = ((T * d, d), T * d, d)
    return out


def _group(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _zeros_like_stream(ref: Tensor, n_vertices: int, d: int) -> Tensor:
    return Tensor(np.zeros(ref.shape[:-2] + (n_vertices, d)))


class _Streams:
    def __init__(self, cfg: StdgConfig, ops: GraphOperators, params: dict):
        self.cfg, self.ops, self.params = cfg, ops, params

    def spatial_temporal(self, l: int, stream: str, Z: Tensor) -> Tensor:
        cfg, p = self.cfg, self.params
        base = f"stdg.cell{l}.{stream}"
        if cfg.use_gcn:
            ops = self.ops
            L, LT, LS = (ops.L_n, ops.L_nT, ops.L_nS) if stream == "node" else (ops.L_e, ops.L_eT, ops.L_eS)
            Z = gcn_forward(Z, L, LT, p[f"{base}.gcn"], p.get(f"{base}.gcn_rev"), LS)
        if cfg.use_tcn:
            Z = tcn_forward(Z, p[f"{base}.tcn.theta1"], p[f"{base}.tcn.bias1"],
                            p[f"{base}.tcn.theta2"], p[f"{base}.tcn.bias2"])
        return Z

    def dual(self, l: int, in_n, in_e, cross_e):
        """Both streams' dual graph update; a disabled stream stays zero."""
        cfg, ops, p = self.cfg, self.ops, self.params
        zn = ze = None
        if cfg.node_stream:
            zn = gcn_forward(concat([in_n, matmul(ops.P, cross_e)], axis=-1), ops.L_n, ops.L_nT,
                             p[f"stdg.dgcn{l}.n"], p.get(f"stdg.dgcn{l}.n_rev"), ops.L_nS)
        if cfg.edge_stream:
            node_now = zn if zn is not None else Tensor(np.zeros(in_e.shape[:-2] + (ops.P.shape[0], cfg.dim)))
            ze = gcn_forward(concat([in_e, matmul(ops.PT, node_now)], axis=-1), ops.L_e, ops.L_eT,
                             p[f"stdg.dgcn{l}.e"], p.get(f"stdg.dgcn{l}.e_rev"), ops.L_eS)
        return zn, ze


def multiscale_forward(r_n0, r_e0, ops: GraphOperators, params: dict, cfg: StdgConfig) -> tuple[Tensor | None, Tensor | None]:
    """Stack ``cfg.n_cells`` cells with the GRU-filtered multi-scale recursion.

    Layer 1 applies S then T per stream.  Layer 2 feeds ``[r0, r1]`` of each
    stream into the dual convolution.  Every later layer l+1 feeds
    ``[c^(l-1), r^(l)]`` with ``c^(l-1) = G(r^(l-1), c^(l-2))``: the GRU
    recurs over depth, starting from ``c^(-1) = 0``, and acts on each time
    slot and vertex separately so no slot sees a later one.  The other
    stream's ``r^(l)`` supplies the incidence-coupled term of the node
    update.  Returns the final layer of each stream (``None`` if disabled).
    """
    if cfg.n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    st = _Streams(cfg, ops, params)
    d = cfg.dim
    rn: list = [r_n0 if cfg.node_stream else None]
    re: list = [r_e0 if cfg.edge_stream else None]
    rn.append(st.spatial_temporal(1, "node", rn[0]) if cfg.node_stream else None)
    re.append(st.spatial_temporal(1, "edge", re[0]) if cfg.edge_stream else None)
    gru = {"n": _group(params, "stdg.gru.n."), "e": _group(params, "stdg.gru.e.")}
    carry: dict = {"n": None, "e": None}

    def filtered(tag: str, r: list, l: int):
        if l == 3:
            zero = Tensor(np.zeros(r[0].shape[:-1] + (d,)))
            carry[tag] = gru_cell(r[0], zero, gru[tag])
        carry[tag] = gru_cell(r[l - 2], carry[tag], gru[tag])
        return concat([carry[tag], r[l - 1]], axis=-1)

    for l in range(2, cfg.n_cells + 1):
        if not cfg.multiscale:
            in_n, in_e = rn[l - 1], re[l - 1]
        elif l == 2:
            in_n = concat([rn[0], rn[1]], axis=-1) if cfg.node_stream else None
            in_e = concat([re[0], re[1]], axis=-1) if cfg.edge_stream else None
        else:
            in_n = filtered("n", rn, l) if cfg.node_stream else None
            in_e = filtered("e", re, l) if cfg.edge_stream else None
        cross_e = re[l - 1] if cfg.edge_stream else Tensor(np.zeros(rn[l - 1].shape[:-2] + (ops.P.shape[1], d)))
        zn, ze = st.dual(l, in_n, in_e, cross_e)
        rn.append(st.spatial_temporal(l, "node", zn) if cfg.node_stream else None)
        re.append(st.spatial_temporal(l, "edge", ze) if cfg.edge_stream else None)
    return rn[-1], re[-1]
