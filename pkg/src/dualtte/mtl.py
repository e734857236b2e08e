"""Multi-task layer: path recurrence, local and global heads, MAPE losses.

Paths are batched into padded blocks.  Because every path alternates
link, intersection, link, ... and ends on a link, the element kind at
position i is fixed by its parity, so one step of the recurrence can serve
the whole batch with a single parameter set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add, getitem, matmul, mul, relu, reshape, sigmoid, softplus, stack, sub, tabs, tanh, tsum
from .roadnet import LINK, NODE

log = logging.getLogger(__name__)

PATH_GATES = ("u", "r", "h")
KINDS = ("link", "node")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.4
    beta: float = 0.3
    eps: float = 5.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha + self.beta > 1 + 1e-12:
            raise ValueError(f"alpha + beta = {self.alpha + self.beta} exceeds 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def parameter_shapes(dim: int, hidden: int = 60) -> dict[str, tuple[tuple[int, ...], int, int]]:
    out: dict[str, tuple[tuple[int, ...], int, int]] = {}
    for kind in KINDS:
        for g in PATH_GATES:
            out[f"mtl.gru.{kind}.W_{g}"] = ((dim, dim), dim, dim)
            out[f"mtl.gru.{kind}.U_{g}"] = ((dim, dim), dim, dim)
            out[f"mtl.gru.{kind}.b_{g}"] = ((dim,), 0, 0)
    for head in ("link", "node", "path"):
        out[f"mtl.head.{head}.W1"] = ((dim, hidden), dim, hidden)
        out[f"mtl.head.{head}.b1"] = ((hidden,), 0, 0)
        out[f"mtl.head.{head}.W2"] = ((hidden, 1), hidden, 1)
        out[f"mtl.head.{head}.b2"] = ((1,), 0, 0)
    return out


@dataclass
class PathBatch:
    """Index arrays for a padded batch of alternating paths.

    ``link_idx``/``node_idx`` are row indices into the flattened
    ``(windows * n_links, d)`` and ``(windows * n_nodes, d)`` blocks; padded
    slots point at row 0 and are masked out.
    """

    link_idx: np.ndarray   # (B, n_link_max)
    link_frac: np.ndarray  # (B, n_link_max)
    link_mask: np.ndarray  # (B, n_link_max)
    node_idx: np.ndarray   # (B, n_node_max)
    node_mask: np.ndarray  # (B, n_node_max)

    @property
    def size(self) -> int:
        return self.link_idx.shape[0]

    @property
    def max_len(self) -> int:
        return 2 * self.link_idx.shape[1] - 1

    @classmethod
    def build(cls, paths, windows, n_links: int, n_nodes: int) -> "PathBatch":
        """``paths`` yield objects with kinds/index/fracs; ``windows[b]`` is the path's window row."""
        paths = list(paths)
        if not paths:
            raise ValueError("empty path batch")
        nl = max(sum(1 for k in p.kinds if k == LINK) for p in paths)
        nv = nl - 1
        B = len(paths)
        li = np.zeros((B, nl), dtype=np.int64)
        lf = np.zeros((B, nl))
        lm = np.zeros((B, nl))
        vi = np.zeros((B, max(nv, 0)), dtype=np.int64)
        vm = np.zeros((B, max(nv, 0)))
        for b, (p, w) in enumerate(zip(paths, windows)):
            if not p.kinds:
                raise ValueError("empty path")
            links = [(i, f) for k, i, f in zip(p.kinds, p.index, p.fracs) if k == LINK]
            nodes = [i for k, i in zip(p.kinds, p.index) if k == NODE]
            for j, (i, f) in enumerate(links):
                li[b, j] = w * n_links + i
                lf[b, j] = f
                lm[b, j] = 1.0
            for j, i in enumerate(nodes):
                vi[b, j] = w * n_nodes + i
                vm[b, j] = 1.0
        return cls(li, lf, lm, vi, vm)


def select_path_reps(Z_n, Z_e, batch: PathBatch) -> tuple[Tensor, Tensor]:
    """Gather per-element representations in path order.

    ``Z_n`` is ``(..., V, d)`` and ``Z_e`` is ``(..., E, d)``; leading axes are
    flattened to match the row indices in ``batch``.  Link rows are scaled
    by their traversal fraction.  Returns ``(q_links, q_nodes)`` of shapes
    ``(B, n_link_max, d)`` and ``(B, n_node_max, d)``.
    """
    d = Z_e.shape[-1]
    ze = reshape(Z_e, (-1, d))
    zn = reshape(Z_n, (-1, d))
    q_links = mul(getitem(ze, batch.link_idx), batch.link_frac[..., None])
    q_nodes = getitem(zn, batch.node_idx)
    return q_links, q_nodes


def _gates(p: dict, kind: str) -> dict:
    pre = f"mtl.gru.{kind}."
    return {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}


def path_gru_step(q, c, g: dict) -> Tensor:
    u = sigmoid(add(add(matmul(q, g["W_u"]), matmul(c, g["U_u"])), g["b_u"]))
    r = sigmoid(add(add(matmul(q, g["W_r"]), matmul(c, g["U_r"])), g["b_r"]))
    cand = tanh(add(add(matmul(q, g["W_h"]), matmul(mul(r, c), g["U_h"])), g["b_h"]))
    return add(mul(u, c), mul(sub(1.0, u), cand))


def path_gru_forward(q_links, q_nodes, batch: PathBatch, params: dict) -> tuple[Tensor, Tensor]:
    """Thread one hidden state through each alternating path.

    Even positions use the link cell, odd positions the intersection cell.
    Past a path's end the state is frozen.  Returns the states at link and
    intersection positions, ``(B, n_link_max, d)`` and ``(B, n_node_max, d)``.
    """
    if batch.link_idx.shape[1] == 0:
        raise ValueError("path_gru_forward needs at least one element")
    gl, gv = _gates(params, "link"), _gates(params, "node")
    B, _, d = q_links.shape
    c: Tensor = Tensor(np.zeros((B, d)))
    link_states, node_states = [], []
    for i in range(batch.max_len):
        j = i // 2
        if i % 2 == 0:
            q, m, g, sink = getitem(q_links, (slice(None), j)), batch.link_mask[:, j:j + 1], gl, link_states
        else:
            q, m, g, sink = getitem(q_nodes, (slice(None), j)), batch.node_mask[:, j:j + 1], gv, node_states
        new = path_gru_step(q, c, g)
        c = new if m.all() else add(mul(new, m), mul(c, 1.0 - m))
        sink.append(c)
    cl = stack(link_states, axis=1)
    cv = stack(node_states, axis=1) if node_states else Tensor(np.zeros((B, 0, d)))
    return cl, cv


def head_forward(c, params: dict, name: str, scale: float = 1.0) -> Tensor:
    """Two-layer ``[hidden, 1]`` head with a softplus output, times ``scale``."""
    pre = f"mtl.head.{name}."
    h = relu(add(matmul(c, params[pre + "W1"]), params[pre + "b1"]))
    out = softplus(add(matmul(h, params[pre + "W2"]), params[pre + "b2"]))
    out = getitem(out, (..., 0))
    return out if scale == 1.0 else mul(out, scale)


def local_heads(c_links, c_nodes, params: dict, link_scale: float = 1.0, node_scale: float = 1.0) -> tuple[Tensor, Tensor]:
    """Per-element times at link and intersection positions."""
    tl = head_forward(c_links, params, "link", link_scale)
    if c_nodes.shape[1] == 0:
        return tl, Tensor(np.zeros(c_nodes.shape[:2]))
    return tl, head_forward(c_nodes, params, "node", node_scale)


def global_head(c_links, c_nodes, batch: PathBatch, params: dict, scale: float = 1.0) -> Tensor:
    """Sum-pool every real element's state, then apply the path head."""
    g = tsum(mul(c_links, batch.link_mask[..., None]), axis=1)
    if c_nodes.shape[1]:
        g = add(g, tsum(mul(c_nodes, batch.node_mask[..., None]), axis=1))
    return head_forward(g, params, "path", scale)


# losses -------------------------------------------------------------------

def loss_global(pred, truth) -> Tensor:
    """Mean of |t - t_hat| / t_hat; non-positive truths are excluded with a warning."""
    truth = np.asarray(truth, dtype=np.float64)
    keep = truth > 0
    if not keep.all():
        log.warning("excluded %d path(s) with non-positive ground truth", int((~keep).sum()))
    if not keep.any():
        return Tensor(np.array(0.0))
    w = np.where(keep, 1.0 / np.where(keep, truth, 1.0), 0.0) / keep.sum()
    return tsum(mul(tabs(sub(pred, np.where(keep, truth, 0.0))), w))


def _local_loss(pred, truth, mask, eps: float) -> Tensor | None:
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.ones(truth.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    mask = np.where(np.isnan(truth), 0.0, mask)
    n = mask.sum()
    if n == 0:
        return None
    w = mask / (np.where(mask > 0, truth, 0.0) + eps) / n
    return tsum(mul(tabs(sub(pred, np.where(mask > 0, truth, 0.0))), w))


def loss_links(pred, truth, eps: float = 5.0, mask=None) -> Tensor:
    """Mean over real link elements of |t - t_hat| / (t_hat + eps)."""
    out = _local_loss(pred, truth, mask, eps)
    return Tensor(np.array(0.0)) if out is None else out


def loss_intersections(pred, truth, eps: float = 5.0, mask=None) -> Tensor | None:
    """As :func:`loss_links`; ``None`` when no element carries ground truth (NaN or masked)."""
    return _local_loss(pred, truth, mask, eps)


def loss_combined(L_P, L_l, L_v, weights: LossWeights = LossWeights()) -> Tensor:
    """alpha L_P + beta L_l + (1 - alpha - beta) L_v.

    A missing intersection term (``None``) drops out and the remaining two
    weights are rescaled to sum to one.
    """
    a, b = weights.alpha, weights.beta
    if L_v is None:
        if a + b == 0:
            raise ValueError("all loss weight is on the intersection term, which has no ground truth")
        return add(mul(L_P, a / (a + b)), mul(L_l, b / (a + b)))
    return add(add(mul(L_P, a), mul(L_l, b)), mul(L_v, 1.0 - a - b))


def flatten_local(t_links, t_nodes, batch: PathBatch) -> list[np.ndarray]:
    """Per-path element times in path order, with padding removed."""
    tl, tv = np.asarray(t_links), np.asarray(t_nodes)
    out = []
    for b in range(batch.size):
        n = int(batch.link_mask[b].sum())
        seq = np.empty(2 * n - 1)
        seq[0::2] = tl[b, :n]
        seq[1::2] = tv[b, :n - 1]
        out.append(seq)
    return out


__all__ = [
    "LossWeights", "PathBatch", "parameter_shapes", "select_path_reps", "path_gru_step", "path_gru_forward",
    "head_forward", "local_heads", "global_head", "loss_global", "loss_links", "loss_intersections",
    "loss_combined", "flatten_local",
]
