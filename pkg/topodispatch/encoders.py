"""Node features and the message-passing layers shared by actor and critic.

Layers operate on batched node tensors of shape (batch, nodes, channels). The
per-graph constants they need (normalized propagation matrix, exact-hop masks,
attention edge lists) live in `GraphOperators`, computed once per topology.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import networkx as nx
import numpy as np

from . import tensor as T
from .env import FeatureScaling, GridState, check_state
from .errors import DimensionMismatchError, ShapeError
from .netmodel import NetworkTopology, adjacency, hop_distances
from .tensor import Tensor

logger = logging.getLogger(__name__)

N_FEATURES = 6
DEFAULT_HOPS = 3

Activation = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class NodeFeatureMatrix:
    """Rows: (t/horizon, price, demand p.u., I*SOC, I*V, I) per bus position."""

    features: np.ndarray
    adjacency: np.ndarray
    ess_rows: tuple[int, ...]


def build_node_features(
    state: GridState, topo: NetworkTopology, scaling: FeatureScaling | None = None
) -> NodeFeatureMatrix:
    scaling = scaling or FeatureScaling(base_mva=topo.limits.base_mva)
    check_state(state, topo)
    n = topo.n_buses
    x = np.zeros((n, N_FEATURES))
    x[:, 0] = state.t / scaling.horizon
    x[:, 1] = state.price / scaling.price_scale
    x[:, 2] = scaling.demand_pu(state.demand_kw)
    rows = tuple(topo.bus_position(b) for b in topo.ess_nodes)
    idx = list(rows)
    x[idx, 3] = state.soc
    x[idx, 4] = state.v_ess_pu
    x[idx, 5] = 1.0
    return NodeFeatureMatrix(features=x, adjacency=adjacency(topo), ess_rows=rows)


def _exact_hop_masks(hops: np.ndarray, k_max: int) -> np.ndarray:
    return np.stack([(hops == k).astype(np.float64) for k in range(k_max + 1)])


@dataclass(frozen=True, eq=False)
class GraphOperators:
    """Constants of one graph, or of a batch of graphs stacked along axis 0.

    `gcn` and `hop_masks` are (n, n) for a single graph and (batch, n, n) for a
    stacked batch. Attention edges always index the flattened (batch * n) node
    set and include one self loop per node.
    """

    n_nodes: int
    n_graphs: int
    gcn: np.ndarray
    hop_masks: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    ess_rows: tuple[int, ...]

    @classmethod
    def from_adjacency(
        cls,
        adj: np.ndarray,
        ess_rows: Sequence[int] = (),
        k_max: int = DEFAULT_HOPS,
        hops: np.ndarray | None = None,
    ) -> GraphOperators:
        a = (np.asarray(adj) != 0).astype(np.float64)
        n = a.shape[0]
        if a.shape != (n, n):
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        a_hat = a + np.eye(n)
        d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
        gcn = d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]
        if hops is None:
            hops = np.full((n, n), -1, dtype=np.int64)
            for src, lengths in nx.all_pairs_shortest_path_length(nx.from_numpy_array(a)):
                for dst, d in lengths.items():
                    hops[src, dst] = d
        dst, src = np.nonzero(a_hat)
        return cls(
            n_nodes=n,
            n_graphs=1,
            gcn=gcn,
            hop_masks=_exact_hop_masks(hops, k_max),
            edge_src=src.astype(np.intp),
            edge_dst=dst.astype(np.intp),
            ess_rows=tuple(int(r) for r in ess_rows),
        )

    @classmethod
    def for_topology(cls, topo: NetworkTopology, k_max: int = DEFAULT_HOPS) -> GraphOperators:
        rows = tuple(topo.bus_position(b) for b in topo.ess_nodes)
        return topo.cached(
            f"graph_operators_k{k_max}",
            lambda t: cls.from_adjacency(adjacency(t), rows, k_max, hops=hop_distances(t)),
        )

    @classmethod
    def stack(cls, ops: Sequence[GraphOperators]) -> GraphOperators:
        """Operators for a batch in which each sample may use a different graph."""
        first = ops[0]
        if any(o.n_nodes != first.n_nodes or o.ess_rows != first.ess_rows for o in ops):
            raise DimensionMismatchError("batched graphs must share node count and ESS rows")
        if all(o is first for o in ops):
            return first.tiled(len(ops))
        n = first.n_nodes
        src = np.concatenate([o.edge_src + k * n for k, o in enumerate(ops)])
        dst = np.concatenate([o.edge_dst + k * n for k, o in enumerate(ops)])
        return cls(
            n_nodes=n,
            n_graphs=len(ops),
            gcn=np.stack([o.gcn for o in ops]),
            hop_masks=np.stack([o.hop_masks for o in ops], axis=1),
            edge_src=src,
            edge_dst=dst,
            ess_rows=first.ess_rows,
        )

    def tiled(self, batch: int) -> GraphOperators:
        """Same graph for every sample: dense operators broadcast, edges are offset."""
        n = self.n_nodes
        offsets = np.repeat(np.arange(batch) * n, len(self.edge_src))
        return GraphOperators(
            n_nodes=n,
            n_graphs=batch,
            gcn=self.gcn,
            hop_masks=self.hop_masks,
            edge_src=np.tile(self.edge_src, batch) + offsets,
            edge_dst=np.tile(self.edge_dst, batch) + offsets,
            ess_rows=self.ess_rows,
        )

    @property
    def k_max(self) -> int:
        return int(self.hop_masks.shape[0]) - 1


def _as_batch(h: Tensor) -> Tensor:
    if h.ndim == 2:
        return T.reshape(h, (1,) + h.shape)
    if h.ndim != 3:
        raise ShapeError(f"node tensor must be (nodes, ch) or (batch, nodes, ch), got {h.shape}")
    return h


def _restore(out: Tensor, like: Tensor) -> Tensor:
    return T.reshape(out, out.shape[1:]) if like.ndim == 2 else out


def gcn_forward(
    h: Tensor, ops: GraphOperators, weight: Tensor, activation: Activation = T.relu
) -> Tensor:
    """phi(D^-1/2 (A+I) D^-1/2 H W) with degrees counted after self loops."""
    hb = _as_batch(h)
    if hb.shape[-2] != ops.n_nodes:
        raise ShapeError(f"gcn: node tensor {h.shape} vs {ops.n_nodes}-node operators")
    out = T.matmul(T.constant(ops.gcn), T.matmul(hb, weight))
    return _restore(activation(out), h)


def tag_forward(
    h: Tensor,
    ops: GraphOperators,
    weights: Sequence[Tensor],
    activation: Activation = T.relu,
) -> Tensor:
    """phi(sum_k M_k H W_k) with M_k the exact-k-hop mask and M_0 = I."""
    hb = _as_batch(h)
    if hb.shape[-2] != ops.n_nodes:
        raise ShapeError(f"tag: node tensor {h.shape} vs {ops.n_nodes}-node operators")
    if len(weights) - 1 > ops.k_max:
        raise ShapeError(f"tag: {len(weights)} hop weights but masks only up to K={ops.k_max}")
    out = T.matmul(hb, weights[0])
    for k in range(1, len(weights)):
        propagated = T.matmul(T.constant(ops.hop_masks[k]), hb)
        out = T.add(out, T.matmul(propagated, weights[k]))
    return _restore(activation(out), h)


def gat_attention(
    h: Tensor, ops: GraphOperators, w_dst: Tensor, w_src: Tensor, attn: Tensor
) -> tuple[Tensor, Tensor]:
    """Attention coefficients per edge and the transformed source features.

    Returns (alpha over the flattened edge list, W_src h over flattened nodes).
    """
    hb = _as_batch(h)
    b, n, f = hb.shape
    if n != ops.n_nodes:
        raise ShapeError(f"gat: node tensor {h.shape} vs {ops.n_nodes}-node operators")
    flat = T.reshape(hb, (b * n, f))
    if ops.n_graphs != b:
        ops = ops.tiled(b)
    src_feat = T.matmul(flat, w_src)
    dst_feat = T.matmul(flat, w_dst)
    z = T.leaky_relu(
        T.add(T.gather_rows(dst_feat, ops.edge_dst), T.gather_rows(src_feat, ops.edge_src))
    )
    scores = T.reshape(T.matmul(z, attn), (len(ops.edge_src),))
    alpha = T.segment_softmax(scores, ops.edge_dst, b * n)
    return alpha, src_feat


def gat_forward(
    h: Tensor,
    ops: GraphOperators,
    w_dst: Tensor,
    w_src: Tensor,
    attn: Tensor,
    activation: Activation = T.relu,
) -> Tensor:
    """e_ij = a . LeakyReLU(W_dst h_i + W_src h_j); h_i' = phi(sum_j alpha_ij W_src h_j)."""
    hb = _as_batch(h)
    b, n, _ = hb.shape
    if ops.n_graphs != b:
        ops = ops.tiled(b)
    alpha, src_feat = gat_attention(hb, ops, w_dst, w_src, attn)
    msgs = T.mul(T.gather_rows(src_feat, ops.edge_src), T.reshape(alpha, (len(ops.edge_src), 1)))
    out = T.scatter_rows(msgs, ops.edge_dst, b * n)
    out = T.reshape(out, (b, n, src_feat.shape[-1]))
    return _restore(activation(out), h)


def mean_pool(h: Tensor) -> Tensor:
    """Average of node rows; (nodes, ch) -> (ch,), (batch, nodes, ch) -> (batch, ch)."""
    if h.ndim < 2 or h.shape[-2] == 0:
        raise ShapeError(f"mean_pool needs at least one node, got shape {h.shape}")
    return T.row_mean(h)


def ess_embeddings(h: Tensor, ops: GraphOperators) -> Tensor:
    return T.gather_rows(h, list(ops.ess_rows))


def batch_features(
    states: Sequence[GridState],
    topos: Sequence[NetworkTopology],
    scaling: FeatureScaling,
) -> np.ndarray:
    """(batch, nodes, 6) feature array."""
    return np.stack(
        [build_node_features(s, t, scaling).features for s, t in zip(states, topos)]
    )


def batch_operators(topos: Sequence[NetworkTopology], k_max: int = DEFAULT_HOPS) -> GraphOperators:
    return GraphOperators.stack([GraphOperators.for_topology(t, k_max) for t in topos])


def action_channel(action: Tensor, ops: GraphOperators) -> Tensor:
    """(batch, |B|) actions written to the ESS rows of a (batch, nodes, 1) channel."""
    if action.ndim != 2 or action.shape[1] != len(ops.ess_rows):
        raise DimensionMismatchError(
            f"action of shape {action.shape} does not match {len(ops.ess_rows)} ESS nodes"
        )
    column = T.reshape(action, action.shape + (1,))
    return T.scatter_rows(column, list(ops.ess_rows), ops.n_nodes)
