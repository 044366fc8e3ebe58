"""Voxel-grid node graphs: KNN construction and max-relative aggregation.

A feature grid is flattened to an (N, C) node matrix in row-major voxel
order. Edges are K nearest neighbors under squared Euclidean distance,
recomputed from the current features on every block invocation; ties are
broken toward the smaller node index so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LinearParams, Tensor, _accum, _wrap
from .errors import ConfigError, DimensionMismatchError

# Counts max-relative aggregations since the last reset; lets tests assert
# that ablated models never touch the graph path.
_AGGREGATE_CALLS = 0


def reset_graph_op_counter() -> None:
    global _AGGREGATE_CALLS
    _AGGREGATE_CALLS = 0


def graph_op_count() -> int:
    return _AGGREGATE_CALLS


@dataclass
class NodeGraph:
    """Flattened voxel nodes plus a K-regular incoming-neighbor table.

    edges[i] lists the K source neighbors of target node i, ascending.
    """

    features: np.ndarray
    positions: np.ndarray
    edges: np.ndarray | None = None
    k: int = 0

    def edge_pairs(self) -> np.ndarray:
        """Edges as a flat ((target, source), ...) array."""
        n, k = self.edges.shape
        targets = np.repeat(np.arange(n), k)
        return np.stack([targets, self.edges.reshape(-1)], axis=1)


def grid_positions(spatial) -> np.ndarray:
    """Row-major (d, h, w) integer coordinates for a D*H*W grid."""
    d, h, w = spatial
    idx = np.arange(d * h * w)
    return np.stack([idx // (h * w), (idx // w) % h, idx % w], axis=1).astype(np.int64)


def grid_to_nodes(feature_map: Tensor, batch_index: int) -> tuple[Tensor, np.ndarray]:
    """One batch entry of a (B,C,D,H,W) tensor as an (N, C) node matrix.

    Returns the node features (on the tape) and their grid positions.
    """
    if feature_map.ndim != 5:
        raise DimensionMismatchError("rank", 5, feature_map.ndim)
    b, c = feature_map.shape[:2]
    if not 0 <= batch_index < b:
        raise DimensionMismatchError("batch", f"< {b}", batch_index)
    spatial = feature_map.shape[2:]
    n = spatial[0] * spatial[1] * spatial[2]
    out = np.ascontiguousarray(feature_map.data[batch_index].reshape(c, n).T)

    def backward():
        def fn(g):
            gx = np.zeros_like(feature_map.data)
            gx[batch_index] = g.T.reshape((c,) + spatial)
            _accum(feature_map, gx, own=True)

        return fn

    return _wrap(out, (feature_map,), backward), grid_positions(spatial)


def nodes_to_grid(nodes: Tensor, spatial) -> Tensor:
    """Inverse of grid_to_nodes: (N, C) back to a single-sample (1,C,D,H,W)."""
    if nodes.ndim != 2:
        raise DimensionMismatchError("rank", 2, nodes.ndim)
    d, h, w = spatial
    if nodes.shape[0] != d * h * w:
        raise DimensionMismatchError("nodes", d * h * w, nodes.shape[0])
    c = nodes.shape[1]
    out = np.ascontiguousarray(nodes.data.T.reshape(1, c, d, h, w))

    def backward():
        def fn(g):
            _accum(nodes, np.ascontiguousarray(g[0].reshape(c, -1).T), own=True)

        return fn

    return _wrap(out, (nodes,), backward)


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """K nearest neighbors per node under squared Euclidean feature distance.

    Deterministic: distance ties at the selection boundary are resolved
    toward the smaller node index. Exact O(N^2) search. Returns an (N, k)
    int array of source neighbors, each row sorted ascending; no self-edges.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionMismatchError("rank", 2, f.ndim)
    n = f.shape[0]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"knn k must satisfy 1 <= k <= N-1, got k={k} with N={n}")

    sq = np.einsum("ij,ij->i", f, f)
    d = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, np.inf)

    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    rows = np.arange(n)
    tau = np.max(d[rows[:, None], part], axis=1)
    # rows where values equal to the k-th smallest straddle the cut need the
    # index tie-break applied explicitly
    n_le = (d <= tau[:, None]).sum(axis=1)
    ambiguous = np.flatnonzero(n_le > k)
    neighbors = np.sort(part, axis=1)
    for i in ambiguous:
        below = np.flatnonzero(d[i] < tau[i])
        ties = np.flatnonzero(d[i] == tau[i])
        neighbors[i] = np.sort(np.concatenate([below, ties[: k - below.size]]))
    return neighbors.astype(np.int64)


def spatial_knn_graph(positions: np.ndarray, k: int) -> np.ndarray:
    """KNN on grid coordinates instead of features (config-selectable variant)."""
    return knn_graph(np.asarray(positions, dtype=np.float64), k)


def max_relative_aggregate(features: Tensor, edges: np.ndarray) -> Tensor:
    """Concatenate each node with the elementwise max of neighbor differences.

    Row i becomes [x_i, max_j (x_j - x_i)] over its K neighbors. The
    subgradient of the max routes to the argmax neighbor; ties route to the
    smallest neighbor index regardless of edge-list order.
    """
    global _AGGREGATE_CALLS
    if features.ndim != 2:
        raise DimensionMismatchError("rank", 2, features.ndim)
    edges = np.asarray(edges)
    n, c = features.shape
    if edges.ndim != 2 or edges.shape[0] != n or edges.shape[1] < 1:
        raise ConfigError(f"edges must be (N, K) with K >= 1, got {edges.shape}")
    if edges.min() < 0 or edges.max() >= n:
        raise ConfigError("edge index out of range")
    if (edges == np.arange(n)[:, None]).any():
        raise ConfigError("self-edges are not allowed")
    _AGGREGATE_CALLS += 1

    order = np.argsort(edges, axis=1, kind="stable")
    nbrs = np.take_along_axis(edges, order, axis=1)
    diffs = features.data[nbrs] - features.data[:, None, :]
    arg = diffs.argmax(axis=1)
    mx = np.take_along_axis(diffs, arg[:, None, :], axis=1)[:, 0, :]
    out = np.concatenate([features.data, mx], axis=1)

    def backward():
        src = np.take_along_axis(nbrs, arg, axis=1)
        cols = np.broadcast_to(np.arange(c), (n, c))

        def fn(g):
            gx = g[:, :c] - g[:, c:]
            np.add.at(gx, (src, cols), g[:, c:])
            _accum(features, gx, own=True)

        return fn

    return _wrap(out, (features,), backward)


def graph_conv(features: Tensor, edges: np.ndarray, update: LinearParams) -> Tensor:
    """Max-relative aggregation followed by the learned 2C -> C update map."""
    if update.weight.shape[1] != 2 * features.shape[1]:
        raise DimensionMismatchError("in_features", 2 * features.shape[1], update.weight.shape[1])
    return ad.linear(max_relative_aggregate(features, edges), update)


@dataclass
class GraphBlockParams:
    """Weights of one graph block: projections around the graph stage plus an FFN."""

    w_in: LinearParams
    update: LinearParams
    w_out: LinearParams
    ffn: list[LinearParams] = field(default_factory=list)

    def __post_init__(self):
        c = self.w_in.weight.shape[1]
        if self.w_in.weight.shape[0] != c:
            raise ConfigError("w_in must map C -> C")
        if self.update.weight.shape != (c, 2 * c):
            raise ConfigError(f"update must map 2C -> C, got {self.update.weight.shape}")
        if self.w_out.weight.shape != (c, c):
            raise ConfigError("w_out must map C -> C")
        if self.ffn:
            if self.ffn[0].weight.shape[1] != c or self.ffn[-1].weight.shape[0] != c:
                raise ConfigError("ffn must map C -> C overall")


def make_graph_block(rng, channels: int, ffn_layers: int = 2, ffn_ratio: int = 4) -> GraphBlockParams:
    hidden = max(1, channels * ffn_ratio)
    widths = [channels] + [hidden] * (ffn_layers - 1) + [channels]
    ffn = [ad.make_linear(rng, widths[i + 1], widths[i]) for i in range(ffn_layers)]
    return GraphBlockParams(
        w_in=ad.make_linear(rng, channels, channels),
        update=ad.make_linear(rng, channels, 2 * channels),
        w_out=ad.make_linear(rng, channels, channels),
        ffn=ffn,
    )


def graph_stage(
    features: Tensor,
    k: int,
    params: GraphBlockParams,
    knn_space: str = "feature",
    positions: np.ndarray | None = None,
) -> Tensor:
    """Project, aggregate over a fresh KNN graph, project back, add residual.

    Edges come from a KNN over the projected features (or over grid positions
    when knn_space="spatial").
    """
    projected = ad.linear(features, params.w_in)
    if knn_space == "feature":
        edges = knn_graph(projected.data, k)
    elif knn_space == "spatial":
        if positions is None:
            raise ConfigError("spatial knn requires node positions")
        edges = spatial_knn_graph(positions, k)
    else:
        raise ConfigError(f"unknown knn_space '{knn_space}'")
    g = graph_conv(projected, edges, params.update)
    return ad.add(ad.linear(ad.gelu(g), params.w_out), features)


def ffn_stage(y: Tensor, params: GraphBlockParams) -> Tensor:
    """Two-layer (or E-layer) node MLP with residual."""
    h = y
    for i, layer in enumerate(params.ffn):
        h = ad.linear(h, layer)
        if i < len(params.ffn) - 1:
            h = ad.gelu(h)
    return ad.add(h, y)


def graph_block(
    features: Tensor,
    k: int,
    params: GraphBlockParams,
    knn_space: str = "feature",
    positions: np.ndarray | None = None,
) -> Tensor:
    """Graph stage followed by the feed-forward stage."""
    return ffn_stage(graph_stage(features, k, params, knn_space, positions), params)
