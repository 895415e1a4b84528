"""Skeleton graphs and the adaptive graph convolution giving relational embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def normalize_adjacency(edges, V: int) -> np.ndarray:
    """Symmetric normalization with self-loops, ``D^-1/2 (A + I) D^-1/2``.

    Raises:
        ValueError: on out-of-range nodes, self-edges or duplicate edges.
    """
    A = np.eye(V)
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < V and 0 <= j < V):
            raise ValueError(f"edge ({i}, {j}) out of range for {V} nodes")
        if i == j:
            raise ValueError(f"self-edge ({i}, {j}); self-loops are added automatically")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate edge {key}")
        seen.add(key)
        A[i, j] = A[j, i] = 1.0
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


@dataclass
class SkeletonGraph:
    V: int
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.A_norm = normalize_adjacency(self.edges, self.V)

    @classmethod
    def from_json(cls, path) -> "SkeletonGraph":
        obj = json.loads(Path(path).read_text())
        return cls(int(obj["num_nodes"]), [tuple(e) for e in obj["edges"]])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"num_nodes": self.V, "edges": [list(e) for e in self.edges]}))

    def relabel(self, perm) -> "SkeletonGraph":
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return SkeletonGraph(self.V, [(perm[i], perm[j]) for i, j in self.edges])


def chain_graph(V: int) -> SkeletonGraph:
    return SkeletonGraph(V, [(i, i + 1) for i in range(V - 1)])


def default_skeleton(V: int) -> SkeletonGraph:
    """Small tree: a spine 0-1-2 with the remaining nodes hung off it as limbs."""
    if V <= 3:
        return chain_graph(V)
    edges = [(0, 1), (1, 2)]
    for k, v in enumerate(range(3, V)):
        parent = (k % 3) if v < 6 else v - 3
        edges.append((parent, v))
    return SkeletonGraph(V, edges)


class AgcnLayer:
    """Adaptive graph convolution: fixed + free + data-dependent adjacency."""

    def __init__(self, graph: SkeletonGraph, D: int, embed_dim: int | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        De = embed_dim or max(1, D // 4)
        self.graph = graph
        self.A_static = Tensor(graph.A_norm)
        self.B_learned = ad.parameter(np.zeros((graph.V, graph.V)))
        self.theta = ad.parameter(rng.normal(0, 1 / np.sqrt(D), (D, De)))
        self.phi = ad.parameter(rng.normal(0, 1 / np.sqrt(D), (D, De)))
        self.W_out = ad.parameter(rng.normal(0, 1 / np.sqrt(D), (D, D)))

    def parameters(self) -> dict[str, Tensor]:
        return {"B_learned": self.B_learned, "theta": self.theta, "phi": self.phi, "W_out": self.W_out}


def data_adjacency(X, layer: AgcnLayer) -> Tensor:
    """Row-softmax of ``theta(X_mean) phi(X_mean)^T`` from the time-mean features."""
    X = ad.as_tensor(X)
    Xm = ad.mean_axis(X, -2)  # (..., V, D)
    a = ad.linear(Xm, layer.theta)
    b = ad.linear(Xm, layer.phi)
    return ad.softmax(ad.matmul(a, ad.swapaxes(b, -1, -2)), axis=-1)


def agcn_forward(X, layer: AgcnLayer) -> Tensor:
    """Relational embedding ``R_t = (A_static + B_learned + C_data) X_t W_out``.

    ``X`` has shape ``(..., V, L, D)``; the returned tensor has the same shape.
    """
    X = ad.as_tensor(X)
    V = layer.graph.V
    if X.ndim < 3 or X.shape[-3] != V:
        raise ValueError(f"input {X.shape} does not have {V} nodes on axis -3")
    if X.shape[-1] != layer.W_out.shape[0]:
        raise ValueError(f"input width {X.shape[-1]} != layer width {layer.W_out.shape[0]}")
    adj = ad.add(ad.add(layer.A_static, layer.B_learned), data_adjacency(X, layer))  # (..., V, V)
    lead = X.shape[:-3]
    L, D = X.shape[-2], X.shape[-1]
    flat = ad.reshape(X, lead + (V, L * D))
    mixed = ad.reshape(ad.matmul(adj, flat), X.shape)
    return ad.linear(mixed, layer.W_out)


def relational_concat(X, R) -> Tensor:
    X, R = ad.as_tensor(X), ad.as_tensor(R)
    if X.shape != R.shape:
        raise ValueError(f"motion features {X.shape} and relational embedding {R.shape} differ")
    return ad.concat([X, R], axis=-1)
