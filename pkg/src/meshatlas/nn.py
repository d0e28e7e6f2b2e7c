"""Graph-convolution layers, residual blocks and parameter bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import SparseOperator, Tensor
from .mesh import Adjacency


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def normalized_adjacency(adj: Adjacency) -> sparse.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    A = adj.matrix() + sparse.identity(adj.n_vertices, format="csr")
    d = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = sparse.diags(1.0 / np.sqrt(d))
    out = (inv_sqrt @ A @ inv_sqrt).tocsr()
    out.sort_indices()
    return out


class BatchedOperator:
    """Sparse per-mesh operator lifted to a block-diagonal batch operator on demand."""

    def __init__(self, matrix):
        self.matrix = sparse.csr_matrix(matrix)
        self.matrix.sort_indices()
        self._cache = {}

    @property
    def shape(self):
        return self.matrix.shape

    def batched(self, batch_size: int) -> SparseOperator:
        op = self._cache.get(batch_size)
        if op is None:
            op = SparseOperator(sparse.kron(sparse.identity(batch_size, format="csr"), self.matrix, format="csr"))
            self._cache[batch_size] = op
        return op

    def apply(self, F: Tensor) -> Tensor:
        rows = F.shape[0]
        n = self.shape[1]
        if rows % n:
            raise ValueError(f"feature rows {rows} are not a multiple of {n}")
        return ad.spmm(self.batched(rows // n), F)


class ParamStore:
    """Ordered name -> Tensor mapping; creation order fixes the init RNG stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict = {}

    def glorot(self, name, fan_in, fan_out) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name, *shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def _add(self, name, value) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t


@dataclass
class GraphConvLayer:
    weight: Tensor
    bias: Tensor
    operator: BatchedOperator

    @classmethod
    def create(cls, store: ParamStore, name, c_in, c_out, operator, zero_weight=False) -> "GraphConvLayer":
        W = store.zeros(f"{name}.W", c_in, c_out) if zero_weight else store.glorot(f"{name}.W", c_in, c_out)
        return cls(W, store.zeros(f"{name}.b", c_out), operator)


def graph_conv(F, layer: GraphConvLayer) -> Tensor:
    """Â F W + b, applied independently to every mesh stacked in the rows of F."""
    F = ad.as_tensor(F)
    if F.shape[1] != layer.weight.shape[0]:
        raise ValueError(f"graph_conv expects {layer.weight.shape[0]} channels, got {F.shape[1]}")
    return ad.add(ad.matmul(layer.operator.apply(F), layer.weight), layer.bias)


@dataclass
class ResBlock:
    conv1: GraphConvLayer
    conv2: GraphConvLayer
    skip: Tensor | None = None

    @classmethod
    def create(cls, store, name, c_in, c_out, operator) -> "ResBlock":
        conv1 = GraphConvLayer.create(store, f"{name}.conv1", c_in, c_out, operator)
        conv2 = GraphConvLayer.create(store, f"{name}.conv2", c_out, c_out, operator)
        skip = store.glorot(f"{name}.skip", c_in, c_out) if c_in != c_out else None
        return cls(conv1, conv2, skip)


def res_block(F, block: ResBlock) -> Tensor:
    F = ad.as_tensor(F)
    residual = ad.matmul(F, block.skip) if block.skip is not None else F
    return ad.add(residual, graph_conv(ad.elu(graph_conv(F, block.conv1)), block.conv2))


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store, name, c_in, c_out) -> "Dense":
        return cls(store.glorot(f"{name}.W", c_in, c_out), store.zeros(f"{name}.b", c_out))

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)
