"""Intra-molecule GIN encoder producing one embedding per molecule.

All molecules are processed as a single disjoint-union graph: neighbour
sums are one sparse product and pooling is another.  Training-time
encoding therefore runs sequentially on one tape.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .chem import MoleculeGraph, featurize
from .tensor import Tensor

GIN_HIDDEN_SIZES = (32, 64, 128, 256)


@dataclass
class MoleculeBatch:
    features: np.ndarray          # (n_atoms_total, d_atom)
    adjacency: sp.csr_matrix      # (n_atoms_total, n_atoms_total), symmetric 0/1
    membership: np.ndarray        # molecule index of each atom
    n_molecules: int

    @property
    def n_atoms(self) -> int:
        return self.features.shape[0]

    def pooling(self, mode: str = "mean") -> sp.csr_matrix:
        counts = np.bincount(self.membership, minlength=self.n_molecules).astype(np.float64)
        if mode == "mean":
            vals = 1.0 / counts[self.membership]
        elif mode == "sum":
            vals = np.ones(self.n_atoms)
        else:
            raise ValueError(f"unknown readout pooling {mode!r}")
        return sp.csr_matrix((vals, (self.membership, np.arange(self.n_atoms))),
                             shape=(self.n_molecules, self.n_atoms))


def batch_graphs(graphs: Sequence[MoleculeGraph], features: Sequence[np.ndarray] | None = None) -> MoleculeBatch:
    """Stack molecules into one block-diagonal graph."""
    if features is None:
        features = [featurize(g) for g in graphs]
    offsets = np.cumsum([0] + [g.n_atoms for g in graphs])
    rows, cols = [], []
    for g, off in zip(graphs, offsets):
        e = g.edge_array()
        rows.append(e[0] + off)
        cols.append(e[1] + off)
    n = int(offsets[-1])
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    membership = np.repeat(np.arange(len(graphs)), [g.n_atoms for g in graphs])
    return MoleculeBatch(np.concatenate(features, axis=0), adj, membership, len(graphs))


def split_batch(batch: MoleculeBatch, size: int) -> list[tuple[int, int, MoleculeBatch]]:
    """Consecutive sub-batches of at most ``size`` molecules, with their molecule ranges."""
    out = []
    for lo in range(0, batch.n_molecules, size):
        hi = min(lo + size, batch.n_molecules)
        a, b = np.searchsorted(batch.membership, [lo, hi])
        sub = MoleculeBatch(batch.features[a:b], batch.adjacency[a:b, a:b].tocsr(),
                            batch.membership[a:b] - lo, hi - lo)
        out.append((lo, hi, sub))
    return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GinLayer:
    eps: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class GinParams:
    """Input projection plus K GIN layers, each with a 2-layer MLP and a learnable epsilon."""

    proj_w: Tensor
    proj_b: Tensor
    layers: list[GinLayer] = field(default_factory=list)
    pooling: str = "mean"

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_hidden(self) -> int:
        return self.proj_w.shape[1]

    @property
    def d_mol(self) -> int:
        return (self.n_layers + 1) * self.d_hidden

    @classmethod
    def init(cls, d_atom: int, d_hidden: int, n_layers: int, rng: np.random.Generator,
             pooling: str = "mean") -> "GinParams":
        def p(a):
            return Tensor(a, requires_grad=True)

        layers = [
            GinLayer(p(np.zeros(1)), p(glorot(rng, d_hidden, d_hidden)), p(np.zeros(d_hidden)),
                     p(glorot(rng, d_hidden, d_hidden)), p(np.zeros(d_hidden)))
            for _ in range(n_layers)
        ]
        return cls(p(glorot(rng, d_atom, d_hidden)), p(np.zeros(d_hidden)), layers, pooling)

    def copy(self, requires_grad: bool) -> "GinParams":
        """Fresh leaf tensors over the same data."""
        def c(t):
            return Tensor(t.data, requires_grad=requires_grad)

        layers = [GinLayer(c(l.eps), c(l.w1), c(l.b1), c(l.w2), c(l.b2)) for l in self.layers]
        return GinParams(c(self.proj_w), c(self.proj_b), layers, self.pooling)

    def named_parameters(self, prefix: str = "gin") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.proj_w", self.proj_w), (f"{prefix}.proj_b", self.proj_b)]
        for k, layer in enumerate(self.layers):
            for name in ("eps", "w1", "b1", "w2", "b2"):
                out.append((f"{prefix}.layer{k}.{name}", getattr(layer, name)))
        return out


def gin_forward(batch: MoleculeBatch, params: GinParams, dropout: float = 0.0,
                rng: np.random.Generator | None = None, training: bool = False) -> list[Tensor]:
    """Node embeddings for layers 0..K; layer 0 is the projected atom features."""
    h = T.add(T.matmul(Tensor(batch.features), params.proj_w), params.proj_b)
    out = [h]
    for layer in params.layers:
        agg = T.spmm(batch.adjacency, h)
        z = T.add(T.add(h, T.mul(h, layer.eps)), agg)       # (1 + eps) h + sum of neighbours
        z = T.relu(T.add(T.matmul(z, layer.w1), layer.b1))
        z = T.dropout(z, dropout, rng, training)
        h = T.add(T.matmul(z, layer.w2), layer.b2)
        out.append(h)
    return out


def readout(layers: Sequence[Tensor], batch: MoleculeBatch, pooling: str = "mean") -> Tensor:
    """Pool nodes per molecule within each layer, then concatenate the layers."""
    if not layers:
        raise ValueError("readout needs at least one layer of embeddings")
    pool = batch.pooling(pooling)
    return T.concat([T.spmm(pool, h) for h in layers], axis=1)


def encode_all(batch: MoleculeBatch, params: GinParams, dropout: float = 0.0,
               rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """X_r: one row per molecule, in batch order."""
    return readout(gin_forward(batch, params, dropout, rng, training), batch, params.pooling)


def encode_chunked(batch: MoleculeBatch, params: GinParams, chunk: int, dropout: float = 0.0,
                   rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """``encode_all`` holding the atom-level activations of one chunk at a time.

    The backward pass re-encodes each chunk from its saved dropout state, so
    gradients are exact and memory scales with ``chunk`` instead of the corpus.
    """
    if chunk <= 0 or chunk >= batch.n_molecules:
        return encode_all(batch, params, dropout, rng, training)
    parts = split_batch(batch, chunk)
    frozen = params.copy(requires_grad=False)
    states, rows = [], []
    for _, _, sub in parts:
        states.append(None if rng is None else copy.deepcopy(rng.bit_generator.state))
        rows.append(encode_all(sub, frozen, dropout, rng, training).data)
    inputs = [t for _, t in params.named_parameters()]

    def adjoint(g):
        total = [np.zeros_like(t.data) for t in inputs]
        for (lo, hi, sub), state in zip(parts, states):
            leaf = params.copy(requires_grad=True)
            replay = None
            if state is not None:
                replay = np.random.Generator(type(rng.bit_generator)())
                replay.bit_generator.state = state
            with T.Tape():
                out = encode_all(sub, leaf, dropout, replay, training)
                T.backward(T.sum(T.mul(out, Tensor(g[lo:hi]))))
            for acc, (_, t) in zip(total, leaf.named_parameters()):
                if t.grad is not None:
                    acc += t.grad
        return tuple(total)

    return T.custom(np.concatenate(rows, axis=0), inputs, adjoint)
