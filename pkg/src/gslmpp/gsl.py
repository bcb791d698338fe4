"""Molecule-level similarity graph and metric-based graph structure learning.

Dense path: the fingerprint graph ``A0`` and every learned adjacency are
N x N matrices.  Anchor path: learned structure is kept as an N x s
node-anchor matrix ``R`` and messages travel node -> anchor -> node, so no
N x N matrix is ever formed; ``A0`` is then a sparse matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .encoder import glorot
from .fingerprint import Fingerprint, fingerprint_matrix, tanimoto_block
from .tensor import Tensor

ADJ_NORMS = ("none", "row", "sym", "separate")
DENSE_LIMIT = 5000


# ---------------------------------------------------------------- initial graph

def build_msg(fps: Sequence[Fingerprint] | np.ndarray, tc_epsilon: float) -> np.ndarray:
    """Dense A0: Tanimoto scores below ``tc_epsilon`` zeroed, unit diagonal."""
    f = fps if isinstance(fps, np.ndarray) else fingerprint_matrix(fps)
    a0 = tanimoto_block(f, f)
    a0[a0 < tc_epsilon] = 0.0
    np.fill_diagonal(a0, 1.0)
    return a0


def build_msg_sparse(fps: Sequence[Fingerprint] | np.ndarray, tc_epsilon: float,
                     block: int = 512) -> sp.csr_matrix:
    """Sparse A0 built in row blocks, never holding more than ``block`` x N scores."""
    f = fps if isinstance(fps, np.ndarray) else fingerprint_matrix(fps)
    n = f.shape[0]
    rows, cols, vals = [], [], []
    for start in range(0, n, block):
        sim = tanimoto_block(f[start:start + block], f)
        keep = sim >= tc_epsilon
        keep &= sim > 0
        r, c = np.nonzero(keep)
        rows.append(r + start)
        cols.append(c)
        vals.append(sim[r, c])
    a0 = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    a0.setdiag(1.0)
    a0.eliminate_zeros()
    return a0


def normalize_constant(a: np.ndarray | sp.spmatrix, mode: str):
    """Normalize a constant (numpy or scipy) adjacency; ``separate`` acts as ``row``."""
    if mode == "separate":
        mode = "row"
    if mode == "none":
        return a
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    deg = np.where(deg > 0, deg, 1.0)
    if mode == "row":
        d = 1.0 / deg
        return sp.diags(d) @ a if sp.issparse(a) else a * d[:, None]
    if mode == "sym":
        d = deg ** -0.5
        return sp.diags(d) @ a @ sp.diags(d) if sp.issparse(a) else a * d[:, None] * d[None, :]
    raise ValueError(f"unknown adjacency normalization {mode!r}")


# ---------------------------------------------------------------- parameters

@dataclass
class GslParams:
    """Perspective weights (one bank per embedding width) and inter-molecule GCN weights."""

    w_mol: Tensor                     # (m, d_mol), used at t = 1
    w_hid: Tensor                     # (m, d_gsl), used at t > 1
    gcn: list[Tensor] = field(default_factory=list)
    skip_conn: float = 0.8            # lambda
    update_ratio: float = 0.6         # eta
    epsilon: float = 0.0
    n_iter: int = 2
    adj_norm: str = "row"

    @property
    def n_perspectives(self) -> int:
        return self.w_mol.shape[0]

    @classmethod
    def init(cls, d_mol: int, d_gsl: int, n_layers: int, n_perspectives: int,
             rng: np.random.Generator, **hyper) -> "GslParams":
        def p(a):
            return Tensor(a, requires_grad=True)

        dims = [d_mol] + [d_gsl] * n_layers
        gcn = [p(glorot(rng, dims[k], dims[k + 1])) for k in range(n_layers)]
        return cls(p(glorot(rng, n_perspectives, d_mol)), p(glorot(rng, n_perspectives, d_gsl)), gcn, **hyper)

    def perspectives(self, t: int) -> Tensor:
        return self.w_mol if t == 1 else self.w_hid

    def named_parameters(self, prefix: str = "gsl") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.w_mol", self.w_mol), (f"{prefix}.w_hid", self.w_hid)]
        out += [(f"{prefix}.gcn{k}", w) for k, w in enumerate(self.gcn)]
        return out


@dataclass
class AnchorSet:
    indices: np.ndarray

    @property
    def s(self) -> int:
        return len(self.indices)

    @classmethod
    def sample(cls, candidates: np.ndarray, s: int, rng: np.random.Generator) -> "AnchorSet":
        candidates = np.asarray(candidates)
        if s > len(candidates):
            raise ValueError(f"cannot draw {s} anchors from {len(candidates)} training molecules")
        return cls(np.sort(rng.choice(candidates, size=s, replace=False)))


# ---------------------------------------------------------------- learned structure

def perspective_unit_rows(h: Tensor, weights: Tensor) -> list[Tensor]:
    """One matrix per perspective p: rows ``w_p * v_i`` scaled to unit length."""
    return [T.weighted_unit_rows(h, T.take_rows(weights, [p])) for p in range(weights.shape[0])]


def _mean_of_products(za: Sequence[Tensor], zb: Sequence[Tensor]) -> Tensor:
    def product(a, b):
        return T.gram(a) if a is b else T.matmul(a, T.transpose(b))

    s = product(za[0], zb[0])
    for a, b in zip(za[1:], zb[1:]):
        s = T.add(s, product(a, b))
    return T.scalar_mul(s, 1.0 / len(za))


def metric_similarity(h: Tensor, weights: Tensor, epsilon: float) -> Tensor:
    """Mean over perspectives of weighted cosine similarity, sparsified at ``epsilon``.

    Entries below ``max(epsilon, 0)`` become 0, so the result is non-negative.
    An all-zero weighted row has similarity 0 with everything.
    """
    z = perspective_unit_rows(h, weights)
    return T.threshold(_mean_of_products(z, z), max(epsilon, 0.0))


def combine_adjacency(a0, a_t: Tensor, a_1: Tensor, skip_conn: float, update_ratio: float) -> Tensor:
    """lambda * A0 + (1 - lambda) * (eta * A_t + (1 - eta) * A_1)."""
    a0 = T.as_tensor(a0)
    learned = T.add(T.scalar_mul(a_t, update_ratio), T.scalar_mul(a_1, 1.0 - update_ratio))
    return T.add(T.scalar_mul(a0, skip_conn), T.scalar_mul(learned, 1.0 - skip_conn))


def _safe_inverse(deg: Tensor, power: float = -1.0) -> Tensor:
    # zero degrees are clamped to 1
    return T.pow(T.add(deg, Tensor((deg.data == 0).astype(np.float64))), power)


def normalize_adjacency(a: Tensor, mode: str = "row") -> Tensor:
    if mode == "none":
        return a
    deg = T.sum(a, axis=1)
    if mode == "row":
        return T.scale_rows(a, _safe_inverse(deg))
    if mode == "sym":
        d = _safe_inverse(deg, -0.5)
        return T.scale_rows(T.scale_cols(a, d), d)
    raise ValueError(f"unknown adjacency normalization {mode!r}")


def gcn_forward(a_tilde, x: Tensor, weights: Sequence[Tensor], adj_norm: str = "row",
                final_relu: bool = False, dropout: float = 0.0,
                rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """L propagation layers H <- ReLU(N(A) H W); the last layer is linear unless ``final_relu``."""
    a = normalize_adjacency(T.as_tensor(a_tilde), adj_norm)
    h = x
    for k, w in enumerate(weights):
        h = T.dropout(h, dropout, rng, training)
        h = T.matmul(a, T.matmul(h, w))
        if k < len(weights) - 1 or final_relu:
            h = T.relu(h)
    return h


def gsl_iterate(x_r: Tensor, a0, params: GslParams, dropout: float = 0.0,
                rng: np.random.Generator | None = None, training: bool = False,
                learned_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Alternate structure learning and GCN propagation for ``params.n_iter`` rounds.

    Returns the final node embeddings and the final fused adjacency.  With
    ``adj_norm="separate"`` propagation uses the mix of individually
    row-normalized graphs while the returned adjacency stays unnormalized.  When
    ``learned_mask`` is given, learned edges are multiplied by it before fusion.
    """
    if params.n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    h = x_r
    a_1 = None
    a_tilde = None
    a0_n = normalize_constant(T.as_tensor(a0).data, "row") if params.adj_norm == "separate" else None
    for t in range(1, params.n_iter + 1):
        a_t = metric_similarity(h, params.perspectives(t), params.epsilon)
        if learned_mask is not None:
            a_t = T.mul(a_t, Tensor(learned_mask))
        if t == 1:
            a_1 = a_t
        a_tilde = combine_adjacency(a0, a_t, a_1, params.skip_conn, params.update_ratio)
        if params.adj_norm == "separate":
            # each graph is row-normalized before mixing, so a dense learned
            # graph cannot drown out the sparse fingerprint graph
            a_1_n = normalize_adjacency(a_1, "row")
            a_t_n = a_1_n if t == 1 else normalize_adjacency(a_t, "row")
            prop = combine_adjacency(a0_n, a_t_n, a_1_n, params.skip_conn, params.update_ratio)
            h = gcn_forward(prop, x_r, params.gcn, "none", dropout=dropout, rng=rng, training=training)
        else:
            h = gcn_forward(a_tilde, x_r, params.gcn, params.adj_norm, dropout=dropout, rng=rng, training=training)
    return h, a_tilde


# ---------------------------------------------------------------- anchor path

def anchor_similarity(h: Tensor, anchors: AnchorSet | np.ndarray, weights: Tensor, epsilon: float) -> Tensor:
    """N x s node-anchor similarity with the same metric as :func:`metric_similarity`."""
    idx = anchors.indices if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    z = perspective_unit_rows(h, weights)
    return T.threshold(_mean_of_products(z, [T.take_rows(zp, idx) for zp in z]), max(epsilon, 0.0))


def anchor_propagate(r: Tensor, h: Tensor) -> Tensor:
    """D_n^-1 R (D_a^-1 R^T H): one two-step random-walk transition through the anchors.

    Nodes with no anchor weight keep their own row.
    """
    d_anchor = T.sum(r, axis=0)
    d_node = T.sum(r, axis=1)
    to_anchor = T.scale_rows(T.matmul(T.transpose(r), h), _safe_inverse(d_anchor))
    out = T.scale_rows(T.matmul(r, to_anchor), _safe_inverse(d_node))
    isolated = (d_node.data == 0).astype(np.float64)
    if isolated.any():
        out = T.add(out, T.scale_rows(h, Tensor(isolated)))
    return out


def anchor_message_passing(r: Tensor, x: Tensor, weights: Sequence[Tensor], final_relu: bool = False) -> Tensor:
    h = x
    for k, w in enumerate(weights):
        h = T.matmul(anchor_propagate(r, h), w)
        if k < len(weights) - 1 or final_relu:
            h = T.relu(h)
    return h


@dataclass
class AnchorState:
    """Everything needed to evaluate fused-graph entries for chosen node pairs."""

    h: Tensor
    z_first: list[Tensor]    # per-perspective unit rows of X_r
    z_last: list[Tensor]     # per-perspective unit rows of H^(T-1)
    r_first: Tensor
    r_last: Tensor


def anchor_gsl_iterate(x_r: Tensor, a0_norm: sp.spmatrix, anchors: AnchorSet, params: GslParams,
                       dropout: float = 0.0, rng: np.random.Generator | None = None,
                       training: bool = False) -> AnchorState:
    """Anchor-based counterpart of :func:`gsl_iterate`.

    ``a0_norm`` is the already-normalized sparse fingerprint graph.  Each GCN
    layer propagates with lambda * A0 + (1 - lambda) * (eta * P_t + (1 - eta) * P_1)
    where P_t is the anchor transition built from R_t.
    """
    if params.n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    lam, eta = params.skip_conn, params.update_ratio
    eps = max(params.epsilon, 0.0)
    h = x_r
    z_first = z_last = r_first = r_last = None
    for t in range(1, params.n_iter + 1):
        z = perspective_unit_rows(h, params.perspectives(t))
        r_t = T.threshold(_mean_of_products(z, [T.take_rows(zp, anchors.indices) for zp in z]), eps)
        if t == 1:
            z_first, r_first = z, r_t
        z_last, r_last = z, r_t
        h = x_r
        for k, w in enumerate(params.gcn):
            h = T.dropout(h, dropout, rng, training)
            hw = T.matmul(h, w)
            p_1 = anchor_propagate(r_first, hw)
            p_t = p_1 if t == 1 else anchor_propagate(r_t, hw)
            learned = T.add(T.scalar_mul(p_t, eta), T.scalar_mul(p_1, 1.0 - eta))
            h = T.add(T.scalar_mul(T.spmm(a0_norm, hw), lam), T.scalar_mul(learned, 1.0 - lam))
            if k < len(params.gcn) - 1:
                h = T.relu(h)
    return AnchorState(h, z_first, z_last, r_first, r_last)


def pair_similarity(z: Sequence[Tensor], rows: np.ndarray, cols: np.ndarray, epsilon: float) -> Tensor:
    """Learned similarity for selected (row, col) pairs, computed without the full matrix."""
    total = None
    for zp in z:
        dots = T.pair_dot(zp, rows, cols)
        total = dots if total is None else T.add(total, dots)
    return T.threshold(T.scalar_mul(total, 1.0 / len(z)), max(epsilon, 0.0))


def anchor_pair_adjacency(state: AnchorState, a0: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray,
                          params: GslParams) -> Tensor:
    """Fused adjacency entries for the given pairs (vector)."""
    a0_vals = np.asarray(a0[rows, cols]).reshape(-1)
    s_1 = pair_similarity(state.z_first, rows, cols, params.epsilon)
    s_t = s_1 if params.n_iter == 1 else pair_similarity(state.z_last, rows, cols, params.epsilon)
    learned = T.add(T.scalar_mul(s_t, params.update_ratio), T.scalar_mul(s_1, 1.0 - params.update_ratio))
    return T.add(T.scalar_mul(Tensor(a0_vals), params.skip_conn), T.scalar_mul(learned, 1.0 - params.skip_conn))


def anchor_dense_adjacency(state: AnchorState, a0, params: GslParams) -> np.ndarray:
    """Materialize the fused adjacency of an anchor run (for export, N <= DENSE_LIMIT)."""
    n = state.h.shape[0]
    if n > DENSE_LIMIT:
        raise ValueError(f"refusing to materialize a {n} x {n} adjacency")

    def sim(z):
        return metric_similarity_from_units(z, params.epsilon)

    s1 = sim(state.z_first)
    st = s1 if params.n_iter == 1 else sim(state.z_last)
    learned = params.update_ratio * st + (1 - params.update_ratio) * s1
    a0 = a0.toarray() if sp.issparse(a0) else np.asarray(a0)
    return params.skip_conn * a0 + (1 - params.skip_conn) * learned


def metric_similarity_from_units(z: Sequence[Tensor], epsilon: float) -> np.ndarray:
    s = sum(zp.data @ zp.data.T for zp in z) / len(z)
    return np.where(s >= max(epsilon, 0.0), s, 0.0)
