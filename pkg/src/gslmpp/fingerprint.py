"""Morgan / ECFP circular fingerprints and Tanimoto similarity.

Identifiers are produced by a fixed 64-bit hash so the same molecule gives
the same bits on every platform and in every process:

    h = 0x243F6A8885A308D3
    for v in values:            # each value taken modulo 2**64
        h = splitmix64(h ^ v)

where ``splitmix64`` is the standard SplitMix64 output function.  Round 0
hashes the atom invariant tuple (atomic number, degree, formal charge,
total H count, aromatic, in ring); round k hashes the atom's previous
identifier followed by the sorted (bond order, neighbour identifier) pairs.
Every identifier from every round is folded in with ``identifier % n_bits``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .chem import MoleculeGraph

MASK64 = (1 << 64) - 1
HASH_SEED = 0x243F6A8885A308D3


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_values(values: Iterable[int]) -> int:
    h = HASH_SEED
    for v in values:
        h = splitmix64(h ^ (v & MASK64))
    return h


def atom_invariants(g: MoleculeGraph) -> list[tuple[int, ...]]:
    return [
        (a.atomic_number, a.degree, a.formal_charge, a.total_h, int(a.aromatic), int(a.in_ring))
        for a in g.atoms
    ]


def morgan_identifiers(g: MoleculeGraph, radius: int) -> list[set[int]]:
    """Identifier set produced in each round 0..radius (unfolded)."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    current = [hash_values(inv) for inv in atom_invariants(g)]
    rounds = [set(current)]
    bond_orders = [
        [g.bond_between(v, u).order for u in g.adjacency[v]] for v in range(g.n_atoms)
    ]
    for _ in range(radius):
        nxt = []
        for v in range(g.n_atoms):
            env = sorted(zip(bond_orders[v], (current[u] for u in g.adjacency[v])))
            flat = [current[v]]
            for order, ident in env:
                flat.append(order)
                flat.append(ident)
            nxt.append(hash_values(flat))
        current = nxt
        rounds.append(set(current))
    return rounds


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray  # bool, shape (n_bits,)
    radius: int = 2

    @property
    def n_bits(self) -> int:
        return self.bits.shape[0]

    @cached_property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def on_bits(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.radius, self.bits.tobytes()))


def ecfp(g: MoleculeGraph, radius: int = 2, n_bits: int = 2048) -> Fingerprint:
    if n_bits < 64 or n_bits & (n_bits - 1):
        raise ValueError(f"n_bits must be a power of two >= 64, got {n_bits}")
    bits = np.zeros(n_bits, dtype=bool)
    for ids in morgan_identifiers(g, radius):
        for ident in ids:
            bits[ident % n_bits] = True
    return Fingerprint(bits, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a & b| / |a | b|; two empty fingerprints count as identical (1.0)."""
    if a.n_bits != b.n_bits:
        raise ValueError(f"fingerprint widths differ: {a.n_bits} vs {b.n_bits}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union


def fingerprint_matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    """Stack fingerprints into a (N, n_bits) float32 0/1 matrix."""
    widths = {fp.n_bits for fp in fps}
    if len(widths) > 1:
        raise ValueError(f"fingerprint widths differ: {sorted(widths)}")
    return np.stack([fp.bits for fp in fps]).astype(np.float32)


def tanimoto_block(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Tanimoto scores between two stacks of 0/1 fingerprints.

    Intersections come from a float32 matrix product; counts stay below
    2**24 so the product is exact.
    """
    inter = (rows @ cols.T).astype(np.float64)
    union = rows.sum(axis=1, dtype=np.float64)[:, None] + cols.sum(axis=1, dtype=np.float64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return sim


def tanimoto_matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    f = fingerprint_matrix(fps)
    return tanimoto_block(f, f)
