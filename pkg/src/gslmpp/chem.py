"""SMILES parsing into attributed molecular graphs, plus atom featurization.

Only the subset of SMILES needed for property-prediction corpora is
understood: organic-subset and bracket atoms, charges, explicit hydrogens,
branches, ring closures (including ``%nn``), bond symbols ``- = # :`` and
``.`` fragment separators.  Stereochemistry, isotopes and wildcard atoms
are rejected unless ``ignore_stereo=True`` is passed, in which case stereo
markers are dropped before parsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Atom",
    "Bond",
    "BondOrder",
    "MoleculeGraph",
    "SmilesError",
    "ATOM_FEATURE_DIM",
    "ELEMENTS",
    "FEATURE_ELEMENTS",
    "featurize",
    "parse_smiles",
]


class SmilesError(ValueError):
    """Raised for malformed or unsupported SMILES; ``position`` is the 0-based offset."""

    def __init__(self, message: str, smiles: str, position: int):
        super().__init__(f"{message} at offset {position} in {smiles!r}")
        self.smiles = smiles
        self.position = position


# symbol -> atomic number
ELEMENTS: dict[str, int] = {
    "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "Ne": 10, "Na": 11, "Mg": 12, "Al": 13, "Si": 14, "P": 15, "S": 16,
    "Cl": 17, "Ar": 18, "K": 19, "Ca": 20, "Ti": 22, "V": 23, "Cr": 24,
    "Mn": 25, "Fe": 26, "Co": 27, "Ni": 28, "Cu": 29, "Zn": 30, "Ga": 31,
    "Ge": 32, "As": 33, "Se": 34, "Br": 35, "Kr": 36, "Rb": 37, "Sr": 38,
    "Zr": 40, "Mo": 42, "Ru": 44, "Rh": 45, "Pd": 46, "Ag": 47, "Cd": 48,
    "In": 49, "Sn": 50, "Sb": 51, "Te": 52, "I": 53, "Xe": 54, "Cs": 55,
    "Ba": 56, "La": 57, "Gd": 64, "Yb": 70, "W": 74, "Re": 75, "Os": 76,
    "Ir": 77, "Pt": 78, "Au": 79, "Hg": 80, "Tl": 81, "Pb": 82, "Bi": 83,
    "U": 92,
}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
AROMATIC_BRACKET = {"se": "Se", "as": "As", "te": "Te", **AROMATIC_ORGANIC}

# allowed valences of neutral atoms, ascending
DEFAULT_VALENCE: dict[str, tuple[int, ...]] = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1, 3, 5), "Si": (4,), "Se": (2, 4, 6),
    "As": (3, 5), "Te": (2, 4, 6), "H": (1,),
}
_GROUP = {"B": 13, "C": 14, "Si": 14, "N": 15, "P": 15, "As": 15,
          "O": 16, "S": 16, "Se": 16, "Te": 16}


class BondOrder:
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
                 "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_STEREO_BONDS = "/\\"


@dataclass
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h_count: int = 0
    aromatic: bool = False
    degree: int = 0
    in_ring: bool = False
    implicit_h_count: int = 0
    bracket: bool = False

    @property
    def total_h(self) -> int:
        return self.explicit_h_count + self.implicit_h_count

    @property
    def atomic_number(self) -> int:
        return ELEMENTS[self.element]


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: int

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)

    @property
    def valence_contribution(self) -> int:
        return 1 if self.order == BondOrder.AROMATIC else self.order


@dataclass
class MoleculeGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[int]]
    source_smiles: str = ""
    n_fragments: int = 1
    # bond index per (min, max) atom pair
    bond_index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def multi_fragment(self) -> bool:
        return self.n_fragments > 1

    def bond_between(self, i: int, j: int) -> Bond | None:
        k = self.bond_index.get((min(i, j), max(i, j)))
        return None if k is None else self.bonds[k]

    def edge_array(self) -> np.ndarray:
        """Directed edge list (2, 2 * n_bonds)."""
        if not self.bonds:
            return np.zeros((2, 0), dtype=np.int64)
        e = np.array([b.endpoints for b in self.bonds], dtype=np.int64).T
        return np.concatenate([e, e[::-1]], axis=1)

    def permuted(self, order) -> "MoleculeGraph":
        """Return the same molecule with atoms re-indexed so new atom k is old atom ``order[k]``."""
        order = list(order)
        inv = {old: new for new, old in enumerate(order)}
        atoms = [Atom(**vars(self.atoms[old])) for old in order]
        bonds = [Bond(inv[b.begin], inv[b.end], b.order) for b in self.bonds]
        return _assemble(atoms, bonds, self.source_smiles, self.n_fragments)


def _assemble(atoms, bonds, smiles, n_fragments) -> MoleculeGraph:
    adjacency: list[list[int]] = [[] for _ in atoms]
    index = {}
    for k, b in enumerate(bonds):
        adjacency[b.begin].append(b.end)
        adjacency[b.end].append(b.begin)
        index[(min(b.begin, b.end), max(b.begin, b.end))] = k
    for a, nbrs in zip(atoms, adjacency):
        a.degree = len(nbrs)
    return MoleculeGraph(atoms, bonds, adjacency, smiles, n_fragments, index)


def _strip_stereo(s: str) -> str:
    out = []
    in_bracket = False
    for ch in s:
        if ch == "[":
            in_bracket = True
        elif ch == "]":
            in_bracket = False
        if ch in _STEREO_BONDS and not in_bracket:
            continue
        if ch == "@" and in_bracket:
            continue
        out.append(ch)
    return "".join(out)


def _parse_bracket(s: str, start: int):
    """Parse ``[...]`` beginning at ``start``; returns (Atom, next_index)."""
    end = s.find("]", start)
    if end < 0:
        raise SmilesError("unterminated bracket atom", s, start)
    body = s[start + 1:end]
    pos = 0
    if body[:1].isdigit():
        raise SmilesError("isotopes are not supported", s, start + 1)
    symbol = None
    aromatic = False
    for cand in sorted(AROMATIC_BRACKET, key=len, reverse=True):
        if body.startswith(cand):
            symbol, aromatic = AROMATIC_BRACKET[cand], True
            pos = len(cand)
            break
    if symbol is None:
        if len(body) >= 2 and body[:2] in ELEMENTS:
            symbol, pos = body[:2], 2
        elif body[:1] in ELEMENTS:
            symbol, pos = body[:1], 1
        elif body[:1] == "*":
            raise SmilesError("wildcard atoms are not supported", s, start + 1)
        else:
            raise SmilesError(f"unknown atom symbol in [{body}]", s, start + 1)
    if body[pos:pos + 1] == "@":
        raise SmilesError("stereochemistry is not supported", s, start + 1 + pos)
    h = 0
    if body[pos:pos + 1] == "H":
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        h = int(digits) if digits else 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            digits = ""
            while pos < len(body) and body[pos].isdigit():
                digits += body[pos]
                pos += 1
            charge = sign * int(digits)
        else:
            charge = sign
            while pos < len(body) and body[pos] == ("+" if sign > 0 else "-"):
                charge += sign
                pos += 1
    if pos != len(body):
        raise SmilesError(f"unsupported bracket atom content [{body}]", s, start + 1 + pos)
    return Atom(symbol, charge, h, aromatic, bracket=True), end + 1


def _max_valence(atom: Atom) -> int | None:
    vals = DEFAULT_VALENCE.get(atom.element)
    if vals is None:
        return None
    top = vals[-1]
    q = atom.formal_charge
    if q == 0:
        return top
    group = _GROUP.get(atom.element)
    if group is None:
        return None
    # charged atoms: N+ takes four bonds, O+ three, C+/C- three, B- four
    if q > 0:
        return {14: 3, 15: top + 1, 16: top + 1}.get(group)
    return {13: 4, 14: 3, 15: top, 16: top}[group]


def _assign_hydrogens(s: str, atoms: list[Atom], bonds: list[Bond], positions: list[int]):
    bond_sum = [0] * len(atoms)
    n_arom = [0] * len(atoms)
    for b in bonds:
        for k in (b.begin, b.end):
            bond_sum[k] += b.valence_contribution
            if b.order == BondOrder.AROMATIC:
                n_arom[k] += 1
    for k, atom in enumerate(atoms):
        used = bond_sum[k] + atom.explicit_h_count
        pi = 1 if atom.aromatic and n_arom[k] >= 2 else 0
        if atom.bracket:
            limit = _max_valence(atom)
            if limit is not None and used > limit:
                raise SmilesError(f"valence violation on {atom.element}", s, positions[k])
            continue
        allowed = DEFAULT_VALENCE[atom.element]
        for v in allowed:
            if v - used - pi >= 0:
                atom.implicit_h_count = v - used - pi
                break
            if pi and v - used >= 0:
                atom.implicit_h_count = v - used
                break
        else:
            raise SmilesError(f"valence violation on {atom.element}", s, positions[k])


def _ring_bonds(n: int, adjacency: list[list[int]]) -> set[tuple[int, int]]:
    """Bonds lying on a cycle, i.e. every non-bridge edge (iterative Tarjan)."""
    disc = [-1] * n
    low = [0] * n
    bridges: set[tuple[int, int]] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adjacency[root]))]
        while stack:
            v, parent, it = stack[-1]
            advanced = False
            for u in it:
                if u == parent:
                    parent = -2  # skip the tree edge only once
                    stack[-1] = (v, parent, it)
                    continue
                if disc[u] < 0:
                    disc[u] = low[u] = timer
                    timer += 1
                    stack.append((u, v, iter(adjacency[u])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[u])
            if advanced:
                continue
            stack.pop()
            if stack:
                p = stack[-1][0]
                low[p] = min(low[p], low[v])
                if low[v] > disc[p]:
                    bridges.add((min(p, v), max(p, v)))
    ring = set()
    for v in range(n):
        for u in adjacency[v]:
            if v < u and (v, u) not in bridges:
                ring.add((v, u))
    return ring


def parse_smiles(s: str, ignore_stereo: bool = False) -> MoleculeGraph:
    """Parse a SMILES string into a :class:`MoleculeGraph`.

    Raises :class:`SmilesError` for unbalanced parentheses, unmatched ring
    closures, unknown atoms, valence violations and unsupported syntax.
    """
    if not s or not s.strip():
        raise SmilesError("empty SMILES", s or "", 0)
    source = s
    s = s.strip()
    if ignore_stereo:
        s = _strip_stereo(s)

    atoms: list[Atom] = []
    positions: list[int] = []
    bonds: list[Bond] = []
    pairs: set[tuple[int, int]] = set()
    branch_stack: list[tuple[int, int]] = []
    rings: dict[int, tuple[int, int | None, int]] = {}
    prev: int | None = None
    pending: int | None = None
    pending_pos = 0
    n_fragments = 1
    i = 0

    def add_bond(a: int, b: int, order: int | None, where: int):
        if a == b:
            raise SmilesError("atom bonded to itself", s, where)
        key = (min(a, b), max(a, b))
        if key in pairs:
            raise SmilesError("duplicate bond between the same atoms", s, where)
        if order is None:
            order = BondOrder.AROMATIC if atoms[a].aromatic and atoms[b].aromatic else BondOrder.SINGLE
        pairs.add(key)
        bonds.append(Bond(a, b, order))

    while i < len(s):
        ch = s[i]
        if ch == "[" or ch.isalpha() or ch == "*":
            if ch == "[":
                atom, nxt = _parse_bracket(s, i)
            elif ch == "*":
                raise SmilesError("wildcard atoms are not supported", s, i)
            else:
                two = s[i:i + 2]
                if two in ("Cl", "Br"):
                    atom, nxt = Atom(two), i + 2
                elif ch in ORGANIC_SUBSET:
                    atom, nxt = Atom(ch), i + 1
                elif ch in AROMATIC_ORGANIC:
                    atom, nxt = Atom(AROMATIC_ORGANIC[ch], aromatic=True), i + 1
                else:
                    raise SmilesError(f"unknown atom symbol {ch!r}", s, i)
            atoms.append(atom)
            positions.append(i)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending, i)
            elif pending is not None:
                raise SmilesError("bond symbol without a preceding atom", s, pending_pos)
            prev, pending = idx, None
            i = nxt
        elif ch in _BOND_SYMBOLS or ch in _STEREO_BONDS:
            if ch in _STEREO_BONDS:
                raise SmilesError("stereochemistry is not supported", s, i)
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", s, i)
            pending, pending_pos = _BOND_SYMBOLS[ch], i
            i += 1
        elif ch == "$":
            raise SmilesError("quadruple bonds are not supported", s, i)
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch without a preceding atom", s, i)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced parentheses", s, i)
            if pending is not None:
                raise SmilesError("dangling bond symbol", s, pending_pos)
            prev = branch_stack.pop()[0]
            i += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = s[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("malformed %nn ring closure", s, i)
                label, width = int(digits), 3
            else:
                label, width = int(ch), 1
            if prev is None:
                raise SmilesError("ring closure without a preceding atom", s, i)
            if label in rings:
                other, order, _ = rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise SmilesError("conflicting ring-closure bond orders", s, i)
                add_bond(other, prev, pending if pending is not None else order, i)
            else:
                rings[label] = (prev, pending, i)
            pending = None
            i += width
        elif ch == ".":
            if pending is not None:
                raise SmilesError("dangling bond symbol", s, pending_pos)
            if prev is None:
                raise SmilesError("fragment separator without a preceding atom", s, i)
            prev = None
            n_fragments += 1
            i += 1
        elif ch == "@":
            raise SmilesError("stereochemistry is not supported", s, i)
        else:
            raise SmilesError(f"unexpected character {ch!r}", s, i)

    if branch_stack:
        raise SmilesError("unbalanced parentheses", s, branch_stack[-1][1])
    if rings:
        label, (_, _, where) = next(iter(rings.items()))
        raise SmilesError(f"unmatched ring-closure digit {label}", s, where)
    if pending is not None:
        raise SmilesError("dangling bond symbol", s, pending_pos)
    if not atoms:
        raise SmilesError("no atoms", s, 0)

    atoms, bonds, positions = _fold_explicit_hydrogens(atoms, bonds, positions)
    graph = _assemble(atoms, bonds, source, n_fragments)

    ring = _ring_bonds(len(atoms), graph.adjacency)
    for a, b in ring:
        atoms[a].in_ring = True
        atoms[b].in_ring = True
    for k, b in enumerate(bonds):
        if b.order == BondOrder.AROMATIC and (min(b.begin, b.end), max(b.begin, b.end)) not in ring:
            bonds[k] = Bond(b.begin, b.end, BondOrder.SINGLE)
    for k, atom in enumerate(atoms):
        if atom.aromatic and not atom.in_ring:
            raise SmilesError("aromatic atom outside a ring", s, positions[k])
    _assign_hydrogens(s, atoms, bonds, positions)
    return graph


def _fold_explicit_hydrogens(atoms, bonds, positions):
    """Merge neutral ``[H]`` atoms bonded to a heavy atom into that atom's H count."""
    drop = set()
    for b in bonds:
        for h, heavy in ((b.begin, b.end), (b.end, b.begin)):
            ha = atoms[h]
            if (ha.element == "H" and ha.formal_charge == 0 and ha.explicit_h_count == 0
                    and atoms[heavy].element != "H" and b.order == BondOrder.SINGLE):
                if sum(1 for c in bonds if h in (c.begin, c.end)) == 1:
                    drop.add(h)
    if not drop:
        return atoms, bonds, positions
    keep = [k for k in range(len(atoms)) if k not in drop]
    remap = {old: new for new, old in enumerate(keep)}
    kept_bonds = []
    for b in bonds:
        if b.begin in drop:
            atoms[b.end].explicit_h_count += 1
        elif b.end in drop:
            atoms[b.begin].explicit_h_count += 1
        else:
            kept_bonds.append(Bond(remap[b.begin], remap[b.end], b.order))
    return [atoms[k] for k in keep], kept_bonds, [positions[k] for k in keep]


FEATURE_ELEMENTS = ("C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "I", "B",
                    "Se", "H", "Na", "K", "Li", "Ca", "Mg", "Zn")
_DEGREES = 6        # 0..5
_CHARGES = (-2, -1, 0, 1, 2)
_H_COUNTS = 5       # 0..4
ATOM_FEATURE_DIM = len(FEATURE_ELEMENTS) + 1 + _DEGREES + len(_CHARGES) + _H_COUNTS + 2


def featurize(g: MoleculeGraph) -> np.ndarray:
    """Atom feature matrix (n_atoms, ATOM_FEATURE_DIM).

    Columns: element one-hot (plus "other"), degree 0-5, formal charge -2..+2,
    total H count 0-4, aromatic flag, ring flag.  Out-of-range values land in
    the last bucket of their block.
    """
    x = np.zeros((g.n_atoms, ATOM_FEATURE_DIM))
    n_el = len(FEATURE_ELEMENTS) + 1
    el_index = {e: k for k, e in enumerate(FEATURE_ELEMENTS)}
    for v, atom in enumerate(g.atoms):
        off = 0
        x[v, el_index.get(atom.element, n_el - 1)] = 1.0
        off += n_el
        x[v, off + min(atom.degree, _DEGREES - 1)] = 1.0
        off += _DEGREES
        q = min(max(atom.formal_charge, _CHARGES[0]), _CHARGES[-1])
        x[v, off + _CHARGES.index(q)] = 1.0
        off += len(_CHARGES)
        x[v, off + min(atom.total_h, _H_COUNTS - 1)] = 1.0
        off += _H_COUNTS
        x[v, off] = float(atom.aromatic)
        x[v, off + 1] = float(atom.in_ring)
    return x
