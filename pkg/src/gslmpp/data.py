"""Dataset loading, Bemis-Murcko scaffold splitting and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .chem import MoleculeGraph, SmilesError, parse_smiles

log = logging.getLogger(__name__)

TASKS = ("classification", "regression")


class DataError(ValueError):
    """Bad dataset input (missing columns, no usable rows, degenerate split)."""


@dataclass
class Dataset:
    smiles: list[str]
    graphs: list[MoleculeGraph]
    labels: np.ndarray              # (N, n_tasks), NaN where missing
    task: str
    name: str = "dataset"
    label_names: list[str] = field(default_factory=list)
    n_dropped: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"task must be one of {TASKS}, got {self.task!r}")
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(len(self.smiles), -1)

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.labels)

    @property
    def records(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [(s, y, ~np.isnan(y)) for s, y in zip(self.smiles, self.labels)]

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = list(index)
        return Dataset([self.smiles[i] for i in index], [self.graphs[i] for i in index],
                       self.labels[index], self.task, self.name, list(self.label_names))


def _infer_task(labels: np.ndarray) -> str:
    vals = labels[~np.isnan(labels)]
    return "classification" if vals.size and np.all(np.isin(vals, (0.0, 1.0))) else "regression"


def from_smiles(smiles: Sequence[str], labels, task: str | None = None, name: str = "dataset",
                ignore_stereo: bool = False) -> Dataset:
    """Build a dataset from in-memory SMILES; unparseable entries are dropped."""
    labels = np.asarray(labels, dtype=np.float64).reshape(len(smiles), -1)
    keep, graphs = [], []
    for i, s in enumerate(smiles):
        try:
            graphs.append(parse_smiles(s, ignore_stereo=ignore_stereo))
            keep.append(i)
        except SmilesError as exc:
            log.debug("dropping row %d: %s", i, exc)
    dropped = len(smiles) - len(keep)
    if not keep:
        raise DataError("no valid SMILES rows")
    labels = labels[keep]
    return Dataset([smiles[i] for i in keep], graphs, labels, task or _infer_task(labels), name,
                   [f"task{k}" for k in range(labels.shape[1])], dropped)


def load_csv(path, smiles_column: str = "smiles", label_columns: Sequence[str] | None = None,
             task: str | None = None, ignore_stereo: bool = False, name: str | None = None) -> Dataset:
    """Read a headed UTF-8 CSV.  Empty label cells become missing labels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if smiles_column not in header:
            raise DataError(f"column {smiles_column!r} not found in {path} (have {header})")
        if not label_columns:
            label_columns = [c for c in header if c != smiles_column]
        missing = [c for c in label_columns if c not in header]
        if missing:
            raise DataError(f"label column(s) {missing} not found in {path}")
        smiles, labels = [], []
        for row in reader:
            smiles.append(row[smiles_column])
            labels.append([float(row[c]) if row[c].strip() not in ("", "nan", "NaN") else np.nan
                           for c in label_columns])
    if not smiles:
        raise DataError(f"{path} has no data rows")
    ds = from_smiles(smiles, np.array(labels, dtype=np.float64), task, name or path.stem, ignore_stereo)
    ds.label_names = list(label_columns)
    if ds.n_dropped:
        log.warning("%s: dropped %d row(s) with unparseable SMILES", path.name, ds.n_dropped)
    return ds


# ---------------------------------------------------------------- scaffolds

def murcko_scaffold(g: MoleculeGraph) -> str:
    """Canonical key of the Bemis-Murcko scaffold ("" for acyclic molecules).

    Non-ring atoms with at most one remaining neighbour are stripped until
    none are left, which keeps ring systems and the linkers between them.
    """
    alive = [True] * g.n_atoms
    deg = [len(nb) for nb in g.adjacency]
    stack = [v for v in range(g.n_atoms) if deg[v] <= 1 and not g.atoms[v].in_ring]
    while stack:
        v = stack.pop()
        if not alive[v]:
            continue
        alive[v] = False
        for u in g.adjacency[v]:
            if alive[u]:
                deg[u] -= 1
                if deg[u] <= 1 and not g.atoms[u].in_ring:
                    stack.append(u)
    keep = [v for v in range(g.n_atoms) if alive[v]]
    if not keep:
        return ""
    local = {v: k for k, v in enumerate(keep)}
    labels = [f"{g.atoms[v].element}{'a' if g.atoms[v].aromatic else ''}" for v in keep]
    nbrs: list[list[tuple[int, int]]] = [[] for _ in keep]
    for b in g.bonds:
        if alive[b.begin] and alive[b.end]:
            i, j = local[b.begin], local[b.end]
            nbrs[i].append((j, b.order))
            nbrs[j].append((i, b.order))
    return canonical_key(labels, nbrs)


def _refine(colors: list[int], nbrs) -> list[int]:
    while True:
        sigs = [(colors[v], tuple(sorted((o, colors[u]) for u, o in nbrs[v]))) for v in range(len(colors))]
        ranks = {s: k for k, s in enumerate(sorted(set(sigs)))}
        new = [ranks[s] for s in sigs]
        if len(ranks) == len(set(colors)):
            return new
        colors = new


def canonical_key(labels: Sequence[str], nbrs, max_leaves: int = 4096) -> str:
    """Canonical string of a labelled graph via refinement plus individualization.

    Ties left after refinement are broken by trying every member of the first
    tied class and keeping the lexicographically smallest certificate.
    """
    n = len(labels)
    order = {lab: k for k, lab in enumerate(sorted(set(labels)))}
    best: list[str | None] = [None]
    leaves = [0]

    def certificate(colors):
        pos = colors
        atoms = [None] * n
        for v in range(n):
            atoms[pos[v]] = labels[v]
        edges = sorted(
            (min(pos[v], pos[u]), max(pos[v], pos[u]), o) for v in range(n) for u, o in nbrs[v] if v < u
        )
        return ".".join(atoms) + "|" + ";".join(f"{a}-{b}:{o}" for a, b, o in edges)

    def search(colors):
        colors = _refine(colors, nbrs)
        if len(set(colors)) == n:
            leaves[0] += 1
            cert = certificate(colors)
            if best[0] is None or cert < best[0]:
                best[0] = cert
            return
        counts = np.bincount(colors)
        target = int(np.flatnonzero(counts > 1)[0])
        for v in [v for v in range(n) if colors[v] == target]:
            if leaves[0] >= max_leaves:
                return
            split = [2 * c + (1 if c >= target and not (c == target and u == v) else 0)
                     for u, c in enumerate(colors)]
            search(split)

    search([order[lab] for lab in labels])
    return best[0]


@dataclass
class SplitMask:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.sort(np.asarray(self.train, dtype=np.int64))
        self.valid = np.sort(np.asarray(self.valid, dtype=np.int64))
        self.test = np.sort(np.asarray(self.test, dtype=np.int64))

    @property
    def n(self) -> int:
        return len(self.train) + len(self.valid) + len(self.test)

    def to_json(self) -> dict:
        return {"train": self.train.tolist(), "valid": self.valid.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitMask":
        return cls(obj["train"], obj["valid"], obj["test"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SplitMask":
        path = Path(path)
        if not path.exists():
            raise DataError(f"split file not found: {path}")
        return cls.from_json(json.loads(path.read_text()))

    def check_partition(self, n: int):
        allidx = np.concatenate([self.train, self.valid, self.test])
        if len(allidx) != n or len(np.unique(allidx)) != n or allidx.min(initial=0) < 0 or allidx.max(initial=-1) >= n:
            raise DataError(f"split does not partition {n} molecules")


def _check_fractions(fractions):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")


def scaffold_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                   keys: Sequence[str] | None = None) -> SplitMask:
    """Assign whole scaffold groups, largest first, to train, then valid, then test.

    Groups of equal size are ordered by a seeded shuffle.
    """
    _check_fractions(fractions)
    if keys is None:
        keys = [murcko_scaffold(g) for g in dataset.graphs]
    groups: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    if len(groups) < 3:
        raise DataError(f"only {len(groups)} scaffold group(s); use a random split instead")
    rng = np.random.default_rng(seed)
    ordered = [list(groups.values())[k] for k in rng.permutation(len(groups))]
    ordered.sort(key=len, reverse=True)
    n = len(keys)
    cut_train = fractions[0] * n - 1e-9
    cut_valid = (fractions[0] + fractions[1]) * n - 1e-9
    train, valid, test = [], [], []
    for grp in ordered:
        if len(train) < cut_train:
            train += grp
        elif len(train) + len(valid) < cut_valid:
            valid += grp
        else:
            test += grp
    return SplitMask(train, valid, test)


def random_split(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitMask:
    _check_fractions(fractions)
    perm = np.random.default_rng(seed).permutation(n)
    a = int(round(fractions[0] * n))
    b = int(round((fractions[0] + fractions[1]) * n))
    return SplitMask(perm[:a], perm[a:b], perm[b:])


# ---------------------------------------------------------------- metrics

def _binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels, present=None) -> float:
    """Mann-Whitney ROC-AUC; multi-task inputs average the tasks that have both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if present is None:
        present = ~np.isnan(labels)
    present = np.asarray(present, dtype=bool).reshape(labels.shape)
    values = []
    for t in range(labels.shape[1]):
        m = present[:, t]
        y = labels[m, t]
        if len(np.unique(y)) < 2:
            if labels.shape[1] > 1:
                warnings.warn(f"task {t} has a single class; skipped in ROC-AUC", stacklevel=2)
            continue
        values.append(_binary_auc(scores[m, t], y))
    if not values:
        raise DataError("ROC-AUC undefined: no task has both classes present")
    return float(np.mean(values))


def rmse(predictions, targets, present=None) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"shape mismatch {p.shape} vs {t.shape}")
    m = ~np.isnan(t) if present is None else np.asarray(present, dtype=bool).reshape(t.shape)
    if not m.any():
        raise DataError("RMSE undefined: no targets present")
    return float(np.sqrt(np.mean((p[m] - t[m]) ** 2)))


def metric_name(task: str) -> str:
    return "roc_auc" if task == "classification" else "rmse"


def higher_is_better(task: str) -> bool:
    return task == "classification"


# ---------------------------------------------------------------- synthetic corpus

_UNITS = ("C", "CC", "C(C)", "C(=O)", "N", "O", "C(F)(F)", "c1ccc(cc1)", "C1CCC(CC1)",
          "c1ccc(nc1)", "C(Cl)", "S(=O)(=O)", "C#C", "c1cc(oc1)", "C1CC(N1)")
_CAPS = ("C", "O", "N", "F", "Cl", "C#N", "C(=O)O", "c1ccccc1", "C1CC1")


def synthetic_smiles(n: int, seed: int = 0, min_units: int = 3, max_units: int = 8) -> list[str]:
    """Random valid SMILES assembled from small building blocks (for scaling tests)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(min_units, max_units + 1))
        parts = ["C"] + [_UNITS[i] for i in rng.integers(0, len(_UNITS), size=k)]
        parts.append(_CAPS[int(rng.integers(0, len(_CAPS)))])
        out.append("".join(parts))
    return out
