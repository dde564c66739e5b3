"""Molecular graph representation over heavy atoms.

Hydrogens are implicit counts on atoms; bonds live on unordered index pairs.
Aromatic bonds are a first-class bond type (no kekulization), so two
molecules written in aromatic vs. Kekule form are distinct graphs here.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable

from madgen.errors import ValenceError

if TYPE_CHECKING:
    from madgen.spectra import ChemFormula

SINGLE = "single"
DOUBLE = "double"
TRIPLE = "triple"
AROMATIC = "aromatic"
BOND_TYPES = (SINGLE, DOUBLE, TRIPLE, AROMATIC)

# Full bond order used for implicit-H inference.
BOND_ORDER = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}
# Sigma-framework order used for valence checks; an aromatic atom's pi
# contribution is ambiguous by +/-1 (pyridine vs. pyrrole nitrogen), so the
# check only charges one sigma bond per aromatic bond.
SIGMA_ORDER = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.0}

SUPPORTED_ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I")
ORGANIC_SUBSET = frozenset(SUPPORTED_ELEMENTS)
AROMATIC_CAPABLE = frozenset({"C", "N", "O", "S", "P"})

_VALENCES = {
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "S": (2, 4, 6),
    "P": (3, 5),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

# Monoisotopic masses of the supported heavy atoms plus hydrogen.
MONOISOTOPIC_MASS = {
    "C": 12.000,
    "H": 1.00783,
    "N": 14.00307,
    "O": 15.99491,
    "S": 31.97207,
    "P": 30.97376,
    "F": 18.99840,
    "Cl": 34.96885,
    "Br": 78.91834,
    "I": 126.90447,
}

PROTON_MASS = 1.00728


def allowed_valences(element: str, charge: int = 0) -> tuple[int, ...]:
    """Valence states permitted for an element at a formal charge.

    Positive charge raises the valence of N/P/O/S (ammonium, oxocarbenium),
    negative charge lowers it (alkoxide, amide anion); charged carbon loses
    one connection either way (carbanion/carbocation).
    """
    base = _VALENCES[element]
    if charge == 0:
        return base
    if element == "C":
        return (max(0, 4 - abs(charge)),)
    return tuple(max(0, v + charge) for v in base)


def infer_implicit_h(element: str, charge: int, aromatic: bool,
                     bond_orders: Iterable[float]) -> int:
    """Implicit hydrogen count a SMILES reader assigns to an organic-subset atom.

    Aliphatic atoms fill up to the smallest allowed valence that covers the
    explicit bond order sum. Aromatic atoms fill against the default valence
    with aromatic bonds counted at 1.5 (benzene CH -> 1, fused CH -> 0).
    """
    total = sum(bond_orders)
    allowed = allowed_valences(element, charge)
    if aromatic:
        return max(0, math.floor(allowed[0] - total + 1e-9))
    for valence in allowed:
        if valence >= total - 1e-9:
            return int(round(valence - total))
    return 0


@dataclass(frozen=True, slots=True)
class Atom:
    """Heavy atom: element symbol, formal charge, aromatic flag, implicit H."""

    element: str
    formal_charge: int = 0
    aromatic: bool = False
    implicit_h: int = 0

    def __post_init__(self):
        if self.element not in ORGANIC_SUBSET:
            raise ValenceError(f"unsupported element {self.element!r}")
        if self.implicit_h < 0:
            raise ValenceError("implicit hydrogen count must be non-negative")


@dataclass(frozen=True)
class MolGraph:
    """Labeled undirected molecular graph over heavy atoms.

    bonds hold (i, j, bond_type) with i < j and at most one bond per pair.
    """

    atoms: tuple[Atom, ...]
    bonds: frozenset[tuple[int, int, str]]

    @staticmethod
    def from_lists(atoms: Iterable[Atom],
                   bonds: Iterable[tuple[int, int, str]]) -> "MolGraph":
        atoms = tuple(atoms)
        normalized = set()
        seen_pairs = set()
        for i, j, kind in bonds:
            if i == j:
                raise ValenceError("self-loops are not allowed")
            if kind not in BOND_TYPES:
                raise ValenceError(f"unknown bond type {kind!r}")
            i, j = (i, j) if i < j else (j, i)
            if (i, j) in seen_pairs:
                raise ValenceError(f"duplicate bond between atoms {i} and {j}")
            seen_pairs.add((i, j))
            normalized.add((i, j, kind))
        return MolGraph(atoms, frozenset(normalized))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, str], ...], ...]:
        neigh: list[list[tuple[int, str]]] = [[] for _ in self.atoms]
        for i, j, kind in self.bonds:
            neigh[i].append((j, kind))
            neigh[j].append((i, kind))
        return tuple(tuple(sorted(n)) for n in neigh)

    def neighbors(self, i: int) -> tuple[tuple[int, str], ...]:
        return self.adjacency[i]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_orders(self, i: int) -> list[float]:
        return [BOND_ORDER[kind] for _, kind in self.adjacency[i]]

    def sigma_order_sum(self, i: int) -> float:
        return sum(SIGMA_ORDER[kind] for _, kind in self.adjacency[i])

    def validate(self) -> None:
        """Raise ValenceError on any valence or aromaticity violation."""
        for i, j, kind in self.bonds:
            if kind == AROMATIC:
                if not (self.atoms[i].aromatic and self.atoms[j].aromatic):
                    raise ValenceError(
                        f"aromatic bond {i}-{j} between non-aromatic atoms")
        for idx, atom in enumerate(self.atoms):
            if atom.aromatic and atom.element not in AROMATIC_CAPABLE:
                raise ValenceError(f"{atom.element} cannot be aromatic")
            cap = max(allowed_valences(atom.element, atom.formal_charge))
            load = self.sigma_order_sum(idx) + atom.implicit_h
            if load > cap + 1e-9:
                raise ValenceError(
                    f"atom {idx} ({atom.element}, charge {atom.formal_charge}) "
                    f"carries valence {load:g} > {cap}")

    def connected_components(self) -> list[list[int]]:
        seen = [False] * self.n_atoms
        components = []
        for start in range(self.n_atoms):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in self.adjacency[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            components.append(sorted(comp))
        return components

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        """Atoms lying on at least one cycle.

        Computed by peeling: the 2-core minus linker paths. An atom is on a
        cycle iff it survives iterative leaf removal and is not a cut path
        atom; for that we remove bridges first.
        """
        bridges = find_bridges(self)
        cyclic = set()
        # Any atom with a non-bridge incident bond lies on a cycle.
        for i, j, kind in self.bonds:
            if (i, j) not in bridges:
                cyclic.add(i)
                cyclic.add(j)
        return frozenset(cyclic)

    def heavy_atom_counter(self) -> Counter:
        return Counter(atom.element for atom in self.atoms)

    def total_implicit_h(self) -> int:
        return sum(atom.implicit_h for atom in self.atoms)

    def monoisotopic_mass(self) -> float:
        mass = sum(MONOISOTOPIC_MASS[a.element] for a in self.atoms)
        mass += self.total_implicit_h() * MONOISOTOPIC_MASS["H"]
        return mass


def find_bridges(mol: MolGraph) -> frozenset[tuple[int, int]]:
    """Bridge bonds (i, j) with i < j, via iterative Tarjan lowlink."""
    n = mol.n_atoms
    disc = [-1] * n
    low = [0] * n
    bridges = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]
        while stack:
            u, parent, state = stack.pop()
            if state == 0:
                if disc[u] != -1:
                    continue
                disc[u] = low[u] = timer
                timer += 1
                stack.append((u, parent, 1))
                for v, _ in mol.adjacency[u]:
                    if disc[v] == -1:
                        stack.append((v, u, 0))
            else:
                parent_skipped = False
                for v, _ in mol.adjacency[u]:
                    if v == parent and not parent_skipped:
                        parent_skipped = True
                        continue
                    if disc[v] > disc[u]:
                        # v is in u's DFS subtree
                        low[u] = min(low[u], low[v])
                        if low[v] > disc[u]:
                            bridges.add((min(u, v), max(u, v)))
                    else:
                        low[u] = min(low[u], disc[v])
    return frozenset(bridges)


def formula_counts(mol: MolGraph) -> Counter:
    """Element -> count map for the molecule, hydrogens included."""
    counts = mol.heavy_atom_counter()
    n_h = mol.total_implicit_h()
    if n_h:
        counts["H"] = n_h
    return counts


def hill_formula(mol: MolGraph) -> str:
    """Hill-notation molecular formula string (C, H, then alphabetical)."""
    counts = formula_counts(mol)
    parts = []
    for elem in ("C", "H"):
        if counts.get(elem):
            n = counts.pop(elem)
            parts.append(elem if n == 1 else f"{elem}{n}")
    for elem in sorted(counts):
        n = counts[elem]
        parts.append(elem if n == 1 else f"{elem}{n}")
    return "".join(parts)
