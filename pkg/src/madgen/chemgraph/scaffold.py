"""Murcko scaffold extraction and free-atom accounting.

The scaffold is the ring systems plus linkers (the graph's 2-core), with
terminal atoms multiple-bonded directly to a ring atom retained (ring
carbonyls and exocyclic methylenes stay; everything else is pruned).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from madgen.chemgraph.mol import (
    AROMATIC,
    BOND_ORDER,
    DOUBLE,
    TRIPLE,
    Atom,
    MolGraph,
    infer_implicit_h,
)
from madgen.errors import CompositionError

if TYPE_CHECKING:
    from madgen.spectra import ChemFormula

EMPTY_GRAPH = MolGraph(atoms=(), bonds=frozenset())


@dataclass(frozen=True)
class Scaffold:
    """Scaffold graph plus (optionally) its mapping back to the parent."""

    graph: MolGraph
    parent_atom_index: dict[int, int] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return self.graph.n_atoms == 0


def murcko_scaffold(mol: MolGraph) -> Scaffold:
    """Extract the Murcko scaffold; acyclic molecules yield the empty scaffold."""
    ring = mol.ring_atoms
    if not ring:
        return Scaffold(EMPTY_GRAPH, {})

    # 2-core: iteratively peel current degree-1 atoms. Ring atoms never peel;
    # linkers between rings survive because both directions lead to rings.
    keep = set(range(mol.n_atoms))
    degree = {i: mol.degree(i) for i in keep}
    leaves = [i for i in keep if degree[i] <= 1]
    while leaves:
        u = leaves.pop()
        if u not in keep:
            continue
        keep.discard(u)
        for v, _ in mol.adjacency[u]:
            if v in keep:
                degree[v] -= 1
                if degree[v] == 1:
                    leaves.append(v)

    # Retain exocyclic double/triple-bonded atoms hanging off a ring atom.
    for i, j, kind in mol.bonds:
        if kind in (DOUBLE, TRIPLE):
            if i in ring and j not in keep:
                keep.add(j)
            elif j in ring and i not in keep:
                keep.add(i)

    ordered = sorted(keep)
    new_index = {old: new for new, old in enumerate(ordered)}
    bonds = [(new_index[i], new_index[j], kind)
             for i, j, kind in mol.bonds if i in keep and j in keep]

    atoms = []
    for old in ordered:
        parent_atom = mol.atoms[old]
        severed = sum(
            1.0 if kind == AROMATIC else BOND_ORDER[kind]
            for v, kind in mol.adjacency[old] if v not in keep)
        if severed:
            # Severed substituent bonds become hydrogens on the scaffold atom.
            implicit_h = parent_atom.implicit_h + int(round(severed))
            atoms.append(Atom(parent_atom.element, parent_atom.formal_charge,
                              parent_atom.aromatic, implicit_h))
        else:
            atoms.append(parent_atom)

    graph = MolGraph.from_lists(atoms, bonds)
    return Scaffold(graph, {new: old for old, new in new_index.items()})


def free_atoms(mol_formula: "ChemFormula", scaffold: Scaffold) -> Counter:
    """Heavy atoms of the formula not covered by the scaffold, as a multiset."""
    remaining = Counter({el: n for el, n in mol_formula.counts.items()
                         if el != "H"})
    remaining.subtract(scaffold.graph.heavy_atom_counter())
    negative = {el: n for el, n in remaining.items() if n < 0}
    if negative:
        raise CompositionError(
            f"scaffold exceeds formula composition for {sorted(negative)}")
    return Counter({el: n for el, n in remaining.items() if n > 0})
