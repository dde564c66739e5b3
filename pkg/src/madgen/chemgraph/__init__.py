"""Molecular graphs, SMILES, scaffolds, and fingerprints."""

from madgen.chemgraph.fingerprint import Fingerprint, morgan_fingerprint
from madgen.chemgraph.mol import (
    AROMATIC,
    BOND_TYPES,
    DOUBLE,
    MONOISOTOPIC_MASS,
    PROTON_MASS,
    SINGLE,
    SUPPORTED_ELEMENTS,
    TRIPLE,
    Atom,
    MolGraph,
    allowed_valences,
    find_bridges,
    formula_counts,
    hill_formula,
    infer_implicit_h,
)
from madgen.chemgraph.scaffold import EMPTY_GRAPH, Scaffold, free_atoms, murcko_scaffold
from madgen.chemgraph.smiles import (
    canonical_ranks,
    graphs_equal,
    parse_smiles,
    write_smiles,
)

__all__ = [
    "AROMATIC",
    "Atom",
    "BOND_TYPES",
    "DOUBLE",
    "EMPTY_GRAPH",
    "Fingerprint",
    "MONOISOTOPIC_MASS",
    "MolGraph",
    "PROTON_MASS",
    "SINGLE",
    "SUPPORTED_ELEMENTS",
    "Scaffold",
    "TRIPLE",
    "allowed_valences",
    "canonical_ranks",
    "find_bridges",
    "formula_counts",
    "free_atoms",
    "graphs_equal",
    "hill_formula",
    "infer_implicit_h",
    "morgan_fingerprint",
    "murcko_scaffold",
    "parse_smiles",
    "write_smiles",
]
