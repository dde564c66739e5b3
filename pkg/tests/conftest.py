import numpy as np
import pytest

from madgen.chemgraph import MolGraph, parse_smiles
from madgen.data import synthetic_molecules


@pytest.fixture(scope="session")
def corpus_200() -> list[str]:
    return synthetic_molecules(200)


@pytest.fixture(scope="session")
def corpus_mols(corpus_200) -> list[MolGraph]:
    return [parse_smiles(s) for s in corpus_200]


def permute_graph(mol: MolGraph, perm: list[int]) -> MolGraph:
    """Relabel atoms of ``mol`` so old index i becomes perm[i]."""
    atoms = [None] * mol.n_atoms
    for old, new in enumerate(perm):
        atoms[new] = mol.atoms[old]
    bonds = [(perm[i], perm[j], kind) for i, j, kind in mol.bonds]
    return MolGraph.from_lists(atoms, bonds)


def random_permutation(n: int, rng: np.random.Generator) -> list[int]:
    return list(rng.permutation(n))
