"""Circular (Morgan-style) fingerprints hashed into a fixed-width bit vector."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from madgen.chemgraph.mol import MolGraph

N_BITS = 2048
RADIUS = 2

_BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}


@dataclass(frozen=True)
class Fingerprint:
    """2048-bit substructure fingerprint, radius 2."""

    bits: np.ndarray  # bool, shape (2048,)
    radius: int = RADIUS

    def __post_init__(self):
        if self.bits.shape != (N_BITS,):
            raise ValueError(f"fingerprint must have {N_BITS} bits")

    def on_bits(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def _stable_hash(key: tuple) -> int:
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def morgan_fingerprint(mol: MolGraph, n_bits: int = N_BITS,
                       radius: int = RADIUS) -> Fingerprint:
    """Hash every atom's radius-0..r circular environment into bits.

    An environment is only emitted when it actually grew past the previous
    radius, so a single atom sets exactly one bit and benzene sets three.
    Invariant under atom reordering: neighbor contributions are sorted.
    """
    n = mol.n_atoms
    identifiers: set[int] = set()
    current = []
    for i in range(n):
        atom = mol.atoms[i]
        current.append(_stable_hash((
            "atom", atom.element, atom.formal_charge, atom.aromatic,
            atom.implicit_h, mol.degree(i),
        )))
    ball_sizes = [_ball_sizes(mol, i, radius) for i in range(n)]
    identifiers.update(current)

    for r in range(1, radius + 1):
        nxt = []
        for i in range(n):
            env = tuple(sorted(
                (_BOND_CODE[kind], current[j]) for j, kind in mol.adjacency[i]))
            nxt.append(_stable_hash(("env", r, current[i], env)))
        for i in range(n):
            if ball_sizes[i][r] > ball_sizes[i][r - 1]:
                identifiers.add(nxt[i])
        current = nxt

    bits = np.zeros(n_bits, dtype=bool)
    for ident in identifiers:
        bits[ident % n_bits] = True
    return Fingerprint(bits=bits, radius=radius)


def _ball_sizes(mol: MolGraph, start: int, radius: int) -> list[int]:
    """Number of atoms within distance 0..radius of ``start``."""
    dist = {start: 0}
    frontier = [start]
    sizes = [1]
    for _ in range(radius):
        nxt = []
        for u in frontier:
            for v, _ in mol.adjacency[u]:
                if v not in dist:
                    dist[v] = len(sizes)
                    nxt.append(v)
        sizes.append(sizes[-1] + len(nxt))
        frontier = nxt
    return sizes
