"""Dataset assembly: synthetic corpus, scaffold-unique splits, candidate
pools, statistics, and a cleavage-based spectrum simulator.

The synthetic corpus enumerates ring cores with substituents so the full
pipeline can train and evaluate without any external spectral library.
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, replace

import numpy as np

from madgen.chemgraph.mol import (
    MONOISOTOPIC_MASS,
    PROTON_MASS,
    MolGraph,
    find_bridges,
    hill_formula,
)
from madgen.chemgraph.scaffold import murcko_scaffold
from madgen.chemgraph.smiles import parse_smiles, write_smiles
from madgen.errors import DataError, FormatError, InsufficientScaffoldsError
from madgen.spectra import Spectrum, make_spectrum, parse_formula

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetRecord:
    spectrum: Spectrum
    smiles: str
    scaffold_smiles: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class CandidatePool:
    """Formula -> candidate SMILES lists, with candidate scaffolds cached."""

    by_formula: dict[str, list[str]]
    scaffolds: dict[str, str]

    def candidates(self, formula: str) -> list[str]:
        return self.by_formula.get(formula, [])


@dataclass(frozen=True)
class DatasetStats:
    n_spectra: int
    n_molecules: int
    n_scaffolds: int
    mean_free_atoms: float
    mean_nodes_per_mol: float
    mean_edges_per_mol: float
    mean_spectra_per_mol: float
    mean_nodes_per_scaffold: float
    mean_mols_per_scaffold: float


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Ring cores with a substitution slot at the front. Every core leaves a
# non-empty Murcko scaffold; substituents prune away during extraction.
_CORE_TEMPLATES = (
    "{}c1ccccc1",          # benzene
    "{}c1ccncc1",          # pyridine
    "{}C1CCCCC1",          # cyclohexane
    "{}C1CCCC1",           # cyclopentane
    "{}c1ccco1",           # furan
    "{}c1cccs1",           # thiophene
    "{}C1CCOC1",           # tetrahydrofuran
    "{}C1CCNCC1",          # piperidine
    "{}C1CCOCC1",          # tetrahydropyran
    "{}c1cncnc1",          # pyrimidine
    "{}c1ccc2ccccc2c1",    # naphthalene
    "{}C1Cc2ccccc2C1",     # indane
    "{}c1ccc(cc1)C1CC1",   # phenylcyclopropane
    "{}C1COCCN1",          # morpholine
    "{}c1ccc(C)cc1",       # para-methylbenzene slot
    "{}C1CCC(C)CC1",       # 4-methylcyclohexane slot
    "{}c1ccc(O)cc1",       # para-phenol slot
    "{}c1ccc(F)cc1",       # para-fluorobenzene slot
    "{}c1ccc(Cl)cc1",      # para-chlorobenzene slot
    "{}c1ccc(N)cc1",       # para-aniline slot
    "{}c1cccc(C)c1",       # meta-methylbenzene slot
    "{}C1CCNC1",           # pyrrolidine
    "{}C1CC1",             # cyclopropane
    "{}C1CCC1",            # cyclobutane
    "{}c1cc[nH]c1",        # pyrrole
    "{}C1CCc2ccccc21",     # tetralin
    "{}c1ccc(cc1)c1ccccc1",  # biphenyl
    "{}C1CCC2CCCCC2C1",    # decalin
)

# Substituents written as SMILES prefixes bonding to the first core atom.
_SUBSTITUENTS = (
    "C", "CC", "CCC", "CC(C)", "O", "CO", "OC", "N", "CN", "NC",
    "F", "Cl", "Br", "O=C", "CC(=O)", "OC(=O)", "N#C", "FC(F)(F)",
    "CS", "CCO", "OCC", "C#C",
)


def synthetic_molecules(count: int = 200) -> list[str]:
    """Deterministic list of canonical SMILES for the synthetic corpus."""
    seen = set()
    out = []
    for sub, template in itertools.product(_SUBSTITUENTS, _CORE_TEMPLATES):
        smiles = template.format(sub)
        try:
            mol = parse_smiles(smiles)
        except Exception:  # skip combinations the subset grammar rejects
            continue
        canonical = write_smiles(mol)
        if canonical in seen:
            continue
        if murcko_scaffold(mol).is_empty:
            continue
        seen.add(canonical)
        out.append(canonical)
        if len(out) == count:
            return out
    if len(out) < count:
        raise DataError(f"corpus spec yields only {len(out)} molecules, "
                        f"need {count}")
    return out


# ---------------------------------------------------------------------------
# Spectrum simulation
# ---------------------------------------------------------------------------

def simulate_spectrum(mol: MolGraph, adduct: str = "[M+H]+",
                      max_peaks: int = 32,
                      seed: int = 0) -> Spectrum:
    """Simulate an MS/MS spectrum from single and double acyclic cleavages.

    Each fragment is a connected component after cutting one or two bridge
    bonds; its peak sits at the fragment monoisotopic mass plus a proton.
    Intensities follow the fragment's heavy-atom fraction with +/-10% seeded
    noise, renormalized; the precursor peak is always kept.
    """
    if len(mol.connected_components()) != 1:
        raise DataError("spectrum simulation needs a connected molecule")
    rng = np.random.default_rng(seed)
    n_total = mol.n_atoms
    bridges = sorted(find_bridges(mol))

    fragments: dict[frozenset, float] = {}

    def add_components(removed: set[tuple[int, int]]):
        seen = [False] * n_total
        for start in range(n_total):
            if seen[start]:
                continue
            comp = []
            stack = [start]
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in mol.adjacency[u]:
                    key = (min(u, v), max(u, v))
                    if key in removed or seen[v]:
                        continue
                    seen[v] = True
                    stack.append(v)
            if len(comp) < n_total:
                frag = frozenset(comp)
                if frag not in fragments:
                    fragments[frag] = _fragment_mass(mol, comp)

    for b in bridges:
        add_components({b})
    for b1, b2 in itertools.combinations(bridges, 2):
        add_components({b1, b2})

    precursor_mass = mol.monoisotopic_mass() + PROTON_MASS
    raw_peaks = [(precursor_mass, 1.0 * _noise(rng))]
    for frag, mass in sorted(fragments.items(), key=lambda kv: kv[1]):
        fraction = len(frag) / n_total
        raw_peaks.append((mass + PROTON_MASS, fraction * _noise(rng)))

    # Keep the strongest peaks; the precursor survives regardless.
    raw_peaks.sort(key=lambda p: -p[1])
    kept = raw_peaks[:max_peaks]
    if not any(abs(mz - precursor_mass) <= 1e-9 for mz, _ in kept):
        precursor_peak = next(p for p in raw_peaks
                              if abs(p[0] - precursor_mass) <= 1e-9)
        kept = kept[:-1] + [precursor_peak]

    formula = parse_formula(hill_formula(mol))
    return make_spectrum(kept, precursor_mass, adduct, formula,
                         record_id="sim")


def _noise(rng: np.random.Generator) -> float:
    return 1.0 + rng.uniform(-0.1, 0.1)


def _fragment_mass(mol: MolGraph, atom_indices) -> float:
    mass = 0.0
    for i in atom_indices:
        atom = mol.atoms[i]
        mass += MONOISOTOPIC_MASS[atom.element]
        mass += atom.implicit_h * MONOISOTOPIC_MASS["H"]
    return mass


# ---------------------------------------------------------------------------
# Splitting, pools, stats
# ---------------------------------------------------------------------------

def scaffold_split(records: list[DatasetRecord],
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> list[DatasetRecord]:
    """Assign split labels so no scaffold string spans two splits.

    Scaffold groups are shuffled with ``seed`` and assigned greedily to the
    split with the largest remaining molecule-count deficit.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    groups: dict[str, list[int]] = defaultdict(list)
    for idx, record in enumerate(records):
        groups[record.scaffold_smiles].append(idx)
    if len(groups) < 3:
        raise InsufficientScaffoldsError(
            f"need >= 3 distinct scaffolds, found {len(groups)}")

    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)

    total = len(records)
    targets = [r * total for r in ratios]
    assigned = [0.0, 0.0, 0.0]
    split_of: dict[str, str] = {}
    for key in keys:
        deficits = [targets[s] - assigned[s] for s in range(3)]
        chosen = max(range(3), key=lambda s: (deficits[s], -s))
        split_of[key] = SPLITS[chosen]
        assigned[chosen] += len(groups[key])

    return [replace(r, split=split_of[r.scaffold_smiles]) for r in records]


def build_candidate_pool(records: list[DatasetRecord],
                         source_molecules: list[str],
                         pool_size: int = 256,
                         seed: int = 0) -> CandidatePool:
    """Formula-matched candidates per query formula, targets excluded.

    Short pools (fewer matching isomers than ``pool_size``) are allowed and
    logged. Candidate scaffolds are precomputed for stage-1 ranking.
    """
    targets_by_formula: dict[str, set[str]] = defaultdict(set)
    for record in records:
        formula = str(record.spectrum.formula)
        targets_by_formula[formula].add(
            write_smiles(parse_smiles(record.smiles)))

    candidates_by_formula: dict[str, list[str]] = defaultdict(list)
    seen: dict[str, set[str]] = defaultdict(set)
    for smiles in source_molecules:
        mol = parse_smiles(smiles)
        canonical = write_smiles(mol)
        formula = hill_formula(mol)
        if formula not in targets_by_formula:
            continue
        if canonical in targets_by_formula[formula]:
            continue
        if canonical in seen[formula]:
            continue
        seen[formula].add(canonical)
        candidates_by_formula[formula].append(canonical)

    rng = np.random.default_rng(seed)
    by_formula: dict[str, list[str]] = {}
    scaffolds: dict[str, str] = {}
    for formula in sorted(targets_by_formula):
        pool = sorted(candidates_by_formula.get(formula, []))
        if len(pool) > pool_size:
            idx = rng.choice(len(pool), size=pool_size, replace=False)
            pool = [pool[i] for i in sorted(idx)]
        if len(pool) < pool_size:
            logger.info("short pool for %s: %d candidates", formula, len(pool))
        by_formula[formula] = pool
        for smiles in pool:
            if smiles not in scaffolds:
                scaffolds[smiles] = write_smiles(
                    murcko_scaffold(parse_smiles(smiles)).graph)
    return CandidatePool(by_formula=by_formula, scaffolds=scaffolds)


def dataset_stats(records: list[DatasetRecord]) -> DatasetStats:
    """Corpus statistics in the usual dataset-table layout."""
    if not records:
        raise DataError("no records")
    molecules: dict[str, MolGraph] = {}
    spectra_per_mol: Counter = Counter()
    scaffold_of: dict[str, str] = {}
    for record in records:
        mol = parse_smiles(record.smiles)
        canonical = write_smiles(mol)
        molecules.setdefault(canonical, mol)
        spectra_per_mol[canonical] += 1
        scaffold_of[canonical] = record.scaffold_smiles

    scaffold_groups: dict[str, list[str]] = defaultdict(list)
    for mol_smiles, scaf in scaffold_of.items():
        scaffold_groups[scaf].append(mol_smiles)

    n_mols = len(molecules)
    free_atoms_counts = []
    nodes, edges = [], []
    for canonical, mol in molecules.items():
        scaffold = murcko_scaffold(mol)
        free_atoms_counts.append(mol.n_atoms - scaffold.graph.n_atoms)
        nodes.append(mol.n_atoms)
        edges.append(len(mol.bonds))
    scaffold_nodes = []
    for scaf in scaffold_groups:
        scaffold_nodes.append(
            0 if scaf == "" else parse_smiles(scaf).n_atoms)

    return DatasetStats(
        n_spectra=len(records),
        n_molecules=n_mols,
        n_scaffolds=len(scaffold_groups),
        mean_free_atoms=float(np.mean(free_atoms_counts)),
        mean_nodes_per_mol=float(np.mean(nodes)),
        mean_edges_per_mol=float(np.mean(edges)),
        mean_spectra_per_mol=len(records) / n_mols,
        mean_nodes_per_scaffold=float(np.mean(scaffold_nodes)),
        mean_mols_per_scaffold=n_mols / len(scaffold_groups),
    )


# ---------------------------------------------------------------------------
# Corpus assembly and TSV interchange
# ---------------------------------------------------------------------------

def build_synthetic_dataset(seed: int = 0, count: int = 200,
                            ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                            max_peaks: int = 32) -> list[DatasetRecord]:
    """Simulate spectra for the synthetic corpus and split by scaffold."""
    records = []
    for idx, smiles in enumerate(synthetic_molecules(count)):
        mol = parse_smiles(smiles)
        scaffold = murcko_scaffold(mol)
        spectrum = simulate_spectrum(mol, max_peaks=max_peaks,
                                     seed=seed * 100003 + idx)
        spectrum = replace(spectrum, record_id=f"syn-{idx:04d}")
        records.append(DatasetRecord(
            spectrum=spectrum,
            smiles=smiles,
            scaffold_smiles=write_smiles(scaffold.graph),
            split="train",
        ))
    return scaffold_split(records, ratios=ratios, seed=seed)


_DATASET_HEADER = ("record_id", "split", "formula", "smiles", "scaffold_smiles",
                   "adduct", "precursor_mz", "peaks")


def save_dataset(records: list[DatasetRecord], path) -> None:
    lines = ["\t".join(_DATASET_HEADER)]
    for r in records:
        peaks = ";".join(f"{p.mz!r}:{p.intensity!r}" for p in r.spectrum.peaks)
        lines.append("\t".join([
            r.spectrum.record_id, r.split, str(r.spectrum.formula), r.smiles,
            r.scaffold_smiles, r.spectrum.adduct,
            repr(r.spectrum.precursor_mz), peaks,
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != _DATASET_HEADER:
            raise FormatError(f"unexpected dataset header {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != len(_DATASET_HEADER):
                raise FormatError(f"line {lineno}: expected "
                                  f"{len(_DATASET_HEADER)} fields")
            (record_id, split, formula, smiles, scaffold_smiles, adduct,
             precursor, peak_field) = fields
            peaks = []
            for pair in peak_field.split(";"):
                if not pair:
                    continue
                mz, _, intensity = pair.partition(":")
                peaks.append((float(mz), float(intensity)))
            spectrum = make_spectrum(peaks, float(precursor), adduct,
                                     parse_formula(formula), record_id)
            records.append(DatasetRecord(spectrum, smiles, scaffold_smiles,
                                         split))
    return records


def save_pool(pool: CandidatePool, path) -> None:
    lines = []
    for formula in sorted(pool.by_formula):
        for smiles in pool.by_formula[formula]:
            lines.append(f"{formula}\t{smiles}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_pool(path) -> CandidatePool:
    by_formula: dict[str, list[str]] = defaultdict(list)
    scaffolds: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise FormatError(f"line {lineno}: expected 'formula\\tsmiles'")
            formula, smiles = fields
            by_formula[formula].append(smiles)
            if smiles not in scaffolds:
                scaffolds[smiles] = write_smiles(
                    murcko_scaffold(parse_smiles(smiles)).graph)
    return CandidatePool(by_formula=dict(by_formula), scaffolds=scaffolds)
