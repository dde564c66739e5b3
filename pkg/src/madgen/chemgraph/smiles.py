"""SMILES subset parser and deterministic canonical writer.

Supported grammar: organic-subset atoms, bracket atoms with explicit H and
charge, ring closures (digits and %nn), branches, bond symbols - = # :,
aromatic lowercase atoms, and '.' separated fragments. Stereo markers
(/ \\ @) parse and are discarded. Isotopes and wildcard atoms are rejected.

Canonical output uses iterative neighborhood refinement for atom ranks with
deterministic tie promotion, then a rank-ordered DFS emission, so isomorphic
graphs produce identical strings.
"""

from __future__ import annotations

from madgen.chemgraph.mol import (
    AROMATIC,
    AROMATIC_CAPABLE,
    BOND_ORDER,
    DOUBLE,
    ORGANIC_SUBSET,
    SINGLE,
    SUPPORTED_ELEMENTS,
    TRIPLE,
    Atom,
    MolGraph,
    infer_implicit_h,
)
from madgen.errors import ParseError, UnsupportedFeatureError, ValenceError

_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
_BOND_CODE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 4}
_TWO_LETTER = ("Cl", "Br")


class _PendingAtom:
    __slots__ = ("element", "charge", "aromatic", "explicit_h", "has_bracket")

    def __init__(self, element, aromatic, charge=0, explicit_h=None,
                 has_bracket=False):
        self.element = element
        self.aromatic = aromatic
        self.charge = charge
        self.explicit_h = explicit_h
        self.has_bracket = has_bracket


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a valence-validated MolGraph."""
    if not isinstance(text, str) or not text:
        raise ParseError("SMILES string must be non-empty")
    if not text.isascii():
        raise ParseError("SMILES string must be ASCII")

    atoms: list[_PendingAtom] = []
    bonds: dict[tuple[int, int], str | None] = {}
    prev: int | None = None
    branch_stack: list[int | None] = []
    # ring number -> (open atom index, bond symbol or None)
    open_rings: dict[int, tuple[int, str | None]] = {}
    pending_bond: str | None = None

    def add_bond(i: int, j: int, explicit: str | None):
        if i == j:
            raise ParseError("ring closure bonds an atom to itself")
        key = (i, j) if i < j else (j, i)
        if key in bonds:
            raise ParseError(f"duplicate bond between atoms {i} and {j}")
        if explicit is None:
            kind = AROMATIC if (atoms[i].aromatic and atoms[j].aromatic) else SINGLE
        else:
            kind = explicit
        if kind == AROMATIC and not (atoms[i].aromatic and atoms[j].aromatic):
            raise ParseError("aromatic bond between non-aromatic atoms")
        bonds[key] = kind

    def new_atom(pending: _PendingAtom):
        nonlocal prev, pending_bond
        atoms.append(pending)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond)
        pending_bond = None
        prev = idx

    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in _BOND_SYMBOLS:
            if pending_bond is not None:
                raise ParseError("two consecutive bond symbols")
            pending_bond = _BOND_SYMBOLS[ch]
            i += 1
        elif ch in "/\\":
            # Directional bonds: stereo discarded, treated as single.
            if pending_bond is not None:
                raise ParseError("two consecutive bond symbols")
            pending_bond = SINGLE
            i += 1
        elif ch == "(":
            if prev is None:
                raise ParseError("branch opened before any atom")
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise ParseError("unmatched ')'")
            if pending_bond is not None:
                raise ParseError("dangling bond symbol before ')'")
            prev = branch_stack.pop()
            i += 1
        elif ch == ".":
            if pending_bond is not None:
                raise ParseError("bond symbol before '.'")
            prev = None
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise ParseError("ring closure before any atom")
            if ch == "%":
                if i + 2 >= n or not text[i + 1:i + 3].isdigit():
                    raise ParseError("'%' must be followed by two digits")
                ring_num = int(text[i + 1:i + 3])
                i += 3
            else:
                ring_num = int(ch)
                i += 1
            if ring_num in open_rings:
                other, open_sym = open_rings.pop(ring_num)
                if (open_sym is not None and pending_bond is not None
                        and open_sym != pending_bond):
                    raise ParseError(
                        f"conflicting bond symbols on ring closure {ring_num}")
                add_bond(prev, other, pending_bond or open_sym)
            else:
                open_rings[ring_num] = (prev, pending_bond)
            pending_bond = None
        elif ch == "[":
            end = text.find("]", i)
            if end == -1:
                raise ParseError("unterminated bracket atom")
            new_atom(_parse_bracket(text[i + 1:end]))
            i = end + 1
        elif ch == "*":
            raise UnsupportedFeatureError("wildcard atoms are not supported")
        elif ch.isupper():
            symbol = None
            for two in _TWO_LETTER:
                if text.startswith(two, i):
                    symbol = two
                    break
            if symbol is None:
                symbol = ch
            if symbol not in ORGANIC_SUBSET:
                raise ParseError(f"unknown organic-subset atom {symbol!r}")
            new_atom(_PendingAtom(symbol, aromatic=False))
            i += len(symbol)
        elif ch.islower():
            symbol = ch.upper()
            if symbol not in AROMATIC_CAPABLE:
                raise ParseError(f"unknown aromatic atom {ch!r}")
            new_atom(_PendingAtom(symbol, aromatic=True))
            i += 1
        else:
            raise ParseError(f"unexpected character {ch!r} at position {i}")

    if open_rings:
        raise ParseError(f"unclosed ring closure(s): {sorted(open_rings)}")
    if branch_stack:
        raise ParseError("unclosed branch '('")
    if pending_bond is not None:
        raise ParseError("dangling bond symbol at end of string")
    if not atoms:
        raise ParseError("SMILES contains no atoms")

    return _finalize(atoms, bonds)


def _parse_bracket(body: str) -> _PendingAtom:
    if not body:
        raise ParseError("empty bracket atom")
    i, n = 0, len(body)
    if body[0].isdigit():
        raise UnsupportedFeatureError("isotope labels are not supported")
    symbol = None
    aromatic = False
    for two in _TWO_LETTER:
        if body.startswith(two):
            symbol = two
            break
    if symbol is None:
        ch = body[0]
        if ch == "*":
            raise UnsupportedFeatureError("wildcard atoms are not supported")
        if ch.isupper():
            symbol = ch
        elif ch.islower():
            symbol = ch.upper()
            aromatic = True
            if symbol not in AROMATIC_CAPABLE:
                raise ParseError(f"unknown aromatic atom {ch!r}")
        else:
            raise ParseError(f"bad bracket atom {body!r}")
    if symbol not in ORGANIC_SUBSET:
        raise ParseError(f"unsupported element {symbol!r}")
    i = len(symbol) if not aromatic else 1

    explicit_h = 0
    charge = 0
    while i < n:
        ch = body[i]
        if ch == "@":
            # Chirality marker: accepted and discarded.
            i += 1
            while i < n and body[i] == "@":
                i += 1
        elif ch == "H":
            i += 1
            digits = ""
            while i < n and body[i].isdigit():
                digits += body[i]
                i += 1
            explicit_h = int(digits) if digits else 1
        elif ch in "+-":
            sign = 1 if ch == "+" else -1
            i += 1
            if i < n and body[i].isdigit():
                digits = ""
                while i < n and body[i].isdigit():
                    digits += body[i]
                    i += 1
                charge = sign * int(digits)
            else:
                charge = sign
                while i < n and body[i] == ch:
                    charge += sign
                    i += 1
        else:
            raise ParseError(f"bad bracket atom token {ch!r} in [{body}]")
    return _PendingAtom(symbol, aromatic, charge, explicit_h, has_bracket=True)


def _finalize(pending: list[_PendingAtom],
              bonds: dict[tuple[int, int], str]) -> MolGraph:
    orders = [[] for _ in pending]
    for (i, j), kind in bonds.items():
        orders[i].append(BOND_ORDER[kind])
        orders[j].append(BOND_ORDER[kind])
    atoms = []
    for idx, p in enumerate(pending):
        if p.has_bracket:
            implicit_h = p.explicit_h or 0
        else:
            implicit_h = infer_implicit_h(p.element, p.charge, p.aromatic,
                                          orders[idx])
        atoms.append(Atom(p.element, p.charge, p.aromatic, implicit_h))
    mol = MolGraph.from_lists(atoms, [(i, j, k) for (i, j), k in bonds.items()])
    mol.validate()
    return mol


# ---------------------------------------------------------------------------
# Canonical writer
# ---------------------------------------------------------------------------

def canonical_ranks(mol: MolGraph) -> list[int]:
    """Distinct canonical rank per atom via iterative refinement.

    Initial invariants: element, charge, aromaticity, implicit H, degree,
    sorted incident bond codes, and the atom's BFS distance multiset (the
    last breaks most regular-graph ties up front). Remaining ties after
    refinement are promoted one atom at a time; tied atoms at that point are
    treated as automorphic, so any member yields the same string.
    """
    n = mol.n_atoms
    if n == 0:
        return []
    neigh = [[(_BOND_CODE[kind], j) for j, kind in mol.adjacency[i]]
             for i in range(n)]
    dist_profile = [_bfs_distance_multiset(mol, i) for i in range(n)]
    base = [
        (
            mol.atoms[i].element,
            mol.atoms[i].formal_charge,
            mol.atoms[i].aromatic,
            mol.atoms[i].implicit_h,
            len(neigh[i]),
            tuple(sorted(code for code, _ in neigh[i])),
            dist_profile[i],
        )
        for i in range(n)
    ]
    ranks = _dense_ranks(base)
    ranks = _refine(ranks, neigh)
    while len(set(ranks)) < n:
        counts = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied_rank = min(r for r, c in counts.items() if c > 1)
        chosen = min(i for i in range(n) if ranks[i] == tied_rank)
        keys = [(ranks[i], 0 if i == chosen else 1) for i in range(n)]
        ranks = _refine(_dense_ranks(keys), neigh)
    return ranks


def _bfs_distance_multiset(mol: MolGraph, start: int) -> tuple[int, ...]:
    dist = {start: 0}
    frontier = [start]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for u in frontier:
            for v, _ in mol.adjacency[u]:
                if v not in dist:
                    dist[v] = d
                    nxt.append(v)
        frontier = nxt
    return tuple(sorted(dist.values()))


def _dense_ranks(keys) -> list[int]:
    order = {key: rank for rank, key in enumerate(sorted(set(keys)))}
    return [order[key] for key in keys]


def _refine(ranks: list[int], neigh) -> list[int]:
    n = len(ranks)
    while True:
        keys = [
            (ranks[i], tuple(sorted((code, ranks[j]) for code, j in neigh[i])))
            for i in range(n)
        ]
        new = _dense_ranks(keys)
        if new == ranks:
            return ranks
        ranks = new


def write_smiles(mol: MolGraph) -> str:
    """Deterministic canonical SMILES; empty string for an empty graph."""
    if mol.n_atoms == 0:
        return ""
    ranks = canonical_ranks(mol)
    pieces = [_emit_component(mol, ranks, comp)
              for comp in mol.connected_components()]
    return ".".join(sorted(pieces))


def _emit_component(mol: MolGraph, ranks: list[int], comp: list[int]) -> str:
    bond_of = {}
    for i, j, kind in mol.bonds:
        bond_of[(i, j)] = kind
        bond_of[(j, i)] = kind

    root = min(comp, key=lambda i: ranks[i])

    # Pass 1: DFS in rank order to classify tree vs ring-closure bonds.
    def rank_sorted_neighbors(u):
        return iter(sorted((j for j, _ in mol.adjacency[u]),
                           key=lambda j: ranks[j]))

    visited = {root}
    preorder = {root: 0}
    tree_children: dict[int, list[int]] = {root: []}
    ring_bonds: list[tuple[int, int]] = []  # (opener, closer) by preorder
    seen_ring = set()
    stack = [(root, None, rank_sorted_neighbors(root))]
    while stack:
        u, parent, it = stack[-1]
        advanced = False
        for v in it:
            if v not in visited:
                visited.add(v)
                preorder[v] = len(preorder)
                tree_children[u].append(v)
                tree_children.setdefault(v, [])
                stack.append((v, u, rank_sorted_neighbors(v)))
                advanced = True
                break
            if v == parent:
                continue
            key = (min(u, v), max(u, v))
            if key not in seen_ring:
                seen_ring.add(key)
                opener, closer = (u, v) if preorder[v] < preorder[u] else (v, u)
                ring_bonds.append((opener, closer))
        if not advanced:
            stack.pop()

    # Ring digits, allocated in the order openers are emitted.
    opens: dict[int, list[tuple[int, int]]] = {}
    closes: dict[int, list[tuple[int, int]]] = {}
    for opener, closer in ring_bonds:
        opens.setdefault(opener, []).append((preorder[closer], closer))
        closes.setdefault(closer, []).append((preorder[opener], opener))
    digit_counter = [0]
    digit_of: dict[tuple[int, int], int] = {}

    def ring_digit(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in digit_of:
            digit_counter[0] += 1
            digit_of[key] = digit_counter[0]
        return digit_of[key]

    def digit_str(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    def bond_str(i: int, j: int) -> str:
        kind = bond_of[(i, j)]
        if kind == SINGLE:
            if mol.atoms[i].aromatic and mol.atoms[j].aromatic:
                return "-"
            return ""
        if kind == DOUBLE:
            return "="
        if kind == TRIPLE:
            return "#"
        return ""  # aromatic bond between aromatic atoms is the default

    out: list[str] = []

    def emit(u: int, parent: int | None):
        out.append(_atom_token(mol, u))
        for _, closer in sorted(opens.get(u, [])):
            out.append(bond_str(u, closer))
            out.append(digit_str(ring_digit(u, closer)))
        for _, opener in sorted(closes.get(u, [])):
            out.append(bond_str(opener, u))
            out.append(digit_str(ring_digit(opener, u)))
        children = tree_children[u]
        for idx, c in enumerate(children):
            last = idx == len(children) - 1
            if not last:
                out.append("(")
            out.append(bond_str(u, c))
            emit(c, u)
            if not last:
                out.append(")")

    emit(root, None)
    return "".join(out)


def _atom_token(mol: MolGraph, i: int) -> str:
    atom = mol.atoms[i]
    symbol = atom.element.lower() if atom.aromatic else atom.element
    inferred = infer_implicit_h(atom.element, atom.formal_charge, atom.aromatic,
                                mol.bond_orders(i))
    if (atom.formal_charge == 0 and atom.implicit_h == inferred
            and atom.element in SUPPORTED_ELEMENTS):
        return symbol
    h = "" if atom.implicit_h == 0 else (
        "H" if atom.implicit_h == 1 else f"H{atom.implicit_h}")
    c = atom.formal_charge
    charge = "" if c == 0 else ("+" if c == 1 else "-" if c == -1
                                else f"+{c}" if c > 0 else f"-{-c}")
    return f"[{symbol}{h}{charge}]"


def graphs_equal(a: MolGraph, b: MolGraph) -> bool:
    """Exact-match identity: equality of canonical SMILES."""
    return write_smiles(a) == write_smiles(b)
