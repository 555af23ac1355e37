"""SMILES parsing into attributed molecular graphs, and canonical re-serialization.

The grammar covers the constructs that occur in curated corpora: organic-subset
atoms, bracket atoms with isotope / chirality / H-count / charge, bond symbols
``- = # : / \\``, branches, ring closures (including ``%nn``), and dot-separated
components. Anything else (wildcards, reaction arrows, quadruple bonds) is a
parse error so that corrupt corpora are visible.

Aromaticity is carried as an atom flag from lowercase input symbols; no
perception or Kekulization is attempted, and aromatic bonds count as order 1
wherever a valence sum is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace


class SmilesError(ValueError):
    """Base parse error; `offset` is the byte offset into the input string."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnbalancedParenthesis(SmilesError):
    pass


class UnpairedRingClosure(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class MalformedBracketAtom(SmilesError):
    pass


class IndexOutOfRange(IndexError):
    pass


class EmptyInput(ValueError):
    pass


SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"

BOND_VALENCE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 1}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("as", "se", "te", "b", "c", "n", "o", "p", "s", "si")

ELEMENTS = frozenset("""
    H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni
    Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I
    Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt
    Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr
    Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og
""".split())

# Allowed total valences used for implicit-hydrogen fill and rule matching.
VALENCES: dict[str, tuple[int, ...]] = {
    "H": (1,), "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "F": (1,),
    "Si": (4,), "P": (3, 5), "S": (2, 4, 6), "Cl": (1, 3, 5, 7),
    "As": (3, 5), "Se": (2, 4, 6), "Br": (1, 3, 5, 7),
    "Te": (2, 4, 6), "I": (1, 3, 5, 7),
}


@dataclass
class Atom:
    element: str
    formal_charge: int = 0
    isotope: int | None = None
    explicit_h: int | None = None  # only set for bracket atoms
    aromatic: bool = False
    chirality: str | None = None  # "clockwise" (@@) or "counterclockwise" (@)
    index: int = 0


@dataclass
class Bond:
    endpoints: tuple[int, int]
    order: str = SINGLE
    stereo_mark: str | None = None  # "up" (/) or "down" (\), oriented a -> b

    def other(self, idx: int) -> int:
        a, b = self.endpoints
        return b if idx == a else a


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def neighbors(self) -> dict[int, list[tuple[int, Bond]]]:
        adj: dict[int, list[tuple[int, Bond]]] = {a.index: [] for a in self.atoms}
        for bond in self.bonds:
            a, b = bond.endpoints
            adj[a].append((b, bond))
            adj[b].append((a, bond))
        return adj

    def bond_between(self, a: int, b: int) -> Bond | None:
        for bond in self.bonds:
            if set(bond.endpoints) == {a, b}:
                return bond
        return None

    def components(self) -> list[list[int]]:
        """Connected components, each as a sorted list of atom indices."""
        adj = self.neighbors()
        seen: set[int] = set()
        comps = []
        for atom in self.atoms:
            if atom.index in seen:
                continue
            stack = [atom.index]
            comp = []
            seen.add(atom.index)
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def copy(self) -> "MolGraph":
        return MolGraph(
            atoms=[replace(a) for a in self.atoms],
            bonds=[replace(b) for b in self.bonds],
        )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_BOND_CHARS = {"-": (SINGLE, None), "=": (DOUBLE, None), "#": (TRIPLE, None),
               ":": (AROMATIC, None), "/": (SINGLE, "up"), "\\": (SINGLE, "down")}

_CHARGE_CHARS = {"+": 1, "-": -1}


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse a bracket atom beginning at text[start] == '['; returns (atom, end)."""
    i = start + 1
    n = len(text)

    def fail(msg, off=None):
        raise MalformedBracketAtom(msg, start if off is None else off)

    isotope = None
    digits = i
    while i < n and text[i].isdigit():
        i += 1
    if i > digits:
        isotope = int(text[digits:i])
        if isotope == 0:
            fail("isotope must be positive")

    aromatic = False
    if i < n and text[i:i + 2].lower() in AROMATIC_BRACKET and text[i:i + 2].islower():
        symbol = text[i:i + 2]
        element = symbol.capitalize()
        aromatic = True
        i += 2
    elif i < n and text[i].isupper():
        if i + 1 < n and text[i + 1].islower() and text[i:i + 2] in ELEMENTS:
            element = text[i:i + 2]
            i += 2
        elif text[i] in ELEMENTS:
            element = text[i]
            i += 1
        else:
            raise UnknownElement(f"unknown element {text[i:i + 2]!r}", i)
    elif i < n and text[i].islower():
        if text[i] in AROMATIC_ORGANIC:
            element = text[i].upper()
            aromatic = True
            i += 1
        else:
            raise UnknownElement(f"unknown aromatic symbol {text[i]!r}", i)
    else:
        fail("expected element symbol", i if i < n else start)

    chirality = None
    if i < n and text[i] == "@":
        if i + 1 < n and text[i + 1] == "@":
            chirality = "clockwise"
            i += 2
        else:
            chirality = "counterclockwise"
            i += 1

    explicit_h = 0
    if i < n and text[i] == "H":
        i += 1
        digits = i
        while i < n and text[i].isdigit():
            i += 1
        explicit_h = int(text[digits:i]) if i > digits else 1

    charge = 0
    if i < n and text[i] in _CHARGE_CHARS:
        sign = _CHARGE_CHARS[text[i]]
        i += 1
        digits = i
        while i < n and text[i].isdigit():
            i += 1
        if i > digits:
            charge = sign * int(text[digits:i])
        else:
            charge = sign
            while i < n and text[i] in _CHARGE_CHARS and _CHARGE_CHARS[text[i]] == sign:
                charge += sign
                i += 1

    if i >= n or text[i] != "]":
        fail("missing ']' or trailing junk in bracket atom",
             i if i < n else start)
    atom = Atom(element=element, formal_charge=charge, isotope=isotope,
                explicit_h=explicit_h, aromatic=aromatic, chirality=chirality)
    return atom, i + 1


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a MolGraph.

    Raises UnbalancedParenthesis, UnpairedRingClosure, UnknownElement or
    MalformedBracketAtom with the byte offset of the problem.
    """
    if not text:
        raise EmptyInput("empty SMILES string")
    g = MolGraph()
    prev: int | None = None
    pending: tuple[str, str | None] | None = None  # (order, stereo)
    branch_stack: list[tuple[int | None, int]] = []  # (prev atom, '(' offset)
    rings: dict[int, tuple[int, tuple[str, str | None] | None, int]] = {}
    i = 0
    n = len(text)

    def add_atom(atom: Atom) -> int:
        nonlocal prev, pending
        atom.index = len(g.atoms)
        g.atoms.append(atom)
        if prev is not None:
            order, stereo = pending if pending else (None, None)
            if order is None:
                both_aromatic = g.atoms[prev].aromatic and atom.aromatic
                order = AROMATIC if both_aromatic else SINGLE
            g.bonds.append(Bond(endpoints=(prev, atom.index), order=order,
                                stereo_mark=stereo))
        prev = atom.index
        pending = None
        return atom.index

    def close_or_open_ring(num: int, offset: int):
        nonlocal pending
        if prev is None:
            raise UnpairedRingClosure("ring closure before any atom", offset)
        if num in rings:
            other, other_pending, _ = rings.pop(num)
            if other == prev:
                raise UnpairedRingClosure(
                    f"ring bond {num} closes on its own atom", offset)
            if g.bond_between(other, prev) is not None:
                raise UnpairedRingClosure(
                    f"duplicate bond via ring closure {num}", offset)
            order = stereo = None
            for p in (pending, other_pending):
                if p is not None:
                    if order is not None and order != p[0]:
                        raise UnpairedRingClosure(
                            f"conflicting bond orders on ring closure {num}", offset)
                    order, stereo = p
            if order is None:
                both_aromatic = g.atoms[other].aromatic and g.atoms[prev].aromatic
                order = AROMATIC if both_aromatic else SINGLE
            g.bonds.append(Bond(endpoints=(other, prev), order=order,
                                stereo_mark=stereo))
        else:
            rings[num] = (prev, pending, offset)
        pending = None

    while i < n:
        ch = text[i]
        if ch == "(":
            if prev is None:
                raise UnbalancedParenthesis("branch before any atom", i)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("unmatched ')'", i)
            if pending is not None:
                raise SmilesError("dangling bond before ')'", i)
            prev, _ = branch_stack.pop()
            i += 1
        elif ch in _BOND_CHARS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending = _BOND_CHARS[ch]
            i += 1
        elif ch == ".":
            if pending is not None or branch_stack:
                raise SmilesError("misplaced '.' separator", i)
            prev = None
            i += 1
        elif ch == "%":
            if i + 2 >= n or not (text[i + 1].isdigit() and text[i + 2].isdigit()):
                raise UnpairedRingClosure("'%' needs two digits", i)
            close_or_open_ring(int(text[i + 1:i + 3]), i)
            i += 3
        elif ch.isdigit():
            close_or_open_ring(int(ch), i)
            i += 1
        elif ch == "[":
            atom, end = _parse_bracket(text, i)
            add_atom(atom)
            i = end
        elif ch.isupper():
            matched = None
            for sym in ORGANIC_SUBSET:
                if text.startswith(sym, i):
                    matched = sym
                    break
            if matched is None:
                if text[i:i + 2] in ELEMENTS or text[i] in ELEMENTS:
                    raise UnknownElement(
                        f"element {ch!r} must be written as a bracket atom", i)
                raise UnknownElement(f"unknown element {ch!r}", i)
            add_atom(Atom(element=matched))
            i += len(matched)
        elif ch in AROMATIC_ORGANIC:
            add_atom(Atom(element=ch.upper(), aromatic=True))
            i += 1
        else:
            raise SmilesError(f"unsupported character {ch!r}", i)

    if branch_stack:
        raise UnbalancedParenthesis("unclosed '('", branch_stack[-1][1])
    if pending is not None:
        raise SmilesError("dangling bond at end of input", n - 1)
    if rings:
        num, (_, _, offset) = next(iter(sorted(rings.items())))
        raise UnpairedRingClosure(f"ring bond {num} never closed", offset)
    if not g.atoms:
        raise EmptyInput("SMILES contains no atoms")
    return g


# ---------------------------------------------------------------------------
# valence
# ---------------------------------------------------------------------------

def total_valence(g: MolGraph, atom_index: int) -> int:
    """Sum of bond orders (aromatic counted as 1) plus explicit hydrogens."""
    if not 0 <= atom_index < len(g.atoms):
        raise IndexOutOfRange(f"atom index {atom_index} out of range")
    total = 0
    for bond in g.bonds:
        if atom_index in bond.endpoints:
            total += BOND_VALENCE[bond.order]
    explicit = g.atoms[atom_index].explicit_h
    return total + (explicit or 0)


def implicit_h_count(g: MolGraph, atom_index: int) -> int:
    """Implicit hydrogens filling up to the lowest allowed valence.

    Bracket atoms (explicit_h set) and charged atoms carry no implicit
    hydrogens; elements without a valence entry get none either.
    """
    atom = g.atoms[atom_index]
    if atom.explicit_h is not None or atom.formal_charge != 0:
        return 0
    allowed = VALENCES.get(atom.element)
    if not allowed:
        return 0
    bond_sum = total_valence(g, atom_index)
    for v in allowed:
        if v >= bond_sum:
            return v - bond_sum
    return 0


def effective_valence(g: MolGraph, atom_index: int) -> int:
    """Total valence including implicit hydrogens."""
    return total_valence(g, atom_index) + implicit_h_count(g, atom_index)


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------

_MAX_LABELING_LEAVES = 4096


def _initial_keys(g: MolGraph, comp: list[int]) -> dict[int, tuple]:
    keys = {}
    degree = {i: 0 for i in comp}
    for bond in g.bonds:
        a, b = bond.endpoints
        if a in degree:
            degree[a] += 1
        if b in degree:
            degree[b] += 1
    for i in comp:
        a = g.atoms[i]
        # hydrogen count rather than raw explicit_h, so that [NH3]-style and
        # bare-atom spellings of the same structure refine identically
        total_h = a.explicit_h if a.explicit_h is not None else implicit_h_count(g, i)
        keys[i] = (a.element, a.formal_charge, a.isotope or 0, total_h,
                   a.aromatic, a.chirality or "", degree[i])
    return keys


def _rank(keys: dict[int, tuple]) -> dict[int, int]:
    distinct = sorted(set(keys.values()))
    rank_of = {k: r for r, k in enumerate(distinct)}
    return {i: rank_of[k] for i, k in keys.items()}


def _refine(g: MolGraph, comp: list[int], labels: dict[int, int],
            adj: dict[int, list[tuple[int, Bond]]]) -> dict[int, int]:
    """Iterated neighbourhood refinement until the partition stabilizes."""
    n_classes = len(set(labels.values()))
    while True:
        keys = {}
        for i in comp:
            nbr = sorted((BOND_VALENCE[b.order], b.order, labels[j])
                         for j, b in adj[i])
            keys[i] = (labels[i], tuple(nbr))
        labels = _rank(keys)
        new_n = len(set(labels.values()))
        if new_n == n_classes:
            return labels
        n_classes = new_n


def _discrete_labelings(g: MolGraph, comp: list[int], labels: dict[int, int],
                        adj, out: list[dict[int, int]]):
    if len(out) >= _MAX_LABELING_LEAVES:
        return
    by_label: dict[int, list[int]] = {}
    for i in comp:
        by_label.setdefault(labels[i], []).append(i)
    cell = None
    for lbl in sorted(by_label):
        if len(by_label[lbl]) > 1:
            cell = by_label[lbl]
            break
    if cell is None:
        out.append(labels)
        return
    for atom in sorted(cell):
        keys = {i: (labels[i], 0 if i == atom else 1) for i in comp}
        refined = _refine(g, comp, _rank(keys), adj)
        _discrete_labelings(g, comp, refined, adj, out)


def _charge_str(charge: int) -> str:
    if charge == 0:
        return ""
    sign = "+" if charge > 0 else "-"
    mag = abs(charge)
    return sign if mag == 1 else f"{sign}{mag}"


def _atom_token(g: MolGraph, idx: int) -> str:
    a = g.atoms[idx]
    plain_symbol = a.element.lower() if a.aromatic else a.element
    bare_ok = (
        a.element in ORGANIC_SUBSET
        and a.formal_charge == 0
        and a.isotope is None
        and a.chirality is None
        and (not a.aromatic or a.element.lower() in AROMATIC_ORGANIC)
    )
    if bare_ok and a.explicit_h is not None:
        # a bracket atom may drop its brackets only when the written form
        # reconstructs the same hydrogen count; aromatic H counts are not
        # reconstructible without perception, so those stay bracketed
        if a.aromatic:
            bare_ok = False
        else:
            bond_sum = sum(BOND_VALENCE[b.order] for b in g.bonds
                           if idx in b.endpoints)
            allowed = VALENCES.get(a.element, ())
            fill = next((v - bond_sum for v in allowed if v >= bond_sum), 0)
            bare_ok = fill == a.explicit_h
    if bare_ok:
        return plain_symbol
    h = a.explicit_h or 0
    h_str = "" if h == 0 else ("H" if h == 1 else f"H{h}")
    chi = {"counterclockwise": "@", "clockwise": "@@", None: ""}[a.chirality]
    iso = "" if a.isotope is None else str(a.isotope)
    return f"[{iso}{plain_symbol}{chi}{h_str}{_charge_str(a.formal_charge)}]"


def _bond_token(g: MolGraph, bond: Bond, from_idx: int) -> str:
    if bond.stereo_mark is not None and bond.order == SINGLE:
        mark = bond.stereo_mark
        if bond.endpoints[0] != from_idx:
            mark = "down" if mark == "up" else "up"
        return "/" if mark == "up" else "\\"
    a, b = (g.atoms[i] for i in bond.endpoints)
    if bond.order == SINGLE:
        return "-" if (a.aromatic and b.aromatic) else ""
    if bond.order == AROMATIC:
        return "" if (a.aromatic and b.aromatic) else ":"
    return {DOUBLE: "=", TRIPLE: "#"}[bond.order]


def _serialize_component(g: MolGraph, comp: list[int], labels: dict[int, int],
                         adj) -> str:
    """Emit one component as SMILES, DFS from the minimum-label atom.

    Children are visited in label order; ring-closure digits open at the
    ancestor and close (with the bond symbol) at the descendant.
    """
    root = min(comp, key=lambda i: labels[i])
    visit_pos: dict[int, int] = {}
    children: dict[int, list[int]] = {i: [] for i in comp}
    ring_open: dict[int, list[tuple[int, Bond]]] = {i: [] for i in comp}
    ring_close: dict[int, list[tuple[int, Bond]]] = {i: [] for i in comp}
    seen_pairs: set[frozenset] = set()

    def dfs(u: int):
        visit_pos[u] = len(visit_pos)
        for v, bond in sorted(adj[u], key=lambda t: labels[t[0]]):
            pair = frozenset((u, v))
            if pair in seen_pairs:
                continue
            seen_pairs.add(pair)
            if v in visit_pos:
                ring_close[u].append((v, bond))
                ring_open[v].append((u, bond))
            else:
                children[u].append(v)
                dfs(v)

    dfs(root)

    digits_in_use: set[int] = set()
    digit_of: dict[tuple[int, int], int] = {}

    def alloc_digit() -> int:
        d = 1
        while d in digits_in_use:
            d += 1
        if d > 99:
            raise SmilesError("too many simultaneous ring closures", 0)
        digits_in_use.add(d)
        return d

    def fmt_digit(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    def emit(u: int) -> str:
        parts = [_atom_token(g, u)]
        for v, bond in sorted(ring_open[u], key=lambda t: visit_pos[t[0]]):
            d = alloc_digit()
            digit_of[(u, v)] = d
            parts.append(fmt_digit(d))
        for v, bond in sorted(ring_close[u], key=lambda t: visit_pos[t[0]]):
            d = digit_of.pop((v, u))
            digits_in_use.discard(d)
            parts.append(_bond_token(g, bond, v) + fmt_digit(d))
        kids = children[u]
        for c in kids[:-1]:
            bond = g.bond_between(u, c)
            parts.append("(" + _bond_token(g, bond, u) + emit(c) + ")")
        if kids:
            bond = g.bond_between(u, kids[-1])
            parts.append(_bond_token(g, bond, u) + emit(kids[-1]))
        return "".join(parts)

    return emit(root)


def write_canonical(g: MolGraph) -> str:
    """Deterministic serialization, invariant under atom-index relabeling."""
    if not g.atoms:
        raise EmptyInput("cannot serialize an empty graph")
    adj = g.neighbors()
    parts = []
    for comp in g.components():
        base = _refine(g, comp, _rank(_initial_keys(g, comp)), adj)
        labelings: list[dict[int, int]] = []
        _discrete_labelings(g, comp, base, adj, labelings)
        parts.append(min(_serialize_component(g, comp, lab, adj)
                         for lab in labelings))
    return ".".join(sorted(parts))


def graphs_equal(a: MolGraph, b: MolGraph) -> bool:
    return write_canonical(a) == write_canonical(b)


def refinement_ranks(g: MolGraph) -> dict[int, int]:
    """Stable per-atom ranks from neighbourhood refinement (not necessarily
    discrete); used to order rewrite sites deterministically."""
    adj = g.neighbors()
    ranks = {}
    for comp in g.components():
        labels = _refine(g, comp, _rank(_initial_keys(g, comp)), adj)
        ranks.update(labels)
    return ranks


def subgraph(g: MolGraph, indices) -> MolGraph:
    """Induced subgraph over the given atom indices, reindexed from 0."""
    index_set = set(indices)
    remap = {old: new for new, old in enumerate(sorted(index_set))}
    atoms = []
    for old in sorted(index_set):
        a = replace(g.atoms[old])
        a.index = remap[old]
        atoms.append(a)
    bonds = [replace(b, endpoints=(remap[b.endpoints[0]], remap[b.endpoints[1]]))
             for b in g.bonds
             if b.endpoints[0] in index_set and b.endpoints[1] in index_set]
    return MolGraph(atoms=atoms, bonds=bonds)


def permute_atoms(g: MolGraph, perm: list[int]) -> MolGraph:
    """Relabel atoms by perm (new index of old atom i is perm[i])."""
    if sorted(perm) != list(range(len(g.atoms))):
        raise ValueError("perm must be a permutation of the atom indices")
    atoms = [None] * len(g.atoms)
    for old, new in enumerate(perm):
        a = replace(g.atoms[old])
        a.index = new
        atoms[new] = a
    bonds = [replace(b, endpoints=(perm[b.endpoints[0]], perm[b.endpoints[1]]))
             for b in g.bonds]
    return MolGraph(atoms=atoms, bonds=bonds)


def iter_corpus(path):
    """Yield (line_no, smiles) for a one-SMILES-per-line UTF-8 corpus file."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if text:
                yield line_no, text
