"""Two divergent, deterministic SMILES standardization protocols.

The ChEMBL-like protocol runs valence-fixing rewrites (nitro, azide,
pentavalent phosphorus, halogen oxides), the sulfoxide zwitterion rewrite,
salt/solvent stripping with isotope clearing, and charge neutralization.
The PubChem-like protocol preserves charge states and only canonicalizes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

from . import molgraph as mg
from .molgraph import (DOUBLE, SINGLE, TRIPLE, EmptyInput, MolGraph,
                       effective_valence, implicit_h_count, parse_smiles,
                       refinement_ranks, write_canonical)


class Protocol(enum.Enum):
    PUBCHEM_LIKE = "pubchem"
    CHEMBL_LIKE = "chembl"

    @classmethod
    def from_string(cls, name: str) -> "Protocol":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown protocol {name!r}; use 'pubchem' or 'chembl'")


@dataclass
class RewriteRule:
    """A named subgraph predicate plus the graph edit applied at each site."""

    name: str
    matches: Callable[[MolGraph, int], bool]
    apply: Callable[[MolGraph, int], None]


class SaltList:
    """Canonical component strings stripped as salts/solvents by GetParent."""

    DEFAULT_SMILES = ("[Cl-]", "[Br-]", "[Na+]", "[K+]", "Cl", "O", "CC(=O)[O-]")

    def __init__(self, smiles_entries=None):
        entries = self.DEFAULT_SMILES if smiles_entries is None else smiles_entries
        self.canonical: set[str] = set()
        for s in entries:
            self.canonical.add(write_canonical(parse_smiles(s)))

    @classmethod
    def from_file(cls, path) -> "SaltList":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                text = line.split("#", 1)[0].strip()
                if text:
                    entries.append(text)
        return cls(entries)

    def __contains__(self, canonical_smiles: str) -> bool:
        return canonical_smiles in self.canonical

    def __len__(self) -> int:
        return len(self.canonical)


# ---------------------------------------------------------------------------
# rewrite rules
# ---------------------------------------------------------------------------

def _double_bonded(g: MolGraph, idx: int, element: str) -> list[tuple[int, mg.Bond]]:
    out = []
    for bond in g.bonds:
        if idx in bond.endpoints and bond.order == DOUBLE:
            j = bond.other(idx)
            if g.atoms[j].element == element and g.atoms[j].formal_charge == 0:
                out.append((j, bond))
    return out


def _neighbors_of(g: MolGraph, idx: int) -> list[tuple[int, mg.Bond]]:
    return [(b.other(idx), b) for b in g.bonds if idx in b.endpoints]


def _materialize_h(g: MolGraph, idx: int, count: int):
    if count > 0:
        a = g.atoms[idx]
        a.explicit_h = (a.explicit_h or 0) + count


def _site_order(g: MolGraph, candidates) -> list:
    ranks = refinement_ranks(g)
    return sorted(candidates, key=lambda item: (ranks[item[0]], item[0]))


def _demote_double_oxygen(g: MolGraph, idx: int):
    """Make the lowest-ranked =O neighbour a singly bonded O-, charging idx +1."""
    targets = _site_order(g, _double_bonded(g, idx, "O"))
    j, bond = targets[0]
    h_before = implicit_h_count(g, idx)
    bond.order = SINGLE
    g.atoms[j].formal_charge = -1
    g.atoms[idx].formal_charge += 1
    _materialize_h(g, idx, h_before)


def _match_nitro(g: MolGraph, idx: int) -> bool:
    a = g.atoms[idx]
    return (a.element == "N" and a.formal_charge == 0
            and effective_valence(g, idx) == 5
            and bool(_double_bonded(g, idx, "O")))


def _match_azide(g: MolGraph, idx: int) -> bool:
    a = g.atoms[idx]
    if not (a.element == "N" and a.formal_charge == 0
            and effective_valence(g, idx) == 5):
        return False
    return any(b.order == TRIPLE and g.atoms[b.other(idx)].element == "N"
               and g.atoms[b.other(idx)].formal_charge == 0
               for b in g.bonds if idx in b.endpoints)


def _apply_azide(g: MolGraph, idx: int):
    triples = [(b.other(idx), b) for b in g.bonds
               if idx in b.endpoints and b.order == TRIPLE
               and g.atoms[b.other(idx)].element == "N"
               and g.atoms[b.other(idx)].formal_charge == 0]
    j, bond = _site_order(g, triples)[0]
    h_before = implicit_h_count(g, idx)
    bond.order = DOUBLE
    g.atoms[j].formal_charge = -1
    g.atoms[idx].formal_charge += 1
    _materialize_h(g, idx, h_before)


def _match_phosphorus(g: MolGraph, idx: int) -> bool:
    a = g.atoms[idx]
    return (a.element == "P" and a.formal_charge == 0
            and effective_valence(g, idx) == 5
            and bool(_double_bonded(g, idx, "O"))
            and any(g.atoms[j].element in ("C", "P")
                    for j, _ in _neighbors_of(g, idx)))


def _match_halogen_oxide(g: MolGraph, idx: int) -> bool:
    a = g.atoms[idx]
    if a.element not in ("Cl", "Br", "I") or a.formal_charge != 0:
        return False
    nbrs = _neighbors_of(g, idx)
    if not nbrs or any(g.atoms[j].element != "O" for j, _ in nbrs):
        return False
    if not _double_bonded(g, idx, "O"):
        return False
    return effective_valence(g, idx) in (3, 5, 7)


def _apply_halogen_oxide(g: MolGraph, idx: int):
    """Demote every =O to O-, charging the halogen per demotion; any hydrogens
    the halogen implicitly carried re-home onto demoted oxygens as protons."""
    h_before = implicit_h_count(g, idx)
    targets = _site_order(g, _double_bonded(g, idx, "O"))
    demoted = []
    for j, bond in targets:
        bond.order = SINGLE
        g.atoms[j].formal_charge = -1
        g.atoms[idx].formal_charge += 1
        demoted.append(j)
    for j in demoted[:h_before]:
        g.atoms[j].formal_charge = 0
        g.atoms[j].explicit_h = (g.atoms[j].explicit_h or 0) + 1
        g.atoms[idx].formal_charge -= 1


CLEANUP_RULES = (
    RewriteRule("nitro_zwitterion", _match_nitro, _demote_double_oxygen),
    RewriteRule("azide_zwitterion", _match_azide, _apply_azide),
    RewriteRule("phosphorus_zwitterion", _match_phosphorus, _demote_double_oxygen),
    RewriteRule("halogen_oxide_zwitterion", _match_halogen_oxide,
                _apply_halogen_oxide),
)


def _match_sulfoxide(g: MolGraph, idx: int) -> bool:
    a = g.atoms[idx]
    if a.element != "S" or a.formal_charge != 0:
        return False
    nbrs = _neighbors_of(g, idx)
    carbons = [j for j, b in nbrs
               if g.atoms[j].element == "C" and b.order == SINGLE]
    oxygens = _double_bonded(g, idx, "O")
    return len(carbons) == 2 and len(oxygens) == 1 and len(nbrs) == 3


SULFOXIDE_RULE = RewriteRule("sulfoxide_zwitterion", _match_sulfoxide,
                             _demote_double_oxygen)


def _apply_exhaustively(g: MolGraph, rule: RewriteRule):
    while True:
        sites = [(a.index, None) for a in g.atoms if rule.matches(g, a.index)]
        if not sites:
            return
        idx = _site_order(g, sites)[0][0]
        rule.apply(g, idx)


def cleanup_rewrites(g: MolGraph) -> MolGraph:
    """Apply the valence-standardizing rewrites exhaustively, in rule order.

    Each application charges a previously neutral centre, so every rule
    strictly reduces its own match count and the loop terminates. Never raises.
    """
    out = g.copy()
    for rule in CLEANUP_RULES:
        _apply_exhaustively(out, rule)
    return out


def sulfoxide_rewrite(g: MolGraph) -> MolGraph:
    out = g.copy()
    _apply_exhaustively(out, SULFOXIDE_RULE)
    return out


# ---------------------------------------------------------------------------
# parent extraction and neutralization
# ---------------------------------------------------------------------------

def get_parent(g: MolGraph, salts: SaltList | None = None) -> MolGraph:
    """Strip salt/solvent components and clear isotopic labels.

    The largest component survives even if every component is on the salt
    list, so the result is never empty.
    """
    if not g.atoms:
        raise EmptyInput("cannot take the parent of an empty graph")
    salts = salts if salts is not None else SaltList()
    comps = g.components()
    kept = []
    for comp in comps:
        piece = mg.subgraph(g, comp)
        if write_canonical(piece) not in salts:
            kept.append(comp)
    if not kept:
        kept = [max(comps, key=lambda c: (len(c), write_canonical(mg.subgraph(g, c))))]
    out = mg.subgraph(g, [i for comp in kept for i in comp])
    for atom in out.atoms:
        atom.isotope = None
    return out


def neutralize(g: MolGraph) -> MolGraph:
    """Protonate simple anions and deprotonate simple cations carrying H.

    An ion adjacent to an oppositely charged atom is part of a zwitterion
    (e.g. one produced by the cleanup rewrites) and is left intact.
    """
    out = g.copy()
    ranks = refinement_ranks(out)
    adj = out.neighbors()
    for idx in sorted(range(len(out.atoms)), key=lambda i: (ranks[i], i)):
        atom = out.atoms[idx]
        if atom.formal_charge == 0:
            continue
        neighbor_charges = [out.atoms[j].formal_charge for j, _ in adj[idx]]
        if atom.formal_charge < 0:
            if any(c > 0 for c in neighbor_charges):
                continue
            _materialize_h(out, idx, -atom.formal_charge)
            atom.formal_charge = 0
        else:
            if any(c < 0 for c in neighbor_charges):
                continue
            available_h = atom.explicit_h or 0
            if available_h >= atom.formal_charge:
                atom.explicit_h = available_h - atom.formal_charge
                atom.formal_charge = 0
    return out


def standardize(g: MolGraph, protocol: Protocol,
                salts: SaltList | None = None) -> MolGraph:
    """Standardize a molecular graph under the chosen protocol."""
    if not g.atoms:
        raise EmptyInput("cannot standardize an empty graph")
    if protocol is Protocol.PUBCHEM_LIKE:
        return g.copy()
    out = cleanup_rewrites(g)
    out = sulfoxide_rewrite(out)
    out = get_parent(out, salts)
    return neutralize(out)


def standardize_smiles(text: str, protocol: Protocol,
                       salts: SaltList | None = None) -> str:
    """Parse, standardize, and re-serialize one SMILES string."""
    return write_canonical(standardize(parse_smiles(text), protocol, salts))
