"""Deterministic toy data: SMILES-like strings, 3D geometries, labeled sets.

The strings follow SMILES lexical rules closely enough for the tokenizer
(atoms, bonds, branches, ring closures) but are not guaranteed to be
chemically valid.
"""

from __future__ import annotations

import numpy as np

from .analysis import MoleculeGeometry, atom_token_alignment
from .tokenizer import tokenize

_ATOMS = ("C", "C", "C", "C", "N", "O", "c", "c", "n", "S", "F", "Cl", "Br", "[nH]", "[O-]", "[NH3+]")
_BONDS = ("", "", "", "", "=", "#")


def random_smiles(rng: np.random.Generator, n_atoms: int) -> str:
    out = []
    open_rings: list[str] = []
    next_ring = 1
    depth = 0
    for i in range(n_atoms):
        if i and rng.random() < 0.15:
            out.append(_BONDS[rng.integers(len(_BONDS))])
        out.append(_ATOMS[rng.integers(len(_ATOMS))])
        if open_rings and rng.random() < 0.3:
            out.append(open_rings.pop())
        elif next_ring < 10 and rng.random() < 0.12:
            open_rings.append(str(next_ring))
            out.append(str(next_ring))
            next_ring += 1
        if i < n_atoms - 2:
            if depth < 2 and rng.random() < 0.15:
                out.append("(")
                depth += 1
            elif depth and rng.random() < 0.35:
                out.append(")")
                depth -= 1
    out.extend(open_rings)
    out.extend(")" * depth)
    return "".join(out)


_SCAFFOLDS = (
    "c1cc({})c({})cc1{}",
    "c1nc({})cc({})c1{}",
    "{}C1CCN(CC1{}){}",
    "O=C({})N({})C{}",
    "{}c1ccc2c(c1)oc({})c2{}",
    "{}C(=O)Nc1ccc({})cc1{}",
    "{}OCC({})C{}",
    "n1c({})sc({})c1{}",
)
_SUBSTITUENTS = (
    "C", "CC", "CCC", "O", "OC", "N", "NC", "F", "Cl", "Br", "C#N", "C(=O)O",
    "C(=O)N", "C(F)(F)F", "[N+](=O)[O-]", "S(=O)(=O)N", "c1ccccc1", "C1CC1", "OCC", "N(C)C",
)


def random_corpus(n: int = 256, seed: int = 0, min_atoms: int = 6, max_atoms: int = 24) -> list[str]:
    """``n`` distinct random strings with atom counts in ``[min_atoms, max_atoms]``."""
    rng = np.random.default_rng(seed)
    seen: dict[str, None] = {}
    while len(seen) < n:
        s = random_smiles(rng, int(rng.integers(min_atoms, max_atoms + 1)))
        seen.setdefault(s, None)
    return list(seen)


def toy_corpus(n: int = 256, seed: int = 0) -> list[str]:
    """``n`` distinct drug-like molecules: a scaffold with three substituents.

    Drawn without replacement from 8 x 20**3 combinations, so a molecule is
    almost always identified by its scaffold and any two substituents.
    """
    rng = np.random.default_rng(seed)
    total = len(_SCAFFOLDS) * len(_SUBSTITUENTS) ** 3
    if n > total:
        raise ValueError(f"at most {total} distinct toy molecules")
    out = []
    k = len(_SUBSTITUENTS)
    for code in rng.choice(total, size=n, replace=False):
        code = int(code)
        scaffold, code = divmod(code, k**3)
        r = (code // (k * k), (code // k) % k, code % k)
        out.append(_SCAFFOLDS[scaffold].format(*(_SUBSTITUENTS[i] for i in r)))
    return out


def synthetic_geometry(smiles: str, seed: int = 0, bond: float = 1.5, hydrogens: int = 0) -> MoleculeGeometry:
    """Random-walk coordinates, one heavy atom per atom token, in SMILES order.

    Consecutive atoms sit ``bond`` Angstrom apart with a tetrahedral-ish turn,
    so short, medium and long pair distances all occur for chains of about
    six or more atoms.  Optional hydrogens are appended at random.
    """
    rng = np.random.default_rng(seed)
    tokens = tokenize(smiles)
    symbols = [tokens[i].strip("[]").rstrip("+-0123456789H") or "C" for i in atom_token_alignment(smiles)]
    symbols = [s.capitalize() if len(s) == 1 else s for s in symbols]
    coords = np.zeros((len(symbols), 3))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    for i in range(1, len(symbols)):
        for _ in range(100):
            trial = direction + 1.2 * rng.normal(size=3)
            trial /= np.linalg.norm(trial)
            if trial @ direction > -0.33:
                break
        direction = trial
        coords[i] = coords[i - 1] + bond * direction
    for _ in range(hydrogens):
        j = int(rng.integers(len(symbols)))
        symbols.append("H")
        h = rng.normal(size=3)
        coords = np.vstack([coords, coords[j] + 1.09 * h / np.linalg.norm(h)])
    return MoleculeGeometry(smiles, symbols, coords)


def length_regression_set(smiles: list[str]) -> np.ndarray:
    """Label each molecule with its token count (no framing)."""
    return np.asarray([[len(tokenize(s))] for s in smiles], dtype=np.float64)


def split_indices(n: int, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return {"train": np.sort(perm[:a]), "valid": np.sort(perm[a:b]), "test": np.sort(perm[b:])}
