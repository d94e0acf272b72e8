"""Attention-versus-geometry and embedding-versus-structure studies."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegeneratePairs, HashConfigMismatch, NoAlignedMolecules, ValidationError
from .model import EncoderState, embed_many, extract_attention_map
from .tokenizer import TokenSequence, Vocabulary, encode, tokenize

ORGANIC_ATOMS = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "b", "c", "n", "o", "s", "p", "*"})


def is_atom_token(token: str) -> bool:
    return token.startswith("[") or token in ORGANIC_ATOMS


def atom_token_alignment(seq: TokenSequence | str) -> list[int]:
    """Payload positions (begin token excluded) of tokens that denote atoms.

    Add 1 to index a framed sequence.
    """
    raw = seq if isinstance(seq, str) else seq.raw
    return [i for i, tok in enumerate(tokenize(raw)) if is_atom_token(tok)]


@dataclass
class MoleculeGeometry:
    smiles: str
    symbols: list[str]
    coords: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(self.symbols) != len(self.coords):
            raise ValidationError(f"{self.name or self.smiles}: {len(self.symbols)} symbols, {len(self.coords)} coordinates")
        if not np.all(np.isfinite(self.coords)):
            raise ValidationError(f"{self.name or self.smiles}: non-finite coordinates")

    def heavy(self) -> "MoleculeGeometry":
        keep = [i for i, s in enumerate(self.symbols) if s != "H"]
        return MoleculeGeometry(self.smiles, [self.symbols[i] for i in keep], self.coords[keep], self.name)

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))


def read_geometries(path) -> list[MoleculeGeometry]:
    """Concatenated blocks: atom count, SMILES, then ``symbol x y z`` lines."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    label = Path(path).name
    out = []
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        try:
            count = int(lines[i])
        except ValueError:
            raise ValidationError(f"{path}:{i + 1}: expected an atom count, got {lines[i]!r}") from None
        if i + 2 + count > len(lines):
            raise ValidationError(f"{path}:{i + 1}: truncated geometry block")
        smiles = lines[i + 1].split()[0] if lines[i + 1] else ""
        symbols, coords = [], []
        for j in range(i + 2, i + 2 + count):
            parts = lines[j].split()
            if len(parts) < 4:
                raise ValidationError(f"{path}:{j + 1}: expected 'symbol x y z'")
            try:
                coords.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ValidationError(f"{path}:{j + 1}: bad coordinate") from None
            symbols.append(parts[0])
        out.append(MoleculeGeometry(smiles, symbols, coords, name=f"{label}#{len(out)}"))
        i += 2 + count
    return out


def write_geometries(path, geoms: Iterable[MoleculeGeometry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in geoms:
            fh.write(f"{len(g.symbols)}\n{g.smiles}\n")
            for s, (x, y, z) in zip(g.symbols, g.coords):
                fh.write(f"{s} {x:.6f} {y:.6f} {z:.6f}\n")


class DistanceCategory(enum.Enum):
    SHORT = ("short", 0.0, 2.0)
    MEDIUM = ("medium", 2.0, 4.0)
    LONG = ("long", 4.0, 10.0)

    def __init__(self, label, lo, hi):
        self.label = label
        self.lo = lo
        self.hi = hi

    def select(self, d: np.ndarray) -> np.ndarray:
        """Half-open interval ``(lo, hi]``; zero distances are never selected."""
        return (d > self.lo) & (d <= self.hi)


def affinity(d: np.ndarray, transform: str = "exp", d0: float = 2.0) -> np.ndarray:
    if transform == "exp":
        return np.exp(-d / d0)
    if transform == "inverse":
        return 1.0 / d
    if transform == "indicator":
        return np.ones_like(d)
    raise ValidationError(f"unknown distance transform {transform!r}")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(a @ b / (na * nb))


@dataclass
class CosineReport:
    rows: list[tuple[int, str, float, int]]
    skipped: int
    per_molecule: dict = field(default_factory=dict)

    def mean(self, layer: int, category: str) -> float:
        for l, c, m, _ in self.rows:
            if l == layer and c == category:
                return m
        raise KeyError((layer, category))


def attention_distance_cosine(
    state: EncoderState,
    vocab: Vocabulary,
    geometries: Sequence[MoleculeGeometry],
    layers: Sequence[int] | None = None,
    *,
    variant=None,
    transform: str = "exp",
    d0: float = 2.0,
    max_len: int = 256,
) -> CosineReport:
    """Per-molecule cosine between attention and distance affinity, averaged.

    For each aligned molecule and layer the head-averaged map is restricted
    to atom-token rows and columns; within each distance category the
    selected attention values are compared with ``affinity(d)``.  Molecules
    whose heavy-atom count differs from their atom-token count are skipped.
    """
    if layers is None:
        layers = list(range(state.config.layers))
    sums = {(l, c.label): [] for l in layers for c in DistanceCategory}
    per_molecule = {}
    skipped = aligned = 0
    for g in geometries:
        g = g.heavy()
        try:
            seq = encode(g.smiles, vocab)
        except ValidationError:
            skipped += 1
            continue
        pos = np.asarray(atom_token_alignment(seq)) + 1
        if len(pos) != len(g.symbols) or len(pos) < 2:
            skipped += 1
            continue
        aligned += 1
        maps = extract_attention_map(state, [seq.ids], None, max_len=max_len, variant=variant)
        d = g.distances()
        for l in layers:
            att = maps[l][np.ix_(pos, pos)]
            for cat in DistanceCategory:
                sel = cat.select(d)
                if not sel.any():
                    continue
                value = cosine(att[sel], affinity(d[sel], transform, d0))
                if math.isnan(value):
                    continue
                sums[(l, cat.label)].append(value)
                per_molecule[(g.name or g.smiles, l, cat.label)] = value
    if aligned == 0:
        raise NoAlignedMolecules(f"no geometry aligned with its tokenization ({skipped} skipped)")
    rows = []
    for l in layers:
        for cat in DistanceCategory:
            vals = sums[(l, cat.label)]
            rows.append((l, cat.label, float(np.mean(vals)) if vals else math.nan, len(vals)))
    return CosineReport(rows, skipped, per_molecule)


def write_cosine_csv(path, report: CosineReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "category", "mean_cosine", "n_molecules"])
        for l, c, m, n in report.rows:
            w.writerow([l, c, repr(m), n])


# fingerprints

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class NGramFingerprint:
    bits: frozenset[int]
    width: int = 2048
    max_n: int = 3
    ngrams: frozenset[str] = field(default=frozenset(), compare=False)

    def __len__(self):
        return len(self.bits)


def token_ngrams(tokens: Sequence[str], max_n: int = 3) -> set[str]:
    grams = set()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            grams.add(" ".join(tokens[i : i + n]))
    return grams


def fingerprint(smiles: str, width: int = 2048, max_n: int = 3) -> NGramFingerprint:
    """Hashed set of token 1..max_n-grams (FNV-1a 64, reduced mod ``width``)."""
    grams = token_ngrams(tokenize(smiles), max_n)
    bits = frozenset(fnv1a64(g.encode("utf-8")) % width for g in grams)
    return NGramFingerprint(bits, width, max_n, frozenset(grams))


def tanimoto(f1: NGramFingerprint, f2: NGramFingerprint) -> float:
    """``|A & B| / |A | B|``; two empty fingerprints count as identical."""
    if (f1.width, f1.max_n) != (f2.width, f2.max_n):
        raise HashConfigMismatch(f"fingerprints built with {(f1.width, f1.max_n)} and {(f2.width, f2.max_n)}")
    union = len(f1.bits | f2.bits)
    if union == 0:
        return 1.0
    return len(f1.bits & f2.bits) / union


@dataclass
class SimilarityReport:
    rows: list[tuple[int, float, float, int]]
    pearson_tanimoto: float
    pearson_shared: float


def _pearson(x, y, what: str) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0:
        raise DegeneratePairs("all embedding distances are equal; correlation undefined")
    if np.ptp(y) == 0:
        raise DegeneratePairs(f"all {what} values are equal; correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def embedding_similarity_correlation(
    state: EncoderState,
    vocab: Vocabulary,
    pairs: Sequence[tuple[str, str]],
    width: int = 2048,
    max_n: int = 3,
) -> SimilarityReport:
    """Pearson correlation of embedding distance with fingerprint similarity.

    Both correlations are expected to be negative: closer embeddings for
    structurally more similar molecules.
    """
    if len(pairs) < 2:
        raise ValidationError("need at least two molecule pairs")
    smiles = sorted({s for p in pairs for s in p})
    seqs = [encode(s, vocab) for s in smiles]
    emb = dict(zip(smiles, embed_many(state, seqs).astype(np.float64)))
    fps = {s: fingerprint(s, width, max_n) for s in smiles}
    rows = []
    for i, (a, b) in enumerate(pairs):
        dist = float(np.linalg.norm(emb[a] - emb[b]))
        rows.append((i, dist, tanimoto(fps[a], fps[b]), len(fps[a].ngrams & fps[b].ngrams)))
    dists = [r[1] for r in rows]
    return SimilarityReport(
        rows,
        _pearson(dists, [r[2] for r in rows], "Tanimoto"),
        _pearson(dists, [r[3] for r in rows], "shared n-gram"),
    )


def write_similarity_csv(path, report: SimilarityReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "embed_dist", "tanimoto", "shared_ngrams"])
        for pid, d, t, s in report.rows:
            w.writerow([pid, repr(d), repr(t), s])
