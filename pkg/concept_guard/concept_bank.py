"""
Concept Bank Module
Concept-indexed memory queue: persistence, top-K retrieval, set distances and reference embeddings
"""

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from concept_guard.errors import (
    ArtifactParseError, BankUnderpopulatedError, ParameterError, ShapeError
)
from concept_guard.numerics import as_embedding, mlp_forward, softmax, unit_rows
from storage.files import PathLike, atomic_write, read_numbered_lines

logger = logging.getLogger(__name__)

BANK_MAGIC = 'DDIF-BANK'
BANK_VERSION = 'v1'
SOURCE_SUFFIX = '.src'

BENIGN_CONCEPT = 'benign'
GENERIC_UNSAFE_CONCEPT = 'unsafe'
DEFAULT_CONCEPTS = (BENIGN_CONCEPT, GENERIC_UNSAFE_CONCEPT, 'nudity', 'violence', 'gore', 'hate')

DEFAULT_TOP_K = 11
DEFAULT_GAMMA = 0.1

_HEADER_RE = re.compile(r'^DDIF-BANK v1 dim=(\d+) n=(\d+)(?: version=(\d+))?$')
_LABEL_RE = re.compile(r'^[A-Za-z0-9_.-]+$')


class Polarity(str, Enum):
    """Which side of the benign/malicious split a concept belongs to."""
    MALICIOUS = 'malicious'
    BENIGN = 'benign'


class Aggregator(str, Enum):
    """How a neighbor set's similarities collapse to one distance."""
    MEAN = 'mean'
    MAX = 'max'
    SOFTMAX_WEIGHTED = 'softmax_weighted'


def polarity_of(concept: str) -> Polarity:
    """'benign' is benign; every other concept label is malicious."""
    return Polarity.BENIGN if concept == BENIGN_CONCEPT else Polarity.MALICIOUS


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True, eq=False)
class ConceptEntry:
    """
    One memory-queue entry.

    Attributes:
        embedding: Refined-space vector z_i
        concept: Category label
        source: Joint-space embedding the entry was projected from, if kept
    """
    embedding: np.ndarray
    concept: str
    source: Optional[np.ndarray] = None

    @property
    def polarity(self) -> Polarity:
        return polarity_of(self.concept)


@dataclass(frozen=True)
class DistancePair:
    """Set-level similarities to the malicious and benign regions."""
    d_mal: float
    d_ben: float

    def as_features(self) -> np.ndarray:
        """Classifier input, in the fixed order [d_mal, d_ben]."""
        return np.array([self.d_mal, self.d_ben], dtype=np.float64)


@dataclass(frozen=True)
class Neighbor:
    """A retrieved entry with its bank index and cosine similarity."""
    index: int
    entry: ConceptEntry
    similarity: float


class ConceptBank:
    """
    Immutable store of labelled refined-space embeddings.

    Rebuilds produce a new bank with a higher version; nothing is mutated in
    place, so one bank can serve concurrent readers.
    """

    def __init__(self, entries: Sequence[ConceptEntry], dim: Optional[int] = None,
                 version: int = 1):
        entries = tuple(entries)
        if dim is None:
            if not entries:
                raise ParameterError("dim is required for an empty bank")
            dim = int(np.asarray(entries[0].embedding).size)
        if dim < 1:
            raise ParameterError(f"bank dim must be positive, got {dim}")

        rows, sources = [], []
        with_source = [e.source is not None for e in entries]
        if any(with_source) and not all(with_source):
            raise ParameterError("either every entry carries a source embedding or none does")
        for position, entry in enumerate(entries):
            if not _LABEL_RE.match(entry.concept or ''):
                raise ParameterError(f"entry {position}: invalid concept label {entry.concept!r}")
            vector = as_embedding(entry.embedding, f"entry {position}")
            if vector.size != dim:
                raise ShapeError(f"entry {position} has dim {vector.size}, bank dim is {dim}")
            rows.append(vector)
            if entry.source is not None:
                sources.append(as_embedding(entry.source, f"entry {position} source"))

        self._dim = int(dim)
        self._version = int(version)
        self._matrix = np.array(rows, dtype=np.float64).reshape(len(rows), self._dim)
        self._unit = unit_rows(self._matrix) if rows else self._matrix.copy()
        self._malicious = np.array([e.polarity is Polarity.MALICIOUS for e in entries], dtype=bool)
        self._entries = tuple(
            ConceptEntry(self._matrix[i], e.concept, sources[i] if sources else None)
            for i, e in enumerate(entries)
        )
        for arr in (self._matrix, self._unit):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return (f"ConceptBank(dim={self._dim}, n={len(self)}, version={self._version}, "
                f"malicious={self.count(Polarity.MALICIOUS)})")

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def version(self) -> int:
        return self._version

    @property
    def entries(self) -> Tuple[ConceptEntry, ...]:
        return self._entries

    @property
    def matrix(self) -> np.ndarray:
        """Read-only (n, dim) matrix of refined embeddings."""
        return self._matrix

    @property
    def unit_matrix(self) -> np.ndarray:
        """Row-normalised copy of ``matrix``."""
        return self._unit

    def source_matrix(self) -> Optional[np.ndarray]:
        if not self.has_sources:
            return None
        return np.stack([e.source for e in self._entries])

    @property
    def has_sources(self) -> bool:
        return bool(self._entries) and self._entries[0].source is not None

    def count(self, polarity: Polarity) -> int:
        mask = self._malicious if Polarity(polarity) is Polarity.MALICIOUS else ~self._malicious
        return int(mask.sum())

    def polarity_indices(self, polarity: Polarity) -> np.ndarray:
        mask = self._malicious if Polarity(polarity) is Polarity.MALICIOUS else ~self._malicious
        return np.flatnonzero(mask)

    def similarities(self, query) -> np.ndarray:
        """
        Cosine similarity of ``query`` to every entry in one dense pass.

        Each row is reduced independently with the same operation sequence,
        so identical entries get bit-identical scores.
        """
        q = as_embedding(query, 'query')
        if q.size != self._dim:
            raise ShapeError(f"query dim {q.size} != bank dim {self._dim}")
        q_unit = unit_rows(q[None, :])[0]
        return np.clip((self._unit * q_unit).sum(axis=1), -1.0, 1.0)

    def ensure_scorable(self) -> None:
        """Scoring needs at least one entry per polarity."""
        for polarity in Polarity:
            if self.count(polarity) == 0:
                raise BankUnderpopulatedError(f"bank has no {polarity.value} entries")

    def extended(self, entries: Iterable[ConceptEntry]) -> 'ConceptBank':
        """New bank with extra entries appended and the version bumped."""
        return ConceptBank(self._entries + tuple(entries), self._dim, self._version + 1)


# ============================================
# RETRIEVAL
# ============================================

def topk_neighbors(
    bank: ConceptBank,
    query,
    polarity: Polarity,
    k: int = DEFAULT_TOP_K,
    exclude: Iterable[int] = (),
) -> List[Neighbor]:
    """
    Top-K entries of one polarity by descending cosine similarity.

    Ties are broken by ascending insertion index.

    Args:
        bank: Concept bank
        query: Refined-space query embedding
        polarity: Region to search
        k: Number of neighbors wanted
        exclude: Bank indices to skip (self-matches during training)

    Returns:
        min(k, class size) neighbors

    Raises:
        ParameterError: If k < 1
        BankUnderpopulatedError: If the polarity has no (non-excluded) entries
    """
    if int(k) < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    sims = bank.similarities(query)
    candidates = bank.polarity_indices(polarity)
    excluded = np.fromiter((int(i) for i in exclude), dtype=np.int64)
    if excluded.size:
        candidates = candidates[~np.isin(candidates, excluded)]
    if candidates.size == 0:
        raise BankUnderpopulatedError(f"no {Polarity(polarity).value} entries available for retrieval")
    order = np.lexsort((candidates, -sims[candidates]))
    chosen = candidates[order[:int(k)]]
    return [Neighbor(int(i), bank.entries[i], float(sims[i])) for i in chosen]


def set_distance(
    neighbors: Sequence[Neighbor],
    aggregator: Aggregator = Aggregator.MEAN,
    gamma: float = DEFAULT_GAMMA,
) -> float:
    """
    Aggregate a neighbor set's similarities into one set-level value.

    Args:
        neighbors: Non-empty retrieval result
        aggregator: mean (default), max, or softmax_weighted
        gamma: Softmax temperature for softmax_weighted

    Raises:
        ParameterError: On an empty neighbor list
    """
    if not neighbors:
        raise ParameterError("set distance of an empty neighbor set")
    sims = np.array([n.similarity for n in neighbors], dtype=np.float64)
    aggregator = Aggregator(aggregator)
    if aggregator is Aggregator.MAX:
        return float(sims.max())
    if aggregator is Aggregator.SOFTMAX_WEIGHTED:
        value = float(softmax(sims, gamma) @ sims)
    else:
        value = float(sims.mean())
    # rounding can push a mean a hair outside its sample range
    return min(float(sims.max()), max(float(sims.min()), value))


def distance_pair(
    bank: ConceptBank,
    z,
    k: int = DEFAULT_TOP_K,
    aggregator: Aggregator = Aggregator.MEAN,
    gamma: float = DEFAULT_GAMMA,
    exclude: Iterable[int] = (),
) -> Tuple[DistancePair, List[Neighbor], List[Neighbor]]:
    """
    Retrieve both neighbor sets and compute (d_mal, d_ben).

    Returns:
        (DistancePair, malicious neighbors, benign neighbors)
    """
    exclude = tuple(exclude)
    mal = topk_neighbors(bank, z, Polarity.MALICIOUS, k, exclude)
    ben = topk_neighbors(bank, z, Polarity.BENIGN, k, exclude)
    pair = DistancePair(set_distance(mal, aggregator, gamma), set_distance(ben, aggregator, gamma))
    return pair, mal, ben


def reference_embedding(
    neighbors: Sequence[Neighbor],
    gamma: float = DEFAULT_GAMMA,
    use_source: bool = False,
) -> np.ndarray:
    """
    Similarity-softmax-weighted sum of neighbor embeddings.

    r = sum_k w_k z_k with w = softmax(similarities / gamma). The sum is not
    normalised. With ``use_source`` the weights still come from refined-space
    similarities but the summed vectors are the entries' joint-space sources,
    which places r in the space image embeddings live in.

    Raises:
        ParameterError: On an empty list or gamma <= 0
    """
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if not neighbors:
        raise ParameterError("reference embedding of an empty neighbor set")
    weights = softmax([n.similarity for n in neighbors], gamma)
    if use_source and all(n.entry.source is not None for n in neighbors):
        vectors = np.stack([n.entry.source for n in neighbors])
    else:
        if use_source:
            logger.warning("Neighbors carry no source embeddings; using refined vectors")
        vectors = np.stack([n.entry.embedding for n in neighbors])
    return weights @ vectors


# ============================================
# PERSISTENCE
# ============================================

def _format_vector(vector: np.ndarray) -> str:
    return ' '.join(format(float(v), '.17g') for v in vector)


def _write_bank_file(path: PathLike, dim: int, labels: Sequence[str],
                     matrix: np.ndarray, version: int = 1) -> None:
    header = f"{BANK_MAGIC} {BANK_VERSION} dim={dim} n={len(labels)}"
    if version != 1:
        header += f" version={version}"
    with atomic_write(path) as fh:
        fh.write(header + "\n")
        for label, row in zip(labels, matrix):
            fh.write(f"{label}\t{_format_vector(row)}\n")


def bank_save(bank: ConceptBank, path: PathLike) -> None:
    """
    Write a bank file; sources, when present, go to ``<path>.src``.

    Values are written with 17 significant digits so a reload is bit-exact.
    A bank past version 1 records its version in the header.
    """
    labels = [e.concept for e in bank.entries]
    _write_bank_file(path, bank.dim, labels, bank.matrix, bank.version)
    source_path = Path(str(path) + SOURCE_SUFFIX)
    if bank.has_sources:
        sources = bank.source_matrix()
        _write_bank_file(source_path, sources.shape[1], labels, sources, bank.version)
    elif source_path.exists():
        source_path.unlink()
    logger.info(f"Bank saved: {path} ({len(bank)} entries, dim={bank.dim})")


def _read_bank_file(
    path: PathLike,
    known_concepts: Optional[Iterable[str]],
) -> Tuple[int, List[str], np.ndarray, int]:
    known = set(known_concepts) if known_concepts is not None else None
    lines = read_numbered_lines(path)
    first = next(lines, None)
    if first is None:
        raise ArtifactParseError("empty bank file", str(path), 1)
    match = _HEADER_RE.match(first[1])
    if not match:
        raise ArtifactParseError(
            f"bad header {first[1]!r}, expected "
            f"'{BANK_MAGIC} {BANK_VERSION} dim=<d> n=<count> [version=<v>]'",
            str(path), 1,
        )
    dim, count = int(match.group(1)), int(match.group(2))
    version = int(match.group(3)) if match.group(3) else 1
    if dim < 1:
        raise ArtifactParseError("dim must be positive", str(path), 1)
    if version < 1:
        raise ArtifactParseError("version must be positive", str(path), 1)

    labels: List[str] = []
    matrix = np.empty((count, dim), dtype=np.float64)
    for number, text in lines:
        if len(labels) == count:
            raise ArtifactParseError(f"more than the declared {count} entries", str(path), number)
        label, sep, payload = text.partition('\t')
        if not sep:
            raise ArtifactParseError("expected '<concept>\\t<values>'", str(path), number)
        if not _LABEL_RE.match(label):
            raise ArtifactParseError(f"invalid concept label {label!r}", str(path), number)
        if known is not None and label not in known:
            raise ArtifactParseError(f"unknown concept label {label!r}", str(path), number)
        tokens = payload.split(' ')
        if len(tokens) != dim:
            raise ArtifactParseError(
                f"dim mismatch: expected {dim} values, found {len(tokens)}", str(path), number
            )
        try:
            matrix[len(labels)] = [float(tok) for tok in tokens]
        except ValueError as e:
            raise ArtifactParseError(f"bad number: {e}", str(path), number) from None
        labels.append(label)
    if len(labels) != count:
        raise ArtifactParseError(
            f"truncated file: {len(labels)} of {count} entries present",
            str(path), len(labels) + 2,
        )
    if not np.all(np.isfinite(matrix)):
        raise ArtifactParseError("non-finite values in bank", str(path))
    return dim, labels, matrix, version


def bank_load(
    path: PathLike,
    known_concepts: Optional[Iterable[str]] = DEFAULT_CONCEPTS,
) -> ConceptBank:
    """
    Read a bank file (and its ``.src`` companion when present).

    Args:
        path: Bank file
        known_concepts: Accepted labels; None accepts any well-formed label

    Raises:
        ArtifactParseError: Naming the offending line
    """
    dim, labels, matrix, version = _read_bank_file(path, known_concepts)
    sources: Optional[np.ndarray] = None
    source_path = Path(str(path) + SOURCE_SUFFIX)
    if source_path.exists():
        _, source_labels, sources, _ = _read_bank_file(source_path, known_concepts)
        if source_labels != labels:
            raise ArtifactParseError("source labels do not match the bank", str(source_path))
    entries = [
        ConceptEntry(matrix[i], label, sources[i] if sources is not None else None)
        for i, label in enumerate(labels)
    ]
    bank = ConceptBank(entries, dim, version)
    logger.info(
        f"Bank loaded: {path} ({len(bank)} entries, dim={dim}, version={version}, "
        f"sources={bank.has_sources})"
    )
    return bank


# ============================================
# CONSTRUCTION
# ============================================

def default_concept(label: int) -> str:
    """Concept for a record without one: label 1 is benign, 0 the generic unsafe class."""
    return BENIGN_CONCEPT if int(label) == 1 else GENERIC_UNSAFE_CONCEPT


def build_bank(
    records: Sequence,
    g_theta,
    concepts: Optional[Mapping[str, str]] = None,
    keep_sources: bool = True,
) -> ConceptBank:
    """
    Project every training record once with the frozen g_theta.

    Args:
        records: PromptRecord-like objects (prompt_id, raw_embedding, label, concept)
        g_theta: Trained projection network
        concepts: Optional prompt_id -> concept override table
        keep_sources: Keep each record's joint-space embedding as the entry source

    Raises:
        ParameterError: If a concept's polarity contradicts the record's label
    """
    if not records:
        raise ParameterError("cannot build a bank from zero records")
    raw = np.stack([as_embedding(r.raw_embedding, r.prompt_id) for r in records])
    projected = mlp_forward(g_theta, raw)
    entries = []
    for row, record in enumerate(records):
        concept = (concepts or {}).get(record.prompt_id) or getattr(record, 'concept', None) \
            or default_concept(record.label)
        expected = Polarity.BENIGN if int(record.label) == 1 else Polarity.MALICIOUS
        if polarity_of(concept) is not expected:
            raise ParameterError(
                f"prompt {record.prompt_id}: concept {concept!r} contradicts label {int(record.label)}"
            )
        entries.append(ConceptEntry(projected[row], concept, raw[row] if keep_sources else None))
    bank = ConceptBank(entries, g_theta.output_dim)
    logger.info(
        f"Bank built: {len(bank)} entries "
        f"({bank.count(Polarity.MALICIOUS)} malicious, {bank.count(Polarity.BENIGN)} benign)"
    )
    return bank
