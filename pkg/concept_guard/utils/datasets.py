"""
Dataset Files Module
Reading and writing labelled prompt-embedding TSV files and their concept sidecars
"""

import csv
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from concept_guard.errors import ArtifactParseError
from concept_guard.trainer import Label, PromptRecord
from storage.files import PathLike, atomic_write

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ('prompt_id', 'label', 'embedding')
CONCEPT_COLUMNS = ('prompt_id', 'concept')


def _read_tsv(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    """Read a headerless TSV as strings, one DataFrame row per file line."""
    try:
        frame = pd.read_csv(
            path, sep='\t', header=None, dtype=str, keep_default_na=False,
            quoting=csv.QUOTE_NONE, skip_blank_lines=False, encoding='utf-8',
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns))
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise ArtifactParseError(f"malformed TSV: {e}", path=str(path),
                                 line_number=int(found.group(1)) if found else None) from e
    frame = frame.fillna('')

    if frame.shape[1] != len(columns):
        # find the first offending line for the diagnostic
        for idx, row in frame.iterrows():
            filled = sum(1 for v in row if isinstance(v, str) and v != '')
            if filled != len(columns):
                raise ArtifactParseError(
                    f"expected {len(columns)} tab-separated fields", path=str(path), line_number=idx + 1
                )
        raise ArtifactParseError(f"expected {len(columns)} tab-separated fields", path=str(path))
    frame.columns = list(columns)
    return frame


def _parse_vector(text: str, path: PathLike, line_number: int) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(' ') if v != ''], dtype=np.float64)
    except ValueError as e:
        raise ArtifactParseError(f"bad embedding value: {e}", path=str(path), line_number=line_number) from e
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise ArtifactParseError("embedding must be non-empty and finite",
                                 path=str(path), line_number=line_number)
    return values


def read_concepts(path: PathLike) -> Dict[str, str]:
    """
    Read a ``<prompt_id>\\t<concept>`` sidecar.

    Raises:
        ArtifactParseError: On malformed lines or duplicate ids
    """
    frame = _read_tsv(path, CONCEPT_COLUMNS)
    concepts: Dict[str, str] = {}
    for idx, row in frame.iterrows():
        prompt_id, concept = row['prompt_id'].strip(), row['concept'].strip()
        if not prompt_id or not concept:
            raise ArtifactParseError("empty prompt id or concept", path=str(path), line_number=idx + 1)
        if prompt_id in concepts:
            raise ArtifactParseError(f"duplicate prompt id {prompt_id!r}",
                                     path=str(path), line_number=idx + 1)
        concepts[prompt_id] = concept
    return concepts


def read_dataset(path: PathLike, concepts_path: Optional[PathLike] = None) -> List[PromptRecord]:
    """
    Load a prompt dataset: ``<prompt_id>\\t<label>\\t<v1> ... <vd>`` per line.

    Args:
        path: Dataset TSV
        concepts_path: Optional sidecar assigning concept categories

    Returns:
        Records in file order

    Raises:
        ArtifactParseError: With the offending line number on bad labels,
            inconsistent dimensions, duplicate ids or malformed floats
    """
    frame = _read_tsv(path, DATASET_COLUMNS)
    concepts = read_concepts(concepts_path) if concepts_path is not None else {}

    records: List[PromptRecord] = []
    seen = set()
    dim = None
    for idx, row in frame.iterrows():
        line_number = idx + 1
        prompt_id = row['prompt_id'].strip()
        if not prompt_id:
            raise ArtifactParseError("empty prompt id", path=str(path), line_number=line_number)
        if prompt_id in seen:
            raise ArtifactParseError(f"duplicate prompt id {prompt_id!r}",
                                     path=str(path), line_number=line_number)
        if row['label'].strip() not in ('0', '1'):
            raise ArtifactParseError(f"label must be 0 or 1, got {row['label']!r}",
                                     path=str(path), line_number=line_number)
        vector = _parse_vector(row['embedding'], path, line_number)
        if dim is None:
            dim = vector.size
        elif vector.size != dim:
            raise ArtifactParseError(f"expected {dim} values, got {vector.size}",
                                     path=str(path), line_number=line_number)
        seen.add(prompt_id)
        records.append(PromptRecord(
            prompt_id=prompt_id,
            raw_embedding=vector,
            label=Label(int(row['label'])),
            concept=concepts.get(prompt_id),
        ))

    missing = set(concepts) - seen
    if missing:
        logger.warning(f"{len(missing)} concept sidecar ids have no dataset record")
    logger.info(f"Loaded {len(records)} prompts (dim={dim}) from {path}")
    return records


def _check_id(prompt_id: str) -> str:
    if not prompt_id or any(c in prompt_id for c in '\t\r\n'):
        raise ValueError(f"prompt id must be non-empty without tabs or newlines: {prompt_id!r}")
    return prompt_id


def write_dataset(records: Sequence[PromptRecord], path: PathLike,
                  concepts_path: Optional[PathLike] = None) -> None:
    """
    Write records as a dataset TSV (17 significant digits) and optionally
    the concept sidecar for records that carry a concept.
    """
    frame = pd.DataFrame({
        'prompt_id': [_check_id(r.prompt_id) for r in records],
        'label': [int(r.label) for r in records],
        'embedding': [' '.join(format(float(v), '.17g') for v in r.raw_embedding) for r in records],
    })
    with atomic_write(path) as fh:
        frame.to_csv(fh, sep='\t', header=False, index=False, lineterminator='\n',
                     quoting=csv.QUOTE_NONE)

    if concepts_path is not None:
        tagged = pd.DataFrame(
            [(r.prompt_id, r.concept) for r in records if r.concept],
            columns=list(CONCEPT_COLUMNS),
        )
        with atomic_write(concepts_path) as fh:
            tagged.to_csv(fh, sep='\t', header=False, index=False, lineterminator='\n',
                          quoting=csv.QUOTE_NONE)
    logger.info(f"Wrote {len(records)} prompts to {Path(path)}")
