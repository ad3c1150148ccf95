"""
Reports Module
CSV training logs and JSON-lines record files
"""

import json
import logging
from typing import Iterable, Mapping, Sequence

import pandas as pd
from pydantic import BaseModel

from concept_guard.trainer import EpochStat
from storage.files import PathLike, atomic_write

logger = logging.getLogger(__name__)

TRAINING_LOG_COLUMNS = ['epoch', 'mean_loss']


def write_training_log(history: Sequence[EpochStat], path: PathLike) -> None:
    """Write ``epoch,mean_loss`` rows; an untrained run yields a header-only file."""
    frame = pd.DataFrame(
        [{'epoch': s.epoch, 'mean_loss': s.mean_loss} for s in history],
        columns=TRAINING_LOG_COLUMNS,
    )
    with atomic_write(path) as fh:
        frame.to_csv(fh, index=False, lineterminator='\n', float_format='%.17g')
    logger.info(f"Training log written: {path} ({len(history)} epochs)")


def read_training_log(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


def write_json_lines(records: Iterable[object], path: PathLike) -> int:
    """
    Write one JSON object per line.

    Args:
        records: pydantic models or plain mappings
        path: Destination file

    Returns:
        Number of rows written
    """
    count = 0
    with atomic_write(path) as fh:
        for record in records:
            if isinstance(record, BaseModel):
                fh.write(record.model_dump_json())
            else:
                fh.write(json.dumps(dict(record), sort_keys=True))
            fh.write('\n')
            count += 1
    return count


def read_json_lines(path: PathLike) -> list:
    with open(path, 'r', encoding='utf-8') as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(record: object, path: PathLike) -> None:
    """Write a single pydantic model or mapping as indented JSON."""
    with atomic_write(path) as fh:
        if isinstance(record, BaseModel):
            fh.write(record.model_dump_json(indent=2))
        else:
            json.dump(dict(record) if isinstance(record, Mapping) else record, fh, indent=2, sort_keys=True)
        fh.write('\n')
