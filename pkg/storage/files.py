"""
Artifact Storage Module
Handles on-disk persistence of banks, checkpoints, reports and manifests
"""

import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

MANIFEST_NAME = 'manifest.json'


@contextmanager
def atomic_write(path: PathLike, mode: str = 'w') -> Iterator:
    """
    Context manager writing a file through a temporary sibling.

    The target is replaced only when the block exits cleanly; on error the
    temporary file is removed and the previous content stays untouched.

    Usage:
        with atomic_write('bank.tsv') as fh:
            fh.write(text)

    Args:
        path: Destination file
        mode: 'w' for text (UTF-8, LF newlines) or 'wb' for bytes

    Yields:
        Open file handle
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    binary = 'b' in mode
    try:
        if binary:
            handle = os.fdopen(fd, 'wb')
        else:
            handle = os.fdopen(fd, 'w', encoding='utf-8', newline='\n')
        with handle:
            yield handle
        os.replace(tmp_name, target)
    except BaseException as e:
        logger.error(f"Write of {target} rolled back: {e}")
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise
    logger.debug(f"Wrote {target}")


def read_numbered_lines(path: PathLike) -> Iterator[Tuple[int, str]]:
    """
    Iterate over a UTF-8 text file yielding (1-based line number, line).

    Trailing newline characters are stripped; nothing else is.
    """
    with open(path, 'r', encoding='utf-8', newline='') as fh:
        for number, line in enumerate(fh, start=1):
            yield number, line.rstrip('\r\n')


def file_digest(path: PathLike) -> str:
    """
    Compute the sha256 digest of a file.

    Returns:
        Hex digest string prefixed with 'sha256:'
    """
    sha = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b''):
            sha.update(chunk)
    return f"sha256:{sha.hexdigest()}"


def write_manifest(
    out_dir: PathLike,
    command: str,
    config: Mapping[str, Any],
    seeds: Mapping[str, int],
    inputs: Optional[Mapping[str, PathLike]] = None,
    outputs: Optional[Mapping[str, PathLike]] = None,
) -> Path:
    """
    Write the run manifest needed to reproduce a CLI invocation.

    ``created_at`` is the wall-clock write time and the only field that
    differs between two identical runs; every other field, and every output
    the digests cover, is reproduced byte for byte.

    Args:
        out_dir: Directory receiving manifest.json
        command: Subcommand name
        config: Fully resolved configuration values
        seeds: Every seed that drove randomness in the run
        inputs: Artifacts read, by role
        outputs: Artifacts written, by role

    Returns:
        Path of the manifest file
    """
    def describe(paths: Optional[Mapping[str, PathLike]]) -> Dict[str, Dict[str, str]]:
        described = {}
        for role, p in (paths or {}).items():
            entry = {'path': str(p)}
            if p is not None and Path(p).is_file():
                entry['digest'] = file_digest(p)
            described[role] = entry
        return described

    manifest = {
        'command': command,
        'created_at': datetime.now(timezone.utc).isoformat(),
        'config': {k: _jsonable(v) for k, v in sorted(config.items())},
        'seeds': dict(seeds),
        'inputs': describe(inputs),
        'outputs': describe(outputs),
    }
    target = Path(out_dir) / MANIFEST_NAME
    with atomic_write(target) as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write('\n')
    logger.info(f"Manifest written: {target}")
    return target


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, 'value'):
        return value.value
    return str(value)
