"""
Storage Module
Contains artifact persistence helpers (atomic writes, digests, manifests)
"""

from storage.files import atomic_write, file_digest, read_numbered_lines, write_manifest

__all__ = ['atomic_write', 'file_digest', 'read_numbered_lines', 'write_manifest']
