"""
Concept Guard
Retrieval-based prompt scoring with localized redaction instead of refusal
"""

__version__ = '1.0.0'
