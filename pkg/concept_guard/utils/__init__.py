"""
Utilities Module
Contains file codecs, report writers and the gradient-check suite
"""

from concept_guard.utils.datasets import read_dataset, write_dataset
from concept_guard.utils.gradcheck import grad_check
from concept_guard.utils.netpbm import read_netpbm, write_netpbm

__all__ = ['read_dataset', 'write_dataset', 'grad_check', 'read_netpbm', 'write_netpbm']
