"""Power allocation for D2D interference channels with truncated graph transformers."""
from ._runtime import tune_allocator

tune_allocator()

__version__ = "0.1.0"
