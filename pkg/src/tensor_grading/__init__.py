"""
Tensor-based patch grading of deformation fields.
"""

__version__ = "0.1"
