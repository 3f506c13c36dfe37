"""Text-attributed-graph pretraining with a graph-free student.

A compact, numpy-based stack: graph storage and sampling, a tiny masked
language model cascaded with a GCN (teacher), a structure-aware MLP with a
trainable memory bank (student), joint pretraining, and a linear-probe
evaluation harness. Hot loops live in ``sstag.kernels`` with numba/numpy
twin backends.
"""

__version__ = "0.1.0"

from .util import ArtifactError, NumericalError, SstagError, ValidationError

__all__ = [
    "__version__",
    "SstagError",
    "ValidationError",
    "NumericalError",
    "ArtifactError",
]
