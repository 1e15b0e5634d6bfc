"""Unsupervised person re-identification toolkit.

Grouped-convolution residual backbone with channel and spatial attention,
trained without labels by instance discrimination plus cluster-level
discrimination over a shrinking set of merged clusters, and evaluated
under the cross-camera retrieval protocol.
"""

from . import acl, attention, backbone, config, dataio, evaluation, idl, tensor, trainer
from .errors import (ConfigError, FormatError, GamreidError, IntegrityError,
                     NumericError, ParseError, ShapeError, UsageError)
from .kernels import BACKEND
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "acl", "attention", "backbone", "config", "dataio", "evaluation", "idl",
    "tensor", "trainer", "Tensor", "BACKEND",
    "GamreidError", "ConfigError", "ShapeError", "FormatError",
    "IntegrityError", "UsageError", "ParseError", "NumericError",
    "__version__",
]
