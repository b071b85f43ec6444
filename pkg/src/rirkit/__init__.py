"""Dual-stream (residual + transient) convolutional networks in numpy.

Modules: ``tensor`` (kernels), ``init`` (initializers and ResNet-Init
fusion), ``streams`` (generalized residual layers), ``model``, ``optim``,
``data``, ``checkpoint`` and the ``cli``.
"""
from ._accel import backend
from .errors import (
    ConfigError,
    CorruptDataError,
    FormatError,
    InputError,
    NumericalError,
    RirError,
    ShapeError,
    UnsupportedModelError,
)
from .init import StreamSplit, partial_identity, resnet_init_fuse, resnet_init_split
from .model import ModelKind, NetSpec, build_network, count_params, get_spec, standard_specs

__version__ = "0.1.0"
