"""Attentional object detection with REINFORCE-trained glimpses, sized for a desk CPU."""
from .errors import (
    AODError, ConfigError, ContractError, DegenerateROIError, DivergenceError, InvalidBoxError,
    NumericalError, ParseError, SchemaVersionError, ShapeError,
)
from .geometry import BoundingBox, GlimpseDelta, decode_glimpse, encode_glimpse, iou
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "AODError", "ConfigError", "ContractError", "DegenerateROIError", "DivergenceError", "InvalidBoxError",
    "NumericalError", "ParseError", "SchemaVersionError", "ShapeError",
    "BoundingBox", "GlimpseDelta", "decode_glimpse", "encode_glimpse", "iou", "BACKEND", "__version__",
]
