"""Neural-ODE operator learning with physics-encoded latent dynamics."""

__version__ = "0.1.0"

from .autodiff import Eager, Tape
from .encoders import FemP1Decoder, FourierDecoder, LearnedBasis, SensorEncoder
from .node import NodeModel, NodeVariant, VariantKind

__all__ = [
    "Eager",
    "FemP1Decoder",
    "FourierDecoder",
    "LearnedBasis",
    "NodeModel",
    "NodeVariant",
    "SensorEncoder",
    "Tape",
    "VariantKind",
    "__version__",
]
