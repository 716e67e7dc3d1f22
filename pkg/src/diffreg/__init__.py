"""Training-free diffeomorphic deformable image registration.

A small fully convolutional network is optimized from scratch for each
image pair; forward and backward deformation fields are built by a
recursive multiresolution scheme with scaling-and-squaring velocity
exponentiation, which keeps the transforms fold-free and approximately
inverse consistent.
"""

from .autodiff import ContractViolation, GradientError, Tape, Tensor
from .engine import RegistrationConfig, RegistrationResult, register
from .estimator import DiffeomorphicRegistration
from .losses import LossConfig

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "DiffeomorphicRegistration",
    "GradientError",
    "LossConfig",
    "RegistrationConfig",
    "RegistrationResult",
    "Tape",
    "Tensor",
    "register",
    "__version__",
]
