"""Hybrid ANN-aided extended Kalman filter for truck-semitrailer state estimation.

Modules:

* :mod:`hekf_kit.vehicle` - articulated single-track model with Magic Formula tires
* :mod:`hekf_kit.ekf` - generic extended Kalman filter
* :mod:`hekf_kit.narx` - NARX soft sensors and their training
* :mod:`hekf_kit.confidence` - KNN confidence of soft-sensor inputs
* :mod:`hekf_kit.hekf` - the hybrid filter and its tuning
* :mod:`hekf_kit.ident` - particle swarm parameter identification
* :mod:`hekf_kit.datagen` and :mod:`hekf_kit.harness` - synthetic data and the evaluation protocol
"""

from .errors import (ConfigurationError, DomainError, GenerationError, HekfKitError, IdentificationFailure,
                     NumericalFailure, ProtocolError, TrainingFailure, TuningFailure)
from .vehicle import TireParams, VehicleParams

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DomainError", "GenerationError", "HekfKitError", "IdentificationFailure",
    "NumericalFailure", "ProtocolError", "TrainingFailure", "TuningFailure", "TireParams", "VehicleParams",
]
