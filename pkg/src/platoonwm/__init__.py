"""Platoon simulation and dynamic-watermarking attack detection toolkit."""

from .constants import (
    CONTROL_DT,
    DEFAULT_CONSTANTS,
    DynamicsConstants,
    HIRES_DT,
    VEHICLE_LENGTH,
)

__all__ = [
    "CONTROL_DT",
    "HIRES_DT",
    "VEHICLE_LENGTH",
    "DEFAULT_CONSTANTS",
    "DynamicsConstants",
]

__version__ = "0.1.0"
