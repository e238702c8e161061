"""Model constants and shared configuration defaults."""

from __future__ import annotations

from dataclasses import dataclass

# Controllers, observers and detector run on the coarse grid; reference
# trajectories are tabulated on a 10x finer grid.
CONTROL_DT = 0.05
HIRES_DT = 0.005
HIRES_PER_STEP = 10

VEHICLE_LENGTH = 0.5

# Noise / watermark defaults used throughout the simulated experiments.
PROCESS_NOISE_VAR = 1e-6          # per state component
GAP_MEAS_VAR = 1e-4               # distance measurements
SPEED_MEAS_VAR = 1e-3             # velocity measurements
WATERMARK_VAR = 0.25              # private excitation on desired velocity

# Non-communicative (level 1) constant-headway controller parameters.
HEADWAY_TIME = 1.0
HEADWAY_GAIN = 1.0                # gain on headway error
HEADWAY_RATE_GAIN = 0.2           # gain on closing speed


class ConfigurationError(ValueError):
    """Bad covariance, dimension or option passed to a build step."""


@dataclass(frozen=True)
class DynamicsConstants:
    """Fitted scalars of the empirical single-track vehicle model.

    c1, c2 calibrate the steering angle, c3/c4 and c8/c9 capture tire-slip
    effects on yaw rate and lateral velocity, and c5..c7 approximate the
    drive train response to the desired-velocity command.
    """

    c1: float = 1.6615e-5
    c2: float = -1.9555e-7
    c3: float = 3.619e-6
    c4: float = 4.382e-7
    c5: float = -8.1112e-2
    c6: float = -1.4736e0
    c7: float = 1.2569e-1
    c8: float = 7.6459e-2
    c9: float = -1.3991e-2

    def yaw_denominator(self, v):
        """c3 + c4 v^2, the yaw-rate denominator; must stay positive."""
        return self.c3 + self.c4 * v * v

    def slip_length(self, v):
        """c8 + c9 v^2, the lateral slip moment arm."""
        return self.c8 + self.c9 * v * v


DEFAULT_CONSTANTS = DynamicsConstants()
