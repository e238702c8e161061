"""Ground-truth nonlinear vehicle plant and platoon geometry.

Integrates the empirical single-track model per vehicle, injects process and
measurement noise, and reports gap/speed geometry. State fields may be
scalars or equal-length arrays, in which case every operation is vectorized
across vehicles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constants import (
    ConfigurationError,
    DEFAULT_CONSTANTS,
    DynamicsConstants,
    VEHICLE_LENGTH,
)
from . import ltv


class IntegrationError(RuntimeError):
    """Non-finite value produced while advancing the plant."""


@dataclass
class VehicleState:
    x: np.ndarray | float
    y: np.ndarray | float
    psi: np.ndarray | float
    v: np.ndarray | float

    def copy(self) -> "VehicleState":
        return VehicleState(np.copy(self.x), np.copy(self.y),
                            np.copy(self.psi), np.copy(self.v))


@dataclass
class VehicleInput:
    delta: np.ndarray | float
    v_d: np.ndarray | float


def wrap_angle(psi):
    """Wrap heading(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(psi, dtype=float), 2.0 * np.pi)


def _derivatives(x, y, psi, v, delta, v_d, c: DynamicsConstants):
    psi_dot = np.tan(c.c1 * delta + c.c2) * v / c.yaw_denominator(v)
    slip = psi_dot * c.slip_length(v)
    dv = v - v_d
    return (v * np.cos(psi) - slip * np.sin(psi),
            v * np.sin(psi) + slip * np.cos(psi),
            psi_dot,
            c.c5 + c.c6 * dv + c.c7 * dv * dv)


def step_nonlinear(state: VehicleState, inputs: VehicleInput,
                   constants: DynamicsConstants = DEFAULT_CONSTANTS,
                   dt: float = 0.05, vehicle=None, step=None) -> VehicleState:
    """Advance the plant by dt seconds with held inputs (classical RK4).

    Raises IntegrationError naming the vehicle and step if any intermediate
    value is non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y = np.asarray(state.x, float), np.asarray(state.y, float)
    psi, v = np.asarray(state.psi, float), np.asarray(state.v, float)
    delta, v_d = inputs.delta, inputs.v_d

    k1 = _derivatives(x, y, psi, v, delta, v_d, constants)
    k2 = _derivatives(x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1],
                      psi + 0.5 * dt * k1[2], v + 0.5 * dt * k1[3],
                      delta, v_d, constants)
    k3 = _derivatives(x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1],
                      psi + 0.5 * dt * k2[2], v + 0.5 * dt * k2[3],
                      delta, v_d, constants)
    k4 = _derivatives(x + dt * k3[0], y + dt * k3[1],
                      psi + dt * k3[2], v + dt * k3[3],
                      delta, v_d, constants)

    sixth = dt / 6.0
    out = VehicleState(
        x=x + sixth * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        y=y + sixth * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        psi=wrap_angle(psi + sixth * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])),
        v=v + sixth * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
    )
    if not (np.all(np.isfinite(out.x)) and np.all(np.isfinite(out.y))
            and np.all(np.isfinite(out.psi)) and np.all(np.isfinite(out.v))):
        where = "" if vehicle is None else f" for vehicle {vehicle}"
        when = "" if step is None else f" at step {step}"
        raise IntegrationError(f"non-finite state{where}{when}")
    return out


@dataclass
class PlatoonGeometry:
    """Along-trajectory platoon layout: center-to-center gaps and speeds."""

    d: np.ndarray                 # (kappa-1,) center gaps, lead pair first
    v: np.ndarray                 # (kappa,) forward speeds
    length: float = VEHICLE_LENGTH

    @property
    def kappa(self) -> int:
        return len(self.v)

    @property
    def d_lead(self) -> np.ndarray:
        """Distance from the lead vehicle to each vehicle (leader -> 0)."""
        return np.concatenate(([0.0], np.cumsum(self.d)))

    def bumper_gaps(self) -> np.ndarray:
        return self.d - self.length


def bumper_to_bumper(d, length: float = VEHICLE_LENGTH):
    """Bumper gap and crash flag from a center-to-center gap."""
    if length < 0:
        raise ConfigurationError("vehicle length must be nonnegative")
    f = np.asarray(d, dtype=float) - length
    return f, f <= 0.0


def _check_psd(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ConfigurationError(f"{name} covariance must be square symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < -1e-12 * max(1.0, eig.max()):
        raise ConfigurationError(f"{name} covariance is not positive semidefinite")
    return cov


def sample_noise(cov: np.ndarray, rng: np.random.Generator,
                 name: str = "noise") -> np.ndarray:
    """Draw one zero-mean Gaussian vector with the given covariance."""
    cov = _check_psd(cov, name)
    if _is_diag(cov):
        std = np.sqrt(np.maximum(np.diagonal(cov), 0.0))
        return rng.standard_normal(cov.shape[0]) * std
    return rng.multivariate_normal(np.zeros(cov.shape[0]), cov, method="svd")


def _is_diag(cov: np.ndarray) -> bool:
    return np.count_nonzero(cov - np.diag(np.diagonal(cov))) == 0


def inject_process_noise(geometry: PlatoonGeometry, cov_w: np.ndarray,
                         rng: np.random.Generator) -> PlatoonGeometry:
    """Perturb gaps and speeds with one process-noise draw.

    The first kappa-1 components land on the gaps (equivalently, shift each
    follower along its arclength), the rest on the speeds.
    """
    kappa = geometry.kappa
    w = sample_noise(cov_w, rng, "process")
    if w.shape[0] != 2 * kappa - 1:
        raise ConfigurationError(
            f"process covariance dimension {w.shape[0]} != {2 * kappa - 1}")
    return replace(geometry, d=geometry.d + w[:kappa - 1],
                   v=geometry.v + w[kappa - 1:])


def apply_longitudinal_noise(state: VehicleState, w: np.ndarray) -> VehicleState:
    """Apply a process-noise draw to true vehicle states.

    Gap components shift each follower backwards along its own heading by the
    cumulative gap perturbation (so that gap i changes by w[i]); speed
    components add directly.
    """
    kappa = np.asarray(state.v).shape[0]
    shift = np.concatenate(([0.0], np.cumsum(w[:kappa - 1])))
    return VehicleState(
        x=state.x - shift * np.cos(state.psi),
        y=state.y - shift * np.sin(state.psi),
        psi=state.psi,
        v=state.v + w[kappa - 1:],
    )


def measure(geometry: PlatoonGeometry, reference: PlatoonGeometry,
            level: int, i: int, cov_z: np.ndarray | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Vehicle i's deviation measurement: C_i (x - x_ref) plus sensor noise.

    Followers report [gap deviation, own speed deviation]; the leader reports
    its speed deviation, preceded under level 2 by its distance deviations to
    every follower.
    """
    kappa = geometry.kappa
    x_dev = np.concatenate([geometry.d - reference.d, geometry.v - reference.v])
    C = ltv.measurement_matrix(level, kappa, i)
    y = C @ x_dev
    if cov_z is not None:
        if np.atleast_2d(cov_z).shape[0] != C.shape[0]:
            raise ConfigurationError(
                f"measurement covariance rank {np.atleast_2d(cov_z).shape[0]}"
                f" != {C.shape[0]} rows of the level-{level} selector")
        if rng is None:
            raise ConfigurationError("rng required when sampling noise")
        y = y + sample_noise(cov_z, rng, "measurement")
    return y
