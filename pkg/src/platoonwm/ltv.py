"""Time-varying linear system matrices for the platoon.

Builds the longitudinal state-space matrices around a reference trajectory,
the per-vehicle measurement selectors, the lateral error dynamics, the
closed-loop plant + observer assembly, and the watermark propagation
condition used to pick per-channel correlation delays.

State vector ordering is fixed everywhere: the kappa-1 inter-vehicle gap
deviations first, then the kappa speed deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import CONTROL_DT, DEFAULT_CONSTANTS, DynamicsConstants

# Below this |alpha| the exact expm1 ratio is replaced by its series value to
# avoid 0/0; the ratio (beta-1)/alpha -> dt as alpha -> 0.
_ALPHA_TINY = 1e-12


class AssemblyError(ValueError):
    """Dimension mismatch while assembling block matrices."""


class NoPropagationError(RuntimeError):
    """No delay lets the watermark reach the requested channel."""


@dataclass(frozen=True)
class LongitudinalCoeffs:
    """Per-vehicle discretization scalars of the speed dynamics.

    alpha is the continuous speed-error pole, beta = exp(dt * alpha) its
    discrete counterpart, bratio = (beta - 1) / alpha the held-input
    integral, and theta / sigma_obs the observer-corrected shorthands
    theta = beta - 0.1 and sigma_obs = bratio - dt.
    """

    alpha: float
    beta: float
    bratio: float
    theta: float
    sigma_obs: float


def longitudinal_coeffs(v_bar, v_d_bar, constants: DynamicsConstants = DEFAULT_CONSTANTS):
    """Evaluate alpha/beta and derived shorthands at a reference point.

    Accepts scalars or arrays (vectorized over vehicles). alpha = 0 is a
    removable singularity of (beta-1)/alpha and is handled by its limit dt.
    """
    v_bar = np.asarray(v_bar, dtype=float)
    v_d_bar = np.asarray(v_d_bar, dtype=float)
    alpha = constants.c6 + 2.0 * constants.c7 * (v_bar - v_d_bar)
    beta = np.exp(CONTROL_DT * alpha)
    safe = np.where(np.abs(alpha) < _ALPHA_TINY, 1.0, alpha)
    bratio = np.where(
        np.abs(alpha) < _ALPHA_TINY,
        CONTROL_DT * (1.0 + 0.5 * CONTROL_DT * alpha),
        np.expm1(CONTROL_DT * alpha) / safe,
    )
    theta = beta - 0.1
    sigma_obs = bratio - CONTROL_DT
    if alpha.ndim == 0:
        return LongitudinalCoeffs(float(alpha), float(beta), float(bratio),
                                  float(theta), float(sigma_obs))
    return LongitudinalCoeffs(alpha, beta, bratio, theta, sigma_obs)


@dataclass
class LtvSystem:
    """One time step of the longitudinal LTV model for kappa vehicles."""

    kappa: int
    A: np.ndarray                      # (p, p)
    B: list[np.ndarray] = field(default_factory=list)   # kappa columns (p, 1)
    C: list[np.ndarray] = field(default_factory=list)   # per-vehicle selectors

    @property
    def p(self) -> int:
        return 2 * self.kappa - 1

    def B_stack(self) -> np.ndarray:
        """All input columns side by side, shape (p, kappa)."""
        return np.hstack(self.B)


def build_A(coeffs: LongitudinalCoeffs) -> np.ndarray:
    """State matrix from per-vehicle coefficient vectors.

    Gap row i couples speeds i and i+1 through (beta-1)/alpha; the speed
    block is diagonal in beta.
    """
    kappa = np.asarray(coeffs.beta).shape[0]
    p = 2 * kappa - 1
    ng = kappa - 1
    A = np.zeros((p, p))
    A[:ng, :ng] = np.eye(ng)
    rows = np.arange(ng)
    A[rows, ng + rows] = coeffs.bratio[:-1]
    A[rows, ng + rows + 1] = -coeffs.bratio[1:]
    A[ng + np.arange(kappa), ng + np.arange(kappa)] = coeffs.beta
    return A


def input_matrix(coeffs: LongitudinalCoeffs) -> np.ndarray:
    """All input columns side by side, shape (p, kappa).

    Input i enters its trailing gap row with (beta-1)/alpha - dt, its
    leading gap row with the opposite sign, and its own speed row with
    1 - beta.
    """
    kappa = np.asarray(coeffs.beta).shape[0]
    p = 2 * kappa - 1
    ng = kappa - 1
    sig = coeffs.bratio - CONTROL_DT
    B = np.zeros((p, kappa))
    idx = np.arange(1, kappa)
    B[idx - 1, idx] = sig[1:]                 # trailing gap rows
    idx = np.arange(kappa - 1)
    B[idx, idx] = -sig[:-1]                   # leading gap rows
    B[ng + np.arange(kappa), np.arange(kappa)] = 1.0 - coeffs.beta
    return B


def build_AB(v_bar, v_d_bar, constants: DynamicsConstants = DEFAULT_CONSTANTS,
             level: int = 3) -> LtvSystem:
    """Assemble A, input columns and measurement selectors at one point."""
    v_bar = np.asarray(v_bar, dtype=float)
    v_d_bar = np.asarray(v_d_bar, dtype=float)
    kappa = v_bar.shape[0]
    if kappa < 2:
        raise AssemblyError("need at least two vehicles")
    co = longitudinal_coeffs(v_bar, v_d_bar, constants)
    A = build_A(co)
    Bmat = input_matrix(co)
    B = [Bmat[:, i:i + 1] for i in range(kappa)]
    C = [measurement_matrix(level, kappa, i) for i in range(1, kappa + 1)]
    return LtvSystem(kappa=kappa, A=A, B=B, C=C)


def measurement_matrix(level: int, kappa: int, i: int) -> np.ndarray:
    """Selector C_i mapping the state vector to vehicle i's measurement.

    Vehicle numbering is 1-based. Followers always measure their leading gap
    and own speed. The leader measures its own speed; under level 2 it also
    reports the distance from itself to every other vehicle (cumulative gap
    sums), stacked above the speed row.
    """
    if not 1 <= i <= kappa:
        raise AssemblyError(f"vehicle index {i} outside 1..{kappa}")
    p = 2 * kappa - 1
    ng = kappa - 1
    if i == 1:
        if level == 2:
            C = np.zeros((kappa, p))
            for r in range(ng):
                C[r, : r + 1] = 1.0     # leader-to-vehicle-(r+2) distance
            C[ng, ng] = 1.0             # own speed
        else:
            C = np.zeros((1, p))
            C[0, ng] = 1.0
        return C
    C = np.zeros((2, p))
    C[0, i - 2] = 1.0                   # gap to the preceding vehicle
    C[1, ng + i - 1] = 1.0              # own speed
    return C


def measurement_dim(level: int, kappa: int, i: int) -> int:
    if i == 1:
        return kappa if level == 2 else 1
    return 2


def build_lateral(v_bar: float, delta_bar: float,
                  constants: DynamicsConstants = DEFAULT_CONSTANTS):
    """Discrete lateral/heading error dynamics matrices (A_lat, B_lat).

    A_lat = [[1, v/20], [0, 1]]; B_lat is the steering-deviation column
    scaled by the common factor c1 v / (cos^2(c1 delta + c2) (c3 + c4 v^2)).
    """
    c = constants
    denom = np.cos(c.c1 * delta_bar + c.c2) ** 2 * c.yaw_denominator(v_bar)
    if denom == 0.0:
        raise AssemblyError("steering linearization undefined at this point")
    gain = c.c1 * v_bar / denom
    A_lat = np.array([[1.0, v_bar / 20.0], [0.0, 1.0]])
    B_lat = gain * np.array([[c.slip_length(v_bar) / 20.0 + v_bar / 800.0],
                             [1.0 / 20.0]])
    return A_lat, B_lat


@dataclass
class ClosedLoop:
    """Plant + stacked observer dynamics for one step."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    L_bar: np.ndarray
    p: int
    obs_dims: list[int]


def build_closed_loop(system: LtvSystem, K: list[np.ndarray],
                      N: list[np.ndarray], M: list[np.ndarray],
                      L: dict[tuple[int, int], np.ndarray],
                      H: set[tuple[int, int]]) -> ClosedLoop:
    """Stack the plant and every vehicle's observer into one linear update.

    K, N, M are per-vehicle lists (0-indexed); L maps 1-based channel pairs
    (receiver, sender) to observer injection gains. Channels outside H
    contribute zero blocks.
    """
    kappa = system.kappa
    p = system.p
    obs_dims = [N[i].shape[0] for i in range(kappa)]
    for i in range(kappa):
        if M[i].shape != (obs_dims[i], obs_dims[i]):
            raise AssemblyError(f"M for vehicle {i + 1} has shape {M[i].shape}")
        if K[i].shape != (1, obs_dims[i]):
            raise AssemblyError(f"K for vehicle {i + 1} has shape {K[i].shape}")
    m_dims = [system.C[j].shape[0] for j in range(kappa)]
    total_obs = sum(obs_dims)
    total_m = sum(m_dims)

    A_bar = np.zeros((p + total_obs, p + total_obs))
    A_bar[:p, :p] = system.A
    col = p
    for j in range(kappa):
        A_bar[:p, col:col + obs_dims[j]] = system.B[j] @ K[j]
        col += obs_dims[j]
    row = p
    for i in range(kappa):
        acc = np.zeros((obs_dims[i], p))
        for j in range(kappa):
            if (i + 1, j + 1) in H:
                Lij = L[(i + 1, j + 1)]
                if Lij.shape != (obs_dims[i], m_dims[j]):
                    raise AssemblyError(
                        f"L for channel ({i + 1},{j + 1}) has shape {Lij.shape},"
                        f" expected {(obs_dims[i], m_dims[j])}")
                acc -= Lij @ system.C[j]
        A_bar[row:row + obs_dims[i], :p] = acc
        A_bar[row:row + obs_dims[i], p + sum(obs_dims[:i]):p + sum(obs_dims[:i + 1])] = M[i]
        row += obs_dims[i]

    B_bar = np.zeros((p + total_obs, kappa))
    for j in range(kappa):
        B_bar[:p, j:j + 1] = system.B[j]
        r0 = p + sum(obs_dims[:j])
        B_bar[r0:r0 + obs_dims[j], j:j + 1] = N[j] @ system.B[j]

    L_bar = np.zeros((p + total_obs, kappa * total_m))
    for i in range(kappa):
        r0 = p + sum(obs_dims[:i])
        c0 = i * total_m
        for j in range(kappa):
            if (i + 1, j + 1) in H:
                off = c0 + sum(m_dims[:j])
                L_bar[r0:r0 + obs_dims[i], off:off + m_dims[j]] = L[(i + 1, j + 1)]
    return ClosedLoop(A_bar=A_bar, B_bar=B_bar, L_bar=L_bar, p=p,
                      obs_dims=obs_dims)


def correlation_condition(channel: tuple[int, int], rho: int,
                          A_bars: list[np.ndarray], B_bar: np.ndarray,
                          W: np.ndarray, C_j: np.ndarray,
                          obs_dims: list[int]) -> np.ndarray:
    """Watermark-to-measurement propagation matrix for a channel at delay rho.

    Returns [W C_j | 0] A(n-1) ... A(n-rho) B(n-rho-1) restricted to the
    watermark column of the channel's receiving vehicle. A nonzero result
    guarantees the delayed watermark is correlated with the communicated
    common-state information.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if len(A_bars) < rho:
        raise ValueError(f"need {rho} closed-loop matrices, got {len(A_bars)}")
    i, _ = channel
    t = sum(obs_dims)
    row = np.hstack([W @ C_j, np.zeros((W.shape[0], t))])
    for k in range(rho):
        row = row @ A_bars[k]
    return row @ B_bar[:, i - 1:i]


def select_rho(channel: tuple[int, int], A_bar: np.ndarray,
               B_bar: np.ndarray, W: np.ndarray, C_j: np.ndarray,
               obs_dims: list[int], rho_max: int = 5,
               tol: float = 1e-12) -> int:
    """Pick the delay with the strongest propagation at a frozen reference.

    Evaluates the condition matrix for rho in 0..rho_max with the closed
    loop held constant and returns the Frobenius-norm maximizer.
    """
    if rho_max < 0:
        raise ValueError("rho_max must be nonnegative")
    norms = []
    for rho in range(rho_max + 1):
        cond = correlation_condition(channel, rho, [A_bar] * rho, B_bar,
                                     W, C_j, obs_dims)
        norms.append(float(np.linalg.norm(cond)))
    best = int(np.argmax(norms))
    if norms[best] <= tol:
        raise NoPropagationError(
            f"watermark of vehicle {channel[0]} never reaches channel {channel}"
            f" within {rho_max} steps")
    return best


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))
