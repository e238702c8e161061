"""Longitudinal controllers/observers for the three communication levels.

Level 3 is fully connected (every vehicle estimates the whole platoon
state), level 2 uses leader + neighbour links with small functional
observers, and level 1 is the non-communicative constant-headway fallback
engaged after an attack is detected. The lateral lane-keeping controller and
observer run identically at every level.

Vehicle and channel indices are 1-based to match the platoon layout; state
symbols are ('d', j) for gap j, ('dl', i) for distance-to-leader of vehicle
i, and ('v', j) for speed j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ltv
from .constants import DEFAULT_CONSTANTS, DynamicsConstants

LATERAL_GAINS = np.array([-0.25, -1.0])
LATERAL_OBSERVER_GAIN_HEADING = 0.2
LATERAL_OBSERVER_GAIN_LAT = 0.3


class SingularGainError(ZeroDivisionError):
    """Level-2 gain normalization hit a zero drivetrain slope."""


class StaleMessageError(RuntimeError):
    """An observer update is missing a message from an active channel."""


def gain_level3(kappa: int, i: int) -> np.ndarray:
    """Fully-connected gain row over [gaps, speeds].

    Gap gains are +-0.5 and speed gains +-0.1, halving per vehicle of
    separation, positive for gaps/speeds ahead of vehicle i and negative
    from its own position rearward.
    """
    if kappa < 2:
        raise ValueError("need at least two vehicles")
    K = np.zeros(2 * kappa - 1)
    for j in range(1, kappa):            # gap j
        K[j - 1] = 0.5 / 2 ** (i - j) if j < i else -0.5 / 2 ** (j - i)
    for j in range(1, kappa + 1):        # speed j
        K[kappa - 1 + j - 1] = 0.1 / 2 ** (i - j) if j < i else -0.1 / 2 ** (j - i)
    return K.reshape(1, -1)


_LEVEL2_ROWS = {
    "leader": np.array([0.0, -2.92, 0.0]),
    "second": np.array([1.32, 0.0, 2.92, -2.92, 0.0]),
    "last": np.array([0.72, 0.6, 1.32, 1.6, -2.92]),
    "middle": np.array([0.72, 0.6, 0.0, 1.32, 1.6, -2.92, 0.0]),
}


def _level2_case(kappa: int, i: int) -> str:
    if i == 1:
        return "leader"
    if i == kappa:
        return "last"
    if i == 2:
        return "second"
    return "middle"


def gain_level2(kappa: int, i: int, v_bar: float, v_d_bar: float,
                constants: DynamicsConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Leader-and-neighbour gain row, rescaled from desired acceleration to
    desired velocity through the local drivetrain slope."""
    denom = -1.2 * (constants.c6 + 2.0 * constants.c7 * (v_bar - v_d_bar))
    if abs(denom) < 1e-12:
        raise SingularGainError(
            f"drivetrain slope vanishes at v={v_bar}, v_d={v_d_bar}")
    return (_LEVEL2_ROWS[_level2_case(kappa, i)] / denom).reshape(1, -1)


def gain_level1(kappa: int, i: int) -> np.ndarray:
    """Constant-headway cruise gains on [gap, lead speed, own speed]."""
    if i == 1:
        return np.array([[-1.0]])
    return np.array([[1.0, 1.2, -1.2]])


def observed_state_symbols(level: int, kappa: int, i: int) -> list[tuple]:
    """Symbols of the platoon state tracked by vehicle i's observer."""
    def dl(n):                       # distance-to-leader, gap 1 when n == 2
        return ("d", 1) if n == 2 else ("dl", n)

    if level == 3:
        return ([("d", j) for j in range(1, kappa)]
                + [("v", j) for j in range(1, kappa + 1)])
    if level == 2:
        case = _level2_case(kappa, i)
        if case == "leader":
            return [("d", 1), ("v", 1), ("v", 2)]
        if case == "second":
            return [("d", 1), ("d", 2), ("v", 1), ("v", 2), ("v", 3)]
        if case == "last":
            return [dl(kappa), ("d", kappa - 1), ("v", 1),
                    ("v", kappa - 1), ("v", kappa)]
        return [dl(i), ("d", i - 1), ("d", i), ("v", 1),
                ("v", i - 1), ("v", i), ("v", i + 1)]
    if level == 1:
        if i == 1:
            return [("v", 1)]
        return [("d", i - 1), ("v", i - 1), ("v", i)]
    raise ValueError(f"unknown level {level}")


def measurement_symbols(level: int, kappa: int, j: int) -> list[tuple]:
    """Symbols carried by vehicle j's transmitted measurement."""
    if j == 1:
        if level == 2:
            syms = [("d", 1) if n == 2 else ("dl", n)
                    for n in range(2, kappa + 1)]
            return syms + [("v", 1)]
        return [("v", 1)]
    return [("d", j - 1), ("v", j)]


def selector_matrix(symbols: list[tuple], kappa: int) -> np.ndarray:
    """Rows picking (or summing, for distance-to-leader) state components."""
    p = 2 * kappa - 1
    N = np.zeros((len(symbols), p))
    for r, (kind, idx) in enumerate(symbols):
        if kind == "d":
            N[r, idx - 1] = 1.0
        elif kind == "v":
            N[r, kappa - 1 + idx - 1] = 1.0
        elif kind == "dl":
            N[r, : idx - 1] = 1.0
        else:
            raise ValueError(f"unknown symbol {kind}")
    return N


def residual_maps(level: int, kappa: int, i: int, j: int):
    """(U, W) selecting the state information shared by observer i and
    sender j, so that U N_i = W C_j holds by construction."""
    obs = observed_state_symbols(level, kappa, i)
    meas = measurement_symbols(level, kappa, j)
    common = [sym for sym in meas if sym in obs]
    if not common:
        raise ValueError(f"channel ({i},{j}) shares no state at level {level}")
    U = np.zeros((len(common), len(obs)))
    W = np.zeros((len(common), len(meas)))
    for r, sym in enumerate(common):
        U[r, obs.index(sym)] = 1.0
        W[r, meas.index(sym)] = 1.0
    return U, W


def _level3_L(kappa: int, j: int) -> np.ndarray:
    p = 2 * kappa - 1
    ng = kappa - 1
    if j == 1:
        L = np.zeros((p, 1))
        L[0, 0] = -0.05
        L[ng, 0] = -0.1
        return L
    L = np.zeros((p, 2))
    L[j - 2, 0] = -0.5
    L[j - 2, 1] = 0.05
    if j < kappa:
        L[j - 1, 1] = -0.05
    L[ng + j - 1, 1] = -0.1
    return L


def _level2_L(kappa: int, i: int, j: int) -> np.ndarray:
    """Observer injection gains of the leader-and-neighbour scheme.

    The printed table's last-vehicle leader-channel speed entry is applied
    with the stable sign used by every other block.
    """
    case = _level2_case(kappa, i)
    if case == "leader":
        if j == 1:
            L = np.zeros((3, kappa))
            L[0, kappa - 1] = -0.05
            L[1, kappa - 1] = -0.1
        else:                          # j == 2
            L = np.zeros((3, 2))
            L[0, 0] = -0.5
            L[0, 1] = 0.05
            L[2, 1] = -0.1
        return L
    if case == "second":
        if j == 1:
            L = np.zeros((5, kappa))
            L[0, 0] = -0.25
            L[0, kappa - 1] = -0.05
            L[2, kappa - 1] = -0.1
        elif j == 2:
            L = np.zeros((5, 2))
            L[0, 0] = -0.25
            L[0, 1] = 0.05
            L[1, 1] = -0.05
            L[3, 1] = -0.1
        else:                          # j == 3
            L = np.zeros((5, 2))
            L[1, 0] = -0.5
            L[1, 1] = 0.05
            L[4, 1] = -0.1
        return L
    if case == "last":
        if j == 1:
            L = np.zeros((5, kappa))
            L[0, kappa - 2] = -0.5
            L[0, kappa - 1] = -0.05
            L[2, kappa - 1] = -0.1
        elif j == kappa - 1:
            L = np.zeros((5, 2))
            L[1, 1] = -0.05
            L[3, 1] = -0.1
        else:                          # j == kappa (self)
            L = np.zeros((5, 2))
            L[1, 0] = -0.5
            L[0, 1] = 0.05
            L[1, 1] = 0.05
            L[4, 1] = -0.1
        return L
    # middle receiver
    if j == 1:
        L = np.zeros((7, kappa))
        L[0, i - 2] = -0.5
        L[0, kappa - 1] = -0.05
        L[3, kappa - 1] = -0.1
    elif j == i - 1:
        L = np.zeros((7, 2))
        L[1, 1] = -0.05
        L[4, 1] = -0.1
    elif j == i:
        L = np.zeros((7, 2))
        L[1, 0] = -0.5
        L[0, 1] = 0.05
        L[1, 1] = 0.05
        L[2, 1] = -0.05
        L[5, 1] = -0.1
    else:                              # j == i + 1
        L = np.zeros((7, 2))
        L[2, 0] = -0.5
        L[2, 1] = 0.05
        L[6, 1] = -0.1
    return L


def _level1_L(i: int) -> np.ndarray:
    if i == 1:
        return np.array([[-0.1]])
    return np.array([[-0.5, 0.05], [-1.2, 0.0], [0.0, -0.1]])


def _level2_M_case(kappa: int, i: int, co: ltv.LongitudinalCoeffs) -> np.ndarray:
    sig, th = co.sigma_obs, co.theta

    def s(j):
        return sig[j - 1]

    def t(j):
        return th[j - 1]

    case = _level2_case(kappa, i)
    if case == "leader":
        return np.array([[0.5, s(1), -s(2)],
                         [0.0, t(1), 0.0],
                         [0.0, 0.0, t(2)]])
    if case == "second":
        return np.array([[0.5, 0.0, s(1), -s(2), 0.0],
                         [0.0, 0.5, 0.0, s(2), -s(3)],
                         [0.0, 0.0, t(1), 0.0, 0.0],
                         [0.0, 0.0, 0.0, t(2), 0.0],
                         [0.0, 0.0, 0.0, 0.0, t(3)]])
    if case == "last":
        return np.array([[0.5, 0.0, s(1), 0.0, -s(kappa)],
                         [0.0, 0.5, 0.0, s(kappa - 1), -s(kappa)],
                         [0.0, 0.0, t(1), 0.0, 0.0],
                         [0.0, 0.0, 0.0, t(kappa - 1), 0.0],
                         [0.0, 0.0, 0.0, 0.0, t(kappa)]])
    M = np.zeros((7, 7))
    M[0, 0] = M[1, 1] = M[2, 2] = 0.5
    M[0, 3], M[0, 5] = s(1), -s(i)
    M[1, 4], M[1, 5] = s(i - 1), -s(i)
    M[2, 5], M[2, 6] = s(i), -s(i + 1)
    M[3, 3], M[4, 4], M[5, 5], M[6, 6] = t(1), t(i - 1), t(i), t(i + 1)
    return M


def _level1_M_case(i: int, co: ltv.LongitudinalCoeffs) -> np.ndarray:
    if i == 1:
        return np.array([[co.theta[0]]])
    return np.array([
        [0.5, co.bratio[i - 2], -co.sigma_obs[i - 1]],
        [-1.2, co.beta[i - 2], 0.0],
        [0.0, 0.0, co.theta[i - 1]],
    ])


@dataclass
class StepMatrices:
    """Per-step observer/controller matrices for one vehicle."""

    K: np.ndarray
    M: np.ndarray
    NB: np.ndarray                 # N_i B_i column
    L: dict[int, np.ndarray]       # sender -> injection gain


class ControllerBank:
    """Per-level gains, observer maps and residual selectors for a platoon.

    Constant pieces (N, U, W, level-2/3 injection gains, level-3 gain rows)
    are precomputed; `vehicle_step` assembles the reference-dependent
    matrices for one vehicle at its current reference point.
    """

    def __init__(self, level: int, kappa: int, H: set[tuple[int, int]],
                 constants: DynamicsConstants = DEFAULT_CONSTANTS):
        if level not in (1, 2, 3):
            raise ValueError(f"unknown level {level}")
        self.level = level
        self.kappa = kappa
        self.H = set(H)
        self.constants = constants
        self.N = [selector_matrix(observed_state_symbols(level, kappa, i), kappa)
                  for i in range(1, kappa + 1)]
        self.obs_dims = [n.shape[0] for n in self.N]
        self.C = [ltv.measurement_matrix(level, kappa, j)
                  for j in range(1, kappa + 1)]
        self.U = {}
        self.W = {}
        if level != 1:
            for (i, j) in sorted(self.H):
                U, W = residual_maps(level, kappa, i, j)
                if not np.array_equal(U @ self.N[i - 1], W @ self.C[j - 1]):
                    raise AssertionError(
                        f"residual maps inconsistent on channel ({i},{j})")
                self.U[(i, j)] = U
                self.W[(i, j)] = W
        self.senders = {i: sorted(j for (r, j) in self.H if r == i)
                        for i in range(1, kappa + 1)}
        if level == 3:
            self._K3 = np.vstack([gain_level3(kappa, i)
                                  for i in range(1, kappa + 1)])
            self._L3 = [_level3_L(kappa, j) for j in range(1, kappa + 1)]
            self._LC3 = sum(self._L3[j] @ self.C[j] for j in range(kappa))
        elif level == 2:
            self._L2 = {(i, j): _level2_L(kappa, i, j)
                        for (i, j) in sorted(self.H)}
        else:
            self._K1 = [gain_level1(kappa, i) for i in range(1, kappa + 1)]
            self._L1 = {(i, i): _level1_L(i) for i in range(1, kappa + 1)}

    def vehicle_step(self, i: int, v_bar, v_d_bar) -> StepMatrices:
        """Matrices for vehicle i given the reference speed vectors it read
        from its own closest trajectory index."""
        co = ltv.longitudinal_coeffs(np.asarray(v_bar, float),
                                     np.asarray(v_d_bar, float),
                                     self.constants)
        if self.level == 3:
            A = ltv.build_A(co)
            Bs = ltv.input_matrix(co)
            M = A + Bs @ self._K3 + self._LC3
            K = self._K3[i - 1:i]
            NB = Bs[:, i - 1:i]
            L = {j: self._L3[j - 1] for j in self.senders[i]}
            return StepMatrices(K=K, M=M, NB=NB, L=L)

        NB = self._input_column(i, co)
        if self.level == 2:
            K = gain_level2(self.kappa, i, v_bar[i - 1], v_d_bar[i - 1],
                            self.constants)
            M = NB @ K + _level2_M_case(self.kappa, i, co)
            L = {j: self._L2[(i, j)] for j in self.senders[i]}
            return StepMatrices(K=K, M=M, NB=NB, L=L)
        K = self._K1[i - 1]
        M = NB @ K + _level1_M_case(i, co)
        return StepMatrices(K=K, M=M, NB=NB, L={i: self._L1[(i, i)]})

    def _input_column(self, i: int, co: ltv.LongitudinalCoeffs) -> np.ndarray:
        """N_i B_i without building the full plant matrices."""
        syms = observed_state_symbols(self.level, self.kappa, i)
        col = np.zeros((len(syms), 1))
        sig = co.sigma_obs
        for r, (kind, idx) in enumerate(syms):
            if kind == "d":
                if idx == i - 1:
                    col[r, 0] = sig[i - 1]
                elif idx == i:
                    col[r, 0] = -sig[i - 1]
            elif kind == "dl":
                if i <= idx - 1:       # gap i lies between leader and vehicle idx
                    col[r, 0] = -sig[i - 1]
                if i - 1 >= 1 and i - 1 <= idx - 1:
                    col[r, 0] += sig[i - 1]
            elif kind == "v" and idx == i:
                col[r, 0] = 1.0 - co.beta[i - 1]
        return col

    def frozen(self, v_bar, v_d_bar):
        """(K, N, M, L) lists/dict at one reference point, for closed-loop
        assembly and delay selection."""
        K, M, L = [], [], {}
        for i in range(1, self.kappa + 1):
            sm = self.vehicle_step(i, v_bar, v_d_bar)
            K.append(sm.K)
            M.append(sm.M)
            for j, Lij in sm.L.items():
                L[(i, j)] = Lij
        return K, self.N, M, L


def observer_step(x_hat: np.ndarray, M: np.ndarray, NB: np.ndarray,
                  e: float, received: dict[int, tuple[np.ndarray, np.ndarray]],
                  expected: set[int] | None = None) -> np.ndarray:
    """One functional-observer update.

    received maps sender -> (L, s). Raises StaleMessageError when a sender
    listed in `expected` is missing.
    """
    if expected is not None:
        missing = expected.difference(received)
        if missing:
            raise StaleMessageError(f"missing messages from {sorted(missing)}")
    x_next = M @ x_hat + NB[:, 0] * e
    for L, s in received.values():
        x_next = x_next - L @ s
    return x_next


def control_input(K: np.ndarray, x_hat: np.ndarray, e: float,
                  u_ref: float) -> float:
    """Applied desired velocity: reference plus K x_hat plus watermark."""
    return float(u_ref + K[0] @ x_hat + e)


@dataclass
class LateralEstimate:
    lat: float = 0.0
    heading: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.heading])


def _as_lat_array(estimate) -> np.ndarray:
    if isinstance(estimate, LateralEstimate):
        return estimate.as_array()
    return np.asarray(estimate, dtype=float)


def lateral_control(estimate) -> float:
    """Steering deviation from estimated lateral and heading errors."""
    return float(LATERAL_GAINS @ _as_lat_array(estimate))


def lateral_observer_gain(v_bar: float) -> np.ndarray:
    return np.array([[LATERAL_OBSERVER_GAIN_LAT, v_bar / 20.0],
                     [0.0, LATERAL_OBSERVER_GAIN_HEADING]])


def lateral_observer_step(estimate, v_bar: float, delta_bar: float,
                          d_delta: float, y_lat,
                          constants: DynamicsConstants = DEFAULT_CONSTANTS
                          ) -> np.ndarray:
    """Luenberger update of the lateral/heading error estimate.

    Uses the stable (A - L) x_hat + L y correction; the error dynamics have
    eigenvalues {0.7, 0.8} independent of speed.
    """
    est = _as_lat_array(estimate)
    y = np.asarray(y_lat, dtype=float)
    A_lat, B_lat = ltv.build_lateral(v_bar, delta_bar, constants)
    Lo = lateral_observer_gain(v_bar)
    return (A_lat - Lo) @ est + B_lat[:, 0] * d_delta + Lo @ y


def reformat_estimate(from_level: int, x_hat: np.ndarray, i: int, kappa: int,
                      gap_rebase: float = 0.0) -> np.ndarray:
    """Project a level-3/2 estimate onto the level-1 observed state.

    gap_rebase is (old reference gap - new headway reference gap) at the
    switch index; it converts the stored gap deviation to the new spacing
    policy. The leader keeps only its speed deviation.
    """
    if from_level not in (2, 3):
        raise ValueError("reformat starts from level 3 or level 2")
    syms = observed_state_symbols(from_level, kappa, i)
    if i == 1:
        return np.array([x_hat[syms.index(("v", 1))]])
    out = np.array([
        x_hat[syms.index(("d", i - 1))] + gap_rebase,
        x_hat[syms.index(("v", i - 1))],
        x_hat[syms.index(("v", i))],
    ])
    return out
