"""Closed-track construction and high-resolution reference trajectories.

A track is an ordered waypoint loop whose corners are rounded by circular
fillets, giving a C1 arclength-parameterized path. The reference trajectory
samples that path at 5 ms resolution for every vehicle: the leader follows
an acceleration-limited speed profile and each follower's reference is the
leader's delayed along the path by the commanded spacing. Reference inputs
(desired speed and steering) are recovered by inverting the plant model, so
tracking the tabulated references is an exact equilibrium of the simulator.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, replace

import numpy as np

from .constants import (
    DEFAULT_CONSTANTS,
    DynamicsConstants,
    HEADWAY_TIME,
    HIRES_DT,
    VEHICLE_LENGTH,
)

SPEED_TARGET_RANGE = (1.0, 20.0)


class GeometryError(ValueError):
    """Track waypoints/fillets do not form a valid closed loop."""


class InfeasibleTrackError(ValueError):
    """The plant model cannot follow the requested speed profile."""


@dataclass(frozen=True)
class TrackSpec:
    """Closed waypoint loop with per-segment speed targets.

    waypoints: (n, 2) array whose last row repeats the first (the loop must
    end where it begins). speeds: target speed for the segment leaving each
    waypoint, length n-1. corner_radius: fillet radius applied at every
    interior corner.
    """

    waypoints: np.ndarray
    speeds: np.ndarray
    corner_radius: float = 25.0
    closed: bool = True
    laps: int = 3

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        sp = np.asarray(self.speeds, dtype=float)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "speeds", sp)
        if not self.closed:
            raise GeometryError("only closed tracks are supported")
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 4:
            raise GeometryError("a closed track needs at least 4 waypoints")
        if not np.allclose(wp[0], wp[-1]):
            raise GeometryError("closed track must end where it begins")
        if sp.shape[0] != wp.shape[0] - 1:
            raise GeometryError("need one speed target per segment")
        lo, hi = SPEED_TARGET_RANGE
        if sp.min() < lo or sp.max() > hi:
            raise GeometryError(f"speed targets must lie in [{lo}, {hi}] m/s")
        if self.corner_radius <= 0:
            raise GeometryError("corner radius must be positive")


def default_track_spec(laps: int = 3) -> TrackSpec:
    """Stadium-style rounded rectangle, ~440 m per lap, speeds 6..13 m/s."""
    straight = 175.0
    width = 80.0
    wp = np.array([
        [0.0, 0.0],
        [straight, 0.0],
        [straight, width],
        [0.0, width],
        [0.0, 0.0],
    ])
    speeds = np.array([13.0, 6.0, 11.0, 6.0])
    return TrackSpec(waypoints=wp, speeds=speeds, corner_radius=width / 2 - 0.5,
                     laps=laps)


@dataclass
class TrackPath:
    """Arclength-parameterized closed path of line and arc pieces."""

    piece_kind: np.ndarray       # 0 = line, 1 = arc
    piece_s0: np.ndarray         # start arclength of each piece
    piece_len: np.ndarray
    piece_data: np.ndarray       # line: x0,y0,hdg,0 ; arc: cx,cy,hdg0,signed 1/r
    piece_speed: np.ndarray      # speed target while on the piece
    length: float

    def sample(self, s):
        """Position, heading and signed curvature at arclength(s) (mod lap)."""
        s = np.mod(np.asarray(s, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self.piece_s0, s, side="right") - 1,
                      0, len(self.piece_s0) - 1)
        ds = s - self.piece_s0[idx]
        data = self.piece_data[idx]
        kind = self.piece_kind[idx]
        x = np.empty_like(s)
        y = np.empty_like(s)
        hdg = np.empty_like(s)
        curv = np.zeros_like(s)

        line = kind == 0
        x[line] = data[line, 0] + ds[line] * np.cos(data[line, 2])
        y[line] = data[line, 1] + ds[line] * np.sin(data[line, 2])
        hdg[line] = data[line, 2]

        arc = ~line
        k = data[arc, 3]
        theta0 = data[arc, 2]
        theta = theta0 + k * ds[arc]
        r = 1.0 / k
        x[arc] = data[arc, 0] + r * np.sin(theta)
        y[arc] = data[arc, 1] - r * np.cos(theta)
        hdg[arc] = theta
        curv[arc] = k
        return x, y, _wrap(hdg), curv

    def speed_target(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self.piece_s0, s, side="right") - 1,
                      0, len(self.piece_s0) - 1)
        return self.piece_speed[idx]


def _wrap(a):
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def build_track(spec: TrackSpec) -> TrackPath:
    """Round every waypoint corner with a circular fillet.

    Each corner keeps the two adjoining segments tangent to one arc of the
    configured radius; fillets that would overlap on a segment raise a
    geometry error.
    """
    wp = spec.waypoints[:-1]
    n = len(wp)
    r = spec.corner_radius
    seg_vec = np.roll(wp, -1, axis=0) - wp               # segment i: wp i -> i+1
    seg_len = np.linalg.norm(seg_vec, axis=1)
    if np.any(seg_len < 1e-9):
        raise GeometryError("repeated waypoints")
    seg_dir = seg_vec / seg_len[:, None]

    # Corner k joins segment k-1 into segment k.
    turn = np.zeros(n)
    tangent_cut = np.zeros(n)
    for k in range(n):
        d_in = seg_dir[k - 1]
        d_out = seg_dir[k]
        cross = d_in[0] * d_out[1] - d_in[1] * d_out[0]
        dot = float(np.clip(np.dot(d_in, d_out), -1.0, 1.0))
        turn[k] = np.arctan2(cross, dot)
        if abs(turn[k]) > 1e-12:
            tangent_cut[k] = r * np.tan(abs(turn[k]) / 2.0)
    for k in range(n):
        if tangent_cut[k] + tangent_cut[(k + 1) % n] > seg_len[k] + 1e-9:
            raise GeometryError(
                f"fillets of radius {r} overlap on segment {k}")

    kinds, s0s, lens, datas, speeds = [], [], [], [], []
    s = 0.0
    for k in range(n):
        # straight part of segment k, from corner k's arc end to corner k+1's
        # arc start
        start = wp[k] + seg_dir[k] * tangent_cut[k]
        straight = seg_len[k] - tangent_cut[k] - tangent_cut[(k + 1) % n]
        hdg = float(np.arctan2(seg_dir[k][1], seg_dir[k][0]))
        if straight > 1e-9:
            kinds.append(0)
            s0s.append(s)
            lens.append(straight)
            datas.append([start[0], start[1], hdg, 0.0])
            speeds.append(spec.speeds[k])
            s += straight
        kn = (k + 1) % n
        if abs(turn[kn]) > 1e-12:
            # arc at corner k+1
            entry = wp[kn] - seg_dir[k] * tangent_cut[kn]
            sign = np.sign(turn[kn])
            kcurv = sign / r
            normal = sign * np.array([-seg_dir[k][1], seg_dir[k][0]])
            center = entry + r * normal
            arc_len = r * abs(turn[kn])
            kinds.append(1)
            s0s.append(s)
            lens.append(arc_len)
            datas.append([center[0], center[1], hdg, kcurv])
            speeds.append(min(spec.speeds[k], spec.speeds[kn]))
            s += arc_len
    return TrackPath(
        piece_kind=np.array(kinds, dtype=int),
        piece_s0=np.array(s0s, dtype=float),
        piece_len=np.array(lens, dtype=float),
        piece_data=np.array(datas, dtype=float),
        piece_speed=np.array(speeds, dtype=float),
        length=float(s),
    )


@dataclass
class SpeedProfile:
    """Acceleration-limited periodic speed profile over one lap.

    Piecewise constant acceleration: v^2 is linear in arclength on each grid
    cell, so position samples are exactly quadratic in time inside a cell.
    """

    s_grid: np.ndarray
    v_grid: np.ndarray
    t_grid: np.ndarray           # time to reach each grid point from s=0
    lap_time: float

    def state_at_time(self, t):
        """Unwrapped arclength, speed and acceleration at time(s) t."""
        t = np.asarray(t, dtype=float)
        lap, tau = np.divmod(t, self.lap_time)
        idx = np.clip(np.searchsorted(self.t_grid, tau, side="right") - 1,
                      0, len(self.t_grid) - 2)
        v0 = self.v_grid[idx]
        v1 = self.v_grid[idx + 1]
        ds = self.s_grid[idx + 1] - self.s_grid[idx]
        a = (v1 * v1 - v0 * v0) / (2.0 * ds)
        dt_in = tau - self.t_grid[idx]
        s = self.s_grid[idx] + v0 * dt_in + 0.5 * a * dt_in * dt_in
        v = v0 + a * dt_in
        lap_len = self.s_grid[-1]
        return lap * lap_len + s, v, a


def build_speed_profile(path: TrackPath, a_max: float = 0.8,
                        ds: float = 0.5) -> SpeedProfile:
    """Limit the piecewise speed targets to the acceleration budget.

    Forward/backward passes in squared-speed space, run cyclically so the
    lap seam is as smooth as any interior point.
    """
    n = max(8, int(np.ceil(path.length / ds)))
    s_grid = np.linspace(0.0, path.length, n + 1)
    target = path.speed_target(0.5 * (s_grid[:-1] + s_grid[1:]))
    target = np.append(target, target[0])
    v2 = np.minimum(target, np.roll(target, 1)) ** 2
    step = np.diff(s_grid)
    for _ in range(3):           # cyclic passes until periodic fixed point
        for i in range(n):
            v2[i + 1] = min(v2[i + 1], v2[i] + 2 * a_max * step[i])
        v2[0] = v2[-1]
        for i in range(n - 1, -1, -1):
            v2[i] = min(v2[i], v2[i + 1] + 2 * a_max * step[i])
        v2[-1] = v2[0]
    v_grid = np.sqrt(v2)
    # cell times: constant acceleration, v linear in t
    vmid = 0.5 * (v_grid[:-1] + v_grid[1:])
    cell_t = step / vmid
    t_grid = np.concatenate(([0.0], np.cumsum(cell_t)))
    return SpeedProfile(s_grid=s_grid, v_grid=v_grid, t_grid=t_grid,
                        lap_time=float(t_grid[-1]))


@dataclass
class PlatoonTrajectory:
    """Per-index, per-vehicle reference tuples on the hi-res grid.

    Arrays are (n_index, kappa) except the gap table D which is
    (n_index, kappa - 1); S holds each vehicle's unwrapped reference
    arclength. Spacing is either a constant center-to-center distance or a
    constant bumper time headway.
    """

    dt_hi: float
    kappa: int
    laps: int
    lap_length: float
    lap_time: float
    spacing_mode: str            # "distance" or "headway"
    spacing_value: float
    vehicle_length: float
    X: np.ndarray
    Y: np.ndarray
    PSI: np.ndarray
    V: np.ndarray
    VD: np.ndarray
    DELTA: np.ndarray
    S: np.ndarray
    D: np.ndarray

    @property
    def n_index(self) -> int:
        return self.X.shape[0]

    def d_lead(self, k) -> np.ndarray:
        """Reference distance from the leader to each vehicle at index k."""
        gaps = self.D[k]
        return np.concatenate(([0.0], np.cumsum(gaps)))

    def control_steps(self, margin: int = 25) -> int:
        """Largest safe number of 50 ms control steps on this table."""
        from .constants import HIRES_PER_STEP
        return (self.n_index - 1) // HIRES_PER_STEP - margin


def desired_speed_offset(v_bar, accel,
                         constants: DynamicsConstants = DEFAULT_CONSTANTS):
    """Solve the drivetrain model for (v - v_d) producing a given accel.

    Picks the quadratic root nearer zero; raises if the requested
    deceleration exceeds what the model can produce.
    """
    c = constants
    accel = np.asarray(accel, dtype=float)
    disc = c.c6 * c.c6 - 4.0 * c.c7 * (c.c5 - accel)
    if np.any(disc < 0):
        raise InfeasibleTrackError(
            "speed profile demands more deceleration than the model allows")
    root = (-c.c6 - np.sqrt(disc)) / (2.0 * c.c7)
    return root


def steering_for_curvature(curvature, v_bar,
                           constants: DynamicsConstants = DEFAULT_CONSTANTS):
    """Invert the yaw-rate row for the steering command tracking a curvature."""
    c = constants
    arg = np.asarray(curvature, dtype=float) * c.yaw_denominator(
        np.asarray(v_bar, dtype=float))
    return (np.arctan(arg) - c.c2) / c.c1


def generate_high_res(path: TrackPath, kappa: int,
                      spacing: float = 1.0, dt_hi: float = HIRES_DT,
                      laps: int = 3, a_max: float = 0.8,
                      vehicle_length: float = VEHICLE_LENGTH,
                      constants: DynamicsConstants = DEFAULT_CONSTANTS,
                      ) -> PlatoonTrajectory:
    """Tabulate reference tuples for every vehicle at 5 ms resolution.

    The leader runs the acceleration-limited profile; follower references
    trail it along the path by the constant center-to-center spacing, with
    all speeds synchronized in time so the reference gaps are exactly
    constant. Desired speed inverts the drivetrain row against the centered
    finite-difference acceleration of the sampled speeds; steering inverts
    the yaw row against the local path curvature.
    """
    if spacing <= vehicle_length:
        raise GeometryError("spacing must exceed the vehicle length")
    profile = build_speed_profile(path, a_max=a_max)
    n_index = int(np.floor(laps * profile.lap_time / dt_hi)) + 1
    t = np.arange(n_index) * dt_hi
    s_lead, v_bar, _ = profile.state_at_time(t)

    # centered-difference acceleration keeps the sampled tuples consistent
    # with numerical differentiation of the table itself
    accel = np.gradient(v_bar, dt_hi)
    offset = desired_speed_offset(v_bar, accel, constants)
    v_d_bar = v_bar - offset

    X = np.empty((n_index, kappa))
    Y = np.empty_like(X)
    PSI = np.empty_like(X)
    DELTA = np.empty_like(X)
    S = np.empty_like(X)
    D = np.full((n_index, kappa - 1), float(spacing))
    for i in range(kappa):
        s_i = s_lead - i * spacing
        x, y, hdg, curv = path.sample(s_i)
        X[:, i] = x
        Y[:, i] = y
        PSI[:, i] = hdg
        S[:, i] = s_i
        DELTA[:, i] = steering_for_curvature(curv, v_bar, constants)
    V = np.tile(v_bar[:, None], (1, kappa))
    VD = np.tile(v_d_bar[:, None], (1, kappa))
    return PlatoonTrajectory(
        dt_hi=dt_hi, kappa=kappa, laps=laps, lap_length=path.length,
        lap_time=profile.lap_time, spacing_mode="distance",
        spacing_value=float(spacing), vehicle_length=vehicle_length,
        X=X, Y=Y, PSI=PSI, V=V, VD=VD, DELTA=DELTA, S=S, D=D)


def build_headway_reference(traj: PlatoonTrajectory,
                            headway: float = HEADWAY_TIME,
                            length: float | None = None) -> PlatoonTrajectory:
    """Constant-headway gap table for the non-communicative controller.

    Keeps the path and speed profile; only the reference gaps change to
    follower-speed * headway plus the vehicle length (bumper headway).
    The leader's reference is untouched.
    """
    if traj.spacing_mode != "distance":
        raise ValueError("headway table derives from a constant-distance table")
    if length is None:
        length = traj.vehicle_length
    D = headway * traj.V[:, 1:] + length
    return replace(traj, D=D, spacing_mode="headway",
                   spacing_value=float(headway))


@dataclass
class TrajectoryCursor:
    """Per-vehicle memory of the last matched hi-res index."""

    h: np.ndarray
    window: int = 200

    @classmethod
    def start(cls, kappa: int, window: int = 200) -> "TrajectoryCursor":
        return cls(h=np.zeros(kappa, dtype=int), window=window)


def closest_index(traj: PlatoonTrajectory, position, vehicle: int,
                  cursor: TrajectoryCursor) -> int:
    """Nearest reference index to a position, searched around the cursor.

    Ties break toward the larger index. The search window is clipped to the
    table; the table spans all laps so no modular wrap is needed mid-run.
    """
    h = int(cursor.h[vehicle])
    lo = max(0, h - cursor.window)
    hi = min(traj.n_index, h + cursor.window + 1)
    if hi <= lo:
        raise RuntimeError("empty search window")
    dx = traj.X[lo:hi, vehicle] - position[0]
    dy = traj.Y[lo:hi, vehicle] - position[1]
    d2 = dx * dx + dy * dy
    k = lo + (len(d2) - 1 - int(np.argmin(d2[::-1])))
    cursor.h[vehicle] = k
    return k


def project_arclength(traj: PlatoonTrajectory, vehicle: int, position,
                      k: int) -> float:
    """Unwrapped path arclength of a position near reference index k."""
    tx = np.cos(traj.PSI[k, vehicle])
    ty = np.sin(traj.PSI[k, vehicle])
    return float(traj.S[k, vehicle]
                 + tx * (position[0] - traj.X[k, vehicle])
                 + ty * (position[1] - traj.Y[k, vehicle]))


def trajectory_hash(traj: PlatoonTrajectory) -> str:
    """Stable digest binding calibration tables to a trajectory."""
    h = hashlib.sha256()
    h.update(f"{traj.dt_hi!r}|{traj.kappa}|{traj.laps}|{traj.spacing_mode}|"
             f"{traj.spacing_value!r}|{traj.vehicle_length!r}".encode())
    for arr in (traj.X, traj.Y, traj.PSI, traj.V, traj.VD, traj.DELTA,
                traj.S, traj.D):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


_COLUMNS = "index vehicle x y psi v v_d delta s d_prev"


def save_trajectory(traj: PlatoonTrajectory, path) -> None:
    """Columned text dump; floats printed with 17 significant digits so a
    reload is bit-exact."""
    with open(path, "w") as fh:
        fh.write("# platoonwm trajectory v1\n")
        fh.write(f"# dt_hi={traj.dt_hi!r} kappa={traj.kappa} laps={traj.laps}\n")
        fh.write(f"# lap_length={traj.lap_length!r} lap_time={traj.lap_time!r}\n")
        fh.write(f"# spacing_mode={traj.spacing_mode}"
                 f" spacing_value={traj.spacing_value!r}"
                 f" vehicle_length={traj.vehicle_length!r}\n")
        fh.write(f"# columns: {_COLUMNS}\n")
        buf = io.StringIO()
        for k in range(traj.n_index):
            for i in range(traj.kappa):
                d_prev = traj.D[k, i - 1] if i >= 1 else 0.0
                buf.write(
                    f"{k} {i} {traj.X[k, i]:.17g} {traj.Y[k, i]:.17g} "
                    f"{traj.PSI[k, i]:.17g} {traj.V[k, i]:.17g} "
                    f"{traj.VD[k, i]:.17g} {traj.DELTA[k, i]:.17g} "
                    f"{traj.S[k, i]:.17g} {d_prev:.17g}\n")
        fh.write(buf.getvalue())


def load_trajectory(path) -> PlatoonTrajectory:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            for tok in line[1:].split():
                if "=" in tok:
                    key, val = tok.split("=", 1)
                    meta[key] = val
    dt_hi = float(meta["dt_hi"])
    kappa = int(meta["kappa"])
    data = np.loadtxt(path, comments="#")
    n_index = int(data[:, 0].max()) + 1
    shape = (n_index, kappa)
    X = np.empty(shape)
    Y = np.empty(shape)
    PSI = np.empty(shape)
    V = np.empty(shape)
    VD = np.empty(shape)
    DELTA = np.empty(shape)
    S = np.empty(shape)
    D = np.empty((n_index, kappa - 1))
    k = data[:, 0].astype(int)
    i = data[:, 1].astype(int)
    X[k, i] = data[:, 2]
    Y[k, i] = data[:, 3]
    PSI[k, i] = data[:, 4]
    V[k, i] = data[:, 5]
    VD[k, i] = data[:, 6]
    DELTA[k, i] = data[:, 7]
    S[k, i] = data[:, 8]
    follower = i >= 1
    D[k[follower], i[follower] - 1] = data[follower, 9]
    return PlatoonTrajectory(
        dt_hi=dt_hi, kappa=kappa, laps=int(meta["laps"]),
        lap_length=float(meta["lap_length"]), lap_time=float(meta["lap_time"]),
        spacing_mode=meta["spacing_mode"],
        spacing_value=float(meta["spacing_value"]),
        vehicle_length=float(meta["vehicle_length"]),
        X=X, Y=Y, PSI=PSI, V=V, VD=VD, DELTA=DELTA, S=S, D=D)
