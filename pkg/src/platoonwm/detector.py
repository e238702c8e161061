"""Watermark-correlation attack detection.

Per channel, the detector stacks the receiver's delayed watermark with the
measurement residual, whitens the stack with a trajectory-indexed matrix
normalizing factor, collects a sliding window of whitened vectors, corrects
the window's temporal correlation with an auto-correlation normalizing
matrix, and scores the resulting Wishart-distributed outer product by its
negative log likelihood. Exceedances over a calibrated threshold feed a
40-step voting rule that triggers graceful degradation.

Normalizing tables are estimated per high-resolution trajectory node from
un-attacked realizations; nodes decimate the hi-res index by configurable
strides (stride 1 reproduces the per-index estimator exactly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class CalibrationError(RuntimeError):
    """Not enough data to estimate a normalizer or threshold."""


class TablesMismatchError(RuntimeError):
    """Stored tables do not match the trajectory or configuration."""


def residual(U: np.ndarray, W: np.ndarray, x_hat: np.ndarray,
             s: np.ndarray) -> np.ndarray:
    """Measurement residual U x_hat - W s for one channel."""
    return U @ x_hat - W @ s


def inverse_sqrt(mat: np.ndarray, floor: float = 1e-12):
    """Symmetric inverse square root with a relative eigenvalue floor.

    Returns (matrix, floored) where floored reports whether any eigenvalue
    had to be clipped.
    """
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    top = float(vals.max())
    if top <= 0.0:
        raise CalibrationError("matrix has no positive eigenvalues")
    lo = floor * top
    floored = bool(vals.min() < lo)
    vals = np.maximum(vals, lo)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T, floored


def _stable_inverse(mat: np.ndarray, floor: float = 1e-12):
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    top = float(vals.max())
    if top <= 0.0:
        raise CalibrationError("matrix has no positive eigenvalues")
    lo = floor * top
    floored = bool(vals.min() < lo)
    vals = np.maximum(vals, lo)
    return (vecs * (1.0 / vals)) @ vecs.T, floored


def node_of(h, stride: int, n_nodes: int):
    """Nearest decimated-grid node for hi-res index/indices h."""
    node = (np.asarray(h) + stride // 2) // stride
    return np.clip(node, 0, n_nodes - 1).astype(int)


def n_nodes_for(n_index: int, stride: int) -> int:
    return int(node_of(n_index - 1, stride, 1 << 62)) + 1


@dataclass
class NormalizationTables:
    """Per-channel, per-node whitening and auto-correlation tables."""

    level: int
    kappa: int
    ell: int
    n_index: int
    v_stride: int
    g_stride: int
    channels: list[tuple[int, int]]
    dims: dict[tuple[int, int], int]
    rho: dict[tuple[int, int], int]
    trajectory_hash: str
    fa_rate: float | None = None
    V: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    G: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    Ginv: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    f_counts: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    g_counts: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    thresholds: dict[tuple[int, int], float] = field(default_factory=dict)
    flags: dict[str, list] = field(default_factory=dict)

    @property
    def n_vnodes(self) -> int:
        return n_nodes_for(self.n_index, self.v_stride)

    @property
    def n_gnodes(self) -> int:
        return n_nodes_for(self.n_index, self.g_stride)

    def v_node(self, h):
        return node_of(h, self.v_stride, self.n_vnodes)

    def g_node(self, h):
        return node_of(h, self.g_stride, self.n_gnodes)

    def build_inverses(self) -> None:
        for ch, G in self.G.items():
            inv = np.empty_like(G)
            for k in range(G.shape[0]):
                inv[k], _ = _stable_inverse(G[k])
            self.Ginv[ch] = inv


class SampleCovAccumulator:
    """Mergeable per-node sums of stacked watermark/residual outer products."""

    def __init__(self, channels, dims, n_index: int, v_stride: int):
        self.v_stride = v_stride
        self.n_index = n_index
        self.n_nodes = n_nodes_for(n_index, v_stride)
        self.sums = {ch: np.zeros((self.n_nodes, dims[ch], dims[ch]))
                     for ch in channels}
        self.counts = {ch: np.zeros(self.n_nodes, dtype=np.int64)
                       for ch in channels}

    def add_run(self, ch, samples: np.ndarray, h_recv: np.ndarray,
                valid: np.ndarray) -> None:
        """Accumulate one realization's samples for one channel.

        samples: (T, d) stacked [delayed watermark; residual]; h_recv: (T,)
        receiver hi-res indices; valid: (T,) bool mask of defined samples.
        """
        nodes = node_of(h_recv[valid], self.v_stride, self.n_nodes)
        outer = np.einsum("ti,tj->tij", samples[valid], samples[valid])
        np.add.at(self.sums[ch], nodes, outer)
        np.add.at(self.counts[ch], nodes, 1)

    def merge(self, other: "SampleCovAccumulator") -> None:
        for ch in self.sums:
            self.sums[ch] += other.sums[ch]
            self.counts[ch] += other.counts[ch]

    def mean_covariances(self, ch) -> np.ndarray:
        """Per-node sample covariance; zero where no samples landed."""
        counts = self.counts[ch]
        out = np.zeros_like(self.sums[ch])
        nz = counts > 0
        out[nz] = self.sums[ch][nz] / counts[nz, None, None]
        return out


def smooth_invert(sigma_nodes: np.ndarray, counts: np.ndarray, k: int,
                  decay: float = 0.8, half_width: int = 10, stride: int = 1,
                  floor: float = 1e-12):
    """Whitening matrix at node k from nearby sample covariances.

    Distance-decayed average over the nodes within half_width hi-res indices
    that actually hold samples, then a symmetric inverse square root.
    Returns (V, floored).
    """
    radius = max(1, int(round(half_width / stride)))
    lo = max(0, k - radius)
    hi = min(len(counts), k + radius + 1)
    acc = np.zeros_like(sigma_nodes[0])
    b = 0.0
    for eps in range(lo, hi):
        if counts[eps] > 0:
            w = decay ** (abs(k - eps) * stride)
            acc += w * sigma_nodes[eps]
            b += w
    if b == 0.0:
        raise CalibrationError(f"no samples within {half_width} indices of "
                               f"node {k}")
    return inverse_sqrt(acc / b, floor)


def finalize_matrix_normalizers(acc: SampleCovAccumulator, decay: float = 0.8,
                                half_width: int = 10):
    """V tables for every channel; returns (V dict, flagged node lists)."""
    V = {}
    flags = {}
    for ch in acc.sums:
        sigma = acc.mean_covariances(ch)
        counts = acc.counts[ch]
        out = np.empty_like(sigma)
        floored_nodes = []
        for k in range(sigma.shape[0]):
            try:
                out[k], floored = smooth_invert(sigma, counts, k, decay,
                                                half_width, acc.v_stride)
            except CalibrationError as exc:
                raise CalibrationError(f"channel {ch}: {exc}") from exc
            if floored:
                floored_nodes.append(k)
        V[ch] = out
        if floored_nodes:
            flags[str(ch)] = floored_nodes
    return V, flags


class AutocorrAccumulator:
    """Mergeable per-node sums of windowed Gram matrices."""

    def __init__(self, channels, n_index: int, g_stride: int, ell: int):
        self.g_stride = g_stride
        self.n_index = n_index
        self.ell = ell
        self.n_nodes = n_nodes_for(n_index, g_stride)
        self.sums = {ch: np.zeros((self.n_nodes, ell, ell)) for ch in channels}
        self.counts = {ch: np.zeros(self.n_nodes, dtype=np.int64)
                       for ch in channels}

    def add_run(self, ch, rbar: np.ndarray, h_recv: np.ndarray,
                first_window_step: int) -> None:
        """Accumulate one realization's windowed Grams for one channel.

        rbar: (T, d) whitened stacks (undefined rows may hold garbage before
        the channel's first valid step); windows ending at n are defined for
        n >= first_window_step. A node k is credited by the step pair
        (n, n+1) whose receiver indices straddle it, with the published
        distance interpolation between the two windows.
        """
        ell = self.ell
        T = rbar.shape[0]
        nodes_grid = np.arange(self.n_nodes) * self.g_stride
        gram = {}

        def gram_at(n):
            if n not in gram:
                win = rbar[n - ell + 1:n + 1]
                gram[n] = win @ win.T
            return gram[n]

        for n in range(max(first_window_step, 1), T - 1):
            h0, h1 = int(h_recv[n]), int(h_recv[n + 1])
            if h1 <= h0:
                continue
            k_lo = int(np.searchsorted(nodes_grid, h0, side="left"))
            k_hi = int(np.searchsorted(nodes_grid, h1, side="left"))
            if k_hi == k_lo:
                continue
            span = h1 - h0
            for knode in range(k_lo, k_hi):
                k = nodes_grid[knode]
                w_n = abs(k - h1) / span
                w_n1 = abs(k - h0) / span
                self.sums[ch][knode] += w_n * gram_at(n) + w_n1 * gram_at(n + 1)
                self.counts[ch][knode] += 1

    def merge(self, other: "AutocorrAccumulator") -> None:
        for ch in self.sums:
            self.sums[ch] += other.sums[ch]
            self.counts[ch] += other.counts[ch]


def finalize_autocorr(acc: AutocorrAccumulator, dims) -> tuple[dict, dict]:
    """Per-node auto-correlation normalizers; empty nodes copy their nearest
    calibrated neighbour and are flagged."""
    G = {}
    flags = {}
    for ch, sums in acc.sums.items():
        counts = acc.counts[ch]
        d = dims[ch]
        out = np.empty_like(sums)
        nz = np.flatnonzero(counts)
        if nz.size == 0:
            raise CalibrationError(f"channel {ch}: no autocorrelation samples")
        filled = []
        for k in range(sums.shape[0]):
            if counts[k] > 0:
                g = sums[k] / (d * counts[k])
            else:
                nearest = nz[np.argmin(np.abs(nz - k))]
                g = sums[nearest] / (d * counts[nearest])
                filled.append(k)
            out[k] = 0.5 * (g + g.T)
        G[ch] = out
        if filled:
            flags[str(ch)] = filled
    return G, flags


def nll(P: np.ndarray, G: np.ndarray) -> float:
    """Wishart negative log likelihood of the identity scale matrix.

    P: (d, ell) window of whitened stacks; G: (ell, ell) auto-correlation
    normalizer. Returns +inf when the outer product is singular.
    """
    d, ell = P.shape
    if ell <= d:
        raise ValueError("window length must exceed the stacked dimension")
    S = P @ np.linalg.solve(G, P.T)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0 or not np.isfinite(logdet):
        return float("inf")
    return float((1 - ell + d) * logdet + np.trace(S))


def nll_batch(P: np.ndarray, Ginv: np.ndarray) -> np.ndarray:
    """Vectorized nll over stacked channels: P (C, d, ell), Ginv (C, ell, ell)."""
    C, d, ell = P.shape
    S = np.matmul(np.matmul(P, Ginv), P.transpose(0, 2, 1))
    sign, logdet = np.linalg.slogdet(S)
    trace = np.trace(S, axis1=1, axis2=2)
    out = (1 - ell + d) * logdet + trace
    bad = (sign <= 0) | ~np.isfinite(out)
    out[bad] = np.inf
    return out


def calibrate_thresholds(nll_pool: dict, fa_rate: float) -> dict:
    """Per-channel thresholds at the empirical (1 - fa_rate) quantile."""
    if not 0.0 < fa_rate <= 1.0:
        raise ValueError("false-alarm rate must be in (0, 1]")
    thresholds = {}
    needed = max(1, int(np.ceil(1.0 / fa_rate)))
    for ch, values in nll_pool.items():
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        if values.size < needed:
            raise CalibrationError(
                f"channel {ch}: {values.size} samples cannot pin the "
                f"{1 - fa_rate:.4%} quantile")
        thresholds[ch] = float(np.quantile(values, 1.0 - fa_rate))
    return thresholds


@dataclass
class DetectionState:
    """Rolling exceedance windows and the latched degrade decision."""

    n_channels: int
    window: int = 40
    ring: np.ndarray = None
    counts: np.ndarray = None
    pos: int = 0
    latest_nll: np.ndarray = None
    degraded: bool = False
    degrade_step: int | None = None

    def __post_init__(self):
        if self.ring is None:
            self.ring = np.zeros((self.n_channels, self.window), dtype=np.int8)
        if self.counts is None:
            self.counts = np.zeros(self.n_channels, dtype=np.int64)
        if self.latest_nll is None:
            self.latest_nll = np.full(self.n_channels, np.nan)

    def update(self, exceeded: np.ndarray, count_threshold: int,
               step: int | None = None) -> bool:
        """Push one step of per-channel exceedances; returns the (latched)
        degrade decision."""
        exceeded = np.asarray(exceeded).astype(np.int8)
        self.counts += exceeded - self.ring[:, self.pos]
        self.ring[:, self.pos] = exceeded
        self.pos = (self.pos + 1) % self.window
        if not self.degraded and np.any(self.counts > count_threshold):
            self.degraded = True
            self.degrade_step = step
        return self.degraded


def detect_step(state: DetectionState, channel_idx: int, nll_value: float,
                threshold: float, count_threshold: int = 24,
                step: int | None = None) -> tuple[bool, bool]:
    """Single-channel convenience wrapper over DetectionState.update."""
    if count_threshold > state.window:
        raise ValueError("count threshold cannot exceed the window")
    exceeded = np.zeros(state.n_channels, dtype=np.int8)
    exceeded[channel_idx] = nll_value > threshold
    state.latest_nll[channel_idx] = nll_value
    degrade = state.update(exceeded, count_threshold, step)
    return bool(exceeded[channel_idx]), degrade


def _selector_rows(mat: np.ndarray) -> np.ndarray:
    """Column indices of a 0/1 selector matrix with one 1 per row."""
    if not np.all(np.isin(mat, (0.0, 1.0))) or not np.all(mat.sum(axis=1) == 1):
        raise ValueError("matrix is not a one-hot row selector")
    return np.argmax(mat, axis=1).astype(np.intp)


class _ChannelGroup:
    """Channels sharing a stacked dimension, batched for the hot loop."""

    def __init__(self, channels, tables: NormalizationTables, U, W, ell: int):
        self.channels = channels
        self.size = len(channels)
        self.d = tables.dims[channels[0]]
        self.ell = ell
        self.recv0 = np.array([ch[0] - 1 for ch in channels], dtype=np.intp)
        self.rho = np.array([tables.rho[ch] for ch in channels])
        self.u_idx = np.stack([_selector_rows(U[ch]) for ch in channels])
        self.w_idx = np.stack([_selector_rows(W[ch]) for ch in channels])
        self.V = np.stack([tables.V[ch] for ch in channels])
        self.Ginv = np.stack([tables.Ginv[ch] for ch in channels])
        self.thresholds = np.array(
            [tables.thresholds.get(ch, np.inf) for ch in channels])
        self.ring = np.zeros((self.size, self.d, ell))
        self._arange = np.arange(self.size)
        self._last_gnode = None
        self._G_cur = None


def _logdet_pd(S: np.ndarray) -> np.ndarray:
    """log det of stacked symmetric matrices; -inf when not positive definite."""
    d = S.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if d == 1:
            det = S[:, 0, 0]
        elif d == 2:
            det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
        elif d == 3:
            det = (S[:, 0, 0] * (S[:, 1, 1] * S[:, 2, 2] - S[:, 1, 2] * S[:, 2, 1])
                   - S[:, 0, 1] * (S[:, 1, 0] * S[:, 2, 2] - S[:, 1, 2] * S[:, 2, 0])
                   + S[:, 0, 2] * (S[:, 1, 0] * S[:, 2, 1] - S[:, 1, 1] * S[:, 2, 0]))
        else:
            sign, logdet = np.linalg.slogdet(S)
            logdet[sign <= 0] = -np.inf
            return logdet
        out = np.where(det > 0, np.log(np.where(det > 0, det, 1.0)), -np.inf)
    return out


class DetectorRuntime:
    """Streaming per-step evaluation of every channel's test statistic.

    Holds the sliding whitened windows, gathers the node-indexed normalizers
    and produces one NLL/exceedance row per control step. Channels are
    batched by stacked dimension so the per-step work is a handful of
    vectorized operations.
    """

    def __init__(self, tables: NormalizationTables, U, W,
                 window: int = 40):
        self.tables = tables
        self.channels = list(tables.channels)
        self.ell = tables.ell
        self.n_channels = len(self.channels)
        by_dim: dict[int, list] = {}
        for ch in self.channels:
            by_dim.setdefault(tables.dims[ch], []).append(ch)
        self.groups = [_ChannelGroup(chs, tables, U, W, self.ell)
                       for _, chs in sorted(by_dim.items())]
        self.col_of = {ch: k for k, ch in enumerate(self.channels)}
        self.state = DetectionState(n_channels=self.n_channels, window=window)

    def step(self, n: int, x_pad: np.ndarray, s_pad: np.ndarray,
             h_recv: np.ndarray, wm_hist: np.ndarray, count_threshold: int):
        """One detection pass; returns (nll_row, exceed_row, degrade)."""
        nll_row = np.full(self.n_channels, np.nan)
        exceed_row = np.zeros(self.n_channels, dtype=np.int8)
        tables = self.tables
        for g in self.groups:
            cols = [self.col_of[ch] for ch in g.channels]
            e_idx = n - g.rho - 1
            pushable = e_idx >= 0
            e = wm_hist[np.maximum(e_idx, 0), g.recv0]
            r = (np.take_along_axis(x_pad[g.recv0], g.u_idx, axis=1)
                 - np.take_along_axis(s_pad[cols], g.w_idx, axis=1))
            sample = np.concatenate([e[:, None], r], axis=1)
            h_here = h_recv[g.recv0]
            Vg = g.V[g._arange, tables.v_node(h_here)]
            rbar = np.einsum("cij,cj->ci", Vg, sample)
            rbar[~pushable] = 0.0
            g.ring[:, :, :-1] = g.ring[:, :, 1:]
            g.ring[:, :, -1] = rbar

            full = n > g.rho + g.ell
            if not np.any(full):
                continue
            gnode = tables.g_node(h_here)
            if g._last_gnode is None or not np.array_equal(gnode, g._last_gnode):
                g._G_cur = g.Ginv[g._arange, gnode]
                g._last_gnode = gnode
            P = g.ring
            S = np.matmul(np.matmul(P, g._G_cur), P.transpose(0, 2, 1))
            logdet = _logdet_pd(S)
            trace = np.trace(S, axis1=1, axis2=2)
            vals = (1 - g.ell + g.d) * logdet + trace
            vals = np.where(np.isfinite(vals), vals, np.inf)
            vals[~full] = np.nan
            nll_row[cols] = vals
            exceed_row[cols] = full & (vals > g.thresholds)
        degrade = self.state.update(exceed_row, count_threshold, n)
        return nll_row, exceed_row, degrade


def lti_baseline(tables: NormalizationTables) -> NormalizationTables:
    """Time-invariant variant: V averaged over the run, G set to identity.

    The average weights each node by its calibration occupancy, matching a
    uniform average over simulation steps. Thresholds are cleared; they must
    be recalibrated with the time-invariant normalizers.
    """
    V = {}
    G = {}
    f = {}
    for ch in tables.channels:
        counts = tables.f_counts[ch].astype(float)
        if counts.sum() == 0:
            raise CalibrationError(f"channel {ch}: no calibration samples")
        weights = counts / counts.sum()
        V[ch] = np.tensordot(weights, tables.V[ch], axes=(0, 0))[None, :, :]
        G[ch] = np.eye(tables.ell)[None, :, :]
        f[ch] = np.array([int(counts.sum())])
    out = NormalizationTables(
        level=tables.level, kappa=tables.kappa, ell=tables.ell,
        n_index=tables.n_index, v_stride=tables.n_index,
        g_stride=tables.n_index, channels=list(tables.channels),
        dims=dict(tables.dims), rho=dict(tables.rho),
        trajectory_hash=tables.trajectory_hash, fa_rate=None,
        V=V, G=G, f_counts=f,
        g_counts={ch: np.array([1]) for ch in tables.channels},
        flags={"variant": ["lti"]},
    )
    out.build_inverses()
    return out


def save_tables(tables: NormalizationTables, path) -> None:
    header = json.dumps({
        "level": tables.level, "kappa": tables.kappa, "ell": tables.ell,
        "n_index": tables.n_index, "v_stride": tables.v_stride,
        "g_stride": tables.g_stride,
        "channels": [list(ch) for ch in tables.channels],
        "dims": {f"{i}_{j}": tables.dims[(i, j)] for i, j in tables.channels},
        "rho": {f"{i}_{j}": tables.rho[(i, j)] for i, j in tables.channels},
        "trajectory_hash": tables.trajectory_hash,
        "fa_rate": tables.fa_rate,
        "thresholds": {f"{i}_{j}": tables.thresholds.get((i, j))
                       for i, j in tables.channels},
        "flags": tables.flags,
    })
    arrays = {}
    for i, j in tables.channels:
        arrays[f"V_{i}_{j}"] = tables.V[(i, j)]
        arrays[f"G_{i}_{j}"] = tables.G[(i, j)]
        arrays[f"f_{i}_{j}"] = tables.f_counts[(i, j)]
        arrays[f"g_{i}_{j}"] = tables.g_counts[(i, j)]
    np.savez_compressed(path, header=np.frombuffer(header.encode(), np.uint8),
                        **arrays)


def load_tables(path, trajectory_hash: str | None = None) -> NormalizationTables:
    """Load tables, refusing a trajectory-hash mismatch."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if (trajectory_hash is not None
                and header["trajectory_hash"] != trajectory_hash):
            raise TablesMismatchError(
                "normalization tables were calibrated on a different "
                "trajectory")
        channels = [tuple(ch) for ch in header["channels"]]
        tables = NormalizationTables(
            level=header["level"], kappa=header["kappa"], ell=header["ell"],
            n_index=header["n_index"], v_stride=header["v_stride"],
            g_stride=header["g_stride"], channels=channels,
            dims={(i, j): header["dims"][f"{i}_{j}"] for i, j in channels},
            rho={(i, j): header["rho"][f"{i}_{j}"] for i, j in channels},
            trajectory_hash=header["trajectory_hash"],
            fa_rate=header["fa_rate"],
            flags=header.get("flags", {}),
        )
        for i, j in channels:
            tables.V[(i, j)] = data[f"V_{i}_{j}"]
            tables.G[(i, j)] = data[f"G_{i}_{j}"]
            tables.f_counts[(i, j)] = data[f"f_{i}_{j}"]
            tables.g_counts[(i, j)] = data[f"g_{i}_{j}"]
        thr = header.get("thresholds") or {}
        tables.thresholds = {(i, j): thr[f"{i}_{j}"] for i, j in channels
                             if thr.get(f"{i}_{j}") is not None}
    tables.build_inverses()
    return tables
