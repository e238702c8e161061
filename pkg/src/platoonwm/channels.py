"""V2V channel sets, message delivery, and attack generators.

Channels are ordered pairs (receiver, sender), 1-based. Messages carry the
sender's deviation measurement; an attack adds an arbitrary vector on top.
Self-channels (i, i) ride on the vehicle's own sensor bus and are never
attackable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .constants import CONTROL_DT


class AttackSpecError(ValueError):
    """Attack requests a channel that does not exist or is not recorded."""


@dataclass(frozen=True)
class ChannelSet:
    level: int
    kappa: int
    pairs: tuple[tuple[int, int], ...]

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._pair_set

    @property
    def _pair_set(self):
        return set(self.pairs)

    def senders(self, i: int) -> list[int]:
        return [j for (r, j) in self.pairs if r == i]

    def __len__(self) -> int:
        return len(self.pairs)


def active_set(level: int, kappa: int) -> ChannelSet:
    """Communication pairs for a control level.

    Level 3 is the full product, level 2 keeps leader broadcasts plus
    adjacent neighbours, level 1 keeps only each vehicle's own sensors.
    """
    if kappa < 2:
        raise ValueError("need at least two vehicles")
    if level == 3:
        pairs = [(i, j) for i in range(1, kappa + 1)
                 for j in range(1, kappa + 1)]
    elif level == 2:
        pairs = [(i, j) for i in range(1, kappa + 1)
                 for j in range(1, kappa + 1) if j == 1 or abs(i - j) <= 1]
    elif level == 1:
        pairs = [(i, i) for i in range(1, kappa + 1)]
    else:
        raise ValueError(f"unknown level {level}")
    return ChannelSet(level=level, kappa=kappa, pairs=tuple(sorted(pairs)))


@dataclass
class Recording:
    """Per-channel transmitted-measurement streams from one realization."""

    kappa: int
    level: int
    dt: float
    seed: int
    streams: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return min(arr.shape[0] for arr in self.streams.values())


def save_recording(rec: Recording, path) -> None:
    header = json.dumps({"kappa": rec.kappa, "level": rec.level,
                         "dt": rec.dt, "seed": rec.seed,
                         "channels": sorted(rec.streams)})
    arrays = {f"ch_{i}_{j}": arr for (i, j), arr in rec.streams.items()}
    np.savez_compressed(path, header=np.frombuffer(header.encode(), np.uint8),
                        **arrays)


def load_recording(path) -> Recording:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        streams = {}
        for key in data.files:
            if key.startswith("ch_"):
                _, i, j = key.split("_")
                streams[(int(i), int(j))] = data[key]
    return Recording(kappa=header["kappa"], level=header["level"],
                     dt=header["dt"], seed=header["seed"], streams=streams)


@dataclass(frozen=True)
class AttackSpec:
    """What to inject, where, and from when.

    kind: "none", "replay" or "aggressive". channels: attacked subset of the
    communication set (self-channels excluded). start_step: first attacked
    control step. offset: recording step played at start_step (replay only).
    """

    kind: str = "none"
    channels: tuple[tuple[int, int], ...] = ()
    start_step: int = 0
    offset: int = 0
    recording: Recording | None = None

    def active(self, n: int) -> bool:
        return self.kind != "none" and n >= self.start_step


NO_ATTACK = AttackSpec()


def start_step_for(start_time: float, dt: float = CONTROL_DT) -> int:
    return int(np.ceil(start_time / dt))


def make_replay(recording: Recording, channels, start_time: float = 100.0,
                dt: float = CONTROL_DT, offset: int = 0) -> AttackSpec:
    """Replay recorded channel streams starting at a given time.

    Recording step `offset` replaces the live message at the attack start.
    """
    channels = tuple(sorted(tuple(c) for c in channels))
    for ch in channels:
        if ch[0] == ch[1]:
            raise AttackSpecError(f"self-channel {ch} cannot be attacked")
        if ch not in recording.streams:
            raise AttackSpecError(f"channel {ch} missing from recording")
    return AttackSpec(kind="replay", channels=channels,
                      start_step=start_step_for(start_time, dt),
                      offset=offset, recording=recording)


def make_aggressive(start_time: float = 100.0, dt: float = CONTROL_DT,
                    channel_set: ChannelSet | None = None) -> AttackSpec:
    """Force the leader-to-second-vehicle speed report to read zero.

    The transmitted absolute velocity becomes 0, i.e. the deviation
    component becomes minus the reference speed, making the receiver
    believe the leader is braking hard.
    """
    if channel_set is not None and (2, 1) not in channel_set:
        raise AttackSpecError("channel (2,1) is not active at this level")
    return AttackSpec(kind="aggressive", channels=((2, 1),),
                      start_step=start_step_for(start_time, dt))


def sample_channels(channel_set: ChannelSet, fraction: float,
                    rng: np.random.Generator) -> tuple[tuple[int, int], ...]:
    """Seeded random subset of attackable (non-self) channels."""
    eligible = [ch for ch in channel_set.pairs if ch[0] != ch[1]]
    count = max(1, int(round(fraction * len(eligible))))
    picks = rng.choice(len(eligible), size=count, replace=False)
    return tuple(sorted(eligible[k] for k in picks))


def transmit(y: np.ndarray, channel: tuple[int, int], attack: AttackSpec,
             n: int, ref_speed: float | None = None) -> np.ndarray:
    """Deliver vehicle j's measurement over a channel, possibly attacked.

    Before the attack start (or on untargeted channels) the message is the
    measurement, exactly. Replay substitutes the recorded stream; the
    aggressive attack rewrites the speed component to minus the reference.
    """
    i, j = channel
    if i == j or not attack.active(n) or channel not in attack.channels:
        return y
    if attack.kind == "replay":
        stream = attack.recording.streams[channel]
        k = n - attack.start_step + attack.offset
        if k >= stream.shape[0]:
            k = stream.shape[0] - 1
        return stream[k]
    if attack.kind == "aggressive":
        if ref_speed is None:
            raise AttackSpecError("aggressive attack needs the reference speed")
        out = np.array(y, dtype=float, copy=True)
        out[-1] = -float(ref_speed)      # speed rides last in leader messages
        return out
    raise AttackSpecError(f"unknown attack kind {attack.kind!r}")
