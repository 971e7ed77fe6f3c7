"""12-dimensional command trajectories: synthetic generators, chunking,
normalization statistics, and the ``.traj`` dataset file format.

A command frame is ``[v_x, v_y, omega_z, theta_1, theta_2, theta_3, f, h_z,
phi, s_y, h_z_f, e]``: planar body velocities and yaw rate, three gait
pattern phases, gait frequency, body height, pitch, foot width, foot
height, and a binary termination flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "COMMAND_NAMES",
    "NUM_COMMAND_DIMS",
    "TERMINATION_DIM",
    "RAW_RANGES",
    "Trajectory",
    "NormalizationStats",
    "generate_synthetic",
    "pursuit_trace",
    "chunk_trajectory",
    "chunk_dataset",
    "fit_normalization",
    "normalize",
    "denormalize",
    "save_trajectories",
    "load_trajectories",
    "export_csv",
    "TARGET_AMPLITUDE",
    "TARGET_PERIOD",
    "PURSUIT_GAIN",
    "MAX_SPEED",
]

COMMAND_NAMES = (
    "v_x", "v_y", "omega_z",
    "theta_1", "theta_2", "theta_3",
    "f", "h_z", "phi", "s_y", "h_z_f",
    "e",
)
NUM_COMMAND_DIMS = 12
TERMINATION_DIM = 11

# Plausible raw command ranges; generators stay inside these, normalization
# statistics are always measured from data rather than assumed.
RAW_RANGES = np.array([
    (-1.0, 1.5),    # v_x (m/s)
    (-0.6, 0.6),    # v_y
    (-1.2, 1.2),    # omega_z (rad/s)
    (0.0, 1.0),     # theta_1
    (0.0, 1.0),     # theta_2
    (0.0, 1.0),     # theta_3
    (1.5, 4.0),     # f (Hz)
    (0.22, 0.34),   # h_z (m)
    (-0.4, 0.4),    # phi (rad)
    (0.05, 0.15),   # s_y (m)
    (0.03, 0.12),   # h_z_f (m)
    (0.0, 1.0),     # e
])

# Scripted moving target shared by the pursuit-demo generator and the
# control-loop simulator: 1 m amplitude, 4 s period.
TARGET_AMPLITUDE = 1.0
TARGET_PERIOD = 4.0
PURSUIT_GAIN = 2.0
MAX_SPEED = 2.0

GENERATOR_KINDS = ("sine-mixture", "piecewise-constant", "pursuit-demo")


@dataclass
class Trajectory:
    """An ordered sequence of command frames at a fixed sample rate."""

    frames: np.ndarray  # (length, 12) float64
    rate: float
    tag: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_COMMAND_DIMS:
            raise ValueError(f"trajectory frames must be (length, 12), got {self.frames.shape}")
        if len(self.frames) < 1:
            raise ValueError("trajectory must contain at least one frame")
        if self.rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self):
        return len(self.frames)


# ------------------------------------------------------------- generators


def _sine_mixture_frames(length: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    frames = np.zeros((length, NUM_COMMAND_DIMS))
    t = np.arange(length) / rate
    for d in range(NUM_COMMAND_DIMS - 1):
        lo, hi = RAW_RANGES[d]
        mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        ncomp = int(rng.integers(1, 4))
        # Log-uniform band with 1/f amplitude weighting: command signals are
        # dominated by slow components, like real gait/velocity profiles stay
        # well below the sample_rate/10 band limit.
        freqs = np.exp(rng.uniform(np.log(rate / 200.0), np.log(rate / 50.0), ncomp))
        amps = rng.uniform(0.5, 1.0, ncomp) / freqs
        amps *= 0.8 * half / amps.sum()
        phases = rng.uniform(0.0, 2.0 * np.pi, ncomp)
        signal = (amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
        offset = mid + rng.uniform(-0.15, 0.15) * half
        noise = 0.01 * half * rng.standard_normal(length)
        frames[:, d] = offset + signal + noise
    frames[-1, TERMINATION_DIM] = 1.0
    return frames


def _piecewise_constant_frames(length: int, rng: np.random.Generator) -> np.ndarray:
    frames = np.zeros((length, NUM_COMMAND_DIMS))
    for d in range(NUM_COMMAND_DIMS - 1):
        lo, hi = RAW_RANGES[d]
        pos = 0
        while pos < length:
            hold = int(rng.integers(5, 21))
            frames[pos : pos + hold, d] = rng.uniform(lo, hi)
            pos += hold
    frames[-1, TERMINATION_DIM] = 1.0
    return frames


def pursuit_trace(length: int, rate: float, phase: float, start_pos: float):
    """Roll out the proportional pursuit law against the scripted target.

    Returns ``(frames, target, agent)`` where frames hold the commanded
    velocities and the other command dimensions at their midpoints; target
    and agent are the positions the law was computed from.
    """
    frames = np.zeros((length, NUM_COMMAND_DIMS))
    frames[:, 1:TERMINATION_DIM] = RAW_RANGES[1:TERMINATION_DIM].mean(axis=1)
    target = np.empty(length)
    agent = np.empty(length)
    pos = start_pos
    for i in range(length):
        tgt = TARGET_AMPLITUDE * np.sin(2.0 * np.pi * (i / rate) / TARGET_PERIOD + phase)
        v = float(np.clip(PURSUIT_GAIN * (tgt - pos), -MAX_SPEED, MAX_SPEED))
        frames[i, 0] = v
        target[i] = tgt
        agent[i] = pos
        pos += v / rate
    frames[-1, TERMINATION_DIM] = 1.0
    return frames, target, agent


def generate_synthetic(kind: str, count: int, length: int, rate: float,
                       seed: int) -> list[Trajectory]:
    """Deterministically generate ``count`` synthetic trajectories.

    Kinds: ``sine-mixture`` (band-limited sums of 1-3 sinusoids per command
    dimension, frequencies <= rate/10, plus small noise),
    ``piecewise-constant`` (random holds of 5-20 frames, modelling
    gait-switch commands), and ``pursuit-demo`` (velocity commands from a
    proportional pursuit law on a scripted moving target). The termination
    channel is kept binary: zero everywhere, one on the final frame.
    """
    if kind not in GENERATOR_KINDS:
        raise ValueError(f"unknown generator kind {kind!r}; choose from {GENERATOR_KINDS}")
    if count < 1 or length < 1:
        raise ValueError("count and length must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        if kind == "sine-mixture":
            frames = _sine_mixture_frames(length, rate, rng)
        elif kind == "piecewise-constant":
            frames = _piecewise_constant_frames(length, rng)
        else:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            start = rng.uniform(-0.5, 0.5)
            frames, _, _ = pursuit_trace(length, rate, phase, start)
        out.append(Trajectory(frames, rate, kind))
    return out


# --------------------------------------------------------------- chunking


def chunk_trajectory(trajectory: Trajectory, chunk_len: int, stride: int = 1) -> list[np.ndarray]:
    """Sliding windows of ``chunk_len`` consecutive frames.

    Yields floor((len - N)/stride) + 1 chunks; a trajectory shorter than
    one chunk yields an empty list with a warning.
    """
    if chunk_len < 1 or stride < 1:
        raise ValueError("chunk_len and stride must be >= 1")
    n = len(trajectory)
    if chunk_len > n:
        warnings.warn(
            f"chunk length {chunk_len} exceeds trajectory length {n}; no chunks produced",
            stacklevel=2,
        )
        return []
    return [
        trajectory.frames[start : start + chunk_len].copy()
        for start in range(0, n - chunk_len + 1, stride)
    ]


def chunk_dataset(trajectories: list[Trajectory], chunk_len: int, stride: int = 1) -> np.ndarray:
    """All chunks of a dataset stacked into one (n, N, 12) array."""
    chunks = [c for traj in trajectories for c in chunk_trajectory(traj, chunk_len, stride)]
    if not chunks:
        return np.empty((0, chunk_len, NUM_COMMAND_DIMS))
    return np.stack(chunks)


# ---------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    """Per-dimension min/max over a dataset; constant dimensions flagged."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.ascontiguousarray(self.mins, dtype=np.float64)
        self.maxs = np.ascontiguousarray(self.maxs, dtype=np.float64)
        if self.mins.shape != (NUM_COMMAND_DIMS,) or self.maxs.shape != (NUM_COMMAND_DIMS,):
            raise ValueError("normalization stats must hold 12 mins and 12 maxs")
        if np.any(self.maxs < self.mins):
            raise ValueError("normalization stats require max >= min per dimension")

    @property
    def constant_dims(self) -> np.ndarray:
        return self.maxs == self.mins


def fit_normalization(data) -> NormalizationStats:
    """Min/max per dimension over trajectories or a stacked frame array."""
    if isinstance(data, np.ndarray):
        frames = data.reshape(-1, NUM_COMMAND_DIMS)
    else:
        if not data:
            raise ValueError("cannot fit normalization on an empty dataset")
        frames = np.concatenate([t.frames for t in data], axis=0)
    if frames.size == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    return NormalizationStats(frames.min(axis=0), frames.max(axis=0))


def normalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Affine map to [-1, 1] per dimension; constant dimensions map to 0."""
    values = np.asarray(values, dtype=np.float64)
    span = stats.maxs - stats.mins
    safe = np.where(stats.constant_dims, 1.0, span)
    out = 2.0 * (values - stats.mins) / safe - 1.0
    return np.where(stats.constant_dims, 0.0, out)


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of ``normalize``; constant dimensions recover their value."""
    values = np.asarray(values, dtype=np.float64)
    span = stats.maxs - stats.mins
    out = stats.mins + (values + 1.0) * span / 2.0
    return np.where(stats.constant_dims, stats.mins, out)


# ------------------------------------------------------------------ file IO

_TRAJ_MAGIC = "TRAJ/1"


def save_trajectories(path, trajectories: list[Trajectory]):
    """Write a ``.traj`` file: a textual header, then raw little-endian
    float64 frames for each trajectory in order.

    Header layout (UTF-8, one item per line):
      line 1:  ``TRAJ/1 rate=<repr> count=<n> dims=<comma names>``
      n lines: ``<length>:<tag>``
      last:    ``END``
    Frames follow immediately after the END line, concatenated in header
    order; each trajectory contributes length*12 little-endian doubles.
    """
    if not trajectories:
        raise ValueError("refusing to save an empty dataset")
    rates = {t.rate for t in trajectories}
    if len(rates) != 1:
        raise ValueError(f"all trajectories in a file must share one sample rate, got {sorted(rates)}")
    rate = trajectories[0].rate
    lines = [f"{_TRAJ_MAGIC} rate={rate!r} count={len(trajectories)} dims={','.join(COMMAND_NAMES)}"]
    for t in trajectories:
        if "\n" in t.tag:
            raise ValueError("trajectory tag must not contain newlines")
        lines.append(f"{len(t)}:{t.tag}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for t in trajectories:
            fh.write(t.frames.astype("<f8").tobytes())


def load_trajectories(path) -> list[Trajectory]:
    """Read a ``.traj`` file written by ``save_trajectories``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end_marker = b"\nEND\n"
    split = blob.find(end_marker)
    if split < 0:
        raise ValueError(f"{path}: not a .traj file (missing END header marker)")
    header = blob[:split].decode("utf-8").split("\n")
    body = blob[split + len(end_marker):]
    first = header[0].split()
    if not first or first[0] != _TRAJ_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {_TRAJ_MAGIC}")
    fields = dict(item.split("=", 1) for item in first[1:])
    rate = float(fields["rate"])
    count = int(fields["count"])
    if len(header) != 1 + count:
        raise ValueError(f"{path}: header announces {count} trajectories, found {len(header) - 1}")
    out = []
    offset = 0
    for line in header[1:]:
        length_text, _, tag = line.partition(":")
        length = int(length_text)
        nbytes = length * NUM_COMMAND_DIMS * 8
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: truncated frame data")
        frames = np.frombuffer(body[offset : offset + nbytes], dtype="<f8").reshape(
            length, NUM_COMMAND_DIMS
        )
        out.append(Trajectory(frames.copy(), rate, tag))
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes after frame data")
    return out


def export_csv(path, trajectories: list[Trajectory]):
    """Human-inspectable CSV: one row per frame with trajectory/frame ids."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trajectory,frame," + ",".join(COMMAND_NAMES) + "\n")
        for i, t in enumerate(trajectories):
            for j, frame in enumerate(t.frames):
                fh.write(f"{i},{j}," + ",".join(repr(v) for v in frame) + "\n")
