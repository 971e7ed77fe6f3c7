"""Deterministic discrete-time simulation of the policy -> controller loop.

The controller ticks at ``controller_hz``; the policy, whenever idle,
starts an inference on the newest observation and, ``inference_latency``
seconds later, deposits a chunk of ``chunk_len`` action frames into a FIFO
buffer. The controller consumes one frame per tick; on an empty buffer it
holds the last executed action (zero-order hold) and records a starvation
tick. All scheduling is done in integer controller ticks, so traces are
bitwise reproducible.

The task is 1-D pursuit: the agent integrates the commanded velocity while
a scripted target moves sinusoidally (the same law the pursuit-demo data
generator uses). The delivery rate balances exactly when
``chunk_len * policy_hz == controller_hz``: below that the buffer starves
at rate ``1 - chunk_len*policy_hz/controller_hz``, at or above it only the
initial inference window ever starves.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    MAX_SPEED,
    NUM_COMMAND_DIMS,
    PURSUIT_GAIN,
    RAW_RANGES,
    TARGET_AMPLITUDE,
    TARGET_PERIOD,
    TERMINATION_DIM,
)

__all__ = [
    "SimConfig",
    "Observation",
    "SimTrace",
    "run_sim",
    "sweep",
    "staleness_profile",
    "oracle_pursuit_plan",
    "trace_to_csv",
    "summary_to_text",
    "SWEEP_COLUMNS",
]


@dataclass(frozen=True)
class SimConfig:
    """One control-loop experiment.

    ``inference_latency`` defaults to a policy saturating its rate
    (1/policy_hz). ``preempt`` drops buffered frames when a fresh chunk
    arrives instead of appending behind them.
    """

    controller_hz: float = 50.0
    policy_hz: float = 5.0
    chunk_len: int = 10
    inference_latency: float | None = None
    policy: str = "oracle-pursuit"
    episode_seconds: float = 60.0
    seed: int = 0
    preempt: bool = False

    def __post_init__(self):
        if self.controller_hz <= 0 or self.policy_hz <= 0:
            raise ValueError("controller_hz and policy_hz must be positive")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if self.episode_seconds <= 0:
            raise ValueError("episode_seconds must be positive")

    @property
    def latency_seconds(self) -> float:
        return 1.0 / self.policy_hz if self.inference_latency is None else self.inference_latency

    @property
    def delivery_hz(self) -> float:
        """Frames deliverable per second once the pipeline is warm."""
        return self.chunk_len * self.policy_hz


@dataclass(frozen=True)
class Observation:
    """What the policy sees when an inference starts."""

    tick: int
    time: float
    agent_pos: float
    target_pos: float
    target_vel: float
    recent_frames: np.ndarray  # (window, 12) most recent executed commands


@dataclass
class SimTrace:
    """Tick-by-tick record plus episode summary statistics."""

    config: SimConfig
    time: np.ndarray
    action: np.ndarray
    staleness: np.ndarray          # NaN before the first frame ever executes
    buffer_depth: np.ndarray
    target: np.ndarray
    agent: np.ndarray
    starved: np.ndarray
    fresh: np.ndarray
    frame_staleness: np.ndarray    # one entry per consumed (popped) frame
    produced: int
    consumed: int
    first_fresh_tick: int          # -1 if no frame was ever delivered

    def __len__(self):
        return len(self.time)

    @property
    def starvation_fraction(self) -> float:
        return float(self.starved.mean())

    @property
    def post_warmup_starvation(self) -> float:
        """Starvation fraction from the first executed frame onward."""
        if self.first_fresh_tick < 0:
            return 1.0
        tail = self.starved[self.first_fresh_tick:]
        return float(tail.mean()) if len(tail) else 0.0

    @property
    def tracking_rmse(self) -> float:
        return float(np.sqrt(np.square(self.target - self.agent).mean()))

    def summary(self) -> dict:
        window = self.frame_staleness
        return {
            "controller_hz": self.config.controller_hz,
            "policy_hz": self.config.policy_hz,
            "chunk_len": self.config.chunk_len,
            "delivery_hz": self.config.delivery_hz,
            "ticks": len(self),
            "starvation_fraction": self.starvation_fraction,
            "post_warmup_starvation": self.post_warmup_starvation,
            "mean_staleness": float(window.mean()) if len(window) else float("nan"),
            "max_staleness": float(window.max()) if len(window) else float("nan"),
            "tracking_rmse": self.tracking_rmse,
            "produced": self.produced,
            "consumed": self.consumed,
            "seed": self.config.seed,
        }


def target_position(t: float, phase: float) -> float:
    return TARGET_AMPLITUDE * np.sin(2.0 * np.pi * t / TARGET_PERIOD + phase)


def target_velocity(t: float, phase: float) -> float:
    w = 2.0 * np.pi / TARGET_PERIOD
    return TARGET_AMPLITUDE * w * np.cos(w * t + phase)


def oracle_pursuit_plan(obs: Observation, chunk_len: int, dt: float) -> np.ndarray:
    """Proportional pursuit chunk from a single observation.

    Rolls the agent's predicted position forward against the target
    extrapolated linearly from its observed position and velocity; each
    step commands clip(gain * (predicted offset), +-max_speed). Later
    frames of a long chunk therefore keep tracking the target's motion
    instead of stalling on a stale snapshot.
    """
    velocities = np.empty(chunk_len)
    pos = obs.agent_pos
    for i in range(chunk_len):
        tgt = obs.target_pos + obs.target_vel * (i * dt)
        v = float(np.clip(PURSUIT_GAIN * (tgt - pos), -MAX_SPEED, MAX_SPEED))
        velocities[i] = v
        pos += v * dt
    return velocities


_OBS_WINDOW = 10
_DEFAULT_FRAME = RAW_RANGES.mean(axis=1)
_DEFAULT_FRAME[0] = 0.0
_DEFAULT_FRAME[TERMINATION_DIM] = 0.0


def run_sim(config: SimConfig, chunk_policy=None) -> SimTrace:
    """Run one episode and return its trace.

    ``chunk_policy`` is required for ``policy="trained-head"``: a callable
    ``(Observation, chunk_len, dt) -> (chunk_len,) velocities``. The
    built-in ``oracle-pursuit`` policy ignores it.
    """
    if config.policy == "oracle-pursuit":
        plan = oracle_pursuit_plan
    elif config.policy == "trained-head":
        if chunk_policy is None:
            raise ValueError("policy='trained-head' requires a chunk_policy callable")
        plan = chunk_policy
    else:
        raise ValueError(f"unknown policy kind {config.policy!r}")

    f_l = config.controller_hz
    dt = 1.0 / f_l
    total_ticks = int(round(config.episode_seconds * f_l))
    latency_ticks = int(np.ceil(config.latency_seconds * f_l - 1e-9))

    rng = np.random.default_rng(config.seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    agent = rng.uniform(-0.5, 0.5)

    buffer: deque[tuple[float, int]] = deque()  # (velocity, observation tick)
    recent = deque([_DEFAULT_FRAME.copy() for _ in range(_OBS_WINDOW)], maxlen=_OBS_WINDOW)
    busy = False
    pending_obs: Observation | None = None
    completion_tick = -1
    produced = consumed = 0
    first_fresh = -1
    held_action = 0.0
    held_obs_tick = -1  # -1: no frame has ever been executed

    cols = {name: np.empty(total_ticks) for name in
            ("time", "action", "staleness", "buffer_depth", "target", "agent")}
    starved = np.zeros(total_ticks, dtype=bool)
    fresh = np.zeros(total_ticks, dtype=bool)
    frame_staleness = []

    def deposit(obs: Observation):
        nonlocal produced
        velocities = np.asarray(plan(obs, config.chunk_len, dt), dtype=np.float64)
        if velocities.shape != (config.chunk_len,):
            raise ValueError(
                f"chunk policy returned shape {velocities.shape}, expected ({config.chunk_len},)")
        if config.preempt:
            buffer.clear()
        for v in velocities:
            buffer.append((float(v), obs.tick))
        produced += config.chunk_len

    for n in range(total_ticks):
        now = n / f_l
        tgt = target_position(now, phase)

        # Policy actor first (ordering: policy completes/starts, then the
        # controller consumes within the same tick).
        if busy and n >= completion_tick:
            deposit(pending_obs)
            busy = False
        if not busy:
            obs = Observation(n, now, agent, tgt, target_velocity(now, phase), np.array(recent))
            if latency_ticks == 0:
                deposit(obs)
            else:
                pending_obs = obs
                completion_tick = n + latency_ticks
                busy = True

        # Controller actor: one frame per tick, zero-order hold on empty.
        if buffer:
            held_action, held_obs_tick = buffer.popleft()
            consumed += 1
            fresh[n] = True
            frame_staleness.append((n - held_obs_tick) / f_l)
            if first_fresh < 0:
                first_fresh = n
        else:
            starved[n] = True
        if produced - consumed != len(buffer):
            raise AssertionError("frame conservation violated")  # pragma: no cover

        cols["time"][n] = now
        cols["action"][n] = held_action
        cols["staleness"][n] = (n - held_obs_tick) / f_l if held_obs_tick >= 0 else np.nan
        cols["buffer_depth"][n] = len(buffer)
        cols["target"][n] = tgt
        cols["agent"][n] = agent

        executed = _DEFAULT_FRAME.copy()
        executed[0] = held_action
        recent.append(executed)
        agent += held_action * dt

    return SimTrace(
        config=config,
        time=cols["time"],
        action=cols["action"],
        staleness=cols["staleness"],
        buffer_depth=cols["buffer_depth"],
        target=cols["target"],
        agent=cols["agent"],
        starved=starved,
        fresh=fresh,
        frame_staleness=np.array(frame_staleness),
        produced=produced,
        consumed=consumed,
        first_fresh_tick=first_fresh,
    )


def staleness_profile(trace: SimTrace, bins: int = 20):
    """Histogram and maximum of per-executed-frame staleness."""
    if len(trace) == 0:
        raise ValueError("staleness_profile: empty trace")
    window = trace.frame_staleness
    if len(window) == 0:
        return (np.zeros(bins, dtype=np.int64), np.linspace(0.0, 1.0, bins + 1)), float("nan")
    counts, edges = np.histogram(window, bins=bins)
    return (counts, edges), float(window.max())


SWEEP_COLUMNS = (
    "controller_hz", "policy_hz", "chunk_len", "delivery_hz", "ticks",
    "starvation_fraction", "post_warmup_starvation", "mean_staleness",
    "max_staleness", "tracking_rmse", "produced", "consumed", "seed",
)


def sweep(configs: list[SimConfig], chunk_policy=None) -> list[dict]:
    """Run each config and return one summary row per config, in order."""
    if not configs:
        raise ValueError("sweep: empty config list")
    return [run_sim(cfg, chunk_policy).summary() for cfg in configs]


def sweep_to_csv(rows: list[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


def trace_to_csv(trace: SimTrace) -> str:
    """One row per controller tick, stable column order."""
    header = "tick,time,action,staleness,buffer_depth,target,agent,starved,fresh"
    lines = [header]
    for n in range(len(trace)):
        lines.append(",".join([
            str(n),
            repr(trace.time[n]),
            repr(trace.action[n]),
            repr(trace.staleness[n]),
            str(int(trace.buffer_depth[n])),
            repr(trace.target[n]),
            repr(trace.agent[n]),
            str(int(trace.starved[n])),
            str(int(trace.fresh[n])),
        ]))
    return "\n".join(lines) + "\n"


def summary_to_text(trace: SimTrace) -> str:
    return "".join(f"{key}={value!r}\n" for key, value in trace.summary().items())
