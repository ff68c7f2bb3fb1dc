"""Fixed-timestep kinematic simulation.

One trial is one single-threaded loop: every dt the world gates motion
for close robot pairs, steps each robot's controller in id order, and
prunes expired pheromones.  All randomness flows through named streams
keyed by the trial seed, so a trial with a non-networked policy replays
byte-identically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    Arena,
    CpfaParams,
    PHEROMONE_EXPIRY_THRESHOLD,
    PheromoneWaypoint,
    RngStreams,
    pheromone_strength,
    prune_pheromones,
)
from .layouts import LayoutSpec, ResourceField, generate

# Turn-then-drive gate: the robot only translates once its heading is
# within this error of the bearing to its target.
HEADING_GATE_RAD = math.pi / 6.0
# Fixed in-place turn applied to yield-gated robots to break deadlocks.
YIELD_TURN_RAD = 0.1
# Robots spawn on a ring this far outside the central zone.
SPAWN_RING_MARGIN = 0.3
# At-centre prompts carry at most this many waypoints.
PHEROMONE_SUMMARY_CAP = 10


class TrialError(Exception):
    """A trial could not be initialised or driven to completion."""


@dataclass
class RobotPose:
    x: float
    y: float
    heading: float  # radians in [-pi, pi)


@dataclass(frozen=True)
class MotionLimits:
    linear_speed: float = 0.3  # m/s
    angular_speed: float = 1.0  # rad/s
    pickup_radius: float = 0.3  # m
    yield_radius: float = 0.35  # m
    arrival_tolerance: float = 0.05  # m
    density_radius: float = 0.5  # m, resource-density sensing disc
    dt: float = 0.1  # s

    def __post_init__(self):
        if self.dt <= 0 or self.dt > 0.2:
            raise ValueError("dt must be in (0, 0.2] s")


@dataclass
class TrialConfig:
    arena: Arena
    team_size: int
    layout: LayoutSpec
    params: CpfaParams
    policy: str = "cascade"
    duration: float = 1200.0
    seed: int = 0
    limits: MotionLimits = field(default_factory=MotionLimits)
    gateway: object = None  # GatewayConfig when policy == "llm"
    pheromone_selection: str = "strength"  # or "uniform"

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be nonnegative")
        if self.team_size < 1:
            raise ValueError("team_size must be positive")


@dataclass
class TrialResult:
    deposits: int
    event_log: list
    llm_calls: int
    llm_fallbacks: int
    latency_samples: list
    outcome_counts: dict
    settings: dict

    def log_bytes(self) -> bytes:
        """The event log as canonical JSONL, for determinism comparisons."""
        lines = [json.dumps(rec, separators=(",", ":")) for rec in self.event_log]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


@dataclass
class PickupEvent:
    robot_id: str
    location: tuple[float, float]
    density: int


@dataclass
class DepositEvent:
    robot_id: str
    position: tuple[float, float]


def wrap_angle(angle: float) -> float:
    """Wrap to [-pi, pi)."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def move_toward(pose: RobotPose, target: tuple[float, float], limits: MotionLimits) -> RobotPose:
    """One dt of turn-then-drive motion toward ``target``.

    Heading rotates toward the bearing by at most angular_speed*dt; the
    robot translates only once the remaining heading error is inside the
    gate, and never overshoots the target.
    """
    dx = target[0] - pose.x
    dy = target[1] - pose.y
    dist = math.hypot(dx, dy)
    if dist <= limits.arrival_tolerance:
        return RobotPose(pose.x, pose.y, pose.heading)
    bearing = math.atan2(dy, dx)
    error = wrap_angle(bearing - pose.heading)
    max_turn = limits.angular_speed * limits.dt
    turn = max(-max_turn, min(max_turn, error))
    heading = wrap_angle(pose.heading + turn)
    remaining = wrap_angle(bearing - heading)
    x, y = pose.x, pose.y
    if abs(remaining) <= HEADING_GATE_RAD:
        step = min(limits.linear_speed * limits.dt, dist)
        x += step * math.cos(heading)
        y += step * math.sin(heading)
    return RobotPose(x, y, heading)


def apply_yield(poses: list[RobotPose], limits: MotionLimits) -> list[bool]:
    """Per-robot motion gates from the pairwise yield rule.

    For every pair closer than yield_radius the higher-indexed robot is
    gated; gates compose over pairs, so of two close robots exactly the
    higher one halts.
    """
    n = len(poses)
    gated = [False] * n
    for j in range(1, n):
        for i in range(j):
            if math.hypot(poses[i].x - poses[j].x, poses[i].y - poses[j].y) < limits.yield_radius:
                gated[j] = True
                break
    return gated


class PheromoneManager:
    """The shared pheromone field: deposit, decay, prune, and select."""

    def __init__(self, decay_rate: float, selection: str = "strength",
                 threshold: float = PHEROMONE_EXPIRY_THRESHOLD):
        self.decay_rate = decay_rate
        self.selection = selection
        self.threshold = threshold
        self.waypoints: list[PheromoneWaypoint] = []

    def add(self, location: tuple[float, float], now: float, owner: str) -> PheromoneWaypoint:
        wp = PheromoneWaypoint(location=location, created_at=now, owner_robot=owner)
        self.waypoints.append(wp)
        return wp

    def prune(self, now: float) -> None:
        self.waypoints = prune_pheromones(self.waypoints, now, self.decay_rate, self.threshold)

    def count(self, now: float) -> int:
        return sum(
            1 for w in self.waypoints
            if pheromone_strength(w, now, self.decay_rate) >= self.threshold
        )

    def active(self, now: float) -> list[tuple[PheromoneWaypoint, float]]:
        pairs = []
        for w in self.waypoints:
            s = pheromone_strength(w, now, self.decay_rate)
            if s >= self.threshold:
                pairs.append((w, s))
        return pairs

    def summary(self, now: float, cap: int = PHEROMONE_SUMMARY_CAP) -> tuple:
        """Locations and strengths of the strongest waypoints, capped."""
        pairs = sorted(self.active(now), key=lambda p: -p[1])[:cap]
        return tuple((w.location, s) for w, s in pairs)

    def select(self, now: float, rng: np.random.Generator) -> Optional[PheromoneWaypoint]:
        pairs = self.active(now)
        if not pairs:
            return None
        if self.selection == "uniform":
            idx = int(rng.integers(len(pairs)))
        else:
            weights = np.array([s for _, s in pairs])
            idx = int(rng.choice(len(pairs), p=weights / weights.sum()))
        return pairs[idx][0]


class World:
    """Mutable state of one trial plus the counters and the event log."""

    def __init__(self, config: TrialConfig, resources: ResourceField | None = None,
                 policy_factory=None):
        from . import cpfa  # deferred: cpfa drives robots built by this world
        from .policy import make_policy

        self.config = config
        self.arena = config.arena
        self.params = config.params
        self.limits = config.limits
        self.streams = RngStreams(config.seed)
        self.resources = resources if resources is not None else generate(config.layout)
        self.pheromones = PheromoneManager(
            decay_rate=config.params.lambda_d, selection=config.pheromone_selection
        )
        self.step_index = 0
        self.deposits = 0
        self.event_log: list = []
        self.llm_calls = 0
        self.llm_fallbacks = 0
        self.latency_samples: list = []
        self.outcome_counts: dict = {}
        self.injected_latency = getattr(config.gateway, "injected_latency", None)
        self._llm_client = None

        if policy_factory is None:
            client = None
            if config.policy == "llm":
                from .gateway import LlmClient

                if config.gateway is None:
                    raise TrialError("policy 'llm' requires a gateway config")
                client = LlmClient(config.gateway)
                self._llm_client = client

            lenient = bool(getattr(config.gateway, "lenient_validation", False))

            def policy_factory(index: int):
                return make_policy(
                    config.policy, config.params, self.streams.policy(index),
                    client=client, lenient=lenient,
                )

        spawn_radius = config.arena.center_zone_radius + SPAWN_RING_MARGIN
        self.robots = []
        self.policies = []
        for i in range(config.team_size):
            angle = 2.0 * math.pi * i / config.team_size
            pose = RobotPose(
                spawn_radius * math.cos(angle), spawn_radius * math.sin(angle), wrap_angle(angle)
            )
            robot = cpfa.Robot(index=i, pose=pose, rng=self.streams.robot(i), params=config.params)
            robot.assign_disperse_target(self)
            self.robots.append(robot)
            try:
                self.policies.append(policy_factory(i))
            except Exception as exc:
                raise TrialError(f"policy init failed for robot {i}: {exc}") from exc

    # -- clock ------------------------------------------------------------

    @property
    def t(self) -> float:
        return self.step_index * self.limits.dt

    # -- geometry ---------------------------------------------------------

    def clamp_to_walls(self, x: float, y: float) -> tuple[float, float, bool]:
        cx = max(-self.arena.half_width, min(self.arena.half_width, x))
        cy = max(-self.arena.half_height, min(self.arena.half_height, y))
        return cx, cy, (cx != x or cy != y)

    def sample_arena_point(self, rng: np.random.Generator) -> tuple[float, float]:
        """Uniform point in the arena outside the central zone."""
        while True:
            x = rng.uniform(-self.arena.half_width, self.arena.half_width)
            y = rng.uniform(-self.arena.half_height, self.arena.half_height)
            if math.hypot(x, y) > self.arena.center_zone_radius:
                return (x, y)

    def translation_allowed(self, robot, x: float, y: float) -> bool:
        """Reject a move that would end inside another robot's hard radius."""
        min_sep = 0.5 * self.limits.yield_radius
        for other in self.robots:
            if other.index == robot.index:
                continue
            if math.hypot(other.pose.x - x, other.pose.y - y) < min_sep:
                return False
        return True

    # -- resource interactions ---------------------------------------------

    def try_pickup(self, robot) -> Optional[PickupEvent]:
        """Pick the nearest unpicked resource inside the pickup disc."""
        res = self.resources
        if len(res) == 0:
            return None
        free = ~res.picked
        if not free.any():
            return None
        dx = res.positions[:, 0] - robot.pose.x
        dy = res.positions[:, 1] - robot.pose.y
        d2 = dx * dx + dy * dy
        d2[~free] = np.inf
        idx = int(np.argmin(d2))
        if d2[idx] > self.limits.pickup_radius**2:
            return None
        res.picked[idx] = True
        loc = (float(res.positions[idx, 0]), float(res.positions[idx, 1]))
        ndx = res.positions[:, 0] - loc[0]
        ndy = res.positions[:, 1] - loc[1]
        near = (ndx * ndx + ndy * ndy) <= self.limits.density_radius**2
        density = int((near & ~res.picked).sum())
        event = PickupEvent(robot_id=robot.robot_id, location=loc, density=density)
        self.log(robot, "PICKUP", {"location": [loc[0], loc[1]], "density": density})
        return event

    def try_deposit(self, robot) -> Optional[DepositEvent]:
        if math.hypot(robot.pose.x, robot.pose.y) > self.arena.center_zone_radius:
            return None
        robot.carrying = False
        self.deposits += 1
        event = DepositEvent(robot_id=robot.robot_id, position=(robot.pose.x, robot.pose.y))
        self.log(robot, "DEPOSIT", {"total": self.deposits})
        return event

    # -- bookkeeping --------------------------------------------------------

    def log(self, robot, kind: str, payload: dict) -> None:
        self.event_log.append(
            {"t": round(self.t, 6), "robot": robot.robot_id if robot else None,
             "kind": kind, "payload": payload}
        )

    def record_decision(self, robot, event, decision) -> None:
        if decision.llm_call:
            self.llm_calls += 1
            if decision.latency is not None:
                self.latency_samples.append(decision.latency)
            outcome = decision.fallback_reason or "ok"
            self.outcome_counts[outcome] = self.outcome_counts.get(outcome, 0) + 1
            if decision.source == "fallback":
                self.llm_fallbacks += 1

    def carrying_count(self) -> int:
        return sum(1 for r in self.robots if r.carrying)

    # -- main loop ----------------------------------------------------------

    def step(self) -> None:
        gates = apply_yield([r.pose for r in self.robots], self.limits)
        for robot, policy, gated in zip(self.robots, self.policies, gates):
            robot.step(self, policy, gated)
        self.step_index += 1
        self.pheromones.prune(self.t)

    def run(self) -> TrialResult:
        n_steps = int(round(self.config.duration / self.limits.dt))
        for _ in range(n_steps):
            self.step()
        return self.result()

    def result(self) -> TrialResult:
        return TrialResult(
            deposits=self.deposits,
            event_log=self.event_log,
            llm_calls=self.llm_calls,
            llm_fallbacks=self.llm_fallbacks,
            latency_samples=self.latency_samples,
            outcome_counts=dict(self.outcome_counts),
            settings=self.settings(),
        )

    def settings(self) -> dict:
        lim = self.limits
        return {
            "team_size": self.config.team_size,
            "arena_width": 2 * self.arena.half_width,
            "center_zone_radius": self.arena.center_zone_radius,
            "distribution": self.config.layout.distribution.value,
            "resource_count": self.config.layout.resource_count,
            "policy": self.config.policy,
            "duration": self.config.duration,
            "seed": self.config.seed,
            "layout_seed": self.config.layout.seed,
            "dt": lim.dt,
            "linear_speed": lim.linear_speed,
            "angular_speed": lim.angular_speed,
            "pickup_radius": lim.pickup_radius,
            "yield_radius": lim.yield_radius,
            "arrival_tolerance": lim.arrival_tolerance,
            "density_radius": lim.density_radius,
            "exclusion_radius": self.config.layout.keep_out,
            "pheromone_threshold": self.pheromones.threshold,
            "params": self.params.as_dict(),
        }


def run_trial(config: TrialConfig, resources: ResourceField | None = None,
              policy_factory=None) -> TrialResult:
    """Run one full trial and return its result."""
    world = World(config, resources=resources, policy_factory=policy_factory)
    return world.run()
