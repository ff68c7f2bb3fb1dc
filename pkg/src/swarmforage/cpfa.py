"""Per-robot central-place foraging controller.

Each robot runs the classic ant-inspired state machine: disperse, walk a
correlated random search, carry finds back to the central zone, and pick
the next move from site fidelity, pheromone trails, or fresh random
search.  The three tactical choices (after a deposit, on an empty-handed
arrival, and on search starvation) are delegated to a pluggable policy;
the parameter-driven cascades here are both the vanilla behaviour and
the fallback for failed policy calls.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import SIGMA_MAX, CpfaParams, FatalPolicyError, poisson_cdf
from .engine import YIELD_TURN_RAD, RobotPose, move_toward, wrap_angle
from .policy import (
    DecisionEvent,
    EventType,
    PolicyDecision,
    TacticalAction,
    build_whitelist,
    fallback_decide,
)

# Unsuccessful search raises the starvation decision after T_S seconds,
# then again every T_Q seconds until pickup or return.
SEARCH_STARVATION_AFTER_S = 60.0
SEARCH_STARVATION_EVERY_S = 30.0
# Cadence of the stochastic per-waypoint checks (p_s, p_r) and of search
# heading updates.
TICK_PERIOD_S = 1.0

_EPS = 1e-9


class FsmState(enum.Enum):
    DISPERSING = "DISPERSING"
    SEARCHING_UNINFORMED = "SEARCHING_UNINFORMED"
    SEARCHING_INFORMED = "SEARCHING_INFORMED"
    RETURNING_WITH_RESOURCE = "RETURNING_WITH_RESOURCE"
    RETURNING_EMPTY = "RETURNING_EMPTY"
    TRAVELING_TO_SITE = "TRAVELING_TO_SITE"
    TRAVELING_TO_PHEROMONE = "TRAVELING_TO_PHEROMONE"
    AT_CENTER = "AT_CENTER"


SEARCHING_STATES = (FsmState.SEARCHING_UNINFORMED, FsmState.SEARCHING_INFORMED)


@dataclass
class ForagerMemory:
    """What one robot remembers about its own foraging history."""

    last_pickup_location: Optional[tuple[float, float]] = None
    last_density: int = 0
    fidelity_flag: bool = False  # set on pickup, cleared on give-up
    last_pickup_time: float = 0.0
    search_started_at: Optional[float] = None
    informed_search_started_at: Optional[float] = None

    def time_since_last_pickup(self, now: float) -> float:
        return now - self.last_pickup_time


def uninformed_step_heading(
    heading: float, params: CpfaParams, rng: np.random.Generator
) -> float:
    """Correlated-random-walk turn with fixed spread rho_u."""
    if params.rho_u == 0.0:
        return heading  # straight line, exactly
    return wrap_angle(heading + rng.normal(0.0, params.rho_u))


def informed_sigma(t_informed: float, params: CpfaParams) -> float:
    """Turning spread of the informed walk after t seconds on site.

    Starts at the maximum (a thorough local sweep) and decays toward the
    uninformed baseline at rate lambda_i.
    """
    if t_informed < 0:
        raise ValueError("t_informed must be nonnegative")
    return params.rho_u + (SIGMA_MAX - params.rho_u) * math.exp(-params.lambda_i * t_informed)


def informed_step_heading(
    heading: float, t_informed: float, params: CpfaParams, rng: np.random.Generator
) -> float:
    return wrap_angle(heading + rng.normal(0.0, informed_sigma(t_informed, params)))


def cascade_post_deposit(
    mem: ForagerMemory,
    pheromones_active: int,
    params: CpfaParams,
    rng: np.random.Generator,
) -> TacticalAction:
    """Vanilla choice after a deposit: fidelity, then trails, then random."""
    if mem.fidelity_flag and rng.uniform() < poisson_cdf(mem.last_density, params.lambda_f):
        return TacticalAction.USE_SITE_FIDELITY
    if pheromones_active > 0:
        return TacticalAction.FOLLOW_PHEROMONE
    return TacticalAction.UNINFORMED_SEARCH


def cascade_central_arrival(
    mem: ForagerMemory,
    pheromones_active: int,
    params: CpfaParams,
    rng: np.random.Generator,
) -> TacticalAction:
    """Two-way cascade after an empty-handed return (fidelity flag was
    cleared on give-up, so that branch is disabled)."""
    if pheromones_active > 0:
        return TacticalAction.FOLLOW_PHEROMONE
    return TacticalAction.UNINFORMED_SEARCH


def should_lay_pheromone(c: int, params: CpfaParams, rng: np.random.Generator) -> bool:
    return poisson_cdf(c, params.lambda_lp) > rng.uniform()


def should_give_up(params: CpfaParams, rng: np.random.Generator) -> bool:
    return rng.uniform() < params.p_r


def should_switch_to_search(params: CpfaParams, rng: np.random.Generator) -> bool:
    return rng.uniform() < params.p_s


@dataclass
class Robot:
    """One robot's pose, carried-resource flag, memory, and timers."""

    index: int
    pose: RobotPose
    rng: np.random.Generator
    params: CpfaParams
    state: FsmState = FsmState.DISPERSING
    carrying: bool = False
    target: Optional[tuple[float, float]] = None
    memory: ForagerMemory = field(default_factory=ForagerMemory)
    next_tick_at: float = TICK_PERIOD_S
    next_starvation_at: Optional[float] = None
    hold_until: Optional[float] = None
    pending: Optional[tuple] = None

    @property
    def robot_id(self) -> str:
        return f"r{self.index}"

    def assign_disperse_target(self, world) -> None:
        self.target = world.sample_arena_point(self.rng)

    def step(self, world, policy, gated: bool = False) -> FsmState:
        return fsm_step(self, world, policy, gated)

    # -- internals ----------------------------------------------------------

    def _set_state(self, world, new_state: FsmState) -> None:
        if new_state is self.state:
            return
        world.log(self, "STATE", {"from": self.state.value, "to": new_state.value})
        self.state = new_state
        self.next_tick_at = world.t + TICK_PERIOD_S

    def _tick_due(self, now: float) -> bool:
        if now >= self.next_tick_at - _EPS:
            self.next_tick_at += TICK_PERIOD_S
            return True
        return False

    def _begin_search(self, world, informed: bool) -> None:
        now = world.t
        self.memory.search_started_at = now
        self.memory.informed_search_started_at = now if informed else None
        self.next_starvation_at = now + SEARCH_STARVATION_AFTER_S
        self.target = None
        self._set_state(
            world,
            FsmState.SEARCHING_INFORMED if informed else FsmState.SEARCHING_UNINFORMED,
        )

    def _go_home(self, world, carrying: bool) -> None:
        self.target = (0.0, 0.0)
        self.next_starvation_at = None
        self._set_state(
            world,
            FsmState.RETURNING_WITH_RESOURCE if carrying else FsmState.RETURNING_EMPTY,
        )


def _search_drive(robot: Robot, world, gated: bool) -> None:
    """Forward drive along the current heading, reflecting off walls."""
    lim = world.limits
    if gated:
        robot.pose.heading = wrap_angle(robot.pose.heading + YIELD_TURN_RAD)
        return
    h = robot.pose.heading
    nx = robot.pose.x + lim.linear_speed * lim.dt * math.cos(h)
    ny = robot.pose.y + lim.linear_speed * lim.dt * math.sin(h)
    cx, cy, clamped = world.clamp_to_walls(nx, ny)
    if clamped:
        if cx != nx:
            h = wrap_angle(math.pi - h)
        if cy != ny:
            h = wrap_angle(-h)
        robot.pose.heading = h
    if world.translation_allowed(robot, cx, cy):
        robot.pose.x = cx
        robot.pose.y = cy


def _travel_drive(robot: Robot, world, gated: bool) -> bool:
    """One step toward the current target; True once within tolerance."""
    lim = world.limits
    tx, ty = robot.target
    if math.hypot(tx - robot.pose.x, ty - robot.pose.y) <= lim.arrival_tolerance:
        return True
    if gated:
        robot.pose.heading = wrap_angle(robot.pose.heading + YIELD_TURN_RAD)
        return False
    new_pose = move_toward(robot.pose, robot.target, lim)
    cx, cy, clamped = world.clamp_to_walls(new_pose.x, new_pose.y)
    if clamped and robot.state is FsmState.DISPERSING:
        # wall contact while heading to a random waypoint: pick a new one
        robot.assign_disperse_target(world)
    if not world.translation_allowed(robot, cx, cy):
        cx, cy = robot.pose.x, robot.pose.y
    robot.pose.x = cx
    robot.pose.y = cy
    robot.pose.heading = new_pose.heading
    return math.hypot(tx - cx, ty - cy) <= lim.arrival_tolerance


def _build_event(robot: Robot, world, event_type: EventType) -> DecisionEvent:
    now = world.t
    mem = robot.memory
    at_center = event_type is not EventType.SEARCH_STARVATION
    return DecisionEvent(
        robot_id=robot.robot_id,
        event_type=event_type,
        current_state=robot.state.value,
        sim_time_sec=now,
        position=(robot.pose.x, robot.pose.y),
        resource_density=mem.last_density,
        time_since_last_pickup=mem.time_since_last_pickup(now),
        last_pickup_location=mem.last_pickup_location,
        active_pheromone_count=world.pheromones.count(now),
        pheromone_summary=world.pheromones.summary(now) if at_center else None,
        allowed_actions=tuple(build_whitelist(event_type)),
    )


def _ask_policy(robot: Robot, world, policy, event: DecisionEvent) -> PolicyDecision:
    try:
        decision = policy.decide(event)
    except FatalPolicyError:
        raise
    except Exception as exc:  # the controller never stalls on a policy failure
        action = fallback_decide(event, robot.params, world.streams.policy(robot.index))
        decision = PolicyDecision(action=action, source="fallback", fallback_reason="policy_error")
        world.log(robot, "POLICY_ERROR", {"error": str(exc)})
    world.record_decision(robot, event, decision)
    return decision


def _log_decision(
    robot: Robot, world, event: DecisionEvent, decision: PolicyDecision,
    source: str, action: TacticalAction, requested: Optional[str],
) -> None:
    payload = {
        "event_type": event.event_type.value,
        "action": action.value,
        "source": source,
    }
    if requested is not None:
        payload["requested_action"] = requested
    if decision.rationale is not None:
        payload["rationale"] = decision.rationale
    if decision.fallback_reason is not None:
        payload["fallback_reason"] = decision.fallback_reason
    if decision.latency is not None:
        payload["latency"] = decision.latency
    payload["context"] = event.payload()
    if decision.request_body is not None:
        payload["request"] = decision.request_body
    if decision.response_body is not None:
        payload["response"] = decision.response_body
    world.log(robot, "DECISION", payload)


def _execute_center_action(robot: Robot, world, event: DecisionEvent,
                           decision: PolicyDecision) -> None:
    """Carry out a validated at-centre action, degrading to uninformed
    search when the choice cannot execute (no waypoint, no memory)."""
    action = decision.action
    source = decision.source
    requested = None
    target_wp = None
    if action is TacticalAction.FOLLOW_PHEROMONE:
        target_wp = world.pheromones.select(world.t, robot.rng)
        if target_wp is None:
            requested, action, source = action.value, TacticalAction.UNINFORMED_SEARCH, "degraded"
    if action is TacticalAction.USE_SITE_FIDELITY and robot.memory.last_pickup_location is None:
        requested, action, source = action.value, TacticalAction.UNINFORMED_SEARCH, "degraded"

    _log_decision(robot, world, event, decision, source, action, requested)

    if action is TacticalAction.USE_SITE_FIDELITY:
        robot.target = robot.memory.last_pickup_location
        robot._set_state(world, FsmState.TRAVELING_TO_SITE)
    elif action is TacticalAction.FOLLOW_PHEROMONE:
        robot.target = target_wp.location
        robot._set_state(world, FsmState.TRAVELING_TO_PHEROMONE)
    else:
        robot.assign_disperse_target(world)
        robot._set_state(world, FsmState.DISPERSING)


def _center_decision(robot: Robot, world, policy, event_type: EventType) -> None:
    event = _build_event(robot, world, event_type)
    robot._set_state(world, FsmState.AT_CENTER)
    decision = _ask_policy(robot, world, policy, event)
    if world.injected_latency and decision.llm_call:
        robot.hold_until = world.t + world.injected_latency
        robot.pending = (event, decision)
        return
    _execute_center_action(robot, world, event, decision)


def _starvation_decision(robot: Robot, world, policy) -> None:
    event = _build_event(robot, world, EventType.SEARCH_STARVATION)
    decision = _ask_policy(robot, world, policy, event)
    _log_decision(robot, world, event, decision, decision.source, decision.action, None)
    if world.injected_latency and decision.llm_call:
        robot.hold_until = world.t + world.injected_latency
        robot.pending = ("starvation", decision)
        return
    _apply_starvation_action(robot, world, decision.action)


def _apply_starvation_action(robot: Robot, world, action: TacticalAction) -> None:
    if action is TacticalAction.RETURN_FOR_INFO:
        robot.memory.fidelity_flag = False
        robot._go_home(world, carrying=False)
    else:
        robot.next_starvation_at = world.t + SEARCH_STARVATION_EVERY_S


def _handle_deposit(robot: Robot, world, policy) -> None:
    world.try_deposit(robot)
    mem = robot.memory
    if mem.fidelity_flag and should_lay_pheromone(mem.last_density, robot.params, robot.rng):
        world.pheromones.add(mem.last_pickup_location, world.t, robot.robot_id)
        world.log(robot, "PHEROMONE", {
            "location": [mem.last_pickup_location[0], mem.last_pickup_location[1]],
            "density": mem.last_density,
        })
    _center_decision(robot, world, policy, EventType.POST_DEPOSIT_DECISION)


def fsm_step(robot: Robot, world, policy, gated: bool = False) -> FsmState:
    """Advance one robot by one dt of its current state's behaviour."""
    now = world.t
    mem = robot.memory

    if robot.hold_until is not None:
        if now + _EPS < robot.hold_until:
            return robot.state
        pending, robot.pending, robot.hold_until = robot.pending, None, None
        if pending is not None:
            head, decision = pending
            if head == "starvation":
                _apply_starvation_action(robot, world, decision.action)
            else:
                _execute_center_action(robot, world, head, decision)
        return robot.state

    if robot.state in SEARCHING_STATES:
        if not robot.carrying:
            pickup = world.try_pickup(robot)
            if pickup is not None:
                robot.carrying = True
                mem.last_pickup_location = pickup.location
                mem.last_density = pickup.density
                mem.fidelity_flag = True
                mem.last_pickup_time = now
                robot._go_home(world, carrying=True)
                return robot.state
        tick = robot._tick_due(now)
        if policy.uses_starvation:
            if robot.next_starvation_at is not None and now >= robot.next_starvation_at - _EPS:
                _starvation_decision(robot, world, policy)
                if robot.state not in SEARCHING_STATES or robot.hold_until is not None:
                    return robot.state
        elif tick and should_give_up(robot.params, robot.rng):
            mem.fidelity_flag = False
            world.log(robot, "GIVE_UP", {"searched": round(now - (mem.search_started_at or now), 6)})
            robot._go_home(world, carrying=False)
            return robot.state
        if tick:
            if robot.state is FsmState.SEARCHING_INFORMED:
                t_informed = now - (mem.informed_search_started_at or now)
                robot.pose.heading = informed_step_heading(
                    robot.pose.heading, t_informed, robot.params, robot.rng
                )
            else:
                robot.pose.heading = uninformed_step_heading(
                    robot.pose.heading, robot.params, robot.rng
                )
        _search_drive(robot, world, gated)
        return robot.state

    if robot.state is FsmState.DISPERSING:
        if robot._tick_due(now) and should_switch_to_search(robot.params, robot.rng):
            robot._begin_search(world, informed=False)
            return robot.state
        if _travel_drive(robot, world, gated):
            robot._begin_search(world, informed=False)
        return robot.state

    if robot.state in (FsmState.TRAVELING_TO_SITE, FsmState.TRAVELING_TO_PHEROMONE):
        if _travel_drive(robot, world, gated):
            robot._begin_search(world, informed=True)
        return robot.state

    if robot.state is FsmState.RETURNING_WITH_RESOURCE:
        if math.hypot(robot.pose.x, robot.pose.y) <= world.arena.center_zone_radius:
            _handle_deposit(robot, world, policy)
            return robot.state
        _travel_drive(robot, world, gated)
        return robot.state

    if robot.state is FsmState.RETURNING_EMPTY:
        if math.hypot(robot.pose.x, robot.pose.y) <= world.arena.center_zone_radius:
            _center_decision(robot, world, policy, EventType.CENTRAL_ZONE_ARRIVAL)
            return robot.state
        _travel_drive(robot, world, gated)
        return robot.state

    # AT_CENTER only persists while a decision hold is pending
    return robot.state
