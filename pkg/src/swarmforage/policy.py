"""Tactical decisions at the three controller decision points.

A robot that deposits a resource, arrives at the centre empty-handed, or
searches too long without success builds a DecisionEvent from its own
local state plus the shared pheromone manager and asks its policy for an
action.  Policies are interchangeable: the parameter-driven cascade, a
deterministic scripted heuristic, a fixed-action stand-in, or an
LLM-backed client that falls back to the cascade on any failure.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CpfaParams


class TacticalAction(str, enum.Enum):
    USE_SITE_FIDELITY = "USE_SITE_FIDELITY"
    FOLLOW_PHEROMONE = "FOLLOW_PHEROMONE"
    UNINFORMED_SEARCH = "UNINFORMED_SEARCH"
    CONTINUE_SEARCH = "CONTINUE_SEARCH"
    RETURN_FOR_INFO = "RETURN_FOR_INFO"


class EventType(str, enum.Enum):
    POST_DEPOSIT_DECISION = "POST_DEPOSIT_DECISION"
    CENTRAL_ZONE_ARRIVAL = "CENTRAL_ZONE_ARRIVAL"
    SEARCH_STARVATION = "SEARCH_STARVATION"


CENTER_ACTIONS = (
    TacticalAction.USE_SITE_FIDELITY,
    TacticalAction.FOLLOW_PHEROMONE,
    TacticalAction.UNINFORMED_SEARCH,
)
STARVATION_ACTIONS = (
    TacticalAction.CONTINUE_SEARCH,
    TacticalAction.RETURN_FOR_INFO,
)

# Time-since-pickup beyond which the scripted heuristic treats a search
# bout as hopeless and returns for information.
SCRIPTED_STARVATION_CUTOFF_S = 180.0


def build_whitelist(event_type: EventType) -> list[str]:
    """Static, world-state-independent whitelist for an event type."""
    if event_type is EventType.SEARCH_STARVATION:
        return [a.value for a in STARVATION_ACTIONS]
    return [a.value for a in CENTER_ACTIONS]


@dataclass(frozen=True)
class DecisionEvent:
    """Prompt payload for one decision, built from one robot's view."""

    robot_id: str
    event_type: EventType
    current_state: str
    sim_time_sec: float
    position: tuple[float, float]
    resource_density: int
    time_since_last_pickup: float
    last_pickup_location: Optional[tuple[float, float]]
    active_pheromone_count: int
    pheromone_summary: Optional[tuple] = None  # ((x, y), strength) pairs, at-centre only
    allowed_actions: tuple[str, ...] = ()

    def payload(self) -> dict:
        """JSON-shaped dict with stable field order; absent fields omitted."""
        doc: dict = {
            "robot_id": self.robot_id,
            "event_type": self.event_type.value,
            "current_state": self.current_state,
            "sim_time_sec": round(self.sim_time_sec, 1),
            "position": {"x": round(self.position[0], 2), "y": round(self.position[1], 2)},
            "resource_density": self.resource_density,
            "time_since_last_pickup": round(self.time_since_last_pickup, 1),
        }
        if self.last_pickup_location is not None:
            doc["last_pickup_location"] = {
                "x": round(self.last_pickup_location[0], 2),
                "y": round(self.last_pickup_location[1], 2),
            }
        doc["active_pheromone_count"] = self.active_pheromone_count
        if self.pheromone_summary is not None:
            doc["pheromone_summary"] = [
                {"x": round(loc[0], 2), "y": round(loc[1], 2), "strength": round(s, 3)}
                for loc, s in self.pheromone_summary
            ]
        doc["allowed_actions"] = list(self.allowed_actions)
        return doc


@dataclass(frozen=True)
class DecisionResponse:
    action: str
    rationale: str


@dataclass(frozen=True)
class FallbackSignal:
    """Marks a decision that must revert to the parameter-driven cascade."""

    reason: str  # "timeout" | "parse_error" | "out_of_whitelist"


def validate(
    raw: DecisionResponse | FallbackSignal,
    event: DecisionEvent,
    lenient: bool = False,
) -> TacticalAction | FallbackSignal:
    """Whitelist check: exact, case-sensitive membership unless lenient."""
    if isinstance(raw, FallbackSignal):
        return raw
    action = raw.action
    if lenient:
        action = action.strip().upper()
    if action in event.allowed_actions:
        return TacticalAction(action)
    return FallbackSignal("out_of_whitelist")


def fallback_decide(
    event: DecisionEvent, params: CpfaParams, rng: np.random.Generator
) -> TacticalAction:
    """The cascade choice for an event whose primary policy failed."""
    from . import cpfa  # deferred: cpfa imports this module for the action types

    if event.event_type is EventType.SEARCH_STARVATION:
        if cpfa.should_give_up(params, rng):
            return TacticalAction.RETURN_FOR_INFO
        return TacticalAction.CONTINUE_SEARCH
    if event.event_type is EventType.POST_DEPOSIT_DECISION:
        return cpfa.cascade_post_deposit(
            cpfa.ForagerMemory(
                last_pickup_location=event.last_pickup_location,
                last_density=event.resource_density,
                fidelity_flag=event.last_pickup_location is not None,
            ),
            event.active_pheromone_count,
            params,
            rng,
        )
    return cpfa.cascade_central_arrival(
        cpfa.ForagerMemory(
            last_pickup_location=event.last_pickup_location,
            last_density=event.resource_density,
            fidelity_flag=False,
        ),
        event.active_pheromone_count,
        params,
        rng,
    )


def scripted_decide(event: DecisionEvent) -> DecisionResponse:
    """Deterministic heuristic mirroring the behaviour a good tactical
    decision-maker exhibits: exploit remembered density, then trails,
    then fall back to random search."""
    if event.event_type is EventType.SEARCH_STARVATION:
        if event.active_pheromone_count > 0 or event.time_since_last_pickup > SCRIPTED_STARVATION_CUTOFF_S:
            return DecisionResponse(
                action=TacticalAction.RETURN_FOR_INFO.value,
                rationale=(
                    f"search stale ({event.time_since_last_pickup:.0f}s since pickup, "
                    f"{event.active_pheromone_count} trails active); returning for information"
                ),
            )
        return DecisionResponse(
            action=TacticalAction.CONTINUE_SEARCH.value,
            rationale=(
                f"only {event.time_since_last_pickup:.0f}s since last pickup and no "
                "trails to chase; continuing local search"
            ),
        )
    if event.resource_density > 0 and event.last_pickup_location is not None:
        return DecisionResponse(
            action=TacticalAction.USE_SITE_FIDELITY.value,
            rationale=(
                f"resource_density={event.resource_density} at the last pickup site; "
                "revisiting it beats exploring"
            ),
        )
    if event.active_pheromone_count > 0:
        return DecisionResponse(
            action=TacticalAction.FOLLOW_PHEROMONE.value,
            rationale=(
                f"no local density remembered but {event.active_pheromone_count} "
                "pheromone trails are active"
            ),
        )
    return DecisionResponse(
        action=TacticalAction.UNINFORMED_SEARCH.value,
        rationale="no density signal and no active pheromones; searching at random",
    )


@dataclass
class PolicyDecision:
    """What a policy chose and how, for logging and metric accounting."""

    action: TacticalAction
    source: str  # cascade | llm | scripted | fallback
    rationale: Optional[str] = None
    llm_call: bool = False
    fallback_reason: Optional[str] = None
    latency: Optional[float] = None
    request_body: Optional[dict] = None
    response_body: Optional[str] = None


class DecisionPolicy:
    """Base class; subclasses answer the three decision-point events."""

    name = "base"
    # True when the time-triggered starvation decision replaces the
    # per-tick give-up probability p_r.
    uses_starvation = True

    def decide(self, event: DecisionEvent) -> PolicyDecision:
        raise NotImplementedError


class CascadePolicy(DecisionPolicy):
    """Vanilla parameter-driven decisions; give-up stays with p_r."""

    name = "cascade"
    uses_starvation = False

    def __init__(self, params: CpfaParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng

    def decide(self, event: DecisionEvent) -> PolicyDecision:
        action = fallback_decide(event, self.params, self.rng)
        return PolicyDecision(action=action, source="cascade")


class ScriptedPolicy(DecisionPolicy):
    """Deterministic heuristic used as the offline LLM stand-in."""

    name = "scripted"

    def decide(self, event: DecisionEvent) -> PolicyDecision:
        response = scripted_decide(event)
        validated = validate(response, event)
        assert isinstance(validated, TacticalAction)
        return PolicyDecision(action=validated, source="scripted", rationale=response.rationale)


class FixedActionPolicy(DecisionPolicy):
    """Always answers the same action per event family; degraded baseline."""

    name = "fixed"

    def __init__(
        self,
        center_action: TacticalAction = TacticalAction.UNINFORMED_SEARCH,
        starvation_action: TacticalAction = TacticalAction.RETURN_FOR_INFO,
    ):
        self.center_action = center_action
        self.starvation_action = starvation_action

    def decide(self, event: DecisionEvent) -> PolicyDecision:
        if event.event_type is EventType.SEARCH_STARVATION:
            action = self.starvation_action
        else:
            action = self.center_action
        validated = validate(DecisionResponse(action.value, ""), event)
        assert isinstance(validated, TacticalAction)
        return PolicyDecision(action=validated, source="scripted", rationale="fixed policy")


class LlmPolicy(DecisionPolicy):
    """Queries an LLM endpoint through the gateway; cascade on failure."""

    name = "llm"

    def __init__(self, client, params: CpfaParams, rng: np.random.Generator, lenient: bool = False):
        self.client = client
        self.params = params
        self.rng = rng
        self.lenient = lenient

    def decide(self, event: DecisionEvent) -> PolicyDecision:
        from .gateway import build_prompt, parse_response  # deferred: gateway imports this module

        request = build_prompt(event)
        result = self.client.call(request)
        if result.error is not None:
            raw: DecisionResponse | FallbackSignal = FallbackSignal("timeout")
        else:
            raw = parse_response(result.body)
        validated = validate(raw, event, lenient=self.lenient)
        if isinstance(validated, FallbackSignal):
            outcome = validated.reason
            action = fallback_decide(event, self.params, self.rng)
            decision = PolicyDecision(
                action=action,
                source="fallback",
                fallback_reason=validated.reason,
                llm_call=True,
                latency=result.latency,
                request_body=request,
                response_body=result.body,
            )
        else:
            outcome = "ok"
            assert isinstance(raw, DecisionResponse)
            decision = PolicyDecision(
                action=validated,
                source="llm",
                rationale=raw.rationale,
                llm_call=True,
                latency=result.latency,
                request_body=request,
                response_body=result.body,
            )
        self.client.finish_call(event, request, result, outcome)
        return decision


POLICY_NAMES = ("cascade", "scripted", "uninformed", "llm")


def make_policy(
    selector: str,
    params: CpfaParams,
    rng: np.random.Generator,
    client=None,
    lenient: bool = False,
) -> DecisionPolicy:
    """Build the policy named by ``selector`` for one robot."""
    if selector == "cascade":
        return CascadePolicy(params, rng)
    if selector == "scripted":
        return ScriptedPolicy()
    if selector == "uninformed":
        return FixedActionPolicy()
    if selector == "llm":
        if client is None:
            raise ValueError("llm policy requires a gateway client")
        return LlmPolicy(client, params, rng, lenient=lenient)
    raise ValueError(f"unknown policy {selector!r}; expected one of {POLICY_NAMES}")
