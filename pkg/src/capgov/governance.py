"""Stage-3 gatekeeping: capability admission and the policy guard.

``govern`` composes admission, policy check, and constraint application
into exactly one terminal classification: launch (possibly with
constrained parameters), refused, deferred, or escalated.

Everything here is a pure function of (request, context, registry):
identical inputs produce identical decisions, which is what makes audit
replay byte-stable.  Ambiguity (e.g. whether a hardware guard is active)
lives in the request metadata, never in hidden state.

Admission reads declared metadata only; parameter-level checks belong to
the policy guard.  Unmatched requests are allowed: the shipped profiles
express restrictions, not whitelists.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Any, Optional

from .override import AuthorityState
from .registry import (
    CapabilityManifest,
    EnvironmentProfile,
    ParamKind,
    PolicyRule,
    PolicySet,
    PolicyVerdict,
    Registry,
)


class GovernanceError(Exception):
    pass


class UnsatisfiableConstraint(GovernanceError):
    """No parameter value can satisfy the rule's bound."""


class AdmissionVerdict(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    DEFER = "defer"
    ESCALATE = "escalate"


class AdmissionReason(enum.Enum):
    UNKNOWN_CAPABILITY = "unknown_capability"
    UNREGISTERED_FOR_PROFILE = "unregistered_for_profile"
    MISSING_PERMISSION = "missing_permission"
    PROFILE_DISALLOWED = "profile_disallowed"
    SUPERVISORY_REVIEW = "supervisory_review"
    PRECONDITION_UNSATISFIED = "precondition_unsatisfied"


@dataclass(frozen=True)
class RequestMeta:
    """Context metadata accompanying a proposal (confidence, intent, priority).

    ``guard_confirmed`` is tri-state: True/False when the runtime guard
    state is known, None when the request's context cannot resolve it.
    """

    confidence: float = 1.0
    intent_class: str = "task"
    priority: int = 0
    guard_confirmed: Optional[bool] = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise GovernanceError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class InvocationRequest:
    capability: str
    params: dict[str, Any]
    meta: RequestMeta
    profile: str
    agent_permissions: frozenset[str]
    approval_token: Optional[str] = None

    def __post_init__(self):
        if not self.capability:
            raise GovernanceError("capability identifier must be non-empty")


@dataclass(frozen=True)
class AdmissionOutcome:
    verdict: AdmissionVerdict
    reason: Optional[AdmissionReason] = None

    def __post_init__(self):
        if self.verdict is not AdmissionVerdict.ACCEPT and self.reason is None:
            raise GovernanceError("non-accept admission outcomes carry a reason")


@dataclass(frozen=True)
class PolicyOutcome:
    verdict: PolicyVerdict
    constrained_params: Optional[dict[str, Any]] = None
    fired_rule: Optional[int] = None

    def __post_init__(self):
        if (self.verdict is PolicyVerdict.MODIFY) != (self.constrained_params is not None):
            raise GovernanceError("constrained_params present iff verdict is modify")


@dataclass
class GovernanceContext:
    """Snapshot the gate evaluates against.

    ``authority_state`` is None when no human-override interface is
    deployed; the admission-time approval check is then inert (there is
    no authority to escalate to).  ``env_conditions`` is the set of
    currently satisfied precondition identifiers; None means the
    environment reports everything satisfied.
    """

    profile: EnvironmentProfile
    policy_set: PolicySet
    registry: Registry
    authority_state: Optional[AuthorityState] = None
    clock: int = 0
    env_conditions: Optional[frozenset[str]] = None

    def __post_init__(self):
        if self.policy_set.profile != self.profile.name:
            raise GovernanceError(
                f"policy set bound to {self.policy_set.profile!r} but profile is {self.profile.name!r}"
            )


class DecisionKind(enum.Enum):
    LAUNCH = "launch"
    REFUSED = "refused"
    DEFERRED = "deferred"
    ESCALATED = "escalated"


@dataclass(frozen=True)
class GovernanceDecision:
    kind: DecisionKind
    request: InvocationRequest
    admission: AdmissionOutcome
    policy: Optional[PolicyOutcome] = None
    final_params: Optional[dict[str, Any]] = None
    refusal_reason: Optional[str] = None

    def __post_init__(self):
        if self.kind is DecisionKind.LAUNCH and self.final_params is None:
            raise GovernanceError("launch decisions carry final params")


# ---------------------------------------------------------------------------
# Admission
# ---------------------------------------------------------------------------


def admit(request: InvocationRequest, ctx: GovernanceContext) -> AdmissionOutcome:
    """First gate: may this capability be considered at all?

    Metadata-only by design; rejected/deferred/escalated requests never
    reach the policy guard.
    """
    manifest = ctx.registry.lookup(request.capability)
    if manifest is None:
        return AdmissionOutcome(AdmissionVerdict.REJECT, AdmissionReason.UNKNOWN_CAPABILITY)

    if not ctx.registry.statically_registered_for(manifest, ctx.profile.name):
        return AdmissionOutcome(AdmissionVerdict.REJECT, AdmissionReason.UNREGISTERED_FOR_PROFILE)

    if not manifest.permissions <= request.agent_permissions:
        return AdmissionOutcome(AdmissionVerdict.REJECT, AdmissionReason.MISSING_PERMISSION)

    if ctx.env_conditions is not None:
        unsatisfied = [c for c in manifest.preconditions if c not in ctx.env_conditions]
        if unsatisfied:
            return AdmissionOutcome(AdmissionVerdict.DEFER, AdmissionReason.PRECONDITION_UNSATISFIED)

    if (
        ctx.authority_state is not None
        and ctx.profile.requires_approval(manifest.risk)
        and request.approval_token is None
    ):
        return AdmissionOutcome(AdmissionVerdict.ESCALATE, AdmissionReason.SUPERVISORY_REVIEW)

    return AdmissionOutcome(AdmissionVerdict.ACCEPT)


# ---------------------------------------------------------------------------
# Policy guard
# ---------------------------------------------------------------------------


def _object_params(manifest: CapabilityManifest, params: dict[str, Any]) -> list[str]:
    names = [s.name for s in manifest.interface if s.kind is ParamKind.OBJECT_ID]
    return [str(params[n]) for n in names if n in params]


def _zone_params(manifest: CapabilityManifest, params: dict[str, Any]) -> list[str]:
    names = [s.name for s in manifest.interface if s.kind is ParamKind.ZONE_ID]
    return [str(params[n]) for n in names if n in params]


def _rule_matches(rule: PolicyRule, request: InvocationRequest, manifest: CapabilityManifest, ctx: GovernanceContext) -> bool:
    if rule.kind == "deny_object_prefix":
        prefix = rule.params.get("prefix", "")
        return any(v.startswith(prefix) for v in _object_params(manifest, request.params))
    if rule.kind == "deny_forbidden_zone":
        return any(z in ctx.profile.forbidden_zones for z in _zone_params(manifest, request.params))
    if rule.kind == "deny_unconfirmed_guard":
        return (
            ctx.registry.guard_required(manifest, ctx.profile.name)
            and request.meta.guard_confirmed is False
        )
    if rule.kind == "transport_corridor":
        return request.capability == rule.params.get("capability")
    if rule.kind == "clamp_motion":
        force = request.params.get("force")
        speed = request.params.get("speed")
        return (force is not None and force > ctx.profile.force_limit) or (
            speed is not None and speed > ctx.profile.speed_limit
        )
    return False


def check(request: InvocationRequest, ctx: GovernanceContext) -> PolicyOutcome:
    """Second gate: under what constraints may this invocation execute now?

    First matching rule in id order determines the verdict; later rules
    are shadowed.  No match means allow.
    """
    manifest = ctx.registry.lookup(request.capability)
    if manifest is None:
        raise GovernanceError("check() requires an admitted (registered) capability")
    for rule in ctx.policy_set.rules:
        if _rule_matches(rule, request, manifest, ctx):
            if rule.outcome is PolicyVerdict.MODIFY:
                constrained = constrain(request, rule, ctx)
                return PolicyOutcome(PolicyVerdict.MODIFY, constrained_params=constrained.params, fired_rule=rule.id)
            return PolicyOutcome(rule.outcome, fired_rule=rule.id)
    return PolicyOutcome(PolicyVerdict.ALLOW)


def constrain(request: InvocationRequest, rule: PolicyRule, ctx: GovernanceContext) -> InvocationRequest:
    """Rewrite the request into a policy-conforming version.

    Clamping is idempotent and preserves untouched parameters.  Raises
    UnsatisfiableConstraint when no value can satisfy the bound (a
    non-positive limit against a required positive magnitude).
    """
    if rule.outcome is not PolicyVerdict.MODIFY:
        raise GovernanceError(f"constrain() requires a modify rule, got {rule.outcome.value}")
    params = dict(request.params)

    def clamp(key: str, limit: float) -> None:
        if key not in params:
            return
        if limit <= 0:
            raise UnsatisfiableConstraint(
                f"{key} bound {limit} in profile {ctx.profile.name!r} admits no positive value"
            )
        params[key] = min(params[key], limit)

    if rule.kind == "clamp_motion":
        clamp("force", ctx.profile.force_limit)
        clamp("speed", ctx.profile.speed_limit)
    elif rule.kind == "transport_corridor":
        params["corridor"] = rule.params.get("corridor", "restricted_corridor")
        params["collision_margin"] = rule.params.get("collision_margin", 0.25)
        clamp("force", ctx.profile.force_limit)
        clamp("speed", ctx.profile.speed_limit)
    else:
        raise GovernanceError(f"rule kind {rule.kind!r} has no modifier")
    return replace(request, params=params)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def govern(request: InvocationRequest, ctx: GovernanceContext) -> GovernanceDecision:
    """admit, then check, then constrain; exactly one terminal classification."""
    admission = admit(request, ctx)
    if admission.verdict is AdmissionVerdict.REJECT:
        return GovernanceDecision(
            DecisionKind.REFUSED, request, admission, refusal_reason=admission.reason.value
        )
    if admission.verdict is AdmissionVerdict.DEFER:
        return GovernanceDecision(DecisionKind.DEFERRED, request, admission)
    if admission.verdict is AdmissionVerdict.ESCALATE:
        return GovernanceDecision(DecisionKind.ESCALATED, request, admission)

    try:
        policy = check(request, ctx)
    except UnsatisfiableConstraint as exc:
        return GovernanceDecision(
            DecisionKind.REFUSED,
            request,
            admission,
            policy=PolicyOutcome(PolicyVerdict.DENY, fired_rule=None),
            refusal_reason=f"unsatisfiable_constraint: {exc}",
        )

    if policy.verdict is PolicyVerdict.DENY:
        return GovernanceDecision(
            DecisionKind.REFUSED, request, admission, policy=policy,
            refusal_reason=f"policy_rule_{policy.fired_rule}",
        )
    if policy.verdict is PolicyVerdict.ESCALATE:
        return GovernanceDecision(DecisionKind.ESCALATED, request, admission, policy=policy)
    if policy.verdict is PolicyVerdict.MODIFY:
        return GovernanceDecision(
            DecisionKind.LAUNCH, request, admission, policy=policy, final_params=policy.constrained_params
        )
    return GovernanceDecision(
        DecisionKind.LAUNCH, request, admission, policy=policy, final_params=dict(request.params)
    )
