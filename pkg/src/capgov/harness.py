"""Deterministic experiment harness: trials, variants, runner, calibration.

Reproduces the shipped evaluation protocol: 5 seeds x 200 trials per
method variant over identical trial streams (paired design).  Half of
the trials carry an unauthorized proposal; the other half launch
legitimately and receive one runtime perturbation drawn uniformly from
six violation types.  Method variants toggle individual governance
components; every variant consumes the byte-identical TrialSpec stream
per seed, so outcome differences are attributable to governance
configuration alone.

All randomness flows through counter-based streams keyed by
(seed, trial, purpose): generation, watch draws, rollback draws,
approval draws, fallback draws.
"""

from __future__ import annotations

import dataclasses
import enum
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import rng as rng_mod
from .audit import AuditLog, EventKind, StorageFailure
from .governance import (
    AdmissionOutcome,
    AdmissionReason,
    AdmissionVerdict,
    DecisionKind,
    GovernanceContext,
    GovernanceDecision,
    InvocationRequest,
    PolicyOutcome,
    RequestMeta,
    admit,
    check,
)
from .metrics import LatencyCollector, MetricsReport, PairedTestResult, paired_t_test
from .override import (
    AuthorityMode,
    AuthorityState,
    OverrideGateway,
    Verdict,
    simulated_approver,
)
from .recovery import (
    PERMITTED_INTERVENTIONS,
    FailureEvent,
    FailureKind,
    InterventionAction,
    InterventionDecision,
    RecoveryStrategy,
    execute_plan,
    intervene,
    permitted_strategies,
    select_plan,
)
from .registry import (
    EnvironmentProfile,
    PolicySet,
    PolicyVerdict,
    Registry,
    Risk,
    load_default_registry,
    load_registry_file,
)
from .session import (
    GovernedSession,
    ObservationStream,
    ScriptedSubstrate,
    SessionEvent,
    SessionState,
    SignalKind,
    SubstrateScript,
    TelemetrySignal,
    ViolationType,
    WatchSignal,
    launch as launch_session,
    watch_event,
)


class HarnessError(Exception):
    pass


class CalibrationInfeasible(HarnessError):
    pass


VIOLATION_ORDER: tuple[ViolationType, ...] = (
    ViolationType.FORCE_EXCEEDED,
    ViolationType.SPEED_EXCEEDED,
    ViolationType.RETRY_EXCEEDED,
    ViolationType.POSTCONDITION_FAILED,
    ViolationType.ZONE_VIOLATION,
    ViolationType.HUMAN_PROXIMITY,
)

HARD_VIOLATIONS = frozenset({ViolationType.RETRY_EXCEEDED, ViolationType.POSTCONDITION_FAILED})

UNAUTHORIZED_KINDS = (
    "missing_permission",
    "restricted_object",
    "forbidden_zone",
    "missing_approval",
    "env_profile_mismatch",
)

CAPABILITY_ORDER = (
    "grasp_object",
    "inspect_area",
    "locate_object",
    "navigate_to",
    "safe_retreat",
    "transport_object",
)

PROFILE_ORDER = ("human_shared", "real_restricted", "sim_relaxed", "test_audit")

ALL_PERMISSIONS = frozenset({"manipulation", "mobility", "perception"})

BENIGN_OBJECTS = ("blue_block", "part_a7", "red_cup", "tool_box")


class VariantId(enum.Enum):
    PROPOSED = "proposed"
    DIRECT_EXECUTION = "direct_execution"
    STATIC_RULE = "static_rule"
    CAPABILITY_INTERNAL = "capability_internal"
    ABLATE_ADMIT = "ablate_admit"
    ABLATE_POLICY = "ablate_policy"
    ABLATE_WATCH = "ablate_watch"
    ABLATE_RECOV = "ablate_recov"
    ABLATE_HUMAN = "ablate_human"
    OVERRIDE_ON = "override_on"
    OVERRIDE_OFF = "override_off"


@dataclass(frozen=True)
class VariantSpec:
    """Which governance components a method variant deploys."""

    id: str
    admission: bool = False
    policy_guard: bool = False
    watcher: bool = False
    recovery_manager: bool = False
    override_interface: bool = False
    static_precheck: bool = False
    internal_safety: bool = False
    gate_experiment: bool = False


def _full(vid: str, **off: bool) -> VariantSpec:
    base = dict(admission=True, policy_guard=True, watcher=True, recovery_manager=True, override_interface=True)
    base.update(off)
    return VariantSpec(id=vid, **base)


VARIANTS: dict[str, VariantSpec] = {
    VariantId.PROPOSED.value: _full("proposed"),
    VariantId.DIRECT_EXECUTION.value: VariantSpec(id="direct_execution"),
    VariantId.STATIC_RULE.value: VariantSpec(id="static_rule", static_precheck=True),
    VariantId.CAPABILITY_INTERNAL.value: VariantSpec(
        id="capability_internal", static_precheck=True, internal_safety=True
    ),
    VariantId.ABLATE_ADMIT.value: _full("ablate_admit", admission=False),
    VariantId.ABLATE_POLICY.value: _full("ablate_policy", policy_guard=False),
    VariantId.ABLATE_WATCH.value: _full("ablate_watch", watcher=False),
    VariantId.ABLATE_RECOV.value: _full("ablate_recov", recovery_manager=False),
    VariantId.ABLATE_HUMAN.value: _full("ablate_human", override_interface=False),
    VariantId.OVERRIDE_ON.value: dataclasses.replace(_full("override_on"), gate_experiment=True),
    VariantId.OVERRIDE_OFF.value: dataclasses.replace(
        _full("override_off", override_interface=False), gate_experiment=True
    ),
}

BASELINE_IDS = frozenset({"direct_execution", "static_rule", "capability_internal"})


@dataclass
class FallbackModel:
    """Uncoordinated retry used where no governance recovery exists."""

    attempts: int
    success_p: float
    ticks_per_attempt: int


@dataclass
class CalibrationConstants:
    """Declared free constants; fitted values frozen for acceptance runs."""

    tick_seconds: float = 0.05
    session_ticks: int = 10
    injection_step_min: int = 2
    injection_step_max: int = 8
    rollback_success: float = 0.90
    retry_success: float = 0.95
    real_restricted_sensitivity: float = 0.70
    human_shared_sensitivity: float = 0.95
    b3_sensitivity: float = 0.41
    b3_retry_success: float = 0.35
    b3_routine_ticks: int = 4
    b3_retry_ticks: int = 7
    epm_mask_prob: float = 0.40
    gate_coviolation_prob: float = 0.658
    unauthorized_weights: dict[str, float] = field(
        default_factory=lambda: {
            "missing_permission": 0.308,
            "restricted_object": 0.287,
            "forbidden_zone": 0.124,
            "missing_approval": 0.186,
            "env_profile_mismatch": 0.095,
        }
    )
    strategy_ticks: dict[str, int] = field(
        default_factory=lambda: {
            "rollback": 4,
            "invoke_recovery_capability": 4,
            "bounded_retry": 2,
            "mode_switch_lower_risk": 2,
            "terminate_replan": 1,
            "human_takeover": 6,
        }
    )
    fallbacks: dict[str, dict[str, float]] = field(
        default_factory=lambda: {
            "direct_execution": {"attempts": 4, "success_p": 0.0965, "ticks_per_attempt": 8},
            "static_rule": {"attempts": 4, "success_p": 0.143, "ticks_per_attempt": 6},
            "ablate_recov": {"attempts": 1, "success_p": 0.281, "ticks_per_attempt": 7},
        }
    )

    def fallback_for(self, variant_id: str) -> FallbackModel:
        raw = self.fallbacks.get(variant_id, self.fallbacks["direct_execution"])
        return FallbackModel(int(raw["attempts"]), float(raw["success_p"]), int(raw["ticks_per_attempt"]))

    def strategy_tick_map(self) -> dict[RecoveryStrategy, int]:
        return {RecoveryStrategy(k): int(v) for k, v in self.strategy_ticks.items()}

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    """Experiment protocol; the defaults reproduce the shipped protocol."""

    seeds: list[int] = field(default_factory=lambda: [42, 123, 456, 789, 1024])
    trials_per_seed: int = 200
    registry_path: Optional[str] = None
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    calibration: CalibrationConstants = field(default_factory=CalibrationConstants)
    profile_latency: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "seeds": list(self.seeds),
            "trials_per_seed": self.trials_per_seed,
            "registry_path": self.registry_path,
            "variants": list(self.variants),
            "calibration": self.calibration.to_dict(),
            "profile_latency": self.profile_latency,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        cal_doc = doc.get("calibration", {}) or {}
        cal = CalibrationConstants(**cal_doc)
        return cls(
            seeds=list(doc.get("seeds", [42, 123, 456, 789, 1024])),
            trials_per_seed=int(doc.get("trials_per_seed", 200)),
            registry_path=doc.get("registry_path"),
            variants=list(doc.get("variants", list(VARIANTS))),
            calibration=cal,
            profile_latency=bool(doc.get("profile_latency", False)),
        )


def load_config_file(path) -> RunConfig:
    import yaml

    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh.read()) or {}
    if not isinstance(doc, dict):
        raise HarnessError("run config must be a mapping")
    return RunConfig.from_dict(doc)


def apply_calibration(registry: Registry, cal: CalibrationConstants) -> Registry:
    """Rebuild the registry with calibrated watcher sensitivities."""
    reg = Registry()
    reg.zones = set(registry.zones)
    for prof in registry.profiles.values():
        sens = prof.watcher_sensitivity
        if prof.name == "real_restricted":
            sens = cal.real_restricted_sensitivity
        elif prof.name == "human_shared":
            sens = cal.human_shared_sensitivity
        reg.register_profile(dataclasses.replace(prof, watcher_sensitivity=sens))
    for name, tag in registry.tags.items():
        reg.register_tag(name, tag)
    for manifest in registry.capabilities.values():
        reg.register_capability(manifest)
    for ps in registry.policy_sets.values():
        reg.register_policy_set(ps)
    return reg.freeze()


# ---------------------------------------------------------------------------
# Trial generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialSpec:
    """One scripted trial; identical across variants for a (seed, index)."""

    seed: int
    trial_index: int
    capability: str
    profile: str
    authorized: bool
    unauthorized_kind: Optional[str]
    runtime_injection: Optional[ViolationType]
    injection_step: Optional[int]
    recoverable_failure: Optional[FailureKind]
    params: dict[str, Any]
    agent_permissions: frozenset[str]
    approval_token: Optional[str]
    guard_confirmed: Optional[bool]
    gate_unapproved_high_risk: bool = False

    def key(self) -> tuple:
        """Canonical identity used by the paired-stream check."""
        return (
            self.seed,
            self.trial_index,
            self.capability,
            self.profile,
            self.authorized,
            self.unauthorized_kind,
            None if self.runtime_injection is None else self.runtime_injection.value,
            self.injection_step,
            tuple(sorted(self.params.items())),
            tuple(sorted(self.agent_permissions)),
            self.approval_token,
            self.guard_confirmed,
            self.gate_unapproved_high_risk,
        )


def _valid_profile(g: rng_mod.Stream, registry: Registry, capability: str, profile: str) -> str:
    manifest = registry.capabilities[capability]
    if registry.statically_registered_for(manifest, profile):
        return profile
    valid = sorted(registry.tag_profiles(manifest))
    return g.choice(valid)


def _weighted_kind(g: rng_mod.Stream, weights: dict[str, float]) -> str:
    u = g.uniform()
    acc = 0.0
    for kind in UNAUTHORIZED_KINDS:
        acc += weights[kind]
        if u < acc:
            return kind
    return UNAUTHORIZED_KINDS[-1]


def _base_params(g: rng_mod.Stream, registry: Registry, capability: str, profile: EnvironmentProfile) -> dict[str, Any]:
    params: dict[str, Any] = {}
    if capability in ("grasp_object", "locate_object", "transport_object"):
        params["object_id"] = g.choice(BENIGN_OBJECTS)
    if capability == "grasp_object":
        params["grasp_pose"] = "top_grasp"
    if capability in ("navigate_to", "transport_object", "inspect_area"):
        allowed = sorted(registry.zones - profile.forbidden_zones)
        params["target_zone"] = g.choice(allowed)
    if capability in ("grasp_object", "transport_object"):
        params["force"] = round(5.0 + 55.0 * g.uniform(), 3)
    if capability in ("navigate_to", "grasp_object", "transport_object"):
        params["speed"] = round(0.2 + 1.2 * g.uniform(), 3)
    return params


def _failure_for(injection: ViolationType, capability: str) -> Optional[FailureKind]:
    if injection in (ViolationType.FORCE_EXCEEDED, ViolationType.SPEED_EXCEEDED):
        return FailureKind.UNSAFE_STATE
    if injection is ViolationType.ZONE_VIOLATION:
        # Entering a forbidden zone violates policy; the response is to
        # retreat (roll back) out of it when the capability supports that.
        return FailureKind.POLICY_VIOLATION
    if injection is ViolationType.RETRY_EXCEEDED:
        return FailureKind.BLOCKED_PATH
    if injection is ViolationType.POSTCONDITION_FAILED:
        if capability in ("grasp_object", "transport_object"):
            return FailureKind.FAILED_GRASP
        if capability in ("locate_object", "inspect_area"):
            return FailureKind.PERCEPTION_MISMATCH
        return FailureKind.BLOCKED_PATH
    return None


def injection_eligible(injection: ViolationType, profile: EnvironmentProfile) -> bool:
    """Is the injected perturbation an actual policy violation here?"""
    if injection is ViolationType.ZONE_VIOLATION:
        return bool(profile.forbidden_zones)
    if injection is ViolationType.HUMAN_PROXIMITY:
        return profile.watcher_sensitivity > 0.7
    return True


def generate_trial(seed: int, index: int, registry: Registry, cal: CalibrationConstants) -> TrialSpec:
    """Deterministic TrialSpec for (seed, index) under the declared mix."""
    g = rng_mod.stream(seed, index, "gen")
    unauthorized = g.bernoulli(0.5)
    capability = CAPABILITY_ORDER[g.below(len(CAPABILITY_ORDER))]
    profile_name = PROFILE_ORDER[g.below(len(PROFILE_ORDER))]

    if not unauthorized:
        profile_name = _valid_profile(g, registry, capability, profile_name)
        profile = registry.profile(profile_name)
        manifest = registry.capabilities[capability]
        injection = VIOLATION_ORDER[g.below(len(VIOLATION_ORDER))]
        step = cal.injection_step_min + g.below(cal.injection_step_max - cal.injection_step_min + 1)
        params = _base_params(g, registry, capability, profile)
        return TrialSpec(
            seed=seed,
            trial_index=index,
            capability=capability,
            profile=profile_name,
            authorized=True,
            unauthorized_kind=None,
            runtime_injection=injection,
            injection_step=step,
            recoverable_failure=_failure_for(injection, capability),
            params=params,
            agent_permissions=ALL_PERMISSIONS,
            approval_token="tok-pre" if profile.requires_approval(manifest.risk) else None,
            guard_confirmed=True if registry.guard_required(manifest, profile_name) else None,
        )

    kind = _weighted_kind(g, cal.unauthorized_weights)
    permissions = ALL_PERMISSIONS
    guard: Optional[bool] = None

    if kind == "missing_permission":
        profile_name = _valid_profile(g, registry, capability, profile_name)
    elif kind == "restricted_object":
        capability = g.choice(("grasp_object", "locate_object", "transport_object"))
        profile_name = _valid_profile(g, registry, capability, profile_name)
    elif kind == "forbidden_zone":
        capability = g.choice(("navigate_to", "transport_object"))
        profile_name = g.choice(("human_shared", "real_restricted"))
    elif kind == "missing_approval":
        capability = g.choice(("grasp_object", "transport_object"))
        profile_name = "human_shared"
    else:  # env_profile_mismatch
        capability = g.choice(("grasp_object", "transport_object"))
        profile_name = g.choice(("human_shared", "real_restricted"))

    profile = registry.profile(profile_name)
    manifest = registry.capabilities[capability]
    params = _base_params(g, registry, capability, profile)

    if kind == "missing_permission":
        dropped = sorted(manifest.permissions)[0]
        permissions = frozenset(ALL_PERMISSIONS - {dropped})
    elif kind == "restricted_object":
        params["object_id"] = "hazmat_canister"
    elif kind == "forbidden_zone":
        params["target_zone"] = g.choice(sorted(profile.forbidden_zones))

    if registry.guard_required(manifest, profile_name):
        guard = True
    if kind == "env_profile_mismatch":
        guard = None if g.bernoulli(cal.epm_mask_prob) else False

    token = "tok-pre" if profile.requires_approval(manifest.risk) else None
    if kind == "missing_approval":
        token = None

    return TrialSpec(
        seed=seed,
        trial_index=index,
        capability=capability,
        profile=profile_name,
        authorized=False,
        unauthorized_kind=kind,
        runtime_injection=None,
        injection_step=None,
        recoverable_failure=None,
        params=params,
        agent_permissions=permissions,
        approval_token=token,
        guard_confirmed=guard,
    )


def generate_gate_trial(seed: int, index: int, registry: Registry, cal: CalibrationConstants) -> TrialSpec:
    """Override-gate experiment stream: human-shared, medium/high risk,
    approval present or absent, with a co-violation fraction that other
    gates catch even when the override interface is removed."""
    g = rng_mod.stream(seed, index, "gate")
    capability = "transport_object" if g.bernoulli(0.5) else "grasp_object"
    approved = g.bernoulli(0.5)
    coviolation = g.bernoulli(cal.gate_coviolation_prob)
    profile = registry.profile("human_shared")
    manifest = registry.capabilities[capability]
    params = _base_params(g, registry, capability, profile)
    permissions = ALL_PERMISSIONS
    if coviolation:
        dropped = sorted(manifest.permissions)[0]
        permissions = frozenset(ALL_PERMISSIONS - {dropped})
    unauthorized = (not approved) or coviolation
    return TrialSpec(
        seed=seed,
        trial_index=index,
        capability=capability,
        profile="human_shared",
        authorized=not unauthorized,
        unauthorized_kind=("missing_permission" if coviolation else "missing_approval") if unauthorized else None,
        runtime_injection=None,
        injection_step=None,
        recoverable_failure=None,
        params=params,
        agent_permissions=permissions,
        approval_token="tok-pre" if approved else None,
        guard_confirmed=True,
        gate_unapproved_high_risk=(manifest.risk is Risk.HIGH) and not approved,
    )


# ---------------------------------------------------------------------------
# Online counters (second metrics route for the dual-path cross-check)
# ---------------------------------------------------------------------------


@dataclass
class OnlineCounters:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    eligible: int = 0
    detected_eligible: int = 0
    unmet_eligible: int = 0
    det_total: int = 0
    det_compliant: int = 0
    per_type_all: dict[str, int] = field(default_factory=dict)
    per_type_det: dict[str, int] = field(default_factory=dict)
    execs: int = 0
    safe_execs: int = 0
    rb_success: int = 0
    permitted_execs: int = 0
    mrt_ticks: list[int] = field(default_factory=list)
    dl_samples: list[int] = field(default_factory=list)
    gate_total: int = 0
    gate_incorrect: int = 0
    trials: int = 0

    def report(self, variant: str, seed: int, tick_seconds: float) -> MetricsReport:
        def rate(n, d):
            return None if d == 0 else n / d

        r = MetricsReport(variant=variant, seed=seed)
        r.uair = rate(self.tp, self.tp + self.fn)
        r.frr = rate(self.fp, self.fp + self.tn)
        r.rvdr = rate(self.detected_eligible, self.eligible)
        r.ucr = rate(self.unmet_eligible, self.eligible)
        r.cef = rate(self.det_compliant, self.det_total)
        r.rsr = rate(self.safe_execs, self.execs)
        r.rbsr = rate(self.rb_success, self.execs)
        r.rpc = rate(self.permitted_execs, self.execs)
        r.mrt = None if not self.mrt_ticks else (sum(self.mrt_ticks) / len(self.mrt_ticks)) * tick_seconds
        r.dl_ticks = None if not self.dl_samples else sum(self.dl_samples) / len(self.dl_samples)
        r.per_type_detection = {
            v.value: rate(self.per_type_det.get(v.value, 0), self.per_type_all.get(v.value, 0))
            for v in ViolationType
        }
        r.confusion = {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}
        r.block_rate = None if self.gate_total == 0 else 1.0 - self.gate_incorrect / self.gate_total
        r.incorrect_allow = rate(self.gate_incorrect, self.gate_total)
        r.counts = {
            "trials": self.trials,
            "unauthorized": self.tp + self.fn,
            "authorized": self.fp + self.tn,
            "eligible_violations": self.eligible,
            "detections": self.det_total,
            "recovery_executions": self.execs,
            "gate_unapproved_high_risk": self.gate_total,
        }
        return r


# ---------------------------------------------------------------------------
# Trial runner
# ---------------------------------------------------------------------------


def static_precheck(request: InvocationRequest, registry: Registry) -> Optional[AdmissionReason]:
    """Pre-execution-only validator used by the static-rule and
    capability-internal baselines: permission and registration checks
    plus the static restricted-object rule.  Context-dependent
    violations (forbidden zones, approval, environment mismatch) pass."""
    manifest = registry.lookup(request.capability)
    if manifest is None:
        return AdmissionReason.UNKNOWN_CAPABILITY
    if not registry.statically_registered_for(manifest, request.profile):
        return AdmissionReason.UNREGISTERED_FOR_PROFILE
    if not manifest.permissions <= request.agent_permissions:
        return AdmissionReason.MISSING_PERMISSION
    for value in request.params.values():
        if isinstance(value, str) and value.startswith("hazmat"):
            return AdmissionReason.PROFILE_DISALLOWED
    return None


B3_INTERNAL_TYPES = frozenset(
    {
        ViolationType.FORCE_EXCEEDED,
        ViolationType.SPEED_EXCEEDED,
        ViolationType.RETRY_EXCEEDED,
        ViolationType.POSTCONDITION_FAILED,
    }
)


class TrialRunner:
    """Executes one (variant, seed) cell over the shared trial stream."""

    def __init__(
        self,
        variant: VariantSpec,
        seed: int,
        config: RunConfig,
        registry: Registry,
        log: AuditLog,
        latency: Optional[LatencyCollector] = None,
    ):
        self.variant = variant
        self.seed = seed
        self.config = config
        self.cal = config.calibration
        self.registry = registry
        self.log = log
        self.latency = latency
        self.substrate = ScriptedSubstrate()
        self.counters = OnlineCounters()
        self.gateway = OverrideGateway(AuthorityState(AuthorityMode.APPROVAL_ON_ESCALATION))
        self._pending_state_changes: list[dict[str, str]] = []

    # -- audit helpers ---------------------------------------------------

    def _append(self, trace: str, kind: EventKind, payload: dict[str, Any], *, tick: int = 0,
                gt: Optional[dict[str, Any]] = None) -> None:
        if self._pending_state_changes:
            payload = dict(payload)
            payload["state_changes"] = self._pending_state_changes
            self._pending_state_changes = []
        self.log.append(trace, kind, payload, tick=tick, ground_truth=gt)

    def _transition(self, session: GovernedSession, event: SessionEvent, cause: str) -> None:
        before = session.state.value
        session.transition(event)
        self._pending_state_changes.append({"from": before, "to": session.state.value, "cause": cause})

    # -- per-trial entry ---------------------------------------------------

    def run_trial(self, spec: TrialSpec) -> None:
        trace = f"t{self.seed}-{spec.trial_index}"
        oc = self.counters
        oc.trials += 1
        profile = self.registry.profile(spec.profile)
        manifest = self.registry.lookup(spec.capability)

        gt: dict[str, Any] = {
            "authorized": spec.authorized,
            "unauthorized_kind": spec.unauthorized_kind,
            "injection_type": None if spec.runtime_injection is None else spec.runtime_injection.value,
            "injection_step": spec.injection_step,
            "injection_eligible": (
                None
                if spec.runtime_injection is None
                else injection_eligible(spec.runtime_injection, profile)
            ),
            "failure_kind": None if spec.recoverable_failure is None else spec.recoverable_failure.value,
            "gate_unapproved_high_risk": spec.gate_unapproved_high_risk,
        }

        request = InvocationRequest(
            capability=spec.capability,
            params=dict(spec.params),
            meta=RequestMeta(confidence=0.9, guard_confirmed=spec.guard_confirmed),
            profile=spec.profile,
            agent_permissions=spec.agent_permissions,
            approval_token=spec.approval_token,
        )
        self._append(
            trace,
            EventKind.PROPOSAL,
            {
                "capability": spec.capability,
                "profile": spec.profile,
                "params": dict(spec.params),
                "permissions": sorted(spec.agent_permissions),
                "approval_token": spec.approval_token,
                "confidence": request.meta.confidence,
            },
            gt=gt,
        )

        outcome = self._governance_phase(trace, spec, request, profile)
        launched = outcome is not None
        approved_by_human = bool(outcome and outcome[1])

        if spec.gate_unapproved_high_risk:
            oc.gate_total += 1
            if launched and not approved_by_human:
                oc.gate_incorrect += 1

        if spec.authorized:
            if launched:
                oc.tn += 1
            else:
                oc.fp += 1
        else:
            if (not launched) or approved_by_human:
                oc.tp += 1
            else:
                oc.fn += 1

        if not launched:
            return
        final_params, _ = outcome
        self._run_session(trace, spec, request, final_params, approved_by_human, profile)

    # -- governance phase --------------------------------------------------

    def _governance_phase(
        self,
        trace: str,
        spec: TrialSpec,
        request: InvocationRequest,
        profile: EnvironmentProfile,
    ) -> Optional[tuple[dict[str, Any], bool]]:
        """Run the variant's pre-execution gates.

        Returns (final_params, approved_by_human) when the request
        launches, or None when it is blocked/deferred.
        """
        v = self.variant
        if v.static_precheck:
            reason = static_precheck(request, self.registry)
            self._append(
                trace,
                EventKind.ADMISSION_DECISION,
                {
                    "source": "static_precheck",
                    "verdict": "reject" if reason else "accept",
                    "reason": reason.value if reason else None,
                },
            )
            if reason is not None:
                self._append(trace, EventKind.FINAL_OUTCOME, {"disposition": "refused", "reason": reason.value})
                return None
            return dict(request.params), False

        if not (v.admission or v.policy_guard):
            # Ungoverned direct execution: no gates at all.
            return dict(request.params), False

        policy_set = (
            self.registry.policy_set(spec.profile)
            if v.policy_guard
            else PolicySet(profile=spec.profile, rules=())
        )
        authority = self.gateway.authority if v.override_interface else None
        ctx = GovernanceContext(
            profile=profile,
            policy_set=policy_set,
            registry=self.registry,
            authority_state=authority,
            clock=spec.trial_index,
        )

        approved_by_human = False
        if v.admission:
            t0 = time.perf_counter_ns()
            admission = admit(request, ctx)
            if self.latency is not None:
                self.latency.admission.append(time.perf_counter_ns() - t0)
            self._append(
                trace,
                EventKind.ADMISSION_DECISION,
                {
                    "source": "admission",
                    "verdict": admission.verdict.value,
                    "reason": None if admission.reason is None else admission.reason.value,
                },
            )
            if admission.verdict is AdmissionVerdict.REJECT:
                self._append(
                    trace, EventKind.FINAL_OUTCOME, {"disposition": "refused", "reason": admission.reason.value}
                )
                return None
            if admission.verdict is AdmissionVerdict.DEFER:
                self._append(
                    trace, EventKind.FINAL_OUTCOME, {"disposition": "deferred", "reason": admission.reason.value}
                )
                return None
            if admission.verdict is AdmissionVerdict.ESCALATE:
                ticket = self.gateway.escalate(
                    session_id=None,
                    capability=spec.capability,
                    risk=self.registry.capabilities[spec.capability].risk,
                    reason="supervisory_review",
                )
                if self.gateway.authority.mode is AuthorityMode.REVIEW_ONLY:
                    # No live authority can resolve: fail closed.
                    self.gateway.expire(ticket)
                    self._append(
                        trace,
                        EventKind.HUMAN_EVENT,
                        {"stage": "pre_launch", "ticket_id": ticket.ticket_id, "verdict": "expired",
                         "operator": None},
                    )
                    self._append(
                        trace, EventKind.FINAL_OUTCOME,
                        {"disposition": "refused", "reason": "handover_unavailable"},
                    )
                    return None
                decision = simulated_approver(
                    ticket, rng_mod.stream(self.seed, spec.trial_index, "approval"), clock=spec.trial_index
                )
                self.gateway.resolve(ticket, decision)
                self._append(
                    trace,
                    EventKind.HUMAN_EVENT,
                    {
                        "stage": "pre_launch",
                        "ticket_id": ticket.ticket_id,
                        "verdict": decision.verdict.value,
                        "operator": decision.operator,
                    },
                )
                if decision.verdict is not Verdict.APPROVE:
                    self._append(
                        trace, EventKind.FINAL_OUTCOME, {"disposition": "refused", "reason": "human_denied"}
                    )
                    return None
                approved_by_human = True
                request = dataclasses.replace(request, approval_token=f"tok-{ticket.ticket_id}")

        if v.policy_guard:
            t0 = time.perf_counter_ns()
            policy = check(request, ctx)
            if self.latency is not None:
                self.latency.policy_guard.append(time.perf_counter_ns() - t0)
        else:
            policy = PolicyOutcome(PolicyVerdict.ALLOW)
        self._append(
            trace,
            EventKind.POLICY_DECISION,
            {"verdict": policy.verdict.value, "fired_rule": policy.fired_rule},
        )
        if policy.verdict is PolicyVerdict.DENY:
            self._append(
                trace,
                EventKind.FINAL_OUTCOME,
                {"disposition": "refused", "reason": f"policy_rule_{policy.fired_rule}"},
            )
            return None
        if policy.verdict is PolicyVerdict.MODIFY:
            return dict(policy.constrained_params), approved_by_human
        return dict(request.params), approved_by_human

    # -- session phase -----------------------------------------------------

    def _run_session(
        self,
        trace: str,
        spec: TrialSpec,
        request: InvocationRequest,
        final_params: dict[str, Any],
        approved_by_human: bool,
        profile: EnvironmentProfile,
    ) -> None:
        v = self.variant
        cal = self.cal
        manifest = self.registry.lookup(spec.capability)
        policy_set = (
            self.registry.policy_set(spec.profile) if v.policy_guard else PolicySet(profile=spec.profile, rules=())
        )
        ctx = GovernanceContext(
            profile=profile,
            policy_set=policy_set,
            registry=self.registry,
            authority_state=self.gateway.authority if v.override_interface else None,
            clock=spec.trial_index,
        )
        decision = GovernanceDecision(
            kind=DecisionKind.LAUNCH,
            request=request,
            admission=AdmissionOutcome(AdmissionVerdict.ACCEPT),
            final_params=final_params,
        )
        session = launch_session(decision, ctx, session_id=f"s{self.seed}-{spec.trial_index}")
        self._append(
            trace,
            EventKind.LAUNCH,
            {"session_id": session.session_id, "params": final_params, "approved_by_human": approved_by_human},
        )

        watch_stream = rng_mod.stream(self.seed, spec.trial_index, "watch")
        rollback_stream = rng_mod.stream(self.seed, spec.trial_index, "rollback")
        approval_stream = rng_mod.stream(self.seed, spec.trial_index, "approval-mid")
        fallback_stream = rng_mod.stream(self.seed, spec.trial_index, "fallback")

        stalls = spec.runtime_injection in HARD_VIOLATIONS
        script = SubstrateScript(
            total_ticks=cal.session_ticks,
            injection_step=spec.injection_step,
            injection=spec.runtime_injection,
            stalls=stalls,
        )
        self._stalls_override = stalls
        obs = ObservationStream(session.session_id)
        pending: list = []

        for tick in range(cal.session_ticks + 3):
            # Process the previous tick's telemetry (one-tick pipeline).
            for ev in pending:
                if session.terminal:
                    break
                self._process_event(
                    trace, spec, session, ctx, manifest, ev,
                    watch_stream, rollback_stream, approval_stream, fallback_stream,
                )
            pending = []
            if session.terminal:
                break
            if session.state is not SessionState.RUNNING:
                raise HarnessError(f"session left non-terminal, non-running: {session.state}")
            effective = dataclasses.replace(script, stalls=self._stalls_override)
            batch = self.substrate.step(session, effective, tick)
            obs.extend(batch)
            if profile.audit_verbosity.value == "full":
                for ev in batch:
                    self._append(
                        trace,
                        EventKind.TELEMETRY,
                        {"signal": ev.signal.value, "step": ev.step, "value": _json_safe(ev.value)},
                        tick=tick,
                    )
            pending = batch

        if not session.terminal:
            # Runner guard: nothing resolved the session (no watcher and
            # no recovery path); fail closed.
            self._transition(session, SessionEvent.STOP, "runner_timeout_guard")
            session.finish("timeout", cal.session_ticks + 3)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": session.outcome, "state": session.state.value},
            )

        # Online accounting for the injected violation.
        if spec.runtime_injection is not None:
            self._count_injection(spec, profile)

    def _count_injection(self, spec: TrialSpec, profile: EnvironmentProfile) -> None:
        oc = self.counters
        injection = spec.runtime_injection.value
        oc.per_type_all[injection] = oc.per_type_all.get(injection, 0) + 1
        detected = self._trial_detected
        if detected:
            oc.per_type_det[injection] = oc.per_type_det.get(injection, 0) + 1
        if injection_eligible(spec.runtime_injection, profile):
            oc.eligible += 1
            if detected:
                oc.detected_eligible += 1
            if not self._trial_met:
                oc.unmet_eligible += 1

    # -- telemetry event handling ------------------------------------------

    def _process_event(
        self, trace, spec, session, ctx, manifest, ev,
        watch_stream, rollback_stream, approval_stream, fallback_stream,
    ) -> None:
        v = self.variant
        if ev.signal is TelemetrySignal.CONTROLLER_STATUS and ev.value == "completed":
            self._transition(session, SessionEvent.COMPLETE, "completion")
            session.finish("completed", ev.step)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "completed", "state": session.state.value},
                tick=ev.step,
            )
            return

        if ev.signal is TelemetrySignal.TIMEOUT_TICK:
            self._handle_timeout(trace, spec, session, ctx, manifest, ev, rollback_stream, fallback_stream)
            return

        if ev.signal is TelemetrySignal.PROGRESS:
            return

        # Candidate violation telemetry.
        if v.watcher:
            t0 = time.perf_counter_ns()
            sig = watch_event(ev, ctx, watch_stream)
            if self.latency is not None:
                self.latency.watcher_step.append(time.perf_counter_ns() - t0)
            if sig.kind in (SignalKind.VIOLATION, SignalKind.ESCALATION):
                self._handle_detection(trace, spec, session, ctx, manifest, sig,
                                       rollback_stream, approval_stream, fallback_stream)
        elif v.internal_safety:
            self._b3_handle(trace, spec, session, ctx, manifest, ev, watch_stream, rollback_stream)
        # No watcher, no internal safety: the event passes unobserved.

        # Hard failures manifest to the capability itself regardless of
        # detection; for the capability-internal baseline that triggers
        # local recovery immediately.
        if (
            v.internal_safety
            and not session.terminal
            and spec.runtime_injection in HARD_VIOLATIONS
            and ev.signal in (TelemetrySignal.RETRY_TICK, TelemetrySignal.POSTCONDITION_STATUS)
        ):
            self._b3_internal_recovery(trace, spec, session, manifest, rollback_stream, fallback_stream)

    # -- detection and intervention (governed variants) ---------------------

    def _reset_trial_flags(self) -> None:
        self._trial_detected = False
        self._trial_met = False

    def _handle_detection(
        self, trace, spec, session, ctx, manifest, sig,
        rollback_stream, approval_stream, fallback_stream,
    ) -> None:
        v = self.variant
        oc = self.counters
        self._append(
            trace,
            EventKind.WATCH_SIGNAL,
            {"kind": sig.kind.value, "violation_type": sig.violation_type.value, "step": sig.step,
             "processed_step": sig.step + 1, "source": "watcher"},
            tick=sig.step + 1,
        )
        self._trial_detected = True
        oc.det_total += 1
        if spec.injection_step is not None:
            oc.dl_samples.append(sig.step + 1 - spec.injection_step)

        if v.recovery_manager:
            decision = intervene(sig, ctx, ctx.authority_state, manifest)
        else:
            decision = InterventionDecision(InterventionAction.STOP, sig)
        compliant = decision.action in PERMITTED_INTERVENTIONS[sig.violation_type]
        if compliant:
            oc.det_compliant += 1

        vtype = sig.violation_type
        if decision.action is InterventionAction.PAUSE:
            # Pause while preserving state, then escalate for clearance.
            self._transition(session, SessionEvent.PAUSE, vtype.value)
            self._transition(session, SessionEvent.ESCALATE, vtype.value)
            self._append_intervention(trace, decision, sig)
            self._trial_met = True
            self._escalate_mid(trace, spec, session, approval_stream, reason="proximity_incursion")
            return
        if decision.action is InterventionAction.ESCALATE:
            self._transition(session, SessionEvent.ESCALATE, vtype.value)
            self._append_intervention(trace, decision, sig)
            self._trial_met = True
            self._escalate_mid(trace, spec, session, approval_stream, reason="retry_budget_exhausted")
            return

        # rollback / stop paths enter recovery (or fallback).
        self._transition(session, SessionEvent.RECOVER_BEGIN, vtype.value)
        self._append_intervention(trace, decision, sig)
        self._trial_met = True
        if v.recovery_manager:
            kind = spec.recoverable_failure or FailureKind.POLICY_VIOLATION
            self._governed_recovery(trace, spec, session, ctx, manifest, kind, True, rollback_stream)
        else:
            self._fallback_recovery(trace, spec, session, fallback_stream)

    def _append_intervention(self, trace, decision, sig) -> None:
        self._append(
            trace,
            EventKind.INTERVENTION,
            {
                "action": decision.action.value,
                "cause_kind": sig.kind.value,
                "cause_violation_type": None if sig.violation_type is None else sig.violation_type.value,
            },
            tick=sig.step,
        )

    def _escalate_mid(self, trace, spec, session, approval_stream, *, reason: str) -> None:
        ticket = self.gateway.escalate(
            session_id=session.session_id,
            capability=spec.capability,
            risk=self.registry.capabilities[spec.capability].risk,
            reason=reason,
        )
        if self.gateway.authority.mode is AuthorityMode.REVIEW_ONLY:
            self.gateway.expire(ticket)
            self._transition(session, SessionEvent.STOP, "handover_unavailable")
            session.finish("handover_unavailable", spec.trial_index)
            self._append(
                trace,
                EventKind.HUMAN_EVENT,
                {"stage": "mid_execution", "ticket_id": ticket.ticket_id, "verdict": "expired", "operator": None},
            )
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "handover_unavailable", "state": session.state.value},
            )
            return
        decision = simulated_approver(ticket, approval_stream, clock=spec.trial_index)
        self.gateway.resolve(ticket, decision)
        if decision.verdict is Verdict.APPROVE:
            self._transition(session, SessionEvent.CLEARANCE, "human_approved")
            self._stalls_override = False  # operator-assisted continuation
            self._append(
                trace,
                EventKind.HUMAN_EVENT,
                {"stage": "mid_execution", "ticket_id": ticket.ticket_id, "verdict": "approve",
                 "operator": decision.operator},
            )
        else:
            self._transition(session, SessionEvent.STOP, "human_denied")
            session.finish("stopped_by_human", spec.trial_index)
            self._append(
                trace,
                EventKind.HUMAN_EVENT,
                {"stage": "mid_execution", "ticket_id": ticket.ticket_id, "verdict": "deny",
                 "operator": decision.operator},
            )
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "stopped_by_human", "state": session.state.value},
            )

    # -- timeout handling ----------------------------------------------------

    def _handle_timeout(self, trace, spec, session, ctx, manifest, ev, rollback_stream, fallback_stream) -> None:
        v = self.variant
        if v.watcher:
            sig = WatchSignal(SignalKind.TIMEOUT, step=ev.step)
            self._append(
                trace, EventKind.WATCH_SIGNAL,
                {"kind": "timeout", "violation_type": None, "step": ev.step, "source": "watcher"},
                tick=ev.step,
            )
            decision = (
                intervene(sig, ctx, ctx.authority_state, manifest)
                if v.recovery_manager
                else InterventionDecision(InterventionAction.STOP, sig)
            )
            self._transition(session, SessionEvent.RECOVER_BEGIN, "timeout")
            self._append_intervention(trace, decision, sig)
            self._trial_met = True
            if v.recovery_manager:
                self._governed_recovery(trace, spec, session, ctx, manifest, FailureKind.TIMEOUT, False, rollback_stream)
            else:
                self._fallback_recovery(trace, spec, session, fallback_stream)
            return
        if v.recovery_manager:
            # Direct substrate failure channel: the recovery manager sees
            # the stalled controller without any watch signal.
            self._transition(session, SessionEvent.RECOVER_BEGIN, "substrate_failure")
            self._governed_recovery(trace, spec, session, ctx, manifest, FailureKind.TIMEOUT, False, rollback_stream)
            return
        if v.internal_safety:
            # Internal recovery already ran at the failure tick; a stall
            # reaching here means it recovered nothing: fail closed.
            self._transition(session, SessionEvent.STOP, "timeout")
            session.finish("timeout", ev.step)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "timeout", "state": session.state.value},
                tick=ev.step,
            )
            return
        if self.variant.id in ("direct_execution", "static_rule"):
            # Ungoverned: the agent notices its capability never finished
            # and retries blind.
            self._transition(session, SessionEvent.RECOVER_BEGIN, "agent_fallback")
            self._fallback_recovery(trace, spec, session, fallback_stream)
            return
        # No watcher, no recovery, no fallback: fail closed.
        self._transition(session, SessionEvent.STOP, "timeout")
        session.finish("timeout", ev.step)
        self._append(
            trace, EventKind.FINAL_OUTCOME,
            {"disposition": "launched", "outcome": "timeout", "state": session.state.value},
            tick=ev.step,
        )

    # -- recovery execution ---------------------------------------------------

    def _governed_recovery(self, trace, spec, session, ctx, manifest, kind, detected, rollback_stream) -> None:
        failure = FailureEvent(session_id=session.session_id, failure_kind=kind, detected=detected)
        t0 = time.perf_counter_ns()
        plan = select_plan(failure, manifest, ctx, params=session.final_params)
        execution = execute_plan(
            plan, failure, manifest, ctx, rollback_stream,
            strategy_ticks=self.cal.strategy_tick_map(),
            rollback_p=self.cal.rollback_success,
            retry_p=self.cal.retry_success,
        )
        if self.latency is not None:
            self.latency.recovery.append(time.perf_counter_ns() - t0)
        self._log_execution(trace, session, execution)

    def _log_execution(self, trace, session, execution) -> None:
        oc = self.counters
        oc.execs += 1
        if execution.outcome in ("recovered", "rolled_back", "terminated", "handed_over"):
            oc.safe_execs += 1
        if execution.rollback_succeeded:
            oc.rb_success += 1
        if execution.permitted:
            oc.permitted_execs += 1
        oc.mrt_ticks.append(execution.total_ticks)
        session.retry_count += sum(
            1 for s in execution.steps if s.strategy is RecoveryStrategy.BOUNDED_RETRY
        )

        n = len(execution.steps)
        for i, step in enumerate(execution.steps):
            payload = {
                "strategy": step.strategy.value,
                "ticks": step.ticks,
                "success": step.success,
                "plan_strategy": execution.plan.strategy.value,
                "permitted": execution.permitted,
                "permit_ref": execution.permit_ref,
                "failure_kind": execution.failure.failure_kind.value,
                "detected": execution.failure.detected,
            }
            if i == n - 1:
                payload["outcome"] = execution.outcome
            self._append(trace, EventKind.RECOVERY_STEP, payload)

        if execution.outcome == "recovered":
            self._transition(session, SessionEvent.RECOVER_DONE, "recovered")
            self._stalls_override = False
            self._transition(session, SessionEvent.COMPLETE, "recovered")
            session.finish("recovered", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "recovered", "state": session.state.value},
            )
        elif execution.outcome in ("rolled_back", "terminated", "handed_over"):
            label = {"rolled_back": "rolled_back", "terminated": "terminated_replan", "handed_over": "handed_over"}[
                execution.outcome
            ]
            self._transition(session, SessionEvent.RECOVER_FAILED, label)
            session.finish(label, 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": label, "state": session.state.value},
            )
        else:  # exhausted
            self._transition(session, SessionEvent.RECOVER_FAILED, "recovery_exhausted")
            session.finish("recovery_exhausted", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "recovery_exhausted", "state": session.state.value},
            )

    def _fallback_recovery(self, trace, spec, session, fallback_stream) -> None:
        """Blind agent-side retry; never policy-referenced."""
        model = self.cal.fallback_for(self.variant.id)
        oc = self.counters
        oc.execs += 1
        steps = []
        recovered = False
        for _ in range(model.attempts):
            ok = fallback_stream.bernoulli(model.success_p)
            steps.append({"ticks": model.ticks_per_attempt, "success": ok})
            if ok:
                recovered = True
                break
        total_ticks = sum(s["ticks"] for s in steps)
        oc.mrt_ticks.append(total_ticks)
        if recovered:
            oc.safe_execs += 1
        outcome = "recovered" if recovered else "exhausted"
        n = len(steps)
        for i, s in enumerate(steps):
            payload = {
                "strategy": "blind_retry",
                "ticks": s["ticks"],
                "success": s["success"],
                "plan_strategy": "blind_retry",
                "permitted": False,
                "permit_ref": None,
                "failure_kind": (spec.recoverable_failure.value if spec.recoverable_failure else "timeout"),
                "detected": False,
            }
            if i == n - 1:
                payload["outcome"] = outcome
            self._append(trace, EventKind.RECOVERY_STEP, payload)
        if recovered:
            self._transition(session, SessionEvent.RECOVER_DONE, "fallback_recovered")
            self._stalls_override = False
            self._transition(session, SessionEvent.COMPLETE, "fallback_recovered")
            session.finish("recovered", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "recovered", "state": session.state.value},
            )
        else:
            self._transition(session, SessionEvent.RECOVER_FAILED, "fallback_exhausted")
            session.finish("fallback_exhausted", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "fallback_exhausted", "state": session.state.value},
            )

    # -- capability-internal baseline -----------------------------------------

    def _b3_handle(self, trace, spec, session, ctx, manifest, ev, watch_stream, rollback_stream) -> None:
        vtype_map = {
            TelemetrySignal.FORCE_READING: ViolationType.FORCE_EXCEEDED,
            TelemetrySignal.SPEED_READING: ViolationType.SPEED_EXCEEDED,
            TelemetrySignal.RETRY_TICK: ViolationType.RETRY_EXCEEDED,
            TelemetrySignal.POSTCONDITION_STATUS: ViolationType.POSTCONDITION_FAILED,
        }
        vtype = vtype_map.get(ev.signal)
        if vtype is None or vtype not in B3_INTERNAL_TYPES:
            return
        if ev.signal is TelemetrySignal.POSTCONDITION_STATUS and ev.value is not False:
            return
        detected = watch_stream.bernoulli(self.cal.b3_sensitivity)
        if not detected:
            return
        oc = self.counters
        kind = SignalKind.ESCALATION if vtype is ViolationType.RETRY_EXCEEDED else SignalKind.VIOLATION
        self._append(
            trace,
            EventKind.WATCH_SIGNAL,
            {"kind": kind.value, "violation_type": vtype.value, "step": ev.step,
             "processed_step": ev.step + 1, "source": "capability_internal"},
            tick=ev.step + 1,
        )
        self._trial_detected = True
        oc.det_total += 1
        if spec.injection_step is not None:
            oc.dl_samples.append(ev.step + 1 - spec.injection_step)

        if vtype in (ViolationType.FORCE_EXCEEDED, ViolationType.SPEED_EXCEEDED):
            action = InterventionAction.STOP
        else:
            action = InterventionAction.ROLLBACK if manifest.reversible else InterventionAction.PAUSE
        if action in PERMITTED_INTERVENTIONS[vtype]:
            oc.det_compliant += 1
        self._append(
            trace,
            EventKind.INTERVENTION,
            {"action": action.value, "cause_kind": kind.value, "cause_violation_type": vtype.value},
            tick=ev.step,
        )
        self._trial_met = True
        if vtype in (ViolationType.FORCE_EXCEEDED, ViolationType.SPEED_EXCEEDED):
            # Local halt, then the capability's own blind re-attempt.
            self._b3_internal_recovery(trace, spec, session, manifest, rollback_stream, None)

    def _b3_internal_recovery(self, trace, spec, session, manifest, rollback_stream, fallback_stream) -> None:
        """Local recovery embedded in the capability: cleanup routine when
        declared for manipulation failures, otherwise bare retries."""
        if session.terminal or session.state is not SessionState.RUNNING:
            return
        oc = self.counters
        kind = spec.recoverable_failure or FailureKind.TIMEOUT
        has_routine = manifest.reversible
        self._transition(session, SessionEvent.RECOVER_BEGIN, "internal_recovery")
        oc.execs += 1

        steps: list[dict[str, Any]] = []
        rollback_ok = False
        recovered = False
        use_routine = has_routine and kind in (FailureKind.FAILED_GRASP, FailureKind.PERCEPTION_MISMATCH)
        if use_routine:
            plan_strategy = RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY
            ok = rollback_stream.bernoulli(self.cal.rollback_success)
            rollback_ok = ok
            steps.append({"strategy": plan_strategy.value, "ticks": self.cal.b3_routine_ticks, "success": ok})
            if ok:
                retry_ok = rollback_stream.bernoulli(self.cal.b3_retry_success)
                steps.append(
                    {"strategy": RecoveryStrategy.BOUNDED_RETRY.value, "ticks": self.cal.b3_retry_ticks, "success": retry_ok}
                )
                recovered = retry_ok
        else:
            plan_strategy = RecoveryStrategy.BOUNDED_RETRY
            for _ in range(2):
                ok = rollback_stream.bernoulli(self.cal.b3_retry_success)
                steps.append({"strategy": plan_strategy.value, "ticks": self.cal.b3_retry_ticks, "success": ok})
                if ok:
                    recovered = True
                    break

        permitted = plan_strategy in permitted_strategies(kind, has_routine)
        if permitted:
            oc.permitted_execs += 1
        if rollback_ok:
            oc.rb_success += 1
        if recovered:
            oc.safe_execs += 1
        oc.mrt_ticks.append(sum(s["ticks"] for s in steps))
        session.retry_count += sum(1 for s in steps if s["strategy"] == RecoveryStrategy.BOUNDED_RETRY.value)
        outcome = "recovered" if recovered else "exhausted"
        for i, s in enumerate(steps):
            payload = {
                "strategy": s["strategy"],
                "ticks": s["ticks"],
                "success": s["success"],
                "plan_strategy": plan_strategy.value,
                "permitted": permitted,
                "permit_ref": f"recovery_policy.{kind.value}.{plan_strategy.value}" if permitted else None,
                "failure_kind": kind.value,
                "detected": False,
            }
            if i == len(steps) - 1:
                payload["outcome"] = outcome
            self._append(trace, EventKind.RECOVERY_STEP, payload)
        if recovered:
            self._transition(session, SessionEvent.RECOVER_DONE, "internal_recovered")
            self._stalls_override = False
            self._transition(session, SessionEvent.COMPLETE, "internal_recovered")
            session.finish("recovered", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "recovered", "state": session.state.value},
            )
        else:
            self._transition(session, SessionEvent.RECOVER_FAILED, "internal_exhausted")
            session.finish("internal_recovery_exhausted", 0)
            self._append(
                trace, EventKind.FINAL_OUTCOME,
                {"disposition": "launched", "outcome": "internal_recovery_exhausted", "state": session.state.value},
            )

    # -- cell entry -------------------------------------------------------------

    def run(self) -> MetricsReport:
        generator = generate_gate_trial if self.variant.gate_experiment else generate_trial
        for index in range(self.config.trials_per_seed):
            self._reset_trial_flags()
            self._stalls_override = False
            spec = generator(self.seed, index, self.registry, self.cal)
            self.run_trial(spec)
        if self.gateway.pending():
            raise HarnessError("pending tickets at trial end; simulated approver must resolve all")
        return self.counters.report(self.variant.id, self.seed, self.cal.tick_seconds)


def _json_safe(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: RunConfig
    cells: dict[tuple[str, int], MetricsReport] = field(default_factory=dict)
    log_paths: dict[tuple[str, int], str] = field(default_factory=dict)
    latency: Optional[dict[str, Optional[dict[str, float]]]] = None
    t_tests: list[PairedTestResult] = field(default_factory=list)

    def per_seed(self, variant: str, metric: str) -> list[Optional[float]]:
        return [self.cells[(variant, s)].metric(metric) for s in self.config.seeds if (variant, s) in self.cells]

    def aggregate(self, variant: str, metric: str) -> Optional[tuple[float, float]]:
        values = [v for v in self.per_seed(variant, metric) if v is not None]
        if not values:
            return None
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        return mean, var ** 0.5

    def aggregate_per_type(self, variant: str) -> dict[str, Optional[tuple[float, float]]]:
        out: dict[str, Optional[tuple[float, float]]] = {}
        for vt in ViolationType:
            values = [
                self.cells[(variant, s)].per_type_detection.get(vt.value)
                for s in self.config.seeds
                if (variant, s) in self.cells
            ]
            values = [v for v in values if v is not None]
            if not values:
                out[vt.value] = None
            else:
                mean = sum(values) / len(values)
                var = sum((v - mean) ** 2 for v in values) / len(values)
                out[vt.value] = (mean, var ** 0.5)
        return out

    def confusion_total(self, variant: str) -> dict[str, int]:
        total = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
        for s in self.config.seeds:
            cell = self.cells.get((variant, s))
            if cell:
                for k in total:
                    total[k] += cell.confusion.get(k, 0)
        return total


T_TEST_METRICS = ("uair", "rvdr", "ucr", "rsr", "rpc")


def run_cell(
    variant_id: str,
    seed: int,
    config: RunConfig,
    registry: Registry,
    *,
    audit_path: Optional[Path] = None,
    latency: Optional[LatencyCollector] = None,
) -> tuple[MetricsReport, AuditLog]:
    variant = VARIANTS[variant_id]
    header = {
        "variant": variant_id,
        "seed": seed,
        "config": config.to_dict(),
        "tick_seconds": config.calibration.tick_seconds,
    }
    log = AuditLog(path=audit_path, header=header)
    runner = TrialRunner(variant, seed, config, registry, log, latency=latency)
    try:
        report = runner.run()
    finally:
        log.close()
    return report, log


def load_registry_for(config: RunConfig) -> Registry:
    base = load_registry_file(config.registry_path) if config.registry_path else load_default_registry()
    return apply_calibration(base, config.calibration)


def run_experiment(config: RunConfig, *, audit_dir: Optional[Path] = None) -> ExperimentResult:
    """Run all requested (variant, seed) cells over paired trial streams."""
    registry = load_registry_for(config)
    result = ExperimentResult(config=config)
    latency = LatencyCollector() if config.profile_latency else None
    try:
        for variant_id in config.variants:
            if variant_id not in VARIANTS:
                raise HarnessError(f"unknown variant {variant_id!r}")
            for seed in config.seeds:
                path = None
                if audit_dir is not None:
                    path = Path(audit_dir) / f"{variant_id}_{seed}.jsonl"
                cell_latency = latency if (latency is not None and variant_id == "proposed") else None
                report, log = run_cell(
                    variant_id, seed, config, registry, audit_path=path, latency=cell_latency
                )
                result.cells[(variant_id, seed)] = report
                if path is not None:
                    result.log_paths[(variant_id, seed)] = str(path)
    except (HarnessError, StorageFailure):
        if audit_dir is not None:
            (Path(audit_dir) / "PARTIAL").write_text("run aborted before completion\n")
        raise
    if latency is not None:
        from .metrics import latency_profile

        result.latency = latency_profile(latency)
    if "proposed" in config.variants and "capability_internal" in config.variants:
        for metric in T_TEST_METRICS:
            a = [v for v in result.per_seed("proposed", metric)]
            b = [v for v in result.per_seed("capability_internal", metric)]
            if all(v is not None for v in a + b) and len(a) >= 2:
                result.t_tests.append(paired_t_test(metric, a, b))
    return result


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


DEFAULT_TARGETS: dict[tuple[str, str], float] = {
    ("proposed", "uair"): 0.962,
    ("proposed", "rvdr"): 0.613,
    ("proposed", "ucr"): 0.222,
    ("proposed", "rsr"): 0.914,
    ("proposed", "rbsr"): 0.541,
    ("proposed", "mrt"): 0.169,
    ("static_rule", "uair"): 0.595,
    ("capability_internal", "rvdr"): 0.351,
}


def calibrate(
    config: RunConfig,
    targets: Optional[dict[tuple[str, str], float]] = None,
    *,
    rr_grid: tuple[float, ...] = (0.60, 0.65, 0.70),
    hs_grid: tuple[float, ...] = (0.85, 0.90, 0.95),
    b3_grid: tuple[float, ...] = (0.38, 0.41, 0.44),
    trials: int = 300,
    tolerance: Optional[float] = None,
) -> tuple[CalibrationConstants, dict[str, Any]]:
    """Grid-search the declared free constants against the table targets.

    Scores each grid point by the maximum absolute deviation over the
    targets on a reduced protocol and returns the fitted constants plus
    a residual report.  Raises CalibrationInfeasible when a tolerance is
    given and no point meets it.
    """
    targets = dict(DEFAULT_TARGETS if targets is None else targets)
    needed_variants = sorted({v for (v, _m) in targets})
    best: Optional[tuple[float, CalibrationConstants, dict[str, float]]] = None
    for rr in rr_grid:
        for hs in hs_grid:
            for b3 in b3_grid:
                cal = dataclasses.replace(
                    config.calibration,
                    real_restricted_sensitivity=rr,
                    human_shared_sensitivity=hs,
                    b3_sensitivity=b3,
                )
                probe = RunConfig(
                    seeds=[config.seeds[0]],
                    trials_per_seed=trials,
                    registry_path=config.registry_path,
                    variants=needed_variants,
                    calibration=cal,
                )
                run = run_experiment(probe)
                residuals: dict[str, float] = {}
                worst = 0.0
                for (variant, metric), target in targets.items():
                    agg = run.aggregate(variant, metric)
                    value = agg[0] if agg else float("nan")
                    dev = abs(value - target)
                    residuals[f"{variant}.{metric}"] = dev
                    worst = max(worst, dev)
                if best is None or worst < best[0]:
                    best = (worst, cal, residuals)
    assert best is not None
    worst, cal, residuals = best
    if tolerance is not None and worst > tolerance:
        raise CalibrationInfeasible(f"best residual {worst:.4f} exceeds tolerance {tolerance:.4f}")
    report = {
        "max_abs_deviation": worst,
        "residuals": residuals,
        "fitted": {
            "real_restricted_sensitivity": cal.real_restricted_sensitivity,
            "human_shared_sensitivity": cal.human_shared_sensitivity,
            "b3_sensitivity": cal.b3_sensitivity,
        },
    }
    return cal, report
