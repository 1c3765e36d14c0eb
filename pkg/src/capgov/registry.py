"""Capability registry: manifests, environment profiles, and policy sets.

The registry is the machine-readable substrate every governance decision
reads.  It is loaded once from a flat structured-text (YAML) document,
validated, then frozen; after that it is safe for unsynchronized
concurrent reads.

Conventions enforced here:
  * capability names are unique;
  * a capability without a ``rollback`` routine is non-reversible;
  * every ``env_profile`` tag resolves through the registry's tag table to
    concrete profiles, optionally with a guard qualifier (the tag is valid
    in the profile only while a hardware/runtime guard is confirmed);
  * policy rules are totally ordered by id and may reference only
    registered capabilities and zones.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml


class RegistryError(Exception):
    """Base class for registry validation failures."""


class DuplicateName(RegistryError):
    pass


class UnresolvedProfileTag(RegistryError):
    pass


class DanglingReference(RegistryError):
    pass


class ParseError(RegistryError):
    """Document-level failure; carries line/field context when known."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)


class Risk(enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return {"low": 0, "medium": 1, "high": 2}[self.value]

    def __ge__(self, other: "Risk") -> bool:
        return self.rank >= other.rank


class ParamKind(enum.Enum):
    OBJECT_ID = "object_id"
    POSE = "pose"
    ZONE_ID = "zone_id"
    SCALAR = "scalar"


class AuditVerbosity(enum.Enum):
    NORMAL = "normal"
    FULL = "full"


class PolicyVerdict(enum.Enum):
    ALLOW = "allow"
    MODIFY = "modify"
    DENY = "deny"
    ESCALATE = "escalate"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: ParamKind


@dataclass(frozen=True)
class CapabilityManifest:
    """Declared executable unit.

    ``rollback`` is the identifier of the routine that restores a prior
    safe state; absent means the capability is non-reversible.
    """

    name: str
    interface: tuple[ParamSpec, ...]
    preconditions: tuple[str, ...]
    postconditions: tuple[str, ...]
    permissions: frozenset[str]
    risk: Risk
    rollback: Optional[str]
    env_profile_tags: frozenset[str]

    @property
    def reversible(self) -> bool:
        return self.rollback is not None


@dataclass(frozen=True)
class EnvironmentProfile:
    """Named enforcement context parameterizing limits and sensitivity."""

    name: str
    watcher_sensitivity: float
    force_limit: float
    speed_limit: float
    forbidden_zones: frozenset[str]
    approval_required_risk: Optional[Risk]  # None: approval never required
    retry_budget: int
    audit_verbosity: AuditVerbosity

    def requires_approval(self, risk: Risk) -> bool:
        return self.approval_required_risk is not None and risk >= self.approval_required_risk


@dataclass(frozen=True)
class TagRule:
    """Resolution of one env-profile tag to concrete profiles."""

    profiles: frozenset[str]
    requires_guard: bool = False


# Rule conditions/modifiers are declarative so policy sets round-trip
# through the registry document.  Supported rule kinds:
#   deny_object_prefix   - deny when an object-id parameter has the prefix
#   deny_forbidden_zone  - deny when a zone parameter is forbidden here
#   deny_unconfirmed_guard - deny guarded-tag capabilities whose request
#                            reports the guard explicitly unconfirmed
#   transport_corridor   - modify: corridor + collision margin + clamps
#   clamp_motion         - modify: clamp force/speed to profile limits
@dataclass(frozen=True)
class PolicyRule:
    id: int
    name: str
    kind: str
    outcome: PolicyVerdict
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        has_modifier = self.kind in ("clamp_motion", "transport_corridor")
        if (self.outcome is PolicyVerdict.MODIFY) != has_modifier:
            raise RegistryError(
                f"rule {self.name!r}: outcome {self.outcome.value} inconsistent with kind {self.kind!r}"
            )


@dataclass(frozen=True)
class PolicySet:
    profile: str
    rules: tuple[PolicyRule, ...]

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        if sorted(ids) != ids or len(set(ids)) != len(ids):
            raise RegistryError(f"policy set for {self.profile!r}: rule ids must be strictly increasing")


_RULE_KINDS = {
    "deny_object_prefix",
    "deny_forbidden_zone",
    "deny_unconfirmed_guard",
    "transport_corridor",
    "clamp_motion",
}


class Registry:
    """Immutable-after-load home of manifests, profiles, and policy sets."""

    def __init__(self):
        self.zones: set[str] = set()
        self.tags: dict[str, TagRule] = {}
        self.profiles: dict[str, EnvironmentProfile] = {}
        self.capabilities: dict[str, CapabilityManifest] = {}
        self.policy_sets: dict[str, PolicySet] = {}
        self._frozen = False

    # -- registration -----------------------------------------------------

    def register_profile(self, profile: EnvironmentProfile) -> None:
        self._check_mutable()
        if profile.name in self.profiles:
            raise DuplicateName(f"profile {profile.name!r} already registered")
        if not (0.0 <= profile.watcher_sensitivity <= 1.0):
            raise RegistryError(f"profile {profile.name!r}: watcher_sensitivity outside [0, 1]")
        if profile.name == "human_shared" and profile.watcher_sensitivity <= 0.7:
            raise RegistryError("human_shared profile requires watcher_sensitivity > 0.7")
        if profile.retry_budget < 0:
            raise RegistryError(f"profile {profile.name!r}: retry_budget must be >= 0")
        unknown = profile.forbidden_zones - self.zones
        if unknown:
            raise DanglingReference(f"profile {profile.name!r}: unknown zones {sorted(unknown)}")
        self.profiles[profile.name] = profile

    def register_tag(self, name: str, rule: TagRule) -> None:
        self._check_mutable()
        unknown = rule.profiles - set(self.profiles)
        if unknown:
            raise DanglingReference(f"tag {name!r}: unknown profiles {sorted(unknown)}")
        self.tags[name] = rule

    def register_capability(self, manifest: CapabilityManifest) -> CapabilityManifest:
        self._check_mutable()
        if manifest.name in self.capabilities:
            raise DuplicateName(f"capability {manifest.name!r} already registered")
        for tag in manifest.env_profile_tags:
            if tag not in self.tags:
                raise UnresolvedProfileTag(f"capability {manifest.name!r}: unknown env profile tag {tag!r}")
        self.capabilities[manifest.name] = manifest
        return manifest

    def register_policy_set(self, policy_set: PolicySet) -> None:
        self._check_mutable()
        if policy_set.profile not in self.profiles:
            raise DanglingReference(f"policy set references unknown profile {policy_set.profile!r}")
        for rule in policy_set.rules:
            if rule.kind not in _RULE_KINDS:
                raise RegistryError(f"rule {rule.name!r}: unknown kind {rule.kind!r}")
            cap = rule.params.get("capability")
            if cap is not None and cap not in self.capabilities:
                raise DanglingReference(f"rule {rule.name!r}: unknown capability {cap!r}")
            zone = rule.params.get("zone")
            if zone is not None and zone not in self.zones:
                raise DanglingReference(f"rule {rule.name!r}: unknown zone {zone!r}")
        self.policy_sets[policy_set.profile] = policy_set

    def freeze(self) -> "Registry":
        self._frozen = True
        return self

    def _check_mutable(self):
        if self._frozen:
            raise RegistryError("registry is frozen; registration happens in the setup phase only")

    # -- queries -----------------------------------------------------------

    def lookup(self, name: str) -> Optional[CapabilityManifest]:
        return self.capabilities.get(name)

    def profile(self, name: str) -> EnvironmentProfile:
        return self.profiles[name]

    def policy_set(self, profile_name: str) -> PolicySet:
        return self.policy_sets.get(profile_name, PolicySet(profile=profile_name, rules=()))

    def tag_profiles(self, manifest: CapabilityManifest) -> set[str]:
        """All profiles some tag of the manifest resolves to (guarded or not)."""
        out: set[str] = set()
        for tag in manifest.env_profile_tags:
            out |= self.tags[tag].profiles
        return out

    def statically_registered_for(self, manifest: CapabilityManifest, profile_name: str) -> bool:
        """True when at least one tag covers the profile, ignoring guard qualifiers."""
        return profile_name in self.tag_profiles(manifest)

    def guard_required(self, manifest: CapabilityManifest, profile_name: str) -> bool:
        """True when every tag covering the profile carries a guard qualifier."""
        covering = [self.tags[t] for t in manifest.env_profile_tags if profile_name in self.tags[t].profiles]
        return bool(covering) and all(t.requires_guard for t in covering)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Registry):
            return NotImplemented
        return (
            self.zones == other.zones
            and self.tags == other.tags
            and self.profiles == other.profiles
            and self.capabilities == other.capabilities
            and self.policy_sets == other.policy_sets
        )


# ---------------------------------------------------------------------------
# Document load / dump
# ---------------------------------------------------------------------------


def _req(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ParseError(f"missing key in {where}", field=key)
    return mapping[key]


def _parse_interface(raw, where: str) -> tuple[ParamSpec, ...]:
    specs = []
    for item in raw:
        if isinstance(item, dict) and len(item) == 1:
            ((name, kind),) = item.items()
        elif isinstance(item, str) and ":" in item:
            name, kind = (p.strip() for p in item.split(":", 1))
        else:
            raise ParseError(f"malformed interface entry {item!r} in {where}", field="inputs")
        try:
            specs.append(ParamSpec(name=name, kind=ParamKind(kind)))
        except ValueError as exc:
            raise ParseError(f"unknown parameter kind {kind!r} in {where}", field="inputs") from exc
    return tuple(specs)


def _parse_manifest(doc: dict) -> CapabilityManifest:
    name = _req(doc, "name", "capability")
    where = f"capability {name!r}"
    try:
        risk = Risk(_req(doc, "risk", where))
    except ValueError as exc:
        raise ParseError(f"unknown risk level in {where}", field="risk") from exc
    return CapabilityManifest(
        name=name,
        interface=_parse_interface(_req(doc, "inputs", where), where),
        preconditions=tuple(doc.get("preconditions", []) or []),
        postconditions=tuple(doc.get("postconditions", []) or []),
        permissions=frozenset(doc.get("permissions", []) or []),
        risk=risk,
        rollback=doc.get("rollback"),
        env_profile_tags=frozenset(_req(doc, "env_profile", where)),
    )


def _parse_profile(doc: dict) -> EnvironmentProfile:
    name = _req(doc, "name", "profile")
    where = f"profile {name!r}"
    approval = doc.get("approval_required_risk")
    try:
        return EnvironmentProfile(
            name=name,
            watcher_sensitivity=float(_req(doc, "watcher_sensitivity", where)),
            force_limit=float(_req(doc, "force_limit", where)),
            speed_limit=float(_req(doc, "speed_limit", where)),
            forbidden_zones=frozenset(doc.get("forbidden_zones", []) or []),
            approval_required_risk=Risk(approval) if approval is not None else None,
            retry_budget=int(_req(doc, "retry_budget", where)),
            audit_verbosity=AuditVerbosity(doc.get("audit_verbosity", "normal")),
        )
    except ValueError as exc:
        raise ParseError(f"bad field value in {where}: {exc}") from exc


def _parse_rule(doc: dict) -> PolicyRule:
    name = _req(doc, "name", "rule")
    where = f"rule {name!r}"
    try:
        outcome = PolicyVerdict(_req(doc, "outcome", where))
    except ValueError as exc:
        raise ParseError(f"unknown outcome in {where}", field="outcome") from exc
    return PolicyRule(
        id=int(_req(doc, "id", where)),
        name=name,
        kind=_req(doc, "kind", where),
        outcome=outcome,
        params=dict(doc.get("params", {}) or {}),
    )


def load_registry(text: str) -> Registry:
    """Parse and validate a registry document; returns a frozen Registry."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"document does not parse: {exc}", line=None if mark is None else mark.line + 1)
    if not isinstance(doc, dict):
        raise ParseError("registry document must be a mapping")

    reg = Registry()
    reg.zones = set(doc.get("zones", []) or [])
    for pdoc in doc.get("profiles", []) or []:
        reg.register_profile(_parse_profile(pdoc))
    for tag_name, tdoc in (doc.get("tags", {}) or {}).items():
        reg.register_tag(
            tag_name,
            TagRule(
                profiles=frozenset(tdoc.get("profiles", []) or []),
                requires_guard=bool(tdoc.get("requires_guard", False)),
            ),
        )
    for cdoc in doc.get("capabilities", []) or []:
        reg.register_capability(_parse_manifest(cdoc))
    for profile_name, rdocs in (doc.get("policies", {}) or {}).items():
        if profile_name not in reg.profiles:
            raise DanglingReference(f"policies reference unknown profile {profile_name!r}")
        rules = tuple(sorted((_parse_rule(r) for r in rdocs), key=lambda r: r.id))
        reg.register_policy_set(PolicySet(profile=profile_name, rules=rules))
    return reg.freeze()


def dump_registry(reg: Registry) -> str:
    """Serialize a registry back to its document form (round-trips with load)."""
    doc: dict[str, Any] = {
        "zones": sorted(reg.zones),
        "profiles": [
            {
                "name": p.name,
                "watcher_sensitivity": p.watcher_sensitivity,
                "force_limit": p.force_limit,
                "speed_limit": p.speed_limit,
                "forbidden_zones": sorted(p.forbidden_zones),
                "approval_required_risk": None if p.approval_required_risk is None else p.approval_required_risk.value,
                "retry_budget": p.retry_budget,
                "audit_verbosity": p.audit_verbosity.value,
            }
            for p in sorted(reg.profiles.values(), key=lambda p: p.name)
        ],
        "tags": {
            name: {"profiles": sorted(t.profiles), "requires_guard": t.requires_guard}
            for name, t in sorted(reg.tags.items())
        },
        "capabilities": [
            {
                "name": c.name,
                "inputs": [{spec.name: spec.kind.value} for spec in c.interface],
                "preconditions": list(c.preconditions),
                "postconditions": list(c.postconditions),
                "permissions": sorted(c.permissions),
                "risk": c.risk.value,
                "rollback": c.rollback,
                "env_profile": sorted(c.env_profile_tags),
            }
            for c in sorted(reg.capabilities.values(), key=lambda c: c.name)
        ],
        "policies": {
            profile: [
                {"id": r.id, "name": r.name, "kind": r.kind, "outcome": r.outcome.value, "params": dict(r.params)}
                for r in ps.rules
            ]
            for profile, ps in sorted(reg.policy_sets.items())
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


def load_registry_file(path) -> Registry:
    with open(path, "r", encoding="utf-8") as fh:
        return load_registry(fh.read())


def default_registry_path() -> str:
    import importlib.resources

    return str(importlib.resources.files("capgov").joinpath("data/default_registry.yaml"))


def load_default_registry() -> Registry:
    return load_registry_file(default_registry_path())
