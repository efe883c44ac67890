"""Architecture-based adaptation over a projected model of the cluster.

The running system is periodically projected onto Components, Connectors,
and ServerGroups; probes turn threshold crossings into indication events;
sequence patterns aggregate indications into adaptation events (alongside
direct invariant violations); and a planner evaluates strategy guards
without side effects before executing exactly one effector.

Bindings, probes, invariants, patterns, and strategies all come from the
scenario's rule file; nothing here is hardwired to a particular service.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Any

from .cluster import SimCluster
from .clock import SimClock, s_to_ms
from .store import DEFAULT_NAMESPACE, ResourceStore

COMPARATORS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
}


@dataclass
class ArchComponent:
    id: str
    bound_pod: str | None = None
    bound_client: str | None = None
    response_time: float = 0.0
    used_memory: float = 0.0
    stale: bool = False


@dataclass
class ArchConnector:
    id: str
    bound_client: str
    bound_service: str
    round_trip_latency: float
    properties: dict[str, str] = field(default_factory=dict)


@dataclass
class ServerGroup:
    id: str
    bound_deployment: str
    bound_hpa: str | None = None
    max_replicas: int = 0
    replicas: int = 0
    used_memory: float = 0.0
    stale: bool = False


@dataclass(frozen=True)
class IndicationEvent:
    symbol: str
    subject_id: str
    at_s: int
    value: float


@dataclass
class AdaptationEvent:
    strategy_name: str
    subject_id: str
    bindings: dict[str, str] = field(default_factory=dict)


@dataclass
class SequencePattern:
    name: str
    symbols: list[dict[str, Any]]  # [{symbol, min?, max?}]
    within_seconds: int
    per_subject: bool
    strategy: str

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SequencePattern":
        symbols = []
        for entry in obj["symbols"]:
            if isinstance(entry, str):
                symbols.append({"symbol": entry})
            else:
                symbols.append(dict(entry))
        return cls(
            name=obj["name"],
            symbols=symbols,
            within_seconds=int(obj["withinSeconds"]),
            per_subject=bool(obj.get("perSubject", True)),
            strategy=obj["strategy"],
        )


def _position_accepts(position: dict[str, Any], event: IndicationEvent) -> bool:
    if event.symbol != position["symbol"]:
        return False
    if "min" in position and event.value < position["min"]:
        return False
    if "max" in position and event.value > position["max"]:
        return False
    return True


class SequenceMatcher:
    """Incremental ordered-sequence matching with a first-to-last window.

    A match consumes its contributing events; among all ways to complete the
    pattern at an arriving event, the earliest events win (which makes the
    result equal to exhaustive enumeration in arrival order).
    """

    def __init__(self, pattern: SequencePattern):
        self.pattern = pattern
        self._history: dict[str, list[IndicationEvent]] = {}

    def feed(self, event: IndicationEvent) -> AdaptationEvent | None:
        key = event.subject_id if self.pattern.per_subject else ""
        history = self._history.setdefault(key, [])
        cutoff = event.at_s - self.pattern.within_seconds
        # Anything older can never again be the first element of a match.
        history[:] = [e for e in history if e.at_s >= cutoff]
        history.append(event)

        positions = self.pattern.symbols
        if not _position_accepts(positions[-1], event):
            return None
        chosen: list[IndicationEvent] = []
        pos = 0
        for candidate in history[:-1]:
            if pos == len(positions) - 1:
                break
            if _position_accepts(positions[pos], candidate):
                chosen.append(candidate)
                pos += 1
        if pos != len(positions) - 1:
            return None

        consumed = set(id(e) for e in chosen) | {id(event)}
        history[:] = [e for e in history if id(e) not in consumed]
        return AdaptationEvent(
            strategy_name=self.pattern.strategy,
            subject_id=event.subject_id,
            bindings={"via": "pattern", "pattern": self.pattern.name},
        )


@dataclass
class RainbowConfig:
    sync_period_seconds: int = 15
    cooldown_periods: int = 2
    bindings: dict[str, Any] = field(default_factory=dict)
    probes: list[dict[str, Any]] = field(default_factory=list)
    invariants: list[dict[str, Any]] = field(default_factory=list)
    patterns: list[SequencePattern] = field(default_factory=list)
    strategies: dict[str, list[dict[str, Any]]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RainbowConfig":
        return cls(
            sync_period_seconds=int(obj.get("syncPeriodSeconds", 15)),
            cooldown_periods=int(obj.get("cooldownPeriods", 2)),
            bindings=dict(obj.get("bindings", {})),
            probes=list(obj.get("probes", [])),
            invariants=list(obj.get("invariants", [])),
            patterns=[SequencePattern.from_dict(p) for p in obj.get("patterns", [])],
            strategies={k: list(v) for k, v in obj.get("strategies", {}).items()},
        )


class ArchModel:
    """The architectural projection plus client-side latency observations."""

    def __init__(self, bindings: dict[str, Any], window: int = 10):
        self.components: dict[str, ArchComponent] = {}
        self.connectors: dict[str, ArchConnector] = {}
        self.server_groups: dict[str, ServerGroup] = {}
        self.mutation_count = 0
        self._window = window
        self._client_samples: dict[str, list[float]] = {}
        self._pod_deployments: dict[str, str] = {}

        for entry in bindings.get("components", []):
            if "podsOfDeployment" in entry:
                continue  # materialized dynamically at sync
            comp = ArchComponent(
                id=entry["id"], bound_pod=entry.get("pod"), bound_client=entry.get("client")
            )
            self.components[comp.id] = comp
        self._dynamic_deployments = [
            entry["podsOfDeployment"]
            for entry in bindings.get("components", [])
            if "podsOfDeployment" in entry
        ]
        for entry in bindings.get("connectors", []):
            conn = ArchConnector(
                id=entry["id"],
                bound_client=entry["client"],
                bound_service=entry["service"],
                round_trip_latency=float(entry.get("roundTripLatencyMs", 0)),
            )
            self.connectors[conn.id] = conn
        for entry in bindings.get("serverGroups", []):
            group = ServerGroup(
                id=entry["id"],
                bound_deployment=entry["deployment"],
                bound_hpa=entry.get("hpa"),
                max_replicas=int(entry.get("maxReplicas", 0)),
            )
            self.server_groups[group.id] = group

    def observe_client_response(self, client: str, total_latency_ms: float) -> None:
        samples = self._client_samples.setdefault(client, [])
        samples.append(total_latency_ms)
        del samples[:-self._window]

    def connector_for_client(self, client: str) -> ArchConnector | None:
        for conn in self.connectors.values():
            if conn.bound_client == client:
                return conn
        return None

    def set_connector_property(self, connector: ArchConnector, key: str, value: str) -> bool:
        if connector.properties.get(key) == value:
            return False
        connector.properties[key] = value
        self.mutation_count += 1
        return True

    def group_for_subject(self, subject_id: str) -> ServerGroup | None:
        comp = self.components.get(subject_id)
        if comp is None or comp.bound_pod is None:
            return None
        deployment = self._pod_deployments.get(comp.bound_pod)
        for group in self.server_groups.values():
            if group.bound_deployment == deployment:
                return group
        return None

    def connector_for_subject(self, subject_id: str) -> ArchConnector | None:
        comp = self.components.get(subject_id)
        if comp is None or comp.bound_client is None:
            return None
        return self.connector_for_client(comp.bound_client)

    def sync(self, cluster: SimCluster, store: ResourceStore) -> None:
        for deployment in self._dynamic_deployments:
            for pod in cluster.pods.values():
                if pod.deployment == deployment and pod.name not in self.components:
                    self.components[pod.name] = ArchComponent(id=pod.name, bound_pod=pod.name)

        for comp in self.components.values():
            if comp.bound_pod is not None:
                runtime = cluster.pods.get(comp.bound_pod)
                if runtime is None:
                    comp.stale = True
                    continue
                comp.stale = False
                comp.response_time = runtime.mean_latency_ms()
                comp.used_memory = runtime.memory_used / runtime.memory_limit
                self._pod_deployments[comp.bound_pod] = runtime.deployment
            elif comp.bound_client is not None:
                samples = self._client_samples.get(comp.bound_client, [])
                comp.stale = False
                comp.response_time = sum(samples) / len(samples) if samples else 0.0
                comp.used_memory = 0.0

        for group in self.server_groups.values():
            deployment = store.try_get("Deployment", DEFAULT_NAMESPACE, group.bound_deployment)
            if deployment is None:
                group.stale = True
                continue
            group.stale = False
            group.replicas = int(deployment.spec.get("replicas", 0))
            if group.bound_hpa is not None:
                hpa = store.try_get("HorizontalPodAutoscaler", DEFAULT_NAMESPACE, group.bound_hpa)
                if hpa is not None:
                    group.max_replicas = int(hpa.spec.get("maxReplicas", group.max_replicas))
            running = cluster.running_pods(deployment=group.bound_deployment)
            if running:
                group.used_memory = sum(p.memory_used / p.memory_limit for p in running) / len(running)


class RainbowController:
    """One scheduled analysis/adaptation pass per model-sync period."""

    name = "rainbow"

    def __init__(
        self,
        clock: SimClock,
        store: ResourceStore,
        cluster: SimCluster,
        trace,
        config: RainbowConfig,
    ):
        self.clock = clock
        self.store = store
        self.cluster = cluster
        self.trace = trace
        self.config = config
        self.model = ArchModel(config.bindings)
        self.matchers = [SequenceMatcher(p) for p in config.patterns]
        self.round = 0
        self._last_fired: dict[tuple[int, str], int] = {}
        self._generation = 0
        cluster.completion_observers.append(self._on_completion)

    def _on_completion(self, workload: str, request, response) -> None:
        if request.mirrored:
            return
        connector = self.model.connector_for_client(workload)
        rtt = connector.round_trip_latency if connector is not None else 0.0
        self.model.observe_client_response(workload, rtt + response.latency_ms)

    def start(self) -> None:
        self._schedule_next(self._generation)

    def restart(self) -> None:
        """Crash semantics: all in-memory analysis state is lost."""
        self.trace.emit(self.clock.now_ms, "controller_restart", self.name, {})
        self._generation += 1
        self.matchers = [SequenceMatcher(p) for p in self.config.patterns]
        self._last_fired.clear()
        self._schedule_next(self._generation)

    def _schedule_next(self, generation: int) -> None:
        def tick() -> None:
            if generation != self._generation:
                return
            self._tick()
            self._schedule_next(generation)

        self.clock.schedule_in(s_to_ms(self.config.sync_period_seconds), tick)

    def _tick(self) -> None:
        self.round += 1
        self.sync_model()
        events: list[AdaptationEvent] = []
        for indication in self.collect_indications():
            self.trace.emit(
                self.clock.now_ms,
                "indication",
                indication.subject_id,
                {"symbol": indication.symbol, "value": round(indication.value, 3)},
            )
            for matcher in self.matchers:
                match = matcher.feed(indication)
                if match is not None:
                    events.append(match)
        events.extend(self.evaluate_invariants())
        for event in events:
            self.trace.emit(
                self.clock.now_ms,
                "adaptation_event",
                event.subject_id,
                {"strategy": event.strategy_name, **event.bindings},
            )
            self.plan_and_execute(event)

    # -- monitor / analyze ---------------------------------------------------

    def sync_model(self) -> None:
        self.model.sync(self.cluster, self.store)

    def collect_indications(self) -> list[IndicationEvent]:
        out = []
        for probe in self.config.probes:
            cmp = COMPARATORS[probe.get("comparator", ">")]
            threshold = float(probe["threshold"])
            for comp_id in sorted(self.model.components):
                comp = self.model.components[comp_id]
                if comp.stale:
                    continue
                value = self._component_property(comp, probe["property"])
                if cmp(value, threshold):
                    out.append(
                        IndicationEvent(
                            symbol=probe["symbol"],
                            subject_id=comp.id,
                            at_s=self.clock.now_s,
                            value=value,
                        )
                    )
        return out

    def evaluate_invariants(self) -> list[AdaptationEvent]:
        events = []
        for idx, invariant in enumerate(self.config.invariants):
            cmp = COMPARATORS[invariant.get("comparator", ">")]
            threshold = float(invariant["threshold"])
            for comp_id in sorted(self.model.components):
                comp = self.model.components[comp_id]
                if comp.stale:
                    continue
                if not cmp(self._component_property(comp, invariant["property"]), threshold):
                    continue
                last = self._last_fired.get((idx, comp.id))
                if last is not None and self.round - last < self.config.cooldown_periods:
                    continue
                self._last_fired[(idx, comp.id)] = self.round
                events.append(
                    AdaptationEvent(
                        strategy_name=invariant["strategy"],
                        subject_id=comp.id,
                        bindings={"via": "invariant", "property": invariant["property"]},
                    )
                )
        return events

    @staticmethod
    def _component_property(comp: ArchComponent, name: str) -> float:
        if name == "responseTime":
            return comp.response_time
        if name == "usedMemory":
            return comp.used_memory
        raise ValueError(f"unknown component property: {name!r}")

    # -- plan / execute ---------------------------------------------------------

    def plan_and_execute(self, event: AdaptationEvent) -> dict[str, Any]:
        branches = self.config.strategies.get(event.strategy_name, [])
        writes_before = self.store.write_count
        mutations_before = self.model.mutation_count
        selected = None
        for branch in branches:
            if self._guard_holds(branch.get("guard"), event.subject_id):
                selected = branch
                break
        planning_writes = self.store.write_count - writes_before
        planning_mutations = self.model.mutation_count - mutations_before

        report: dict[str, Any] = {
            "strategy": event.strategy_name,
            "subject": event.subject_id,
            "selected": selected["name"] if selected else None,
            "action": selected["action"]["type"] if selected else None,
            "changed": False,
            "success": selected is None,
            "planningWrites": planning_writes,
            "planningMutations": planning_mutations,
        }
        if selected is not None:
            changed, success = self._execute(selected["action"], event.subject_id)
            report["changed"] = changed
            report["success"] = success
        self.trace.emit(self.clock.now_ms, "plan_execute", event.subject_id, report)
        return report

    def _guard_holds(self, guard: dict[str, Any] | None, subject_id: str) -> bool:
        if guard is None:
            return True
        target = guard.get("target", "component")
        if target == "serverGroup":
            group = self.model.group_for_subject(subject_id)
            if group is None or group.stale:
                return False
            value = {"replicas": group.replicas, "usedMemory": group.used_memory}[guard["property"]]
            bound = guard["value"]
            if bound == "maxReplicas":
                bound = group.max_replicas
        elif target == "connector":
            connector = self.model.connector_for_subject(subject_id)
            if connector is None:
                return False
            value = {"roundTripLatency": connector.round_trip_latency}[guard["property"]]
            bound = guard["value"]
        else:
            comp = self.model.components.get(subject_id)
            if comp is None or comp.stale:
                return False
            value = self._component_property(comp, guard["property"])
            bound = guard["value"]
        return COMPARATORS[guard.get("comparator", ">")](value, float(bound))

    def _execute(self, action: dict[str, Any], subject_id: str) -> tuple[bool, bool]:
        kind = action["type"]
        if kind == "addServer":
            group = self.model.group_for_subject(subject_id)
            if group is None:
                return False, False
            return self._add_server(group)
        if kind == "setConfigParam":
            return self._set_config_param(
                action["config"], action.get("param", "lowPowerAdaptation"), action.get("value", True)
            )
        if kind == "setConnectorProperty":
            connector = self.model.connector_for_subject(subject_id)
            if connector is None:
                return False, False
            changed = self.model.set_connector_property(connector, action["key"], str(action["value"]))
            if changed:
                self.trace.emit(
                    self.clock.now_ms,
                    "connector_property",
                    connector.id,
                    {"key": action["key"], "value": str(action["value"])},
                )
            return changed, True
        raise ValueError(f"unknown effector action: {kind!r}")

    def _add_server(self, group: ServerGroup) -> tuple[bool, bool]:
        # Live read: several adaptation events in one pass must not overshoot.
        for attempt in range(2):
            deployment = self.store.try_get("Deployment", DEFAULT_NAMESPACE, group.bound_deployment)
            if deployment is None:
                return False, False
            current = int(deployment.spec.get("replicas", 0))
            desired = min(current + 1, group.max_replicas) if group.max_replicas else current + 1
            if desired == current:
                return False, True
            deployment.spec["replicas"] = desired
            outcome = self.store.update_spec(deployment, deployment.meta.resource_version)
            if outcome.accepted:
                return True, True
        return False, False

    def _set_config_param(self, config_name: str, param: str, value: Any) -> tuple[bool, bool]:
        for attempt in range(2):
            resource = self.store.try_get("TeaStoreConfig", DEFAULT_NAMESPACE, config_name)
            if resource is None:
                return False, False
            if resource.spec.get(param) == value:
                return False, True
            resource.spec[param] = value
            outcome = self.store.update_spec(resource, resource.meta.resource_version)
            if outcome.accepted:
                return True, True
        return False, False
