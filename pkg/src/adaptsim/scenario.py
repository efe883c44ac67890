"""Scenario files: the JSON description of one simulated world.

A scenario declares the initial cluster (deployments, autoscalers,
services, custom resources), the workload and memory dynamics, optional
rule files for the architectural controller, context-layer declarations
per service, fault injection, scripted actions, and the convergence goal
the run is judged against. Validation is eager and names the offending
location; a run never starts from a half-valid scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .cluster import ClusterSettings, MemoryModelConfig, WorkloadConfig
from .faults import FaultSpec
from .rainbow import RainbowConfig
from .store import KNOWN_KINDS, Resource

VALID_GOALS = ("allPodsLowPower", "recommenderStable", "none")


class ScenarioError(ValueError):
    """Scenario file is malformed; message carries file and location."""


@dataclass
class LayeredServiceConfig:
    service: str
    operation: str
    mode: str = "forward"  # forward | propsOnly
    rules: list[dict[str, str]] = field(default_factory=list)
    layers: list[dict[str, Any]] = field(default_factory=list)  # [{id, overrides, latencySpeedup?}]
    downstream: list[str] = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    until_seconds: int
    settings: ClusterSettings
    deployments: list[dict[str, Any]]
    hpas: list[dict[str, Any]]
    services: list[dict[str, Any]]
    resources: list[Resource]
    workloads: list[WorkloadConfig]
    memory_models: list[MemoryModelConfig]
    operators: dict[str, dict[str, Any]]
    rainbow: RainbowConfig | None
    context_layers: list[LayeredServiceConfig]
    faults: FaultSpec
    scripted_spec_updates: list[dict[str, Any]]
    database: dict[str, list[int]]
    ddos: dict[str, float]
    convergence: dict[str, Any]
    source: str = "<inline>"


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"{path}: scenario file not found")
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})")
    return parse_scenario(raw, source=str(path))


def parse_scenario(raw: dict[str, Any], source: str = "<inline>") -> Scenario:
    def fail(where: str, message: str) -> None:
        raise ScenarioError(f"{source}: {where}: {message}")

    if raw.get("v") != 1:
        fail("v", f"unsupported scenario version {raw.get('v')!r}")
    if not raw.get("name"):
        fail("name", "missing scenario name")
    until = raw.get("untilSeconds")
    if not isinstance(until, int) or until <= 0:
        fail("untilSeconds", "must be a positive integer")

    settings_raw = raw.get("settings", {})
    settings = ClusterSettings(
        pod_startup_delay_seconds=int(settings_raw.get("podStartupDelaySeconds", 5)),
        metrics_sync_seconds=int(settings_raw.get("metricsSyncSeconds", 5)),
        low_power_speedup=float(settings_raw.get("lowPowerSpeedup", 2.0)),
        training_gain_per_mirrored_request=float(
            settings_raw.get("trainingGainPerMirroredRequest", 0.001)
        ),
    )

    deployments = list(raw.get("deployments", []))
    deployment_names = set()
    for i, dep in enumerate(deployments):
        if not dep.get("name"):
            fail(f"deployments[{i}]", "missing name")
        if dep["name"] in deployment_names:
            fail(f"deployments[{i}]", f"duplicate deployment {dep['name']!r}")
        deployment_names.add(dep["name"])
        if int(dep.get("replicas", 0)) < 0:
            fail(f"deployments[{i}]", "replicas must be >= 0")
        if "podTemplate" not in dep:
            fail(f"deployments[{i}]", "missing podTemplate")

    hpas = list(raw.get("hpas", []))
    for i, hpa in enumerate(hpas):
        for key in ("name", "targetDeployment", "minReplicas", "maxReplicas", "targetUtilizationRatio"):
            if key not in hpa:
                fail(f"hpas[{i}]", f"missing {key}")
        if hpa["targetDeployment"] not in deployment_names:
            fail(f"hpas[{i}]", f"targetDeployment {hpa['targetDeployment']!r} is not a declared deployment")
        if not (0 < float(hpa["targetUtilizationRatio"]) <= 1):
            fail(f"hpas[{i}]", "targetUtilizationRatio must be in (0, 1]")
        if int(hpa["minReplicas"]) > int(hpa["maxReplicas"]):
            fail(f"hpas[{i}]", "minReplicas exceeds maxReplicas")

    services = list(raw.get("services", []))
    service_names = set()
    for i, svc in enumerate(services):
        if not svc.get("name"):
            fail(f"services[{i}]", "missing name")
        service_names.add(svc["name"])
        if "selector" not in svc:
            fail(f"services[{i}]", "missing selector")
    for i, svc in enumerate(services):
        fallback = svc.get("fallbackService")
        if fallback and fallback not in service_names:
            fail(f"services[{i}]", f"fallbackService {fallback!r} is not a declared service")

    resources = []
    for i, obj in enumerate(raw.get("resources", [])):
        try:
            resources.append(Resource.from_dict(obj))
        except ValueError as exc:
            fail(f"resources[{i}]", str(exc))
    resource_names = {(r.kind, r.meta.name) for r in resources}

    workloads = []
    for i, w in enumerate(raw.get("workloads", [])):
        if w.get("service") not in service_names:
            fail(f"workloads[{i}]", f"service {w.get('service')!r} is not a declared service")
        workloads.append(
            WorkloadConfig(
                name=w.get("name", f"workload-{i}"),
                service=w["service"],
                connector=w.get("connector"),
                arrival=list(w.get("arrival", [])),
            )
        )
    for i, w in enumerate(workloads):
        if w.connector is not None and raw.get("rainbow") is None:
            fail(f"workloads[{i}]", "connector requires a rainbow section declaring connectors")

    memory_models = []
    for i, m in enumerate(raw.get("memory", [])):
        if m.get("deployment") not in deployment_names:
            fail(f"memory[{i}]", f"deployment {m.get('deployment')!r} is not declared")
        memory_models.append(
            MemoryModelConfig(
                deployment=m["deployment"],
                segments=list(m.get("segments", [])),
                spikes=list(m.get("spikes", [])),
            )
        )

    operators = {k: v for k, v in raw.get("operators", {}).items() if v is not None}
    if "lowpower" in operators:
        op = operators["lowpower"]
        for key in ("config", "targetDeployment"):
            if key not in op:
                fail("operators.lowpower", f"missing {key}")
        if ("TeaStoreConfig", op["config"]) not in resource_names:
            fail("operators.lowpower", f"config {op['config']!r} is not a declared TeaStoreConfig")
        if op["targetDeployment"] not in deployment_names:
            fail("operators.lowpower", f"targetDeployment {op['targetDeployment']!r} is not declared")
        if op.get("targetHpa") and op["targetHpa"] not in {h["name"] for h in hpas}:
            fail("operators.lowpower", f"targetHpa {op['targetHpa']!r} is not a declared hpa")
    if "bluegreen" in operators:
        op = operators["bluegreen"]
        for key in ("model", "service", "deploymentPrefix", "selectorBase"):
            if key not in op:
                fail("operators.bluegreen", f"missing {key}")
        if ("RecommenderModel", op["model"]) not in resource_names:
            fail("operators.bluegreen", f"model {op['model']!r} is not a declared RecommenderModel")
        if op["service"] not in service_names:
            fail("operators.bluegreen", f"service {op['service']!r} is not declared")
        if op.get("fallbackService") and op["fallbackService"] not in service_names:
            fail("operators.bluegreen", f"fallbackService {op['fallbackService']!r} is not declared")

    rainbow = None
    if raw.get("rainbow") is not None:
        rainbow = RainbowConfig.from_dict(raw["rainbow"])
        workload_names = {w.name for w in workloads}
        connector_ids = {c.get("id") for c in rainbow.bindings.get("connectors", [])}
        for i, w in enumerate(workloads):
            if w.connector is not None and w.connector not in connector_ids:
                fail(f"workloads[{i}]", f"connector {w.connector!r} is not a declared rainbow connector")
        for entry in rainbow.bindings.get("connectors", []):
            if entry.get("client") not in workload_names:
                fail("rainbow.bindings.connectors", f"client {entry.get('client')!r} is not a declared workload")
            if entry.get("service") not in service_names:
                fail("rainbow.bindings.connectors", f"service {entry.get('service')!r} is not declared")
        for entry in rainbow.bindings.get("serverGroups", []):
            if entry.get("deployment") not in deployment_names:
                fail("rainbow.bindings.serverGroups", f"deployment {entry.get('deployment')!r} is not declared")
        for name in {p.strategy for p in rainbow.patterns}:
            if name not in rainbow.strategies:
                fail("rainbow.patterns", f"strategy {name!r} is not defined")
        for inv in rainbow.invariants:
            if inv.get("strategy") not in rainbow.strategies:
                fail("rainbow.invariants", f"strategy {inv.get('strategy')!r} is not defined")

    context_layers = []
    for i, entry in enumerate(raw.get("contextLayers", {}).get("services", [])):
        if entry.get("service") not in service_names:
            fail(f"contextLayers.services[{i}]", f"service {entry.get('service')!r} is not declared")
        for downstream in entry.get("downstream", []):
            if downstream not in service_names:
                fail(f"contextLayers.services[{i}]", f"downstream {downstream!r} is not a declared service")
        context_layers.append(
            LayeredServiceConfig(
                service=entry["service"],
                operation=entry.get("operation", "handle"),
                mode=entry.get("mode", "forward"),
                rules=list(entry.get("rules", [])),
                layers=list(entry.get("layers", [])),
                downstream=list(entry.get("downstream", [])),
            )
        )

    faults = FaultSpec.from_dict(raw.get("faults"))
    for i, event in enumerate(faults.scripted_events):
        if event.get("eventType") not in ("OutOfMemory", "DatabaseUnavailable", "DDoSAttack"):
            fail(f"faults.scriptedEvents[{i}]", f"unknown eventType {event.get('eventType')!r}")
        if "atSeconds" not in event:
            fail(f"faults.scriptedEvents[{i}]", "missing atSeconds")

    scripted_spec_updates = list(raw.get("scriptedSpecUpdates", []))
    for i, update in enumerate(scripted_spec_updates):
        for key in ("atSeconds", "kind", "name", "spec"):
            if key not in update:
                fail(f"scriptedSpecUpdates[{i}]", f"missing {key}")
        if update["kind"] not in KNOWN_KINDS:
            fail(f"scriptedSpecUpdates[{i}]", f"unknown kind {update['kind']!r}")

    convergence = raw.get("convergence", {"goal": "none"})
    goal = convergence.get("goal")
    if goal not in VALID_GOALS:
        fail("convergence.goal", f"must be one of {VALID_GOALS}, got {goal!r}")
    if goal == "allPodsLowPower" and convergence.get("deployment") not in deployment_names:
        fail("convergence", f"deployment {convergence.get('deployment')!r} is not declared")
    if goal == "recommenderStable":
        for key in ("model", "flavor"):
            if key not in convergence:
                fail("convergence", f"missing {key}")

    return Scenario(
        name=raw["name"],
        until_seconds=until,
        settings=settings,
        deployments=deployments,
        hpas=hpas,
        services=services,
        resources=resources,
        workloads=workloads,
        memory_models=memory_models,
        operators=operators,
        rainbow=rainbow,
        context_layers=context_layers,
        faults=faults,
        scripted_spec_updates=scripted_spec_updates,
        database=dict(raw.get("database", {})),
        ddos=dict(raw.get("ddos", {})),
        convergence=dict(convergence),
        source=source,
    )
