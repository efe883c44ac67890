"""Scenario runner: assembles the simulated world, drives it to the end of
its window, and reports convergence and consistency.

The report is a pure fold over the JSONL trace — every number in it can be
recomputed from the trace file alone, which is also what the tests do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .builtins import DeploymentController, HpaController
from .clock import SimClock, s_to_ms
from .cluster import BroadcastEvent, SimCluster, SimRequest
from .engine import GROUP_ADAPTATION, ReconcileEngine
from .faults import FaultHarness
from .layers import VariantRegistry, client_intercept, dispatch, propagate, server_intercept
from .operators import BlueGreenConfig, BlueGreenOperator, LowPowerConfig, LowPowerOperator
from .rainbow import RainbowController
from .scenario import LayeredServiceConfig, Scenario, load_scenario
from .store import DEFAULT_NAMESPACE, ObjectMeta, Resource, ResourceStore
from .trace import TraceRecorder, digest_of_records

ADAPTATION_CONTROLLERS = ("lowpower", "bluegreen", "rainbow")


@dataclass
class RunReport:
    scenario: str
    seed: int
    mode: str
    converged: bool
    convergence_time_seconds: int | None
    reconcile_rounds: int
    client_error_count: int
    per_pod_final_adaptation: dict[str, dict[str, Any]]
    trace_digest: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "mode": self.mode,
            "converged": self.converged,
            "convergenceTimeSeconds": self.convergence_time_seconds,
            "reconcileRounds": self.reconcile_rounds,
            "clientErrorCount": self.client_error_count,
            "perPodFinalAdaptation": self.per_pod_final_adaptation,
            "traceDigest": self.trace_digest,
        }


@dataclass
class Runtime:
    scenario: Scenario
    seed: int
    mode: str
    clock: SimClock
    store: ResourceStore
    trace: TraceRecorder
    cluster: SimCluster
    engine: ReconcileEngine
    rainbow: RainbowController | None
    faults: FaultHarness
    controllers: list[str]

    def run(self, until_seconds: int | None = None) -> None:
        until = until_seconds if until_seconds is not None else self.scenario.until_seconds
        self.clock.run_until(s_to_ms(until))
        self.trace.emit(self.clock.now_ms, "run_end", self.scenario.name, {})

    def restart_controller(self, name: str) -> None:
        if name == "rainbow":
            if self.rainbow is not None:
                self.rainbow.restart()
        elif name in self.engine.controller_names():
            self.engine.restart(name)


def build_runtime(
    scenario: Scenario,
    seed: int,
    mode: str = "level",
    controllers: list[str] | None = None,
    double_run_check: bool = False,
) -> Runtime:
    enabled = list(controllers) if controllers is not None else list(ADAPTATION_CONTROLLERS)

    trace = TraceRecorder()
    clock = SimClock()
    store = ResourceStore(trace=trace, now_ms=lambda: clock.now_ms)
    faults = FaultHarness(scenario.faults, seed)
    store.drop_filter = faults.should_drop_watch
    cluster = SimCluster(
        clock, store, trace, scenario.settings, fail_adapt_call=faults.should_fail_adapt_call
    )

    trace.emit(
        0,
        "run_start",
        scenario.name,
        {
            "seed": seed,
            "mode": mode,
            "untilSeconds": scenario.until_seconds,
            "convergence": scenario.convergence,
            "controllers": enabled,
        },
    )

    _create_initial_resources(store, scenario)
    cluster.configure(scenario.workloads, scenario.memory_models, scenario.database, scenario.ddos)

    engine = ReconcileEngine(clock, store, trace, mode=mode, double_run_check=double_run_check)
    engine.register(DeploymentController(store, cluster))
    if scenario.hpas:
        engine.register(HpaController(store, cluster))
    if "lowpower" in scenario.operators and "lowpower" in enabled:
        engine.register(
            LowPowerOperator(store, cluster, LowPowerConfig.from_dict(scenario.operators["lowpower"]))
        )
    if "bluegreen" in scenario.operators and "bluegreen" in enabled:
        engine.register(
            BlueGreenOperator(store, cluster, BlueGreenConfig.from_dict(scenario.operators["bluegreen"]))
        )

    rainbow = None
    if scenario.rainbow is not None and "rainbow" in enabled:
        rainbow = RainbowController(clock, store, cluster, trace, scenario.rainbow)

    _wire_context_layers(cluster, scenario, trace, rainbow)
    _wire_request_decoration(cluster, rainbow)

    runtime = Runtime(
        scenario=scenario,
        seed=seed,
        mode=mode,
        clock=clock,
        store=store,
        trace=trace,
        cluster=cluster,
        engine=engine,
        rainbow=rainbow,
        faults=faults,
        controllers=enabled,
    )

    engine.start()
    cluster.start()
    if rainbow is not None:
        rainbow.start()

    for event in scenario.faults.scripted_events:
        at_ms = s_to_ms(int(event["atSeconds"]))
        clock.schedule_at(at_ms, _make_scripted_broadcast(cluster, event))
    for controller_name, at_s in scenario.faults.controller_restarts:
        clock.schedule_at(s_to_ms(at_s), _make_restart(runtime, controller_name))
    for update in scenario.scripted_spec_updates:
        clock.schedule_at(s_to_ms(int(update["atSeconds"])), _make_spec_update(store, update))

    return runtime


def _create_initial_resources(store: ResourceStore, scenario: Scenario) -> None:
    with store.as_actor("scenario"):
        for dep in scenario.deployments:
            template = dict(dep["podTemplate"])
            store.create(
                Resource(
                    kind="Deployment",
                    meta=ObjectMeta(name=dep["name"], labels=dict(template.get("labels", {}))),
                    spec={"replicas": int(dep.get("replicas", 0)), "podTemplate": template},
                    status={},
                )
            )
        for hpa in scenario.hpas:
            store.create(
                Resource(
                    kind="HorizontalPodAutoscaler",
                    meta=ObjectMeta(name=hpa["name"]),
                    spec={
                        "targetDeployment": hpa["targetDeployment"],
                        "minReplicas": int(hpa["minReplicas"]),
                        "maxReplicas": int(hpa["maxReplicas"]),
                        "targetUtilizationRatio": float(hpa["targetUtilizationRatio"]),
                        "evaluateEverySeconds": int(hpa.get("evaluateEverySeconds", 15)),
                    },
                    status={},
                )
            )
        for svc in scenario.services:
            spec: dict[str, Any] = {"selector": dict(svc["selector"])}
            if svc.get("fallbackService"):
                spec["fallbackService"] = svc["fallbackService"]
            if svc.get("mirrorTo"):
                spec["mirrorTo"] = svc["mirrorTo"]
            store.create(
                Resource(kind="Service", meta=ObjectMeta(name=svc["name"]), spec=spec, status={})
            )
        for resource in scenario.resources:
            store.create(resource)


def _make_scripted_broadcast(cluster: SimCluster, event: dict[str, Any]):
    def fire() -> None:
        cluster.emit_broadcast(
            BroadcastEvent(
                event_type=event["eventType"],
                source_pod=event.get("sourcePod", ""),
                at_epoch_seconds=int(event["atSeconds"]),
                payload=dict(event.get("payload", {})),
            )
        )

    return fire


def _make_restart(runtime: Runtime, controller_name: str):
    return lambda: runtime.restart_controller(controller_name)


def _make_spec_update(store: ResourceStore, update: dict[str, Any]):
    def apply() -> None:
        for _ in range(5):
            resource = store.try_get(update["kind"], DEFAULT_NAMESPACE, update["name"])
            if resource is None:
                return
            resource.spec.update(update["spec"])
            with store.as_actor("scenario"):
                if store.update_spec(resource, resource.meta.resource_version).accepted:
                    return

    return apply


def _wire_request_decoration(cluster: SimCluster, rainbow: RainbowController | None) -> None:
    if rainbow is None:
        return
    model = rainbow.model

    def decorate(workload, request: SimRequest) -> SimRequest:
        if workload.connector is None:
            return request
        connector = model.connectors.get(workload.connector)
        if connector is None:
            return request
        return client_intercept(connector, request)

    cluster.request_decorator = decorate


def _wire_context_layers(
    cluster: SimCluster, scenario: Scenario, trace: TraceRecorder, rainbow: RainbowController | None
) -> None:
    for cfg in scenario.context_layers:
        cluster.service_handlers[cfg.service] = _make_service_handler(cfg, cluster, trace, rainbow)


def _make_service_handler(
    cfg: LayeredServiceConfig,
    cluster: SimCluster,
    trace: TraceRecorder,
    rainbow: RainbowController | None,
):
    registry = VariantRegistry()
    operation = cfg.operation

    def base_variant(_ctx, _payload, _proceed):
        return {"service": cfg.service, "variant": "base"}

    registry.register_base(operation, base_variant)
    speedups: dict[str, float] = {}
    for layer in cfg.layers:
        layer_id = layer["id"]
        registry.declare_layer(layer_id)
        if layer.get("latencySpeedup"):
            speedups[layer_id] = float(layer["latencySpeedup"])

        def make_variant(lid: str):
            def variant(_ctx, _payload, proceed):
                return {"service": cfg.service, "variant": lid, "inner": proceed()}

            return variant

        for overridden in layer.get("overrides", []):
            registry.register_layer(overridden, layer_id, make_variant(layer_id))

    seq = {"n": 0}

    def handler(pod, request: SimRequest):
        origin_connector = ""
        if rainbow is not None:
            connector = rainbow.model.connector_for_client(request.origin)
            if connector is not None:
                origin_connector = connector.id

        def warn(layer_id: str) -> None:
            trace.emit(
                cluster.clock.now_ms,
                "unknown_layer",
                cfg.service,
                {"layer": layer_id, "requestId": request.request_id},
            )

        ctx = server_intercept(request, cfg.rules, registry, origin_connector, warn)
        chain: list[str] = []
        payload = dispatch(registry, ctx, operation, {"requestId": request.request_id}, on_variant=chain.append)
        trace.emit(
            cluster.clock.now_ms,
            "dispatch",
            cfg.service,
            {
                "requestId": request.request_id,
                "pod": pod.name,
                "operation": operation,
                "chain": chain,
                "layers": list(ctx.active_layers),
                "mirrored": request.mirrored,
                "origin": request.origin,
            },
        )
        speed = max((speedups[l] for l in ctx.active_layers if l in speedups), default=1.0)
        downstream = []
        for service in cfg.downstream:
            seq["n"] += 1
            child = SimRequest(request_id=f"{request.request_id}.{seq['n']}", origin=cfg.service)
            downstream.append((service, propagate(ctx, child, mode=cfg.mode)))
        return payload, speed, downstream

    return handler


# -- reporting -----------------------------------------------------------------


@dataclass
class FoldState:
    """Everything reconstructed from a trace; reports read only this."""

    goal: dict[str, Any] = field(default_factory=dict)
    pods: dict[str, dict[str, Any]] = field(default_factory=dict)
    cr_spec: dict[tuple[str, str], dict[str, Any]] = field(default_factory=dict)
    cr_status: dict[tuple[str, str], dict[str, Any]] = field(default_factory=dict)
    satisfied_since_ms: int | None = None
    adaptation_rounds: int = 0
    client_errors: int = 0
    end_ms: int = 0
    idempotence_violations: list[dict[str, Any]] = field(default_factory=list)

    def goal_satisfied(self) -> bool:
        goal = self.goal.get("goal", "none")
        if goal == "none":
            return True
        if goal == "allPodsLowPower":
            running = [
                p
                for p in self.pods.values()
                if p["deployment"] == self.goal["deployment"] and p["phase"] == "Running"
            ]
            return bool(running) and all(
                p["adaptation"].get("low_power_enabled") for p in running
            )
        if goal == "recommenderStable":
            key = ("RecommenderModel", self.goal["model"])
            status = self.cr_status.get(key, {})
            spec = self.cr_spec.get(key, {})
            return (
                status.get("phase") == "Stable"
                and status.get("activeFlavor") == self.goal["flavor"]
                and spec.get("modelFlavor") == self.goal["flavor"]
            )
        raise ValueError(f"unknown goal {goal!r}")


def fold_trace(records: list[dict[str, Any]]) -> FoldState:
    state = FoldState()
    for record in records:
        t = record["t"]
        type_ = record["type"]
        detail = record.get("detail", {})
        subject = record.get("subject", "")

        if type_ == "run_start":
            state.goal = detail.get("convergence", {"goal": "none"})
        elif type_ == "pod_created":
            state.pods[subject] = {
                "deployment": detail["deployment"],
                "phase": "Pending",
                "adaptation": {},
            }
        elif type_ == "pod_phase":
            if subject in state.pods:
                state.pods[subject]["phase"] = detail["phase"]
        elif type_ == "pod_removed":
            state.pods.pop(subject, None)
        elif type_ == "pod_adaptation":
            if subject in state.pods:
                state.pods[subject]["adaptation"] = dict(detail)
        elif type_ == "store_write":
            key = (detail["kind"], detail["name"])
            if detail["op"] == "delete":
                state.cr_spec.pop(key, None)
                state.cr_status.pop(key, None)
            else:
                if "spec" in detail:
                    state.cr_spec[key] = detail["spec"]
                if "status" in detail:
                    state.cr_status[key] = detail["status"]
        elif type_ == "reconcile_end":
            if detail.get("group") == GROUP_ADAPTATION:
                state.adaptation_rounds += 1
        elif type_ == "request_failed":
            if not detail.get("mirrored"):
                state.client_errors += 1
        elif type_ == "idempotence_check":
            if detail.get("storeWrites", 0) != 0 or detail.get("error"):
                state.idempotence_violations.append(record)
        elif type_ == "run_end":
            state.end_ms = t

        was = state.satisfied_since_ms is not None
        now = state.goal_satisfied()
        if now and not was:
            state.satisfied_since_ms = t
        elif not now and was:
            state.satisfied_since_ms = None
    return state


def build_report(records: list[dict[str, Any]]) -> RunReport:
    state = fold_trace(records)
    start = records[0]["detail"] if records and records[0]["type"] == "run_start" else {}
    converged = state.satisfied_since_ms is not None
    return RunReport(
        scenario=records[0].get("subject", "") if records else "",
        seed=start.get("seed", 0),
        mode=start.get("mode", ""),
        converged=converged,
        convergence_time_seconds=(state.satisfied_since_ms // 1000) if converged else None,
        reconcile_rounds=state.adaptation_rounds,
        client_error_count=state.client_errors,
        per_pod_final_adaptation={
            name: dict(p["adaptation"])
            for name, p in sorted(state.pods.items())
            if p["phase"] == "Running"
        },
        trace_digest=digest_of_records(records),
    )


def run_scenario(
    scenario: Scenario | str | Path,
    seed: int,
    mode: str = "level",
    until_seconds: int | None = None,
    out_dir: str | Path | None = None,
    controllers: list[str] | None = None,
    double_run_check: bool = False,
) -> RunReport:
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    runtime = build_runtime(
        scenario, seed, mode=mode, controllers=controllers, double_run_check=double_run_check
    )
    runtime.run(until_seconds)
    report = build_report(runtime.trace.records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runtime.trace.write_jsonl(out / "trace.jsonl")
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return report


def compare_modes(
    scenario: Scenario | str | Path,
    seeds: list[int],
    until_seconds: int | None = None,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Run every seed under both modes with the same fault spec and compare
    convergence behavior."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    per_seed = []
    summary: dict[str, Any] = {"scenario": scenario.name, "seeds": list(seeds), "modes": {}}
    reports: dict[str, list[RunReport]] = {"level": [], "event": []}
    for seed in seeds:
        row: dict[str, Any] = {"seed": seed}
        for mode in ("level", "event"):
            run_out = Path(out_dir) / f"{mode}-{seed}" if out_dir is not None else None
            report = run_scenario(scenario, seed, mode=mode, until_seconds=until_seconds, out_dir=run_out)
            reports[mode].append(report)
            row[mode] = {
                "converged": report.converged,
                "convergenceTimeSeconds": report.convergence_time_seconds,
            }
        per_seed.append(row)
    for mode in ("level", "event"):
        converged = [r for r in reports[mode] if r.converged]
        times = [r.convergence_time_seconds for r in converged]
        summary["modes"][mode] = {
            "convergedCount": len(converged),
            "total": len(seeds),
            "meanConvergenceTimeSeconds": (sum(times) / len(times)) if times else None,
        }
    summary["perSeed"] = per_seed
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return summary
