"""Discrete-event simulation of a TeaStore-like workload cluster.

Pods are simulated processes with memory and latency dynamics, a power
mode, and per-request bookkeeping. The cluster owns the pod runtimes and
mirrors their observable status into the resource store; controllers and
operators only ever see the store plus the per-pod adaptation endpoints
(`query_adaptation` / `adapt_pod`), which is exactly the control surface a
real operator would have.

Broadcast events (OutOfMemory, DatabaseUnavailable, DDoSAttack) are
edge-triggered per their defined semantics and queued per target
deployment for consumption by reconciles.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .clock import SimClock, s_to_ms
from .store import DEFAULT_NAMESPACE, Resource, ObjectMeta, ResourceStore

OOM = "OutOfMemory"
DATABASE_UNAVAILABLE = "DatabaseUnavailable"
DDOS_ATTACK = "DDoSAttack"

PHASE_PENDING = "Pending"
PHASE_RUNNING = "Running"
PHASE_TERMINATING = "Terminating"

RESPONSE_WINDOW = 10  # moving-average window for a pod's recent latencies


class PodNotFoundError(KeyError):
    pass


class PodNotReadyError(RuntimeError):
    """Pod exists but is not Running; callers should retry later."""


class InjectedFailureError(RuntimeError):
    """The fault harness dropped the adaptation call; state is unchanged."""


class NoBackendsError(RuntimeError):
    """No Running pod is selected by the service and no fallback applies."""


class SimInvariantError(AssertionError):
    """An internal simulator invariant was violated; aborts the run."""


@dataclass
class BroadcastEvent:
    event_type: str
    source_pod: str  # empty for cluster-scoped events
    at_epoch_seconds: int
    payload: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "eventType": self.event_type,
            "sourcePod": self.source_pod,
            "atEpochSeconds": self.at_epoch_seconds,
            "payload": dict(self.payload),
        }


@dataclass
class AdaptationState:
    """The logical adaptation state a pod reports via its GET endpoint."""

    low_power_enabled: bool = False
    active_flavor: str = ""
    cache_enabled: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "low_power_enabled": self.low_power_enabled,
            "active_flavor": self.active_flavor,
            "cache_enabled": self.cache_enabled,
        }


@dataclass
class SimRequest:
    request_id: str
    headers: dict[str, str] = field(default_factory=dict)
    origin: str = ""  # workload or upstream service name
    mirrored: bool = False


@dataclass
class SimResponse:
    request_id: str
    pod: str
    payload: Any
    latency_ms: int


class PodRuntime:
    """In-process state of one simulated pod.

    Only the store mirror (phase, IP, metrics, power mode) is visible to
    controllers through the API; the adaptation state is visible only via
    the pod's endpoints.
    """

    def __init__(self, name: str, deployment: str, template: dict[str, Any], pod_ip: str):
        self.name = name
        self.deployment = deployment
        self.labels: dict[str, str] = dict(template.get("labels", {}))
        self.image: str = template.get("image", "")
        self.memory_limit: int = int(template.get("memoryLimitBytes", 1_000_000_000))
        self.base_latency_ms: int = int(template.get("baseLatencyMs", 100))
        self.memory_used: float = float(template.get("initialMemoryBytes", 0))
        self.pod_ip = pod_ip
        self.phase = PHASE_PENDING
        self.in_flight = 0
        self.adaptation = AdaptationState(active_flavor=template.get("flavor") or "")
        self.training_progress = 0.0
        self.recent_latencies: deque[int] = deque(maxlen=RESPONSE_WINDOW)
        self.oom_above = False  # edge state: currently above the memory limit

    def mean_latency_ms(self) -> float:
        if not self.recent_latencies:
            return 0.0
        return sum(self.recent_latencies) / len(self.recent_latencies)


@dataclass
class WorkloadConfig:
    name: str
    service: str
    connector: str | None
    arrival: list[dict[str, float]]  # [{fromSeconds, ratePerSecond}]


@dataclass
class MemoryModelConfig:
    deployment: str
    segments: list[dict[str, float]]  # [{fromSeconds, bytesPerSecond}]
    spikes: list[dict[str, Any]] = field(default_factory=list)  # [{atSeconds, pod, setBytes}]


@dataclass
class ClusterSettings:
    pod_startup_delay_seconds: int = 5
    metrics_sync_seconds: int = 5
    low_power_speedup: float = 2.0
    training_gain_per_mirrored_request: float = 0.001


def hpa_desired_replicas(
    current_replicas: int,
    current_utilization: float,
    target_utilization: float,
    min_replicas: int,
    max_replicas: int,
) -> int:
    """Scaling rule: clamp(ceil(current * utilization / target), min, max)."""
    raw = math.ceil(current_replicas * current_utilization / target_utilization)
    return max(min_replicas, min(max_replicas, raw))


class SimCluster:
    def __init__(
        self,
        clock: SimClock,
        store: ResourceStore,
        trace,
        settings: ClusterSettings | None = None,
        fail_adapt_call: Callable[[], bool] | None = None,
    ) -> None:
        self.clock = clock
        self.store = store
        self.trace = trace
        self.settings = settings or ClusterSettings()
        self.fail_adapt_call = fail_adapt_call or (lambda: False)

        self.pods: dict[str, PodRuntime] = {}
        self._pod_index: dict[str, int] = {}  # per-deployment counter, never reused
        self._ip_counter = 0
        self._rr_counters: dict[str, int] = {}  # round-robin position per (service, lane)

        self.oom_queues: dict[str, list[BroadcastEvent]] = {}
        self._broadcast_log: list[BroadcastEvent] = []

        self.workloads: list[WorkloadConfig] = []
        self.memory_models: dict[str, MemoryModelConfig] = {}
        self._request_seq = 0
        self._arrivals_this_second: dict[int, int] = {}
        self._ddos_threshold = 0.0
        self._ddos_sustain_s = 0
        self._ddos_above_since: int | None = None
        self._ddos_signaled = False
        self._db_healthy = True
        self._db_script: dict[str, list[int]] = {}

        # Hooks wired by the harness: request decoration (client-side
        # interceptor), per-service handlers (context-layer dispatch), and
        # completion observers (client latency probes).
        self.request_decorator: Callable[[WorkloadConfig, SimRequest], SimRequest] = (
            lambda _w, r: r
        )
        self.service_handlers: dict[str, Callable[[PodRuntime, SimRequest], tuple[Any, float, list]]] = {}
        self.completion_observers: list[Callable[[str, SimRequest, SimResponse], None]] = []

    # -- lifecycle ---------------------------------------------------------

    def provision_pod(self, deployment: Resource) -> str:
        name = deployment.meta.name
        idx = self._pod_index.get(name, 0) + 1
        self._pod_index[name] = idx
        pod_name = f"{name}-{idx}"
        self._ip_counter += 1
        pod_ip = f"10.0.{self._ip_counter // 250}.{self._ip_counter % 250 + 1}"
        template = deployment.spec.get("podTemplate", {})
        runtime = PodRuntime(pod_name, name, template, pod_ip)
        self.pods[pod_name] = runtime

        resource = Resource(
            kind="Pod",
            meta=ObjectMeta(name=pod_name, namespace=DEFAULT_NAMESPACE, labels=dict(runtime.labels)),
            spec={
                "image": runtime.image,
                "memoryLimitBytes": runtime.memory_limit,
                "ownerDeployment": name,
            },
            status=self._pod_status(runtime),
        )
        self.store.create(resource)
        self.trace.emit(
            self.clock.now_ms, "pod_created", pod_name, {"deployment": name, "podIP": pod_ip}
        )
        self._emit_adaptation(runtime)

        delay_ms = s_to_ms(self.settings.pod_startup_delay_seconds)
        self.clock.schedule_in(delay_ms, lambda: self._pod_becomes_running(pod_name))
        return pod_name

    def _pod_becomes_running(self, pod_name: str) -> None:
        runtime = self.pods.get(pod_name)
        if runtime is None or runtime.phase != PHASE_PENDING:
            return
        runtime.phase = PHASE_RUNNING
        self.trace.emit(self.clock.now_ms, "pod_phase", pod_name, {"phase": PHASE_RUNNING})
        self._mirror_pod_status(runtime)

    def remove_pod(self, pod_name: str) -> None:
        runtime = self.pods.pop(pod_name, None)
        if runtime is None:
            return
        runtime.phase = PHASE_TERMINATING
        self.trace.emit(self.clock.now_ms, "pod_removed", pod_name, {"deployment": runtime.deployment})
        try:
            self.store.delete("Pod", DEFAULT_NAMESPACE, pod_name)
        except KeyError:
            pass

    def running_pods(self, selector: dict[str, str] | None = None, deployment: str | None = None) -> list[PodRuntime]:
        out = []
        for name in sorted(self.pods):
            p = self.pods[name]
            if p.phase != PHASE_RUNNING:
                continue
            if deployment is not None and p.deployment != deployment:
                continue
            if selector and not all(p.labels.get(k) == v for k, v in selector.items()):
                continue
            out.append(p)
        return out

    # -- adaptation endpoints ----------------------------------------------

    def query_adaptation(self, pod_name: str) -> AdaptationState:
        runtime = self._ready_pod(pod_name)
        return AdaptationState(**vars(runtime.adaptation))

    def adapt_pod(self, pod_name: str, action: dict[str, str]) -> None:
        """POST-style adaptation endpoint; may raise InjectedFailureError."""
        runtime = self._ready_pod(pod_name)
        if self.fail_adapt_call():
            self.trace.emit(
                self.clock.now_ms, "adapt_call", pod_name, {"action": action, "outcome": "injected-failure"}
            )
            raise InjectedFailureError(f"adapt call to {pod_name} dropped")
        if "setPowerMode" in action:
            mode = action["setPowerMode"]
            if mode not in ("high", "low"):
                raise ValueError(f"invalid power mode: {mode!r}")
            runtime.adaptation.low_power_enabled = mode == "low"
        elif "setFlavor" in action:
            runtime.adaptation.active_flavor = action["setFlavor"]
        elif "setCache" in action:
            runtime.adaptation.cache_enabled = bool(action["setCache"])
        else:
            raise ValueError(f"unknown adaptation action: {action!r}")
        self.trace.emit(self.clock.now_ms, "adapt_call", pod_name, {"action": action, "outcome": "ok"})
        self._emit_adaptation(runtime)

    def get_training_progress(self, pod_name: str) -> float:
        return self._ready_pod(pod_name).training_progress

    def _ready_pod(self, pod_name: str) -> PodRuntime:
        runtime = self.pods.get(pod_name)
        if runtime is None:
            raise PodNotFoundError(pod_name)
        if runtime.phase != PHASE_RUNNING:
            raise PodNotReadyError(f"{pod_name} is {runtime.phase}")
        return runtime

    # -- broadcast events ----------------------------------------------------

    def emit_broadcast(self, event: BroadcastEvent) -> None:
        self._broadcast_log.append(event)
        self.trace.emit(self.clock.now_ms, "broadcast", event.event_type, event.to_dict())
        if event.event_type == OOM:
            deployment = event.payload.get("deployment")
            if not deployment and event.source_pod in self.pods:
                deployment = self.pods[event.source_pod].deployment
            if deployment:
                self.oom_queues.setdefault(deployment, []).append(event)

    def drain_oom_events(self, deployment: str) -> list[BroadcastEvent]:
        """Hand pending OutOfMemory events to the consuming reconcile."""
        events = self.oom_queues.get(deployment, [])
        self.oom_queues[deployment] = []
        return events

    def broadcasts_since(self, start_ms: int) -> list[BroadcastEvent]:
        start_s = start_ms // 1000
        return [e for e in self._broadcast_log if e.at_epoch_seconds >= start_s]

    def tick(self, until_epoch_seconds: int) -> list[BroadcastEvent]:
        """Advance logical time, firing due tasks; returns window broadcasts."""
        start = len(self._broadcast_log)
        self.clock.run_until(s_to_ms(until_epoch_seconds))
        return self._broadcast_log[start:]

    # -- workload and dynamics -----------------------------------------------

    def configure(
        self,
        workloads: list[WorkloadConfig],
        memory_models: list[MemoryModelConfig],
        database_script: dict[str, list[int]] | None = None,
        ddos: dict[str, float] | None = None,
    ) -> None:
        self.workloads = workloads
        self.memory_models = {m.deployment: m for m in memory_models}
        self._db_script = database_script or {}
        if ddos:
            self._ddos_threshold = float(ddos.get("ratePerSecondThreshold", 0))
            self._ddos_sustain_s = int(ddos.get("sustainSeconds", 0))

    def start(self) -> None:
        """Schedule the background tasks declared by the scenario."""
        self.clock.schedule_in(s_to_ms(self.settings.metrics_sync_seconds), self._metrics_tick)
        for w in self.workloads:
            self._schedule_next_arrival(w)
        for m in self.memory_models.values():
            for spike in m.spikes:
                at = s_to_ms(int(spike["atSeconds"]))
                self.clock.schedule_at(at, self._make_spike_task(spike))
        for at_s in self._db_script.get("unhealthyAtSeconds", []):
            self.clock.schedule_at(s_to_ms(int(at_s)), lambda: self._set_db_health(False))
        for at_s in self._db_script.get("healthyAtSeconds", []):
            self.clock.schedule_at(s_to_ms(int(at_s)), lambda: self._set_db_health(True))
        if self._ddos_threshold > 0:
            self.clock.schedule_in(1000, self._ddos_tick)

    def _make_spike_task(self, spike: dict[str, Any]):
        def task() -> None:
            runtime = self.pods.get(spike["pod"])
            if runtime is None:
                return
            runtime.memory_used = float(spike["setBytes"])
            self._check_oom(runtime)
            self._mirror_pod_status(runtime)

        return task

    def _segment_rate(self, model: MemoryModelConfig, at_s: int) -> float:
        rate = 0.0
        for seg in model.segments:
            if at_s >= seg["fromSeconds"]:
                rate = float(seg["bytesPerSecond"])
        return rate

    def _metrics_tick(self) -> None:
        dt_s = self.settings.metrics_sync_seconds
        now_s = self.clock.now_s
        for name in sorted(self.pods):
            runtime = self.pods[name]
            if runtime.phase != PHASE_RUNNING:
                continue
            model = self.memory_models.get(runtime.deployment)
            if model is not None:
                rate = self._segment_rate(model, now_s)
                if runtime.adaptation.low_power_enabled:
                    rate /= 2.0  # low power halves memory growth
                runtime.memory_used = max(0.0, runtime.memory_used + rate * dt_s)
                self._check_oom(runtime)
            self._mirror_pod_status(runtime)
        self.clock.schedule_in(s_to_ms(dt_s), self._metrics_tick)

    def _check_oom(self, runtime: PodRuntime) -> None:
        # Edge-triggered: one event per excursion above the limit.
        if runtime.memory_used > runtime.memory_limit:
            if not runtime.oom_above:
                runtime.oom_above = True
                self.emit_broadcast(
                    BroadcastEvent(
                        event_type=OOM,
                        source_pod=runtime.name,
                        at_epoch_seconds=self.clock.now_s,
                        payload={"deployment": runtime.deployment},
                    )
                )
        else:
            runtime.oom_above = False

    def _set_db_health(self, healthy: bool) -> None:
        if not healthy and self._db_healthy:
            self.emit_broadcast(
                BroadcastEvent(DATABASE_UNAVAILABLE, "", self.clock.now_s, {})
            )
        self._db_healthy = healthy

    def _ddos_tick(self) -> None:
        now_s = self.clock.now_s
        rate = self._arrivals_this_second.pop(now_s - 1, 0)
        if rate > self._ddos_threshold:
            if self._ddos_above_since is None:
                self._ddos_above_since = now_s - 1
            sustained = now_s - self._ddos_above_since
            if sustained >= self._ddos_sustain_s and not self._ddos_signaled:
                self._ddos_signaled = True
                self.emit_broadcast(BroadcastEvent(DDOS_ATTACK, "", now_s, {"ratePerSecond": str(rate)}))
        else:
            self._ddos_above_since = None
            self._ddos_signaled = False
        self.clock.schedule_in(1000, self._ddos_tick)

    def _arrival_rate(self, workload: WorkloadConfig, at_s: int) -> float:
        rate = 0.0
        for seg in workload.arrival:
            if at_s >= seg["fromSeconds"]:
                rate = float(seg["ratePerSecond"])
        return rate

    def _schedule_next_arrival(self, workload: WorkloadConfig) -> None:
        rate = self._arrival_rate(workload, self.clock.now_s)
        if rate <= 0:
            # Idle; re-check each second for a later segment to kick in.
            self.clock.schedule_in(1000, lambda: self._schedule_next_arrival(workload))
            return
        interval_ms = max(1, int(round(1000.0 / rate)))
        self.clock.schedule_in(interval_ms, lambda: self._fire_arrival(workload))

    def _fire_arrival(self, workload: WorkloadConfig) -> None:
        self._request_seq += 1
        request = SimRequest(request_id=f"r{self._request_seq}", origin=workload.name)
        request = self.request_decorator(workload, request)
        sec = self.clock.now_s
        self._arrivals_this_second[sec] = self._arrivals_this_second.get(sec, 0) + 1
        try:
            response = self.route_request(workload.service, request)
        except NoBackendsError:
            response = None
        if response is not None:
            final = response
            req = request

            def deliver() -> None:
                for observer in self.completion_observers:
                    observer(workload.name, req, final)

            self.clock.schedule_in(final.latency_ms, deliver)
        self._schedule_next_arrival(workload)

    # -- routing ---------------------------------------------------------------

    def route_request(self, service_name: str, request: SimRequest) -> SimResponse:
        service = self.store.try_get("Service", DEFAULT_NAMESPACE, service_name)
        if service is None:
            raise NoBackendsError(f"service {service_name} does not exist")
        selector = service.spec.get("selector", {})
        backends = self.running_pods(selector=selector)
        if not backends:
            fallback = service.spec.get("fallbackService")
            if fallback:
                return self.route_request(fallback, request)
            self.trace.emit(
                self.clock.now_ms,
                "request_failed",
                service_name,
                {"requestId": request.request_id, "reason": "no-backends", "mirrored": request.mirrored},
            )
            raise NoBackendsError(f"service {service_name} has no running backends")

        pod = backends[self._next_rr(service_name, "main") % len(backends)]
        response = self._serve(service_name, pod, request)

        mirror_to = service.spec.get("mirrorTo")
        if mirror_to and not request.mirrored:
            shadows = self.running_pods(deployment=mirror_to)
            if shadows:
                shadow = shadows[self._next_rr(service_name, "mirror") % len(shadows)]
                copy_req = SimRequest(
                    request_id=request.request_id + ":m",
                    headers=dict(request.headers),
                    origin=request.origin,
                    mirrored=True,
                )
                self._serve(service_name, shadow, copy_req)
        return response

    def _next_rr(self, service: str, lane: str) -> int:
        key = f"{service}:{lane}"
        n = self._rr_counters.get(key, 0)
        self._rr_counters[key] = n + 1
        return n

    def _serve(self, service_name: str, pod: PodRuntime, request: SimRequest) -> SimResponse:
        self.trace.emit(
            self.clock.now_ms,
            "request_routed",
            service_name,
            {
                "requestId": request.request_id,
                "pod": pod.name,
                "mirrored": request.mirrored,
                "origin": request.origin,
            },
        )
        handler = self.service_handlers.get(service_name)
        if handler is not None:
            payload, request_speedup, downstream = handler(pod, request)
        else:
            payload, request_speedup, downstream = {"service": service_name, "variant": "base"}, 1.0, []

        if pod.adaptation.low_power_enabled:
            factor = self.settings.low_power_speedup
        elif request_speedup > 1.0:
            factor = request_speedup
        else:
            factor = 1.0
        latency_ms = max(1, int(round(pod.base_latency_ms / factor)))

        if request.mirrored:
            pod.training_progress = min(
                1.0, pod.training_progress + self.settings.training_gain_per_mirrored_request
            )

        pod.in_flight += 1
        name = pod.name
        req_id = request.request_id
        mirrored = request.mirrored

        def complete() -> None:
            pod.in_flight -= 1
            if pod.in_flight < 0:
                raise SimInvariantError(f"negative in-flight count on {name}")
            pod.recent_latencies.append(latency_ms)
            self.trace.emit(
                self.clock.now_ms,
                "request_completed",
                service_name,
                {"requestId": req_id, "pod": name, "latencyMs": latency_ms, "mirrored": mirrored},
            )

        self.clock.schedule_in(latency_ms, complete)

        for downstream_service, downstream_request in downstream:
            try:
                self.route_request(downstream_service, downstream_request)
            except NoBackendsError:
                pass  # already traced as a failed request

        return SimResponse(request_id=req_id, pod=name, payload=payload, latency_ms=latency_ms)

    # -- status mirroring --------------------------------------------------------

    def _pod_status(self, runtime: PodRuntime) -> dict[str, Any]:
        return {
            "phase": runtime.phase,
            "podIP": runtime.pod_ip,
            "memoryUsedBytes": int(runtime.memory_used),
            "responseTimeMs": round(runtime.mean_latency_ms(), 3),
            "powerMode": "low" if runtime.adaptation.low_power_enabled else "high",
            "inFlightRequests": runtime.in_flight,
        }

    def _mirror_pod_status(self, runtime: PodRuntime) -> None:
        resource = self.store.try_get("Pod", DEFAULT_NAMESPACE, runtime.name)
        if resource is None:
            return
        status = self._pod_status(runtime)
        if resource.status == status:
            return
        resource.status = status
        with self.store.as_actor("sim"):
            self.store.update_status(resource, resource.meta.resource_version)

    def _emit_adaptation(self, runtime: PodRuntime) -> None:
        self.trace.emit(
            self.clock.now_ms, "pod_adaptation", runtime.name, runtime.adaptation.to_dict()
        )
