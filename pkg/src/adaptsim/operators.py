"""The two concrete adaptation operators.

The low-power operator aggregates OutOfMemory events in a rolling window
gated on the autoscaler being maxed out, flips the desired low-power flag
at a threshold, and from then on enforces the flag across every running
pod of the target deployment via the pods' adaptation endpoints.

The blue-green operator switches the recommender's model flavor with a
dark launch: the new color trains on mirrored traffic while the old color
keeps serving, the service is switched only once training completes, and
the old color is decommissioned only after draining its in-flight work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .cluster import InjectedFailureError, PodNotFoundError, PodNotReadyError, SimCluster
from .engine import Controller, ReconcileRequest, ReconcileResult
from .store import DEFAULT_NAMESPACE, ObjectMeta, Resource, ResourceStore

LOWPOWER_REQUEUE_S = 60
BLUEGREEN_ACTIVE_REQUEUE_S = 10
BLUEGREEN_STABLE_REQUEUE_S = 60

PHASE_STABLE = "Stable"
PHASE_TRAINING = "Training"
PHASE_SWITCHING = "Switching"  # accepted status value; the machine goes Training -> Draining directly
PHASE_DRAINING = "Draining"

OTHER_COLOR = {"blue": "green", "green": "blue"}


@dataclass
class LowPowerConfig:
    config_name: str
    target_deployment: str
    target_hpa: str | None = None
    oom_threshold: int = 3

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "LowPowerConfig":
        return cls(
            config_name=obj["config"],
            target_deployment=obj["targetDeployment"],
            target_hpa=obj.get("targetHpa"),
            oom_threshold=int(obj.get("oomThreshold", 3)),
        )


class LowPowerOperator(Controller):
    name = "lowpower"
    primary_kind = "TeaStoreConfig"
    watched_kinds = frozenset({"TeaStoreConfig", "HorizontalPodAutoscaler"})

    def __init__(self, store: ResourceStore, cluster: SimCluster, config: LowPowerConfig):
        self.store = store
        self.cluster = cluster
        self.config = config

    def reconcile(self, request: ReconcileRequest) -> ReconcileResult:
        if request.name != self.config.config_name:
            return ReconcileResult()
        resource = self.store.try_get("TeaStoreConfig", request.namespace, request.name)
        if resource is None:
            return ReconcileResult(requeue_after_seconds=LOWPOWER_REQUEUE_S)

        if not resource.spec.get("lowPowerAdaptation", False):
            resource, error = self._aggregate(resource)
            if error is not None:
                return ReconcileResult(error=error)
            if not resource.spec.get("lowPowerAdaptation", False):
                return ReconcileResult(requeue_after_seconds=LOWPOWER_REQUEUE_S)
            # The flag just flipped: enforce in the same pass, mirroring the
            # reference controller's layout.

        error = self._enforce(request.namespace)
        if error is not None:
            return ReconcileResult(error=error)
        return ReconcileResult(requeue_after_seconds=LOWPOWER_REQUEUE_S)

    # -- event aggregation (spec.lowPowerAdaptation == false) -------------

    def _aggregate(self, resource: Resource) -> tuple[Resource, str | None]:
        gate_open = False
        if self.config.target_hpa is not None:
            hpa = self.store.try_get("HorizontalPodAutoscaler", resource.meta.namespace, self.config.target_hpa)
            if hpa is None:
                return resource, f"target hpa {self.config.target_hpa} not found"
            gate_open = hpa.status.get("currentReplicas") == hpa.spec.get("maxReplicas")

        # Pending events are consumed by this reconcile either way; counting
        # them while the autoscaler can still scale out would trigger
        # adaptation from stale history.
        events = self.cluster.drain_oom_events(self.config.target_deployment)
        if not gate_open:
            if events:
                self.cluster.trace.emit(
                    self.cluster.clock.now_ms,
                    "oom_discarded",
                    self.config.config_name,
                    {"count": len(events), "reason": "hpa-below-max"},
                )
            return resource, None
        if not events:
            return resource, None

        interval = int(resource.spec.get("timeInterval", 300))
        count = int(resource.status.get("outOfMemoryCount", 0))
        epoch_start = int(resource.status.get("epochStartTimeInterval", 0))
        counted = []
        for event in sorted(events, key=lambda e: e.at_epoch_seconds):
            if event.at_epoch_seconds > epoch_start + interval:
                count = 0
                epoch_start = event.at_epoch_seconds
            count += 1
            counted.append({"at": event.at_epoch_seconds, "sourcePod": event.source_pod})

        resource.status["outOfMemoryCount"] = count
        resource.status["epochStartTimeInterval"] = epoch_start
        outcome = self.store.update_status(resource, resource.meta.resource_version)
        if not outcome.accepted:
            return resource, "conflict writing outOfMemoryCount"
        resource.meta.resource_version = outcome.new_resource_version
        self.cluster.trace.emit(
            self.cluster.clock.now_ms,
            "oom_counted",
            self.config.config_name,
            {"events": counted, "outOfMemoryCount": count, "epochStartTimeInterval": epoch_start},
        )

        if count >= self.config.oom_threshold:
            resource.spec["lowPowerAdaptation"] = True
            outcome = self.store.update_spec(resource, resource.meta.resource_version)
            if not outcome.accepted:
                return resource, "conflict enabling lowPowerAdaptation"
            resource.meta.resource_version = outcome.new_resource_version
        return resource, None

    # -- fleet enforcement (spec.lowPowerAdaptation == true) ----------------

    def _enforce(self, namespace: str) -> str | None:
        deployment = self.store.try_get("Deployment", namespace, self.config.target_deployment)
        if deployment is None:
            return f"target deployment {self.config.target_deployment} not found"
        selector = deployment.spec.get("podTemplate", {}).get("labels", {})
        for pod in self.store.list("Pod", namespace, selector):
            if pod.status.get("phase") != "Running":
                continue
            try:
                state = self.cluster.query_adaptation(pod.meta.name)
                if not state.low_power_enabled:
                    self.cluster.adapt_pod(pod.meta.name, {"setPowerMode": "low"})
            except (InjectedFailureError, PodNotFoundError, PodNotReadyError):
                continue  # next requeue round retries; never abort the loop
        return None


@dataclass
class BlueGreenConfig:
    model_name: str
    service: str
    deployment_prefix: str
    selector_base: dict[str, str]
    fallback_service: str | None = None

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "BlueGreenConfig":
        return cls(
            model_name=obj["model"],
            service=obj["service"],
            deployment_prefix=obj["deploymentPrefix"],
            selector_base=dict(obj["selectorBase"]),
            fallback_service=obj.get("fallbackService"),
        )


class BlueGreenOperator(Controller):
    name = "bluegreen"
    primary_kind = "RecommenderModel"
    watched_kinds = frozenset({"RecommenderModel"})

    def __init__(self, store: ResourceStore, cluster: SimCluster, config: BlueGreenConfig):
        self.store = store
        self.cluster = cluster
        self.config = config

    def reconcile(self, request: ReconcileRequest) -> ReconcileResult:
        if request.name != self.config.model_name:
            return ReconcileResult()
        model = self.store.try_get("RecommenderModel", request.namespace, request.name)
        if model is None:
            return ReconcileResult()
        service = self.store.try_get("Service", request.namespace, self.config.service)
        if service is None:
            return ReconcileResult(error=f"service {self.config.service} not found")

        phase = model.status.get("phase", PHASE_STABLE)
        if phase == PHASE_STABLE:
            return self._from_stable(model, service)
        if phase == PHASE_TRAINING:
            return self._from_training(model, service)
        if phase in (PHASE_SWITCHING, PHASE_DRAINING):
            return self._from_draining(model)
        return ReconcileResult(error=f"unknown phase {phase!r}")

    def _colors(self, model: Resource) -> tuple[str, str]:
        active = model.status.get("activeColor", "blue")
        return active, OTHER_COLOR[active]

    def _deployment_name(self, color: str) -> str:
        return f"{self.config.deployment_prefix}-{color}"

    def _from_stable(self, model: Resource, service: Resource) -> ReconcileResult:
        wanted = model.spec.get("modelFlavor")
        if wanted == model.status.get("activeFlavor"):
            return ReconcileResult(requeue_after_seconds=BLUEGREEN_STABLE_REQUEUE_S)

        active_color, new_color = self._colors(model)
        active = self.store.try_get("Deployment", model.meta.namespace, self._deployment_name(active_color))
        if active is None:
            return ReconcileResult(error=f"active deployment {self._deployment_name(active_color)} not found")

        new_name = self._deployment_name(new_color)
        if self.store.try_get("Deployment", model.meta.namespace, new_name) is None:
            template = dict(active.spec.get("podTemplate", {}))
            template["flavor"] = wanted
            template["image"] = f"{self.config.deployment_prefix}-{wanted}:1"
            template["labels"] = {**self.config.selector_base, "color": new_color}
            deployment = Resource(
                kind="Deployment",
                meta=ObjectMeta(name=new_name, namespace=model.meta.namespace, labels=dict(template["labels"])),
                spec={"replicas": active.spec.get("replicas", 1), "podTemplate": template},
                status={},
            )
            self.store.create(deployment)

        changed = False
        if service.spec.get("mirrorTo") != new_name:
            service.spec["mirrorTo"] = new_name
            changed = True
        if model.spec.get("instantSwitch", False):
            fallback_selector = self._fallback_selector(model.meta.namespace)
            if fallback_selector is None:
                return ReconcileResult(error="instantSwitch requires a fallback service")
            if service.spec.get("selector") != fallback_selector:
                service.spec["selector"] = fallback_selector
                changed = True
        if changed:
            outcome = self.store.update_spec(service, service.meta.resource_version)
            if not outcome.accepted:
                return ReconcileResult(error="conflict configuring service for dark launch")

        model.status["phase"] = PHASE_TRAINING
        model.status["trainingProgress"] = 0.0
        outcome = self.store.update_status(model, model.meta.resource_version)
        if not outcome.accepted:
            return ReconcileResult(error="conflict entering Training")
        return ReconcileResult(requeue_after_seconds=BLUEGREEN_ACTIVE_REQUEUE_S)

    def _fallback_selector(self, namespace: str) -> dict[str, str] | None:
        if not self.config.fallback_service:
            return None
        fallback = self.store.try_get("Service", namespace, self.config.fallback_service)
        if fallback is None:
            return None
        return dict(fallback.spec.get("selector", {}))

    def _from_training(self, model: Resource, service: Resource) -> ReconcileResult:
        _, new_color = self._colors(model)
        new_name = self._deployment_name(new_color)
        readings = []
        for pod in self.store.list("Pod", model.meta.namespace):
            if pod.spec.get("ownerDeployment") != new_name or pod.status.get("phase") != "Running":
                continue
            try:
                readings.append(self.cluster.get_training_progress(pod.meta.name))
            except (PodNotFoundError, PodNotReadyError):
                continue
        progress = round(min(readings), 6) if readings else 0.0

        if progress < 1.0:
            if model.status.get("trainingProgress") != progress:
                model.status["trainingProgress"] = progress
                outcome = self.store.update_status(model, model.meta.resource_version)
                if not outcome.accepted:
                    return ReconcileResult(error="conflict recording training progress")
            return ReconcileResult(requeue_after_seconds=BLUEGREEN_ACTIVE_REQUEUE_S)

        # Trained: switch client traffic to the new color and stop mirroring.
        service.spec["selector"] = {**self.config.selector_base, "color": new_color}
        service.spec.pop("mirrorTo", None)
        outcome = self.store.update_spec(service, service.meta.resource_version)
        if not outcome.accepted:
            return ReconcileResult(error="conflict switching service selector")
        model.status["trainingProgress"] = 1.0
        model.status["phase"] = PHASE_DRAINING
        outcome = self.store.update_status(model, model.meta.resource_version)
        if not outcome.accepted:
            return ReconcileResult(error="conflict entering Draining")
        return ReconcileResult(requeue_after_seconds=BLUEGREEN_ACTIVE_REQUEUE_S)

    def _from_draining(self, model: Resource) -> ReconcileResult:
        active_color, new_color = self._colors(model)
        old_name = self._deployment_name(active_color)
        namespace = model.meta.namespace
        old = self.store.try_get("Deployment", namespace, old_name)
        if old is not None:
            old_pods = [
                p for p in self.store.list("Pod", namespace) if p.spec.get("ownerDeployment") == old_name
            ]
            if any(p.status.get("inFlightRequests", 0) > 0 for p in old_pods):
                return ReconcileResult(requeue_after_seconds=BLUEGREEN_ACTIVE_REQUEUE_S)
            self.store.delete("Deployment", namespace, old_name)

        new = self.store.try_get("Deployment", namespace, self._deployment_name(new_color))
        if new is None:
            return ReconcileResult(error=f"new deployment {self._deployment_name(new_color)} missing")
        model.status["activeColor"] = new_color
        model.status["activeFlavor"] = new.spec.get("podTemplate", {}).get("flavor", "")
        model.status["phase"] = PHASE_STABLE
        outcome = self.store.update_status(model, model.meta.resource_version)
        if not outcome.accepted:
            return ReconcileResult(error="conflict completing switch")
        return ReconcileResult(requeue_after_seconds=BLUEGREEN_STABLE_REQUEUE_S)
