"""Built-in controllers: deployment replica management and the horizontal
autoscaler. These model the cluster's own control plane, so they always
run level-based regardless of the mode chosen for adaptation operators.
"""

from __future__ import annotations

from .cluster import SimCluster, hpa_desired_replicas, PHASE_RUNNING
from .engine import (
    Controller,
    GROUP_BUILTIN,
    ReconcileRequest,
    ReconcileResult,
)
from .store import ChangeNotification, NotFoundError, ResourceStore


class DeploymentController(Controller):
    """Keeps each deployment's pod set sized to spec.replicas and its
    readyReplicas status current. Scale-down removes the newest pods first."""

    name = "deployment-controller"
    primary_kind = "Deployment"
    watched_kinds = frozenset({"Deployment", "Pod"})
    group = GROUP_BUILTIN

    def __init__(self, store: ResourceStore, cluster: SimCluster):
        self.store = store
        self.cluster = cluster

    def map_notification(self, note: ChangeNotification, store: ResourceStore):
        if note.kind == "Deployment":
            return [ReconcileRequest("Deployment", note.namespace, note.name)]
        pod = store.try_get("Pod", note.namespace, note.name)
        if pod is not None and pod.spec.get("ownerDeployment"):
            return [ReconcileRequest("Deployment", note.namespace, pod.spec["ownerDeployment"])]
        # Deleted or orphaned pod: reconcile everything we manage.
        return [
            ReconcileRequest("Deployment", d.meta.namespace, d.meta.name)
            for d in store.list("Deployment", note.namespace)
        ]

    def reconcile(self, request: ReconcileRequest) -> ReconcileResult:
        deployment = self.store.try_get("Deployment", request.namespace, request.name)
        owned = [
            p
            for p in self.store.list("Pod", request.namespace)
            if p.spec.get("ownerDeployment") == request.name
        ]
        if deployment is None:
            for pod in owned:
                self.cluster.remove_pod(pod.meta.name)
            return ReconcileResult()

        desired = int(deployment.spec.get("replicas", 0))
        if len(owned) < desired:
            for _ in range(desired - len(owned)):
                self.cluster.provision_pod(deployment)
        elif len(owned) > desired:
            for pod in sorted(owned, key=self._pod_index, reverse=True)[: len(owned) - desired]:
                self.cluster.remove_pod(pod.meta.name)

        ready = sum(
            1
            for p in self.store.list("Pod", request.namespace)
            if p.spec.get("ownerDeployment") == request.name
            and p.status.get("phase") == PHASE_RUNNING
        )
        if deployment.status.get("readyReplicas") != ready:
            deployment.status["readyReplicas"] = ready
            outcome = self.store.update_status(deployment, deployment.meta.resource_version)
            if outcome.conflict:
                return ReconcileResult(error="conflict updating readyReplicas")
        return ReconcileResult(requeue_after_seconds=5)

    @staticmethod
    def _pod_index(pod) -> int:
        try:
            return int(pod.meta.name.rsplit("-", 1)[1])
        except (IndexError, ValueError):
            return 0


class HpaController(Controller):
    """Periodic autoscaler evaluation.

    desired = clamp(ceil(current x utilization / target), min, max), where
    utilization is the mean memory ratio over the target's running pods.
    Skips the scaling decision while no pod is running (no metrics yet).
    """

    name = "hpa-controller"
    primary_kind = "HorizontalPodAutoscaler"
    watched_kinds = frozenset({"HorizontalPodAutoscaler"})
    group = GROUP_BUILTIN

    def __init__(self, store: ResourceStore, cluster: SimCluster):
        self.store = store
        self.cluster = cluster

    def reconcile(self, request: ReconcileRequest) -> ReconcileResult:
        hpa = self.store.try_get(request.kind, request.namespace, request.name)
        if hpa is None:
            return ReconcileResult()
        interval = int(hpa.spec.get("evaluateEverySeconds", 15))
        target = hpa.spec.get("targetDeployment", "")
        try:
            deployment = self.store.get("Deployment", request.namespace, target)
        except NotFoundError:
            return ReconcileResult(error=f"target deployment {target} not found")

        current = int(deployment.spec.get("replicas", 0))
        running = self.cluster.running_pods(deployment=target)
        utilization = None
        if running:
            ratios = [p.memory_used / p.memory_limit for p in running]
            utilization = sum(ratios) / len(ratios)

        min_r = int(hpa.spec.get("minReplicas", 1))
        max_r = int(hpa.spec.get("maxReplicas", 1))
        if utilization is not None:
            desired = hpa_desired_replicas(current, utilization, float(hpa.spec["targetUtilizationRatio"]), min_r, max_r)
            if desired != current:
                self.trace_eval(hpa.meta.name, current, utilization, desired)
                deployment.spec["replicas"] = desired
                outcome = self.store.update_spec(deployment, deployment.meta.resource_version)
                if outcome.conflict:
                    return ReconcileResult(error="conflict scaling deployment")
                current = desired

        status = {
            "currentReplicas": current,
            "currentUtilizationRatio": round(utilization, 6) if utilization is not None else 0.0,
        }
        if hpa.status != status:
            hpa.status = status
            outcome = self.store.update_status(hpa, hpa.meta.resource_version)
            if outcome.conflict:
                return ReconcileResult(error="conflict updating hpa status")
        return ReconcileResult(requeue_after_seconds=interval)

    def trace_eval(self, name: str, current: int, utilization: float, desired: int) -> None:
        self.cluster.trace.emit(
            self.cluster.clock.now_ms,
            "hpa_eval",
            name,
            {"currentReplicas": current, "utilization": round(utilization, 6), "desired": desired},
        )
